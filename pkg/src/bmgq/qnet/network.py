"""GATDDQN forward pass and exact backward pass in plain numpy.

Graphs are handled in a packed form: slot 0 is always the ego, followed by
the real neighbours, followed by one slot standing in for every dummy node.
Dummies are identical zero vectors, so their softmax contribution is a
single term weighted by ``log(count)``; the result equals running the
attention over all K nodes (see ``pack_graph(..., compress=False)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..core import STATE_DIM

AGGREGATORS = ("gat_transformer", "mean", "max", "none")


@dataclass(frozen=True)
class NetConfig:
    in_dim: int = STATE_DIM
    hidden: int = 64
    heads: int = 3
    head_width: int = 128
    n_actions: int = 2
    aggregator: str = "gat_transformer"

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.head_width != 2 * self.hidden:
            raise ValueError("head_width must equal 2 * hidden ([ego || aggregate] feeds the Q-head)")

    @property
    def uses_graph(self) -> bool:
        return self.aggregator != "none"

    def layer_shapes(self) -> Dict[str, tuple]:
        """Parameter names and shapes in declaration (= checkpoint) order."""
        f, d, w = self.in_dim, self.hidden, self.head_width
        shapes = {"msg.W": (f, d), "msg.b": (d,)}
        if self.uses_graph:
            for h in range(self.heads):
                if self.aggregator == "gat_transformer":
                    shapes[f"attn{h}.Wq"] = (d, d)
                    shapes[f"attn{h}.bq"] = (d,)
                    shapes[f"attn{h}.Wk"] = (d, d)
                    shapes[f"attn{h}.bk"] = (d,)
                shapes[f"attn{h}.Wv"] = (d, d)
                shapes[f"attn{h}.bv"] = (d,)
            shapes["merge.W"] = (self.heads * d, d)
            shapes["merge.b"] = (d,)
        shapes.update({"q1.W": (w, w), "q1.b": (w,), "q2.W": (w, w), "q2.b": (w,),
                       "q3.W": (w, self.n_actions), "q3.b": (self.n_actions,)})
        return shapes


class NetworkParams:
    """All learnable arrays of one network, keyed by layer name in declaration order."""

    def __init__(self, config: NetConfig, arrays: Dict[str, np.ndarray]):
        shapes = config.layer_shapes()
        if list(arrays) != list(shapes):
            missing = [k for k in shapes if k not in arrays]
            extra = [k for k in arrays if k not in shapes]
            raise ValueError(f"parameter set does not match config (missing={missing}, extra={extra})")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"layer {name}: shape {arrays[name].shape} != expected {shape}")
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def n_values(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def __eq__(self, other):
        if not isinstance(other, NetworkParams) or other.config != self.config:
            return NotImplemented
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


Gradients = NetworkParams


def init_params(config: NetConfig, rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    arrays = {}
    for name, shape in config.layer_shapes().items():
        if len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-lim, lim, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(config, arrays)


@dataclass
class GraphBatch:
    """Packed graphs: ``x`` (B, M, F) with the ego in slot 0 and per-slot log multiplicities."""

    x: np.ndarray
    logm: np.ndarray
    # per slot, how many original nodes it represents (0 for padding)
    mult: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]


def pack_arrays(ego: np.ndarray, nbrs: np.ndarray, n_real: np.ndarray, k: int,
                mask_dummies: bool = False) -> GraphBatch:
    """Pack graphs stored as ego rows plus zero-padded neighbour rows.

    ``ego`` is (B, F); ``nbrs`` is (B, S, F) holding the ``n_real - 1`` real
    neighbours first; every graph stands for ``k`` nodes in total.
    """
    ego = np.asarray(ego, dtype=np.float64)
    b, f = ego.shape
    n_real = np.asarray(n_real, dtype=np.int64)
    r = int(n_real.max()) - 1 if b else 0
    m = 1 + r + 1
    x = np.zeros((b, m, f))
    x[:, 0] = ego
    if r > 0:
        x[:, 1:1 + r] = nbrs[:, :r]
    mult = np.zeros((b, m))
    mult[:, 0] = 1.0
    if r > 0:
        mult[:, 1:1 + r] = (np.arange(r)[None, :] < (n_real - 1)[:, None])
    n_dummy = k - n_real
    if (n_dummy < 0).any():
        raise ValueError("graph has more real nodes than k")
    if not mask_dummies:
        mult[:, -1] = n_dummy
    with np.errstate(divide="ignore"):
        logm = np.log(mult)
    return GraphBatch(x=x, logm=logm, mult=mult)


def pack_graph(graph, compress: bool = True, mask_dummies: bool = False) -> GraphBatch:
    """Pack one ``MatchGraph``.  ``compress=False`` keeps every one of the K nodes."""
    nodes = np.asarray(graph.nodes, dtype=np.float64)
    if not np.isfinite(nodes).all():
        raise ValueError("graph contains non-finite node features")
    order = [graph.ego_index] + [i for i in range(graph.k) if i != graph.ego_index]
    if not compress:
        x = nodes[order][None]
        mult = np.ones((1, graph.k))
        if mask_dummies:
            mult[0] = graph.real_mask[order].astype(float)
        with np.errstate(divide="ignore"):
            logm = np.log(mult)
        return GraphBatch(x=x, logm=logm, mult=mult)
    real = [i for i in order[1:] if graph.real_mask[i]]
    ego = nodes[graph.ego_index][None]
    nbrs = np.zeros((1, max(len(real), 1), nodes.shape[1]))
    if real:
        nbrs[0, :len(real)] = nodes[real]
    return pack_arrays(ego, nbrs, np.array([1 + len(real)]), graph.k, mask_dummies)


def _softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def aggregate(mode: str, values: np.ndarray, logits: Optional[np.ndarray] = None,
              logm: Optional[np.ndarray] = None) -> tuple:
    """Combine per-slot value vectors (B, M, D) into one vector per graph.

    Returns ``(agg, aux)`` where ``aux`` holds the slot weights (softmax modes)
    or the winning slot per feature (``max``).
    """
    b, m, _ = values.shape
    if logm is None:
        logm = np.zeros((b, m))
    if mode == "gat_transformer":
        if logits is None:
            raise ValueError("gat_transformer aggregation needs attention logits")
        w = _softmax(logits + logm)
        return np.einsum("bm,bmd->bd", w, values), w
    if mode == "mean":
        w = _softmax(logm)
        return np.einsum("bm,bmd->bd", w, values), w
    if mode == "max":
        masked = np.where(np.isfinite(logm)[:, :, None], values, -np.inf)
        idx = masked.argmax(axis=1)
        return np.take_along_axis(values, idx[:, None, :], axis=1)[:, 0], idx
    raise ValueError(f"unknown aggregation mode {mode!r}")


def forward_batch(params: NetworkParams, gb: GraphBatch):
    """Q values (B, n_actions) and the activation cache for ``backward_batch``."""
    cfg = params.config
    p = params.arrays
    x = gb.x
    if not np.isfinite(x).all():
        raise ValueError("non-finite input features")
    h = x @ p["msg.W"] + p["msg.b"]
    he = h[:, 0]
    cache = {"x": x, "h": h, "logm": gb.logm, "heads": []}
    if cfg.uses_graph:
        d = cfg.hidden
        parts = []
        for k in range(cfg.heads):
            v = h @ p[f"attn{k}.Wv"] + p[f"attn{k}.bv"]
            hc = {"v": v}
            if cfg.aggregator == "gat_transformer":
                q = he @ p[f"attn{k}.Wq"] + p[f"attn{k}.bq"]
                kk = h @ p[f"attn{k}.Wk"] + p[f"attn{k}.bk"]
                logits = np.einsum("bmd,bd->bm", kk, q) / np.sqrt(d)
                agg, aux = aggregate("gat_transformer", v, logits, gb.logm)
                hc.update(q=q, k=kk)
            else:
                agg, aux = aggregate(cfg.aggregator, v, None, gb.logm)
            hc["aux"] = aux
            cache["heads"].append(hc)
            parts.append(agg)
        cat = np.concatenate(parts, axis=1)
        s2 = cat @ p["merge.W"] + p["merge.b"]
        cache["cat"] = cat
    else:
        s2 = np.zeros_like(he)
    z0 = np.concatenate([he, s2], axis=1)
    a1 = z0 @ p["q1.W"] + p["q1.b"]
    z1 = np.maximum(a1, 0.0)
    a2 = z1 @ p["q2.W"] + p["q2.b"]
    z2 = np.maximum(a2, 0.0)
    out = z2 @ p["q3.W"] + p["q3.b"]
    cache.update(z0=z0, a1=a1, z1=z1, a2=a2, z2=z2)
    return out, cache


def backward_batch(params: NetworkParams, cache, upstream: np.ndarray, input_grad: bool = False):
    """Exact gradients of ``sum(upstream * Q)`` w.r.t. every parameter.

    With ``input_grad`` the gradient w.r.t. the packed node features is
    returned as well.
    """
    cfg = params.config
    p = params.arrays
    x, h = cache["x"], cache["h"]
    b, m, _ = x.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (b, cfg.n_actions):
        raise ValueError(f"upstream gradient shape {upstream.shape} != {(b, cfg.n_actions)}")
    g = {}
    g["q3.W"] = cache["z2"].T @ upstream
    g["q3.b"] = upstream.sum(0)
    dz2 = upstream @ p["q3.W"].T
    da2 = dz2 * (cache["a2"] > 0)
    g["q2.W"] = cache["z1"].T @ da2
    g["q2.b"] = da2.sum(0)
    dz1 = da2 @ p["q2.W"].T
    da1 = dz1 * (cache["a1"] > 0)
    g["q1.W"] = cache["z0"].T @ da1
    g["q1.b"] = da1.sum(0)
    dz0 = da1 @ p["q1.W"].T
    d = cfg.hidden
    dhe = dz0[:, :d].copy()
    dh = np.zeros_like(h)
    if cfg.uses_graph:
        ds2 = dz0[:, d:]
        g["merge.W"] = cache["cat"].T @ ds2
        g["merge.b"] = ds2.sum(0)
        dcat = ds2 @ p["merge.W"].T
        he = h[:, 0]
        h2 = h.reshape(b * m, d)
        for k, hc in enumerate(cache["heads"]):
            dagg = dcat[:, k * d:(k + 1) * d]
            v, aux = hc["v"], hc["aux"]
            if cfg.aggregator == "max":
                dv = np.zeros_like(v)
                np.put_along_axis(dv, aux[:, None, :], dagg[:, None, :], axis=1)
            else:
                dv = aux[:, :, None] * dagg[:, None, :]
            if cfg.aggregator == "gat_transformer":
                w = aux
                dw = np.einsum("bmd,bd->bm", v, dagg)
                dlog = w * (dw - (w * dw).sum(1, keepdims=True))
                dlog /= np.sqrt(d)
                dk = dlog[:, :, None] * hc["q"][:, None, :]
                dq = np.einsum("bm,bmd->bd", dlog, hc["k"])
                g[f"attn{k}.Wq"] = he.T @ dq
                g[f"attn{k}.bq"] = dq.sum(0)
                dhe += dq @ p[f"attn{k}.Wq"].T
                dk2 = dk.reshape(b * m, d)
                g[f"attn{k}.Wk"] = h2.T @ dk2
                g[f"attn{k}.bk"] = dk2.sum(0)
                dh += dk @ p[f"attn{k}.Wk"].T
            dv2 = dv.reshape(b * m, d)
            g[f"attn{k}.Wv"] = h2.T @ dv2
            g[f"attn{k}.bv"] = dv2.sum(0)
            dh += dv @ p[f"attn{k}.Wv"].T
    dh[:, 0] += dhe
    dh2 = dh.reshape(b * m, d)
    g["msg.W"] = x.reshape(b * m, -1).T @ dh2
    g["msg.b"] = dh2.sum(0)
    grads = NetworkParams(cfg, {name: g[name] for name in cfg.layer_shapes()})
    if input_grad:
        return grads, dh @ p["msg.W"].T
    return grads


def forward(params: NetworkParams, graph, mask_dummies: bool = False):
    """Q values ``[Q_reject, Q_accept]`` for one ``MatchGraph`` (or a bare state vector)."""
    if isinstance(graph, np.ndarray):
        gb = GraphBatch(x=np.asarray(graph, dtype=np.float64).reshape(1, 1, -1), logm=np.zeros((1, 1)),
                        mult=np.ones((1, 1)))
    elif params.config.uses_graph:
        gb = pack_graph(graph, compress=True, mask_dummies=mask_dummies)
    else:
        ego = np.asarray(graph.nodes[graph.ego_index], dtype=np.float64)
        gb = GraphBatch(x=ego.reshape(1, 1, -1), logm=np.zeros((1, 1)), mult=np.ones((1, 1)))
    q, cache = forward_batch(params, gb)
    cache["batch"] = gb
    return q[0], cache


def backward(params: NetworkParams, cache, upstream) -> NetworkParams:
    """Single-graph companion of ``forward``; ``upstream`` is dL/dQ for both actions."""
    up = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    return backward_batch(params, cache, up)


def attention_weights(cache) -> List[np.ndarray]:
    """Per-head slot weights (B, M); only defined for softmax aggregators."""
    return [hc["aux"] for hc in cache["heads"] if hc["aux"].ndim == 2 and hc["aux"].dtype.kind == "f"]
