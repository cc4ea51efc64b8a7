"""Dispatch policies: build an epoch's ScoreMatrix from an Observation."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .dispatch import S_EXPLORE, ConstantBias, ScoreMatrix, score
from .qnet.network import GraphBatch, NetworkParams, forward_batch, pack_arrays
from .sim.engine import FeatureSpec, Observation


class GreedyPolicy:
    """Scores every feasible pair by its exact immediate reward; declining scores -c0."""

    features = FeatureSpec(graph=False)

    def scores(self, obs: Observation, rng=None):
        nv, no = len(obs.vehicle_ids), len(obs.order_ids)
        s = np.zeros((nv, no))
        for a, vid in enumerate(obs.vehicle_ids):
            for j, oid in enumerate(obs.order_ids):
                if obs.feasible[a, j]:
                    s[a, j] = obs.accept_reward(vid, oid)
        reject = -obs.sim.config.reward.c0
        return ScoreMatrix(list(obs.vehicle_ids), list(obs.order_ids), s, obs.feasible, np.full(nv, reject)), {}


def pack_rows(params: NetworkParams, egos: np.ndarray, nbrs: np.ndarray, n_real: np.ndarray, k: int,
              mask_dummies: bool) -> GraphBatch:
    if params.config.uses_graph:
        return pack_arrays(egos, nbrs, n_real, k, mask_dummies)
    b = egos.shape[0]
    return GraphBatch(x=egos.reshape(b, 1, -1), logm=np.zeros((b, 1)), mult=np.ones((b, 1)))


class QPolicy:
    """Q-network dispatcher.

    With ``bias_mode="reject_q"`` a pair scores Q_accept minus the vehicle's
    null-candidate Q_reject (the advantage); with ``"none"`` it scores the raw
    Q_accept and the vehicle's no-order score is its Q_reject.  Each feasible
    pair independently takes ``s_explore`` with probability ``epsilon``.
    """

    def __init__(self, params: NetworkParams, features: FeatureSpec, epsilon: float = 0.0,
                 bias_mode="reject_q", s_explore: float = S_EXPLORE, reward_scale: float = 1.0):
        self.params = params
        self.features = features
        self.epsilon = epsilon
        self.bias_mode = bias_mode
        self.s_explore = s_explore
        self.reward_scale = reward_scale

    def scores(self, obs: Observation, rng: np.random.Generator):
        nv, no = len(obs.vehicle_ids), len(obs.order_ids)
        cfg = obs.sim.config
        if nv == 0:
            return ScoreMatrix.empty([], obs.order_ids), {}
        egos, owners, pair_cols = [], [], []
        for a, i in enumerate(obs.available):
            egos.append(obs.ego_row(i, None))
            owners.append(i)
            pair_cols.append(-1)
            for j in np.flatnonzero(obs.feasible[a]):
                egos.append(obs.ego_row(i, obs.orders[j]))
                owners.append(i)
                pair_cols.append(int(j))
        egos = np.array(egos)
        nbrs = np.stack([obs.nbr_rows[i] for i in owners])
        n_real = np.array([obs.n_real(i) for i in owners])
        q, _ = forward_batch(self.params, pack_rows(self.params, egos, nbrs, n_real, cfg.k_graph, cfg.mask_dummies))
        q = q / self.reward_scale
        s = np.zeros((nv, no))
        no_order = np.zeros(nv)
        preds: Dict[Tuple[int, int], float] = {}
        a = -1
        q_rej = 0.0
        for row, (i, j) in enumerate(zip(owners, pair_cols)):
            if j < 0:
                a += 1
                q_rej = float(q[row, 0])
                if self.bias_mode == "reject_q":
                    no_order[a] = 0.0
                elif self.bias_mode == "none":
                    no_order[a] = q_rej
                else:
                    no_order[a] = q_rej - self.bias_mode.c
                continue
            q_acc = float(q[row, 1])
            preds[(obs.vehicle_ids[a], obs.order_ids[j])] = q_acc
            bias = ConstantBias(0.0) if self.bias_mode == "none" else self.bias_mode
            s[a, j] = score(q_acc, q_rej, self.epsilon, rng, self.s_explore, bias)
        return ScoreMatrix(list(obs.vehicle_ids), list(obs.order_ids), s, obs.feasible, no_order), preds
