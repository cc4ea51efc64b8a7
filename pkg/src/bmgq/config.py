"""Experiment configuration: an INI file with [sim], [reward], [net] and [train] sections."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Optional

from .core import RewardParams
from .sim.engine import SimConfig
from .train.loop import TrainConfig

SECTIONS = ("sim", "reward", "net", "train")
# [net] keys live on TrainConfig; [train] holds the rest plus evaluation settings
NET_KEYS = ("aggregator", "hidden", "heads")
EVAL_KEYS = {"eval_episodes": 20, "eval_seed": -1}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending section and key."""


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    train: TrainConfig
    eval_episodes: int = 20
    eval_seed: Optional[int] = None

    def with_train(self, **kw) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **kw))

    def with_sim(self, **kw) -> "ExperimentConfig":
        return replace(self, sim=replace(self.sim, **kw))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        sim = {f.name: getattr(self.sim, f.name) for f in dataclasses.fields(self.sim) if f.name != "reward"}
        cp["sim"] = {k: _fmt(v) for k, v in sim.items()}
        cp["reward"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.sim.reward).items()}
        tr = dataclasses.asdict(self.train)
        cp["net"] = {k: _fmt(tr.pop(k)) for k in NET_KEYS}
        tr["eval_episodes"] = self.eval_episodes
        tr["eval_seed"] = -1 if self.eval_seed is None else self.eval_seed
        cp["train"] = {k: _fmt(v) for k, v in tr.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "; ".join(f"{x}:{y}" for x, y in v)
    return repr(v) if isinstance(v, float) else str(v)


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            pts = [p.strip() for p in raw.split(";") if p.strip()]
            return tuple(tuple(int(c) for c in p.split(":")) for p in pts)
        return raw if raw else None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _defaults(cls) -> Dict[str, object]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


# fields whose default is None but whose values are typed
_TYPED_NONE = {("train", "warmup"): 0, ("sim", "trips_csv"): ""}


def _section(cp: configparser.ConfigParser, name: str, defaults: Dict[str, object]) -> Dict[str, object]:
    if not cp.has_section(name):
        raise ConfigError(f"missing section [{name}] (key '{name}' is required)")
    out = {}
    for key, raw in cp.items(name):
        if key not in defaults:
            raise ConfigError(f"[{name}] {key}: unknown key (known: {', '.join(sorted(defaults))})")
        default = defaults[key]
        if default is None:
            default = _TYPED_NONE.get((name, key), "")
        if (name, key) == ("train", "warmup") and raw.strip() == "":
            out[key] = None
            continue
        out[key] = _convert(name, key, raw, default)
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    extra = [s for s in cp.sections() if s not in SECTIONS]
    if extra:
        raise ConfigError(f"unknown section [{extra[0]}] (expected {', '.join(SECTIONS)})")
    sim_defaults = {k: v for k, v in _defaults(SimConfig).items() if k != "reward"}
    train_defaults = _defaults(TrainConfig)
    net_defaults = {k: train_defaults.pop(k) for k in NET_KEYS}
    train_defaults.update(EVAL_KEYS)
    sim_kw = _section(cp, "sim", sim_defaults)
    reward_kw = _section(cp, "reward", _defaults(RewardParams))
    net_kw = _section(cp, "net", net_defaults)
    train_kw = _section(cp, "train", train_defaults)
    eval_episodes = int(train_kw.pop("eval_episodes", EVAL_KEYS["eval_episodes"]))
    eval_seed = int(train_kw.pop("eval_seed", -1))
    try:
        reward = RewardParams(**reward_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[reward] {exc}") from None
    try:
        sim = SimConfig(reward=reward, **sim_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[sim] {exc}") from None
    try:
        train = TrainConfig(**train_kw, **net_kw)
        train.net_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train] {exc}") from None
    if eval_episodes < 1:
        raise ConfigError("[train] eval_episodes: must be >= 1")
    return ExperimentConfig(sim, train, eval_episodes, None if eval_seed < 0 else eval_seed)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides by re-parsing the merged INI."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(cfg.to_ini())
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section [{section}]")
        cp[section][key] = value
    buf = io.StringIO()
    cp.write(buf)
    return parse_config(buf.getvalue(), "<overrides>")


def default_config() -> ExperimentConfig:
    return ExperimentConfig(SimConfig(), TrainConfig())
