"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .estimators import KINDS
from .graphs import LORENZ_THETA_INIT, LinearGraph, LinearLossSpec, LorenzGraph, SpecFormatError
from .trainer import Schedule


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _opt(conv):
    return lambda s: None if s == "" else conv(s)


def _tuple(conv):
    return lambda s: tuple(conv(x.strip()) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _key(conv, default=None, **kw):
    return field(default=default, metadata={"conv": conv}, **kw)


@dataclass
class ExperimentConfig:
    graph: str = _key(str, "lorenz")
    horizon: int = _key(int, 2000)
    estimator: str = _key(str, "nres")
    n_workers: int = _key(int, 1)
    window: int | None = _key(_opt(int))
    period: int | None = _key(_opt(int))
    sigma: float = _key(float, 0.04)
    optimizer: str = _key(str, "sgd")
    lr: float = _key(float, 1e-5)
    lr_schedule: str = _key(str, "")
    num_updates: int = _key(int, 0)
    eval_every: int = _key(int, 1)
    train_loss: bool = _key(_bool, True)
    test_samples: int = _key(int, 0)
    test_seed: int | None = _key(_opt(int))
    theta_init: tuple[float, ...] | None = _key(_opt(_tuple(float)))
    log_theta: bool = _key(_bool, False)
    seed: int | None = _key(_opt(int))
    out: str | None = _key(_opt(str))
    k_list: tuple[int, ...] = _key(_tuple(int), ())
    mc: int = _key(int, 0)
    n_average: int = _key(int, 1)
    variance_estimators: tuple[str, ...] = _key(_tuple(str), ())

    # -- text round trip

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values, problems, seen = {}, [], set()
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {n}: expected 'key = value'")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                problems.append(f"line {n}: unknown key {key!r}")
                continue
            if key in seen:
                problems.append(f"line {n}: duplicate key {key!r}")
                continue
            seen.add(key)
            try:
                values[key] = fields[key].metadata["conv"](value)
            except ValueError as err:
                problems.append(f"line {n}: bad value for {key}: {err}")
        if problems:
            raise ConfigError(problems)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError([f"cannot read config {path}: {err}"]) from None
        return cls.parse(text)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- validation and construction

    def is_lorenz(self) -> bool:
        return self.graph == "lorenz"

    def load_spec(self) -> LinearLossSpec:
        return LinearLossSpec.load(self.graph)

    def build_graph(self):
        if self.is_lorenz():
            return LorenzGraph(horizon=self.horizon)
        return LinearGraph(self.load_spec())

    def theta0(self, graph):
        if self.theta_init is not None:
            return self.theta_init
        if self.is_lorenz():
            return LORENZ_THETA_INIT
        return (0.0,) * graph.param_dim

    def problems(self, *, need_seed: bool = True, task: str = "train") -> list[str]:
        """Every violated constraint, so a bad config can be fixed in one pass."""
        out = []
        T, d = self.horizon, None
        if not self.is_lorenz():
            try:
                spec = self.load_spec()
                T, d = spec.horizon, spec.param_dim
            except (OSError, SpecFormatError) as err:
                out.append(f"graph: cannot load linear spec {self.graph!r}: {err}")
                T = None
        else:
            d = 2
            if self.horizon < 1:
                out.append("horizon must be >= 1")
                T = None
        if self.estimator not in KINDS:
            out.append(f"estimator must be one of {', '.join(KINDS)}")
        kinds = self.variance_estimators if task == "variance" and self.variance_estimators else (self.estimator,)
        for k in kinds:
            if k not in KINDS:
                out.append(f"variance_estimators: unknown estimator {k!r}")
        online = any(k in ("tes", "pes", "gpes", "nres") for k in kinds) or task == "sweep-k"
        if online:
            if self.window is None or self.window < 1:
                out.append("window must be a positive integer for online estimators")
            elif T is not None and T % self.window:
                out.append(f"window {self.window} does not divide horizon {T}")
        periods = list(self.k_list) if task in ("sweep-k", "variance") and self.k_list else []
        if "gpes" in kinds and not periods:
            periods = [self.period] if self.period is not None else []
            if self.period is None:
                out.append("period (K) is required for gpes")
        if task == "sweep-k" and not self.k_list:
            out.append("k_list must list at least one K for sweep-k")
        if len(set(periods)) != len(periods):
            out.append(f"duplicate K values in {periods}")
        for K in periods:
            if self.window and K % self.window:
                out.append(f"K={K} is not a multiple of window {self.window}")
            if T is not None and self.window and not (self.window <= K <= T):
                out.append(f"K={K} outside [{self.window}, {T}]")
        if not (self.sigma > 0 and self.sigma < float("inf")):
            out.append("sigma must be finite and > 0")
        if task in ("train", "sweep-k"):
            if self.optimizer not in ("sgd", "adam"):
                out.append("optimizer must be sgd or adam")
            try:
                Schedule.parse(self.lr, self.lr_schedule)
            except ValueError as err:
                out.append(f"lr / lr_schedule: {err}")
            if self.n_workers < 1:
                out.append("n_workers must be >= 1")
            if self.num_updates < 0:
                out.append("num_updates must be >= 0")
            if self.eval_every < 1:
                out.append("eval_every must be >= 1")
            if self.test_samples < 0:
                out.append("test_samples must be >= 0")
            if self.test_samples and not self.is_lorenz():
                out.append("test_samples is only available for the lorenz graph")
        if task == "variance":
            if self.mc < 100:
                out.append(f"mc (Monte-Carlo samples) must be >= 100, got {self.mc}")
            if self.n_average < 1:
                out.append("n_average must be >= 1")
        if self.theta_init is not None and d is not None and len(self.theta_init) != d:
            out.append(f"theta_init has {len(self.theta_init)} entries, graph needs {d}")
        if need_seed:
            if self.seed is None:
                out.append("seed is required (set 'seed' or pass --seed)")
            elif not 0 <= self.seed < 2**64:
                out.append("seed must be an unsigned 64-bit integer")
        return out

    def validate(self, **kw) -> "ExperimentConfig":
        problems = self.problems(**kw)
        if problems:
            raise ConfigError(problems)
        return self
