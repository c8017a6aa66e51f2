"""First-order training loop driven by a pool of ES workers."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorWorkers
from .graphs import DivergenceError, as_params

CSV_SCHEMA = "# schema: online-es/train v1"


class NonFiniteUpdate(FloatingPointError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate keyed by update index (0-based).

    ``steps`` is a sorted tuple of ``(first_update, rate)`` pairs that
    override ``base`` from that update on, e.g. ``Schedule(1e-5, ((1000, 1e-6),))``.
    """

    base: float
    steps: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        rates = [self.base] + [r for _, r in self.steps]
        if not all(np.isfinite(r) and r > 0 for r in rates):
            raise ValueError("learning rates must be finite and > 0")
        bounds = [b for b, _ in self.steps]
        if bounds != sorted(set(bounds)) or any(b < 0 for b in bounds):
            raise ValueError("schedule boundaries must be distinct, sorted and non-negative")

    def __call__(self, update: int) -> float:
        lr = self.base
        for first, rate in self.steps:
            if update >= first:
                lr = rate
        return lr

    @classmethod
    def parse(cls, base: float, text: str) -> "Schedule":
        """``text`` like ``"1000:1e-6, 3000:1e-7"``; empty means constant."""
        steps = []
        for chunk in filter(None, (c.strip() for c in text.split(","))):
            first, rate = chunk.split(":")
            steps.append((int(first), float(rate)))
        return cls(float(base), tuple(steps))

    def format(self) -> str:
        return ", ".join(f"{b}:{r!r}" for b, r in self.steps)


class SGD:
    kind = "sgd"

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.t = 0

    def update(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        lr = self.schedule(self.t)
        self.t += 1
        return _finite(theta - lr * grad, theta, grad, self.t)


class Adam:
    kind = "adam"

    def __init__(self, schedule: Schedule, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def update(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        lr = self.schedule(self.t)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return _finite(theta - lr * m_hat / (np.sqrt(v_hat) + self.eps), theta, grad, self.t)


def _finite(new, theta, grad, t):
    if not np.all(np.isfinite(new)):
        raise NonFiniteUpdate(f"update {t} produced non-finite parameters (theta={theta}, grad={grad})")
    return new


def make_optimizer(kind: str, lr: float, schedule: str = ""):
    sched = Schedule.parse(lr, schedule)
    if kind == "sgd":
        return SGD(sched)
    if kind == "adam":
        return Adam(sched)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class UpdateRecord:
    update: int
    train_loss: float | None
    test_loss: float | None
    cum_unroll_steps: int
    cum_sequential_steps: int
    wall_ms: float
    theta: np.ndarray | None = None


@dataclass
class TrainLog:
    records: list[UpdateRecord] = field(default_factory=list)
    warmup_steps: int = 0
    param_dim: int = 0
    log_theta: bool = False

    def losses(self, which: str = "test_loss") -> np.ndarray:
        return np.array([np.nan if getattr(r, which) is None else getattr(r, which) for r in self.records])

    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    def header(self) -> list[str]:
        cols = ["update", "train_loss", "test_loss", "cum_unroll_steps", "cum_sequential_steps", "wall_ms"]
        if self.log_theta:
            cols += [f"theta_{k}" for k in range(self.param_dim)]
        return cols

    def row(self, r: UpdateRecord) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        out = [r.update, fmt(r.train_loss), fmt(r.test_loss), r.cum_unroll_steps,
               r.cum_sequential_steps, f"{r.wall_ms:.3f}"]
        if self.log_theta:
            out += [repr(float(v)) for v in r.theta]
        return out

    def write_csv(self, fh, extra_comments=()) -> None:
        fh.write(CSV_SCHEMA + "\n")
        fh.write(f"# warmup_unroll_steps: {self.warmup_steps}\n")
        for line in extra_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            w.writerow(self.row(r))

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def train(pool: EstimatorWorkers, optimizer, num_updates: int, theta_init, *, train_loss=None,
          test_loss=None, eval_every: int = 1, keep_theta: bool = True) -> tuple[np.ndarray, TrainLog]:
    """Alternate ``pool`` gradient estimates with optimizer updates.

    ``train_loss`` / ``test_loss`` are optional callables of theta evaluated
    after every ``eval_every``-th update and after the last one.  Sequential
    steps grow by one slot's per-call cost per update, independent of the
    pool size, since slots run in parallel.
    """
    if num_updates < 0 or eval_every < 1:
        raise ValueError("num_updates must be >= 0 and eval_every >= 1")
    theta = as_params(theta_init, pool.graph.param_dim).copy()
    log = TrainLog(warmup_steps=int(getattr(pool, "warmup_steps", 0)), param_dim=theta.shape[0],
                   log_theta=keep_theta)
    cum_unroll = 0
    cum_seq = 0
    t_start = time.perf_counter()
    for u in range(1, num_updates + 1):
        try:
            sample = pool.gradient_estimate(theta)
        except DivergenceError as err:
            raise err.located(update=u) from err
        grad = sample.grad.mean(axis=0)
        cum_unroll += pool.n * sample.unroll_steps
        cum_seq += sample.unroll_steps
        theta = optimizer.update(theta, grad)
        evaluate = u % eval_every == 0 or u == num_updates
        tr = te = None
        if evaluate:
            try:
                tr = train_loss(theta) if train_loss is not None else None
                te = test_loss(theta) if test_loss is not None else None
            except DivergenceError as err:
                raise err.located(update=u) from err
        wall = (time.perf_counter() - t_start) * 1e3
        log.records.append(UpdateRecord(u, tr, te, cum_unroll, cum_seq, wall,
                                        theta.copy() if keep_theta else None))
    return theta, log


def oscillation(thetas: np.ndarray, tail: float = 0.25) -> float:
    """Total standard deviation of theta over the final ``tail`` fraction of updates."""
    thetas = np.asarray(thetas)
    k = max(2, int(round(len(thetas) * tail)))
    return float(np.sqrt(thetas[-k:].var(axis=0).sum()))
