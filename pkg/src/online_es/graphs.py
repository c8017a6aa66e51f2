"""Unrolled computation graphs.

A graph is a horizon-``T`` dynamical system ``s_t = f_t(s_{t-1}; theta)`` that
emits a scalar loss ``L_t(s_t)`` after every transition.  Transitions and
losses are vectorized over a leading batch axis so that many independent
trajectories (worker slots, Monte-Carlo samples, random initial states) are
advanced with one numpy call per step.  Graph instances are immutable after
construction and safe to share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

LORENZ_S0 = (1.2, 1.3, 1.6)
LORENZ_THETA_GT = (math.log(28.0), math.log(10.0))
LORENZ_THETA_INIT = (3.7, 3.116)


class DivergenceError(FloatingPointError):
    """A trajectory produced a non-finite state or loss.

    ``step`` is the 1-based unroll step; the remaining fields locate the
    failure when it is known (antithetic branch, worker slot, Monte-Carlo
    sample, training update).
    """

    def __init__(self, step=None, *, branch=None, worker=None, sample=None, update=None, detail=""):
        self.step = step
        self.branch = branch
        self.worker = worker
        self.sample = sample
        self.update = update
        self.detail = detail
        super().__init__(self._message())

    def _message(self) -> str:
        parts = []
        for name in ("update", "worker", "sample", "branch", "step"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={value}")
        msg = "non-finite state or loss"
        if parts:
            msg += " (" + ", ".join(parts) + ")"
        if self.detail:
            msg += f": {self.detail}"
        return msg

    def located(self, **where) -> "DivergenceError":
        """Copy of this error with extra location fields filled in."""
        fields = dict(step=self.step, branch=self.branch, worker=self.worker,
                      sample=self.sample, update=self.update, detail=self.detail)
        fields.update({k: v for k, v in where.items() if v is not None})
        return DivergenceError(**fields)


def as_params(values, d: int | None = None) -> np.ndarray:
    """Validate a parameter vector: 1-d, finite, float64, optional length check."""
    theta = np.asarray(values, dtype=np.float64)
    if theta.ndim != 1:
        raise ValueError(f"parameter vector must be 1-d, got shape {theta.shape}")
    if d is not None and theta.shape[0] != d:
        raise ValueError(f"parameter vector has dimension {theta.shape[0]}, expected {d}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector has non-finite entries")
    return theta


class UnrolledGraph:
    """Base class: subclasses set ``horizon``, ``state_dim``, ``param_dim``,
    ``initial_state`` and implement ``_transition`` / ``_step_loss``.

    ``t`` may be an int or an integer array with one entry per batch row;
    ``params`` may be shared ``(d,)`` or per-row ``(n, d)``.
    """

    horizon: int
    state_dim: int
    param_dim: int
    initial_state: np.ndarray

    def check_step(self, t) -> None:
        if np.ndim(t) == 0:
            ok = 1 <= t <= self.horizon
        else:
            t = np.asarray(t)
            ok = t.size == 0 or (t.min() >= 1 and t.max() <= self.horizon)
        if not ok:
            raise IndexError(f"unroll step outside 1..{self.horizon}: {t}")

    def transition(self, t, state, params) -> np.ndarray:
        self.check_step(t)
        return self._transition(t, state, params)

    def step_loss(self, t, state) -> np.ndarray:
        self.check_step(t)
        return self._step_loss(t, state)

    def initial_states(self, n: int) -> np.ndarray:
        return np.tile(self.initial_state, (n, 1))

    def _transition(self, t, state, params):
        raise NotImplementedError

    def _step_loss(self, t, state):
        raise NotImplementedError


def unroll_step(graph: UnrolledGraph, state, t: int, params) -> tuple[np.ndarray, float]:
    """Advance a single trajectory one step and return ``(new_state, loss)``."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (graph.state_dim,):
        raise ValueError(f"state has shape {state.shape}, expected ({graph.state_dim},)")
    theta = as_params(params, graph.param_dim)
    new_state = graph.transition(t, state, theta)
    loss = float(graph.step_loss(t, new_state))
    if not (np.all(np.isfinite(new_state)) and math.isfinite(loss)):
        raise DivergenceError(t)
    return new_state, loss


def episode_losses(graph: UnrolledGraph, params) -> np.ndarray:
    """Per-step losses ``L_1..L_T`` of the trajectory from ``s0`` under constant theta."""
    theta = as_params(params, graph.param_dim)
    state = graph.initial_state.copy()
    losses = np.empty(graph.horizon)
    for t in range(1, graph.horizon + 1):
        state = graph.transition(t, state, theta)
        losses[t - 1] = graph.step_loss(t, state)
        if not (np.isfinite(losses[t - 1]) and np.all(np.isfinite(state))):
            raise DivergenceError(t)
    return losses


def episode_mean_loss(graph: UnrolledGraph, params) -> float:
    """``(1/T) sum_t L_t`` for one full episode at constant theta."""
    return float(episode_losses(graph, params).sum() / graph.horizon)


# --------------------------------------------------------------------------
# Lorenz system

def _lorenz_euler(state, r, a, beta, dt):
    x = state[..., 0]
    y = state[..., 1]
    z = state[..., 2]
    return np.stack(
        [
            x + a * (y - x) * dt,
            y + (x * (r - z) - y) * dt,
            z + (x * y - beta * z) * dt,
        ],
        axis=-1,
    )


class LorenzGraph(UnrolledGraph):
    """Euler-discretized Lorenz system with learnable ``theta = (ln r, ln a)``.

    The third Lorenz parameter is fixed at 8/3.  The observed ``z`` trace is
    produced at construction time by unrolling this same transition code at
    ``theta_gt``, so the per-step loss ``(z_t - z_gt_t)^2`` is exactly zero
    there.
    """

    def __init__(self, horizon: int = 2000, dt: float = 0.005, initial_state=LORENZ_S0,
                 theta_gt=LORENZ_THETA_GT, beta: float = 8.0 / 3.0):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.horizon = int(horizon)
        self.state_dim = 3
        self.param_dim = 2
        self.dt = float(dt)
        self.beta = float(beta)
        self.initial_state = np.asarray(initial_state, dtype=np.float64).copy()
        self.theta_gt = as_params(theta_gt, 2)
        self.z_gt = self.trace(self.theta_gt)[:, 2]
        self.z_gt.setflags(write=False)
        self.initial_state.setflags(write=False)

    def trace(self, params, initial_state=None) -> np.ndarray:
        """States ``s_1..s_T`` (shape ``(T, 3)``, or ``(T, n, 3)`` for batched starts)."""
        theta = np.asarray(params, dtype=np.float64)
        state = self.initial_state if initial_state is None else np.asarray(initial_state, np.float64)
        out = np.empty((self.horizon,) + state.shape)
        for t in range(1, self.horizon + 1):
            state = self._transition(t, state, theta)
            out[t - 1] = state
        return out

    def _transition(self, t, state, params):
        params = np.asarray(params, dtype=np.float64)
        r = np.exp(params[..., 0])
        a = np.exp(params[..., 1])
        # blow-ups surface as inf/nan and are reported by the callers' finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            return _lorenz_euler(np.asarray(state, dtype=np.float64), r, a, self.beta, self.dt)

    def _step_loss(self, t, state):
        target = self.z_gt[np.asarray(t) - 1]
        with np.errstate(over="ignore", invalid="ignore"):
            return (state[..., 2] - target) ** 2


class LorenzTestLoss:
    """Mean episode loss over random initial states ``s0 ~ N(base, std^2 I)``.

    Each sampled start gets its own ground-truth trace (unrolled at
    ``theta_gt`` from that start), so the loss vanishes at the true
    parameters.  Starts and traces are drawn once and cached, which makes
    repeated evaluations deterministic and cheap.
    """

    def __init__(self, graph: LorenzGraph, num_initial_states: int, seed: int, init_std: float = 0.1):
        if num_initial_states < 1:
            raise ValueError("num_initial_states must be >= 1")
        self.graph = graph
        rng = substream(seed, 0)
        noise = rng.standard_normal((num_initial_states, 3))
        self.starts = graph.initial_state + init_std * noise
        theta_gt = np.broadcast_to(graph.theta_gt, (num_initial_states, 2))
        self.z_gt = graph.trace(theta_gt, self.starts)[..., 2]

    def per_start(self, params) -> np.ndarray:
        g = self.graph
        theta = np.broadcast_to(as_params(params, 2), (len(self.starts), 2))
        state = self.starts
        total = np.zeros(len(self.starts))
        for t in range(1, g.horizon + 1):
            state = g._transition(t, state, theta)
            total += (state[:, 2] - self.z_gt[t - 1]) ** 2
        bad = np.flatnonzero(~np.isfinite(total))
        if bad.size:
            raise DivergenceError(sample=int(bad[0]), detail="test-loss episode diverged")
        return total / g.horizon

    def __call__(self, params) -> float:
        return float(self.per_start(params).mean())


def lorenz_test_loss(params, num_initial_states: int, rng_seed: int, graph: LorenzGraph | None = None,
                     init_std: float = 0.1) -> float:
    graph = graph if graph is not None else LorenzGraph()
    return LorenzTestLoss(graph, num_initial_states, rng_seed, init_std)(params)


# --------------------------------------------------------------------------
# Linear-loss family


class SpecFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class LinearLossSpec:
    """Vectors ``g^t_i`` (``1 <= i <= t <= T``) of a loss family that is exactly
    linear in every application of theta.

    Stored densely as ``g[t-1, i-1]`` with shape ``(T, T, d)``; entries above
    the diagonal (``i > t``) are zero.
    """

    g: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = np.array(self.g, dtype=np.float64)
        if g.ndim != 3 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise ValueError(f"g must have shape (T, T, d), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("g-vectors must be finite")
        if np.any(g[np.triu_indices(g.shape[0], k=1)] != 0):
            raise ValueError("g[t-1, i-1] must be zero for i > t")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def horizon(self) -> int:
        return self.g.shape[0]

    @property
    def param_dim(self) -> int:
        return self.g.shape[2]

    def totals(self) -> np.ndarray:
        """``g^t = sum_i g^t_i`` for every ``t``; shape ``(T, d)``."""
        return self.g.sum(axis=1)

    def mean_gradient(self) -> np.ndarray:
        """``(1/T) sum_t g^t``, the gradient every unbiased estimator targets."""
        return self.totals().sum(axis=0) / self.horizon

    def window_sums(self, k: int) -> np.ndarray:
        """``g^t_{K,j}`` for window length ``k``; shape ``(T, ceil(T/k), d)``.

        Windows past ``ceil(t/k)`` come out zero because ``g^t_i = 0`` for
        ``i > t``.
        """
        T, d = self.horizon, self.param_dim
        if not 1 <= k <= T:
            raise ValueError(f"window length must be in 1..{T}")
        n = -(-T // k)
        padded = np.zeros((T, n * k, d))
        padded[:, :T] = self.g
        return padded.reshape(T, n, k, d).sum(axis=2)

    def scaled(self, factor: float) -> "LinearLossSpec":
        return LinearLossSpec(self.g * factor)

    # -- text format: header "T d", then "t i g_1 ... g_d" for t = 1..T, i = 1..t

    def to_text(self) -> str:
        T, d = self.horizon, self.param_dim
        lines = [f"{T} {d}"]
        for t in range(1, T + 1):
            for i in range(1, t + 1):
                vals = " ".join(repr(float(v)) for v in self.g[t - 1, i - 1])
                lines.append(f"{t} {i} {vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LinearLossSpec":
        rows = [(n, line.split()) for n, line in enumerate(text.splitlines(), start=1)]
        rows = [(n, toks) for n, toks in rows if toks and not toks[0].startswith("#")]
        if not rows:
            raise SpecFormatError(1, "empty spec file")
        lineno, header = rows[0]
        try:
            T, d = (int(x) for x in header)
        except ValueError:
            raise SpecFormatError(lineno, "header must be 'T d'") from None
        if T < 1 or d < 1:
            raise SpecFormatError(lineno, "T and d must be positive")
        expected = [(t, i) for t in range(1, T + 1) for i in range(1, t + 1)]
        body = rows[1:]
        g = np.zeros((T, T, d))
        for k, (t, i) in enumerate(expected):
            if k >= len(body):
                last = body[-1][0] if body else lineno
                raise SpecFormatError(last + 1, f"missing entry for t={t} i={i}")
            n, toks = body[k]
            if len(toks) != d + 2:
                raise SpecFormatError(n, f"expected {d + 2} fields, got {len(toks)}")
            try:
                tt, ii = int(toks[0]), int(toks[1])
                vals = [float(x) for x in toks[2:]]
            except ValueError:
                raise SpecFormatError(n, "malformed number") from None
            if (tt, ii) != (t, i):
                raise SpecFormatError(n, f"expected entry t={t} i={i}, got t={tt} i={ii}")
            if not all(math.isfinite(v) for v in vals):
                raise SpecFormatError(n, "non-finite value")
            g[t - 1, i - 1] = vals
        if len(body) > len(expected):
            raise SpecFormatError(body[len(expected)][0], "unexpected trailing entry")
        return cls(g)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "LinearLossSpec":
        return cls.from_text(Path(path).read_text())

    # -- constructors

    @classmethod
    def zeros(cls, horizon: int, d: int) -> "LinearLossSpec":
        return cls(np.zeros((horizon, horizon, d)))

    @classmethod
    def random(cls, horizon: int, d: int, seed: int) -> "LinearLossSpec":
        """Standard-normal entries for every ``g^t_i`` with ``i <= t``."""
        rng = substream(seed, 0)
        g = rng.standard_normal((horizon, horizon, d))
        g *= np.tril(np.ones((horizon, horizon)))[:, :, None]
        return cls(g)

    @classmethod
    def from_totals_lower(cls, lower: np.ndarray, totals: np.ndarray) -> "LinearLossSpec":
        """Keep the strictly-lower entries of ``lower`` and pick the diagonal so
        that ``g^t`` equals ``totals[t-1]``."""
        T = lower.shape[0]
        g = np.array(lower, dtype=np.float64) * np.tril(np.ones((T, T)), k=-1)[:, :, None]
        idx = np.arange(T)
        g[idx, idx] = totals - g.sum(axis=1)
        return cls(g)


def equal_window_sum_spec(horizon: int, window: int, d: int, seed: int) -> LinearLossSpec:
    """Random spec whose per-window totals ``sum_{t in window k} g^t`` are all equal.

    Every ``g^t`` is the same random unit-scale vector; the off-diagonal
    ``g^t_i`` stay random so the spec is not degenerate.
    """
    if horizon % window:
        raise ValueError("window must divide the horizon")
    base = LinearLossSpec.random(horizon, d, seed)
    u = substream(seed, 1).standard_normal(d)
    return LinearLossSpec.from_totals_lower(base.g, np.tile(u, (horizon, 1)))


def orthogonal_window_sum_spec(horizon: int, window: int, d: int) -> LinearLossSpec:
    """Spec whose window totals are mutually orthogonal with equal norm.

    Needs ``horizon // window <= d``.  Only diagonal terms are used.
    """
    if horizon % window:
        raise ValueError("window must divide the horizon")
    n = horizon // window
    if n > d:
        raise ValueError("need at least as many dimensions as windows")
    totals = np.zeros((horizon, d))
    for t in range(horizon):
        totals[t, t // window] = 1.0 / window
    return LinearLossSpec.from_totals_lower(np.zeros((horizon, horizon, d)), totals)


class LinearGraph(UnrolledGraph):
    """Graph realizing a :class:`LinearLossSpec` exactly.

    The state holds ``T`` running partial sums; entry ``t'`` accumulates
    ``theta_i . g^{t'}_i`` over the applications made so far, and the loss
    at step ``t`` reads entry ``t``.  Hence
    ``L_t(theta_1..theta_t) = sum_i theta_i . g^t_i`` for any sequence.
    """

    def __init__(self, spec: LinearLossSpec):
        self.spec = spec
        self.horizon = spec.horizon
        self.state_dim = spec.horizon
        self.param_dim = spec.param_dim
        self.initial_state = np.zeros(spec.horizon)
        self.initial_state.setflags(write=False)
        # by_application[i-1, t'-1] = g^{t'}_i
        self._by_application = np.ascontiguousarray(spec.g.transpose(1, 0, 2))

    def _transition(self, t, state, params):
        params = np.asarray(params, dtype=np.float64)
        state = np.asarray(state, dtype=np.float64)
        if np.ndim(t) == 0:
            return state + params @ self._by_application[t - 1].T
        cols = self._by_application[np.asarray(t) - 1]  # (n, T, d)
        if params.ndim == 1:
            return state + cols @ params
        return state + np.einsum("ntd,nd->nt", cols, params)

    def _step_loss(self, t, state):
        state = np.asarray(state)
        if np.ndim(t) == 0:
            return state[..., t - 1]
        t = np.asarray(t)
        return state[np.arange(state.shape[0]), t - 1]
