"""Evolution-strategies gradient estimators for unrolled graphs.

Every worker class here is vectorized: one object holds ``n`` independent
worker *slots* that share a graph and window size but own their own clock,
saved states, noise bookkeeping and Philox substream.  A single worker is
simply ``n == 1``; a step-unlocked pool is one object with ``n == N``.  The
per-slot arithmetic follows the reference pseudocode line by line, so slot
``i`` of a pool produces exactly what a lone worker with the same substream
would.

Online workers keep their trajectories across calls, so if theta changes
between calls the later windows of an episode were reached under stale
parameters (hysteresis).  That is intentional; only the variance lab freezes
theta to measure estimators without it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import DivergenceError, UnrolledGraph, as_params
from .rng import substreams

KINDS = ("fulles", "tes", "pes", "gpes", "nres")


def mod_dagger(x: int, y: int) -> int:
    """The unique ``n`` in ``[1, y]`` with ``x = q*y + n`` for some integer ``q``."""
    if int(x) != x or int(y) != y or x < 1 or y < 1:
        raise ValueError(f"mod_dagger needs positive integers, got ({x}, {y})")
    return (int(x) - 1) % int(y) + 1


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    param_dim: int

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if self.param_dim < 1:
            raise ValueError("param_dim must be positive")


@dataclass(frozen=True)
class TruncationClock:
    """Window geometry: ``horizon`` split into ``horizon // window`` windows."""

    horizon: int
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.horizon % self.window:
            raise ValueError(f"window {self.window} does not divide horizon {self.horizon}")

    @property
    def num_windows(self) -> int:
        return self.horizon // self.window

    def starts(self) -> np.ndarray:
        return np.arange(0, self.horizon, self.window)


@dataclass
class GradientSample:
    """Per-slot estimates from one call.

    ``grad`` has one row per participating slot (``slots`` gives their
    indices), ``window_start`` is each slot's tau before the call and
    ``unroll_steps`` the cost of the call for one slot.
    """

    grad: np.ndarray
    window_start: np.ndarray
    unroll_steps: int
    slots: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        if self.grad.shape[0] != 1:
            raise ValueError("sample holds more than one worker; index grad instead")
        return self.grad[0]


class EstimatorWorkers:
    kind = ""
    # unroll steps per gradient call, as a multiple of the window
    cost_factor = 2

    def __init__(self, graph: UnrolledGraph, sigma: float, window: int, *, n: int = 1,
                 master_seed: int = 0, first_index: int = 0, rngs=None):
        self.graph = graph
        self.noise = NoiseConfig(float(sigma), graph.param_dim)
        self.clock = TruncationClock(graph.horizon, int(window))
        if rngs is None:
            rngs = substreams(master_seed, n, first_index)
        self.rngs = list(rngs)
        self.n = len(self.rngs)
        if self.n < 1:
            raise ValueError("need at least one worker")
        self.calls = np.zeros(self.n, dtype=np.int64)
        self.steps = np.zeros(self.n, dtype=np.int64)
        self.reset()

    @property
    def sigma(self) -> float:
        return self.noise.sigma

    @property
    def window(self) -> int:
        return self.clock.window

    @property
    def horizon(self) -> int:
        return self.clock.horizon

    @property
    def steps_per_call(self) -> int:
        return self.cost_factor * self.window

    def reset(self) -> None:
        """Return every slot to ``tau = 0`` and ``s0``; substreams keep their position."""
        self.tau = np.zeros(self.n, dtype=np.int64)
        self.error: DivergenceError | None = None
        self._init_slots()

    def _init_slots(self) -> None:
        raise NotImplementedError

    def _reset_slots(self, idx: np.ndarray) -> None:
        raise NotImplementedError

    def _estimate(self, idx: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _draw(self, idx: np.ndarray) -> np.ndarray:
        d, sigma = self.noise.param_dim, self.sigma
        out = np.empty((len(idx), d))
        for row, i in enumerate(idx):
            out[row] = sigma * self.rngs[i].standard_normal(d)
        return out

    def gradient_estimate(self, theta, active=None) -> GradientSample:
        """Advance the selected slots (all by default) by one truncation window."""
        if self.error is not None:
            raise RuntimeError(f"{self.kind} worker is poisoned by an earlier divergence "
                               f"({self.error}); call reset() first")
        theta = as_params(theta, self.noise.param_dim)
        idx = np.arange(self.n) if active is None else np.flatnonzero(active)
        start = self.tau[idx].copy()
        try:
            grad = self._estimate(idx, theta)
        except DivergenceError as err:
            self.error = err
            raise
        self.calls[idx] += 1
        self.steps[idx] += self.steps_per_call
        self.tau[idx] += self.window
        done = idx[self.tau[idx] >= self.horizon]
        if done.size:
            self.tau[done] = 0
            self._reset_slots(done)
        return GradientSample(grad, start, self.steps_per_call, idx)

    def _unroll_pair(self, idx, theta, pert, s_plus, s_minus, t0):
        """Antithetic unroll of ``window`` steps; returns end states and loss sums."""
        g = self.graph
        lp = np.zeros(len(idx))
        lm = np.zeros(len(idx))
        tp = theta + pert
        tm = theta - pert
        for i in range(1, self.window + 1):
            t = t0 + i
            s_plus = g.transition(t, s_plus, tp)
            s_minus = g.transition(t, s_minus, tm)
            lp += g.step_loss(t, s_plus)
            lm += g.step_loss(t, s_minus)
            self._check(idx, t, s_plus, lp, "+")
            self._check(idx, t, s_minus, lm, "-")
        return s_plus, s_minus, lp, lm

    @staticmethod
    def _check(idx, t, state, loss, branch=None):
        if np.isfinite(loss).all() and np.isfinite(state).all():
            return
        bad = ~np.isfinite(loss) | ~np.isfinite(state).all(axis=-1)
        row = int(np.flatnonzero(bad)[0])
        step = int(t[row]) if np.ndim(t) else int(t)
        raise DivergenceError(step, branch=branch, worker=int(idx[row]))

    def _scale(self, lp, lm, direction):
        return ((lp - lm) / (2.0 * self.sigma**2 * self.window))[:, None] * direction


class FullESWorkers(EstimatorWorkers):
    """Stateless antithetic ES over the full episode (window = horizon)."""

    kind = "fulles"

    def __init__(self, graph, sigma, window=None, **kw):
        super().__init__(graph, sigma, graph.horizon, **kw)

    def _init_slots(self):
        pass

    def _reset_slots(self, idx):
        pass

    def _estimate(self, idx, theta):
        eps = self._draw(idx)
        return fulles_gradients(self.graph, theta, eps, self.sigma, idx)


def fulles_gradients(graph, theta, eps, sigma, idx=None):
    """Antithetic full-episode estimates for a batch of perturbations ``eps``."""
    m = eps.shape[0]
    idx = np.arange(m) if idx is None else idx
    s0 = graph.initial_states(m)
    lp = np.zeros(m)
    lm = np.zeros(m)
    tp = theta + eps
    tm = theta - eps
    s_plus, s_minus = s0, s0.copy()
    zero = np.zeros(m, dtype=np.int64)
    for i in range(1, graph.horizon + 1):
        t = zero + i
        s_plus = graph.transition(t, s_plus, tp)
        s_minus = graph.transition(t, s_minus, tm)
        lp += graph.step_loss(t, s_plus)
        lm += graph.step_loss(t, s_minus)
        EstimatorWorkers._check(idx, t, s_plus, lp, "+")
        EstimatorWorkers._check(idx, t, s_minus, lm, "-")
    return ((lp - lm) / (2.0 * sigma**2 * graph.horizon))[:, None] * eps


def fulles_estimate(graph: UnrolledGraph, theta, noise: NoiseConfig, rng=None, eps=None) -> GradientSample:
    """One FullES estimate; pass ``eps`` to fix the perturbation instead of drawing it."""
    theta = as_params(theta, graph.param_dim)
    if eps is None:
        if rng is None:
            raise ValueError("need an rng or an explicit perturbation")
        eps = noise.sigma * rng.standard_normal(noise.param_dim)
    eps = np.asarray(eps, dtype=np.float64).reshape(1, -1)
    grad = fulles_gradients(graph, theta, eps, noise.sigma)
    return GradientSample(grad, np.zeros(1, dtype=np.int64), 2 * graph.horizon, np.zeros(1, dtype=np.int64))


class TESWorkers(EstimatorWorkers):
    """Truncated ES: fresh noise per window, then an unperturbed re-unroll (3W steps)."""

    kind = "tes"
    cost_factor = 3

    def _init_slots(self):
        self.state = self.graph.initial_states(self.n)
        self.eps = np.zeros((self.n, self.noise.param_dim))

    def _reset_slots(self, idx):
        self.state[idx] = self.graph.initial_state

    def _estimate(self, idx, theta):
        eps = self._draw(idx)
        self.eps[idx] = eps
        start = self.state[idx]
        t0 = self.tau[idx]
        _, _, lp, lm = self._unroll_pair(idx, theta, eps, start, start.copy(), t0)
        grad = self._scale(lp, lm, eps)
        s = start
        for i in range(1, self.window + 1):
            t = t0 + i
            s = self.graph.transition(t, s, theta)
            self._check(idx, t, s, np.zeros(len(idx)))
        self.state[idx] = s
        return grad


class _PairedWorkers(EstimatorWorkers):
    def _init_slots(self):
        self.s_plus = self.graph.initial_states(self.n)
        self.s_minus = self.graph.initial_states(self.n)
        self.eps = np.zeros((self.n, self.noise.param_dim))
        self.xi = np.zeros((self.n, self.noise.param_dim))

    def _reset_slots(self, idx):
        self.s_plus[idx] = self.graph.initial_state
        self.s_minus[idx] = self.graph.initial_state
        self.xi[idx] = 0.0

    def _run(self, idx, theta, pert):
        sp, sm, lp, lm = self._unroll_pair(idx, theta, pert, self.s_plus[idx], self.s_minus[idx], self.tau[idx])
        self.s_plus[idx] = sp
        self.s_minus[idx] = sm
        return lp, lm


class PESWorkers(_PairedWorkers):
    """Persistent ES: new noise every window, gradient weighted by the running noise sum."""

    kind = "pes"

    def _estimate(self, idx, theta):
        eps = self._draw(idx)
        self.eps[idx] = eps
        self.xi[idx] += eps
        lp, lm = self._run(idx, theta, eps)
        return self._scale(lp, lm, self.xi[idx])


class GPESWorkers(_PairedWorkers):
    """Generalized PES: one noise per ``period`` unroll steps (a multiple of the window)."""

    kind = "gpes"

    def __init__(self, graph, sigma, window, period, **kw):
        period = int(period)
        if period % int(window) or not (window <= period <= graph.horizon):
            raise ValueError(f"period {period} must be a multiple of window {window} in [{window}, {graph.horizon}]")
        self.period = period
        super().__init__(graph, sigma, window, **kw)

    def _estimate(self, idx, theta):
        fresh = idx[self.tau[idx] % self.period == 0]
        if fresh.size:
            new = self._draw(fresh)
            self.eps[fresh] = new
            self.xi[fresh] += new
        lp, lm = self._run(idx, theta, self.eps[idx])
        return self._scale(lp, lm, self.xi[idx])


class NRESWorkers(_PairedWorkers):
    """Noise-reuse ES: one noise per episode, drawn when tau == 0."""

    kind = "nres"

    def _reset_slots(self, idx):
        self.s_plus[idx] = self.graph.initial_state
        self.s_minus[idx] = self.graph.initial_state

    def _estimate(self, idx, theta):
        fresh = idx[self.tau[idx] == 0]
        if fresh.size:
            self.eps[fresh] = self._draw(fresh)
        lp, lm = self._run(idx, theta, self.eps[idx])
        return self._scale(lp, lm, self.eps[idx])


_CLASSES = {
    "fulles": FullESWorkers,
    "tes": TESWorkers,
    "pes": PESWorkers,
    "gpes": GPESWorkers,
    "nres": NRESWorkers,
}


def make_workers(kind: str, graph: UnrolledGraph, sigma: float, window: int | None = None,
                 period: int | None = None, **kw) -> EstimatorWorkers:
    if kind not in _CLASSES:
        raise ValueError(f"unknown estimator {kind!r}; choose from {KINDS}")
    if kind == "fulles":
        return FullESWorkers(graph, sigma, **kw)
    if window is None:
        raise ValueError(f"{kind} needs a truncation window")
    if kind == "gpes":
        if period is None:
            raise ValueError("gpes needs a noise-sharing period")
        return GPESWorkers(graph, sigma, window, period, **kw)
    return _CLASSES[kind](graph, sigma, window, **kw)


def make_step_unlocked_pool(kind: str, n: int, graph: UnrolledGraph, theta_init, master_seed: int, *,
                            sigma: float, window: int | None = None, period: int | None = None,
                            taus=None, first_index: int = 0) -> EstimatorWorkers:
    """Build ``n`` workers whose window starts are independent and uniform.

    Slot ``i`` draws ``tau_i`` from its own substream, then makes
    ``tau_i / W`` gradient calls at ``theta_init`` whose results are thrown
    away; only their side effects on saved states and noise survive.  Pass
    ``taus`` to force the starts (mainly for tests).  The warmup cost is kept
    in ``pool.warmup_calls`` / ``pool.warmup_steps``.
    """
    pool = make_workers(kind, graph, sigma, window, period, n=n, master_seed=master_seed,
                        first_index=first_index)
    theta_init = as_params(theta_init, graph.param_dim)
    if taus is not None:
        taus = np.asarray(taus, dtype=np.int64)
        if taus.shape != (n,) or np.any(taus % pool.window) or np.any((taus < 0) | (taus >= graph.horizon)):
            raise ValueError("forced window starts must be multiples of the window inside the horizon")
    elif kind == "fulles":
        taus = np.zeros(n, dtype=np.int64)
    else:
        nw = pool.clock.num_windows
        taus = np.array([pool.window * int(rng.integers(nw)) for rng in pool.rngs], dtype=np.int64)
    warm = taus // pool.window
    try:
        for r in range(int(warm.max(initial=0))):
            pool.gradient_estimate(theta_init, active=warm > r)
    except DivergenceError as err:
        # update 0 is the warmup phase, before any optimizer step
        raise err.located(update=0, detail="during warmup at theta_init") from err
    pool.warmup_calls = warm
    pool.warmup_steps = int(warm.sum()) * pool.steps_per_call
    return pool


def pool_gradient(pool: EstimatorWorkers, theta) -> tuple[np.ndarray, int]:
    """Mean of all slots' estimates at ``theta`` and the unroll steps it cost."""
    sample = pool.gradient_estimate(theta)
    return sample.grad.mean(axis=0), pool.n * sample.unroll_steps


@dataclass(frozen=True)
class EstimatorConfig:
    """What to build: estimator kind plus its hyperparameters."""

    kind: str
    sigma: float
    window: int | None = None
    period: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator {self.kind!r}")
        NoiseConfig(self.sigma, 1)

    def effective_window(self, horizon: int) -> int:
        return horizon if self.kind == "fulles" else int(self.window)

    def effective_period(self, horizon: int) -> int | None:
        if self.kind == "pes":
            return self.window
        if self.kind in ("nres", "fulles"):
            return horizon
        return self.period

    def steps_per_call(self, horizon: int) -> int:
        factor = 3 if self.kind == "tes" else 2
        return factor * self.effective_window(horizon)

    def label(self) -> str:
        return self.kind if self.kind != "gpes" else f"gpes(K={self.period})"

    def make_pool(self, graph, n, theta, master_seed, **kw) -> EstimatorWorkers:
        return make_step_unlocked_pool(self.kind, n, graph, theta, master_seed, sigma=self.sigma,
                                       window=self.window, period=self.period, **kw)


__all__ = [
    "KINDS", "mod_dagger", "NoiseConfig", "TruncationClock", "GradientSample", "EstimatorWorkers",
    "FullESWorkers", "TESWorkers", "PESWorkers", "GPESWorkers", "NRESWorkers", "fulles_estimate",
    "fulles_gradients", "make_workers", "make_step_unlocked_pool", "pool_gradient", "EstimatorConfig",
]
