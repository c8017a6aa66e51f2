"""Closed-form and Monte-Carlo total variance of the ES estimators.

Closed forms apply to :class:`LinearLossSpec` graphs, where every loss is
exactly linear in each application of theta.  Monte-Carlo estimates work on
any graph: each sample comes from a fresh worker brought to a uniformly
random window start by warmup at a frozen theta, so no hysteresis enters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .estimators import EstimatorConfig
from .graphs import DivergenceError, LinearGraph, LinearLossSpec, UnrolledGraph, as_params
from .rng import substream

VARIANCE_CSV_HEADER = ["estimator", "W", "K", "N", "M", "closed_form", "mc", "stderr"]
VARIANCE_CSV_SCHEMA = "# schema: online-es/variance v1"
MIN_SAMPLES = 100


@dataclass
class VarianceReport:
    estimator: str
    window: int
    period: int
    n_average: int
    samples: int
    mc_total_variance: float
    stderr: float
    mc_mean: np.ndarray
    mc_mean_stderr: np.ndarray
    closed_form: float | None = None

    def csv_row(self) -> list:
        cf = "" if self.closed_form is None else repr(float(self.closed_form))
        return [self.estimator, self.window, self.period, self.n_average, self.samples, cf,
                repr(float(self.mc_total_variance)), repr(float(self.stderr))]


def write_variance_csv(fh, reports) -> None:
    fh.write(VARIANCE_CSV_SCHEMA + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(VARIANCE_CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())


# --------------------------------------------------------------------------
# closed forms


def mega_spec(spec: LinearLossSpec, window: int) -> LinearLossSpec:
    """Collapse every length-``window`` block of steps into one step.

    A window of the original graph becomes a single step whose loss is the
    mean of the block's losses; the resulting g-vectors are
    ``G^{k}_{j} = (1/W) sum_{t in block k} g^t_{W,j}``.
    """
    T, d = spec.horizon, spec.param_dim
    if window < 1 or T % window:
        raise ValueError(f"window {window} must divide horizon {T}")
    blocks = spec.window_sums(window)  # (T, T/W, d)
    n = T // window
    return LinearLossSpec(blocks.reshape(n, window, n, d).mean(axis=1))


def _pairwise_term(spec: LinearLossSpec, c: int) -> float:
    d, T = spec.param_dim, spec.horizon
    sums = spec.window_sums(c)  # (T, n, d)
    total = 0.0
    for t in range(1, T + 1):
        a = sums[t - 1, : -(-t // c)]
        diffs = a[:, None, :] - a[None, :, :]
        total += 0.5 * d * float(np.sum(diffs**2))
    return total / T


def closed_form_gpes_variance(spec: LinearLossSpec, c: int, window: int = 1) -> float:
    """Total variance of GPES with noise period ``c * window`` on a linear spec.

    For ``window == 1`` this is the three-term formula in the per-step
    g-vectors; for larger windows the same formula is applied to
    :func:`mega_spec`.
    """
    if window != 1:
        return closed_form_gpes_variance(mega_spec(spec, window), c)
    T, d = spec.horizon, spec.param_dim
    if not 1 <= c <= T:
        raise ValueError(f"noise period must be in 1..{T}")
    totals = spec.totals()
    first = (d + 2) / T * float(np.sum(totals**2))
    second = float(np.sum((totals.sum(axis=0) / T) ** 2))
    return first - second + _pairwise_term(spec, c)


def closed_form_fulles_variance(spec: LinearLossSpec) -> float:
    """``(d + 1) * ||(1/T) sum_t g^t||^2``."""
    return (spec.param_dim + 1) * float(np.sum(spec.mean_gradient() ** 2))


def closed_form_variance(spec: LinearLossSpec, est: EstimatorConfig) -> float | None:
    """Closed form for any unbiased estimator in the GPES family, else ``None``."""
    T = spec.horizon
    if est.kind == "fulles":
        return closed_form_fulles_variance(spec)
    if est.kind == "tes":
        return None
    W = est.effective_window(T)
    K = est.effective_period(T)
    if K % W:
        return None
    return closed_form_gpes_variance(spec, K // W, W)


def tes_expected_gradient(spec: LinearLossSpec, window: int) -> np.ndarray:
    """Mean of the truncated estimator: only in-window applications count.

    ``(1/T) sum_t g^t_{W, ceil(t/W)}``, the part of each step's gradient that
    comes from the window containing ``t``.
    """
    sums = spec.window_sums(window)
    T = spec.horizon
    idx = (np.arange(1, T + 1) - 1) // window
    return sums[np.arange(T), idx].sum(axis=0) / T


def theorem2_condition(spec: LinearLossSpec, window: int) -> tuple[float, float, bool]:
    """Window-alignment condition under which averaged NRES beats one FullES.

    ``lhs = sum_k ||sum_{t in window k} g^t||^2`` and
    ``rhs = (d+1)/(d+2) * ||sum_t g^t||^2``.
    """
    T, d = spec.horizon, spec.param_dim
    if window < 1 or T % window:
        raise ValueError(f"window {window} must divide horizon {T}")
    blocks = spec.totals().reshape(T // window, window, d).sum(axis=1)
    lhs = float(np.sum(blocks**2))
    rhs = (d + 1) / (d + 2) * float(np.sum(blocks.sum(axis=0) ** 2))
    return lhs, rhs, lhs <= rhs


# --------------------------------------------------------------------------
# Monte Carlo


def trace_covariance(samples: np.ndarray) -> float:
    """Unbiased (``M - 1``) estimate of the trace of the covariance."""
    return float(np.sum(np.var(samples, axis=0, ddof=1)))


def batched_stderr(samples: np.ndarray, batches: int = 20) -> float:
    """Standard error of :func:`trace_covariance` from ``batches`` equal slices."""
    m = samples.shape[0]
    batches = min(batches, m // 2)
    size = m // batches
    traces = [trace_covariance(samples[b * size:(b + 1) * size]) for b in range(batches)]
    return float(np.std(traces, ddof=1) / np.sqrt(batches))


def mc_total_variance(estimator: EstimatorConfig, graph: UnrolledGraph, theta, samples: int,
                      master_seed: int, *, n_average: int = 1, batches: int = 20) -> VarianceReport:
    """Monte-Carlo total variance of ``estimator`` (averaged over ``n_average`` iid copies).

    Builds ``samples * n_average`` step-unlocked workers at the frozen
    ``theta`` and takes one estimate from each.  All workers live in one
    vectorized pool, and slot substreams are keyed by index, so the result
    depends only on ``master_seed``.
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} Monte-Carlo samples, got {samples}")
    if batches < 20:
        raise ValueError("stderr needs at least 20 batches")
    theta = as_params(theta, graph.param_dim)
    n = samples * n_average
    try:
        pool = estimator.make_pool(graph, n, theta, master_seed)
        grads = pool.gradient_estimate(theta).grad
    except DivergenceError as err:
        raise err.located(sample=None if err.worker is None else err.worker // n_average) from err
    grads = grads.reshape(samples, n_average, -1).mean(axis=1)
    T = graph.horizon
    closed = None
    if isinstance(graph, LinearGraph):
        closed = closed_form_variance(graph.spec, estimator)
        if closed is not None:
            closed /= n_average
    return VarianceReport(
        estimator=estimator.kind,
        window=estimator.effective_window(T),
        period=estimator.effective_period(T),
        n_average=n_average,
        samples=samples,
        mc_total_variance=trace_covariance(grads),
        stderr=batched_stderr(grads, batches),
        mc_mean=grads.mean(axis=0),
        mc_mean_stderr=grads.std(axis=0, ddof=1) / np.sqrt(samples),
        closed_form=closed,
    )


def fourth_moment_check(d: int, sigma: float, samples: int, seed: int, chunk: int = 200_000) -> float:
    """Max entrywise gap between the sampled ``E[e e^T e e^T]`` and ``(d+2) sigma^4 I``.

    ``e ~ N(0, sigma^2 I_d)`` is drawn from the same Philox substreams the
    workers use, so this doubles as a sanity gate on the noise source.
    """
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError("sigma must be finite and > 0")
    if samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    rng = substream(seed, 0)
    acc = np.zeros((d, d))
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        e = sigma * rng.standard_normal((m, d))
        acc += (e * np.sum(e * e, axis=1, keepdims=True)).T @ e
        done += m
    moment = acc / samples
    return float(np.max(np.abs(moment - (d + 2) * sigma**4 * np.eye(d))))
