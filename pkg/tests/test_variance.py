import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from online_es.estimators import EstimatorConfig
from online_es.graphs import LinearGraph, LinearLossSpec, LorenzGraph, equal_window_sum_spec, orthogonal_window_sum_spec
from online_es.variance import (VARIANCE_CSV_HEADER, _pairwise_term, batched_stderr, closed_form_fulles_variance,
                                closed_form_gpes_variance, closed_form_variance, fourth_moment_check, mc_total_variance,
                                mega_spec, tes_expected_gradient, theorem2_condition, trace_covariance,
                                write_variance_csv)


def _ones_spec():
    g = np.zeros((2, 2, 1))
    g[0, 0] = 1.0
    g[1, 1] = 1.0
    return LinearLossSpec(g)


def test_small_closed_form_examples():
    spec = _ones_spec()
    assert closed_form_gpes_variance(spec, 2) == pytest.approx(2.0, abs=1e-15)
    assert closed_form_fulles_variance(spec) == pytest.approx(2.0, abs=1e-15)
    # c=1 adds the pairwise term: windows (0, 1) at t=2, d/2 * 2 * 1 / T = 0.5
    assert closed_form_gpes_variance(spec, 1) == pytest.approx(2.5, abs=1e-15)


def test_zero_spec_closed_forms():
    spec = LinearLossSpec.zeros(5, 3)
    assert closed_form_fulles_variance(spec) == 0
    assert all(closed_form_gpes_variance(spec, c) == 0 for c in range(1, 6))
    assert theorem2_condition(spec, 1) == (0.0, 0.0, True)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 8), d=st.integers(1, 4), seed=st.integers(0, 10_000), lam=st.floats(-5, 5))
def test_closed_form_properties(T, d, seed, lam):
    spec = LinearLossSpec.random(T, d, seed)
    assert _pairwise_term(spec, T) == 0
    cf = [closed_form_gpes_variance(spec, c) for c in range(1, T + 1)]
    assert min(cf) == cf[-1]
    scaled = LinearLossSpec(spec.g * lam)
    assert closed_form_fulles_variance(scaled) == pytest.approx(lam**2 * closed_form_fulles_variance(spec), rel=1e-9,
                                                                abs=1e-12)
    assert closed_form_gpes_variance(scaled, 1) == pytest.approx(lam**2 * cf[0], rel=1e-9, abs=1e-12)


def test_full_period_minimizes_closed_form_over_fifty_specs():
    failures = 0
    for seed in range(50):
        spec = LinearLossSpec.random(8, 3, seed)
        cf = [closed_form_gpes_variance(spec, c) for c in range(1, 9)]
        failures += int(np.argmin(cf) != 7)
    assert failures == 0


def test_closed_form_rejects_bad_period(small_spec):
    for c in (0, 7):
        with pytest.raises(ValueError):
            closed_form_gpes_variance(small_spec, c)


def test_mega_spec_shape_and_sums(small_spec):
    m = mega_spec(small_spec, 2)
    assert m.g.shape == (3, 3, 2)
    np.testing.assert_allclose(m.mean_gradient(), small_spec.mean_gradient(), atol=1e-12)
    assert np.array_equal(mega_spec(small_spec, 1).g, small_spec.g)
    with pytest.raises(ValueError):
        mega_spec(small_spec, 4)


def test_closed_form_dispatch(small_spec):
    T = small_spec.horizon
    assert closed_form_variance(small_spec, EstimatorConfig("tes", 1.0, 2)) is None
    assert closed_form_variance(small_spec, EstimatorConfig("fulles", 1.0)) == closed_form_fulles_variance(small_spec)
    assert closed_form_variance(small_spec, EstimatorConfig("pes", 1.0, 2)) == closed_form_gpes_variance(small_spec, 1, 2)
    assert closed_form_variance(small_spec, EstimatorConfig("nres", 1.0, 3)) == closed_form_gpes_variance(
        small_spec, T // 3, 3)


def test_tes_expected_gradient_single_window_is_unbiased(small_spec):
    np.testing.assert_allclose(tes_expected_gradient(small_spec, 6), small_spec.mean_gradient(), atol=1e-12)


def test_window_condition_algebra():
    lhs, rhs, holds = theorem2_condition(equal_window_sum_spec(8, 2, 2, seed=0), 2)
    u2 = lhs / 4
    assert rhs == pytest.approx(12 * u2) and holds
    lhs, rhs, holds = theorem2_condition(orthogonal_window_sum_spec(4, 2, 50), 2)
    assert rhs == pytest.approx(lhs * 51 / 52) and not holds
    with pytest.raises(ValueError):
        theorem2_condition(LinearLossSpec.zeros(6, 1), 4)


def test_trace_and_stderr():
    x = np.random.default_rng(0).normal(size=(4000, 3)) * [1.0, 2.0, 3.0]
    assert trace_covariance(x) == pytest.approx(14.0, rel=0.05)
    se = batched_stderr(x)
    assert 0 < se < 1.0


def test_mc_zero_graph():
    graph = LinearGraph(LinearLossSpec.zeros(4, 2))
    r = mc_total_variance(EstimatorConfig("pes", 1.0, 1), graph, np.zeros(2), 200, 0)
    assert r.mc_total_variance == 0 and r.closed_form == 0


def test_mc_needs_enough_samples(small_graph):
    with pytest.raises(ValueError):
        mc_total_variance(EstimatorConfig("pes", 1.0, 1), small_graph, np.zeros(2), 99, 0)


def test_mc_report_fields_and_determinism(small_graph):
    est = EstimatorConfig("gpes", 1.0, 2, 4)
    a = mc_total_variance(est, small_graph, np.zeros(2), 400, 3, n_average=2)
    b = mc_total_variance(est, small_graph, np.zeros(2), 400, 3, n_average=2)
    assert a.mc_total_variance == b.mc_total_variance and a.stderr > 0
    assert (a.window, a.period, a.n_average, a.samples) == (2, 4, 2, 400)
    assert a.closed_form == pytest.approx(closed_form_gpes_variance(small_graph.spec, 2, 2) / 2)
    buf = io.StringIO()
    write_variance_csv(buf, [a])
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("# schema:")
    assert lines[1] == ",".join(VARIANCE_CSV_HEADER)
    assert lines[2].startswith("gpes,2,4,2,400,")


def test_mc_on_lorenz_has_no_closed_form():
    graph = LorenzGraph(horizon=20)
    r = mc_total_variance(EstimatorConfig("nres", 0.04, 10), graph, graph.theta_gt, 100, 0)
    assert r.closed_form is None and r.mc_total_variance >= 0
    assert r.csv_row()[5] == ""


def test_mc_matches_closed_form_moderate_sample():
    spec = LinearLossSpec.random(4, 2, seed=7)
    graph = LinearGraph(spec)
    for c in (1, 2, 4):
        r = mc_total_variance(EstimatorConfig("gpes", 1.0, 1, c), graph, np.zeros(2), 20_000, c)
        assert abs(r.mc_total_variance - r.closed_form) <= 5 * r.stderr
        assert np.all(np.abs(r.mc_mean - spec.mean_gradient()) <= 4 * r.mc_mean_stderr)


def test_doubling_sigma_keeps_mean():
    spec = LinearLossSpec.random(4, 2, seed=8)
    graph = LinearGraph(spec)
    a = mc_total_variance(EstimatorConfig("pes", 0.5, 1), graph, np.ones(2), 20_000, 1)
    b = mc_total_variance(EstimatorConfig("pes", 1.0, 1), graph, np.ones(2), 20_000, 2)
    se = np.sqrt(a.mc_mean_stderr**2 + b.mc_mean_stderr**2)
    assert np.all(np.abs(a.mc_mean - b.mc_mean) <= 3 * se)


def test_fourth_moment():
    assert fourth_moment_check(1, 0.7, 200_000, 0) < 0.02
    assert fourth_moment_check(3, 1.0, 10**6, 0) <= 0.05
    with pytest.raises(ValueError):
        fourth_moment_check(3, 0.0, 10**4, 0)
    with pytest.raises(ValueError):
        fourth_moment_check(3, 1.0, 9_999, 0)
