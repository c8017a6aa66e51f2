import csv
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from online_es.cli import main
from online_es.config import ConfigError, ExperimentConfig
from online_es.graphs import LinearLossSpec, equal_window_sum_spec, orthogonal_window_sum_spec


@pytest.fixture
def spec_path(tmp_path):
    path = tmp_path / "spec.txt"
    LinearLossSpec.random(8, 2, seed=1).save(path)
    return path


def _cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _rows(path):
    lines = [ln for ln in open(path).read().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


def test_config_round_trip():
    cfg = ExperimentConfig(estimator="gpes", window=100, period=400, lr_schedule="1000:1e-06",
                           theta_init=(3.7, 3.116), k_list=(100, 2000), seed=3, log_theta=True)
    again = ExperimentConfig.parse(cfg.to_text())
    assert again == cfg
    assert ExperimentConfig.parse(again.to_text()).to_text() == cfg.to_text()


@settings(max_examples=50, deadline=None)
@given(window=st.one_of(st.none(), st.integers(1, 10**6)), sigma=st.floats(1e-6, 10, allow_nan=False),
       seed=st.one_of(st.none(), st.integers(0, 2**64 - 1)), ks=st.lists(st.integers(1, 5000), max_size=4))
def test_config_round_trip_property(window, sigma, seed, ks):
    cfg = ExperimentConfig(window=window, sigma=sigma, seed=seed, k_list=tuple(ks))
    assert ExperimentConfig.parse(cfg.to_text()) == cfg


def test_config_comments_and_parse_errors():
    cfg = ExperimentConfig.parse("# run\nestimator = pes  # inline\n\nwindow = 100\n")
    assert cfg.estimator == "pes" and cfg.window == 100
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.parse("bogus = 1\nwindow = x\nwindow = 3\nnot a pair\n")
    assert len(info.value.problems) == 4
    assert info.value.problems[0].startswith("line 1")


def test_validation_lists_every_problem():
    cfg = ExperimentConfig(estimator="gpes", window=7, period=None, sigma=0.0, lr=-1.0, n_workers=0)
    problems = cfg.problems()
    text = "\n".join(problems)
    for needle in ("does not divide", "period", "sigma", "lr", "n_workers", "seed"):
        assert needle in text
    with pytest.raises(ConfigError):
        cfg.validate()


def test_validation_of_k_lists():
    base = ExperimentConfig(estimator="gpes", window=100, seed=0)
    assert any("duplicate" in p for p in base.replace(k_list=(100, 100)).problems(task="sweep-k"))
    assert any("multiple" in p for p in base.replace(k_list=(150,)).problems(task="sweep-k"))
    assert any("outside" in p for p in base.replace(k_list=(4000,)).problems(task="sweep-k"))
    assert base.replace(k_list=(100, 200, 2000)).problems(task="sweep-k") == []


def test_train_zero_updates_is_header_only(tmp_path):
    out = tmp_path / "o.csv"
    cfg = _cfg(tmp_path, "estimator = nres\nwindow = 100\nnum_updates = 0\n")
    assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows == [["update", "train_loss", "test_loss", "cum_unroll_steps", "cum_sequential_steps", "wall_ms"]]


def test_invalid_window_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o.csv"
    cfg = _cfg(tmp_path, "estimator = nres\nwindow = 300\nnum_updates = 3\n")
    assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 2
    assert not out.exists()
    assert "does not divide" in capsys.readouterr().err


def test_missing_seed_is_config_error(tmp_path):
    cfg = _cfg(tmp_path, "estimator = nres\nwindow = 100\n")
    assert main(["train", "--config", cfg]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--seed", "1"]) == 2


def _train_linear(tmp_path, spec_path, out, extra=""):
    cfg = _cfg(tmp_path, f"graph = {spec_path}\nestimator = pes\nwindow = 2\nn_workers = 4\nsigma = 0.3\n"
                         f"lr = 0.01\nnum_updates = 12\nlog_theta = true\n{extra}")
    return main(["train", "--config", cfg, "--seed", "11", "--out", str(out)])


def test_train_csv_is_reproducible(tmp_path, spec_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _train_linear(tmp_path, spec_path, a) == 0
    assert _train_linear(tmp_path, spec_path, b) == 0
    lines = open(a).read().splitlines()
    assert lines[0].startswith("# schema: online-es/train")
    ra, rb = _rows(a), _rows(b)
    wall = ra[0].index("wall_ms")
    strip = lambda rows: [r[:wall] + r[wall + 1:] for r in rows]  # noqa: E731
    assert strip(ra) == strip(rb)
    assert ra[0][-2:] == ["theta_0", "theta_1"]
    seq = [int(r[ra[0].index("cum_sequential_steps")]) for r in ra[1:]]
    assert seq == [4 * u for u in range(1, 13)]


def test_lorenz_train_step_accounting(tmp_path):
    out = tmp_path / "l.csv"
    cfg = _cfg(tmp_path, "horizon = 200\nestimator = nres\nwindow = 100\nn_workers = 3\nnum_updates = 3\n"
                         "test_samples = 2\n")
    assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
    rows = _rows(out)
    seq = [int(r[4]) for r in rows[1:]]
    assert seq == [200, 400, 600]
    assert all(float(r[2]) > 0 for r in rows[1:])


def test_train_divergence_exit_code(tmp_path, capsys):
    out = tmp_path / "d.csv"
    cfg = _cfg(tmp_path, "horizon = 200\nestimator = nres\nwindow = 100\nn_workers = 2\nnum_updates = 3\n"
                         "theta_init = 3.332, 9.0\n")
    assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 3
    assert not out.exists()
    assert "update" in capsys.readouterr().err


def test_sweep_k(tmp_path, spec_path):
    out = tmp_path / "k.csv"
    cfg = _cfg(tmp_path, f"graph = {spec_path}\nwindow = 2\nn_workers = 2\nsigma = 0.3\nlr = 0.01\n"
                         "num_updates = 5\n")
    assert main(["sweep-k", "--config", cfg, "--seed", "1", "--k-list", "2,4,8", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0][0] == "K"
    counts = {k: sum(1 for r in rows[1:] if r[0] == k) for k in ("2", "4", "8")}
    assert counts == {"2": 5, "4": 5, "8": 5}
    assert main(["sweep-k", "--config", cfg, "--seed", "1", "--k-list", "2,2"]) == 2


def test_variance_command(tmp_path, spec_path, capsys):
    out = tmp_path / "v.csv"
    cfg = _cfg(tmp_path, f"graph = {spec_path}\nestimator = gpes\nwindow = 1\nsigma = 1.0\n"
                         "variance_estimators = gpes, fulles, tes\n")
    assert main(["variance", "--config", cfg, "--seed", "2", "--mc", "2000", "--k-list", "1,2,8",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["estimator", "W", "K", "N", "M", "closed_form", "mc", "stderr"]
    assert [r[0] for r in rows[1:]] == ["gpes", "gpes", "gpes", "fulles", "tes"]
    assert all(r[5] != "" for r in rows[1:5]) and rows[5][5] == ""
    assert main(["variance", "--config", cfg, "--seed", "2", "--mc", "50"]) == 2
    assert "mc" in capsys.readouterr().err


def test_variance_k_equals_t_is_smallest(tmp_path, spec_path):
    out = tmp_path / "v.csv"
    cfg = _cfg(tmp_path, f"graph = {spec_path}\nestimator = gpes\nwindow = 1\nsigma = 1.0\n")
    assert main(["variance", "--config", cfg, "--seed", "5", "--mc", "20000", "--k-list", "1,2,4,8",
                 "--out", str(out)]) == 0
    mc = [float(r[6]) for r in _rows(out)[1:]]
    assert int(np.argmin(mc)) == 3


def test_variance_lorenz_has_empty_closed_form(tmp_path):
    out = tmp_path / "v.csv"
    cfg = _cfg(tmp_path, "horizon = 20\nestimator = nres\nwindow = 10\n")
    assert main(["variance", "--config", cfg, "--seed", "0", "--mc", "100", "--out", str(out)]) == 0
    assert _rows(out)[1][5] == ""


def _check(args, capsys):
    code = main(["check-theorem2"] + args)
    return code, capsys.readouterr()


def test_check_window_condition_command(tmp_path, capsys):
    eq, orth, zero = tmp_path / "eq.txt", tmp_path / "orth.txt", tmp_path / "zero.txt"
    equal_window_sum_spec(8, 2, 2, seed=0).save(eq)
    orthogonal_window_sum_spec(4, 2, 40).save(orth)
    LinearLossSpec.zeros(4, 2).save(zero)
    code, cap = _check(["--spec", str(eq), "--window", "2"], capsys)
    assert code == 0 and "holds=true" in cap.out
    code, cap = _check(["--spec", str(orth), "--window", "2"], capsys)
    assert code == 0 and "holds=false" in cap.out
    code, cap = _check(["--spec", str(zero), "--window", "2", "--mc", "200", "--seed", "0"], capsys)
    assert code == 0 and "holds=true" in cap.out
    assert "nres_avg_mc=0.0" in cap.out and "fulles_mc=0.0" in cap.out
    code, _ = _check(["--spec", str(zero), "--window", "3"], capsys)
    assert code == 2
    code, _ = _check(["--spec", str(zero), "--window", "2", "--mc", "200"], capsys)
    assert code == 2


def test_check_window_condition_bad_spec_line(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("2 1\n1 1 0.5\n2 1 oops\n2 2 1.0\n")
    code, cap = _check(["--spec", str(bad), "--window", "1"], capsys)
    assert code == 2 and "line 3" in cap.err


def test_gen_linear_spec(tmp_path, capsys):
    out = tmp_path / "g.txt"
    assert main(["gen-linear-spec", "--horizon", "8", "--dim", "3", "--seed", "4", "--out", str(out)]) == 0
    assert np.array_equal(LinearLossSpec.load(out).g, LinearLossSpec.random(8, 3, 4).g)
    assert main(["gen-linear-spec", "--horizon", "8", "--dim", "3", "--seed", "4", "--kind", "equal-window",
                 "--window", "2", "--out", str(out)]) == 0
    assert main(["gen-linear-spec", "--horizon", "8", "--dim", "3", "--seed", "4", "--kind", "equal-window"]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "online_es.cli", "gen-linear-spec", "--horizon", "2", "--dim", "1",
                          "--seed", "0"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0] == "2 1"
    assert LinearLossSpec.from_text(res.stdout).horizon == 2
