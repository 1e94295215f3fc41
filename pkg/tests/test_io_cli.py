import json

import numpy as np
import pytest

from kpfilter import io as kio
from kpfilter.cli import main
from kpfilter.estimators import ChangePointKalmanParticleFilter
from kpfilter.simulate import ObservationSeries, simulate_series

CIR_PARAMS = {"alpha": 0.45, "beta": 0.001, "sigma": 0.017}


def _series(n_steps=30, seed=0):
    return simulate_series(
        "cir", CIR_PARAMS, np.arange(1.0, 6.0), n_steps, 1e-8, seed=seed
    )


def test_series_csv_round_trip_is_exact(tmp_path):
    series = _series()
    path = kio.write_series_csv(series, tmp_path / "panel.csv")
    assert kio.truth_path_for(path).exists()
    back = kio.read_series_csv(path)
    assert np.array_equal(back.values, series.values)
    assert np.array_equal(back.times, series.times)
    assert np.array_equal(back.maturities, series.maturities)
    assert back.obs_var == series.obs_var
    assert back.truth is not None
    assert back.truth.segments == series.truth.segments
    assert back.truth.seed == series.truth.seed
    assert np.array_equal(back.truth.x_path, series.truth.x_path)


def test_series_csv_without_truth_requires_obs_var(tmp_path):
    bare = ObservationSeries(
        times=_series().times,
        maturities=_series().maturities,
        values=_series().values,
        obs_var=1e-8,
    )
    path = kio.write_series_csv(bare, tmp_path / "bare.csv")
    assert not kio.truth_path_for(path).exists()
    with pytest.raises(ValueError):
        kio.read_series_csv(path)
    back = kio.read_series_csv(path, obs_var=2e-8)
    assert back.obs_var == 2e-8
    assert back.truth is None


def test_trace_csv_round_trip_preserves_bookkeeping(tmp_path):
    est = ChangePointKalmanParticleFilter(
        n_particles=60,
        reset_threshold=0.95,
        start_phase="recursive",
        record_state=True,
        random_state=1,
    ).fit(_series(40))
    trace = est.trace_
    assert len(trace.reset_steps) >= 1
    path = kio.write_trace_csv(trace, tmp_path / "trace.csv")
    back = kio.read_trace_csv(path)
    assert back.param_names == trace.param_names
    assert np.array_equal(back.steps, trace.steps)
    assert np.array_equal(back.phase, trace.phase)
    assert np.array_equal(back.reset, trace.reset)
    assert np.array_equal(back.max_loglik, trace.max_loglik, equal_nan=True)
    assert np.array_equal(back.theta_mean, trace.theta_mean)
    assert np.array_equal(back.theta_std, trace.theta_std)
    assert np.array_equal(back.jitter_std, trace.jitter_std)
    assert np.array_equal(back.state_mean, trace.state_mean)
    assert np.array_equal(back.state_var, trace.state_var)
    assert back.switch_steps == trace.switch_steps
    assert back.reset_steps == trace.reset_steps


def test_summary_json_is_byte_stable(tmp_path):
    summary = {"b": [1.0, 2.5], "a": {"nested": 0.125}}
    p1 = kio.write_summary_json(summary, tmp_path / "one.json")
    p2 = kio.write_summary_json(dict(reversed(summary.items())), tmp_path / "two.json")
    assert p1.read_bytes() == p2.read_bytes()
    assert json.loads(p1.read_text())["a"]["nested"] == 0.125


def _write_config(tmp_path, **overrides):
    config = {
        "model": {"family": "cir"},
        "data": {
            "params": CIR_PARAMS,
            "n_steps": 25,
            "maturities": [1, 2, 3, 4, 5],
            "obs_var": 1e-8,
            "seed": 0,
        },
        "estimator": {"kind": "kpf", "n_particles": 40, "seed": 1},
        "output": {"prefix": "demo"},
    }
    for key, value in overrides.items():
        config[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_cli_simulate_calibrate_report_happy_path(tmp_path):
    config = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
    panel = out / "demo_series.csv"
    truth = out / "demo_series.truth.json"
    assert panel.exists() and truth.exists()

    assert main([
        "calibrate", "--config", str(config), "--out", str(out), "--data", str(panel),
    ]) == 0
    trace = out / "demo_trace.csv"
    summary = out / "demo_summary.json"
    assert trace.exists() and summary.exists()
    payload = json.loads(summary.read_text())
    assert payload["estimator"] == "KalmanParticleFilter"
    assert payload["param_names"] == ["alpha", "beta", "sigma"]
    assert len(payload["theta_mean"]) == 3
    assert "theta_error" in payload

    assert main([
        "report", "--trace", str(trace), "--truth", str(truth), "--out", str(out),
    ]) == 0
    report = json.loads((out / "demo_trace_report.json").read_text())
    assert report["n_steps"] == 25
    assert set(report["within_three_std"]) == {"alpha", "beta", "sigma"}


def test_cli_grid_estimator_writes_weights(tmp_path):
    config = _write_config(
        tmp_path,
        estimator={
            "kind": "grid",
            "grid": [[0.4, 0.001, 0.017], [0.45, 0.001, 0.017], [0.5, 0.001, 0.017]],
        },
    )
    out = tmp_path / "out"
    assert main(["calibrate", "--config", str(config), "--out", str(out)]) == 0
    payload = json.loads((out / "demo_summary.json").read_text())
    weights = np.array(payload["final_weights"])
    assert weights.shape == (3,)
    assert abs(weights.sum() - 1.0) < 1e-9


def test_cli_config_errors_exit_2(tmp_path):
    out = str(tmp_path / "out")
    bad_json = tmp_path / "broken.json"
    bad_json.write_text("{not json")
    assert main(["simulate", "--config", str(bad_json), "--out", out]) == 2

    bad_family = _write_config(tmp_path, model={"family": "vasicek9"})
    assert main(["simulate", "--config", str(bad_family), "--out", out]) == 2

    bad_kind = _write_config(tmp_path, estimator={"kind": "mcmc"})
    assert main(["calibrate", "--config", str(bad_kind), "--out", out]) == 2

    bad_option = _write_config(tmp_path, estimator={"kind": "kpf", "n_walkers": 7})
    assert main(["calibrate", "--config", str(bad_option), "--out", out]) == 2

    missing_field = _write_config(tmp_path, data={"params": CIR_PARAMS})
    assert main(["simulate", "--config", str(missing_field), "--out", out]) == 2


def test_cli_report_on_missing_trace_exits_4(tmp_path):
    assert main(["report", "--trace", str(tmp_path / "absent.csv")]) == 4


def test_cli_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    assert "all selftest checks passed" in capsys.readouterr().out


def test_cli_seed_overrides(tmp_path):
    config = _write_config(tmp_path)
    out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
    assert main(["simulate", "--config", str(config), "--out", str(out_a), "--seed", "5"]) == 0
    assert main(["simulate", "--config", str(config), "--out", str(out_b), "--seed", "5"]) == 0
    assert main(["simulate", "--config", str(config), "--out", str(out_c), "--seed", "6"]) == 0
    bytes_a = (out_a / "demo_series.csv").read_bytes()
    assert bytes_a == (out_b / "demo_series.csv").read_bytes()
    assert bytes_a != (out_c / "demo_series.csv").read_bytes()

    panel = out_a / "demo_series.csv"
    for target, seed in ((out_a, "9"), (out_b, "9"), (out_c, "10")):
        assert main([
            "calibrate", "--config", str(config), "--out", str(target),
            "--data", str(panel), "--seed", seed,
        ]) == 0
    t_a = (out_a / "demo_trace.csv").read_bytes()
    assert t_a == (out_b / "demo_trace.csv").read_bytes()
    assert t_a != (out_c / "demo_trace.csv").read_bytes()
