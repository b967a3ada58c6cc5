"""Configuration, calibration, campaign, and output-emission tests."""

import json

import pytest

from qkdlink.harness.calibrate import CalibrationError, calibrate
from qkdlink.harness.campaign import (
    CampaignSummary,
    LinkMetrics,
    run_attenuation_sweep,
    run_interval,
    run_stability,
)
from qkdlink.harness.config import LinkConfig, config_digest, dump_config, load_config
from qkdlink.harness.outputs import (
    emit_stability_outputs,
    emit_sweep_outputs,
    metrics_to_csv,
    sweep_to_csv,
)
from qkdlink import cli


@pytest.fixture(scope="module")
def calibrated() -> LinkConfig:
    cfg = LinkConfig()
    result = calibrate(cfg.raw["calibration"]["targets"], seed=7, cfg=cfg)
    return result.apply(cfg)


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config(None)
        assert cfg.raw["physics"]["loss_db"] == 12.47
        assert cfg.channel().total_loss_db == 12.47
        assert cfg.probs().sum() == pytest.approx(1.0)

    def test_file_merge(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("physics:\n  added_loss_db: 3.0\nharness:\n  seed: 99\n")
        cfg = load_config(path)
        assert cfg.raw["physics"]["added_loss_db"] == 3.0
        assert cfg.raw["physics"]["loss_db"] == 12.47  # untouched default
        assert cfg.seed == 99

    def test_env_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QKDLINK_KMS_PORT", "9999")
        monkeypatch.setenv("QKDLINK_DATA_DIR", str(tmp_path))
        cfg = load_config(None)
        assert cfg.raw["kms"]["api_port"] == 9999
        assert cfg.raw["kms"]["data_dir"] == str(tmp_path)

    def test_digest_stable_and_sensitive(self):
        a, b = LinkConfig(), LinkConfig()
        assert config_digest(a) == config_digest(b)
        c = a.with_updates(physics={"mu": 2e-3})
        assert config_digest(c) != config_digest(a)

    def test_dump_roundtrip(self, tmp_path):
        cfg = LinkConfig().with_updates(harness={"seed": 5})
        path = tmp_path / "out.yaml"
        dump_config(cfg, path)
        again = load_config(path)
        assert config_digest(again) == config_digest(cfg)

    def test_jitter_lookup(self):
        cfg = LinkConfig()
        assert cfg.jitter_for(3.0) == 0.2
        assert cfg.jitter_for(8.0) == 0.4
        assert cfg.jitter_for(0.0) == 0.0


class TestCalibrate:
    def test_baseline_feasible(self, calibrated):
        cfg = LinkConfig()
        result = calibrate(cfg.raw["calibration"]["targets"], seed=7, cfg=cfg)
        assert result.feasible
        for key, residual in result.residuals.items():
            assert residual <= 0.05, key
        assert result.curve_predicted["12"] == 0.0

    def test_fixed_point_idempotent(self, calibrated):
        # Calibrating an already-calibrated config against the same
        # targets returns (nearly) the same fitted point.
        targets = LinkConfig().raw["calibration"]["targets"]
        first = calibrate(targets, seed=1, cfg=LinkConfig())
        again = calibrate(targets, seed=1, cfg=first.apply(LinkConfig()))
        assert again.feasible
        for key in ("mu", "dark_prob", "v_src", "f_ec", "pp_cap_bps"):
            assert again.fitted[key] == pytest.approx(first.fitted[key], rel=2e-2), key

    def test_infeasible_target_fails_explicitly(self):
        cfg = LinkConfig()
        targets = dict(cfg.raw["calibration"]["targets"])
        targets["qber"] = 0.0  # unreachable: modulator leakage floors the QBER
        with pytest.raises(CalibrationError) as err:
            calibrate(targets, seed=1, cfg=cfg)
        assert err.value.result is not None
        assert err.value.result.residuals["qber"] > 0.05

    def test_deterministic(self):
        cfg = LinkConfig()
        t = cfg.raw["calibration"]["targets"]
        r1 = calibrate(t, seed=3, cfg=cfg)
        r2 = calibrate(t, seed=3, cfg=cfg)
        assert r1.fitted == r2.fitted


class TestCampaign:
    def test_stability_short_run(self, calibrated):
        metrics, summary = run_stability(calibrated, n_intervals=5, interval_s=2.0)
        assert len(metrics) == 5
        assert summary.aborted_intervals == 0
        assert summary.mean["skr_bps"] > 0
        assert 0.01 < summary.mean["qber"] < 0.03
        assert metrics[3].timestamp == pytest.approx(6.0)

    def test_stability_deterministic_csv(self, calibrated):
        m1, s1 = run_stability(calibrated, n_intervals=4, interval_s=2.0, seed=11)
        m2, s2 = run_stability(calibrated, n_intervals=4, interval_s=2.0, seed=11)
        assert metrics_to_csv(m1, s1.config_digest, 11) == metrics_to_csv(m2, s2.config_digest, 11)

    def test_intervals_order_independent(self, calibrated):
        params = calibrated.security()
        order_a = [run_interval(calibrated, params, None, 2.0, 5, 0, i)[0] for i in (0, 1, 2, 3)]
        order_b = [run_interval(calibrated, params, None, 2.0, 5, 0, i)[0] for i in (3, 1, 0, 2)]
        by_index_b = {m.timestamp: m for m in order_b}
        for m in order_a:
            other = by_index_b[m.timestamp]
            assert m.skr_bps == other.skr_bps
            assert m.qber == other.qber
            assert m.detections_total == other.detections_total

    def test_sweep_monotone_and_cutoff(self, calibrated):
        rows = run_attenuation_sweep(
            calibrated, added_db_list=[0.0, 5.0, 8.0, 12.0], intervals_per_point=3, interval_s=5.0
        )
        means = [r.skr_bps_mean for r in rows]
        assert all(a >= b - 1e-9 for a, b in zip(means, means[1:]))
        assert rows[-1].skr_bps_mean == 0.0
        assert rows[-1].aborted_fraction == 1.0
        assert rows[-1].skr_bps_predicted == 0.0
        assert rows[0].skr_bps_predicted > 0

    def test_metric_validation(self):
        with pytest.raises(ValueError):
            LinkMetrics(timestamp=0.0, skr_bps=-1.0, qber=0.0, visibility_dcc=1.0, detections_total=0)
        with pytest.raises(ValueError):
            LinkMetrics(timestamp=0.0, skr_bps=0.0, qber=1.5, visibility_dcc=1.0, detections_total=0)

    def test_summary_needs_two_samples(self):
        m = LinkMetrics(timestamp=0.0, skr_bps=1.0, qber=0.01, visibility_dcc=0.99, detections_total=10)
        with pytest.raises(ValueError):
            CampaignSummary.from_metrics([m], 1.0, "d", 0)


class TestOutputs:
    def make_metrics(self, n=3):
        return [
            LinkMetrics(timestamp=float(i), skr_bps=2300.0 + i, qber=0.019,
                        visibility_dcc=0.9912, detections_total=18199)
            for i in range(n)
        ]

    def test_csv_three_rows(self):
        text = metrics_to_csv(self.make_metrics(3), "digest", 1)
        lines = text.strip().split("\n")
        assert lines[0].startswith("# config_digest=digest")
        assert lines[1] == "timestamp,skr_bps,qber,visibility_dcc,detections_total"
        assert len(lines) == 5  # comment + header + 3 data lines

    def test_empty_series_rejected(self):
        with pytest.raises(ValueError):
            metrics_to_csv([], "d", 1)
        with pytest.raises(ValueError):
            sweep_to_csv([], "d", 1)

    def test_emit_stability_files(self, tmp_path, calibrated):
        metrics, summary = run_stability(calibrated, n_intervals=3, interval_s=1.0)
        out = emit_stability_outputs(metrics, summary, tmp_path, seed=1)
        assert out["csv"].exists()
        for key in ("skr_bps", "qber", "visibility_dcc", "detections_per_s"):
            assert out[key].exists()
            assert out[key].stat().st_size > 0

    def test_emit_sweep_files(self, tmp_path, calibrated):
        rows = run_attenuation_sweep(
            calibrated, added_db_list=[0.0, 8.0], intervals_per_point=2, interval_s=2.0
        )
        out = emit_sweep_outputs(rows, tmp_path, "digest", seed=1)
        assert out["csv"].exists()
        assert out["plot"].exists()

    def test_unwritable_path_raises(self, tmp_path, calibrated):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        metrics, summary = run_stability(calibrated, n_intervals=2, interval_s=1.0)
        with pytest.raises(OSError):
            emit_stability_outputs(metrics, summary, blocker / "sub", seed=1)


class TestCli:
    def test_simulate_ok(self, capsys):
        assert cli.main(["simulate", "--intervals", "2"]) == 0
        out = capsys.readouterr().out
        assert "timestamp,skr_bps" in out

    def test_calibrate_writes_config(self, tmp_path, capsys):
        out_path = tmp_path / "cal.yaml"
        assert cli.main(["calibrate", "--out", str(out_path)]) == 0
        assert out_path.exists()
        payload = json.loads(capsys.readouterr().out)
        assert payload["feasible"] is True

    def test_calibrate_infeasible_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("calibration:\n  targets:\n    qber: 0.0\n")
        assert cli.main(["calibrate", "--config", str(bad)]) == cli.EXIT_CALIBRATION_INFEASIBLE

    def test_stability_and_sweep_outputs(self, tmp_path, capsys):
        small = tmp_path / "small.yaml"
        small.write_text(
            "harness:\n  stability_intervals: 3\n  interval_s: 1.0\n"
            "  sweep_added_db: [0.0, 12.0]\n  sweep_intervals_per_point: 2\n"
        )
        assert cli.main(["stability", "--config", str(small), "--out", str(tmp_path / "st")]) == 0
        assert (tmp_path / "st" / "stability.csv").exists()
        assert cli.main(["sweep", "--config", str(small), "--out", str(tmp_path / "sw")]) == 0
        assert (tmp_path / "sw" / "sweep.csv").exists()

    def test_io_error_exit_code(self, tmp_path):
        blocker = tmp_path / "plain-file"
        blocker.write_text("x")
        code = cli.main(["stability", "--intervals", "2", "--out", str(blocker / "nested")])
        assert code == cli.EXIT_IO_ERROR
