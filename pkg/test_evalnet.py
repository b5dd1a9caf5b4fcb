"""Tests for metrics, the polynomial baseline, Pearson networks, experiments and timing."""

import numpy as np
import pytest

from src import evalnet
from src.datagen import GeneratorSpec, RoiSeries, SignalSample
from src.evalnet import (
    DECODE_RATIO_RANGE,
    ENCODER_SLOPE_RANGE,
    BaselineError,
    EvalReport,
    ExperimentConfig,
    ExperimentConfigError,
    MetricError,
    ReportRow,
    ScalingCheck,
    decode_scaling_check,
    encoder_scaling_check,
    measure_runtime,
    pearson_network,
    poly_baseline,
    rmse,
    run_experiment,
    run_sweep,
    runtime_report,
)
from src.training import LatentODEModel, ModelParams, TrainConfig, TrainingDivergedError, train


def one_roi(times, values):
    return SignalSample("p", (RoiSeries(np.asarray(times, dtype=float), np.asarray(values, dtype=float)),))


@pytest.fixture
def small_experiment(tiny_config):
    def build(kind, values, **kwargs):
        return ExperimentConfig(
            kind=kind,
            values=values,
            seeds=kwargs.pop("seeds", 1),
            generator=GeneratorSpec(num_rois=2, num_samples=5, duration=8.0),
            train=TrainConfig(**{**tiny_config.to_dict(), "epochs": 1}),
            **kwargs,
        )
    return build


class TestRmse:
    def test_identical(self):
        assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_single(self):
        assert rmse([0.0], [1.0]) == 1.0

    def test_pair(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5355, abs=1e-4)

    def test_empty(self):
        with pytest.raises(MetricError):
            rmse([], [])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            rmse([1.0], [1.0, 2.0])


class TestPolyBaseline:
    def test_line_exact(self):
        t = np.array([0.0, 1.0, 2.0, 4.0])
        out = poly_baseline(one_roi(t, 2 * t + 1), 1, [10.0, -3.0])
        np.testing.assert_allclose(out.values[0], [21.0, -5.0], atol=1e-9)
        assert out.degrees == [1]

    def test_parabola_through_three_points(self):
        t = np.array([0.0, 1.0, 3.0])
        out = poly_baseline(one_roi(t, t**2 - t), 2, [2.0, 5.0])
        np.testing.assert_allclose(out.values[0], [2.0, 20.0], atol=1e-9)

    def test_interpolates_observed_points(self, rng):
        t = np.arange(6.0)
        y = rng.standard_normal(6)
        out = poly_baseline(one_roi(t, y), 5, t)
        np.testing.assert_allclose(out.values[0], y, atol=1e-8)

    def test_extrapolation_diverges(self):
        t = np.linspace(0.0, 10.0, 21)
        out = poly_baseline(one_roi(t, np.sin(t)), 5, [13.0])
        assert abs(out.values[0, 0] - np.sin(13.0)) > 1.0

    def test_too_few_points(self):
        with pytest.raises(BaselineError):
            poly_baseline(one_roi([0.0, 1.0], [0.0, 1.0]), 2, [0.5])

    def test_one_row_per_roi(self, toy_dataset):
        out = poly_baseline(toy_dataset.samples[0], 3, np.linspace(0, 7, 4))
        assert out.values.shape == (3, 4)


class TestPearson:
    def test_self_and_negation(self, rng):
        x = rng.standard_normal(20)
        net = pearson_network(np.vstack([x, -x, x]))
        assert net.matrix[0, 2] == pytest.approx(1.0)
        assert net.matrix[0, 1] == pytest.approx(-1.0)

    def test_matches_scipy(self, rng):
        from scipy import stats

        signals = rng.standard_normal((4, 30))
        net = pearson_network(signals)
        for i in range(4):
            for j in range(i + 1, 4):
                assert net.matrix[i, j] == pytest.approx(stats.pearsonr(signals[i], signals[j])[0], abs=1e-12)

    def test_constant_rows(self):
        net = pearson_network(np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [0.0, 1.0, 3.0]]))
        assert net.matrix[0, 1] == 0.0
        assert net.matrix[0, 2] == 0.0
        assert net.constant_rois == [0, 1]
        assert len(net.warnings) == 2

    def test_shape_laws(self, rng):
        net = pearson_network(rng.standard_normal((6, 15)))
        np.testing.assert_array_equal(net.matrix, net.matrix.T)
        np.testing.assert_array_equal(np.diag(net.matrix), 1.0)
        assert np.all(np.abs(net.matrix) <= 1.0)

    def test_too_short(self):
        with pytest.raises(MetricError):
            pearson_network(np.ones((3, 1)))


class TestExperimentConfig:
    def test_unknown_kind(self):
        with pytest.raises(ExperimentConfigError, match="valid kinds"):
            ExperimentConfig(kind="bogus")

    def test_default_values(self):
        assert ExperimentConfig(kind="offset").values == (0.1, 0.2, 0.3)
        assert ExperimentConfig().poly_degrees == (1, 2, 3, 4, 5)

    def test_bad_variant(self):
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig(variants=("theirs",))

    def test_fractional_steps(self):
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig(kind="missing-interp", values=(2.5,))

    def test_run_seeds(self):
        assert ExperimentConfig(seeds=3, master_seed=10).run_seeds == [10, 11, 12]

    def test_train_config_per_variant(self):
        config = ExperimentConfig().train_config("ours-t", 4)
        assert config.ablation.no_temporal_graph and config.seed == 4


class TestRunExperiment:
    def test_empty_targets_are_flagged(self, small_experiment):
        report = run_experiment(small_experiment("missing-interp", (0,)))
        row = report.row("ours", 0)
        assert row.rmse_mean is None and row.rmse_std is None
        assert row.flags == ["empty-targets"]
        assert row.seeds_used == 0
        assert any("no held-out targets" in w for w in report.warnings)

    def test_rows_and_baselines(self, small_experiment):
        report = run_experiment(small_experiment("missing-extrap", (2,)))
        models = [r.model for r in report.rows]
        assert models == ["ours", "poly-d1", "poly-d2", "poly-d3", "poly-d4", "poly-d5", "poly"]
        best = min(r.rmse_mean for r in report.rows if r.model.startswith("poly-d"))
        assert report.row("poly").rmse_mean == best
        assert all(r.rmse_mean >= 0 and r.rmse_std == 0.0 for r in report.rows)

    def test_deterministic(self, small_experiment, monkeypatch):
        monkeypatch.delenv("ODESIG_THREADS", raising=False)
        config = small_experiment("offset", (0.2,), seeds=2)
        a = run_experiment(config)
        b = run_experiment(config, threads=2)
        assert [(r.model, r.per_seed) for r in a.rows] == [(r.model, r.per_seed) for r in b.rows]

    def test_divergence_excluded(self, small_experiment, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDivergedError(3, float("nan"))

        monkeypatch.setattr(evalnet, "train", diverge)
        report = run_experiment(small_experiment("missing-extrap", (2,)))
        row = report.row("ours")
        assert row.rmse_mean is None
        assert row.flags == ["diverged:seed=0"]
        assert report.row("poly-d1").rmse_mean is not None

    def test_report_files(self, tmp_path):
        row = ReportRow("offset", "0.1", "ours", 0.25, 0.05, [0.2, 0.3])
        report = EvalReport("offset", [0, 1], [row], 1.5)
        report.write_csv(tmp_path / "report.csv", "# config_sha256=x seed=0\n")
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[1] == "setting,param,model,rmse_mean,rmse_std"
        assert lines[2] == "offset,0.1,ours,0.25,0.05"
        assert report.to_dict()["rows"][0]["seeds_used"] == 2

    @pytest.mark.parametrize("kind, value", [("offset", 0.3), ("frequency", "1/3")])
    def test_resampling_kinds_train_on_clean_data(self, small_experiment, monkeypatch, kind, value):
        fitted_on = []

        def recording_train(train_samples, validation_samples, *args, **kwargs):
            fitted_on.extend([*train_samples, *validation_samples])
            return train(train_samples, validation_samples, *args, **kwargs)

        monkeypatch.setattr(evalnet, "train", recording_train)
        report = run_experiment(small_experiment(kind, (value,)))
        assert len(fitted_on) == 4
        for sample in fitted_on:
            assert sample.target_count == 0
            for series in sample.series:
                np.testing.assert_array_equal(series.times, np.arange(8.0))
        assert report.row("ours").rmse_mean is not None

    def test_offsets_share_one_training_run(self, small_experiment, monkeypatch):
        calls = []

        def counting_train(*args, **kwargs):
            calls.append(1)
            return train(*args, **kwargs)

        monkeypatch.setattr(evalnet, "train", counting_train)
        report = run_experiment(small_experiment("offset", (0.1, 0.3)))
        assert len(calls) == 1
        assert report.row("ours", 0.1).rmse_mean != report.row("ours", 0.3).rmse_mean

    def test_missing_values_train_per_setting(self, small_experiment, monkeypatch):
        targets = []

        def recording_train(train_samples, *args, **kwargs):
            targets.append(sum(s.target_count for s in train_samples))
            return train(train_samples, *args, **kwargs)

        monkeypatch.setattr(evalnet, "train", recording_train)
        run_experiment(small_experiment("missing-extrap", (2, 3)))
        assert targets == [3 * 2 * 2, 3 * 2 * 3]

    def test_dead_encoder_is_flagged_not_fatal(self, small_experiment, monkeypatch):
        init = ModelParams.init

        def dead_conv(*args, **kwargs):
            params = init(*args, **kwargs)
            params.arrays["conv.bias"][:] = -100.0
            return params

        monkeypatch.setattr(ModelParams, "init", dead_conv)
        report = run_experiment(small_experiment("missing-extrap", (2,), variants=("ours-p",)))
        row = report.row("ours-p")
        assert row.rmse_mean is None
        assert row.flags == ["diverged:seed=0"]
        assert any("zero norm" in w for w in report.warnings)
        assert report.row("poly").rmse_mean is not None


class TestSweep:
    def test_one_report_per_value(self, small_experiment, tmp_path):
        result = run_sweep(small_experiment("missing-extrap", (2,)), "d_z", [2, 3])
        assert len(result.reports) == 2
        assert result.reports[1].config["train"]["dims"]["d_z"] == 3
        result.write_csv(tmp_path / "sweep.csv")
        header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
        assert header == "parameter,value,setting,param,model,rmse_mean,rmse_std"

    def test_unknown_parameter(self, small_experiment):
        with pytest.raises(ExperimentConfigError):
            run_sweep(small_experiment("offset", (0.1,)), "learning_rate", [1])

    def test_invalid_value(self, small_experiment):
        with pytest.raises(ExperimentConfigError):
            run_sweep(small_experiment("offset", (0.1,)), "d_z", [0])


class TestRuntime:
    def test_single_repetition_has_zero_std(self):
        stats = measure_runtime(lambda: sum(range(100)), repetitions=1)
        assert stats.std == 0.0
        assert stats.mean >= 0.0

    def test_warmup_is_discarded(self):
        calls = []
        stats = measure_runtime(lambda: calls.append(1), repetitions=3)
        assert len(calls) == 4
        assert len(stats.timings) == 3
        assert all(t >= 0 for t in stats.timings)

    def test_needs_a_repetition(self):
        with pytest.raises(MetricError):
            measure_runtime(lambda: None, repetitions=0)

    def test_scaling_check_bounds(self):
        assert ScalingCheck("decode_ratio", 2.0, 1.5, 3.0).passed
        assert not ScalingCheck("decode_ratio", 4.0, 1.5, 3.0).passed

    def test_report_without_scaling(self, toy_dataset, tiny_config):
        params = ModelParams.init(tiny_config.dims, tiny_config.kernel_size, np.random.default_rng(0))
        model = LatentODEModel(params, tiny_config, toy_dataset.atlas)
        report = runtime_report(model, toy_dataset.samples[:2], np.linspace(0, 7, 10), repetitions=2, scaling=False)
        assert report.reconstruction.repetitions == 2
        assert report.checks == [] and report.grid_points == 10
        assert report.to_dict()["num_samples"] == 2

    def test_scaling_checks_on_tiny_model(self, tiny_config):
        params = ModelParams.init(tiny_config.dims, tiny_config.kernel_size, np.random.default_rng(0))
        decode = decode_scaling_check(params, num_points=10, num_rois=2, repetitions=1)
        encode = encoder_scaling_check(params, lengths=(8, 16, 32), repetitions=1)
        assert isinstance(decode, ScalingCheck) and isinstance(encode, ScalingCheck)
        assert (decode.name, decode.low, decode.high) == ("decode_ratio", *DECODE_RATIO_RANGE)
        assert (encode.name, encode.low, encode.high) == ("encoder_slope", *ENCODER_SLOPE_RANGE)
        assert np.isfinite(decode.measured) and decode.measured > 0
        assert np.isfinite(encode.measured)
        assert decode.to_dict()["passed"] == decode.passed


@pytest.mark.slow
class TestProtocols:
    """Full-size synthetic protocols on the default generator and 5 seeds."""

    @pytest.mark.parametrize("kind", ["missing-interp", "missing-extrap"])
    def test_model_beats_polynomial_on_missing_values(self, kind):
        report = run_experiment(ExperimentConfig(kind=kind))
        assert report.params() == ["3", "5"]
        for param in report.params():
            assert report.row("ours", param).rmse_mean < report.row("poly", param).rmse_mean

    @pytest.mark.parametrize("kind, params", [
        ("offset", ["0.1", "0.2", "0.3"]),
        ("frequency", ["2/3", "1/2", "1/3"]),
    ])
    def test_model_beats_polynomial_on_resampling(self, kind, params):
        report = run_experiment(ExperimentConfig(kind=kind))
        assert report.params() == params
        for param in params:
            assert report.row("ours", param).rmse_mean < report.row("poly", param).rmse_mean

    def test_larger_offsets_degrade(self):
        report = run_experiment(ExperimentConfig(kind="offset", values=(0.1, 0.3)))
        small = report.row("ours", 0.1).per_seed
        large = report.row("ours", 0.3).per_seed
        assert len(small) == 5
        assert sum(b >= a for a, b in zip(small, large) if a is not None and b is not None) >= 4

    @pytest.mark.parametrize("variant", ["ours-p", "ours-t"])
    def test_ablation_does_not_improve(self, variant):
        report = run_experiment(ExperimentConfig(kind="missing-interp", variants=("ours", variant)))
        for param in report.params():
            assert report.row(variant, param).rmse_mean >= report.row("ours", param).rmse_mean
