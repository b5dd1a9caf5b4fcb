"""Tests for the training pipeline: loss, optimizer, train loop, inference, checkpoints."""

import numpy as np
import pytest

from src import training
from src.datagen import RoiSeries, SignalSample
from src.model.diffmath import DimensionError, grad_check, leaf
from src.model.relgraphs import DegenerateEmbeddingError, ROIAtlas
from src.training import (
    Ablation,
    AdamState,
    CompatibilityError,
    EmptyBatchError,
    LatentODEModel,
    ModelDims,
    ModelParams,
    PassCounters,
    TrainConfig,
    TrainConfigError,
    TrainingDivergedError,
    adam_step,
    forward,
    loss,
    param_shapes,
    prepare_sample,
    train,
    write_loss_trace,
)


def make_sample(sample_id, values, times=None, masks=None):
    values = np.asarray(values, dtype=np.float64)
    times = np.arange(values.shape[1], dtype=np.float64) if times is None else np.asarray(times)
    series = []
    for roi in range(values.shape[0]):
        keep = np.ones(values.shape[1], dtype=bool) if masks is None else masks[roi]
        series.append(RoiSeries(times[keep], values[roi][keep]))
    return SignalSample(sample_id=sample_id, series=tuple(series))


def constant_sample(sample_id, num_rois=2, length=8, value=0.5):
    return make_sample(sample_id, np.full((num_rois, length), value))


def random_params(dims, kernel_size, seed):
    rng = np.random.default_rng(seed)
    shapes = param_shapes(dims, kernel_size)
    return ModelParams({name: rng.standard_normal(shape) * 0.5 for name, shape in shapes.items()})


def quiet_params(dims, kernel_size, rng):
    """Zero everywhere except W_V, so h is nonzero but u = 0 and decode = 0."""
    params = ModelParams({name: np.zeros(shape) for name, shape in param_shapes(dims, kernel_size).items()})
    params.arrays["attn.w_v"] = rng.standard_normal(params.arrays["attn.w_v"].shape)
    return params


@pytest.fixture
def atlas2():
    return ROIAtlas.random(2, seed=0)


class TestConfig:
    def test_zero_epochs(self):
        with pytest.raises(TrainConfigError):
            TrainConfig(epochs=0)

    def test_odd_filters_with_positional_encoding(self):
        with pytest.raises(TrainConfigError):
            TrainConfig(dims=ModelDims(num_filters=5))

    def test_odd_filters_allowed_without_positional_encoding(self):
        config = TrainConfig(dims=ModelDims(num_filters=5), ablation=Ablation(no_positional_encoder=True))
        assert config.dims.num_filters == 5

    def test_graph_ablation_needs_matching_widths(self):
        with pytest.raises(TrainConfigError):
            TrainConfig(dims=ModelDims(d_k=8, d_g=6), ablation=Ablation(no_temporal_graph=True))

    def test_from_dict_nested_and_unknown_keys(self):
        config = TrainConfig.from_dict({"epochs": 3, "dims": {"d_z": 2}, "ablation": {"no_spatial_graph": True}})
        assert config.dims.d_z == 2 and config.ablation.no_spatial_graph
        with pytest.raises(TrainConfigError):
            TrainConfig.from_dict({"epochz": 3})

    @pytest.mark.parametrize(
        "name,flags",
        [
            ("ours", (False, False, False)),
            ("ours-p", (True, False, False)),
            ("ours-t", (False, True, False)),
            ("ours-s", (False, False, True)),
        ],
    )
    def test_variants(self, name, flags):
        ablation = Ablation.from_variant(name)
        assert (ablation.no_positional_encoder, ablation.no_temporal_graph, ablation.no_spatial_graph) == flags
        assert ablation.variant == name

    def test_unknown_variant(self):
        with pytest.raises(TrainConfigError):
            Ablation.from_variant("ours-x")


class TestModelParams:
    def test_flatten_unflatten(self, tiny_dims, rng):
        params = ModelParams.init(tiny_dims, 3, rng)
        again = params.unflatten(params.flatten())
        for name in params.arrays:
            np.testing.assert_array_equal(again.arrays[name], params.arrays[name])

    def test_unflatten_size_mismatch(self, tiny_dims, rng):
        params = ModelParams.init(tiny_dims, 3, rng)
        with pytest.raises(DimensionError):
            params.unflatten(np.zeros(params.size + 1))

    def test_init_zero_decoder(self, tiny_dims, rng):
        params = ModelParams.init(tiny_dims, 3, rng)
        np.testing.assert_array_equal(params.arrays["decoder.weight"], 0.0)
        assert params.arrays["conv.weight"].shape == (9, 4)

    def test_from_arrays_checks_shapes(self, tiny_dims, rng):
        arrays = dict(ModelParams.init(tiny_dims, 3, rng).arrays)
        arrays["ode.w1"] = np.zeros((2, 2))
        with pytest.raises(CompatibilityError):
            ModelParams.from_arrays(arrays, tiny_dims, 3)


class TestLoss:
    def test_perfect_reconstruction_is_zero(self, tiny_dims, rng, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3, substeps=2)
        model = LatentODEModel(quiet_params(tiny_dims, 3, rng), config, atlas2)
        batch = [constant_sample("a"), constant_sample("b", value=-2.0)]
        eps = [np.zeros((2, tiny_dims.d_z))] * 2
        value = loss(batch, model.params, eps, config, model.spatial)
        assert value.item() == 0.0

    def test_kl_term_alone(self, rng, atlas2):
        dims = ModelDims(num_filters=4, d_k=4, d_g=4, d_u=4, d_z=1, d_h=3)
        config = TrainConfig(dims=dims, kernel_size=3, kl_weight=1.0)
        params = quiet_params(dims, 3, rng)
        params.arrays["posterior.mean.bias"] = np.ones((1, 1))
        model = LatentODEModel(params, config, atlas2)
        value = loss([constant_sample("a")], params, None, config, model.spatial)
        assert value.item() == pytest.approx(0.5, abs=1e-12)

    def test_kl_wider_posterior(self, rng, atlas2):
        dims = ModelDims(num_filters=4, d_k=4, d_g=4, d_u=4, d_z=1, d_h=3)
        config = TrainConfig(dims=dims, kernel_size=3, kl_weight=1.0)
        params = quiet_params(dims, 3, rng)
        params.arrays["posterior.logvar.bias"] = np.full((1, 1), np.log(2.0))
        model = LatentODEModel(params, config, atlas2)
        value = loss([constant_sample("a")], params, None, config, model.spatial)
        assert value.item() == pytest.approx(0.153426, abs=1e-6)

    def test_zero_kl_weight_is_masked_mse(self, tiny_dims, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3, kl_weight=0.0)
        params = random_params(tiny_dims, 3, seed=5)
        masks = np.array([[True] * 6 + [False, True], [True, False] + [True] * 6])
        sample = make_sample("m", np.random.default_rng(2).standard_normal((2, 8)), masks=masks)
        prepared = prepare_sample(sample)
        model = LatentODEModel(params, config, atlas2)
        value = loss([prepared], params, None, config, model.spatial).item()

        fp = forward(params.leaves(), prepared, config, model.spatial, prepared.grid)
        residual = (fp.trajectory.values.value - prepared.targets) * prepared.mask
        assert value == pytest.approx((residual**2).sum() / prepared.mask.sum(), rel=1e-12)

    def test_empty_batch(self, tiny_dims, rng, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3)
        with pytest.raises(EmptyBatchError):
            loss([], ModelParams.init(tiny_dims, 3, rng), None, config, None)

    def test_end_to_end_gradient(self, atlas2):
        dims = ModelDims(num_filters=4, d_k=4, d_g=4, d_u=4, d_z=3, d_h=4)
        config = TrainConfig(dims=dims, kernel_size=3, substeps=2)
        rng = np.random.default_rng(11)
        params = random_params(dims, 3, seed=3)
        times = np.array([0.0, 0.7, 1.5, 2.1, 3.0, 4.2])
        sample = make_sample("g", rng.standard_normal((2, 6)), times=times)
        prepared = prepare_sample(sample)
        eps = [rng.standard_normal((2, dims.d_z))]
        spatial = LatentODEModel(params, config, atlas2).spatial

        def f(theta):
            return loss([prepared], params.nodes_from_flat(theta), eps, config, spatial)

        assert grad_check(f, params.flatten()) < 1e-4



class TestAblationCounters:
    def test_all_branches_skipped(self, rng, atlas2):
        dims = ModelDims(num_filters=4, d_k=4, d_g=4, d_u=4, d_z=3, d_h=4)
        config = TrainConfig(
            dims=dims,
            kernel_size=3,
            ablation=Ablation(no_positional_encoder=True, no_temporal_graph=True, no_spatial_graph=True),
        )
        params = random_params(dims, 3, seed=1)
        counters = PassCounters()
        loss([constant_sample("a")], params, None, config, None, counters)
        assert counters == PassCounters(0, 0, 0)

    def test_full_model_counts(self, tiny_dims, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3)
        params = random_params(tiny_dims, 3, seed=1)
        model = LatentODEModel(params, config, atlas2)
        counters = PassCounters()
        loss([constant_sample("a"), constant_sample("b")], params, None, config, model.spatial, counters)
        assert counters == PassCounters(positional_encoding=4, temporal_gcn=2, spatial_gcn=2)


class TestAdam:
    def test_zero_gradient(self):
        params = np.array([1.0, -2.0])
        new, state = adam_step(params, np.zeros(2), AdamState.zeros(2), 0.1)
        np.testing.assert_array_equal(new, params)
        assert state.step == 1

    def test_first_step_magnitude(self):
        params = np.zeros(3)
        new, _ = adam_step(params, np.array([5.0, -0.01, 300.0]), AdamState.zeros(3), 0.01)
        np.testing.assert_allclose(new, [-0.01, 0.01, -0.01], rtol=1e-5)

    def test_hand_stepped_quadratic(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in range(1, 4):
            g = 2 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            expected.append(x)

        params, state, trace = np.array([1.0]), AdamState.zeros(1), []
        for _ in range(3):
            params, state = adam_step(params, 2 * params, state, lr)
            trace.append(params[0])
        np.testing.assert_allclose(trace, expected, rtol=1e-12)
        assert trace[0] == pytest.approx(0.9, abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


class TestTrain:
    def test_deterministic_trace(self, toy_dataset, tiny_config):
        train_set, val_set = toy_dataset.samples[:4], toy_dataset.samples[4:]
        a = train(train_set, val_set, tiny_config, toy_dataset.atlas)
        b = train(train_set, val_set, tiny_config, toy_dataset.atlas)
        assert [(r.train_loss, r.val_rmse) for r in a.trace] == [(r.train_loss, r.val_rmse) for r in b.trace]
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
        assert len(a.trace) == tiny_config.epochs

    def test_constant_signal_fits(self, tiny_dims, atlas2):
        config = TrainConfig(epochs=50, dims=tiny_dims, kernel_size=3, substeps=2)
        train_set = [constant_sample(f"t{i}") for i in range(3)]
        val_set = [constant_sample("v0")]
        result = train(train_set, val_set, config, atlas2)
        assert result.trace[result.best_epoch - 1].val_rmse < 0.05
        assert min(r.val_rmse for r in result.trace) < 0.05

    def test_progress_callback(self, toy_dataset, tiny_config):
        messages = []
        train(toy_dataset.samples[:3], [], tiny_config, toy_dataset.atlas, messages.append)
        assert len(messages) == tiny_config.epochs
        assert messages[0].startswith("Epoch 1/")

    def test_nan_loss_raises_with_epoch(self, toy_dataset, tiny_config, monkeypatch):
        monkeypatch.setattr(training, "loss", lambda *args, **kwargs: leaf(np.nan))
        with pytest.raises(TrainingDivergedError) as info:
            train(toy_dataset.samples[:3], [], tiny_config, toy_dataset.atlas)
        assert info.value.epoch == 1

    def test_dead_encoder_raises_diverged(self, toy_dataset, tiny_config, monkeypatch):
        init = ModelParams.init

        def dead_conv(*args, **kwargs):
            params = init(*args, **kwargs)
            params.arrays["conv.bias"][:] = -100.0
            return params

        monkeypatch.setattr(ModelParams, "init", dead_conv)
        config = TrainConfig.from_dict({**tiny_config.to_dict(), "ablation": {"no_positional_encoder": True}})
        with pytest.raises(TrainingDivergedError, match="zero norm") as info:
            train(toy_dataset.samples[:3], [], config, toy_dataset.atlas)
        assert info.value.epoch == 1

    def test_degenerate_graph_in_validation(self, toy_dataset, tiny_config, monkeypatch):
        def degenerate(model, samples):
            raise DegenerateEmbeddingError(1)

        monkeypatch.setattr(training, "validation_rmse", degenerate)
        with pytest.raises(TrainingDivergedError, match="ROI 1") as info:
            train(toy_dataset.samples[:3], toy_dataset.samples[3:4], tiny_config, toy_dataset.atlas)
        assert info.value.epoch == 1

    def test_roi_count_mismatch(self, toy_dataset, tiny_config, atlas2):
        with pytest.raises(CompatibilityError):
            train(toy_dataset.samples[:3], [], tiny_config, atlas2)

    def test_empty_training_set(self, tiny_config, atlas2):
        with pytest.raises(EmptyBatchError):
            train([], [], tiny_config, atlas2)

    @pytest.mark.slow
    def test_loss_trends_down(self, toy_spec, tiny_dims):
        from dataclasses import replace

        from src.datagen import generate

        for seed in (0, 1, 2):
            dataset = generate(replace(toy_spec, seed=seed, num_samples=8))
            config = TrainConfig(epochs=20, learning_rate=0.01, dims=tiny_dims, kernel_size=3, seed=seed)
            result = train(dataset.samples, [], config, dataset.atlas)
            assert result.trace[-1].train_loss < result.trace[0].train_loss


class TestReconstruct:
    def test_single_point_is_decoded_initial_state(self, tiny_dims, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3)
        params = random_params(tiny_dims, 3, seed=2)
        model = LatentODEModel(params, config, atlas2)
        sample = make_sample("s", np.random.default_rng(1).standard_normal((2, 8)))
        out = model.reconstruct(sample, [0.0])

        prepared = prepare_sample(sample)
        fp = forward(params.leaves(), prepared, config, model.spatial, prepared.grid)
        mu = fp.posterior.mean.value
        decoded = mu @ params.arrays["decoder.weight"] + params.arrays["decoder.bias"]
        expected = decoded * prepared.std[:, None] + prepared.mean[:, None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_independent_of_mask(self, tiny_dims, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3)
        model = LatentODEModel(random_params(tiny_dims, 3, seed=2), config, atlas2)
        values = np.random.default_rng(3).standard_normal((2, 10))
        full = make_sample("a", values)
        masks = np.ones((2, 10), dtype=bool)
        masks[0, 3:6] = False
        holes = make_sample("b", values, masks=masks)
        grid = np.linspace(0, 9, 7)
        assert model.reconstruct(full, grid).shape == model.reconstruct(holes, grid).shape == (2, 7)

    def test_denser_grid_agrees_at_shared_points(self, toy_dataset, tiny_config):
        result = train(toy_dataset.samples[:3], [], tiny_config, toy_dataset.atlas)
        sample = toy_dataset.samples[4]
        coarse = np.linspace(0.0, 7.0, 8)
        dense = np.linspace(0.0, 7.0, 15)
        a = result.model.reconstruct(sample, coarse, step_size=0.25)
        b = result.model.reconstruct(sample, dense, step_size=0.25)
        np.testing.assert_allclose(b[:, ::2], a, atol=1e-6)

    def test_deterministic(self, toy_dataset, tiny_config):
        model = LatentODEModel(
            ModelParams.init(tiny_config.dims, 3, np.random.default_rng(0)), tiny_config, toy_dataset.atlas
        )
        grid = np.linspace(0, 7, 5)
        sample = toy_dataset.samples[0]
        np.testing.assert_array_equal(model.reconstruct(sample, grid), model.reconstruct(sample, grid))

    def test_wrong_roi_count(self, tiny_config, atlas2):
        model = LatentODEModel(ModelParams.init(tiny_config.dims, 3, np.random.default_rng(0)), tiny_config, atlas2)
        with pytest.raises(CompatibilityError):
            model.reconstruct(constant_sample("x", num_rois=3), [0.0, 1.0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tiny_dims, atlas2):
        config = TrainConfig(dims=tiny_dims, kernel_size=3, ablation=Ablation(no_spatial_graph=True))
        model = LatentODEModel(random_params(tiny_dims, 3, seed=4), config, atlas2)
        path = tmp_path / "checkpoint.json"
        model.save(path, {"config_sha256": "abc", "seed": 0})
        loaded = LatentODEModel.load(path)
        for name, arr in model.params.arrays.items():
            np.testing.assert_array_equal(loaded.params.arrays[name], arr)
        assert loaded.config.ablation.no_spatial_graph
        assert loaded.atlas == atlas2
        assert loaded.spatial.radius == model.spatial.radius

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(training.CheckpointError):
            LatentODEModel.load(path)


def test_loss_trace_csv(tmp_path):
    trace = [training.EpochRecord(1, 0.5, None), training.EpochRecord(2, 0.25, 0.1)]
    path = tmp_path / "trace.csv"
    write_loss_trace(path, trace, "# config_sha256=x seed=0\n")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_sha256")
    assert lines[1] == "epoch,train_loss,val_rmse"
    assert lines[2] == "1,0.5,"
    assert lines[3] == "2,0.25,0.1"
