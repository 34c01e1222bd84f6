import numpy as np
import pytest

from oracles import fd_gradient, random_case, relative_error
from poisontrace.core import LabeledDataset, Sample, make_blobs
from poisontrace.trainer import (DivergenceError, _stage_seed, ModelParams, TrainConfig,
                                 final_layer_gradient, final_layer_gradient_dim,
                                 final_layer_gradients, init_params, load_record, project,
                                 sample_projection, save_record, softmax, train_with_checkpoints)


def small_config(**kw):
    base = dict(epochs=3, batch_size=32, lr=0.05, hidden=8, num_checkpoints=3,
                projection_dim=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestFinalLayerGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(120):
            params, sample, layers = random_case(rng)
            g = final_layer_gradient(params, sample, layers)
            assert relative_error(g, fd_gradient(params, sample, layers)) <= 1e-4

    def test_logistic_closed_form(self):
        rng = np.random.default_rng(1)
        params = ModelParams(rng.standard_normal((2, 4)))
        x, y = rng.standard_normal(3), 1
        xb = np.append(x, 1.0)
        expected = np.outer(softmax(params.classifier @ xb) - np.eye(2)[y], xb)
        # Weights row-major, then the bias column.
        flat = np.concatenate([expected[:, :-1].ravel(), expected[:, -1]])
        np.testing.assert_allclose(final_layer_gradient(params, Sample(x, y)), flat, atol=1e-15)

    def test_confident_prediction_gives_zero(self):
        w = np.zeros((3, 3))
        w[1, -1] = 1e3
        g = final_layer_gradient(ModelParams(w), Sample(np.array([0.2, -0.4]), 1))
        np.testing.assert_allclose(g, 0.0, atol=1e-300)

    def test_dimension_and_layer_checks(self):
        params = init_params(5, 3, 4, np.random.default_rng(0))
        assert final_layer_gradient_dim(params, 1) == 3 * 5
        assert final_layer_gradient_dim(params, 2) == 3 * 5 + 4 * 6
        with pytest.raises(ValueError):
            final_layer_gradient(params, Sample(np.zeros(4), 0))
        with pytest.raises(ValueError):
            final_layer_gradient(init_params(5, 3, 0, np.random.default_rng(0)),
                                 Sample(np.zeros(5), 0), layers=2)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        params = init_params(4, 3, 6, rng)
        X, y = rng.standard_normal((7, 4)), rng.integers(0, 3, 7)
        G = final_layer_gradients(params, X, y, 2)
        for i in range(7):
            np.testing.assert_allclose(G[i], final_layer_gradient(params, Sample(X[i], y[i]), 2))


class TestProjection:
    def test_unit_variance_scalar(self):
        draws = np.array([sample_projection(1, 1, s)[0, 0] for s in range(100000)])
        assert abs(draws.var() - 1.0) < 0.05

    def test_expected_gram_is_identity(self):
        acc = np.zeros((8, 8))
        for s in range(10000):
            G = sample_projection(32, 8, s)
            acc += G.T @ G
        gram = acc / 10000
        np.testing.assert_allclose(np.diag(gram), 1.0, atol=0.05)
        np.testing.assert_array_less(np.abs(gram - np.diag(np.diag(gram))), 0.05)

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_projection(5, 7, 3), sample_projection(5, 7, 3))

    def test_project_identity_and_zero(self):
        g = np.arange(5.0)
        np.testing.assert_array_equal(project(np.eye(5), g), g)
        np.testing.assert_array_equal(project(sample_projection(3, 5, 0), np.zeros(5)), 0.0)
        with pytest.raises(ValueError):
            project(np.eye(4), g)

    def test_batch_projection(self):
        G, grads = sample_projection(3, 5, 1), np.random.default_rng(0).standard_normal((4, 5))
        np.testing.assert_allclose(project(G, grads), grads @ G.T)


class TestTrainConfig:
    def test_fifty_uniform_checkpoints(self):
        cfg = TrainConfig(epochs=200, batch_size=10, num_checkpoints=50)
        ts = cfg.checkpoint_set(10)
        assert len(ts) == 50 and ts[-1] == 200
        np.testing.assert_array_equal(np.diff(ts), 4)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(projection_dim=0)
        with pytest.raises(ValueError):
            TrainConfig(checkpoints=(0,)).checkpoint_set(10)

    def test_lr_drops(self):
        cfg = TrainConfig(lr=1.0, lr_drops=(2, 4), lr_drop_factor=0.5)
        assert [cfg.lr_at_epoch(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]


class TestTraining:
    def test_record_completeness_and_freshness(self):
        ds = make_blobs(200, 6, 3, seed=0)
        cfg = small_config()
        _, record = train_with_checkpoints(ds, cfg)
        assert record.iterations == list(cfg.checkpoint_set(200))
        for c in record.checkpoints:
            assert c.grads.shape == (200, 4)
            assert c.projection.shape == (4, 3 * 9)
        assert not np.allclose(record.checkpoints[0].projection, record.checkpoints[1].projection)

    def test_identity_projection_records_raw_gradients(self):
        ds = make_blobs(60, 4, 2, seed=0)
        cfg = small_config(projection_dim=None, checkpoints=(6,))
        _, record = train_with_checkpoints(ds, cfg)
        (c,) = record.checkpoints
        np.testing.assert_array_equal(c.projection, np.eye(c.projection.shape[1]))
        np.testing.assert_allclose(c.grads, final_layer_gradients(c.params, ds.X, ds.y))

    def test_checkpoint_uses_parameters_before_step(self):
        ds = make_blobs(64, 4, 2, seed=0)
        cfg = small_config(epochs=1, batch_size=64, checkpoints=(1,), projection_dim=None)
        _, record = train_with_checkpoints(ds, cfg)
        init = init_params(4, 2, 8, np.random.default_rng(_stage_seed(1, 0)))
        np.testing.assert_array_equal(record.checkpoints[0].params.flatten(), init.flatten())

    def test_bitwise_reproducible(self):
        ds = make_blobs(150, 5, 3, seed=4)
        a = train_with_checkpoints(ds, small_config())[1]
        b = train_with_checkpoints(ds, small_config())[1]
        np.testing.assert_array_equal(a.sketches, b.sketches)
        np.testing.assert_array_equal(a.final_params.flatten(), b.final_params.flatten())

    def test_separable_logistic(self):
        ds = make_blobs(400, 5, 2, separation=8.0, seed=0)
        cfg = TrainConfig(epochs=16, batch_size=64, lr=0.05, momentum=0.9, hidden=0,
                          num_checkpoints=1, projection_dim=2, seed=0)
        assert cfg.iterations(400) >= 100
        params, record = train_with_checkpoints(ds, cfg)
        assert params.accuracy(ds) >= 0.99
        losses = np.asarray(record.epoch_losses)
        assert np.all(np.diff(losses) <= 1e-3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        ds = make_blobs(100, 4, 2, seed=0)
        with pytest.raises(DivergenceError, match="non-finite"):
            train_with_checkpoints(ds, small_config(lr=1e300, momentum=0.0))

    def test_save_load_round_trip(self, tmp_path):
        ds = make_blobs(80, 4, 3, seed=2)
        _, record = train_with_checkpoints(ds, small_config(gradient_layers=2))
        save_record(record, tmp_path / "rec")
        back = load_record(tmp_path / "rec")
        assert back.iterations == record.iterations
        np.testing.assert_allclose(back.sketches, record.sketches.astype(np.float32))
        np.testing.assert_allclose(back.rates, record.rates)
        assert back.config == record.config
        names = {p.name for p in (tmp_path / "rec").iterdir()}
        t = record.iterations[0]
        assert {"manifest.json", f"params_{t}.bin", f"proj_{t}.bin", f"grads_{t}.bin"} <= names

    def test_event_sketches_match_record(self):
        ds = make_blobs(50, 4, 2, seed=3)
        _, record = train_with_checkpoints(ds, small_config())
        ev = record.event_sketches(ds[7])
        np.testing.assert_allclose(ev, record.sketches[:, 7], rtol=1e-12, atol=1e-15)
