import dataclasses

import numpy as np
import pytest

from sfml.dataset import PairStore, build_pairs
from sfml.losses import LossWeights, distributional_loss_and_grad, mse_loss_and_grad
from sfml.neural import FmlModel, gradients
from sfml.sde import get_spec, simulate_trajectories
from sfml.training import (
    TrainConfig,
    TrainingError,
    detect_dimension,
    evaluate_mse,
    init_model,
    sweep_latent_dim,
    train,
)

TINY = TrainConfig(epochs=3, n_batches=4, batch_size=64, encoder_hidden=(8,), decoder_hidden=(8,), seed=3)


@pytest.fixture(scope="module")
def ou_store():
    data = simulate_trajectories(get_spec("ou1d"), [0.0], [2.5], 40, 20, 0.01, seed=2)
    return build_pairs(data)


class TestTrain:
    def test_step_count_and_history(self, ou_store, tmp_path):
        model, hist = train(ou_store, TINY)
        assert hist.steps == 3 * 4 and hist.skipped_steps == 0
        assert [r.epoch for r in hist.records] == [0, 1, 2]
        hist.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,mse,kde,moment,total,seconds" and len(lines) == 4

    def test_total_is_weighted_sum(self, ou_store):
        w = LossWeights(lam=0.5, tau=2.0)
        _, hist = train(ou_store, dataclasses.replace(TINY, weights=w, epochs=1))
        r = hist.records[0]
        assert r.total == pytest.approx(r.mse + 0.5 * (r.kde + 2.0 * r.moment), rel=1e-12)

    def test_deterministic_checkpoints(self, ou_store, tmp_path):
        paths = []
        for name in ("a", "b"):
            model, hist = train(ou_store, TINY)
            p = tmp_path / f"{name}.ckpt"
            model.save(p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_different_seed_differs(self, ou_store):
        a, _ = train(ou_store, TINY)
        b, _ = train(ou_store, dataclasses.replace(TINY, seed=4))
        assert a.checksum() != b.checksum()

    def test_continues_from_given_model(self, ou_store):
        start = init_model(ou_store, TINY)
        model, _ = train(ou_store, dataclasses.replace(TINY, epochs=1), model=start)
        assert model is start

    def test_learning_reduces_mse(self, ou_store):
        cfg = dataclasses.replace(TINY, epochs=15, n_batches=10, batch_size=100)
        untrained = evaluate_mse(init_model(ou_store, cfg), ou_store)
        model, _ = train(ou_store, cfg)
        assert evaluate_mse(model, ou_store) < untrained

    def test_callback_sees_every_epoch(self, ou_store):
        seen = []
        train(ou_store, TINY, callback=lambda e, rec, m: seen.append((e, rec.epoch, m.latent_dim)))
        assert seen == [(0, 0, 1), (1, 1, 1), (2, 2, 1)]

    def test_ema_returns_average(self, ou_store):
        snaps = []
        cfg = dataclasses.replace(TINY, epochs=1, n_batches=2, ema_decay=0.5)
        init = init_model(ou_store, cfg).get_params()
        model, _ = train(ou_store, cfg, callback=lambda e, r, m: snaps.append(m.get_params()))
        plain, _ = train(ou_store, dataclasses.replace(cfg, ema_decay=None))
        np.testing.assert_allclose(snaps[0], model.get_params())
        assert not np.allclose(model.get_params(), plain.get_params())
        assert not np.allclose(model.get_params(), init)

    def test_patience_stops_early(self, ou_store):
        cfg = dataclasses.replace(TINY, epochs=50, patience=1, lr=1e-1)
        _, hist = train(ou_store, cfg)
        assert len(hist) < 50

    def test_exploding_loss_halts_with_location(self):
        x0 = np.linspace(0, 1, 50)[:, None]
        store = PairStore(x0, x0 + 1e4, 0.01)
        with pytest.raises(TrainingError) as info:
            train(store, dataclasses.replace(TINY, batch_size=10))
        assert (info.value.epoch, info.value.batch) == (0, 0)

    def test_non_finite_loss_halts(self):
        x0 = np.linspace(0, 1, 50)[:, None]
        x1 = x0.copy()
        x1[:, 0] = np.nan
        with pytest.raises(TrainingError):
            train(PairStore(x0, x1, 0.01), dataclasses.replace(TINY, batch_size=10))

    def test_small_store_clamps_batch_shape(self):
        x0 = np.linspace(0, 1, 12)[:, None]
        _, hist = train(PairStore(x0, x0 + 0.01, 0.01), TINY)
        assert hist.steps == 3 * 4

    @pytest.mark.parametrize(
        "kw", [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"latent_dim": 0}, {"ema_decay": 1.0}]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_digest_tracks_content(self):
        assert TINY.digest() == dataclasses.replace(TINY).digest()
        assert TINY.digest() != dataclasses.replace(TINY, lr=2e-3).digest()


class TestDetectDimension:
    def test_table_values(self):
        dim, dropped, boundary = detect_dimension([1.1e-3, 6.4e-7])
        assert dim == 2 and dropped and boundary == pytest.approx(1.1e-3 / 6.4e-7)

    def test_plateau_from_start(self):
        assert detect_dimension([1e-3, 9e-4, 8.5e-4]) == (1, False, None)

    def test_drop_then_plateau(self):
        dim, dropped, boundary = detect_dimension([1e-2, 1e-4, 9e-5])
        assert (dim, dropped) == (2, True) and boundary == pytest.approx(100)

    def test_late_drop_counts(self):
        assert detect_dimension([1e-2, 9e-3, 1e-5])[0] == 3

    def test_single_value(self):
        assert detect_dimension([0.5]) == (1, False, None)


class TestSweep:
    def test_single_candidate(self, ou_store):
        seen = []
        rep = sweep_latent_dim(ou_store, TINY, 1, on_model=lambda nz, m, h: seen.append(nz))
        assert len(rep.rows) == 1 and rep.detected_dim == 1 and seen == [1]
        assert rep.as_dict()["rows"][0]["nz"] == 1

    def test_models_get_requested_latent_size(self, ou_store, tmp_path):
        sizes = []
        rep = sweep_latent_dim(ou_store, TINY, 2, on_model=lambda nz, m, h: sizes.append(m.latent_dim))
        assert sizes == [1, 2]
        rep.to_json(tmp_path / "s.json")
        assert "detected_dim" in (tmp_path / "s.json").read_text()

    def test_deterministic_data_reports_no_drop(self):
        spec = dataclasses.replace(get_spec("ou1d"), sigma=0.0)
        store = build_pairs(simulate_trajectories(spec, [0.0], [2.5], 30, 10, 0.01, seed=0))
        rep = sweep_latent_dim(store, dataclasses.replace(TINY, epochs=2), 2)
        assert not rep.drop_observed and rep.detected_dim == 1

    def test_bad_max(self, ou_store):
        with pytest.raises(ValueError):
            sweep_latent_dim(ou_store, TINY, 0)


def test_evaluate_mse_of_identity_model():
    x0 = np.zeros((5, 1))
    store = PairStore(x0, x0 + 0.1, 0.01)
    assert evaluate_mse(FmlModel(1, 1, 0.01), store) == pytest.approx(0.01)


class TestGradientRouting:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(0)
        m = FmlModel(1, 1, 0.01, (5,), (5,))
        m.set_params(rng.normal(scale=0.5, size=m.n_params))
        x0 = rng.normal(size=(12, 1))
        return m, x0, x0 + 0.1 * rng.normal(size=(12, 1))

    def test_distributional_only_leaves_decoder_untouched(self, setup):
        m, x0, x1 = setup
        w = LossWeights(bandwidth=0.5)

        def loss_fn(z, pred, target):
            v, dz, _, _ = distributional_loss_and_grad(z, w)
            return w.lam * v, w.lam * dz, np.zeros_like(pred)

        _, grad, _, _ = gradients(m, x0, x1, loss_fn)
        k = m.encoder.theta.size
        assert np.any(grad[:k]) and not np.any(grad[k:])

    def test_mse_only_reaches_encoder_through_decoder(self, setup):
        m, x0, x1 = setup

        def loss_fn(z, pred, target):
            v, g = mse_loss_and_grad(pred, target)
            return v, np.zeros_like(z), g

        k = m.encoder.theta.size
        _, grad, _, _ = gradients(m, x0, x1, loss_fn)
        assert np.any(grad[:k])
        m.decoder.weights[0][1:] = 0.0  # cut the z input of the decoder
        _, grad, _, _ = gradients(m, x0, x1, loss_fn)
        assert not np.any(grad[:k]) and np.any(grad[k:])


def test_training_leaves_store_untouched(ou_store):
    before = (ou_store.x0.tobytes(), ou_store.x1.tobytes())
    train(ou_store, TINY)
    assert (ou_store.x0.tobytes(), ou_store.x1.tobytes()) == before


def test_init_model_fits_normalization(ou_store):
    m = init_model(ou_store, TINY)
    assert m.shift[0] == pytest.approx(ou_store.x0.mean())
    assert m.step_scale[0] == pytest.approx(np.sqrt(np.mean((ou_store.x1 - ou_store.x0) ** 2)))
