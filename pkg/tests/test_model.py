import math
import warnings

import numpy as np
import pytest

from birvae import autodiff as ad
from birvae.autodiff import Parameter, Rng, backward
from birvae.channel import ChannelSpec
from birvae.datasets import synthetic_gmm
from birvae.errors import DomainError, FormatError, NumericalError, ShapeError
from birvae.model import (SIGMA_FLOOR, Activation, Checkpoint, Layer, Model, TrainConfig, TrainingDiverged,
                          Variant, baseline_loss, build_model, checkpoint_from_bytes, checkpoint_to_bytes,
                          encode, encode_mean, evaluate_mse, generate, latents, load_checkpoint, minibatches,
                          per_image_mse, reconstruct, save_checkpoint, train, training_loss)

from conftest import GOLDEN_DIR, finite_difference_grad, rel_err


def linear_layer(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return Layer(Parameter(w), Parameter(b), Activation.LINEAR)


def small_model(variant=Variant.BIRVAE, rate=7.0, seed=0, n=6, d=2):
    return build_model(n, d, (5,), ChannelSpec.from_rate(rate, d), variant, Rng(seed))


def quiet_train(ds, cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return train(ds, cfg)


@pytest.fixture(scope="module")
def gmm():
    return synthetic_gmm(2, 3, 1000, seed=0)


@pytest.fixture(scope="module")
def gmm_cfg():
    return TrainConfig(epochs=30, batch=100, seed=1, arch=(64,), latent_dim=2, rate_bpi=7.0)


@pytest.fixture(scope="module")
def trained(gmm, gmm_cfg):
    return quiet_train(gmm, gmm_cfg)


class TestStructure:
    def test_widths(self):
        m = small_model()
        assert m.input_dim == 6 and m.d == 2
        assert [layer.shape for layer in m.layers()] == [(6, 5), (5, 2), (2, 5), (5, 6)]
        assert [layer.activation for layer in m.layers()] == [
            Activation.RELU, Activation.LINEAR, Activation.RELU, Activation.SIGMOID]

    def test_rate_model_has_no_variance_parameters(self):
        assert small_model().sigma_head is None
        assert len(small_model().parameters()) == 8
        assert len(small_model(Variant.MMDVAE_BASELINE).parameters()) == 10

    def test_mismatched_d(self):
        with pytest.raises(ShapeError):
            Model([linear_layer(np.ones((3, 2)))], [linear_layer(np.ones((3, 3)))], ChannelSpec.from_rate(1, 2))

    def test_glorot_bounds(self):
        m = build_model(784, 2, (1024,), ChannelSpec.from_rate(3, 2), rng=Rng(0))
        w = m.encoder[0].weight.data
        limit = math.sqrt(6 / (784 + 1024))
        assert np.abs(w).max() <= limit and np.abs(w).max() > 0.99 * limit
        assert np.all(m.encoder[0].bias.data == 0)


class TestEncode:
    def test_deterministic_and_finite(self):
        x = np.random.default_rng(0).random((4, 6))
        a = encode_mean(small_model(seed=3), x).data
        b = encode_mean(small_model(seed=3), x).data
        np.testing.assert_array_equal(a, b)
        assert np.all(np.isfinite(a))

    def test_width_checked(self):
        with pytest.raises(ShapeError):
            encode_mean(small_model(), np.zeros((2, 5)))

    def test_baseline_floor(self):
        m = small_model(Variant.MMDVAE_BASELINE)
        m.sigma_head.weight.data[...] = 0.0
        m.sigma_head.bias.data[...] = math.log(1e-5)
        _, sigma = encode(m, np.random.default_rng(1).random((3, 6)))
        assert np.all(sigma.data == SIGMA_FLOOR)

    def test_baseline_sigma_above_floor_passes(self):
        m = small_model(Variant.MMDVAE_BASELINE)
        m.sigma_head.weight.data[...] = 0.0
        m.sigma_head.bias.data[...] = math.log(0.3)
        _, sigma = encode(m, np.zeros((2, 6)))
        np.testing.assert_allclose(sigma.data, 0.3, rtol=1e-15)


class TestTrainingLoss:
    def test_lambda_zero_is_mse(self):
        x = np.random.default_rng(0).random((5, 6))
        loss, mse_part, _ = training_loss(small_model(), x, 0.0, Rng(1))
        assert loss.item() == mse_part.item()

    def test_decomposition(self):
        x = np.random.default_rng(0).random((5, 6))
        loss, mse_part, mmd_part = training_loss(small_model(), x, 1000.0, Rng(1))
        assert loss.item() == pytest.approx(mse_part.item() + 1000.0 * mmd_part.item(), rel=1e-15)

    def test_single_row_rejected(self):
        with pytest.raises(DomainError):
            training_loss(small_model(), np.zeros((1, 6)), 1.0, Rng(0))

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nonfinite_names_tensor(self):
        x = np.zeros((3, 6))
        x[0, 0] = np.inf
        with pytest.raises(NumericalError, match="encoder output"):
            training_loss(small_model(), x, 1.0, Rng(0))

    def test_identity_autoencoder_limit(self):
        channel = ChannelSpec.from_sigma2(1e-30, 2)
        m = Model([linear_layer(np.eye(2))], [linear_layer(np.eye(2))], channel)
        x = np.random.default_rng(2).random((8, 2))
        loss, mse_part, mmd_part = training_loss(m, x, 1000.0, Rng(3))
        assert mse_part.item() < 1e-25
        assert loss.item() == pytest.approx(1000.0 * mmd_part.item(), rel=1e-12)
        assert mmd_part.item() > 0

    def test_hand_computed_two_points(self):
        w_enc = np.array([[0.5, -1.0], [2.0, 0.25]])
        w_dec = np.array([[1.0, 0.0], [0.5, -0.5]])
        b_dec = np.array([0.1, 0.2])
        sigma2 = 0.01
        m = Model([linear_layer(w_enc)], [linear_layer(w_dec, b_dec)], ChannelSpec.from_sigma2(sigma2, 2))
        x = [[1.0, 0.0], [0.0, 1.0]]
        draws = Rng(4)
        eps = draws.standard_normal((2, 2)).tolist()
        prior = draws.standard_normal((2, 2)).tolist()

        # forward pass written out with plain floats
        z = [[sum(x[i][k] * w_enc[k][j] for k in range(2)) + 0.1 * eps[i][j] for j in range(2)] for i in range(2)]
        xh = [[sum(z[i][k] * w_dec[k][j] for k in range(2)) + b_dec[j] for j in range(2)] for i in range(2)]
        mse = sum((xh[i][j] - x[i][j]) ** 2 for i in range(2) for j in range(2)) / 2

        def k(a, b):
            return math.exp(-((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2) / 2)

        mmd = (sum(k(a, b) for a in z for b in z) + sum(k(a, b) for a in prior for b in prior)
               - 2 * sum(k(a, b) for a in z for b in prior)) / 4
        loss, mse_part, mmd_part = training_loss(m, x, 1000.0, Rng(4))
        assert mse_part.item() == pytest.approx(mse, rel=1e-12)
        assert mmd_part.item() == pytest.approx(mmd, rel=1e-10)
        assert loss.item() == pytest.approx(mse + 1000 * mmd, rel=1e-10)

    @pytest.mark.parametrize("variant", [Variant.BIRVAE, Variant.MMDVAE_BASELINE])
    def test_gradients_match_finite_differences(self, variant):
        m = small_model(variant, rate=3.0, seed=5)
        x = np.random.default_rng(6).random((4, 6))
        backward(training_loss(m, x, 10.0, Rng(7))[0])
        for p in m.parameters():
            numeric = finite_difference_grad(lambda: training_loss(m, x, 10.0, Rng(7))[0].item(), p.data)
            assert rel_err(p.grad, numeric) < 1e-4, p.name


class TestBaselineReduction:
    def test_constant_head_equals_rate_loss(self):
        sigma = 0.5
        base = small_model(Variant.MMDVAE_BASELINE, seed=8)
        base.sigma_head.weight.data[...] = 0.0
        base.sigma_head.bias.data[...] = math.log(sigma)
        rate = Model(base.encoder, base.decoder, ChannelSpec.from_sigma2(sigma ** 2, 2))
        rng = np.random.default_rng(9)
        for _ in range(5):
            x = rng.random((6, 6))
            a = baseline_loss(base, x, 1000.0, Rng(10))
            b = training_loss(rate, x, 1000.0, Rng(10))[0]
            assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_requires_baseline(self):
        with pytest.raises(DomainError):
            baseline_loss(small_model(), np.zeros((2, 6)), 1.0, Rng(0))


class TestConfig:
    def test_batch_minimum(self):
        with pytest.raises(DomainError):
            TrainConfig(batch=1, rate_bpi=1)

    def test_rate_and_variance_must_agree(self):
        assert TrainConfig(rate_bpi=13.287712379549449, sigma_eps2=1e-4).channel.sigma_eps2 == pytest.approx(1e-4)
        with pytest.raises(DomainError):
            TrainConfig(rate_bpi=3.0, sigma_eps2=1e-4)

    def test_baseline_channel_is_floor(self):
        cfg = TrainConfig(variant=Variant.MMDVAE_BASELINE)
        assert cfg.channel.sigma_eps2 == pytest.approx(1e-4)

    def test_minibatches_cover_every_row(self):
        perm = np.random.default_rng(0).permutation(601)
        parts = minibatches(601, 200, perm)
        assert [len(p) for p in parts] == [200, 200, 201]
        np.testing.assert_array_equal(np.concatenate(parts), perm)
        assert [len(p) for p in minibatches(650, 200, np.arange(650))] == [200, 200, 200, 50]


class TestTrain:
    def test_loss_decreases(self, gmm, gmm_cfg, trained):
        init = build_model(2, 2, gmm_cfg.arch, gmm_cfg.channel, rng=Rng(gmm_cfg.seed).spawn(4)[0])
        before = evaluate_mse(init, gmm.items)
        assert trained.history[-1][1] < 0.5 * before
        assert len(trained.history) == 30

    def test_bit_identical_reruns(self, gmm):
        cfg = TrainConfig(epochs=2, batch=100, seed=3, arch=(16,), latent_dim=2, rate_bpi=5.0)
        assert quiet_train(gmm, cfg).to_bytes() == quiet_train(gmm, cfg).to_bytes()

    def test_seed_changes_result(self, gmm):
        a = TrainConfig(epochs=1, batch=100, seed=3, arch=(16,), latent_dim=2, rate_bpi=5.0)
        b = TrainConfig(epochs=1, batch=100, seed=4, arch=(16,), latent_dim=2, rate_bpi=5.0)
        assert quiet_train(gmm, a).to_bytes() != quiet_train(gmm, b).to_bytes()

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_keeps_last_finite_state(self):
        data = np.random.default_rng(0).random((10, 3))
        data[7, 1] = np.inf
        cfg = TrainConfig(epochs=2, batch=5, seed=0, arch=(4,), latent_dim=2, rate_bpi=3.0)
        with pytest.raises(TrainingDiverged) as info:
            train(data, cfg)
        ckpt = info.value.checkpoint
        assert ckpt.history == []
        init = build_model(3, 2, (4,), cfg.channel, rng=Rng(0).spawn(4)[0])
        for p, q in zip(ckpt.model.parameters(), init.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_on_epoch_callback(self, gmm):
        seen = []
        cfg = TrainConfig(epochs=2, batch=250, seed=0, arch=(8,), latent_dim=2, rate_bpi=3.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ck = train(gmm, cfg, on_epoch=lambda *row: seen.append(row))
        assert [r[0] for r in seen] == [1, 2]
        assert [r[1:] for r in seen] == ck.history
        for loss, mse, mmd in ck.history:
            assert loss == pytest.approx(mse + 1000 * mmd, rel=1e-9)

    def test_loose_prior_match_warns(self):
        data = synthetic_gmm(4, 2, 200, seed=1).items
        cfg = TrainConfig(lam=0.0, epochs=3, batch=50, seed=0, arch=(8,), latent_dim=2, rate_bpi=13.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            train(data, cfg)  # lambda = 0 skips the check
        cfg = TrainConfig(lam=1e-6, epochs=3, batch=50, seed=0, arch=(8,), latent_dim=2, rate_bpi=13.0)
        data = data * 0.0 + 1.0  # every image identical: latents collapse onto one point
        with pytest.warns(RuntimeWarning, match="lambda=10000"):
            train(data, cfg)


class TestReconstruct:
    def test_noiseless_deterministic(self, trained, gmm):
        a = reconstruct(trained.model, gmm.items[:50], mode="noiseless")
        np.testing.assert_array_equal(a, reconstruct(trained.model, gmm.items[:50], mode="noiseless"))

    def test_stochastic_not_better_than_noiseless(self, trained, gmm):
        x = gmm.items[:200]
        noiseless = per_image_mse(reconstruct(trained.model, x, mode="noiseless"), x)
        rng = Rng(0)
        draws = [per_image_mse(reconstruct(trained.model, x, rng), x) for _ in range(100)]
        assert np.mean(draws) >= noiseless

    def test_quantized_matches_stochastic(self, trained, gmm):
        stochastic = evaluate_mse(trained.model, gmm.items)
        quantized = evaluate_mse(trained.model, gmm.items, mode="quantized")
        assert abs(quantized / stochastic - 1) <= 0.15

    def test_unknown_mode(self, trained, gmm):
        with pytest.raises(DomainError):
            reconstruct(trained.model, gmm.items[:2], mode="fancy")

    def test_latents_chunking(self, trained, gmm):
        np.testing.assert_array_equal(latents(trained.model, gmm.items),
                                      encode_mean(trained.model, gmm.items).data)


class TestGenerate:
    def test_range_and_determinism(self, trained):
        a = generate(trained.model, 64, Rng(5))
        assert a.shape == (64, 2) and a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, generate(trained.model, 64, Rng(5)))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, trained, gmm, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", trained)
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.history == trained.history
        assert back.config.lam == trained.config.lam and back.config.arch == (64,)
        assert back.model.channel == trained.model.channel
        for mode in ("noiseless", "quantized"):
            np.testing.assert_array_equal(reconstruct(back.model, gmm.items, mode=mode),
                                          reconstruct(trained.model, gmm.items, mode=mode))
        assert checkpoint_to_bytes(back) == trained.to_bytes()

    def test_baseline_round_trip(self):
        m = small_model(Variant.MMDVAE_BASELINE, seed=2)
        ck = Checkpoint(m, TrainConfig(variant=Variant.MMDVAE_BASELINE, arch=(5,)), [(1.0, 2.0, 3.0)])
        back = checkpoint_from_bytes(ck.to_bytes())
        assert back.model.variant == Variant.MMDVAE_BASELINE
        np.testing.assert_array_equal(back.model.sigma_head.weight.data, m.sigma_head.weight.data)
        x = np.random.default_rng(0).random((3, 6))
        np.testing.assert_array_equal(encode(back.model, x)[1].data, encode(m, x)[1].data)

    def test_layout(self):
        import struct
        ck = Checkpoint(small_model(), TrainConfig(rate_bpi=7.0, arch=(5,)), [(1.0, 2.0, 3.0)])
        blob = ck.to_bytes()
        head = struct.unpack_from("<4sHBHddH", blob, 0)
        assert head[:4] == (b"BIRV", 1, 0, 2)
        assert head[4] == pytest.approx(4 ** -3.5) and head[5] == 1000.0 and head[6] == 4
        h = struct.calcsize("<4sHBHddH")
        assert h == 27
        assert struct.unpack_from("<IIB", blob, h) == (6, 5, 1)
        sizes = [(6, 5), (5, 2), (2, 5), (5, 6)]
        body = sum(9 + 8 * (r * c + c) for r, c in sizes)
        assert len(blob) == h + body + 4 + 24
        assert struct.unpack_from("<3d", blob, len(blob) - 24) == (1.0, 2.0, 3.0)

    @pytest.mark.parametrize("mutate", ["magic", "version", "variant", "truncate", "extra", "activation"])
    def test_malformed(self, mutate):
        blob = bytearray(Checkpoint(small_model(), TrainConfig(rate_bpi=7.0, arch=(5,))).to_bytes())
        if mutate == "magic":
            blob[0] = ord("X")
        elif mutate == "version":
            blob[4] = 9
        elif mutate == "variant":
            blob[6] = 7
        elif mutate == "truncate":
            blob = blob[:-10]
        elif mutate == "extra":
            blob += b"\x00"
        elif mutate == "activation":
            blob[27 + 8] = 9
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bytes(blob))

    def test_golden_checkpoint(self):
        ck = load_checkpoint(GOLDEN_DIR / "tiny.ckpt")
        x = np.linspace(0, 1, 12).reshape(2, 6)
        expected = np.load(GOLDEN_DIR / "tiny_expected.npz")
        for i, layer in enumerate(ck.model.layers()):
            np.testing.assert_array_equal(layer.weight.data, expected[f"w{i}"])
            np.testing.assert_array_equal(layer.bias.data, expected[f"b{i}"])
        # forward passes may differ in the last ulp between BLAS builds
        np.testing.assert_allclose(reconstruct(ck.model, x, mode="noiseless"), expected["noiseless"], rtol=1e-12)
        np.testing.assert_allclose(latents(ck.model, x), expected["latents"], rtol=1e-12, atol=1e-15)
        assert ck.history == [tuple(r) for r in expected["history"].tolist()]
