import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgen import diffnum as dn
from mtgen.cvae import (
    CvaeStage, EncoderOutput, LatentCode, StageConfig, TwoStageCVAE, decode, encode, gaussian_nll,
    kl_gaussian, reparameterize, sample_pipeline, smoothed, train_stage, vae_loss,
)
from mtgen.errors import ParameterError, UsageError


def enc_of(mu, logvar):
    return EncoderOutput(dn.Tensor(np.asarray(mu, dtype=np.float64)), dn.Tensor(np.asarray(logvar, dtype=np.float64)))


@pytest.fixture
def f64():
    with dn.default_dtype(np.float64):
        yield


@pytest.mark.usefixtures("f64")
class TestKl:
    def test_prior_matches(self):
        assert kl_gaussian(enc_of(np.zeros((3, 4)), np.zeros((3, 4)))).item() == 0.0

    def test_unit_mean_shift(self):
        assert kl_gaussian(enc_of([[1.0]], [[0.0]])).item() == pytest.approx(0.5, rel=1e-12)

    def test_variance_four(self):
        expected = 0.5 * (4.0 - 1.0 - math.log(4.0))
        assert expected == pytest.approx(0.80685, abs=1e-5)
        assert kl_gaussian(enc_of([[0.0]], [[math.log(4.0)]])).item() == pytest.approx(expected, rel=1e-12)

    def test_batch_mean(self):
        value = kl_gaussian(enc_of([[1.0], [0.0]], [[0.0], [0.0]])).item()
        assert value == pytest.approx(0.25, rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=6))
    def test_non_negative(self, rows):
        mu = np.array([[r[0] for r in rows]])
        logvar = np.array([[r[1] for r in rows]])
        assert kl_gaussian(enc_of(mu, logvar)).item() >= -1e-12


@pytest.mark.usefixtures("f64")
class TestReparameterize:
    def test_zero_noise(self):
        enc = enc_of([[0.3, -1.2]], [[0.5, -2.0]])
        np.testing.assert_array_equal(reparameterize(enc, np.zeros((1, 2))).data, enc.mu.data)

    def test_unit_variance(self):
        enc = enc_of([[0.3, -1.2]], [[0.0, 0.0]])
        e = np.array([[0.7, -0.1]])
        np.testing.assert_allclose(reparameterize(enc, e).data, enc.mu.data + e, rtol=1e-15)

    def test_sample_variance(self):
        n = 100_000
        logvar = np.log(2.5)
        enc = enc_of(np.full((n, 1), 1.0), np.full((n, 1), logvar))
        z = reparameterize(enc, np.random.default_rng(0).standard_normal((n, 1))).data
        assert abs(z.var() / np.exp(logvar) - 1.0) < 0.03

    def test_gradient_reaches_mu_and_logvar_only(self, f64):
        mu = dn.Tensor(np.array([[0.2, 0.4]]), requires_grad=True)
        logvar = dn.Tensor(np.array([[0.1, -0.3]]), requires_grad=True)
        z = reparameterize(EncoderOutput(mu, logvar), np.array([[1.0, 2.0]]))
        grads = dn.backward(z.sum(), [mu, logvar])
        np.testing.assert_allclose(grads[mu], [[1.0, 1.0]])
        np.testing.assert_allclose(grads[logvar], 0.5 * np.exp(0.5 * logvar.data) * [[1.0, 2.0]])

    def test_shape_mismatch(self):
        with pytest.raises(dn.DimensionError):
            reparameterize(enc_of(np.zeros((2, 3)), np.zeros((2, 3))), np.zeros((3, 2)))


class TestGaussianNll:
    def test_zero_residual_unit_gamma(self, f64):
        x = np.random.default_rng(0).random((4, 7))
        value = gaussian_nll(x, dn.Tensor(x), dn.Tensor(np.zeros(()))).item()
        assert value == pytest.approx(7 / 2 * math.log(2 * math.pi), rel=1e-12)

    def test_minimised_at_mean_squared_residual(self, f64):
        rng = np.random.default_rng(1)
        x = rng.random((5, 6))
        x_hat = x + rng.normal(scale=0.3, size=x.shape)
        best = ((x - x_hat) ** 2).sum(axis=1).mean() / x.shape[1]

        def nll(gamma):
            return gaussian_nll(x, dn.Tensor(x_hat), dn.Tensor(np.log(gamma))).item()

        assert nll(best) < nll(best * 1.01) and nll(best) < nll(best * 0.99)
        log_gamma = dn.Tensor(np.log(best), requires_grad=True)
        grads = dn.backward(gaussian_nll(x, dn.Tensor(x_hat), log_gamma), [log_gamma])
        assert abs(float(grads[log_gamma])) < 1e-10


def tiny_stage(stage=1, input_dim=6, latent_dim=3, num_classes=4, seed=0):
    return CvaeStage(input_dim, latent_dim, num_classes, hidden=(5, 4), stage=stage, rng=seed)


class TestStage:
    def test_shapes(self):
        m = tiny_stage()
        enc = encode(np.random.default_rng(0).random((7, 6)), np.arange(7) % 4, m)
        assert enc.mu.shape == (7, 3) and enc.logvar.shape == (7, 3)

    def test_encode_deterministic(self):
        m = tiny_stage()
        x = np.random.default_rng(0).random((2, 6))
        a, b = encode(x, [1, 1], m), encode(x, [1, 1], m)
        np.testing.assert_array_equal(a.mu.data, b.mu.data)
        np.testing.assert_array_equal(a.mu.data[0], a.mu.data[0])

    def test_logvar_clamped(self):
        m = tiny_stage()
        m.logvar_head.bias.data[:] = 50.0
        enc = encode(np.zeros((1, 6)), [0], m)
        assert np.all(enc.logvar.data == 10.0)

    def test_condition_out_of_range(self):
        with pytest.raises(ParameterError):
            encode(np.zeros((1, 6)), [4], tiny_stage())

    def test_stage1_decodes_into_unit_interval(self):
        m = tiny_stage()
        out = m.decode(np.random.default_rng(0).normal(scale=20, size=(50, 3)), np.arange(50) % 4).data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_decode_code_stage_mismatch(self):
        with pytest.raises(UsageError):
            decode(LatentCode(np.zeros(3), stage=2, condition=0), 0, tiny_stage(stage=1))
        out = decode(LatentCode(np.zeros(3), stage=1, condition=0), 0, tiny_stage(stage=1))
        assert out.shape == (6,)

    def test_gamma_positive(self):
        m = tiny_stage()
        m.log_gamma.data = np.array(-30.0, dtype=np.float32)
        assert m.gamma > 0

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            vae_loss(np.zeros((0, 6)), np.zeros(0, dtype=int), tiny_stage(), rng=0)

    def test_checkpoint_round_trip(self, tmp_path):
        m = tiny_stage(stage=2)
        m.save(tmp_path / "s.ckpt")
        back = CvaeStage.load(tmp_path / "s.ckpt")
        assert (back.stage, back.latent_dim, back.num_classes, back.hidden) == (2, 3, 4, (5, 4))
        u = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(back.decode(u, [0, 1, 2]).data, m.decode(u, [0, 1, 2]).data)
        assert back.to_bytes() == m.to_bytes()

    def test_vae_loss_gradcheck(self, f64):
        m = tiny_stage()
        rng = np.random.default_rng(3)
        x = rng.random((4, 6))
        c = np.array([0, 1, 2, 3])
        eps = rng.standard_normal((4, 3))
        m.log_gamma.data = np.array(-0.7)
        params = m.parameters()
        assert any(p is m.log_gamma for p in params)
        assert dn.gradcheck(lambda: vae_loss(x, c, m, eps=eps)[0], params) < 1e-4

    def test_total_is_sum(self):
        total, recon, kl = vae_loss(np.random.default_rng(0).random((3, 6)), [0, 1, 2], tiny_stage(), rng=1)
        assert total.item() == pytest.approx(recon.item() + kl.item(), rel=1e-6)


class TestTraining:
    def test_deterministic(self):
        x = np.random.default_rng(0).random((40, 6)).astype(np.float32)
        y = np.arange(40) % 4
        cfg = StageConfig(latent_dim=2, hidden=(8,), epochs=3, batch_size=16)
        a, _ = train_stage(x, y, 4, cfg, rng=5)
        b, _ = train_stage(x, y, 4, cfg, rng=5)
        assert a.to_bytes() == b.to_bytes()

    def test_writes_checkpoint(self, tmp_path):
        x = np.random.default_rng(0).random((20, 6)).astype(np.float32)
        train_stage(x, np.arange(20) % 4, 4, StageConfig(latent_dim=2, hidden=(8,), epochs=1), rng=0,
                    checkpoint_path=tmp_path / "c.ckpt")
        assert CvaeStage.load(tmp_path / "c.ckpt").latent_dim == 2

    def test_latent_size_follows_config(self):
        x = np.random.default_rng(0).random((10, 6)).astype(np.float32)
        m, _ = train_stage(x, np.zeros(10, dtype=int), 1, StageConfig(latent_dim=32, hidden=(8,), epochs=1), rng=0)
        assert m.latent_dim == 32

    def test_smoothed(self):
        np.testing.assert_allclose(smoothed([1, 2, 3, 4, 5, 6], window=3), [1, 1.5, 2, 3, 4, 5])

    def test_estimator_params(self):
        est = TwoStageCVAE(latent_dim=4, epochs=2)
        assert est.get_params()["latent_dim"] == 4
        assert est.set_params(epochs=3).epochs == 3

    def test_bad_stage2_inputs(self):
        with pytest.raises(ParameterError):
            TwoStageCVAE(stage2_inputs="median", epochs=1).fit(np.zeros((4, 2, 2)), [0, 1, 0, 1])


class TestTrainedModel:
    def test_pipeline_deterministic_and_bounded(self, desk):
        u = np.random.default_rng(0).standard_normal((20, desk.stage2.latent_dim))
        a = sample_pipeline(u, 2, desk.stage1, desk.stage2)
        b = sample_pipeline(u, 2, desk.stage1, desk.stage2)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_pipeline_class_out_of_range(self, desk):
        with pytest.raises(ParameterError):
            sample_pipeline(np.zeros(desk.stage2.latent_dim), 5, desk.stage1, desk.stage2)

    def test_encoded_means_near_zero(self, desk):
        mu = encode(desk.train.flat(), desk.train.labels, desk.stage1).mu.data
        assert np.all(np.abs(mu.mean(axis=0)) < 0.5)

    def test_reconstruction_beats_mean_image(self, desk):
        flat = desk.val.flat()
        recon = desk.vae.reconstruct(desk.val.images, desk.val.labels)
        assert ((recon - flat) ** 2).mean() < flat.var(axis=0).mean()

    def test_stage2_loss_drops(self, desk):
        assert desk.vae.history2_.total[-1] < desk.vae.history2_.total[0]

    def test_smoothed_losses_monotone(self, desk):
        for hist in (desk.vae.history1_, desk.vae.history2_):
            assert np.all(np.diff(smoothed(hist.total, 5)) <= 0)

    def test_losses_finite(self, desk):
        for hist in (desk.vae.history1_, desk.vae.history2_):
            assert np.all(np.isfinite(hist.total + hist.recon + hist.kl))

    def test_condition_changes_image(self, desk):
        u = np.random.default_rng(1).standard_normal((200, desk.stage2.latent_dim))
        a = sample_pipeline(u, 0, desk.stage1, desk.stage2)
        b = sample_pipeline(u, 1, desk.stage1, desk.stage2)
        assert np.mean(np.abs(a - b).sum(axis=1) > 0) >= 0.95

    def test_conditioning_fidelity(self, desk):
        rng = np.random.default_rng(2)
        hits = []
        for c in range(desk.train.num_classes):
            _, x = desk.vae.sample_random(200, c, rng)
            hits.append(desk.oracle.predict(x) == c)
        assert np.mean(hits) >= 0.70

    def test_transform_shape(self, desk):
        out = desk.vae.transform(desk.val.images[:5], desk.val.labels[:5])
        assert out.shape == (5, desk.stage2.latent_dim)
