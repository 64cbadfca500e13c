import numpy as np
import pytest

from spheregen import gan, geometry
from spheregen.evaluation import histogram_payload, total_variation
from spheregen.neuralnet import MlpNetwork
from spheregen.vmf import VmfComponent, sample_vmf


def random_angles(rng, n, d):
    return np.column_stack([rng.uniform(0, np.pi, (n, d - 2)), rng.uniform(-np.pi, np.pi, n)])


def tiny_model(rng, d=4):
    model = gan.GanModel.create(d, (5, 4), rng=rng)
    for net in (model.generator, model.discriminator):
        for b in net.biases:
            b[...] = rng.normal(0, 0.3, b.shape)
    return model


def check_ranges(theta):
    assert np.all(theta[:, :-1] > 0) and np.all(theta[:, :-1] < np.pi)
    assert np.all(theta[:, -1] > -np.pi) and np.all(theta[:, -1] < np.pi)


class TestGenerator:
    def _linear_generator(self, shift, d=5):
        net = MlpNetwork([d - 1, 3, d - 1], "relu", "angle_head", rng=np.random.default_rng(0))
        for w in net.weights:
            w[...] = 0.0
        net.biases[-1][...] = shift
        return gan.GanModel(net, MlpNetwork([d - 1, 3, 1], "leaky_relu", "linear"), d - 1)

    def test_zero_preactivation(self):
        theta = gan.generator_forward(self._linear_generator(0.0), np.ones((3, 4)))
        np.testing.assert_allclose(theta[:, :-1], np.pi / 2, rtol=0, atol=1e-15)
        np.testing.assert_allclose(theta[:, -1], 0.0, atol=1e-15)

    def test_saturation(self):
        theta = gan.generator_forward(self._linear_generator(1e3), np.ones((2, 4)))
        np.testing.assert_allclose(theta, np.pi, rtol=1e-15)
        check_ranges(theta)

    def test_range_sweep(self, rng):
        for scale in (1.0, 30.0):
            model = gan.GanModel.create(5, (16, 16), rng=rng)
            for w in model.generator.weights:
                w *= scale
            theta = gan.sample_gan(model, 100_000, rng)
            check_ranges(theta)
            geometry.check_angles(theta)

    def test_model_validation(self, rng):
        g = MlpNetwork([3, 4, 3], "relu", "angle_head", rng=rng)
        d = MlpNetwork([3, 4, 1], "leaky_relu", "linear", rng=rng)
        gan.GanModel(g, d, 3)
        with pytest.raises(ValueError):
            gan.GanModel(g, d, 2)
        with pytest.raises(ValueError):
            gan.GanModel(MlpNetwork([3, 4, 3], "relu", "linear", rng=rng), d, 3)
        with pytest.raises(ValueError):
            gan.GanModel(g, MlpNetwork([3, 4, 2], rng=rng), 3)

    def test_default_latent_dim(self):
        assert gan.GanModel.create(6, (4,)).latent_dim == 5
        assert gan.GanModel.create(6, (4,), latent_dim=2).latent_dim == 2


class TestLosses:
    def test_constant_half(self, rng):
        model = gan.GanModel.create(4, (6,), rng=rng)
        for p in model.discriminator.params:
            p[...] = 0.0
        real = random_angles(rng, 30, 4)
        z = rng.standard_normal((20, 3))
        d_loss, g_loss, _, _ = gan.gan_losses(model, real, z)
        assert d_loss == pytest.approx(2 * np.log(2), rel=1e-14)
        assert g_loss == pytest.approx(np.log(2), rel=1e-14)
        assert gan.minmax_value(model, real, z) == pytest.approx(-2 * np.log(2), rel=1e-14)

    def test_perfect_discriminator(self, rng):
        model = gan.GanModel.create(3, (4,), rng=rng)
        # generator pinned near theta_1 = pi, discriminator thresholds theta_1 at pi/2
        for w in model.generator.weights:
            w[...] = 0.0
        model.generator.biases[-1][...] = [8.0, 0.0]
        disc = model.discriminator
        disc.weights[0][...] = 0.0
        disc.weights[0][0, 0] = 1.0
        disc.biases[0][...] = 0.0
        disc.weights[1][...] = 0.0
        disc.weights[1][0, 0] = -200.0
        disc.biases[1][...] = 200.0 * np.pi / 2
        real = np.column_stack([rng.uniform(0.05, 0.3, 50), rng.uniform(-1, 1, 50)])
        d_loss, g_loss, _, _ = gan.gan_losses(model, real, rng.standard_normal((50, 2)))
        assert 0 <= d_loss < 1e-12
        # generator loss saturates at the clamp instead of overflowing
        assert g_loss == pytest.approx(-np.log(gan.LOG_CLAMP))

    def test_no_grad(self, rng):
        model = tiny_model(rng)
        d_loss, g_loss, dg, gg = gan.gan_losses(model, random_angles(rng, 5, 4), rng.standard_normal((5, 3)), need_grad=False)
        assert dg is None and gg is None and np.isfinite(d_loss + g_loss)

    @pytest.mark.parametrize("which", ["discriminator", "generator"])
    def test_gradients_finite_differences(self, rng, which):
        for _ in range(5):
            model = tiny_model(rng)
            real = random_angles(rng, 7, 4)
            z = rng.standard_normal((6, 3))
            if which == "discriminator":
                fn = lambda: gan.discriminator_loss(model, real, z)
                net = model.discriminator
            else:
                fn = lambda: gan.generator_loss(model, z)
                net = model.generator
            _, grads = fn()
            _, _, dg, gg = gan.gan_losses(model, real, z)
            for a, b in zip(grads, dg if which == "discriminator" else gg):
                np.testing.assert_array_equal(a, b)
            h = 1e-6
            for p, g in zip(net.params, grads):
                fd = np.empty_like(p)
                for idx in np.ndindex(p.shape):
                    old = p[idx]
                    p[idx] = old + h
                    up = fn()[0]
                    p[idx] = old - h
                    down = fn()[0]
                    p[idx] = old
                    fd[idx] = (up - down) / (2 * h)
                assert np.linalg.norm(fd - g) / max(np.linalg.norm(fd), 1e-10) < 1e-5

    def test_non_finite_loss_raises(self, rng):
        model = tiny_model(rng)
        model.discriminator.weights[-1][...] = np.nan
        with pytest.raises(FloatingPointError):
            gan.gan_losses(model, random_angles(rng, 4, 4), rng.standard_normal((4, 3)))


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            gan.GanTrainConfig(epochs=0)
        with pytest.raises(ValueError):
            gan.GanTrainConfig(beta1=1.0)

    def test_preconditions(self, rng):
        with pytest.raises(ValueError):
            gan.train_gan(random_angles(rng, 10, 3), gan.GanTrainConfig(epochs=1, batch_size=32))
        bad = random_angles(rng, 50, 3)
        bad[0, 0] = -0.5
        with pytest.raises(ValueError):
            gan.train_gan(bad, gan.GanTrainConfig(epochs=1, batch_size=8))

    def test_deterministic_and_data_untouched(self, rng):
        data = random_angles(rng, 200, 3)
        before = data.copy()
        cfg = gan.GanTrainConfig(epochs=3, batch_size=32, lr=1e-3, seed=5)
        a = gan.train_gan(data, cfg, hidden=(8,))
        b = gan.train_gan(data, cfg, hidden=(8,))
        np.testing.assert_array_equal(data, before)
        for p, q in zip(a.generator.params + a.discriminator.params, b.generator.params + b.discriminator.params):
            np.testing.assert_array_equal(p, q)
        assert a.history == b.history and len(a.history) == 3
        c = gan.train_gan(data, gan.GanTrainConfig(epochs=3, batch_size=32, lr=1e-3, seed=6), hidden=(8,))
        assert not np.array_equal(a.generator.weights[0], c.generator.weights[0])

    def test_alternating_updates(self, rng, monkeypatch):
        calls = []
        real_step = gan.adam_step

        def recording(state, params, grads):
            calls.append(id(state))
            return real_step(state, params, grads)

        monkeypatch.setattr(gan, "adam_step", recording)
        n, bs, epochs = 100, 32, 2
        gan.train_gan(random_angles(rng, n, 3), gan.GanTrainConfig(epochs=epochs, batch_size=bs), hidden=(4,))
        batches = epochs * int(np.ceil(n / bs))
        assert len(calls) == 2 * batches
        d_id, g_id = calls[0], calls[1]
        assert d_id != g_id
        assert calls == [d_id, g_id] * batches

    def test_point_mass_collapse(self):
        target = np.array([1.0, 2.0, 0.5])
        data = np.tile(target, (512, 1))
        model = gan.train_gan(data, gan.GanTrainConfig(epochs=1000, batch_size=128, lr=1e-3, seed=3), hidden=(32, 32))
        theta = gan.sample_gan(model, 20_000, np.random.default_rng(0))
        assert np.all(theta.std(axis=0) < 0.1)
        assert np.all(np.abs(np.median(theta, axis=0) - target) < 0.1)


    def test_uniform_toy_discriminator_accuracy(self):
        rng = np.random.default_rng(1)
        model = gan.train_gan(random_angles(rng, 5000, 3), gan.GanTrainConfig(epochs=100, batch_size=256, seed=1),
                              hidden=(32, 32))
        real = random_angles(rng, 20_000, 3)
        fake = gan.sample_gan(model, 20_000, rng)
        logits = model.discriminator.forward(np.vstack([real, fake]))[:, 0]
        accuracy = 0.5 * ((logits[:20_000] > 0).mean() + (logits[20_000:] <= 0).mean())
        assert 0.4 <= accuracy <= 0.6

    @pytest.mark.slow
    def test_vmf_marginal_histograms(self):
        rng = np.random.default_rng(0)
        law = VmfComponent(np.array([0.0, np.cos(0.5), np.sin(0.5)]), 10.0)
        train = geometry.to_spherical(sample_vmf(law, 10_000, rng))[1]
        # paper architecture; the lower rate and beta1 = 0.5 damp the adversarial oscillation
        cfg = gan.GanTrainConfig(epochs=1500, batch_size=256, lr=5e-5, seed=1, beta1=0.5)
        model = gan.train_gan(train, cfg, hidden=(128, 128, 128, 128))
        generated = gan.sample_gan(model, 100_000, np.random.default_rng(2))
        truth = geometry.to_spherical(sample_vmf(law, 100_000, rng))[1]
        tv = [total_variation(a, b) for a, b in zip(histogram_payload(generated), histogram_payload(truth))]
        assert max(tv) < 0.15, tv


class TestSampling:
    def test_seed_and_norm(self, rng):
        model = gan.GanModel.create(5, (16,), rng=rng)
        a = gan.sample_gan(model, 1000, np.random.default_rng(4))
        b = gan.sample_gan(model, 1000, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)
        check_ranges(a)
        x = geometry.from_spherical(np.ones(len(a)), a)
        assert np.max(np.abs(np.linalg.norm(x, axis=1) - 1)) < 1e-12

    def test_chunking_invariant(self, rng):
        model = gan.GanModel.create(4, (8,), rng=rng)
        a = gan.sample_gan(model, 1000, np.random.default_rng(1), chunk=7)
        b = gan.sample_gan(model, 1000, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
