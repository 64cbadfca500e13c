import numpy as np
import pytest

from spheregen.neuralnet import (
    AdamState,
    MlpNetwork,
    NonFiniteGradientError,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    train_loop,
)


def finite_difference_check(net, x, upstream, h=1e-6):
    """Largest per-tensor relative error between backward() and central differences."""
    _, cache = net.forward(x, return_cache=True)
    grads, gin = net.backward(cache, upstream)
    objective = lambda: float(np.sum(upstream * net.forward(x)))  # noqa: E731
    worst = 0.0
    for p, g in zip(net.params, grads):
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = objective()
            p[idx] = old - h
            down = objective()
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-8)
        worst = max(worst, np.linalg.norm(fd - g) / scale)
    fd_in = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = objective()
        x[idx] = old - h
        down = objective()
        x[idx] = old
        fd_in[idx] = (up - down) / (2 * h)
    worst = max(worst, np.linalg.norm(fd_in - gin) / max(np.linalg.norm(fd_in), 1e-8))
    return worst


def random_config(rng):
    depth = int(rng.integers(1, 4))
    dims = [int(v) for v in rng.integers(1, 9, size=depth + 1)]
    act = str(rng.choice(["relu", "leaky_relu", "swish"]))
    head = str(rng.choice(["linear", "angle_head"]))
    if head == "angle_head":
        dims[-1] = max(dims[-1], 2)
    net = MlpNetwork(dims, act, head, rng=rng, leaky_slope=0.01)
    for b in net.biases:
        b[...] = rng.normal(0, 0.3, b.shape)
    m = int(rng.integers(1, 6))
    while True:
        x = rng.normal(size=(m, dims[0]))
        _, (_, pre, _) = net.forward(x, return_cache=True)
        # keep rectifier pre-activations away from the kink
        if act == "swish" or all(np.min(np.abs(z)) > 1e-3 for z in pre[:-1]):
            break
    return net, x, rng.normal(size=(m, dims[-1]))


class TestForward:
    def test_zero_weights(self):
        net = MlpNetwork([3, 4, 2], "relu", "linear")
        assert np.array_equal(net.forward(np.ones((5, 3))), np.zeros((5, 2)))
        net.biases[0][...] = [1.0, -1.0, 2.0, 0.5]
        net.biases[1][...] = [0.25, -0.5]
        np.testing.assert_array_equal(net.forward(np.ones((2, 3))), [[0.25, -0.5]] * 2)

    def test_identity_layer(self, rng):
        net = MlpNetwork([3, 3], "relu", "linear")
        net.weights[0][...] = np.eye(3)
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(net.forward(x), x)

    def test_row_independence(self, rng):
        net = MlpNetwork([4, 16, 16, 3], "swish", "angle_head", rng=rng)
        a, b = rng.normal(size=(7, 4)), rng.normal(size=(5, 4))
        np.testing.assert_allclose(net.forward(np.vstack([a, b])), np.vstack([net(a), net(b)]), atol=1e-15)

    def test_angle_head_ranges(self, rng):
        net = MlpNetwork([2, 8, 4], "relu", "angle_head", rng=rng)
        net.weights[-1] *= 1e4
        out = net.forward(rng.normal(size=(1000, 2)))
        assert np.all((out[:, :-1] > 0) & (out[:, :-1] < np.pi))
        assert np.all((out[:, -1] > -np.pi) & (out[:, -1] < np.pi))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MlpNetwork([3, 2]).forward(np.ones((2, 4)))
        with pytest.raises(ValueError):
            MlpNetwork([3, 0, 2])

    def test_initialisation_bounds(self, rng):
        net = MlpNetwork([100, 50, 10], "relu", "linear", rng=rng)
        assert np.abs(net.weights[0]).max() <= np.sqrt(6 / 100)
        assert np.abs(net.weights[1]).max() <= np.sqrt(6 / 60)
        assert np.abs(net.weights[0]).max() > 0.9 * np.sqrt(6 / 100)


class TestBackward:
    def test_zero_upstream(self, rng):
        net = MlpNetwork([3, 5, 2], "swish", "linear", rng=rng)
        _, cache = net.forward(rng.normal(size=(4, 3)), return_cache=True)
        grads, gin = net.backward(cache, np.zeros((4, 2)))
        assert all(not np.any(g) for g in grads) and not np.any(gin)

    def test_single_linear_layer(self, rng):
        net = MlpNetwork([3, 2], "relu", "linear", rng=rng)
        x, up = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        _, cache = net.forward(x, return_cache=True)
        grads, gin = net.backward(cache, up)
        np.testing.assert_allclose(grads[0], x.T @ up)
        np.testing.assert_allclose(grads[1], up.sum(0))
        np.testing.assert_allclose(gin, up @ net.weights[0].T)

    def test_relu_subgradient_zero_at_kink(self):
        net = MlpNetwork([1, 1, 1], "relu", "linear")
        net.weights[0][...] = 1.0
        net.weights[1][...] = 1.0
        _, cache = net.forward(np.zeros((1, 1)), return_cache=True)
        grads, _ = net.backward(cache, np.ones((1, 1)))
        assert grads[0][0, 0] == 0.0

    def test_finite_difference_sweep(self):
        rng = np.random.default_rng(2024)
        errors = [finite_difference_check(*random_config(rng)) for _ in range(100)]
        assert max(errors) < 1e-5

    @pytest.mark.parametrize("act", ["relu", "leaky_relu", "swish"])
    @pytest.mark.parametrize("head", ["linear", "angle_head"])
    def test_each_activation_and_head(self, act, head):
        rng = np.random.default_rng([len(act), len(head)])
        net = MlpNetwork([3, 6, 5, 4], act, head, rng=rng)
        x = rng.normal(size=(3, 3))
        assert finite_difference_check(net, x, rng.normal(size=(3, 4))) < 1e-5

    def test_shape_mismatch(self, rng):
        net = MlpNetwork([3, 2], rng=rng)
        _, cache = net.forward(np.ones((4, 3)), return_cache=True)
        with pytest.raises(ValueError):
            net.backward(cache, np.ones((3, 2)))


class TestAdam:
    def test_zero_gradient(self):
        p = [np.array([1.0, -2.0])]
        adam_step(AdamState(), p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_is_lr_sign(self):
        p = [np.array([1.0, 1.0, 1.0])]
        adam_step(AdamState(lr=1e-3), p, [np.array([5.0, -0.01, 0.0])])
        np.testing.assert_allclose(1.0 - p[0], [1e-3, -1e-3, 0.0], rtol=1e-5, atol=1e-12)

    def test_minimises_quadratic(self):
        p = [np.array([1.0])]
        state = AdamState(lr=1e-2)
        for _ in range(5000):
            adam_step(state, p, [2 * p[0]])
        assert abs(p[0][0]) < 1e-2
        assert state.step_count == 5000

    def test_reference_two_steps(self):
        # hand-evaluated bias-corrected Adam
        p = [np.array([0.5])]
        s = AdamState(lr=0.1)
        g1, g2 = 2.0, -1.0
        adam_step(s, p, [np.array([g1])])
        adam_step(s, p, [np.array([g2])])
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        step1 = 0.1 * 1.0 / (1.0 + 1e-8 / abs(g1))
        assert p[0][0] == pytest.approx(0.5 - step1 - step2, rel=1e-12)

    def test_non_finite_rejected(self):
        p = [np.zeros(2)]
        with pytest.raises(NonFiniteGradientError, match="parameter 0"):
            adam_step(AdamState(), p, [np.array([np.nan, 0.0])])


def mse_loss(net, batch, rng, need_grad):
    x, y = batch[:, :1], batch[:, 1:]
    out, cache = net.forward(x, return_cache=True)
    r = out - y
    loss = float(np.mean(r * r))
    if not need_grad:
        return loss, None
    grads, _ = net.backward(cache, 2 * r / r.size)
    return loss, grads


def sine_data(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-np.pi, np.pi, n)
    return np.column_stack([x, np.sin(x)])


class TestTrainLoop:
    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=10, patience=0)
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=10, patience=10)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_sine_regression(self):
        net = MlpNetwork([1, 64, 64, 64, 64, 1], "swish", "linear", rng=np.random.default_rng(1))
        cfg = TrainConfig(max_epochs=400, patience=50, batch_size=32, seed=3, lr=1e-3)
        res = train_loop(net, mse_loss, sine_data(), cfg)
        assert res.best_val_loss < 1e-2
        assert len(res.history) <= 400

    def test_returns_best_parameters(self):
        data = sine_data(300)
        net = MlpNetwork([1, 16, 1], "relu", "linear", rng=np.random.default_rng(2))
        cfg = TrainConfig(max_epochs=60, patience=59, batch_size=16, seed=1, lr=3e-2)
        res = train_loop(net, mse_loss, data, cfg)
        vals = [h["val_loss"] for h in res.history]
        assert res.best_val_loss == min(vals) and res.best_epoch == int(np.argmin(vals))
        order = np.random.default_rng(1).permutation(300)
        val = data[order][300 - 60:]
        assert mse_loss(net, val, None, False)[0] == pytest.approx(res.best_val_loss, rel=1e-12)

    def test_patience_one(self):
        net = MlpNetwork([1, 8, 1], "relu", "linear", rng=np.random.default_rng(5))
        res = train_loop(net, mse_loss, sine_data(200), TrainConfig(max_epochs=500, patience=1, lr=0.5, seed=2))
        vals = [h["val_loss"] for h in res.history]
        # stops right after the first epoch that fails to improve
        assert vals[-1] >= min(vals[:-1])
        assert all(vals[i + 1] < vals[i] for i in range(len(vals) - 2))

    def test_deterministic(self):
        def run():
            net = MlpNetwork([1, 8, 8, 1], "leaky_relu", "linear", rng=np.random.default_rng(7))
            res = train_loop(net, mse_loss, sine_data(200), TrainConfig(max_epochs=20, patience=5, seed=4))
            return net, res.history

        (a, ha), (b, hb) = run(), run()
        assert ha == hb
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))

    def test_divergence_reports_history(self):
        def exploding(net, batch, rng, need_grad):
            loss, grads = mse_loss(net, batch, rng, need_grad)
            return (np.inf if not need_grad else loss), grads

        net = MlpNetwork([1, 4, 1], rng=np.random.default_rng(0))
        with pytest.raises(TrainingDivergedError) as info:
            train_loop(net, exploding, sine_data(100), TrainConfig(max_epochs=5, patience=2))
        assert len(info.value.history) == 1

    def test_validation_draws_fixed(self):
        seen = []

        def noisy(net, batch, rng, need_grad):
            draw = rng.uniform()
            if not need_grad:
                seen.append(draw)
            return mse_loss(net, batch, rng, need_grad)[0] + 0 * draw, mse_loss(net, batch, rng, need_grad)[1]

        net = MlpNetwork([1, 4, 1], rng=np.random.default_rng(0))
        train_loop(net, noisy, sine_data(100), TrainConfig(max_epochs=4, patience=3))
        assert len(set(seen)) == 1

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train_loop(MlpNetwork([1, 1]), mse_loss, np.empty((0, 2)), TrainConfig(max_epochs=2, patience=1))


def test_persistence_round_trip(rng):
    net = MlpNetwork([3, 5, 4], "leaky_relu", "angle_head", rng=rng, leaky_slope=0.2)
    back = MlpNetwork.from_dict(net.to_dict())
    x = rng.normal(size=(10, 3))
    assert np.array_equal(back.forward(x), net.forward(x))
    doc = net.to_dict()
    doc["weights"][0] = [[1.0]]
    with pytest.raises(ValueError):
        MlpNetwork.from_dict(doc)
