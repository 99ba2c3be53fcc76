import numpy as np
import pytest

from hrlport.neural import (
    DenseNetwork,
    Layer,
    NeuralError,
    build_network,
    load_network,
    network_from_bytes,
    network_manifest,
    network_to_bytes,
    optimizer_step,
    save_network,
    soft_update,
)


from conftest import finite_difference, flatten_record


class TestForward:
    def test_identity_layer_passes_input_through(self):
        net = DenseNetwork([Layer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(net.forward(x), x)

    def test_zero_weights_yield_activated_bias(self):
        bias = np.array([0.3, -0.7])
        net = DenseNetwork([Layer(np.zeros((2, 3)), bias, "tanh")])
        np.testing.assert_allclose(net.forward(np.ones(3)), np.tanh(bias))

    def test_matches_straight_line_reevaluation(self, rng):
        net = build_network(4, [5], 2, rng)
        x = rng.normal(size=4)
        h = np.tanh(net.layers[0].weights @ x + net.layers[0].bias)
        expected = net.layers[1].weights @ h + net.layers[1].bias
        np.testing.assert_allclose(net.forward(x), expected, rtol=1e-12)

    def test_batch_and_single_agree(self, rng):
        net = build_network(3, [4], 2, rng)
        xs = rng.normal(size=(6, 3))
        batch = net.forward(xs)
        for row, x in zip(batch, xs):
            np.testing.assert_allclose(net.forward(x), row, rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        net = build_network(3, [4], 2, rng)
        with pytest.raises(NeuralError):
            net.forward(np.zeros(5))

    def test_forward_does_not_touch_parameters(self, rng):
        net = build_network(3, [4], 2, rng)
        before = net.parameter_vector()
        net.forward(rng.normal(size=3))
        np.testing.assert_array_equal(net.parameter_vector(), before)


class TestBackward:
    def test_linear_weight_gradient_is_outer_product(self):
        net = DenseNetwork([Layer(np.zeros((2, 3)), np.zeros(2), "identity")])
        x = np.array([1.0, 2.0, 3.0])
        net.forward(x)
        record = net.backward(np.array([1.0, 0.0]))
        np.testing.assert_array_equal(record.weights[0][0], x)
        np.testing.assert_array_equal(record.weights[0][1], np.zeros(3))

    def test_zero_upstream_gives_zero_record(self, rng):
        net = build_network(3, [4], 2, rng)
        net.forward(rng.normal(size=3))
        record = net.backward(np.zeros(2))
        assert all(not g.any() for g in flatten_record(record))

    def test_backward_before_forward_errors(self, rng):
        net = build_network(2, [2], 1, rng)
        with pytest.raises(NeuralError):
            net.backward(np.zeros(1))

    @pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
    def test_gradients_match_finite_differences(self, activation, rng):
        for _ in range(10):
            net = build_network(3, [4, 3], 2, rng, hidden_activation=activation)
            x = rng.normal(size=3)
            target = rng.normal(size=2)

            def loss():
                diff = net.forward(x) - target
                return float(diff @ diff)

            out = net.forward(x)
            record = net.backward(2.0 * (out - target))
            numeric = finite_difference(net, loss)
            for analytic, fd in zip(flatten_record(record), numeric):
                np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-7)

    def test_input_gradient_matches_finite_differences(self, rng):
        net = build_network(3, [5], 1, rng)
        x = rng.normal(size=3)
        net.forward(x)
        record = net.backward(np.ones(1))
        h = 1e-6
        for i in range(3):
            bump = x.copy()
            bump[i] += h
            dip = x.copy()
            dip[i] -= h
            fd = (net.forward(bump)[0] - net.forward(dip)[0]) / (2 * h)
            assert record.wrt_input[0, i] == pytest.approx(fd, rel=1e-5)

    def test_batch_gradient_sums_samples(self, rng):
        net = build_network(2, [3], 1, rng)
        xs = rng.normal(size=(4, 2))
        net.forward(xs)
        batch_record = net.backward(np.ones((4, 1)))
        total = np.zeros_like(net.layers[0].weights)
        for x in xs:
            net.forward(x)
            total += net.backward(np.ones(1)).weights[0]
        np.testing.assert_allclose(batch_record.weights[0], total, rtol=1e-12)


class TestOptimizerStep:
    def test_zero_rate_keeps_parameters(self, rng):
        net = build_network(2, [3], 1, rng)
        before = net.parameter_vector()
        net.forward(np.ones(2))
        optimizer_step(net, net.backward(np.ones(1)), 0.0)
        np.testing.assert_array_equal(net.parameter_vector(), before)

    def test_single_parameter_descent(self):
        net = DenseNetwork([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
        net.forward(np.array([2.0]))  # d(output)/dw = x = 2
        optimizer_step(net, net.backward(np.ones(1)), 0.1, "descend")
        assert net.layers[0].weights[0, 0] == pytest.approx(0.8)

    def test_ascend_flips_sign(self):
        net = DenseNetwork([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
        net.forward(np.array([2.0]))
        optimizer_step(net, net.backward(np.ones(1)), 0.1, "ascend")
        assert net.layers[0].weights[0, 0] == pytest.approx(1.2)

    def test_quadratic_bowl_converges(self, rng):
        net = build_network(2, [4], 1, rng)
        x = np.array([0.7, -0.4])
        target = np.array([0.25])
        losses = []
        for _ in range(200):
            out = net.forward(x)
            losses.append(float((out - target) @ (out - target)))
            optimizer_step(net, net.backward(2.0 * (out - target)), 0.05)
        assert losses[-1] < 1e-10
        drops = np.diff(losses)
        assert np.all(drops[np.abs(np.array(losses[:-1])) > 1e-12] <= 0)

    def test_rejects_non_finite_gradients(self, rng):
        net = build_network(2, [2], 1, rng)
        net.forward(np.ones(2))
        record = net.backward(np.ones(1))
        record.weights[0][0, 0] = np.nan
        with pytest.raises(NeuralError):
            optimizer_step(net, record, 0.1)


class TestSoftUpdate:
    def test_tau_one_copies(self, rng):
        target = build_network(2, [3], 1, rng)
        online = build_network(2, [3], 1, rng)
        soft_update(target, online, 1.0)
        np.testing.assert_array_equal(target.parameter_vector(),
                                      online.parameter_vector())

    def test_tau_zero_keeps_target(self, rng):
        target = build_network(2, [3], 1, rng)
        online = build_network(2, [3], 1, rng)
        before = target.parameter_vector()
        soft_update(target, online, 0.0)
        np.testing.assert_array_equal(target.parameter_vector(), before)

    def test_tau_half_elementwise_average(self, rng):
        target = build_network(2, [3], 1, rng)
        online = build_network(2, [3], 1, rng)
        expected = 0.5 * (target.parameter_vector() + online.parameter_vector())
        soft_update(target, online, 0.5)
        np.testing.assert_allclose(target.parameter_vector(), expected, rtol=1e-15)


class TestDeterminismAndCheckpoints:
    def train_run(self, seed):
        rng = np.random.default_rng(seed)
        net = build_network(3, [8, 8], 2, rng)
        x = np.linspace(-1, 1, 3)
        for _ in range(50):
            out = net.forward(x)
            optimizer_step(net, net.backward(2.0 * out), 0.01)
        return net.parameter_vector()

    def test_identical_seeds_bitwise_identical(self):
        assert np.array_equal(self.train_run(7), self.train_run(7))
        assert not np.array_equal(self.train_run(7), self.train_run(8))

    def test_checkpoint_roundtrip(self, rng, tmp_path):
        net = build_network(4, [6], 3, rng)
        save_network(net, tmp_path / "policy")
        loaded = load_network(tmp_path / "policy")
        np.testing.assert_array_equal(loaded.parameter_vector(),
                                      net.parameter_vector())
        assert [l.activation for l in loaded.layers] == \
            [l.activation for l in net.layers]

    def test_version_mismatch_refused(self, rng):
        net = build_network(2, [2], 1, rng)
        manifest = network_manifest(net)
        manifest["format_version"] = 99
        with pytest.raises(NeuralError, match="version"):
            network_from_bytes(manifest, network_to_bytes(net))
