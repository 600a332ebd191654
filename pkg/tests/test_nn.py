import numpy as np
import pytest

from mprlab import nn


def seq_loss_and_grads(net, xs):
    outs, _, cache = net.forward_sequence(xs)
    loss = float(np.sum(outs ** 2))
    grads, _ = net.backward_sequence(cache, 2.0 * outs)
    return loss, grads


def seq_loss(net, xs):
    outs, _, _ = net.forward_sequence(xs)
    return float(np.sum(outs ** 2))


NETS = {
    "dense_relu": lambda: nn.Network([nn.Dense(3, 6, "relu"), nn.Dense(6, 2, "identity")], seed=1),
    "dense_tanh": lambda: nn.Network([nn.Dense(3, 6, "tanh"), nn.Dense(6, 2, "tanh")], seed=2),
    "lstm": lambda: nn.Network([nn.LSTM(3, 5), nn.Dense(5, 2, "identity")], seed=3),
    "gru": lambda: nn.Network([nn.GRU(3, 5), nn.Dense(5, 2, "tanh")], seed=4),
    "stacked_lstm": lambda: nn.Network([nn.LSTM(3, 4), nn.LSTM(4, 4), nn.Dense(4, 2, "identity")], seed=5),
}


class TestForward:
    def test_identity_dense_layer_passthrough(self):
        net = nn.Network([nn.Dense(3, 3, "identity")], seed=0)
        net.params["0.W"] = np.eye(3)
        net.params["0.b"] = np.zeros(3)
        x = np.array([1.5, -2.0, 0.25])
        out, _, _ = net.forward(x)
        assert np.array_equal(out, x)

    def test_zero_weight_network_zero_output(self):
        for act, expected in [("relu", 0.0), ("tanh", 0.0), ("identity", 0.0)]:
            net = nn.Network([nn.Dense(4, 3, act)], seed=0)
            net.params["0.W"][:] = 0.0
            net.params["0.b"][:] = 0.0
            out, _, _ = net.forward(np.ones(4))
            assert np.all(out == expected)

    def test_matches_scalar_recomputation(self):
        # independent elementwise re-evaluation of a 2-layer tanh MLP
        net = nn.Network([nn.Dense(2, 3, "tanh"), nn.Dense(3, 2, "tanh")], seed=9)
        x = np.array([0.3, -1.2])
        out, _, _ = net.forward(x)
        w1, b1 = net.params["0.W"], net.params["0.b"]
        w2, b2 = net.params["1.W"], net.params["1.b"]
        h = [np.tanh(sum(x[i] * w1[i, j] for i in range(2)) + b1[j]) for j in range(3)]
        y = [np.tanh(sum(h[i] * w2[i, j] for i in range(3)) + b2[j]) for j in range(2)]
        assert np.allclose(out, y, atol=1e-12)

    def test_shape_mismatch_raises(self):
        net = nn.Network([nn.Dense(3, 2, "relu")], seed=0)
        with pytest.raises(ValueError):
            net.forward(np.ones(4))

    def test_layer_composition_checked(self):
        with pytest.raises(ValueError, match="compose"):
            nn.Network([nn.Dense(3, 4), nn.Dense(5, 2)], seed=0)

    def test_recurrent_state_threading(self):
        net = nn.Network([nn.LSTM(2, 4), nn.Dense(4, 3, "identity")], seed=1)
        x = np.ones((1, 2))
        out1, state, _ = net.forward(x)
        out2, _, _ = net.forward(x, state)
        assert not np.allclose(out1, out2)  # state advanced

    def test_forward_sequence_matches_stepwise(self):
        for name, build in NETS.items():
            net = build()
            xs = np.random.default_rng(0).standard_normal((5, 3, 3))
            outs, final_state, _ = net.forward_sequence(xs)
            state = None
            for t in range(5):
                step_out, state, _ = net.forward(xs[t], state)
                assert np.allclose(outs[t], step_out, atol=1e-12), name


class TestBackward:
    def test_linear_identity_gradient_is_outer_product(self):
        net = nn.Network([nn.Dense(3, 3, "identity")], seed=0)
        x = np.array([[1.0, 2.0, -0.5]])
        out, _, cache = net.forward(x)
        grads, _, _ = net.backward(cache, np.ones((1, 3)))
        assert np.allclose(grads["0.W"], np.outer(x[0], np.ones(3)))
        assert np.allclose(grads["0.b"], np.ones(3))

    def test_constant_loss_zero_gradient(self):
        net = nn.Network([nn.Dense(2, 2, "tanh")], seed=1)
        _, _, cache = net.forward(np.ones((1, 2)))
        grads, _, _ = net.backward(cache, np.zeros((1, 2)))
        assert all(np.all(g == 0) for g in grads.values())

    @pytest.mark.parametrize("name", sorted(NETS))
    def test_finite_differences(self, name):
        net = NETS[name]()
        xs = np.random.default_rng(10).standard_normal((6, 2, 3))
        _, analytic = seq_loss_and_grads(net, xs)
        numeric = nn.finite_difference_grads(net.params, lambda: seq_loss(net, xs))
        assert nn.max_relative_error(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("layer", ["lstm", "gru"])
    def test_unrolled_sequence_gradients_through_time(self, layer):
        # gradient only at the final step must flow through all 8 steps
        build = {"lstm": lambda: nn.Network([nn.LSTM(2, 4), nn.Dense(4, 2, "identity")], seed=7),
                 "gru": lambda: nn.Network([nn.GRU(2, 4), nn.Dense(4, 2, "identity")], seed=8)}[layer]
        net = build()
        xs = np.random.default_rng(2).standard_normal((8, 1, 2))

        def loss():
            outs, _, _ = net.forward_sequence(xs)
            return float(np.sum(outs[-1] ** 2))

        outs, _, cache = net.forward_sequence(xs)
        douts = np.zeros_like(outs)
        douts[-1] = 2.0 * outs[-1]
        analytic, _ = net.backward_sequence(cache, douts)
        numeric = nn.finite_difference_grads(net.params, loss)
        assert nn.max_relative_error(analytic, numeric) < 1e-4

    def test_backward_input_gradient(self):
        net = nn.Network([nn.Dense(3, 2, "tanh")], seed=3)
        x = np.random.default_rng(1).standard_normal((1, 3))
        out, _, cache = net.forward(x)
        _, dx, _ = net.backward(cache, np.ones((1, 2)))
        h = 1e-6
        for i in range(3):
            xp, xm = x.copy(), x.copy()
            xp[0, i] += h
            xm[0, i] -= h
            fd = (net.forward(xp)[0].sum() - net.forward(xm)[0].sum()) / (2 * h)
            assert dx[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestAdam:
    def test_zero_gradient_no_change(self):
        net = nn.Network([nn.Dense(2, 2, "identity")], seed=0)
        opt = nn.AdamState(net.params, lr=0.1)
        before = {k: v.copy() for k, v in net.params.items()}
        nn.adam_step(opt, net.params, {k: np.zeros_like(v) for k, v in net.params.items()})
        for k in before:
            assert np.array_equal(net.params[k], before[k])

    def test_first_step_magnitude(self):
        # with g=1 the bias-corrected update is lr/(1+eps) on the first step
        params = {"w": np.array([0.0])}
        opt = nn.AdamState(params, lr=1e-3)
        nn.adam_step(opt, params, {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(-1e-3, rel=1e-6)
        assert opt.step_count == 1

    def test_identical_streams_identical_trajectories(self):
        def run():
            net = nn.Network([nn.Dense(2, 3, "tanh"), nn.Dense(3, 1, "identity")], seed=4)
            opt = nn.AdamState(net.params, lr=1e-2)
            xs = np.random.default_rng(0).standard_normal((10, 4, 2))
            losses = []
            for t in range(10):
                out, _, cache = net.forward(xs[t])
                losses.append(float(np.sum(out ** 2)))
                grads, _, _ = net.backward(cache, 2.0 * out)
                nn.adam_step(opt, net.params, grads)
            return losses, net.params

        la, pa = run()
        lb, pb = run()
        assert la == lb
        for k in pa:
            assert np.array_equal(pa[k], pb[k])

    def test_non_finite_gradient_halts(self):
        params = {"w": np.array([0.0])}
        opt = nn.AdamState(params, lr=1e-3)
        with pytest.raises(FloatingPointError):
            nn.adam_step(opt, params, {"w": np.array([np.nan])})


class TestClipGlobalNorm:
    def test_noop_below_threshold(self):
        grads = {"a": np.array([0.3, 0.4])}
        norm = nn.clip_global_norm(grads, 10.0)
        assert norm == pytest.approx(0.5)
        assert np.allclose(grads["a"], [0.3, 0.4])

    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        nn.clip_global_norm(grads, 1.0)
        total = np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))
        assert total == pytest.approx(1.0, rel=1e-9)


class TestInitDeterminism:
    def test_same_seed_bitwise_identical(self):
        a = nn.Network([nn.LSTM(3, 4), nn.Dense(4, 2)], seed=42)
        b = nn.Network([nn.LSTM(3, 4), nn.Dense(4, 2)], seed=42)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_different_seed_differs(self):
        a = nn.Network([nn.Dense(3, 4)], seed=1)
        b = nn.Network([nn.Dense(3, 4)], seed=2)
        assert not np.array_equal(a.params["0.W"], b.params["0.W"])


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        net = nn.Network([nn.LSTM(3, 4), nn.Dense(4, 2)], seed=6)
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, net.params, seed=6, step=123, extra={"note": "x"})
        params, meta = nn.load_checkpoint(path)
        assert meta["seed"] == 6 and meta["step"] == 123
        assert meta["extra"] == {"note": "x"}
        assert set(params) == set(net.params)
        for k in params:
            assert params[k].dtype == net.params[k].dtype
            assert np.array_equal(params[k], net.params[k])

    def test_float32_round_trip(self, tmp_path):
        net = nn.Network([nn.Dense(3, 2)], seed=1, dtype=np.float32)
        path = tmp_path / "c.npz"
        nn.save_checkpoint(path, net.params, seed=1, step=0)
        params, _ = nn.load_checkpoint(path)
        assert params["0.W"].dtype == np.float32
        assert np.array_equal(params["0.W"], net.params["0.W"])

    def test_set_params_shape_check(self):
        net = nn.Network([nn.Dense(3, 2)], seed=1)
        bad = {k: np.zeros((1, 1)) for k in net.params}
        with pytest.raises(ValueError):
            net.set_params(bad)
