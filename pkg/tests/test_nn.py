import math

import numpy as np
import pytest

from conftest import finite_diff_grads, max_rel_err
from tribekit import nn, norm
from tribekit.errors import ConfigError, DivergenceError


def _identity_net(dim):
    return nn.Network(layers=[], kc=dim)


class TestForward:
    def test_identity_network_passes_input_through(self):
        x = np.array([[1.0, -2.0, 3.0]])
        logits, trace = nn.forward(_identity_net(3), x, [])
        assert np.array_equal(logits, x)
        assert trace == []

    def test_identity_weights(self):
        net = nn.Network(layers=[nn.Dense(np.eye(2), np.zeros(2))], kc=2)
        logits, _ = nn.forward(net, np.array([[1.0, 2.0]]), [])
        assert np.allclose(logits, [[1.0, 2.0]], atol=0)

    def test_two_layer_matches_matrix_oracle(self):
        rng = np.random.default_rng(42)
        w1 = rng.normal(size=(3, 4))
        b1 = rng.normal(size=3)
        w2 = rng.normal(size=(2, 3))
        b2 = rng.normal(size=2)
        net = nn.Network(layers=[nn.Dense(w1, b1), nn.ReLU(), nn.Dense(w2, b2)], kc=2)
        x = np.ones((1, 4))
        logits, _ = nn.forward(net, x, [])
        h = x @ w1.T + b1
        h = np.maximum(h, 0.0)
        expected = h @ w2.T + b2
        assert np.abs(logits - expected).max() < 1e-12

    def test_eval_mode_is_pure(self, small_model):
        x = np.random.default_rng(0).normal(size=(8, 6))
        snap = [s.copy() for s in small_model.states]
        out1, _ = nn.forward(small_model.net, x, small_model.states, mode="eval")
        out2, _ = nn.forward(small_model.net, x, small_model.states, mode="eval")
        assert np.array_equal(out1, out2)
        for before, after in zip(snap, small_model.states):
            assert np.array_equal(before.mean, after.mean)
            assert np.array_equal(before.var, after.var)

    def test_adapt_mode_touches_only_norm_stats(self, small_model):
        x = np.random.default_rng(1).normal(size=(8, 6))
        states = [s.copy() for s in small_model.states]
        weights_before = [l.weights.copy() for l in small_model.net.layers
                          if isinstance(l, nn.Dense)]
        affine_before = [(s.scale.copy(), s.shift.copy()) for s in states]
        nn.forward(small_model.net, x, states, mode="adapt")
        weights_after = [l.weights for l in small_model.net.layers
                         if isinstance(l, nn.Dense)]
        for wb, wa in zip(weights_before, weights_after):
            assert np.array_equal(wb, wa)
        for (sc, sh), st in zip(affine_before, states):
            assert np.array_equal(sc, st.scale)
            assert np.array_equal(sh, st.shift)
        assert not np.array_equal(states[0].mean, small_model.states[0].mean)

    def test_dimension_mismatch_raises(self, small_model):
        with pytest.raises(ConfigError):
            nn.forward(small_model.net, np.zeros((2, 5)), small_model.states)

    def test_balanced_adapt_requires_pseudo_labels(self, small_model):
        states = norm.init_norm_states(small_model.states, "balanced", 4, eta=0.01)
        with pytest.raises(ConfigError):
            nn.forward(small_model.net, np.zeros((2, 6)), states, mode="adapt")


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(nn.softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_large_logits_no_overflow(self):
        p = nn.softmax(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(p))
        assert p[0, 0] > 1 - 1e-12
        assert p[0, 1] < 1e-12

    def test_closed_form(self):
        p = nn.softmax(np.array([[math.log(2.0), 0.0]]))
        assert np.allclose(p, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(40, 7)) * 5
        p = nn.softmax(z)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
        assert np.abs(p - nn.softmax(z + 13.7)).max() < 1e-12


class TestLosses:
    def test_cross_entropy_exact_match_is_zero(self):
        probs = np.array([[0.0, 1.0, 0.0]])
        targets = np.array([[0.0, 1.0, 0.0]])
        assert nn.cross_entropy(probs, targets)[0] == 0.0

    def test_cross_entropy_closed_form(self):
        loss = nn.cross_entropy(np.array([[0.6, 0.4]]), np.array([[1.0, 0.0]]))
        assert abs(loss[0] - (-math.log(0.6))) < 1e-12
        assert abs(loss[0] - 0.5108) < 1e-4

    def test_cross_entropy_uniform(self):
        probs = np.full((1, 10), 0.1)
        targets = nn.onehot([3], 10)
        assert abs(nn.cross_entropy(probs, targets)[0] - math.log(10)) < 1e-12

    def test_cross_entropy_zero_prob_clamped(self):
        loss = nn.cross_entropy(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
        assert abs(loss[0] - (-math.log(1e-12))) < 1e-9

    def test_entropy_onehot_and_uniform(self):
        assert nn.entropy(np.array([[1.0, 0.0, 0.0]]))[0] == 0.0
        for kc in (2, 5, 11):
            h = nn.entropy(np.full((1, kc), 1.0 / kc))[0]
            assert abs(h - math.log(kc)) < 1e-12

    def test_entropy_closed_form(self):
        h = nn.entropy(np.array([[0.9, 0.1]]))[0]
        assert abs(h - (-0.9 * math.log(0.9) - 0.1 * math.log(0.1))) < 1e-12
        assert abs(h - 0.3251) < 1e-4

    def test_entropy_bounds(self):
        rng = np.random.default_rng(4)
        p = nn.softmax(rng.normal(size=(100, 6)) * 3)
        h = nn.entropy(p)
        assert np.all(h >= 0.0)
        assert np.all(h <= math.log(6) + 1e-12)


class TestBackward:
    def test_zero_dlogits_gives_zero_grads(self, small_model):
        x = np.random.default_rng(5).normal(size=(4, 6))
        logits, trace = nn.forward(small_model.net, x, small_model.states)
        grads = nn.backward(small_model.net, trace, np.zeros_like(logits))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_scalar_chain_hand_derivative(self):
        # y = a*x with a=2, x=1; loss = y^2 so dL/da = 2*y*x = 4
        net = nn.Network(layers=[nn.Dense(np.array([[2.0]]), np.zeros(1))], kc=1)
        y, trace = nn.forward(net, np.array([[1.0]]), [])
        dlogits = 2.0 * y
        grads = nn.backward(net, trace, dlogits)
        assert abs(grads["dense0.weights"][0, 0] - 4.0) < 1e-12

    @pytest.mark.parametrize("seed", range(6))
    def test_gradcheck_all_params(self, seed):
        rng = np.random.default_rng(100 + seed)
        model = nn.build_mlp(4, (5,), 3, seed=seed)
        for st in model.states:  # non-trivial stats and affines
            st.mean = rng.normal(size=st.channels) * 0.3
            st.var = rng.uniform(0.5, 2.0, size=st.channels)
            st.scale = rng.uniform(0.5, 1.5, size=st.channels)
            st.shift = rng.normal(size=st.channels) * 0.2
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 3, size=6)
        targets = nn.onehot(y, 3)
        params = nn.dense_params(model.net) | nn.affine_params(model.states)

        def loss_fn():
            logits, _ = nn.forward(model.net, x, model.states, mode="eval")
            return float(nn.cross_entropy(nn.softmax(logits), targets).mean())

        logits, trace = nn.forward(model.net, x, model.states, mode="eval")
        probs = nn.softmax(logits)
        analytic = nn.backward(model.net, trace, (probs - targets) / len(x),
                               trainable="all")
        numeric = finite_diff_grads(loss_fn, params)
        assert max_rel_err(analytic, numeric) < 1e-4

    def test_norm_affines_only_excludes_dense(self, small_model):
        x = np.random.default_rng(6).normal(size=(4, 6))
        logits, trace = nn.forward(small_model.net, x, small_model.states)
        grads = nn.backward(small_model.net, trace, np.ones_like(logits),
                            trainable="norm_affines")
        assert all(k.startswith("norm") for k in grads)
        assert any(k.endswith(".scale") for k in grads)


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        p = {"w": np.array([1.0, -2.0])}
        before = p["w"].copy()
        nn.adam_step(nn.AdamState(), p, {"w": np.zeros(2)})
        assert np.array_equal(p["w"], before)

    def test_first_step_closed_form(self):
        p = {"w": np.array([0.5])}
        nn.adam_step(nn.AdamState(lr=1e-3), p, {"w": np.array([1.0])})
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert abs((0.5 - p["w"][0]) - 1e-3 / (1.0 + 1e-8)) < 1e-15

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            p = {"w": np.arange(4.0)}
            st = nn.AdamState(lr=1e-2)
            for _ in range(20):
                nn.adam_step(st, p, {"w": rng.normal(size=4)})
            return p["w"]

        assert np.array_equal(run(), run())

    def test_non_finite_gradient_rejected(self):
        p = {"w": np.array([1.0])}
        st = nn.AdamState()
        with pytest.raises(DivergenceError):
            nn.adam_step(st, p, {"w": np.array([np.nan])})
        assert p["w"][0] == 1.0
        assert st.t == 0


class TestPretrain:
    def _blobs(self, seed=0, n=400):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(n, 2)) + np.array([4.0, 0.0])
        x1 = rng.normal(size=(n, 2)) + np.array([-4.0, 0.0])
        x = np.vstack([x0, x1])
        y = np.repeat([0, 1], n)
        return x, y

    def test_separable_blobs_high_accuracy(self):
        x, y = self._blobs()
        model = nn.build_mlp(2, (8,), 2, seed=1)
        acc = nn.pretrain(model, x, y, epochs=20, lr=1e-2, seed=1)
        assert acc >= 0.99
        # independent oracle: nearest centroid separates the same data
        mu0, mu1 = x[y == 0].mean(0), x[y == 1].mean(0)
        d0 = ((x - mu0) ** 2).sum(1)
        d1 = ((x - mu1) ** 2).sum(1)
        oracle_acc = ((d1 < d0).astype(int) == y).mean()
        assert oracle_acc >= 0.99

    def test_zero_epochs_leaves_model_unchanged(self):
        x, y = self._blobs(seed=2)
        model = nn.build_mlp(2, (8,), 2, seed=3)
        w_before = [l.weights.copy() for l in model.net.layers
                    if isinstance(l, nn.Dense)]
        nn.pretrain(model, x, y, epochs=0, lr=1e-2, seed=3)
        w_after = [l.weights for l in model.net.layers if isinstance(l, nn.Dense)]
        for wb, wa in zip(w_before, w_after):
            assert np.array_equal(wb, wa)

    def test_fixed_seed_reproducible(self):
        x, y = self._blobs(seed=4)

        def train():
            model = nn.build_mlp(2, (8,), 2, seed=5)
            nn.pretrain(model, x, y, epochs=5, lr=1e-2, seed=5)
            return np.concatenate([l.weights.ravel() for l in model.net.layers
                                   if isinstance(l, nn.Dense)])

        assert np.array_equal(train(), train())

    def test_empty_dataset_rejected(self):
        model = nn.build_mlp(2, (4,), 2, seed=0)
        with pytest.raises(ConfigError):
            nn.pretrain(model, np.zeros((0, 2)), np.zeros(0, dtype=int),
                        epochs=1, lr=1e-3, seed=0)

    def test_label_out_of_range_rejected(self):
        model = nn.build_mlp(2, (4,), 2, seed=0)
        with pytest.raises(ConfigError):
            nn.pretrain(model, np.zeros((4, 2)), np.array([0, 1, 2, 0]),
                        epochs=1, lr=1e-3, seed=0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(small_model, path)
        loaded = nn.load_checkpoint(path)
        assert loaded.net.kc == small_model.net.kc
        for la, lb in zip(small_model.net.layers, loaded.net.layers):
            assert type(la) is type(lb)
            if isinstance(la, nn.Dense):
                assert np.array_equal(la.weights, lb.weights)
                assert np.array_equal(la.bias, lb.bias)
        for sa, sb in zip(small_model.states, loaded.states):
            for attr in ("mean", "var", "scale", "shift"):
                assert np.array_equal(getattr(sa, attr), getattr(sb, attr))

    def test_save_is_deterministic(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nn.save_checkpoint(small_model, p1)
        nn.save_checkpoint(small_model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ConfigError):
            nn.load_checkpoint(path)

    def test_magic_is_spec_string(self, small_model, tmp_path):
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(small_model, path)
        assert path.read_bytes()[:8] == b"TRIBEKIT"
