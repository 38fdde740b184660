"""Numerical-core tests: cell math, gradients, dropout, loss, Adam, kernels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import edgepop.nn as nn
from edgepop.nn import kernels


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def make_cell(hidden, width, seed):
    return nn.init_lstm_weights(hidden, width, np.random.default_rng(seed))


def scalar_cell_reference(x, y_prev, c_prev, w):
    """Pure-scalar evaluation of the gated update, independent of the
    vectorized implementation."""
    import math

    h = w.hidden
    z = list(y_prev) + list(x)
    out_y = []
    out_c = []
    for j in range(h):
        af = math.fsum(w.W_f[j, k] * z[k] for k in range(len(z))) + w.b_f[j]
        ai = math.fsum(w.W_i[j, k] * z[k] for k in range(len(z))) + w.b_i[j]
        ac = math.fsum(w.W_C[j, k] * z[k] for k in range(len(z))) + w.b_C[j]
        ao = math.fsum(w.W_o[j, k] * z[k] for k in range(len(z))) + w.b_o[j]
        f = 1.0 / (1.0 + math.exp(-af))
        i = 1.0 / (1.0 + math.exp(-ai))
        g = math.tanh(ac)
        o = 1.0 / (1.0 + math.exp(-ao))
        c = f * c_prev[j] + i * g
        out_c.append(c)
        out_y.append(o * math.tanh(c))
    return np.array(out_y), np.array(out_c)


class TestCellForward:
    def test_zero_everything(self):
        w = nn.LstmCellWeights(np.zeros((8, 5)), np.zeros(8))
        state, _ = nn.lstm_cell_forward(np.zeros(3), nn.LstmState(np.zeros(2), np.zeros(2)), w)
        np.testing.assert_array_equal(state.y, 0.0)
        np.testing.assert_array_equal(state.C, 0.0)

    def test_zero_weights_halve_memory(self):
        # All gates sit at 1/2, the candidate at 0: C' = c/2, y' = tanh(c/2)/2.
        w = nn.LstmCellWeights(np.zeros((12, 7)), np.zeros(12))
        c = np.array([0.4, -1.2, 2.0])
        state, _ = nn.lstm_cell_forward(
            np.ones(4), nn.LstmState(np.zeros(3), c), w
        )
        np.testing.assert_allclose(state.C, 0.5 * c, rtol=1e-12)
        np.testing.assert_allclose(state.y, 0.5 * np.tanh(0.5 * c), rtol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(10)
        w = make_cell(5, 4, seed=1)
        x = rng.normal(size=4)
        prev = nn.LstmState(rng.normal(size=5), rng.normal(size=5))
        state, _ = nn.lstm_cell_forward(x, prev, w)
        ref_y, ref_c = scalar_cell_reference(x, prev.y, prev.C, w)
        np.testing.assert_allclose(state.y, ref_y, atol=1e-12)
        np.testing.assert_allclose(state.C, ref_c, atol=1e-12)

    def test_gate_views_alias_packed_storage(self):
        w = make_cell(3, 2, seed=0)
        w.W_f[0, 0] = 123.0
        assert w.w[0, 0] == 123.0
        w.b_o[-1] = -7.0
        assert w.b[-1] == -7.0

    def test_dimension_mismatch(self):
        w = make_cell(3, 2, seed=0)
        with pytest.raises(ValueError):
            nn.lstm_cell_forward(np.zeros(5), nn.LstmState(np.zeros(3), np.zeros(3)), w)


class TestCellBackward:
    def test_zero_upstream_gives_zero(self):
        w = make_cell(4, 3, seed=2)
        rng = np.random.default_rng(0)
        state, cache = nn.lstm_cell_forward(
            rng.normal(size=3), nn.LstmState(rng.normal(size=4), rng.normal(size=4)), w
        )
        grads, dx, dprev = nn.lstm_cell_backward(cache, np.zeros(4), np.zeros(4))
        assert np.all(grads.w == 0.0) and np.all(grads.b == 0.0)
        assert np.all(dx == 0.0)
        assert np.all(dprev.y == 0.0) and np.all(dprev.C == 0.0)

    def test_every_coordinate_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = make_cell(4, 3, seed=3)
        x = rng.normal(size=3)
        prev = nn.LstmState(rng.normal(size=4), rng.normal(size=4))
        proj_y = rng.normal(size=4)
        proj_c = rng.normal(size=4)

        def loss(wf, bf, xf, yf, cf):
            ww = nn.LstmCellWeights(wf.reshape(w.w.shape), bf)
            state, _ = nn.lstm_cell_forward(xf, nn.LstmState(yf, cf), ww)
            return float(proj_y @ state.y + proj_c @ state.C)

        _, cache = nn.lstm_cell_forward(x, prev, w)
        grads, dx, dprev = nn.lstm_cell_backward(cache, proj_y, proj_c)
        h = 1e-5
        packs = [
            (w.w.ravel().copy(), grads.w.ravel(), 0),
            (w.b.copy(), grads.b, 1),
            (x.copy(), dx, 2),
            (prev.y.copy(), dprev.y, 3),
            (prev.C.copy(), dprev.C, 4),
        ]
        base = [w.w.ravel().copy(), w.b.copy(), x.copy(), prev.y.copy(), prev.C.copy()]
        for vec, analytic, slot in packs:
            for idx in range(vec.size):
                args_p = [a.copy() for a in base]
                args_m = [a.copy() for a in base]
                args_p[slot][idx] += h
                args_m[slot][idx] -= h
                num = (loss(*args_p) - loss(*args_m)) / (2 * h)
                assert rel_err(num, analytic[idx]) < 1e-4

    def test_directional_derivative_of_squared_output(self):
        # d/de 0.5*||y(x + e v)||^2 at e=0 must equal dx . v.
        rng = np.random.default_rng(4)
        w = make_cell(5, 4, seed=5)
        x = rng.normal(size=4)
        prev = nn.LstmState(rng.normal(size=5), rng.normal(size=5))
        state, cache = nn.lstm_cell_forward(x, prev, w)
        _, dx, _ = nn.lstm_cell_backward(cache, state.y, np.zeros(5))
        v = rng.normal(size=4)
        h = 1e-6

        def half_sq(xv):
            s, _ = nn.lstm_cell_forward(xv, prev, w)
            return 0.5 * float(s.y @ s.y)

        num = (half_sq(x + h * v) - half_sq(x - h * v)) / (2 * h)
        assert abs(num - float(dx @ v)) < 1e-6


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(10, 10))
        out, mask = nn.dropout_forward(x, 0.0, True, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x)
        np.testing.assert_array_equal(mask, 1.0)

    def test_inference_identity(self):
        x = np.random.default_rng(0).normal(size=(10, 10))
        out, _ = nn.dropout_forward(x, 0.35, False)
        np.testing.assert_array_equal(out, x)

    def test_zero_fraction_and_mean(self):
        rng = np.random.default_rng(123)
        x = np.ones(1_000_000)
        out, _ = nn.dropout_forward(x, 0.35, True, rng)
        zero_frac = np.mean(out == 0.0)
        assert abs(zero_frac - 0.35) < 0.005
        assert abs(out.mean() - 1.0) < 0.01

    def test_rejects_rate_one(self):
        with pytest.raises(ValueError):
            nn.dropout_forward(np.ones(3), 1.0, True, np.random.default_rng(0))


class TestMseLoss:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        loss, grad = nn.mse_loss(x, x)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_hand_arithmetic(self):
        loss, grad = nn.mse_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        assert loss == pytest.approx(0.5)
        np.testing.assert_allclose(grad, [1.0, 0.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=6)
        target = rng.normal(size=6)
        _, grad = nn.mse_loss(pred, target)
        h = 1e-6
        for i in range(6):
            p = pred.copy()
            p[i] += h
            lp, _ = nn.mse_loss(p, target)
            p[i] -= 2 * h
            lm, _ = nn.mse_loss(p, target)
            assert abs((lp - lm) / (2 * h) - grad[i]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.mse_loss(np.zeros(3), np.zeros(4))


class TestSoftmax:
    def test_zeros_give_uniform(self):
        np.testing.assert_allclose(nn.softmax(np.zeros(8)), 1 / 8)

    def test_hand_case(self):
        v = np.log([1.0, 2.0, 3.0])
        np.testing.assert_allclose(nn.softmax(v), [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=9999),
        shift=st.floats(min_value=-100, max_value=100),
    )
    def test_shift_invariance_and_normalization(self, seed, shift):
        v = np.random.default_rng(seed).normal(size=7) * 5
        a = nn.softmax(v)
        b = nn.softmax(v + shift)
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-12
        assert np.all(a >= 0.0)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0]), np.array([[3.0]])]
        state = nn.AdamState.for_params(p)
        before = [a.copy() for a in p]
        nn.adam_step(p, [np.zeros_like(a) for a in p], state, lr=0.1)
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)
        assert state.step_count == 1

    def test_first_step_magnitude_is_lr(self):
        for g in (0.5, -3.0, 100.0):
            p = [np.array([0.0])]
            state = nn.AdamState.for_params(p)
            nn.adam_step(p, [np.array([g])], state, lr=1e-2)
            assert abs(abs(p[0][0]) - 1e-2) < 1e-3 * 1e-2
            assert np.sign(p[0][0]) == -np.sign(g)

    def test_constant_gradient_descends_monotonically(self):
        p = [np.array([5.0])]
        state = nn.AdamState.for_params(p)
        values = [p[0][0]]
        for _ in range(1000):
            nn.adam_step(p, [np.array([1.0])], state, lr=1e-3)
            values.append(p[0][0])
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_clip_bounds_update(self):
        g = [np.full(4, 100.0)]
        clipped = nn.clip_gradients(g, 1.0)
        assert np.sqrt(sum(float(np.sum(c * c)) for c in clipped)) <= 1.0 + 1e-12


class TestSequenceKernels:
    def test_matches_manual_cell_unrolling(self):
        rng = np.random.default_rng(6)
        w = make_cell(5, 3, seed=7)
        seq = rng.normal(size=(9, 3))
        y, _ = kernels.seq_forward(w.w, w.b, seq[:, None, :])
        state = nn.LstmState(np.zeros(5), np.zeros(5))
        for t in range(9):
            state, _ = nn.lstm_cell_forward(seq[t], state, w)
            np.testing.assert_allclose(y[t, 0], state.y, atol=1e-12)

    def test_batch_columns_are_independent(self):
        rng = np.random.default_rng(8)
        w = make_cell(4, 2, seed=9)
        x = rng.normal(size=(5, 3, 2))
        y_all, _ = kernels.seq_forward(w.w, w.b, x)
        for b in range(3):
            y_one, _ = kernels.seq_forward(w.w, w.b, x[:, b : b + 1, :])
            np.testing.assert_allclose(y_all[:, b], y_one[:, 0], atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        w = make_cell(3, 2, seed=11)
        x = rng.normal(size=(4, 2, 2))
        proj = rng.normal(size=(4, 2, 3))

        def loss(wm, bv, xv):
            y, _ = kernels.seq_forward(wm, bv, xv)
            return float(np.sum(y * proj))

        y, cache = kernels.seq_forward(w.w, w.b, x)
        dw, db, dx = kernels.seq_backward(w.w, x, cache, proj)
        h = 1e-5
        for arr, grad in ((w.w, dw), (w.b, db), (x, dx)):
            flat = arr.ravel()
            gflat = grad.ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = loss(w.w, w.b, x)
                flat[idx] = orig - h
                lm = loss(w.w, w.b, x)
                flat[idx] = orig
                assert rel_err((lp - lm) / (2 * h), gflat[idx]) < 1e-4

    def test_python_backend_available(self, monkeypatch):
        # The fallback loop must agree with whichever backend is active.
        rng = np.random.default_rng(12)
        w = make_cell(6, 4, seed=13)
        x = rng.normal(size=(7, 3, 4))
        y_active, cache_active = kernels.seq_forward(w.w, w.b, x)
        dy = rng.normal(size=y_active.shape)
        grads_active = kernels.seq_backward(w.w, x, cache_active, dy)
        monkeypatch.setattr(kernels, "_cy", None)
        y_py, cache_py = kernels.seq_forward(w.w, w.b, x)
        grads_py = kernels.seq_backward(w.w, x, cache_py, dy)
        np.testing.assert_allclose(y_active, y_py, atol=1e-12)
        for a, b in zip(grads_active, grads_py):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestDenseLayers:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(20)
        layer = nn.init_dense_layer(3, 4, rng)
        x = rng.normal(size=(2, 4))
        proj = rng.normal(size=(2, 3))
        for act in ("tanh", "linear"):
            out, cache = nn.dense_forward(x, layer, act)
            dw, db, dx = nn.dense_backward(cache, proj)
            h = 1e-6

            def loss():
                o, _ = nn.dense_forward(x, layer, act)
                return float(np.sum(o * proj))

            for arr, grad in ((layer.w, dw), (layer.b, db), (x, dx)):
                flat = arr.ravel()
                gflat = grad.ravel()
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    lp = loss()
                    flat[idx] = orig - h
                    lm = loss()
                    flat[idx] = orig
                    assert rel_err((lp - lm) / (2 * h), gflat[idx], floor=1e-6) < 1e-4
