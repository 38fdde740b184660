"""Auto-encoder tests: stacking, training step, prediction head, checkpoints."""

import numpy as np
import pytest

import edgepop.nn as nn
from edgepop.model import (
    LayerSpec,
    ModelParams,
    autoencode_loss_and_grads,
    decode_sequence,
    encode_requests,
    encode_sequence,
    init_model,
    load_encoder,
    load_model,
    predict_popularity,
    predict_popularity_batch,
    reconstruction_step,
    save_encoder,
    save_model,
)


def tiny_model(n=4, widths=(6, 4), seed=0):
    spec = LayerSpec(n, widths)
    return spec, init_model(spec, np.random.default_rng(seed))


def zero_model(spec):
    params = init_model(spec, np.random.default_rng(0))
    for arr in params.arrays():
        arr[:] = 0.0
    return params


class TestLayerSpec:
    def test_decoder_mirrors_encoder(self):
        spec = LayerSpec(12, (16, 8, 12))
        assert spec.decoder_widths == (8, 16, 12)

    def test_two_layer_mirror(self):
        spec = LayerSpec(4, (8, 4))
        assert spec.decoder_widths == (8, 4)

    def test_single_layer(self):
        spec = LayerSpec(5, (5,))
        assert spec.decoder_widths == (5,)

    def test_rejects_head_width_mismatch(self):
        with pytest.raises(ValueError):
            LayerSpec(12, (16, 8))


class TestEncodeRequests:
    def test_silent_slot(self):
        np.testing.assert_array_equal(encode_requests([None], 3), [[0, 0, 0]])

    def test_single_request(self):
        np.testing.assert_array_equal(encode_requests([2], 3), [[0, 1, 0]])

    def test_mixed_window(self):
        got = encode_requests([1, None, 3], 3)
        np.testing.assert_array_equal(got, [[1, 0, 0], [0, 0, 0], [0, 0, 1]])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            encode_requests([4], 3)
        with pytest.raises(ValueError):
            encode_requests([], 3)


class TestEncodeDecode:
    def test_zero_weights_zero_output(self):
        spec = LayerSpec(4, (6, 4))
        params = zero_model(spec)
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(encode_sequence(params.encoder, x), 0.0)
        z = np.random.default_rng(1).normal(size=(5, 4))
        np.testing.assert_array_equal(decode_sequence(params.decoder, z), 0.0)

    def test_length_one_equals_single_stacked_step(self):
        spec, params = tiny_model()
        x = np.random.default_rng(2).normal(size=(1, 4))
        out = encode_sequence(params.encoder, x)
        h = x[0]
        for layer in params.encoder:
            state = nn.LstmState(np.zeros(layer.hidden), np.zeros(layer.hidden))
            state, _ = nn.lstm_cell_forward(h, state, layer)
            h = state.y
        np.testing.assert_allclose(out[0], h, atol=1e-12)

    def test_encoder_matches_manual_unrolling(self):
        spec, params = tiny_model(n=3, widths=(5, 3), seed=4)
        x = np.random.default_rng(5).normal(size=(7, 3))
        out = encode_sequence(params.encoder, x)
        seq = x
        for layer in params.encoder:
            state = nn.LstmState(np.zeros(layer.hidden), np.zeros(layer.hidden))
            next_seq = []
            for t in range(seq.shape[0]):
                state, _ = nn.lstm_cell_forward(seq[t], state, layer)
                next_seq.append(state.y)
            seq = np.stack(next_seq)
        np.testing.assert_allclose(out, seq, atol=1e-12)

    def test_decoder_matches_manual_unrolling(self):
        spec, params = tiny_model(n=3, widths=(5, 3), seed=6)
        z = np.random.default_rng(7).normal(size=(6, 3))
        out = decode_sequence(params.decoder, z)
        seq = z
        for layer in params.decoder:
            state = nn.LstmState(np.zeros(layer.hidden), np.zeros(layer.hidden))
            next_seq = []
            for t in range(seq.shape[0]):
                state, _ = nn.lstm_cell_forward(seq[t], state, layer)
                next_seq.append(state.y)
            seq = np.stack(next_seq)
        np.testing.assert_allclose(out, seq, atol=1e-12)

    @pytest.mark.parametrize("length", [1, 10, 11])
    def test_reconstruction_preserves_length_and_width(self, length):
        spec, params = tiny_model()
        x = np.random.default_rng(8).normal(size=(length, 4))
        z = encode_sequence(params.encoder, x)
        recon = decode_sequence(params.decoder, z)
        assert recon.shape == (length, 4)

    def test_variable_length_same_weights(self):
        # The same encoder must accept both the per-user window length and
        # the per-slot user count without any reshaping.
        spec, params = tiny_model()
        for length in (11, 3):
            out = encode_sequence(params.encoder, np.zeros((length, 4)))
            assert out.shape == (length, 4)


class TestPredictPopularity:
    def test_zero_weights_uniform(self):
        spec = LayerSpec(6, (4, 6))
        params = zero_model(spec)
        pv = predict_popularity(params.encoder, np.zeros((5, 6)))
        np.testing.assert_allclose(pv.probs, 1 / 6)

    def test_deterministic_and_normalized(self):
        spec, params = tiny_model()
        x = encode_requests([1, 3, None, 2], 4)
        a = predict_popularity(params.encoder, x)
        b = predict_popularity(params.encoder, x)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert abs(a.probs.sum() - 1.0) < 1e-9

    def test_batch_head_matches_single(self):
        spec, params = tiny_model()
        rng = np.random.default_rng(9)
        batch = rng.normal(size=(5, 3, 4))
        preds = predict_popularity_batch(params.encoder, batch)
        for b in range(3):
            single = predict_popularity(params.encoder, batch[:, b, :])
            np.testing.assert_allclose(preds[b], single.probs, atol=1e-12)


class TestReconstructionStep:
    def test_zero_batch_zero_model_is_fixed_point(self):
        spec = LayerSpec(4, (6, 4))
        params = zero_model(spec)
        opt = nn.AdamState.for_params(params.arrays())
        batch = np.zeros((3, 2, 4))
        before = [a.copy() for a in params.arrays()]
        _, loss = reconstruction_step(params, batch, opt, lr=0.1)
        assert loss == 0.0
        for a, b in zip(params.arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_loss_halves_on_tiny_dataset(self):
        # 200 steps on a fixed tiny dataset must cut the loss by half.
        rng = np.random.default_rng(12)
        spec, params = tiny_model(n=4, widths=(8, 4), seed=13)
        windows = rng.integers(0, 5, size=(16, 4))  # ids 0 (silent) .. 4
        data = np.zeros((16, 4, 4))
        for s in range(16):
            for t in range(4):
                if windows[s, t] > 0:
                    data[s, t, windows[s, t] - 1] = 1.0
        opt = nn.AdamState.for_params(params.arrays())
        first = None
        for step in range(200):
            idx = rng.integers(0, 16, size=8)
            batch = data[idx].transpose(1, 0, 2)
            _, loss = reconstruction_step(params, batch, opt, lr=1e-2)
            if first is None:
                first = loss
        assert loss < 0.5 * first

    def test_full_model_gradients_match_finite_differences(self):
        rng = np.random.default_rng(14)
        spec, params = tiny_model(n=3, widths=(4, 3), seed=15)
        batch = rng.random(size=(4, 2, 3))
        loss, grads = autoencode_loss_and_grads(params, batch, training=False)
        arrays = params.arrays()
        h = 1e-5
        checked = 0
        for arr, grad in zip(arrays, grads):
            flat = arr.ravel()
            gflat = grad.ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                lp, _ = autoencode_loss_and_grads(params, batch, training=False)
                flat[idx] = orig - h
                lm, _ = autoencode_loss_and_grads(params, batch, training=False)
                flat[idx] = orig
                num = (lp - lm) / (2 * h)
                # Floor the denominator: coordinates with ~1e-12 gradients
                # sit below central-difference roundoff (eps*loss/h ~ 1e-11)
                # but must still agree to 1e-10 absolutely.
                err = abs(num - gflat[idx]) / max(abs(num), abs(gflat[idx]), 1e-6)
                assert err < 1e-4
                checked += 1
        assert checked == sum(a.size for a in arrays)

    def test_dropout_training_uses_rng_and_inference_ignores_it(self):
        spec, params = tiny_model(n=4, widths=(6, 4), seed=16)
        batch = np.random.default_rng(17).random(size=(5, 2, 4))
        l1, _ = autoencode_loss_and_grads(
            params, batch, training=True, rng=np.random.default_rng(1), dropout_rate=0.5
        )
        l2, _ = autoencode_loss_and_grads(
            params, batch, training=True, rng=np.random.default_rng(2), dropout_rate=0.5
        )
        assert l1 != l2
        l3, _ = autoencode_loss_and_grads(params, batch, training=False)
        l4, _ = autoencode_loss_and_grads(params, batch, training=False)
        assert l3 == l4


class TestStructure:
    def test_clients_share_parameter_count(self):
        spec = LayerSpec(12, (16, 8, 12))
        counts = {
            init_model(spec, np.random.default_rng(seed)).param_count()
            for seed in range(4)
        }
        assert len(counts) == 1

    def test_count_matches_shape_formula(self):
        spec = LayerSpec(12, (16, 8, 12))
        params = init_model(spec, np.random.default_rng(0))
        expected = 0
        for hid, inp in spec.encoder_layer_io() + spec.decoder_layer_io():
            expected += 4 * hid * (hid + inp) + 4 * hid
        assert params.param_count() == expected


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, tmp_path):
        spec, params = tiny_model(seed=21)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(p1, spec, params, seed=9)
        spec2, params2, meta = load_model(p1)
        save_model(p2, spec2, params2, int(meta["seed"]))
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_params_exact(self, tmp_path):
        spec, params = tiny_model(seed=22)
        path = tmp_path / "m.ckpt"
        save_model(path, spec, params, seed=0)
        _, loaded, _ = load_model(path)
        for a, b in zip(params.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_encoder_only_round_trip(self, tmp_path):
        spec, params = tiny_model(seed=23)
        path = tmp_path / "enc.ckpt"
        save_encoder(path, spec, params.encoder, seed=5)
        spec2, encoder, _ = load_encoder(path)
        assert spec2.encoder_widths == spec.encoder_widths
        for a, b in zip(params.encoder, encoder):
            np.testing.assert_array_equal(a.w, b.w)
            np.testing.assert_array_equal(a.b, b.b)

    def test_full_model_loads_as_encoder(self, tmp_path):
        spec, params = tiny_model(seed=24)
        path = tmp_path / "m.ckpt"
        save_model(path, spec, params, seed=0)
        _, encoder, _ = load_encoder(path)
        np.testing.assert_array_equal(encoder[0].w, params.encoder[0].w)
