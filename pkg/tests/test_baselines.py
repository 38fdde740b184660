"""Comparison-method tests: self-train, dense federated AEs, centralized."""

import numpy as np
import pytest

import edgepop.nn as nn
from edgepop import baselines, fed, metrics
from edgepop.baselines import (
    BaselineKind,
    BaselineSpec,
    DenseClient,
    DenseParams,
    dense_ae_forward_backward,
    dense_predict,
    init_dense_model,
    pool_windows,
    run_centralized,
    run_dense_fl,
    run_self_train,
)
from edgepop.model import LayerSpec, init_model

from test_fed import make_client


def make_dense_client(uid, seed, kind=BaselineKind.SDAEFL, window=4, n=4):
    spec = BaselineSpec(kind, window, LayerSpec(n, (6, n)))
    params = init_dense_model(spec, np.random.default_rng(1000 + seed))
    rng = np.random.default_rng(seed)
    data = rng.random(size=(20, spec.flat_width))
    return DenseClient(
        user_id=uid,
        params=params,
        dataset=data,
        opt=nn.AdamState.for_params(params.arrays()),
        rng_data=np.random.default_rng(2000 + seed),
        rng_dropout=np.random.default_rng(3000 + seed),
        dropout_rate=0.1,
    ), spec


class TestArchitectures:
    def test_single_dense_has_one_layer_each(self):
        spec = BaselineSpec(BaselineKind.SDAEFL, 10, LayerSpec(24, (128, 64, 24)))
        assert spec.dense_encoder_widths() == (24,)
        assert spec.dense_decoder_widths() == (11 * 24,)

    def test_deep_dense_matches_recurrent_depth(self):
        lspec = LayerSpec(24, (128, 64, 24))
        spec = BaselineSpec(BaselineKind.DDAEFL, 10, lspec)
        assert len(spec.dense_encoder_widths()) == len(lspec.encoder_widths)
        assert spec.dense_encoder_widths() == (128, 64, 24)
        assert spec.dense_decoder_widths() == (64, 128, 11 * 24)

    def test_parameter_count_ordering(self):
        # Single dense < deep dense < recurrent, for the default plan.
        lspec = LayerSpec(24, (128, 64, 24))
        sd = init_dense_model(
            BaselineSpec(BaselineKind.SDAEFL, 10, lspec), np.random.default_rng(0)
        )
        dd = init_dense_model(
            BaselineSpec(BaselineKind.DDAEFL, 10, lspec), np.random.default_rng(0)
        )
        recurrent = init_model(lspec, np.random.default_rng(0))
        assert sd.param_count() < dd.param_count() < recurrent.param_count()

    def test_centralized_shapes_equal_recurrent_shapes(self):
        lspec = LayerSpec(12, (16, 8, 12))
        a = init_model(lspec, np.random.default_rng(0))
        b = init_model(lspec, np.random.default_rng(99))
        assert [x.shape for x in a.arrays()] == [x.shape for x in b.arrays()]


class TestDenseModel:
    def test_zero_weight_encoder_predicts_uniform(self):
        client, spec = make_dense_client(1, seed=0)
        for arr in client.params.arrays():
            arr[:] = 0.0
        pred = dense_predict(client.params.encoder, np.zeros(spec.flat_width))
        np.testing.assert_allclose(pred, 0.25)

    def test_gradients_match_finite_differences(self):
        client, spec = make_dense_client(1, seed=1, kind=BaselineKind.DDAEFL, window=2, n=3)
        batch = np.random.default_rng(2).random(size=(2, spec.flat_width))
        loss, grads = dense_ae_forward_backward(client.params, batch, False, None, 0.0)
        arrays = client.params.arrays()
        h = 1e-5
        rng = np.random.default_rng(3)
        for arr, grad in zip(arrays, grads):
            flat = arr.ravel()
            gflat = grad.ravel()
            for idx in rng.choice(flat.size, size=min(25, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp, _ = dense_ae_forward_backward(client.params, batch, False, None, 0.0)
                flat[idx] = orig - h
                lm, _ = dense_ae_forward_backward(client.params, batch, False, None, 0.0)
                flat[idx] = orig
                num = (lp - lm) / (2 * h)
                err = abs(num - gflat[idx]) / max(abs(num), abs(gflat[idx]), 1e-6)
                assert err < 1e-4

    def test_aggregating_identical_params_is_identity(self):
        client, _ = make_dense_client(1, seed=4)
        copies = [client.params.clone() for _ in range(3)]
        agg, _ = fed.fedavg_aggregate(copies)
        for a, b in zip(agg.arrays(), client.params.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_training_reduces_loss(self):
        client, _ = make_dense_client(1, seed=5)
        first = client.run_local_round(1, 8, 1e-2)
        for _ in range(30):
            last = client.run_local_round(1, 8, 1e-2)
        assert last < first


class TestSelfTrain:
    def test_zero_rounds_keeps_params(self):
        clients = [make_client(1, seed=1)]
        before = [a.copy() for a in clients[0].params.arrays()]
        reports = run_self_train(clients, 0, 4, 2, 1e-3)
        assert reports == []
        for a, b in zip(clients[0].params.arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_identical_to_loop_with_aggregation_disabled(self):
        a = [make_client(i, seed=i) for i in (1, 2)]
        b = [make_client(i, seed=i) for i in (1, 2)]
        rep_a = run_self_train(a, 3, 2, 4, 1e-3)
        rep_b = fed.run_training(b, None, 3, 2, 4, 1e-3)
        assert [r.avg_losses for r in rep_a] == [r.avg_losses for r in rep_b]
        for ca, cb in zip(a, b):
            for x, y in zip(ca.params.arrays(), cb.params.arrays()):
                np.testing.assert_array_equal(x, y)


class TestDenseFl:
    def test_loop_synchronizes_dense_clients(self):
        clients = [make_dense_client(i, seed=i)[0] for i in (1, 2)]
        reports = run_dense_fl(clients, 2, 2, 4, 1e-3)
        assert len(reports) == 2
        for a, b in zip(clients[0].params.arrays(), clients[1].params.arrays()):
            np.testing.assert_array_equal(a, b)


class TestCentralized:
    def test_pooled_dataset_size_is_sum(self):
        sets = [np.zeros((5, 3, 2)), np.zeros((7, 3, 2)), np.zeros((2, 3, 2))]
        assert pool_windows(sets).shape[0] == 14

    def test_zero_rounds_untrained_uniform(self):
        spec = LayerSpec(4, (6, 4))
        params = init_model(spec, np.random.default_rng(0))
        for arr in params.arrays():
            arr[:] = 0.0
        pooled = np.zeros((10, 5, 4))
        reports, central = run_centralized(
            pooled,
            params,
            0,
            4,
            2,
            1e-3,
            rng_data=np.random.default_rng(1),
            rng_dropout=np.random.default_rng(2),
        )
        assert reports == []
        from edgepop.model import predict_popularity

        pv = predict_popularity(central.params.encoder, np.zeros((3, 4)))
        np.testing.assert_allclose(pv.probs, 0.25)


class TestSharedMetricPath:
    def test_every_hook_scores_through_the_same_function(self):
        # One fixture scored by hand must equal what each eval path reports.
        from edgepop import experiments
        from edgepop.config import ExperimentConfig

        cfg = ExperimentConfig(
            n_contents=4,
            n_users=2,
            window=3,
            local_epochs=2,
            samples=16,
            batch=4,
            rounds=1,
            widths=(5, 4),
            slots=120,
            eval_slots=40,
            eval_windows=8,
            seed=3,
        )
        profiles = experiments.make_profiles(cfg)
        traces = experiments.make_traces(cfg, profiles)
        eval_data = experiments.build_eval_data(cfg, profiles, traces)

        clients, _ = experiments.build_clients(cfg, traces)
        hooks = experiments.lstm_eval_hooks(eval_data)
        from edgepop.model import predict_popularity_batch

        got = hooks.local(clients[0])
        preds = predict_popularity_batch(
            clients[0].params.encoder, eval_data.local_inputs[0]
        )
        assert got == metrics.mean_rmse(preds, eval_data.local_targets[0])

        dclients, _ = experiments.build_dense_clients(cfg, traces, BaselineKind.SDAEFL)
        dhooks = experiments.dense_eval_hooks(eval_data)
        got = dhooks.local(dclients[0])
        dpreds = dense_predict(dclients[0].params.encoder, eval_data.local_flat[0])
        assert got == metrics.mean_rmse(dpreds, eval_data.local_targets[0])
