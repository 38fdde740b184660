"""Comparison methods sharing the federated harness and metrics.

* self-train: every client trains alone, no aggregation at all.
* single/deep dense AE under the same federated loop, consuming the
  flattened request window instead of a sequence.
* centralized recurrent AE trained on all users' pooled windows, which
  deliberately gives up the privacy boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import fed
from .model import LayerSpec, ModelParams
from .nn import (
    AdamState,
    DenseLayer,
    adam_step,
    as_tensor,
    dense_backward,
    dense_forward,
    init_dense_layer,
    mse_loss,
    softmax,
)


class BaselineKind(Enum):
    SELF_TRAIN = "selftrain"
    SDAEFL = "sdaefl"
    DDAEFL = "ddaefl"
    DRAEL = "drael"


@dataclass(frozen=True)
class BaselineSpec:
    """Architecture plan of one comparison method."""

    kind: BaselineKind
    window: int
    layer_spec: LayerSpec  # the recurrent plan the experiment uses

    @property
    def flat_width(self) -> int:
        return (self.window + 1) * self.layer_spec.input_width

    def dense_encoder_widths(self) -> tuple[int, ...]:
        n = self.layer_spec.input_width
        if self.kind is BaselineKind.SDAEFL:
            return (n,)
        if self.kind is BaselineKind.DDAEFL:
            # Same hidden-layer count as the recurrent model, ending in the
            # content-wide latent that feeds the prediction head.
            return self.layer_spec.encoder_widths
        raise ValueError(f"{self.kind} has no dense encoder")

    def dense_decoder_widths(self) -> tuple[int, ...]:
        enc = self.dense_encoder_widths()
        return tuple(reversed(enc[:-1])) + (self.flat_width,)


@dataclass(eq=False)
class DenseParams:
    encoder: list[DenseLayer]
    decoder: list[DenseLayer]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder + self.decoder:
            out.extend([layer.w, layer.b])
        return out

    def clone(self) -> "DenseParams":
        return DenseParams(
            [l.clone() for l in self.encoder], [l.clone() for l in self.decoder]
        )

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    @classmethod
    def from_arrays(cls, template: "DenseParams", arrays: list[np.ndarray]) -> "DenseParams":
        it = iter(arrays)
        enc = [DenseLayer(next(it), next(it)) for _ in template.encoder]
        dec = [DenseLayer(next(it), next(it)) for _ in template.decoder]
        return cls(enc, dec)


def init_dense_model(spec: BaselineSpec, rng: np.random.Generator) -> DenseParams:
    widths_in = (spec.flat_width,) + spec.dense_encoder_widths()[:-1]
    enc = [
        init_dense_layer(out_w, in_w, rng)
        for out_w, in_w in zip(spec.dense_encoder_widths(), widths_in)
    ]
    dec_widths = spec.dense_decoder_widths()
    dec_in = (spec.dense_encoder_widths()[-1],) + dec_widths[:-1]
    dec = [
        init_dense_layer(out_w, in_w, rng) for out_w, in_w in zip(dec_widths, dec_in)
    ]
    return DenseParams(enc, dec)


def dense_ae_forward_backward(
    params: DenseParams,
    batch_flat: np.ndarray,
    training: bool,
    rng: Optional[np.random.Generator],
    dropout_rate: float,
) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients of the dense AE on a flattened (B, width) batch.

    Hidden layers are tanh; the reconstruction layer is linear; dropout
    sits between layers like in the recurrent model.
    """
    x = as_tensor(batch_flat)
    layers = params.encoder + params.decoder
    h = x
    caches = []
    masks = []
    for li, layer in enumerate(layers):
        last = li == len(layers) - 1
        out, cache = dense_forward(h, layer, "linear" if last else "tanh")
        caches.append(cache)
        if training and dropout_rate > 0.0 and not last:
            mask = (rng.random(out.shape) >= dropout_rate) / (1.0 - dropout_rate)
            out = out * mask
        else:
            mask = None
        masks.append(mask)
        h = out
    loss, dh = mse_loss(h, x)
    grads: list[Optional[tuple]] = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        if masks[li] is not None:
            dh = dh * masks[li]
        dw, db, dh = dense_backward(caches[li], dh)
        grads[li] = (dw, db)
    flat: list[np.ndarray] = []
    for dw, db in grads:
        flat.extend([dw, db])
    return loss, flat


def dense_predict(params_E: list[DenseLayer], flat_input: np.ndarray) -> np.ndarray:
    """Prediction head: softmax of the dense encoder output (width N)."""
    h = as_tensor(flat_input)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    for layer in params_E:
        h, _ = dense_forward(h, layer, "tanh")
    out = softmax(h, axis=-1)
    return out[0] if single else out


@dataclass(eq=False)
class DenseClient:
    """Dense-model twin of the recurrent client state."""

    user_id: int
    params: DenseParams
    dataset: np.ndarray  # (samples, flat width)
    opt: AdamState
    rng_data: np.random.Generator
    rng_dropout: np.random.Generator
    dropout_rate: float = 0.0
    loss_log: list[float] = field(default_factory=list)

    def run_local_round(self, epochs: int, batch_size: int, lr: float) -> float:
        if epochs < 1:
            raise ValueError("epochs must be positive")
        n_samples = self.dataset.shape[0]
        self.loss_log.clear()
        for _ in range(epochs):
            idx = self.rng_data.integers(0, n_samples, size=batch_size)
            batch = self.dataset[idx]
            loss, grads = dense_ae_forward_backward(
                self.params, batch, True, self.rng_dropout, self.dropout_rate
            )
            adam_step(self.params.arrays(), grads, self.opt, lr)
            self.loss_log.append(loss)
        return float(np.mean(self.loss_log))


def run_self_train(
    clients: Sequence[fed.ClientState],
    rounds: int,
    epochs_per_round: int,
    batch_size: int,
    lr: float,
    eval_hooks: Optional[fed.EvalHooks] = None,
) -> list[fed.RoundReport]:
    """No-communication reference: the federated loop with aggregation off,
    reporting on the same cadence."""
    return fed.run_training(
        clients,
        scheme=None,
        rounds=rounds,
        epochs_per_round=epochs_per_round,
        batch_size=batch_size,
        lr=lr,
        eval_hooks=eval_hooks,
    )


def run_dense_fl(
    clients: Sequence[DenseClient],
    rounds: int,
    epochs_per_round: int,
    batch_size: int,
    lr: float,
    sample_k: Optional[int] = None,
    server_rng: Optional[np.random.Generator] = None,
    eval_hooks: Optional[fed.EvalHooks] = None,
) -> list[fed.RoundReport]:
    """The plain-average federated loop over dense clients.

    Reuses the recurrent loop wholesale: aggregation and reporting only
    touch ``params.arrays()``, which both client types provide.
    """
    return fed.run_training(
        clients,
        scheme=fed.AggregationScheme.FEDAVG,
        rounds=rounds,
        epochs_per_round=epochs_per_round,
        batch_size=batch_size,
        lr=lr,
        sample_k=sample_k,
        server_rng=server_rng,
        eval_hooks=eval_hooks,
    )


def pool_windows(datasets: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate every client's windows into one training set."""
    return np.concatenate(list(datasets), axis=0)


def run_centralized(
    pooled_windows: np.ndarray,
    params: ModelParams,
    rounds: int,
    epochs_per_round: int,
    batch_size: int,
    lr: float,
    rng_data: np.random.Generator,
    rng_dropout: np.random.Generator,
    dropout_rate: float = 0.0,
    eval_hooks: Optional[fed.EvalHooks] = None,
) -> tuple[list[fed.RoundReport], fed.ClientState]:
    """Centralized recurrent AE on pooled private windows.

    Runs as a single client with aggregation disabled so the reporting
    cadence matches the federated runs; the returned client holds the
    trained model.
    """
    central = fed.ClientState(
        user_id=0,
        params=params,
        dataset=pooled_windows,
        opt=AdamState.for_params(params.arrays()),
        rng_data=rng_data,
        rng_dropout=rng_dropout,
        dropout_rate=dropout_rate,
    )
    reports = fed.run_training(
        [central],
        scheme=None,
        rounds=rounds,
        epochs_per_round=epochs_per_round,
        batch_size=batch_size,
        lr=lr,
        eval_hooks=eval_hooks,
    )
    return reports, central
