"""Stacked LSTM auto-encoder over request windows.

The encoder maps a sequence of one-hot request vectors through stacked
LSTM layers; the decoder consumes the encoder's full per-step output
sequence and reconstructs the input.  Training minimizes the mini-batch
mean squared reconstruction error end to end.  Popularity prediction is
the softmax of the top encoder layer's output at the final step, which
keeps the head out of the training path, and works for any sequence
length, so the same encoder serves both the per-user window and the
server's per-slot request list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .nn import (
    AdamState,
    LstmCellWeights,
    LstmState,
    adam_step,
    as_tensor,
    init_lstm_weights,
    mse_loss,
    softmax,
)
from .nn import kernels
from .popdyn import PopularityVector


@dataclass(frozen=True)
class LayerSpec:
    """Width plan of the auto-encoder.

    The final encoder layer is as wide as the content library so its
    output doubles as the popularity logits; the decoder mirrors the
    encoder and ends in a reconstruction layer of the input width.
    """

    input_width: int
    encoder_widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.input_width < 1 or not self.encoder_widths:
            raise ValueError("need a positive input width and at least one layer")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("layer widths must be positive")
        if self.encoder_widths[-1] != self.input_width:
            raise ValueError(
                "the last encoder width must equal the content count "
                f"({self.encoder_widths[-1]} != {self.input_width})"
            )

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_widths[:-1])) + (self.input_width,)

    def encoder_layer_io(self) -> list[tuple[int, int]]:
        ins = (self.input_width,) + self.encoder_widths[:-1]
        return list(zip(self.encoder_widths, ins))

    def decoder_layer_io(self) -> list[tuple[int, int]]:
        widths = self.decoder_widths
        ins = (self.encoder_widths[-1],) + widths[:-1]
        return list(zip(widths, ins))


@dataclass(eq=False)
class ModelParams:
    """Encoder and decoder parameter stacks of one auto-encoder."""

    encoder: list[LstmCellWeights]
    decoder: list[LstmCellWeights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder + self.decoder:
            out.extend([layer.w, layer.b])
        return out

    def clone(self) -> "ModelParams":
        return ModelParams(
            [l.clone() for l in self.encoder], [l.clone() for l in self.decoder]
        )

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    @classmethod
    def from_arrays(cls, template: "ModelParams", arrays: list[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        enc = [LstmCellWeights(next(it), next(it)) for _ in template.encoder]
        dec = [LstmCellWeights(next(it), next(it)) for _ in template.decoder]
        return cls(enc, dec)


IDENTITY_BOOST = 1.0


def _boost_candidate_identity(layer: LstmCellWeights, strength: float) -> None:
    # Orientation anchor: the reconstruction objective cannot distinguish a
    # latent code from its negation, but the popularity head reads the code
    # through a softmax and needs the positive orientation.  Starting every
    # candidate gate near a copy of its input pins that sign without
    # constraining what is learned.
    h = layer.hidden
    k = min(h, layer.input_width)
    layer.W_C[np.arange(k), h + np.arange(k)] += strength


def init_model(
    spec: LayerSpec,
    rng: np.random.Generator,
    identity_boost: float = IDENTITY_BOOST,
) -> ModelParams:
    enc = [init_lstm_weights(h, i, rng) for h, i in spec.encoder_layer_io()]
    dec = [init_lstm_weights(h, i, rng) for h, i in spec.decoder_layer_io()]
    if identity_boost:
        for layer in enc + dec:
            _boost_candidate_identity(layer, identity_boost)
    return ModelParams(enc, dec)


def encode_requests(window: Sequence[Optional[int]], n_contents: int) -> np.ndarray:
    """One-hot encode a request window; silent slots become zero rows."""
    if not len(window):
        raise ValueError("window must be nonempty")
    out = np.zeros((len(window), n_contents))
    for t, req in enumerate(window):
        if req is None:
            continue
        if not 1 <= req <= n_contents:
            raise ValueError(f"request id {req} outside 1..{n_contents}")
        out[t, req - 1] = 1.0
    return out


def _stack_forward(layers, x_seq, training, dropout_rate, rng):
    """Run a layer stack over (T,B,width); dropout after every layer except
    the topmost.  Returns output, per-layer (input, cache), per-layer mask."""
    h = x_seq
    caches = []
    masks = []
    for li, layer in enumerate(layers):
        y, cache = kernels.seq_forward(layer.w, layer.b, h)
        caches.append((h, cache))
        if training and dropout_rate > 0.0 and li < len(layers) - 1:
            mask = (rng.random(y.shape) >= dropout_rate) / (1.0 - dropout_rate)
            y = y * mask
        else:
            mask = None
        masks.append(mask)
        h = y
    return h, caches, masks


def _stack_backward(layers, caches, masks, d_out):
    """Backprop through a stack; returns per-layer (dw, db) and the gradient
    w.r.t. the stack input."""
    grads = [None] * len(layers)
    dh = d_out
    for li in range(len(layers) - 1, -1, -1):
        if masks[li] is not None:
            dh = dh * masks[li]
        x_in, cache = caches[li]
        dw, db, dh = kernels.seq_backward(layers[li].w, x_in, cache, dh)
        grads[li] = (dw, db)
    return grads, dh


def _to_time_major(inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = as_tensor(inputs)
    if arr.ndim == 2:
        return arr[:, None, :], True
    if arr.ndim == 3:
        return arr, False
    raise ValueError("expected (time, width) or (time, batch, width) input")


def encode_sequence(
    params_E: list[LstmCellWeights],
    inputs: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """Top-layer output sequence for one input sequence (time, width)."""
    x, single = _to_time_major(inputs)
    if x.shape[-1] != params_E[0].input_width:
        raise ValueError("input width does not match the encoder")
    out, _, _ = _stack_forward(params_E, x, training, dropout_rate, rng)
    return out[:, 0, :] if single else out


def decode_sequence(
    params_D: list[LstmCellWeights],
    encoded: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """Reconstruction sequence from the encoder's output sequence."""
    z, single = _to_time_major(encoded)
    if z.shape[-1] != params_D[0].input_width:
        raise ValueError("encoded width does not match the decoder")
    out, _, _ = _stack_forward(params_D, z, training, dropout_rate, rng)
    return out[:, 0, :] if single else out


def autoencode_loss_and_grads(
    params: ModelParams,
    batch: np.ndarray,
    training: bool = True,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> tuple[float, list[np.ndarray]]:
    """Forward plus full backward pass over one mini-batch (T,B,width).

    Returns the reconstruction loss and gradients aligned with
    ``params.arrays()``.
    """
    x = as_tensor(batch)
    enc_out, enc_caches, enc_masks = _stack_forward(
        params.encoder, x, training, dropout_rate, rng
    )
    # The code layer itself is left intact: dropout sits between the hidden
    # layers inside each stack, never on the encoder/decoder interface the
    # prediction head reads.
    recon, dec_caches, dec_masks = _stack_forward(
        params.decoder, enc_out, training, dropout_rate, rng
    )
    loss, d_recon = mse_loss(recon, x)
    dec_grads, dz = _stack_backward(params.decoder, dec_caches, dec_masks, d_recon)
    enc_grads, _ = _stack_backward(params.encoder, enc_caches, enc_masks, dz)
    flat: list[np.ndarray] = []
    for dw, db in enc_grads + dec_grads:
        flat.extend([dw, db])
    return loss, flat


def reconstruction_step(
    params: ModelParams,
    batch: np.ndarray,
    opt_state: AdamState,
    lr: float,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    max_norm: float | None = None,
) -> tuple[ModelParams, float]:
    """One training step: loss, gradients, one Adam update in place.

    The returned loss is the pre-update value.
    """
    batch = as_tensor(batch)
    if batch.ndim != 3:
        raise ValueError("expected a (time, batch, width) mini-batch")
    loss, grads = autoencode_loss_and_grads(params, batch, True, rng, dropout_rate)
    adam_step(params.arrays(), grads, opt_state, lr, max_norm)
    return params, loss


def predict_popularity(
    params_E: list[LstmCellWeights], inputs: np.ndarray
) -> PopularityVector:
    """Softmax of the final-step top-layer encoder output."""
    out = encode_sequence(params_E, inputs, training=False)
    logits = out[-1] if out.ndim == 2 else out[-1, 0]
    return PopularityVector(softmax(logits))


def predict_popularity_batch(
    params_E: list[LstmCellWeights], inputs: np.ndarray
) -> np.ndarray:
    """Batched head: inputs (T,B,width) -> (B, n_contents) of PMF rows."""
    out, _, _ = _stack_forward(params_E, as_tensor(inputs), False, 0.0, None)
    return softmax(out[-1], axis=-1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _spec_meta(spec: LayerSpec, seed: int, kind: str) -> dict[str, str]:
    return {
        "kind": kind,
        "n_contents": str(spec.input_width),
        "encoder_widths": ",".join(str(w) for w in spec.encoder_widths),
        "seed": str(seed),
    }


def _layer_tensors(prefix: str, layers: list[LstmCellWeights]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for li, layer in enumerate(layers):
        out[f"{prefix}{li}.w"] = layer.w
        out[f"{prefix}{li}.b"] = layer.b
    return out


def save_model(path, spec: LayerSpec, params: ModelParams, seed: int) -> None:
    tensors = _layer_tensors("enc", params.encoder)
    tensors.update(_layer_tensors("dec", params.decoder))
    checkpoint.save_checkpoint(path, _spec_meta(spec, seed, "lstm-ae"), tensors)


def save_encoder(path, spec: LayerSpec, encoder: list[LstmCellWeights], seed: int) -> None:
    checkpoint.save_checkpoint(
        path, _spec_meta(spec, seed, "lstm-encoder"), _layer_tensors("enc", encoder)
    )


def _collect_layers(tensors: dict[str, np.ndarray], prefix: str) -> list[LstmCellWeights]:
    layers = []
    li = 0
    while f"{prefix}{li}.w" in tensors:
        layers.append(LstmCellWeights(tensors[f"{prefix}{li}.w"], tensors[f"{prefix}{li}.b"]))
        li += 1
    return layers


def load_model(path) -> tuple[LayerSpec, ModelParams, dict[str, str]]:
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "lstm-ae":
        raise ValueError(f"{path} does not hold a full auto-encoder")
    spec = LayerSpec(
        int(meta["n_contents"]),
        tuple(int(w) for w in meta["encoder_widths"].split(",")),
    )
    params = ModelParams(_collect_layers(tensors, "enc"), _collect_layers(tensors, "dec"))
    return spec, params, meta


def load_encoder(path) -> tuple[LayerSpec, list[LstmCellWeights], dict[str, str]]:
    meta, tensors = checkpoint.load_checkpoint(path)
    if meta.get("kind") not in ("lstm-encoder", "lstm-ae"):
        raise ValueError(f"{path} does not hold an encoder")
    spec = LayerSpec(
        int(meta["n_contents"]),
        tuple(int(w) for w in meta["encoder_widths"].split(",")),
    )
    return spec, _collect_layers(tensors, "enc"), meta
