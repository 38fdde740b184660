"""Federated training orchestration.

One communication round = every (sampled) client trains T mini-batches
locally, uploads its parameters (plus its average training loss under
the loss-weighted scheme), the server aggregates, and the aggregate is
broadcast to all clients.  The aggregation functions deliberately accept
only parameter stacks and scalar losses: request histories never cross
the client boundary.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ModelParams, reconstruction_step
from .nn import AdamState, LstmCellWeights

BYTES_PER_PARAM = 4  # single-precision wire format
BYTES_PER_LOSS = 8  # one double per uploaded average loss


class AggregationScheme(Enum):
    FEDAVG = "FedAvg"
    FEDLWA = "FedLWA"


@dataclass(eq=False)
class ClientState:
    """Everything one client owns: model, data windows, optimizer, rngs."""

    user_id: int
    params: ModelParams
    dataset: np.ndarray  # (samples, window+1, n_contents) one-hot windows
    opt: AdamState
    rng_data: np.random.Generator
    rng_dropout: np.random.Generator
    dropout_rate: float = 0.0
    max_norm: Optional[float] = None
    loss_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.dataset.ndim != 3:
            raise ValueError("dataset must be (samples, window, contents)")

    def run_local_round(self, epochs: int, batch_size: int, lr: float) -> float:
        return local_train_round(self, epochs, batch_size, lr)


def local_train_round(
    client: ClientState, epochs: int, batch_size: int, lr: float
) -> float:
    """Train ``epochs`` mini-batches sampled with replacement from the
    client's windows; returns the round's average training loss."""
    if epochs < 1:
        raise ValueError("epochs must be positive")
    n_samples = client.dataset.shape[0]
    if n_samples == 0:
        raise ValueError("client has no training windows")
    client.loss_log.clear()
    for _ in range(epochs):
        idx = client.rng_data.integers(0, n_samples, size=batch_size)
        batch = client.dataset[idx].transpose(1, 0, 2)  # to (time, batch, width)
        _, loss = reconstruction_step(
            client.params,
            batch,
            client.opt,
            lr,
            dropout_rate=client.dropout_rate,
            rng=client.rng_dropout,
            max_norm=client.max_norm,
        )
        client.loss_log.append(loss)
    return float(np.mean(client.loss_log))


def _combine(params_list: Sequence, weights: np.ndarray):
    arrays_list = [p.arrays() for p in params_list]
    combined = []
    for pieces in zip(*arrays_list):
        acc = np.zeros_like(pieces[0])
        for w, piece in zip(weights, pieces):
            if piece.shape != pieces[0].shape:
                raise ValueError("client parameter shapes differ")
            acc += w * piece
        combined.append(acc)
    return type(params_list[0]).from_arrays(params_list[0], combined)


def fedavg_aggregate(
    params_list: Sequence[ModelParams], omegas: Optional[Sequence[float]] = None
) -> tuple[ModelParams, list[LstmCellWeights]]:
    """Plain parameter average (1/I) * sum_i omega_i * params_i; the global
    model is the encoder half of the aggregate."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    count = len(params_list)
    omegas = np.ones(count) if omegas is None else np.asarray(omegas, dtype=np.float64)
    if omegas.shape != (count,):
        raise ValueError("need one omega per client")
    aggregate = _combine(params_list, omegas / count)
    return aggregate, [l.clone() for l in aggregate.encoder]


def fedlwa_aggregate(
    params_list: Sequence[ModelParams],
    losses: Sequence[float],
    omegas: Optional[Sequence[float]] = None,
    inverse: bool = False,
) -> tuple[ModelParams, list[LstmCellWeights], np.ndarray]:
    """Loss-weighted average: gamma_i = L_i / sum_j L_j and the aggregate is
    sum_i omega_i * gamma_i * params_i.

    ``inverse`` flips the weighting to 1/L (experimental, off by default).
    Raises on all-zero losses; callers fall back to the plain average.
    """
    if not params_list or len(params_list) != len(losses):
        raise ValueError("need one loss per parameter set")
    loss_arr = np.asarray(losses, dtype=np.float64)
    if np.any(loss_arr < 0.0):
        raise ValueError("losses must be nonnegative")
    if not np.any(loss_arr > 0.0):
        raise ValueError("all-zero losses leave the weights undefined")
    basis = loss_arr
    if inverse:
        if np.any(loss_arr == 0.0):
            raise ValueError("inverse weighting undefined with a zero loss")
        basis = 1.0 / loss_arr
    gammas = basis / basis.sum()
    count = len(params_list)
    omegas = np.ones(count) if omegas is None else np.asarray(omegas, dtype=np.float64)
    aggregate = _combine(params_list, omegas * gammas)
    return aggregate, [l.clone() for l in aggregate.encoder], gammas


def sample_clients(
    all_clients: Sequence, k: int, rng: np.random.Generator
) -> list:
    """Uniform subset of k clients, order-stable in the original list."""
    if not 1 <= k <= len(all_clients):
        raise ValueError("k must lie in 1..len(clients)")
    chosen = rng.choice(len(all_clients), size=k, replace=False)
    return [all_clients[i] for i in sorted(chosen)]


def round_bytes(
    k: int,
    total_clients: int,
    param_count: int,
    fedlwa: bool,
    bytes_per_param: int = BYTES_PER_PARAM,
) -> tuple[int, int]:
    """(uploaded, broadcast) bytes of one round."""
    up = k * param_count * bytes_per_param
    if fedlwa:
        up += BYTES_PER_LOSS * k
    down = total_clients * param_count * bytes_per_param
    return up, down


def comm_accounting(
    rounds: int,
    sampled_per_round: int,
    param_count: int,
    bytes_per_param: int = BYTES_PER_PARAM,
    total_clients: Optional[int] = None,
    fedlwa: bool = False,
) -> int:
    """Closed-form cumulative traffic of a training run."""
    if min(rounds, sampled_per_round, param_count, bytes_per_param) < 0:
        raise ValueError("accounting inputs must be nonnegative")
    total_clients = sampled_per_round if total_clients is None else total_clients
    up, down = round_bytes(
        sampled_per_round, total_clients, param_count, fedlwa, bytes_per_param
    )
    return rounds * (up + down)


@dataclass
class EvalHooks:
    """Optional per-round scoring callbacks.

    ``local`` maps a client to its current local prediction RMSE;
    ``global_`` scores an encoder parameter stack against the held-out
    mixture targets.
    """

    local: Optional[Callable[[ClientState], float]] = None
    global_: Optional[Callable[[list[LstmCellWeights]], float]] = None


@dataclass(eq=False)
class RoundReport:
    """What one communication round produced."""

    round_index: int
    client_ids: list[int]
    avg_losses: dict[int, float]
    gammas: Optional[dict[int, float]]
    first_losses: dict[int, float]
    last_losses: dict[int, float]
    local_rmse: dict[int, float]
    global_rmse: Optional[float]
    bytes_uploaded_cum: int
    bytes_broadcast_cum: int

    @property
    def bytes_cum(self) -> int:
        return self.bytes_uploaded_cum + self.bytes_broadcast_cum


def run_training(
    clients: Sequence[ClientState],
    scheme: Optional[AggregationScheme],
    rounds: int,
    epochs_per_round: int,
    batch_size: int,
    lr: float,
    sample_k: Optional[int] = None,
    server_rng: Optional[np.random.Generator] = None,
    eval_hooks: Optional[EvalHooks] = None,
    omegas: Optional[Sequence[float]] = None,
    fedlwa_inverse: bool = False,
) -> list[RoundReport]:
    """Run the communication-round loop.

    ``scheme=None`` disables aggregation entirely (clients self-train on
    the same schedule), which is the no-communication reference.  With a
    scheme set, every round's aggregate is broadcast to all clients,
    sampled or not, so parameters are synchronized after each round.
    """
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    total = len(clients)
    k = total if sample_k is None else sample_k
    if not 1 <= k <= total:
        raise ValueError("sample_k must lie in 1..n_clients")
    counts = {c.params.param_count() for c in clients}
    if len(counts) != 1:
        raise ValueError("clients must share one model structure")
    param_count = counts.pop()
    if k < total and server_rng is None:
        raise ValueError("client sampling needs a server rng")
    reports: list[RoundReport] = []
    up_cum = 0
    down_cum = 0
    for r in range(1, rounds + 1):
        if k < total:
            sampled = sample_clients(clients, k, server_rng)
        else:
            sampled = list(clients)
        avg_losses: dict[int, float] = {}
        first_losses: dict[int, float] = {}
        last_losses: dict[int, float] = {}
        for client in sampled:
            avg = client.run_local_round(epochs_per_round, batch_size, lr)
            avg_losses[client.user_id] = avg
            first_losses[client.user_id] = client.loss_log[0]
            last_losses[client.user_id] = client.loss_log[-1]
        gammas_out: Optional[dict[int, float]] = None
        if scheme is not None:
            params_list = [c.params for c in sampled]
            if scheme is AggregationScheme.FEDLWA:
                losses = [avg_losses[c.user_id] for c in sampled]
                try:
                    aggregate, _, gammas = fedlwa_aggregate(
                        params_list, losses, omegas, inverse=fedlwa_inverse
                    )
                    gammas_out = {
                        c.user_id: float(g) for c, g in zip(sampled, gammas)
                    }
                except ValueError:
                    warnings.warn(
                        "all-zero round losses; falling back to the plain average",
                        RuntimeWarning,
                        stacklevel=2,
                    )
                    aggregate, _ = fedavg_aggregate(params_list, omegas)
            else:
                aggregate, _ = fedavg_aggregate(params_list, omegas)
            for client in clients:
                client.params = aggregate.clone()
            up, down = round_bytes(
                k, total, param_count, scheme is AggregationScheme.FEDLWA
            )
            up_cum += up
            down_cum += down
        local_rmse: dict[int, float] = {}
        global_rmse: Optional[float] = None
        if eval_hooks is not None:
            if eval_hooks.local is not None:
                for client in sampled:
                    local_rmse[client.user_id] = eval_hooks.local(client)
            if eval_hooks.global_ is not None:
                global_rmse = eval_hooks.global_(clients[0].params.encoder)
        reports.append(
            RoundReport(
                round_index=r,
                client_ids=[c.user_id for c in sampled],
                avg_losses=avg_losses,
                gammas=gammas_out,
                first_losses=first_losses,
                last_losses=last_losses,
                local_rmse=local_rmse,
                global_rmse=global_rmse,
                bytes_uploaded_cum=up_cum,
                bytes_broadcast_cum=down_cum,
            )
        )
    return reports


def write_round_reports(path, reports: Sequence[RoundReport], method: str | None = None) -> None:
    """Persist reports, one row per (round, reporting client).

    The trailing ``method`` column is only present for comparison runs.
    """
    header = "round,client_id,avg_loss,gamma,local_rmse,global_rmse,bytes_cum"
    if method is not None:
        header += ",method"
    lines = [header]
    for rep in reports:
        for cid in rep.client_ids:
            gamma = "" if rep.gammas is None else repr(rep.gammas[cid])
            lrm = "" if cid not in rep.local_rmse else repr(rep.local_rmse[cid])
            grm = "" if rep.global_rmse is None else repr(rep.global_rmse)
            row = (
                f"{rep.round_index},{cid},{rep.avg_losses[cid]!r},{gamma},"
                f"{lrm},{grm},{rep.bytes_cum}"
            )
            if method is not None:
                row += f",{method}"
            lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_round_reports(path) -> list[dict]:
    """Parse a report CSV back into dict rows (strings left as written)."""
    lines = Path(path).read_text().splitlines()
    fields = lines[0].split(",")
    if fields[:7] != [
        "round",
        "client_id",
        "avg_loss",
        "gamma",
        "local_rmse",
        "global_rmse",
        "bytes_cum",
    ]:
        raise ValueError(f"unrecognized report header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(fields, parts))
        rows.append(row)
    return rows
