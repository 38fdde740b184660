"""Experiment assembly: seeds, datasets, training runs, online prediction.

One master seed fans out into named substreams (profile generation,
per-user traces, per-client batches and dropout, the server's client
sampler) so enabling one feature never perturbs the random draws of
another.  Everything downstream is a pure function of the configuration
plus that seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import baselines, fed, model, popdyn
from .config import ExperimentConfig
from .metrics import mean_rmse, rmse
from .nn import AdamState

METHODS = ("urfl", "fedlwa", "selftrain", "sdaefl", "ddaefl", "drael")


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named substream of the master seed."""
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(str(name).encode()))
    return np.random.default_rng(np.random.SeedSequence(key))


# Six-user reference populations (one row per distribution family) used by
# the mixture validation; arrival rates ride along with the parameters.
VALIDATION_USERS: dict[str, list[popdyn.FixedProfile]] = {
    "Zipf": [
        popdyn.FixedProfile(popdyn.DistributionSpec("Zipf", (a,)), lam)
        for lam, a in [
            (0.74, 0.08),
            (0.91, 2.14),
            (0.58, 1.56),
            (0.76, 1.02),
            (0.74, 0.11),
            (0.63, 0.15),
        ]
    ],
    "Poisson": [
        popdyn.FixedProfile(popdyn.DistributionSpec("Poisson", (l,)), lam)
        for lam, l in [
            (0.51, 8),
            (0.60, 27),
            (0.68, 24),
            (0.96, 29),
            (0.98, 13),
            (0.79, 11),
        ]
    ],
    "nBernoulli": [
        popdyn.FixedProfile(popdyn.DistributionSpec("nBernoulli", (p,)), lam)
        for lam, p in [
            (0.94, 0.44),
            (0.91, 0.11),
            (0.91, 0.50),
            (0.68, 0.70),
            (0.76, 0.52),
            (0.70, 0.51),
        ]
    ],
    "Gaussian": [
        popdyn.FixedProfile(popdyn.DistributionSpec("Gaussian", (mu, sg)), lam)
        for lam, mu, sg in [
            (0.88, 6, 2.30),
            (0.82, 31, 3.63),
            (0.97, 17, 2.45),
            (0.87, 28, 2.96),
            (0.68, 15, 3.27),
            (0.94, 9, 5.37),
        ]
    ],
}


@dataclass
class MixtureValidation:
    kind: str
    estimate: popdyn.PopularityVector
    theory: popdyn.PopularityVector

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.estimate.probs - self.theory.probs)

    @property
    def max_abs_gap(self) -> float:
        return float(self.gaps.max())

    @property
    def rmse(self) -> float:
        return rmse(self.estimate, self.theory)


def validate_mixture(
    seed: int,
    n_slots: int = 100_000,
    n_contents: int = 32,
    users_by_kind: Optional[dict[str, list[popdyn.FixedProfile]]] = None,
) -> list[MixtureValidation]:
    """Compare the closed-form global mixture against the counting estimate
    for every distribution family."""
    users_by_kind = VALIDATION_USERS if users_by_kind is None else users_by_kind
    results = []
    for kind, users in users_by_kind.items():
        rng = rng_stream(seed, "mixture", kind)
        estimate = popdyn.monte_carlo_global(users, n_contents, n_slots, rng)
        theory = popdyn.global_mixture(
            [popdyn.distribution_pmf(u.spec, n_contents) for u in users],
            [u.arrival_rate for u in users],
        )
        results.append(MixtureValidation(kind, estimate, theory))
    return results


def write_mixture_report(path, results: Sequence[MixtureValidation]) -> None:
    lines = ["kind,content,estimate,theory,abs_gap,rmse,max_abs_gap"]
    for res in results:
        for n in range(len(res.theory)):
            lines.append(
                f"{res.kind},{n + 1},{float(res.estimate.probs[n])!r},"
                f"{float(res.theory.probs[n])!r},{float(res.gaps[n])!r},"
                f"{res.rmse!r},{res.max_abs_gap!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------

ONEHOT_PAD = None  # silent slot marker in request arrays


def make_profiles(cfg: ExperimentConfig) -> list[popdyn.UserProfile]:
    rng = rng_stream(cfg.seed, "profiles")
    profiles = []
    for uid in range(1, cfg.n_users + 1):
        prof = popdyn.random_profile(
            uid,
            cfg.n_contents,
            rng,
            g_range=cfg.g_range,
            alpha_range=cfg.alpha_range,
            lambda_range=cfg.lambda_range,
        )
        if cfg.lambda_schedule:
            prof.lambda_schedule = cfg.lambda_schedule
        profiles.append(prof)
    return profiles


def make_traces(
    cfg: ExperimentConfig,
    profiles: Sequence[popdyn.UserProfile],
    extra_slots: int = 0,
) -> list[popdyn.RequestTrace]:
    """Simulate slots + eval_slots (+ extra) per user on its own stream.

    Chains are advanced on profile copies, so regenerating is free of
    side effects and always reproduces the same slots.
    """
    total = cfg.slots + cfg.eval_slots + extra_slots
    traces = []
    for prof in profiles:
        work = popdyn.UserProfile(
            prof.chain.clone(),
            prof.arrival_rate,
            prof.user_id,
            prof.n_contents,
            prof.lambda_schedule,
        )
        rng = rng_stream(cfg.seed, "trace", prof.user_id)
        traces.append(popdyn.generate_trace(work, total, rng))
    return traces


def _request_ids(trace: popdyn.RequestTrace) -> np.ndarray:
    """Requests as ints with 0 for silence, for one-hot table lookups."""
    return np.array([0 if r is None else r for r in trace.requests], dtype=np.int64)


def _onehot_table(n_contents: int) -> np.ndarray:
    table = np.zeros((n_contents + 1, n_contents))
    table[1:] = np.eye(n_contents)
    return table


def extract_windows(
    trace: popdyn.RequestTrace,
    window: int,
    ends: np.ndarray,
    n_contents: int,
) -> np.ndarray:
    """One-hot request windows of length window+1 ending at each slot in
    ``ends``; returns (len(ends), window+1, n_contents)."""
    ids = _request_ids(trace)
    table = _onehot_table(n_contents)
    spans = ends[:, None] + np.arange(-window, 1)[None, :]
    return table[ids[spans]]


def encode_global_requests(
    requests: Sequence[Optional[int]], n_contents: int
) -> np.ndarray:
    """Server-side input: one one-hot row per user in id order, zero rows
    for users that uploaded nothing this slot."""
    return model.encode_requests(requests, n_contents)


@dataclass
class EvalData:
    """Held-out windows and targets shared by every method."""

    local_inputs: list[np.ndarray]  # per user: (window+1, E, N) time-major
    local_targets: list[np.ndarray]  # per user: (E, N)
    local_flat: list[np.ndarray]  # per user: (E, (window+1)*N)
    global_inputs: np.ndarray  # (n_users, M, N) time-major slot batch
    global_targets: np.ndarray  # (M, N)
    global_flat: np.ndarray  # (M, (window+1)*N) zero-padded current slot
    uniform_global_rmse: float
    uniform_local_rmse: list[float]


def build_eval_data(
    cfg: ExperimentConfig,
    profiles: Sequence[popdyn.UserProfile],
    traces: Sequence[popdyn.RequestTrace],
) -> EvalData:
    n = cfg.n_contents
    h = cfg.window
    start = cfg.slots
    stop = cfg.slots + cfg.eval_slots - 1  # leave room for the t+1 target
    count = min(cfg.eval_windows, stop - start)
    ends = np.unique(np.linspace(start, stop - 1, count).astype(int))
    local_inputs = []
    local_targets = []
    local_flat = []
    uniform_local = []
    uniform = np.full(n, 1.0 / n)
    for trace in traces:
        wins = extract_windows(trace, h, ends, n)
        local_inputs.append(np.ascontiguousarray(wins.transpose(1, 0, 2)))
        targets = trace.truth_popularity[ends + 1]
        local_targets.append(targets)
        local_flat.append(wins.reshape(len(ends), -1))
        uniform_local.append(
            mean_rmse(np.tile(uniform, (len(ends), 1)), targets)
        )
    # Global slots: every slot in the held-out span with a t+1 target.
    g_slots = np.arange(start, stop)
    table = _onehot_table(n)
    per_user = [table[_request_ids(tr)[g_slots]] for tr in traces]
    global_inputs = np.ascontiguousarray(np.stack(per_user, axis=0))
    lams = np.array([p.rate_at(int(t) + 1) for t in g_slots for p in profiles])
    lams = lams.reshape(len(g_slots), len(profiles))
    truth = np.stack([tr.truth_popularity[g_slots + 1] for tr in traces], axis=1)
    weighted = np.einsum("mi,min->mn", lams, truth)
    global_targets = weighted / lams.sum(axis=1, keepdims=True)
    flat_width = (h + 1) * n
    global_flat = np.zeros((len(g_slots), flat_width))
    global_flat[:, -n:] = global_inputs.sum(axis=0)
    uniform_global = mean_rmse(
        np.tile(uniform, (len(g_slots), 1)), global_targets
    )
    return EvalData(
        local_inputs,
        local_targets,
        local_flat,
        global_inputs,
        global_targets,
        global_flat,
        uniform_global,
        uniform_local,
    )


def build_clients(
    cfg: ExperimentConfig,
    traces: Sequence[popdyn.RequestTrace],
) -> tuple[list[fed.ClientState], model.LayerSpec]:
    """Recurrent clients with independently initialized models and their
    own data/dropout streams."""
    spec = model.LayerSpec(cfg.n_contents, cfg.effective_widths)
    clients = []
    for idx, trace in enumerate(traces):
        uid = idx + 1
        rng_init = rng_stream(cfg.seed, "init", uid)
        rng_data = rng_stream(cfg.seed, "data", uid)
        ends = _sample_window_ends(cfg, rng_data)
        dataset = extract_windows(trace, cfg.window, ends, cfg.n_contents)
        params = model.init_model(spec, rng_init)
        clients.append(
            fed.ClientState(
                user_id=uid,
                params=params,
                dataset=dataset,
                opt=AdamState.for_params(params.arrays()),
                rng_data=rng_data,
                rng_dropout=rng_stream(cfg.seed, "dropout", uid),
                dropout_rate=cfg.dropout,
                max_norm=cfg.clip_norm if cfg.clip_norm > 0 else None,
            )
        )
    return clients, spec


def _sample_window_ends(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    valid = np.arange(cfg.window, cfg.slots)
    replace = cfg.samples > valid.size
    return rng.choice(valid, size=cfg.samples, replace=replace)


def build_dense_clients(
    cfg: ExperimentConfig,
    traces: Sequence[popdyn.RequestTrace],
    kind: baselines.BaselineKind,
) -> tuple[list[baselines.DenseClient], baselines.BaselineSpec]:
    spec = baselines.BaselineSpec(
        kind, cfg.window, model.LayerSpec(cfg.n_contents, cfg.effective_widths)
    )
    clients = []
    for idx, trace in enumerate(traces):
        uid = idx + 1
        rng_data = rng_stream(cfg.seed, "data", uid)
        ends = _sample_window_ends(cfg, rng_data)
        windows = extract_windows(trace, cfg.window, ends, cfg.n_contents)
        params = baselines.init_dense_model(spec, rng_stream(cfg.seed, "init", uid))
        clients.append(
            baselines.DenseClient(
                user_id=uid,
                params=params,
                dataset=windows.reshape(cfg.samples, -1),
                opt=AdamState.for_params(params.arrays()),
                rng_data=rng_data,
                rng_dropout=rng_stream(cfg.seed, "dropout", uid),
                dropout_rate=cfg.dropout,
            )
        )
    return clients, spec


def lstm_eval_hooks(eval_data: EvalData) -> fed.EvalHooks:
    def local(client: fed.ClientState) -> float:
        idx = client.user_id - 1
        preds = model.predict_popularity_batch(
            client.params.encoder, eval_data.local_inputs[idx]
        )
        return mean_rmse(preds, eval_data.local_targets[idx])

    def global_(encoder) -> float:
        preds = model.predict_popularity_batch(encoder, eval_data.global_inputs)
        return mean_rmse(preds, eval_data.global_targets)

    return fed.EvalHooks(local=local, global_=global_)


def dense_eval_hooks(eval_data: EvalData) -> fed.EvalHooks:
    def local(client: baselines.DenseClient) -> float:
        idx = client.user_id - 1
        preds = baselines.dense_predict(
            client.params.encoder, eval_data.local_flat[idx]
        )
        return mean_rmse(preds, eval_data.local_targets[idx])

    def global_(encoder) -> float:
        preds = baselines.dense_predict(encoder, eval_data.global_flat)
        return mean_rmse(preds, eval_data.global_targets)

    return fed.EvalHooks(local=local, global_=global_)


def central_eval_hooks(eval_data: EvalData, n_users: int) -> fed.EvalHooks:
    def local(client: fed.ClientState) -> float:
        scores = []
        for idx in range(n_users):
            preds = model.predict_popularity_batch(
                client.params.encoder, eval_data.local_inputs[idx]
            )
            scores.append(mean_rmse(preds, eval_data.local_targets[idx]))
        return float(np.mean(scores))

    def global_(encoder) -> float:
        preds = model.predict_popularity_batch(encoder, eval_data.global_inputs)
        return mean_rmse(preds, eval_data.global_targets)

    return fed.EvalHooks(local=local, global_=global_)


@dataclass
class ExperimentResult:
    method: str
    reports: list[fed.RoundReport]
    clients: list
    layer_spec: model.LayerSpec
    eval_data: EvalData
    global_encoder: Optional[list] = None

    def final_global_rmse(self) -> Optional[float]:
        for rep in reversed(self.reports):
            if rep.global_rmse is not None:
                return rep.global_rmse
        return None

    def final_mean_local_rmse(self) -> Optional[float]:
        for rep in reversed(self.reports):
            if rep.local_rmse:
                return float(np.mean(list(rep.local_rmse.values())))
        return None


def run_experiment(
    cfg: ExperimentConfig,
    method: str,
    profiles: Optional[Sequence[popdyn.UserProfile]] = None,
    traces: Optional[Sequence[popdyn.RequestTrace]] = None,
) -> ExperimentResult:
    """Train one method end to end from the configuration."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    profiles = make_profiles(cfg) if profiles is None else list(profiles)
    traces = make_traces(cfg, profiles) if traces is None else list(traces)
    eval_data = build_eval_data(cfg, profiles, traces)
    server_rng = rng_stream(cfg.seed, "server")
    spec = model.LayerSpec(cfg.n_contents, cfg.effective_widths)
    k = cfg.effective_sample_k

    if method in ("urfl", "fedlwa", "selftrain"):
        clients, spec = build_clients(cfg, traces)
        hooks = lstm_eval_hooks(eval_data)
        if method == "selftrain":
            hooks = fed.EvalHooks(local=hooks.local, global_=None)
            reports = baselines.run_self_train(
                clients, cfg.rounds, cfg.local_epochs, cfg.batch, cfg.lr, hooks
            )
            return ExperimentResult(method, reports, clients, spec, eval_data)
        scheme = (
            fed.AggregationScheme.FEDLWA
            if method == "fedlwa"
            else fed.AggregationScheme.FEDAVG
        )
        reports = fed.run_training(
            clients,
            scheme,
            cfg.rounds,
            cfg.local_epochs,
            cfg.batch,
            cfg.lr,
            sample_k=k,
            server_rng=server_rng,
            eval_hooks=hooks,
            fedlwa_inverse=cfg.fedlwa_inverse,
        )
        if cfg.rounds:
            encoder = [l.clone() for l in clients[0].params.encoder]
        else:
            encoder = model.init_model(spec, rng_stream(cfg.seed, "init", "global")).encoder
        return ExperimentResult(method, reports, clients, spec, eval_data, encoder)

    if method in ("sdaefl", "ddaefl"):
        kind = (
            baselines.BaselineKind.SDAEFL
            if method == "sdaefl"
            else baselines.BaselineKind.DDAEFL
        )
        dclients, _ = build_dense_clients(cfg, traces, kind)
        reports = baselines.run_dense_fl(
            dclients,
            cfg.rounds,
            cfg.local_epochs,
            cfg.batch,
            cfg.lr,
            sample_k=k,
            server_rng=server_rng,
            eval_hooks=dense_eval_hooks(eval_data),
        )
        if cfg.rounds:
            encoder = [l.clone() for l in dclients[0].params.encoder]
        else:
            dspec = baselines.BaselineSpec(kind, cfg.window, spec)
            encoder = baselines.init_dense_model(
                dspec, rng_stream(cfg.seed, "init", "global")
            ).encoder
        return ExperimentResult(method, reports, dclients, spec, eval_data, encoder)

    # Centralized: pool everyone's windows into one model.
    clients, spec = build_clients(cfg, traces)
    pooled = baselines.pool_windows([c.dataset for c in clients])
    params = model.init_model(spec, rng_stream(cfg.seed, "init", "central"))
    reports, central = baselines.run_centralized(
        pooled,
        params,
        cfg.rounds,
        cfg.local_epochs,
        cfg.batch,
        cfg.lr,
        rng_data=rng_stream(cfg.seed, "data", "central"),
        rng_dropout=rng_stream(cfg.seed, "dropout", "central"),
        dropout_rate=cfg.dropout,
        eval_hooks=central_eval_hooks(eval_data, cfg.n_users),
    )
    encoder = [l.clone() for l in central.params.encoder]
    return ExperimentResult(method, reports, [central], spec, eval_data, encoder)


# ---------------------------------------------------------------------------
# Online prediction
# ---------------------------------------------------------------------------

class EdgeServer:
    """Per-slot request sink that forgets everything after predicting."""

    def __init__(self, n_users: int, n_contents: int):
        self.n_users = n_users
        self.n_contents = n_contents
        self._buffer: list[Optional[int]] = [None] * n_users

    def receive(self, user_id: int, content: int) -> None:
        self._buffer[user_id - 1] = content

    def snapshot(self) -> np.ndarray:
        return encode_global_requests(self._buffer, self.n_contents)

    def burn(self) -> None:
        self._buffer = [None] * self.n_users

    @property
    def buffer_empty(self) -> bool:
        return all(r is None for r in self._buffer)


@dataclass
class OnlineRecord:
    slot: int
    entity: str  # "user_<i>" or "global"
    abs_errors: np.ndarray


LocalPredictor = Callable[[np.ndarray, int, int], np.ndarray]
GlobalPredictor = Callable[[np.ndarray, int], np.ndarray]


def online_prediction(
    cfg: ExperimentConfig,
    profiles: Sequence[popdyn.UserProfile],
    traces: Sequence[popdyn.RequestTrace],
    local_predictors: Sequence[LocalPredictor],
    global_predictor: Optional[GlobalPredictor],
    n_slots: int = 20,
    start: Optional[int] = None,
) -> tuple[list[OnlineRecord], list[bool]]:
    """Slot-by-slot service loop over pre-simulated request traffic.

    At slot t every user's fresh request is uploaded (when non-silent),
    the server predicts the next slot's mixture from just this slot's
    uploads and immediately erases them, and every user predicts its own
    next-slot popularity from its window.  Errors for slot t+1 are
    recorded against the ground truth.  Returns the per-entity error
    records and the post-slot buffer-empty audit trail.
    """
    n = cfg.n_contents
    h = cfg.window
    base = cfg.slots + cfg.eval_slots if start is None else start
    if base + n_slots + 1 > traces[0].n_slots:
        raise ValueError("traces too short for the requested online span")
    server = EdgeServer(len(profiles), n)
    records: list[OnlineRecord] = []
    audits: list[bool] = []
    pending_local: list[Optional[np.ndarray]] = [None] * len(profiles)
    pending_global: Optional[np.ndarray] = None
    for t in range(base, base + n_slots + 1):
        # Score the predictions made last slot against this slot's truth.
        if t > base:
            for idx, prof in enumerate(profiles):
                if pending_local[idx] is not None:
                    truth = traces[idx].truth_popularity[t]
                    records.append(
                        OnlineRecord(
                            t, f"user_{prof.user_id}", np.abs(pending_local[idx] - truth)
                        )
                    )
            if pending_global is not None:
                lam_t = np.array([p.rate_at(t) for p in profiles])
                locals_t = np.stack([tr.truth_popularity[t] for tr in traces])
                mixture = (lam_t @ locals_t) / lam_t.sum()
                records.append(
                    OnlineRecord(t, "global", np.abs(pending_global - mixture))
                )
        if t == base + n_slots:
            break
        # This slot's requests arrive; non-silent ones reach the server.
        for idx, trace in enumerate(traces):
            req = trace.requests[t]
            if req is not None:
                server.receive(profiles[idx].user_id, req)
        if global_predictor is not None:
            pending_global = np.asarray(global_predictor(server.snapshot(), t + 1))
        server.burn()
        audits.append(server.buffer_empty)
        # Each user predicts the next slot from its own window.
        for idx, trace in enumerate(traces):
            window = extract_windows(trace, h, np.array([t]), n)[0]
            pending_local[idx] = np.asarray(local_predictors[idx](window, idx, t + 1))
    return records, audits


def model_local_predictor(encoder) -> LocalPredictor:
    def predict(window: np.ndarray, idx: int, target_slot: int) -> np.ndarray:
        return model.predict_popularity(encoder, window).probs

    return predict


def model_global_predictor(encoder) -> GlobalPredictor:
    def predict(request_rows: np.ndarray, target_slot: int) -> np.ndarray:
        return model.predict_popularity(encoder, request_rows).probs

    return predict


def write_online_report(path, records: Sequence[OnlineRecord], n_contents: int) -> None:
    header = "slot,entity," + ",".join(f"e{j}" for j in range(1, n_contents + 1))
    lines = [header]
    for rec in records:
        vals = ",".join(repr(float(v)) for v in rec.abs_errors)
        lines.append(f"{rec.slot},{rec.entity},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_online_report(path) -> list[OnlineRecord]:
    lines = Path(path).read_text().splitlines()
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(
            OnlineRecord(int(parts[0]), parts[1], np.array([float(v) for v in parts[2:]]))
        )
    return records
