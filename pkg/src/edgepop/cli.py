"""Command-line harness.

Subcommands::

    edgepop generate          --config c [--seed s] [--out d]
    edgepop train             --config c [--method m] [--seed s] [--out d]
    edgepop online            --config c [--method m] [--online-slots k]
    edgepop validate-theorem1 [--config c] [--seed s] [--out d]
    edgepop eval              --config c [--out d]

Outputs land under the configured directory: traces/, profiles/,
reports/, checkpoints/ and a manifest.txt echoing the configuration,
seed and a content hash of the generated data.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import baselines, experiments, fed, model, popdyn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, serialize_config
from .metrics import rmse  # noqa: F401  (re-exported for harness users)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _load_cfg(args) -> ExperimentConfig:
    if args.config is None:
        return _apply_overrides(ExperimentConfig(), args)
    return _apply_overrides(load_config(args.config), args)


def _hash_files(paths: list[Path], root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(paths, key=lambda p: str(p.relative_to(root))):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Write per-user traces, profiles and the run manifest."""
    out = Path(cfg.out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "profiles").mkdir(parents=True, exist_ok=True)
    profiles = experiments.make_profiles(cfg)
    traces = experiments.make_traces(cfg, profiles)
    written: list[Path] = []
    for prof, trace in zip(profiles, traces):
        trace_path = out / "traces" / f"user_{prof.user_id}.csv"
        truth_path = out / "traces" / f"user_{prof.user_id}_truth.csv"
        popdyn.save_trace(trace_path, truth_path, trace)
        prof_path = out / "profiles" / f"user_{prof.user_id}.txt"
        popdyn.save_profile(prof_path, prof, cfg.seed)
        written.extend([trace_path, truth_path, prof_path])
    manifest = out / "manifest.txt"
    body = serialize_config(cfg)
    body += f"content_sha256 = {_hash_files(written, out)}\n"
    manifest.write_text(body)
    return manifest


def _method_from(cfg: ExperimentConfig, args) -> str:
    if getattr(args, "method", None):
        return args.method
    return "fedlwa" if cfg.scheme == "FedLWA" else "urfl"


def cmd_train(cfg: ExperimentConfig, method: str) -> experiments.ExperimentResult:
    """Run one training method and persist reports plus checkpoints."""
    out = Path(cfg.out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    result = experiments.run_experiment(cfg, method)
    csv_method = None if method in ("urfl", "fedlwa") else method
    fed.write_round_reports(out / "reports" / "rounds.csv", result.reports, csv_method)
    spec = result.layer_spec
    if method in ("urfl", "fedlwa", "selftrain", "drael"):
        for client in result.clients:
            model.save_model(
                out / "checkpoints" / f"client_{client.user_id}.ckpt",
                spec,
                client.params,
                cfg.seed,
            )
        if result.global_encoder is not None:
            model.save_encoder(
                out / "checkpoints" / "global_encoder.ckpt",
                spec,
                result.global_encoder,
                cfg.seed,
            )
    else:
        for client in result.clients:
            _save_dense(out / "checkpoints" / f"client_{client.user_id}.ckpt", cfg, client.params, method)
        if result.global_encoder is not None:
            _save_dense(
                out / "checkpoints" / "global_encoder.ckpt",
                cfg,
                baselines.DenseParams(result.global_encoder, []),
                method,
                encoder_only=True,
            )
    return result


def _save_dense(path, cfg: ExperimentConfig, params, method: str, encoder_only: bool = False) -> None:
    meta = {
        "kind": "dense-encoder" if encoder_only else "dense-ae",
        "method": method,
        "n_contents": str(cfg.n_contents),
        "window": str(cfg.window),
        "seed": str(cfg.seed),
    }
    tensors: dict[str, np.ndarray] = {}
    for li, layer in enumerate(params.encoder):
        tensors[f"enc{li}.w"] = layer.w
        tensors[f"enc{li}.b"] = layer.b
    for li, layer in enumerate(params.decoder):
        tensors[f"dec{li}.w"] = layer.w
        tensors[f"dec{li}.b"] = layer.b
    save_checkpoint(path, meta, tensors)


def _load_dense_encoder(path) -> list:
    meta, tensors = load_checkpoint(path)
    layers = []
    li = 0
    from .nn import DenseLayer

    while f"enc{li}.w" in tensors:
        layers.append(DenseLayer(tensors[f"enc{li}.w"], tensors[f"enc{li}.b"]))
        li += 1
    return layers


def cmd_online(cfg: ExperimentConfig, method: str, n_slots: int = 20) -> Path:
    """Continue the simulated world past the held-out span and score
    slot-by-slot predictions from the trained checkpoints."""
    out = Path(cfg.out_dir)
    ckpt_dir = out / "checkpoints"
    if not ckpt_dir.exists():
        raise FileNotFoundError(f"no checkpoints under {ckpt_dir}; run train first")
    profiles = experiments.make_profiles(cfg)
    traces = experiments.make_traces(cfg, profiles, extra_slots=n_slots + 1)
    flat_width = (cfg.window + 1) * cfg.n_contents

    local_predictors = []
    if method in ("sdaefl", "ddaefl"):
        for prof in profiles:
            enc = _load_dense_encoder(ckpt_dir / f"client_{prof.user_id}.ckpt")
            local_predictors.append(_dense_local_predictor(enc, flat_width))
        genc = _load_dense_encoder(ckpt_dir / "global_encoder.ckpt")
        global_predictor = _dense_global_predictor(genc, flat_width, cfg.n_contents)
    elif method == "drael":
        _, params, _ = model.load_model(ckpt_dir / "client_0.ckpt")
        for _ in profiles:
            local_predictors.append(experiments.model_local_predictor(params.encoder))
        global_predictor = experiments.model_global_predictor(params.encoder)
    else:
        for prof in profiles:
            _, params, _ = model.load_model(ckpt_dir / f"client_{prof.user_id}.ckpt")
            local_predictors.append(experiments.model_local_predictor(params.encoder))
        global_path = ckpt_dir / "global_encoder.ckpt"
        if global_path.exists():
            _, encoder, _ = model.load_encoder(global_path)
            global_predictor = experiments.model_global_predictor(encoder)
        else:
            global_predictor = None
    records, audits = experiments.online_prediction(
        cfg, profiles, traces, local_predictors, global_predictor, n_slots
    )
    if not all(audits):
        raise RuntimeError("server request buffer survived a slot")
    (out / "reports").mkdir(parents=True, exist_ok=True)
    path = out / "reports" / "online.csv"
    experiments.write_online_report(path, records, cfg.n_contents)
    return path


def _dense_local_predictor(encoder, flat_width):
    def predict(window_onehot, idx, target_slot):
        return baselines.dense_predict(encoder, window_onehot.reshape(-1))

    return predict


def _dense_global_predictor(encoder, flat_width, n_contents):
    def predict(request_rows, target_slot):
        flat = np.zeros(flat_width)
        flat[-n_contents:] = request_rows.sum(axis=0)
        return baselines.dense_predict(encoder, flat)

    return predict


def cmd_validate_theorem1(cfg: ExperimentConfig, n_slots: int = 100_000) -> Path:
    """Check the closed-form local-to-global mixture against the counting
    estimate for all four distribution families."""
    out = Path(cfg.out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    results = experiments.validate_mixture(cfg.seed, n_slots=n_slots)
    path = out / "reports" / "theorem1.csv"
    experiments.write_mixture_report(path, results)
    for res in results:
        print(
            f"{res.kind}: rmse={res.rmse:.6f} max_abs_gap={res.max_abs_gap:.6f}"
        )
    return path


def cmd_eval(cfg: ExperimentConfig) -> Path:
    """Summarize a finished run's report stream."""
    out = Path(cfg.out_dir)
    rows = fed.read_round_reports(out / "reports" / "rounds.csv")
    if not rows:
        raise ValueError("empty report stream")
    last_round = rows[-1]["round"]
    final = [r for r in rows if r["round"] == last_round]
    locals_ = [float(r["local_rmse"]) for r in final if r["local_rmse"]]
    global_vals = [float(r["global_rmse"]) for r in final if r["global_rmse"]]
    losses = [float(r["avg_loss"]) for r in final]
    method = final[0].get("method") or ("fedlwa" if cfg.scheme == "FedLWA" else "urfl")
    summary = {
        "method": method,
        "rounds": last_round,
        "final_mean_avg_loss": repr(float(np.mean(losses))),
        "final_mean_local_rmse": repr(float(np.mean(locals_))) if locals_ else "",
        "final_global_rmse": repr(global_vals[0]) if global_vals else "",
        "bytes_cum": final[0]["bytes_cum"],
    }
    path = out / "reports" / "eval.csv"
    header = ",".join(summary)
    values = ",".join(str(v) for v in summary.values())
    path.write_text(header + "\n" + values + "\n")
    print(values)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgepop")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    p_gen = sub.add_parser("generate", help="simulate and persist request traces")
    add_common(p_gen)

    p_train = sub.add_parser("train", help="train one method on generated traces")
    add_common(p_train)
    p_train.add_argument(
        "--method", choices=experiments.METHODS, default=None
    )

    p_online = sub.add_parser("online", help="slot-by-slot prediction from checkpoints")
    add_common(p_online)
    p_online.add_argument("--method", choices=experiments.METHODS, default=None)
    p_online.add_argument("--online-slots", type=int, default=20)

    p_val = sub.add_parser(
        "validate-theorem1", help="mixture formula vs counting estimate"
    )
    add_common(p_val, config_required=False)
    p_val.add_argument("--mc-slots", type=int, default=100_000)

    p_eval = sub.add_parser("eval", help="summarize a finished run")
    add_common(p_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load_cfg(args)
    if args.command == "generate":
        manifest = cmd_generate(cfg)
        print(f"wrote {manifest}")
    elif args.command == "train":
        method = _method_from(cfg, args)
        result = cmd_train(cfg, method)
        final_g = result.final_global_rmse()
        tail = "" if final_g is None else f", final global rmse {final_g:.4f}"
        print(f"trained {method} for {cfg.rounds} rounds{tail}")
    elif args.command == "online":
        method = _method_from(cfg, args)
        path = cmd_online(cfg, method, args.online_slots)
        print(f"wrote {path}")
    elif args.command == "validate-theorem1":
        cmd_validate_theorem1(cfg, args.mc_slots)
    elif args.command == "eval":
        cmd_eval(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
