"""Flat key/value experiment configuration.

The on-disk format is one ``key = value`` pair per line with keys equal
to the field names below; unknown keys fail fast.  Serialization uses
repr for floats, so parse(serialize(cfg)) reproduces cfg exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ExperimentConfig:
    n_contents: int = 24
    n_users: int = 3
    window: int = 10
    local_epochs: int = 32
    samples: int = 1000
    batch: int = 32
    rounds: int = 100
    widths: tuple[int, ...] = ()  # empty -> (128, 64, n_contents)
    lr: float = 1e-4
    dropout: float = 0.35
    scheme: str = "FedAvg"
    sample_k: int = 0  # 0 -> every user participates each round
    seed: int = 0
    lambda_range: tuple[float, float] = (0.5, 1.0)
    alpha_range: tuple[float, float] = (0.0, 2.5)
    g_range: tuple[int, int] = (2, 6)
    out_dir: str = "out"
    slots: int = 5000
    eval_slots: int = 200
    eval_windows: int = 64
    lambda_schedule: tuple[tuple[int, float], ...] = ()
    fedlwa_inverse: bool = False
    clip_norm: float = 0.0  # 0 -> no gradient clipping

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.lambda_range = tuple(float(v) for v in self.lambda_range)
        self.alpha_range = tuple(float(v) for v in self.alpha_range)
        self.g_range = tuple(int(v) for v in self.g_range)
        self.lambda_schedule = tuple(
            (int(s), float(r)) for s, r in self.lambda_schedule
        )
        self.validate()

    def validate(self) -> None:
        positive = {
            "n_contents": self.n_contents,
            "n_users": self.n_users,
            "window": self.window,
            "local_epochs": self.local_epochs,
            "samples": self.samples,
            "batch": self.batch,
            "slots": self.slots,
            "eval_slots": self.eval_slots,
            "eval_windows": self.eval_windows,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.scheme not in ("FedAvg", "FedLWA"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.sample_k < 0 or self.sample_k > self.n_users:
            raise ValueError("sample_k must lie in 0..n_users")
        if self.widths and self.widths[-1] != self.n_contents:
            raise ValueError("the last encoder width must equal n_contents")
        if self.slots <= self.window + 1:
            raise ValueError("slots must exceed the request window")

    @property
    def effective_widths(self) -> tuple[int, ...]:
        return self.widths if self.widths else (128, 64, self.n_contents)

    @property
    def effective_sample_k(self) -> int:
        return self.sample_k if self.sample_k else self.n_users


def _format_value(name: str, value) -> str:
    if name == "lambda_schedule":
        return ";".join(f"{s}:{r!r}" for s, r in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, kind: type, text: str):
    text = text.strip()
    if name == "lambda_schedule":
        if not text:
            return ()
        return tuple(
            (int(part.split(":")[0]), float(part.split(":")[1]))
            for part in text.split(";")
        )
    if name == "widths":
        return tuple(int(v) for v in text.split(",")) if text else ()
    if name in ("lambda_range", "alpha_range"):
        lo, hi = text.split(",")
        return (float(lo), float(hi))
    if name == "g_range":
        lo, hi = text.split(",")
        return (int(lo), int(hi))
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name} expects true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    field_map = {f.name: f for f in fields(ExperimentConfig)}
    base_types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in field_map:
            raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
        values[key] = _parse_value(key, base_types[key], value)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(serialize_config(cfg))
