"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .factorize import FactorizationScheme
from .generator import ARConfig
from .lfq import LFQConfig
from .tokenizer import TokenizerConfig

SEED_ENV = "LFQGEN_SEED"


class ConfigError(ValueError):
    pass


# per-stage optimizer defaults, applied when a key is left unset
_STAGE_DEFAULTS = {
    "tokenizer": dict(beta1=0.5, beta2=0.9, weight_decay=0.0, grad_clip=0.0),
    "ar": dict(beta1=0.9, beta2=0.95, weight_decay=5e-2, grad_clip=1.0),
}


@dataclass
class RunConfig:
    stage: str = "tokenizer"
    seed: int = 0
    dtype: str = "float32"
    dataset: str = ""
    checkpoint: str = ""
    lr: float = 1e-4
    beta1: float | None = None
    beta2: float | None = None
    weight_decay: float | None = None
    grad_clip: float | None = None
    batch_size: int = 16
    steps: int = 1000
    warmup_steps: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    # tokenizer
    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    res_blocks: int = 1
    groups: int = 8
    bits: int = 8
    temperature: float = 0.1
    entropy_weight: float = 0.1
    commitment_weight: float = 0.25
    entropy_mode: str = "factorized"
    # autoregressive model
    inter_blocks: int = 4
    intra_blocks: int = 2
    width: int = 128
    heads: int = 4
    subtoken_bits: tuple[int, ...] = (3, 5)
    bit_order: str = "low"
    num_classes: int = 10
    seq_len: int = 16
    ffn_mult: float = 8 / 3
    dropout: float = 0.1
    cond_drop: float = 0.1

    def __post_init__(self):
        if self.stage not in _STAGE_DEFAULTS:
            raise ConfigError(f"stage must be one of {sorted(_STAGE_DEFAULTS)}, got {self.stage!r}")
        for key, value in _STAGE_DEFAULTS[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.channels = tuple(self.channels)
        self.subtoken_bits = tuple(self.subtoken_bits)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be nonnegative")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps nonnegative")
        if self.bit_order not in ("low", "high"):
            raise ConfigError("bit_order must be 'low' or 'high'")
        if self.entropy_mode not in ("factorized", "exact"):
            raise ConfigError("entropy_mode must be 'factorized' or 'exact'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    # -- model configs --------------------------------------------------------
    def lfq_config(self) -> LFQConfig:
        return LFQConfig(self.bits, self.temperature, self.entropy_weight, self.commitment_weight, self.entropy_mode)

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(
            image_size=self.image_size,
            in_channels=self.in_channels,
            channels=self.channels,
            res_blocks=self.res_blocks,
            groups=self.groups,
            lfq=self.lfq_config(),
        )

    def scheme(self) -> FactorizationScheme:
        return FactorizationScheme(self.subtoken_bits, low_first=self.bit_order == "low")

    def ar_config(self) -> ARConfig:
        return ARConfig(
            inter_blocks=self.inter_blocks,
            intra_blocks=self.intra_blocks,
            width=self.width,
            heads=self.heads,
            scheme=self.scheme(),
            num_classes=self.num_classes,
            seq_len=self.seq_len,
            ffn_mult=self.ffn_mult,
            dropout=self.dropout,
            cond_drop=self.cond_drop,
        )

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {
    "stage": str, "seed": int, "dtype": str, "dataset": str, "checkpoint": str,
    "lr": float, "beta1": float, "beta2": float, "weight_decay": float, "grad_clip": float,
    "batch_size": int, "steps": int, "warmup_steps": int, "log_every": int, "checkpoint_every": int,
    "image_size": int, "in_channels": int, "channels": "ints", "res_blocks": int, "groups": int,
    "bits": int, "temperature": float, "entropy_weight": float, "commitment_weight": float,
    "entropy_mode": str,
    "inter_blocks": int, "intra_blocks": int, "width": int, "heads": int, "subtoken_bits": "ints",
    "bit_order": str, "num_classes": int, "seq_len": int, "ffn_mult": float, "dropout": float,
    "cond_drop": float,
}
assert set(_FIELD_TYPES) == {f.name for f in fields(RunConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "ints":
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown or repeated keys fail."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str, environ=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    return apply_env_overrides(cfg, environ)


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    env = os.environ if environ is None else environ
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.replace(seed=int(raw))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
