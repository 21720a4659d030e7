"""Run configuration: a flat ``key = value`` text format mapped onto a dataclass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

TIMESTEP_DISTRIBUTIONS = ("uniform", "logit_normal")
TEACHER_SOURCES = ("copy_of_student_init", "pretrained_probe_teacher")
DISTILL_STRATEGIES = ("final_layer", "uniform", "progressive", "adaptive")
DECODER_MODES = ("flow", "pixel")


class ConfigError(ValueError):
    """Raised for unparseable config text or invalid field values."""

    def __init__(self, message: str, *, line: int | None = None, field_name: str | None = None):
        self.line = line
        self.field_name = field_name
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


@dataclass
class RunConfig:
    # geometry
    image_size: int = 32
    patch_size: int = 4
    encoder_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    mlp_ratio: int = 4
    latent_dim: int = 64
    # decoder; decoder_dim 0 means "same as hidden_dim"
    decoder_dim: int = 0
    gtb_depth: int = 6
    flow_head_depth: int = 4
    flow_head_width: int = 128
    decoder_mode: str = "flow"
    # objective
    beta: float = 2.0
    distill_strategy: str = "adaptive"
    lambda_d: float = 1.0
    lambda_f: float = 1.0
    timestep_distribution: str = "uniform"
    # optimization
    learning_rate: float = 2e-4
    optimizer_momenta: tuple[float, float] = (0.5, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 64
    epochs: int = 30
    max_steps: int = 0
    seed: int = 0
    # teacher
    teacher_source: str = "copy_of_student_init"
    teacher_pretrain_steps: int = 300
    # data; empty data_root selects the built-in synthetic corpus
    data_root: str = ""
    synthetic_size: int = 2048
    synthetic_eval_size: int = 512
    augment: bool = False
    # bookkeeping
    checkpoint_every: int = 500
    keep_checkpoints: int = 3
    log_flush_every: int = 50
    sample_steps: int = 1

    def __post_init__(self) -> None:
        self.optimizer_momenta = tuple(float(m) for m in self.optimizer_momenta)
        validate(self)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    @property
    def dec_dim(self) -> int:
        return self.decoder_dim or self.hidden_dim

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def toy_config(**overrides: Any) -> RunConfig:
    """Desk-scale defaults used by the acceptance runs and the ablation harness."""
    base = dict(
        image_size=32,
        patch_size=4,
        encoder_layers=4,
        hidden_dim=128,
        latent_dim=32,
        gtb_depth=2,
        flow_head_depth=4,
        flow_head_width=128,
        mlp_ratio=2,
        batch_size=64,
    )
    base.update(overrides)
    return RunConfig(**base)


def _fail(name: str, message: str) -> None:
    raise ConfigError(f"{name}: {message}", field_name=name)


def validate(cfg: RunConfig) -> None:
    if cfg.image_size <= 0 or cfg.patch_size <= 0:
        _fail("image_size", "image_size and patch_size must be positive")
    if cfg.image_size % cfg.patch_size:
        raise ConfigError("image_size not divisible by patch_size", field_name="image_size")
    if cfg.encoder_layers < 1:
        _fail("encoder_layers", "must be >= 1")
    if cfg.gtb_depth < 0:
        _fail("gtb_depth", "must be >= 0")
    if cfg.latent_dim < 1:
        _fail("latent_dim", "must be >= 1")
    for name in ("hidden_dim", "num_heads", "mlp_ratio", "flow_head_depth", "flow_head_width", "batch_size"):
        if getattr(cfg, name) < 1:
            _fail(name, "must be >= 1")
    if cfg.hidden_dim % cfg.num_heads or cfg.dec_dim % cfg.num_heads:
        _fail("num_heads", "must divide hidden_dim and decoder_dim")
    if cfg.decoder_dim < 0:
        _fail("decoder_dim", "must be >= 0")
    if cfg.beta < 0:
        _fail("beta", "must be nonnegative")
    if cfg.lambda_d < 0 or cfg.lambda_f < 0:
        _fail("lambda_d", "loss weights must be nonnegative")
    if cfg.lambda_d + cfg.lambda_f <= 0:
        _fail("lambda_d", "lambda_d + lambda_f must be > 0")
    if len(cfg.optimizer_momenta) != 2 or not all(0 < m < 1 for m in cfg.optimizer_momenta):
        _fail("optimizer_momenta", "need two values in (0, 1)")
    if cfg.learning_rate < 0:
        _fail("learning_rate", "must be nonnegative")
    if cfg.epochs < 0 or cfg.max_steps < 0:
        _fail("epochs", "epochs and max_steps must be nonnegative")
    if cfg.timestep_distribution not in TIMESTEP_DISTRIBUTIONS:
        _fail("timestep_distribution", f"expected one of {TIMESTEP_DISTRIBUTIONS}")
    if cfg.teacher_source not in TEACHER_SOURCES:
        _fail("teacher_source", f"expected one of {TEACHER_SOURCES}")
    if cfg.distill_strategy not in DISTILL_STRATEGIES:
        _fail("distill_strategy", f"expected one of {DISTILL_STRATEGIES}")
    if cfg.decoder_mode not in DECODER_MODES:
        _fail("decoder_mode", f"expected one of {DECODER_MODES}")
    if cfg.checkpoint_every < 1 or cfg.keep_checkpoints < 1 or cfg.sample_steps < 1:
        _fail("checkpoint_every", "checkpoint_every, keep_checkpoints and sample_steps must be >= 1")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str, line: int) -> Any:
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("booleans are written true|false")
            return raw == "true"
        if kind.startswith("tuple"):
            parts = [p for p in raw.strip("()[]").split(",") if p.strip()]
            return tuple(float(p) for p in parts)
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return raw[1:-1]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {exc}", line=line, field_name=name) from None


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", line=lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line=lineno, field_name=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, field_name=key)
        values[key] = _coerce(key, raw, lineno)
    return RunConfig(**values)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"' if value == "" or value != value.strip() else value
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
