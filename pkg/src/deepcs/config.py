"""Flat ``key=value`` run configuration for training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .measurement import MASK_MODES, SamplingConfig
from .model import VARIANTS
from .reconstructor import ReconWidths
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "r2cs_net"
    data_dir: str = ""  # empty means the bundled corpus
    block_h: int = 8
    block_w: int = 8
    channels: int = 3
    mask: str = "dct"
    widths: ReconWidths = field(default_factory=ReconWidths)
    gd_steps: int = 100
    gd_lr: float = 0.05
    patch_stride: int = 0  # 0 means non-overlapping
    max_patches: int = 1000
    model_out: str = "model.r2cs"
    loss_csv: str = "loss.csv"
    manifest: str = "manifest.json"

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.block_h, self.block_w, self.channels, self.train.sampling_rate)

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("train", "widths")}
        d.update(self.train.as_dict())
        d.update(asdict(self.widths))
        return d


_RUN_KEYS = {f.name: f.type for f in fields(RunConfig) if f.name not in ("train", "widths")}
_WIDTH_KEYS = [f.name for f in fields(ReconWidths)]


def _cast(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Blank lines and ``#`` comments are ignored; every other line is ``key = value``."""
    base = RunConfig()
    run_vals, train_vals, width_vals = {}, {}, {}
    train_defaults = base.train.as_dict()
    width_defaults = asdict(base.widths)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in train_defaults:
            target, default = train_vals, train_defaults[key]
        elif key in width_defaults:
            target, default = width_vals, width_defaults[key]
        elif key in _RUN_KEYS:
            target, default = run_vals, getattr(base, key)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in target:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            target[key] = _cast(value, default)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        cfg = RunConfig(train=TrainConfig(**train_vals), widths=ReconWidths(**width_vals), **run_vals)
        validate(cfg)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.mask not in ("dct", "identity"):
        raise ConfigError(f"mask must be one of {MASK_MODES[:2]} for training, got {cfg.mask!r}")
    cfg.sampling()
    cfg.train.check_blocks(cfg.block_h, cfg.block_w)
    if cfg.patch_stride < 0 or cfg.max_patches < 0:
        raise ConfigError("patch_stride and max_patches must be >= 0")
    if cfg.gd_steps < 0 or cfg.gd_lr <= 0:
        raise ConfigError("gd_steps must be >= 0 and gd_lr > 0")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def format_config(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.as_dict().items()) + "\n"
