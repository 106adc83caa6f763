"""Training configuration and the plain-text ``key = value`` run-config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    # architecture
    d_model: int = 64
    alpha: int = 16
    k: int = 128
    r: int = 2
    # loss weights
    lambda_skip: float = 0.1
    lambda_ghost: float = 0.1
    lambda_tok: float = 1.0
    # hierarchical learning rates / weight decay per parameter group
    lr_backbone: float = 1e-4
    wd_backbone: float = 0.1
    lr_skip: float = 2e-4
    wd_skip: float = 0.0
    lr_encoder: float = 2e-4
    wd_encoder: float = 0.0
    lr_decoder: float = 2e-4
    wd_decoder: float = 0.0
    clip_norm: float = 1.0
    # exposure to the model's own latents during training (both off by default)
    latent_noise_std: float = 0.0  # Gaussian noise added to teacher-forced latent inputs
    self_feed_prob: float = 0.0  # share of each batch whose latent inputs are the model's own predictions
    lr_schedule: str = "constant"  # or "cosine": decay every group to lr_min_factor * lr over the run
    lr_min_factor: float = 0.0
    # schedule
    epochs: int = 30
    batch_size: int = 32
    dead_threshold: int = 200
    val_fraction: float = 0.1
    seed: int = 0
    # ablations
    disable_skip: bool = False
    disable_sparse: bool = False
    dense_activation: str = "linear"  # code used when disable_sparse is set: "linear" or "relu"
    # variants left open by the method description
    ste_mode: str = "masked"  # or "passthrough"
    fvu_per_dimension: bool = False
    standardize_per_dimension: bool = False
    b_dec_init: str = "target"  # or "hidden"
    mu_mode: str = "frozen"  # or "running"
    mu_momentum: float = 0.99
    decoder_grad_projection: bool = True
    embed_std: float = 1.0
    calibration_size: int = 512
    max_steps_factor: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lrs = [self.lr_backbone, self.lr_skip, self.lr_encoder, self.lr_decoder]
        if min(lrs) <= 0:
            raise ValueError("all learning rates must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.dead_threshold < 1:
            raise ValueError("dead_threshold must be >= 1")
        if not 0 <= self.k <= self.alpha * self.d_model:
            raise ValueError("k must lie in [0, alpha * d_model]")
        if self.r < 1 or self.alpha < 1 or self.batch_size < 1:
            raise ValueError("r, alpha and batch_size must be >= 1")
        if self.ste_mode not in ("masked", "passthrough"):
            raise ValueError(f"unknown ste_mode {self.ste_mode!r}")
        if self.b_dec_init not in ("target", "hidden"):
            raise ValueError(f"unknown b_dec_init {self.b_dec_init!r}")
        if self.dense_activation not in ("linear", "relu"):
            raise ValueError(f"unknown dense_activation {self.dense_activation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.lr_min_factor <= 1:
            raise ValueError("lr_min_factor must lie in [0, 1]")
        if self.latent_noise_std < 0:
            raise ValueError("latent_noise_std must be >= 0")
        if not 0 <= self.self_feed_prob <= 1:
            raise ValueError("self_feed_prob must lie in [0, 1]")
        if self.mu_mode not in ("frozen", "running"):
            raise ValueError(f"unknown mu_mode {self.mu_mode!r}")

    @property
    def d_feat(self) -> int:
        return self.alpha * self.d_model

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, extra_keys: dict[str, type] | None = None) -> tuple[dict, dict]:
    """Parse ``key = value`` lines into (train-config values, extra values).

    Blank lines and ``#`` comments are ignored; unknown keys raise ``KeyError``.
    """
    types = {f.name: f.type for f in fields(TrainConfig)}
    extra_keys = extra_keys or {}
    cfg, extra = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in types:
            cfg[key] = _coerce(value, types[key])
        elif key in extra_keys:
            extra[key] = _coerce(value, extra_keys[key])
        else:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
    return cfg, extra


def format_config(values: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in values.items())


def load_config(path: str | Path, extra_keys: dict[str, type] | None = None) -> tuple[TrainConfig, dict]:
    cfg, extra = parse_config_text(Path(path).read_text(encoding="utf-8"), extra_keys)
    return TrainConfig(**cfg), extra
