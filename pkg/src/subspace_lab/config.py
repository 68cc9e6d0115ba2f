"""Flat run configuration shared by the trainer and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .contrastive import AugmentationSpec
from .data import SynthSpec
from .errors import ConfigError

METHODS = ("dsc", "bdsc", "clbdsc")
AFFINITIES = ("abs_sym", "abs_sym_threshold")


@dataclass
class RunConfig:
    method: str = "bdsc"

    # data source: "synthetic" | "tensor" (data_path + labels_path) | "pgm" (directory)
    data_kind: str = "synthetic"
    data_path: str | None = None
    labels_path: str | None = None
    resize: list[int] | None = None
    synth_subspaces: int = 5
    synth_dim: int = 4
    synth_ambient: int = 30
    synth_per: int = 50
    synth_noise: float = 0.0
    synth_seed: int = 7
    n_clusters: int | None = None

    # autoencoder
    arch: str = "dense"
    widths: list[int] = field(default_factory=lambda: [30])
    channels: list[int] = field(default_factory=lambda: [8, 16, 16])
    kernel_size: int = 3
    stride: int = 2
    activation: str = "relu"
    batchnorm: bool = False
    bias: bool = False
    latent_activation: bool = False
    init: str = "glorot"
    pretrained: bool = False

    # optimization
    batch_size: int = 32
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    se_pretrain_epochs: int = 0
    lr: float = 1e-3
    pretrain_lr: float | None = None
    lr_c: float | None = None
    consistency_reference_k: int | None = None
    shuffle: bool = True
    mean_recon: bool = False
    alpha: float = 50.0
    beta: float = 1.0
    tau: float = 0.5
    c_init: str = "auto"
    c_init_scale: float = 1e-4
    include_positive_in_denominator: bool = True

    # augmentation (contrastive path)
    aug_crop_min: float = 1.0
    aug_crop_max: float = 1.0
    aug_hflip: float = 0.0
    aug_gray: float = 0.0
    aug_brightness: float = 0.0
    aug_noise: float = 0.0

    # clustering
    affinity: str = "abs_sym"
    affinity_q: int | None = None
    ridge_lambda: float = 0.01
    seed: int = 0
    cluster_seed: int = 0

    def validate(self) -> RunConfig:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.data_kind not in ("synthetic", "tensor", "pgm"):
            raise ConfigError(f"unknown data_kind {self.data_kind!r}")
        if self.data_kind != "synthetic" and not self.data_path:
            raise ConfigError(f"data_kind={self.data_kind!r} needs data_path")
        if self.arch not in ("dense", "conv"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        for name in ("pretrain_epochs", "finetune_epochs", "se_pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lr", "pretrain_lr", "lr_c"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.consistency_reference_k is not None and self.consistency_reference_k < 1:
            raise ConfigError("consistency_reference_k must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.c_init not in ("auto", "zeros", "noise"):
            raise ConfigError(f"unknown c_init {self.c_init!r}")
        if self.affinity not in AFFINITIES:
            raise ConfigError(f"affinity must be one of {AFFINITIES}")
        if self.affinity == "abs_sym_threshold" and (self.affinity_q is None or self.affinity_q < 1):
            raise ConfigError("abs_sym_threshold needs affinity_q >= 1")
        if self.data_kind == "synthetic":
            self.synth_spec().validate()
        self.augmentation()
        return self

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.synth_subspaces, self.synth_dim, self.synth_ambient, self.synth_per, self.synth_noise, self.synth_seed)

    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(
            (self.aug_crop_min, self.aug_crop_max), self.aug_hflip, self.aug_gray, self.aug_brightness, self.aug_noise, self.seed
        )

    def effective_c_init(self) -> str:
        if self.c_init != "auto":
            return self.c_init
        # a zero C makes every contrastive anchor degenerate
        return "noise" if self.method == "clbdsc" else "zeros"

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def coerce_override(cfg: RunConfig, key: str, raw: str):
    """Parse a ``--key value`` override using the field's current type."""
    names = {f.name for f in dataclasses.fields(cfg)}
    if key not in names:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    current = getattr(cfg, key)
    if isinstance(current, bool) and isinstance(value, str):
        lowered = value.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        value = lowered in ("true", "1", "yes")
    elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif isinstance(current, list) and isinstance(value, (int, float)):
        value = [value]
    elif isinstance(current, list) and isinstance(value, str):
        try:
            value = [int(v) for v in value.split(",")]
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integers, got {raw!r}") from exc
    expected = type(current) if current is not None else None
    if expected is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if expected is float and (not isinstance(value, (int, float)) or isinstance(value, bool)):
        raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if expected is str and not isinstance(value, str):
        value = raw
    return value
