"""Model and training configuration, plus loading from YAML config files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

IPG_VARIANTS = ("generated", "fused", "general")
OPTIMIZERS = ("sgd", "adamw")


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    modality_prompt_len: int = 16
    instance_prompt_len: int = 16
    num_identities: int = 16
    alpha1: float = 1.0
    alpha2: float = 0.5
    seed: int = 0
    generator_heads: int = 1
    bank_size: int = 8
    pixel_mean: float = 0.45
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads or self.embed_dim % self.generator_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by head count")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        # zero-length prompts are allowed: they express the plain ViT baseline
        if self.modality_prompt_len < 0 or self.instance_prompt_len < 0:
            raise ValueError("prompt lengths must be >= 0")
        if self.bank_size < 2:
            raise ValueError("bank_size must be >= 2")
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    base_lr: float = 1e-2
    min_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    optimizer: str = "sgd"
    stage1_fraction: float = 0.1
    seed: int = 0
    persons_per_batch: int = 4
    vis_per_person: int = 8
    ir_per_person: int = 8
    triplet_margin: float = 0.3
    iael_average_layers: bool = False
    val_fraction: float = 0.2
    eval_every: int = 1
    augment: bool = True
    use_mpl: bool = True
    use_ipg: bool = True
    ipg_variant: str = "generated"
    use_iael: bool = True

    def __post_init__(self):
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        if self.ipg_variant not in IPG_VARIANTS:
            raise ValueError(f"ipg_variant must be one of {IPG_VARIANTS}, got {self.ipg_variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.use_iael and not self.use_ipg:
            raise ValueError("use_iael requires use_ipg")
        if self.use_iael and self.ipg_variant == "general":
            raise ValueError("use_iael needs instance prompts; general prompts are instance-agnostic")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def arch(self) -> dict[str, Any]:
        return {
            "use_mpl": self.use_mpl,
            "use_ipg": self.use_ipg,
            "ipg_variant": self.ipg_variant,
            "use_iael": self.use_iael,
        }

    @property
    def batch_size(self) -> int:
        return self.persons_per_batch * (self.vis_per_person + self.ir_per_person)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def config_hash(model_cfg: ModelConfig, arch: dict[str, Any]) -> str:
    """Stable hash over the architecture-defining settings."""
    payload = {"model": dataclasses.asdict(model_cfg), "arch": dict(sorted(arch.items()))}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value: str, target_type: Any) -> Any:
    if target_type in (bool, "bool"):
        if isinstance(value, bool):
            return value
        lowered = str(value).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot interpret {value!r} as bool")
    if target_type in (int, "int"):
        return int(value)
    if target_type in (float, "float"):
        return float(value)
    return value if isinstance(value, str) else str(value)


def _build(cls, section: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(section) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, known[k].type) for k, v in section.items()}
    return cls(**kwargs)


@dataclass
class RunConfig:
    """Bundle of the config sections understood by the CLI."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, Any] = field(default_factory=dict)
    ablation: dict[str, Any] = field(default_factory=dict)


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML file with optional `model`, `train`, `data` and `ablation` sections.

    Overrides take the form ``section.key=value`` and win over the file.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    sections = {name: dict(raw.get(name) or {}) for name in ("model", "train", "data", "ablation")}
    extra = set(raw) - set(sections)
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in sections:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        sections[section][name] = yaml.safe_load(value)
    return RunConfig(
        model=_build(ModelConfig, sections["model"]),
        train=_build(TrainConfig, sections["train"]),
        data=sections["data"],
        ablation=sections["ablation"],
    )
