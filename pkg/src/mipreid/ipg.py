"""Instance-aware prompt generation.

The generation-based generator attends per-layer learnable query vectors to the
current image tokens through one encoder layer shared by every backbone layer.
The fusion-based variant mixes a bank of prompt prototypes with
instance-dependent softmax weights and exists for ablations.
"""

from __future__ import annotations

import torch
from torch import nn

from mipreid.backbone import INIT_STD, EncoderLayer, encoder_layer_param_count, init_weights
from mipreid.config import ModelConfig
from mipreid.errors import DimensionMismatchError, MissingClassifierError


class _PromptClassifiers(nn.Module):
    """Per-layer ``BatchNorm1d -> Linear`` heads used by the enhancement loss."""

    def _init_heads(self, num_layers: int, dim: int, num_identities: int) -> None:
        for i in range(1, num_layers + 1):
            self.add_module(f"bn{i}", nn.BatchNorm1d(dim))
            self.add_module(f"cls{i}", nn.Linear(dim, num_identities))

    def prompt_logits(self, prompts: torch.Tensor, i: int) -> torch.Tensor:
        """Mean-pool ``(B, k, D)`` prompts, normalize, classify."""
        if not self.has_classifiers:
            raise MissingClassifierError("instance prompt classifiers are disabled")
        pooled = prompts.mean(dim=1)
        return getattr(self, f"cls{i}")(getattr(self, f"bn{i}")(pooled))


class InstancePromptGenerator(_PromptClassifiers):
    def __init__(
        self,
        num_layers: int,
        length: int,
        dim: int,
        num_heads: int = 1,
        mlp_ratio: float = 4.0,
        num_identities: int | None = None,
    ):
        super().__init__()
        self.num_layers = num_layers
        self.length = length
        self.dim = dim
        for i in range(1, num_layers + 1):
            self.register_parameter(f"v{i}", nn.Parameter(torch.randn(length, dim) * INIT_STD))
        self.trans = EncoderLayer(dim, num_heads, mlp_ratio)
        self.trans.apply(init_weights)
        self.has_classifiers = num_identities is not None
        if self.has_classifiers:
            self._init_heads(num_layers, dim, num_identities)

    @classmethod
    def from_config(cls, cfg: ModelConfig, use_iael: bool) -> "InstancePromptGenerator":
        return cls(
            cfg.num_layers,
            cfg.instance_prompt_len,
            cfg.embed_dim,
            num_heads=cfg.generator_heads,
            mlp_ratio=cfg.mlp_ratio,
            num_identities=cfg.num_identities if use_iael else None,
        )

    def query(self, i: int) -> nn.Parameter:
        if not 1 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.num_layers}]")
        return getattr(self, f"v{i}")

    def forward(self, image_tokens: torch.Tensor, i: int, mask: torch.Tensor | None = None) -> torch.Tensor:
        return generate_instance_prompt(self, image_tokens, i, mask=mask)


def generate_instance_prompt(
    state: InstancePromptGenerator,
    image_tokens: torch.Tensor,
    i: int,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the shared layer on ``[v_i, e_i]`` and keep the outputs at the ``v_i`` rows.

    ``image_tokens`` is ``(B, l, D)`` and excludes the class token. ``mask`` is
    an optional boolean attention mask over the ``k + l`` positions (True blocks).
    """
    if image_tokens.shape[-1] != state.dim:
        raise DimensionMismatchError(f"token width {image_tokens.shape[-1]} != generator width {state.dim}")
    batch = image_tokens.shape[0]
    queries = state.query(i).unsqueeze(0).expand(batch, -1, -1)
    out = state.trans(torch.cat([queries, image_tokens], dim=1), mask=mask)
    return out[:, : state.length]


class PromptPrototypeBank(nn.Module):
    """Per-layer prompt prototypes plus a head producing softmax mixing weights."""

    def __init__(self, num_layers: int, length: int, dim: int, bank_size: int = 8):
        super().__init__()
        if bank_size < 2:
            raise ValueError("bank_size must be >= 2")
        self.num_layers = num_layers
        self.length = length
        self.dim = dim
        self.bank_size = bank_size
        for i in range(1, num_layers + 1):
            self.register_parameter(
                f"prototypes{i}", nn.Parameter(torch.randn(bank_size, length, dim) * INIT_STD)
            )
        self.weight_head = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, bank_size))
        self.weight_head.apply(init_weights)

    def prototypes(self, i: int) -> nn.Parameter:
        if not 1 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.num_layers}]")
        return getattr(self, f"prototypes{i}")

    def mixing_weights(self, image_tokens: torch.Tensor) -> torch.Tensor:
        return self.weight_head(image_tokens.mean(dim=1)).softmax(dim=-1)


class FusedPromptGenerator(_PromptClassifiers):
    """Drop-in replacement for :class:`InstancePromptGenerator` built on a prototype bank."""

    def __init__(self, num_layers: int, length: int, dim: int, bank_size: int = 8, num_identities: int | None = None):
        super().__init__()
        self.num_layers = num_layers
        self.length = length
        self.dim = dim
        self.bank = PromptPrototypeBank(num_layers, length, dim, bank_size)
        self.has_classifiers = num_identities is not None
        if self.has_classifiers:
            self._init_heads(num_layers, dim, num_identities)

    @classmethod
    def from_config(cls, cfg: ModelConfig, use_iael: bool) -> "FusedPromptGenerator":
        return cls(
            cfg.num_layers,
            cfg.instance_prompt_len,
            cfg.embed_dim,
            bank_size=cfg.bank_size,
            num_identities=cfg.num_identities if use_iael else None,
        )

    def forward(self, image_tokens: torch.Tensor, i: int, weights: torch.Tensor | None = None) -> torch.Tensor:
        return fuse_instance_prompt(self.bank, image_tokens, i, weights=weights)


def fuse_instance_prompt(
    bank: PromptPrototypeBank,
    image_tokens: torch.Tensor,
    i: int,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """``(B, l, D)`` tokens -> ``(B, k, D)`` convex combination of layer-``i`` prototypes.

    ``weights`` overrides the computed mixing weights (tests force one-hot mixes).
    """
    if weights is None:
        weights = bank.mixing_weights(image_tokens)
    return torch.einsum("bp,pkd->bkd", weights, bank.prototypes(i))


def is_collapsed(prompts: torch.Tensor, tol: float = 1e-6) -> bool:
    """True when every prompt in the batch lies within ``tol`` of the batch mean."""
    flat = prompts.reshape(prompts.shape[0], -1)
    return bool((flat - flat.mean(dim=0, keepdim=True)).abs().max() <= tol)


def mean_pairwise_distance(prompts: torch.Tensor) -> float:
    flat = prompts.reshape(prompts.shape[0], -1).double()
    dist = torch.cdist(flat, flat)
    n = flat.shape[0]
    return float(dist.sum() / (n * (n - 1))) if n > 1 else 0.0


def _classifier_count(cfg: ModelConfig) -> int:
    d, c = cfg.embed_dim, cfg.num_identities
    return cfg.num_layers * (d * c + c + 2 * d)


def ipg_param_count(cfg: ModelConfig, use_iael: bool = False, variant: str = "generated") -> int:
    """Learnable parameters added by the instance prompt module (buffers excluded)."""
    n, k, d = cfg.num_layers, cfg.instance_prompt_len, cfg.embed_dim
    if k == 0:
        return 0
    if variant == "generated":
        total = n * k * d + encoder_layer_param_count(d, cfg.mlp_ratio)
    elif variant == "fused":
        total = n * cfg.bank_size * k * d + (2 * d + d * cfg.bank_size + cfg.bank_size)
    else:
        raise ValueError(f"no instance prompt module for variant {variant!r}")
    return total + (_classifier_count(cfg) if use_iael else 0)
