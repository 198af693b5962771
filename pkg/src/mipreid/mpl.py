"""Modality-aware prompt library: per-layer visible/infrared prompts and projections."""

from __future__ import annotations

import torch
from torch import nn

from mipreid.backbone import INIT_STD
from mipreid.config import ModelConfig
from mipreid.errors import DimensionMismatchError

VIS, IR = 0, 1
MODALITY_NAMES = {VIS: "vis", IR: "ir"}


class _LibraryLayer(nn.Module):
    def __init__(self, length: int, dim: int):
        super().__init__()
        self.vis = nn.Parameter(torch.randn(length, dim) * INIT_STD)
        self.ir = nn.Parameter(torch.randn(length, dim) * INIT_STD)
        self.proj = nn.Linear(dim, dim)
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(dim) + torch.randn(dim, dim) * INIT_STD)
            self.proj.bias.zero_()


class ModalityPromptLibrary(nn.Module):
    """Holds ``2 * N`` prompt blocks of shape ``(j, D)`` and ``N`` projections.

    Layers are 1-indexed to match the checkpoint names ``mpl.layer{i}.{vis|ir}``.
    """

    def __init__(self, num_layers: int, length: int, dim: int):
        super().__init__()
        self.num_layers = num_layers
        self.length = length
        self.dim = dim
        for i in range(1, num_layers + 1):
            self.add_module(f"layer{i}", _LibraryLayer(length, dim))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "ModalityPromptLibrary":
        return cls(cfg.num_layers, cfg.modality_prompt_len, cfg.embed_dim)

    def layer(self, i: int) -> _LibraryLayer:
        if not 1 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.num_layers}]")
        return getattr(self, f"layer{i}")

    def forward(self, modality: torch.Tensor, i: int) -> torch.Tensor:
        """Batched selection + projection: ``(B,)`` flags -> ``(B, j, D)``."""
        raw = select_batch(self, modality, i)
        return project_prompt(self, raw, i)


def select_prompt(lib: ModalityPromptLibrary, modality: int, i: int) -> nn.Parameter:
    """Return the live learnable block for one modality flag at layer ``i``."""
    block = lib.layer(i)
    if modality == VIS:
        return block.vis
    if modality == IR:
        return block.ir
    raise ValueError(f"unknown modality flag {modality!r}")


def select_batch(lib: ModalityPromptLibrary, modality: torch.Tensor, i: int) -> torch.Tensor:
    # only blocks of modalities present in the batch enter the graph, so an
    # absent modality receives no gradient at all
    present = torch.unique(modality).tolist()
    batch = modality.shape[0]
    if len(present) == 1:
        return select_prompt(lib, int(present[0]), i).unsqueeze(0).expand(batch, -1, -1)
    is_vis = (modality == VIS).view(batch, 1, 1)
    return torch.where(is_vis, select_prompt(lib, VIS, i), select_prompt(lib, IR, i))


def project_prompt(lib: ModalityPromptLibrary, raw: torch.Tensor, i: int) -> torch.Tensor:
    if raw.shape[-2:] != (lib.length, lib.dim):
        raise DimensionMismatchError(
            f"raw prompt shape {tuple(raw.shape[-2:])} != ({lib.length}, {lib.dim})"
        )
    return lib.layer(i).proj(raw)


def mpl_param_count(cfg: ModelConfig) -> int:
    n, j, d = cfg.num_layers, cfg.modality_prompt_len, cfg.embed_dim
    return n * (2 * j * d) + n * (d * d + d)


class GeneralPrompts(nn.Module):
    """Shared per-layer learnable prompts, blind to modality and instance."""

    def __init__(self, num_layers: int, length: int, dim: int):
        super().__init__()
        self.num_layers = num_layers
        self.length = length
        for i in range(1, num_layers + 1):
            self.register_parameter(f"layer{i}", nn.Parameter(torch.randn(length, dim) * INIT_STD))

    def forward(self, batch: int, i: int) -> torch.Tensor:
        return getattr(self, f"layer{i}").unsqueeze(0).expand(batch, -1, -1)
