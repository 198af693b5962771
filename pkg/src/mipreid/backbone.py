"""Mini vision transformer: patchify, patch embedding and prompt-aware encoder layers.

Token sequences are plain tensors of shape ``(batch, 1 + l, D)`` with the class
token at position 0 followed by the ``l`` image tokens.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from mipreid.errors import DimensionMismatchError

INIT_STD = 0.02


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split ``(B, C, H, W)`` (or ``(C, H, W)``) images into row-major patches.

    Returns ``(B, l, C, b, b)`` with ``l = (H/b) * (W/b)``.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    if images.dim() != 4:
        raise DimensionMismatchError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    b = patch_size
    batch, channels, height, width = images.shape
    if height % b or width % b:
        raise DimensionMismatchError(f"image {height}x{width} is not divisible by patch size {b}")
    rows, cols = height // b, width // b
    patches = images.reshape(batch, channels, rows, b, cols, b)
    patches = patches.permute(0, 2, 4, 1, 3, 5).reshape(batch, rows * cols, channels, b, b)
    return patches[0] if squeeze else patches


def unpatchify(patches: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    squeeze = patches.dim() == 4
    if squeeze:
        patches = patches.unsqueeze(0)
    batch, count, channels, b, _ = patches.shape
    rows, cols = height // b, width // b
    if rows * cols != count:
        raise DimensionMismatchError(f"{count} patches cannot tile a {height}x{width} image")
    images = patches.reshape(batch, rows, cols, channels, b, b).permute(0, 3, 1, 4, 2, 5)
    images = images.reshape(batch, channels, height, width)
    return images[0] if squeeze else images


class PatchEmbed(nn.Module):
    """Linear projection of flattened patches to ``embed_dim``."""

    def __init__(self, channels: int, patch_size: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(channels * patch_size * patch_size, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-3:] != (self.proj.in_features // self.patch_size**2, self.patch_size, self.patch_size):
            raise DimensionMismatchError(f"patch shape {tuple(patches.shape[-3:])} does not match embedding")
        return self.proj(patches.flatten(-3))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise DimensionMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, return_attention: bool = False):
        """``mask`` is boolean, broadcastable to ``(B, heads, T, T)``; True blocks a key."""
        batch, tokens, dim = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, tokens, dim)
        out = self.out(out)
        return (out, attn) if return_attention else out


class EncoderLayer(nn.Module):
    """Pre-norm transformer block with GELU feed-forward."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, return_attention: bool = False):
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"token width {x.shape[-1]} != layer width {self.dim}")
        attn_out = self.attn(self.norm1(x), mask=mask, return_attention=return_attention)
        if return_attention:
            attn_out, weights = attn_out
        x = x + attn_out
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, weights) if return_attention else x


def encoder_layer_param_count(dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    norms = 2 * 2 * dim
    attention = (dim * 3 * dim + 3 * dim) + (dim * dim + dim)
    mlp = (dim * hidden + hidden) + (hidden * dim + dim)
    return norms + attention + mlp


def forward_layer(
    layer: EncoderLayer,
    tokens: torch.Tensor,
    prompts: torch.Tensor | None = None,
    return_attention: bool = False,
):
    """Run one layer on ``[class, image tokens, prompts]`` and drop the prompt outputs.

    ``tokens`` is ``(B, 1 + l, D)``; ``prompts`` is ``(B, q, D)`` or None / q = 0.
    Output keeps only the first ``1 + l`` positions.
    """
    count = tokens.shape[1]
    if prompts is not None and prompts.shape[1] > 0:
        if prompts.shape[-1] != tokens.shape[-1]:
            raise DimensionMismatchError(
                f"prompt width {prompts.shape[-1]} != token width {tokens.shape[-1]}"
            )
        tokens = torch.cat([tokens, prompts], dim=1)
    out = layer(tokens, return_attention=return_attention)
    if return_attention:
        out, weights = out
        return out[:, :count], weights
    return out[:, :count]


def init_weights(module: nn.Module) -> None:
    """Truncation-free normal(0, 0.02) init for linears, unit/zero for norms."""
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=INIT_STD)
        nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.BatchNorm1d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
