"""Identity, batch-hard triplet and instance-enhancement losses, plus the staged total."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from mipreid.errors import MissingClassifierError, SamplerContractError

DEFAULT_MARGIN = 0.3


class Stage(enum.Enum):
    STAGE1 = 1
    STAGE2 = 2


def stage_for_epoch(epoch: int, epochs: int, stage1_fraction: float) -> Stage:
    boundary = int(round(stage1_fraction * epochs))
    return Stage.STAGE1 if epoch < boundary else Stage.STAGE2


def id_loss(features: torch.Tensor, labels: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return F.cross_entropy(head(features), labels)


def pairwise_euclidean(features: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    # explicit differences keep the distances exactly translation invariant;
    # eps keeps sqrt differentiable on the diagonal
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    return (diff.pow(2).sum(-1) + eps).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Batch-hard triplet loss: hardest positive and negative per anchor."""
    _, counts = torch.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise SamplerContractError("every identity in a triplet batch needs at least two samples")
    dist = pairwise_euclidean(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    hardest_pos = dist.masked_fill(~same | eye, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def iael_loss(
    state: nn.Module,
    prompts_per_layer: list[torch.Tensor],
    labels: torch.Tensor,
    average_layers: bool = False,
) -> torch.Tensor:
    """Sum over layers of the identity cross-entropy of each layer's instance prompts.

    ``state`` is an instance prompt module carrying per-layer classifiers.
    """
    if not getattr(state, "has_classifiers", False):
        raise MissingClassifierError("instance prompt state has no per-layer classifiers")
    if len(prompts_per_layer) != state.num_layers:
        raise ValueError(f"expected prompts for {state.num_layers} layers, got {len(prompts_per_layer)}")
    total = sum(
        F.cross_entropy(state.prompt_logits(prompts, i), labels)
        for i, prompts in enumerate(prompts_per_layer, start=1)
    )
    return total / state.num_layers if average_layers else total


@dataclass
class LossReport:
    l_id: torch.Tensor
    l_tri: torch.Tensor
    l_iael: torch.Tensor
    total: torch.Tensor
    stage: Stage

    def as_floats(self) -> dict[str, float]:
        return {
            "l_id": float(self.l_id.detach()),
            "l_tri": float(self.l_tri.detach()),
            "l_iael": float(self.l_iael.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    l_id: torch.Tensor,
    l_tri: torch.Tensor,
    l_iael: torch.Tensor | float,
    stage: Stage,
    alpha1: float = 1.0,
    alpha2: float = 0.5,
) -> LossReport:
    l_id, l_tri, l_iael = (v if torch.is_tensor(v) else torch.tensor(float(v)) for v in (l_id, l_tri, l_iael))
    if stage is Stage.STAGE1:
        total = l_id + l_tri
    else:
        total = alpha1 * (l_id + l_tri) + alpha2 * l_iael
    return LossReport(l_id, l_tri, l_iael, total, stage)
