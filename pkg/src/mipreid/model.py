"""The assembled prompted ViT used for training, retrieval and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from mipreid.backbone import INIT_STD, EncoderLayer, PatchEmbed, forward_layer, init_weights, patchify
from mipreid.config import ModelConfig, TrainConfig, config_hash
from mipreid.ipg import FusedPromptGenerator, InstancePromptGenerator
from mipreid.mpl import GeneralPrompts, ModalityPromptLibrary


@dataclass
class ForwardOutput:
    pre_bn: torch.Tensor
    feat: torch.Tensor
    logits: torch.Tensor
    instance_prompts: list[torch.Tensor] = field(default_factory=list)
    attention: torch.Tensor | None = None


class MIPNet(nn.Module):
    """ViT trunk with optional modality prompts, instance prompts and BNNeck head.

    Prompt sequence order inside each layer is ``[class, image tokens, p^M, p^I]``.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        use_mpl: bool = True,
        use_ipg: bool = True,
        ipg_variant: str = "generated",
        use_iael: bool = True,
    ):
        super().__init__()
        if use_iael and not use_ipg:
            raise ValueError("use_iael requires use_ipg")
        self.cfg = cfg
        self.arch = {"use_mpl": use_mpl, "use_ipg": use_ipg, "ipg_variant": ipg_variant, "use_iael": use_iael}
        d, n = cfg.embed_dim, cfg.num_layers
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.patch_embed = PatchEmbed(cfg.channels, cfg.patch_size, d)
            self.cls_token = nn.Parameter(torch.randn(1, 1, d) * INIT_STD)
            self.pos_embed = nn.Parameter(torch.randn(1, 1 + cfg.num_patches, d) * INIT_STD)
            self.layers = nn.ModuleList(EncoderLayer(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(n))
            self.norm = nn.LayerNorm(d)
            self.bnneck = nn.BatchNorm1d(d)
            self.head = nn.Linear(d, cfg.num_identities)
            self.apply(init_weights)

            self.mpl = ModalityPromptLibrary.from_config(cfg) if use_mpl else None
            self.ipg = None
            self.general = None
            if use_ipg and ipg_variant == "generated":
                self.ipg = InstancePromptGenerator.from_config(cfg, use_iael)
            elif use_ipg and ipg_variant == "fused":
                self.ipg = FusedPromptGenerator.from_config(cfg, use_iael)
            elif use_ipg and ipg_variant == "general":
                if use_iael:
                    raise ValueError("general prompts cannot carry the enhancement loss")
                self.general = nn.Module()
                if not use_mpl:
                    self.general.mpl = GeneralPrompts(n, cfg.modality_prompt_len, d)
                self.general.ipg = GeneralPrompts(n, cfg.instance_prompt_len, d)
            elif use_ipg:
                raise ValueError(f"unknown ipg_variant {ipg_variant!r}")

    @classmethod
    def from_configs(cls, cfg: ModelConfig, train_cfg: TrainConfig) -> "MIPNet":
        return cls(cfg, **train_cfg.arch)

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg, self.arch)

    @property
    def uses_iael(self) -> bool:
        return self.ipg is not None and self.ipg.has_classifiers

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Images ``(B, C, H, W)`` in [0, 1] -> layer-0 token sequence ``(B, 1 + l, D)``."""
        images = (images - self.cfg.pixel_mean) / self.cfg.pixel_std
        tokens = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def layer_prompts(self, tokens: torch.Tensor, modality: torch.Tensor, i: int):
        """Prompts fed to layer ``i`` (1-based) and the instance part alone (or None)."""
        batch = tokens.shape[0]
        parts = []
        instance = None
        if self.mpl is not None:
            parts.append(self.mpl(modality, i))
        elif self.general is not None and hasattr(self.general, "mpl"):
            parts.append(self.general.mpl(batch, i))
        if self.ipg is not None:
            instance = self.ipg(tokens[:, 1:], i)
            parts.append(instance)
        elif self.general is not None:
            parts.append(self.general.ipg(batch, i))
        prompts = torch.cat(parts, dim=1) if parts else None
        return prompts, instance

    def forward(self, images: torch.Tensor, modality: torch.Tensor, return_attention: bool = False) -> ForwardOutput:
        x = self.embed(images)
        instance_prompts = []
        attention = None
        last = len(self.layers)
        for i, layer in enumerate(self.layers, start=1):
            prompts, instance = self.layer_prompts(x, modality, i)
            if instance is not None:
                instance_prompts.append(instance)
            if return_attention and i == last:
                x, attention = forward_layer(layer, x, prompts, return_attention=True)
            else:
                x = forward_layer(layer, x, prompts)
        pre_bn = self.norm(x[:, 0])
        feat = self.bnneck(pre_bn)
        return ForwardOutput(pre_bn, feat, self.head(feat), instance_prompts, attention)

    @torch.no_grad()
    def extract_features(self, images: torch.Tensor, modality: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
        """Inference-mode BNNeck features, computed in fixed-size chunks."""
        was_training = self.training
        self.eval()
        try:
            chunks = [
                self(images[s : s + batch_size], modality[s : s + batch_size]).feat
                for s in range(0, images.shape[0], batch_size)
            ]
        finally:
            self.train(was_training)
        return torch.cat(chunks)


def extract_feature(model: MIPNet, image: torch.Tensor, modality: int) -> torch.Tensor:
    """Single image ``(C, H, W)`` -> feature vector of length D."""
    flag = torch.tensor([modality])
    return model.extract_features(image.unsqueeze(0), flag)[0]


def parameter_groups(model: MIPNet) -> dict[str, int]:
    """Learnable parameter counts per top-level component."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        key = top if top in ("mpl", "ipg", "general") else "backbone"
        counts[key] = counts.get(key, 0) + p.numel()
    return counts
