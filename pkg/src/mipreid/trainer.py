"""Training loop with cosine decay and a two-stage objective, ablations and diagnostic dumps."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mipreid.checkpoint import save_checkpoint, write_container
from mipreid.config import ModelConfig, TrainConfig
from mipreid.dataset import AugmentFlags, SynthDataset, load_batch, sample_batch
from mipreid.errors import NaNLossError
from mipreid.evaluator import (
    Direction,
    EvalSummary,
    Protocol,
    evaluate_all,
    evaluate_features,
    headline_map,
    headline_rank1,
    write_results,
)
from mipreid.model import MIPNet
from mipreid.objectives import Stage, iael_loss, stage_for_epoch, total_loss, triplet_loss

log = logging.getLogger(__name__)

METRICS_HEADER = "step,stage,l_id,l_tri,l_iael,total,lr"


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps <= 0:
        return cfg.base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def split_validation(train_ids, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Hold out ``fraction`` of the training identities for checkpoint selection."""
    ids = np.asarray(sorted(train_ids))
    n_val = int(math.ceil(fraction * len(ids))) if fraction > 0 else 0
    order = np.random.default_rng([seed, 5]).permutation(len(ids))
    val = sorted(int(i) for i in ids[order[:n_val]])
    fit = sorted(int(i) for i in ids[order[n_val:]])
    return fit, val


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    """SGD with momentum by default; AdamW for from-scratch runs that SGD cannot fit in budget."""
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


@dataclass
class TrainResult:
    model: MIPNet
    metrics: list[str]
    fit_ids: list[int]
    val_ids: list[int]
    label_map: dict[int, int]
    best_val_map: float = float("nan")
    best_epoch: int = -1
    best_state: dict | None = field(default=None, repr=False)
    seconds: float = 0.0
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    stage_steps: dict[str, int] = field(default_factory=dict)


def dataset_features(model: MIPNet, dataset: SynthDataset, indices=None) -> np.ndarray:
    """BNNeck features for the given image rows (all rows when None) on clean images.

    Rows not requested stay zero so that global dataset indices remain valid.
    """
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    images = dataset.tensor(indices)
    modality = torch.as_tensor(dataset.modalities[indices], dtype=torch.long)
    feats = model.extract_features(images, modality).double().numpy()
    out = np.zeros((len(dataset), feats.shape[1]))
    out[indices] = feats
    return out


def _dump_nan_batch(out_dir: Path | None, step: int, images, labels, modalities) -> Path | None:
    if out_dir is None:
        return None
    base = out_dir / f"nan_batch_step{step}"
    write_container(
        base,
        {"images": images.numpy(), "labels": labels.numpy(), "modalities": modalities.numpy()},
        {"step": str(step)},
    )
    return base


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: SynthDataset,
    out_dir: str | Path | None = None,
    augment_flags: AugmentFlags = AugmentFlags(),
) -> TrainResult:
    """Train one model; writes ``metrics.csv`` and ``best``/``final`` checkpoints when ``out_dir`` is set."""
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    fit_ids, val_ids = split_validation(dataset.train_ids, train_cfg.val_fraction, train_cfg.seed)
    label_map = {ident: n for n, ident in enumerate(fit_ids)}
    model_cfg = model_cfg.replace(num_identities=len(fit_ids))
    model = MIPNet.from_configs(model_cfg, train_cfg)
    optimizer = make_optimizer(model, train_cfg)

    n_images = len(dataset.select(fit_ids))
    steps_per_epoch = max(1, n_images // train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    rng = np.random.default_rng([train_cfg.seed, 4])
    lookup = np.vectorize(label_map.__getitem__, otypes=[np.int64])

    metrics = [METRICS_HEADER]
    result = TrainResult(model, metrics, fit_ids, val_ids, label_map, optimizer=optimizer)
    step = 0
    for epoch in range(train_cfg.epochs):
        stage = stage_for_epoch(epoch, train_cfg.epochs, train_cfg.stage1_fraction)
        model.train()
        for _ in range(steps_per_epoch):
            lr = lr_at(step, total_steps, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            plan = sample_batch(
                dataset, train_cfg.persons_per_batch, train_cfg.vis_per_person, train_cfg.ir_per_person, rng, fit_ids
            )
            images, ids, modalities = load_batch(
                dataset, plan, train_cfg.seed, step, train=train_cfg.augment, flags=augment_flags
            )
            labels = torch.from_numpy(lookup(ids.numpy()))
            out = model(images, modalities)
            l_id = torch.nn.functional.cross_entropy(out.logits, labels)
            l_tri = triplet_loss(out.pre_bn, labels, train_cfg.triplet_margin)
            if stage is Stage.STAGE2 and model.uses_iael:
                l_iael = iael_loss(model.ipg, out.instance_prompts, labels, train_cfg.iael_average_layers)
            else:
                l_iael = torch.zeros(())
            report = total_loss(l_id, l_tri, l_iael, stage, model_cfg.alpha1, model_cfg.alpha2)
            if not torch.isfinite(report.total):
                dump = _dump_nan_batch(out_dir, step, images, labels, modalities)
                raise NaNLossError(f"non-finite loss at step {step}", dump)
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()
            vals = report.as_floats()
            metrics.append(
                f"{step},{stage.name},{vals['l_id']:.8g},{vals['l_tri']:.8g},{vals['l_iael']:.8g},"
                f"{vals['total']:.8g},{lr:.8g}"
            )
            step += 1
            result.stage_steps[stage.name] = result.stage_steps.get(stage.name, 0) + 1
        if val_ids and ((epoch + 1) % train_cfg.eval_every == 0 or epoch + 1 == train_cfg.epochs):
            feats = dataset_features(model, dataset, dataset.select(val_ids))
            val = evaluate_features(
                dataset, feats, Protocol.SINGLE_SHOT, Direction.IR_TO_VIS, draws=3, seed=train_cfg.seed, ids=val_ids
            )
            if not result.best_val_map >= val.map:
                result.best_val_map, result.best_epoch = val.map, epoch
                result.best_state = copy.deepcopy(model.state_dict())
            log.info("epoch %d stage %s val map %.4f", epoch, stage.name, val.map)

    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text("\n".join(metrics) + "\n")
        meta = {"epochs": str(train_cfg.epochs), "seed": str(train_cfg.seed)}
        save_checkpoint(model, out_dir / "final", meta)
        if result.best_state is not None:
            best = copy.deepcopy(model)
            best.load_state_dict(result.best_state)
            save_checkpoint(best, out_dir / "best", meta | {"best_epoch": str(result.best_epoch)})
    return result


# ---------------------------------------------------------------- probes & dumps


@torch.no_grad()
def pooled_instance_prompts(model: MIPNet, images: torch.Tensor, modality: torch.Tensor) -> np.ndarray:
    """Concatenation over layers of the mean-pooled instance prompts, per image."""
    model.eval()
    out = model(images, modality)
    if not out.instance_prompts:
        raise ValueError("model has no instance prompt module")
    return torch.cat([p.mean(dim=1) for p in out.instance_prompts], dim=1).double().numpy()


def probe_accuracy(model: MIPNet, dataset: SynthDataset, ids) -> float:
    """Fit a linear identity probe on half of each identity's images, score on the rest."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    indices = dataset.select(ids)
    feats = pooled_instance_prompts(
        model, dataset.tensor(indices), torch.as_tensor(dataset.modalities[indices], dtype=torch.long)
    )
    labels = dataset.identities[indices]
    # alternate images of every (identity, modality) group between fit and score halves
    rank = np.zeros(len(indices), dtype=int)
    for ident in ids:
        for mod in (0, 1):
            group = np.flatnonzero((labels == ident) & (dataset.modalities[indices] == mod))
            rank[group] = np.arange(len(group))
    fit = rank % 2 == 0
    scaler = StandardScaler().fit(feats[fit])
    clf = LogisticRegression(max_iter=5000).fit(scaler.transform(feats[fit]), labels[fit])
    return float(clf.score(scaler.transform(feats[~fit]), labels[~fit]))


@torch.no_grad()
def dump_diagnostics(model: MIPNet, dataset: SynthDataset, indices, base: str | Path) -> Path:
    """Write final-layer class-token attention over patches and instance prompts.

    The attention row is averaged over heads and renormalized over the ``l``
    patch positions; it reshapes to the ``(H/b, W/b)`` patch grid.
    """
    model.eval()
    indices = np.asarray(indices)
    images = dataset.tensor(indices)
    modality = torch.as_tensor(dataset.modalities[indices], dtype=torch.long)
    out = model(images, modality, return_attention=True)
    n_patch = model.cfg.num_patches
    cls_to_patch = out.attention.mean(dim=1)[:, 0, 1 : 1 + n_patch]
    cls_to_patch = cls_to_patch / cls_to_patch.sum(dim=-1, keepdim=True)
    arrays = {
        "identity": dataset.identities[indices],
        "modality": dataset.modalities[indices],
        "attention": cls_to_patch.double().numpy(),
    }
    for i, prompts in enumerate(out.instance_prompts, start=1):
        arrays[f"prompts.layer{i}"] = prompts.reshape(-1, prompts.shape[-1]).double().numpy()
    cfg = model.cfg
    meta = {
        "grid": f"{cfg.image_height // cfg.patch_size}x{cfg.image_width // cfg.patch_size}",
        "num_images": str(len(indices)),
        "prompt_len": str(cfg.instance_prompt_len),
    }
    return write_container(base, arrays, meta)


# ---------------------------------------------------------------- ablations

ABLATION_CELLS: dict[str, dict] = {
    "baseline": dict(use_mpl=False, use_ipg=False, use_iael=False),
    "general": dict(use_mpl=False, use_ipg=True, ipg_variant="general", use_iael=False),
    "mpl": dict(use_mpl=True, use_ipg=False, use_iael=False),
    "ipg": dict(use_mpl=False, use_ipg=True, ipg_variant="generated", use_iael=False),
    "ipg_iael": dict(use_mpl=False, use_ipg=True, ipg_variant="generated", use_iael=True),
    "mpl_ipg": dict(use_mpl=True, use_ipg=True, ipg_variant="generated", use_iael=False),
    "full": dict(use_mpl=True, use_ipg=True, ipg_variant="generated", use_iael=True),
    "ipg_fused": dict(use_mpl=False, use_ipg=True, ipg_variant="fused", use_iael=False),
    "ipg_fused_iael": dict(use_mpl=False, use_ipg=True, ipg_variant="fused", use_iael=True),
    "mpl_ipg_fused": dict(use_mpl=True, use_ipg=True, ipg_variant="fused", use_iael=False),
    "full_fused": dict(use_mpl=True, use_ipg=True, ipg_variant="fused", use_iael=True),
}
DEFAULT_MATRIX = ("baseline", "general", "mpl", "ipg", "ipg_iael", "mpl_ipg", "full")
ABLATION_HEADER = "config,seed,status,rank1,map,probe_acc,val_map,seconds"
PROBE_IDENTITIES = 10


@dataclass
class AblationRow:
    config: str
    seed: int
    status: str
    rank1: float = float("nan")
    map: float = float("nan")
    probe_acc: float = float("nan")
    val_map: float = float("nan")
    seconds: float = 0.0
    summaries: list[EvalSummary] = field(default_factory=list, repr=False)
    digest: str = ""

    def row(self) -> str:
        return (
            f"{self.config},{self.seed},{self.status},{self.rank1:.6f},{self.map:.6f},"
            f"{self.probe_acc:.6f},{self.val_map:.6f},{self.seconds:.2f}"
        )


def state_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def run_cell(
    name: str,
    seed: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: SynthDataset,
    out_dir: Path | None = None,
    draws: int = 10,
) -> AblationRow:
    flags = ABLATION_CELLS[name]
    cell_train = train_cfg.replace(seed=seed, **flags)
    cell_model = model_cfg.replace(seed=seed)
    result = train(cell_model, cell_train, dataset, out_dir)
    feats = dataset_features(result.model, dataset, dataset.select(dataset.test_ids))
    summaries = evaluate_all(dataset, feats, draws=draws, seed=seed)
    row = AblationRow(
        name,
        seed,
        "ok",
        headline_rank1(summaries),
        headline_map(summaries),
        val_map=result.best_val_map,
        seconds=result.seconds,
        summaries=summaries,
        digest=state_digest(result.model),
    )
    if result.model.ipg is not None:
        row.probe_acc = probe_accuracy(result.model, dataset, result.fit_ids[:PROBE_IDENTITIES])
    if out_dir is not None:
        write_results(summaries, out_dir / "results.csv", out_dir / "results.kv")
    return row


def ablate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: SynthDataset,
    configs=DEFAULT_MATRIX,
    seeds=(0, 1, 2),
    out_dir: str | Path | None = None,
    draws: int = 10,
) -> list[AblationRow]:
    """Run every ``configs x seeds`` cell; a failing cell is recorded, not raised."""
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for name in configs:
        if name not in ABLATION_CELLS:
            raise ValueError(f"unknown ablation config {name!r}; known: {sorted(ABLATION_CELLS)}")
        for seed in seeds:
            cell_dir = out_dir / f"{name}_seed{seed}" if out_dir is not None else None
            try:
                row = run_cell(name, seed, model_cfg, train_cfg, dataset, cell_dir, draws)
            except Exception as exc:  # noqa: BLE001 - one bad cell must not abort the matrix
                log.exception("ablation cell %s seed %d failed", name, seed)
                row = AblationRow(name, seed, f"error:{type(exc).__name__}")
            log.info("%s", row.row())
            rows.append(row)
    if out_dir is not None:
        write_ablation_table(rows, out_dir / "ablation.csv")
    return rows


def write_ablation_table(rows: list[AblationRow], path: str | Path) -> None:
    Path(path).write_text("\n".join([ABLATION_HEADER] + [r.row() for r in rows]) + "\n")


def mean_by_config(rows: list[AblationRow], attr: str = "rank1") -> dict[str, float]:
    grouped: dict[str, list[float]] = {}
    for r in rows:
        if r.status == "ok":
            grouped.setdefault(r.config, []).append(getattr(r, attr))
    return {k: float(np.mean(v)) for k, v in grouped.items()}
