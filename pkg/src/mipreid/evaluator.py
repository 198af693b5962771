"""Cross-modality retrieval evaluation: CMC Rank-1 and mAP."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mipreid.errors import EmptyGalleryError, NoPositiveError, ZeroNormError
from mipreid.mpl import IR, VIS


class Protocol(enum.Enum):
    SINGLE_SHOT = "single_shot"
    MULTI_SHOT = "multi_shot"


class Direction(enum.Enum):
    IR_TO_VIS = "ir_to_vis"
    VIS_TO_IR = "vis_to_ir"

    @property
    def query_modality(self) -> int:
        return IR if self is Direction.IR_TO_VIS else VIS

    @property
    def gallery_modality(self) -> int:
        return VIS if self is Direction.IR_TO_VIS else IR


MULTI_SHOT_IMAGES = 10


@dataclass
class QueryResult:
    query_id: int
    ranked_ids: np.ndarray
    ap: float


@dataclass
class RetrievalResult:
    per_query: list[QueryResult]
    rank1: float
    map: float
    protocol: Protocol | None = None
    direction: Direction | None = None


def build_gallery(dataset, protocol: Protocol, direction: Direction, rng: np.random.Generator, ids=None) -> list[int]:
    """Pick gallery images per identity: 1 for single-shot, up to 10 for multi-shot."""
    ids = sorted(dataset.test_ids if ids is None else ids)
    per_id = 1 if protocol is Protocol.SINGLE_SHOT else MULTI_SHOT_IMAGES
    gallery: list[int] = []
    for ident in ids:
        available = dataset.indices(ident, direction.gallery_modality)
        if len(available) == 0:
            continue
        take = min(per_id, len(available))
        gallery.extend(int(i) for i in np.sort(rng.choice(available, size=take, replace=False)))
    if not gallery:
        raise EmptyGalleryError("no gallery images for the requested identities")
    return gallery


def _normalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ZeroNormError("cannot rank a zero-norm feature vector")
    return features / norms


def rank_queries(query_features, gallery_features) -> np.ndarray:
    """Gallery indices per query by descending cosine similarity; ties keep index order."""
    q = _normalize(np.asarray(query_features, dtype=np.float64))
    g = _normalize(np.asarray(gallery_features, dtype=np.float64))
    sim = q @ g.T
    return np.argsort(-sim, axis=1, kind="stable")


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of the true matches."""
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        raise NoPositiveError("query has no true match in the gallery")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def compute_metrics(ranked: np.ndarray, query_ids, gallery_ids) -> RetrievalResult:
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    per_query = []
    for qid, order in zip(query_ids, ranked):
        ranked_ids = gallery_ids[order]
        per_query.append(QueryResult(int(qid), ranked_ids, average_precision(ranked_ids == qid)))
    rank1 = float(np.mean([r.ranked_ids[0] == r.query_id for r in per_query]))
    mean_ap = float(np.mean([r.ap for r in per_query]))
    return RetrievalResult(per_query, rank1, mean_ap)


@dataclass
class EvalSummary:
    protocol: Protocol
    direction: Direction
    rank1: float
    map: float
    seed: int
    draws: list[RetrievalResult] = field(default_factory=list, repr=False)

    def row(self) -> str:
        return f"{self.protocol.value},{self.direction.value},{self.rank1:.6f},{self.map:.6f},{self.seed}"


def evaluate_features(
    dataset,
    features: np.ndarray,
    protocol: Protocol,
    direction: Direction,
    draws: int = 10,
    seed: int = 0,
    ids=None,
) -> EvalSummary:
    """Average Rank-1/mAP over ``draws`` random galleries.

    ``features`` holds one row per dataset image (rows outside ``ids`` are unused).
    """
    ids = sorted(dataset.test_ids if ids is None else ids)
    queries = dataset.select(ids, direction.query_modality)
    rng = np.random.default_rng([seed, 3])
    results = []
    for _ in range(draws):
        gallery = build_gallery(dataset, protocol, direction, rng, ids)
        ranked = rank_queries(features[queries], features[gallery])
        result = compute_metrics(ranked, dataset.identities[queries], dataset.identities[gallery])
        result.protocol, result.direction = protocol, direction
        results.append(result)
    return EvalSummary(
        protocol,
        direction,
        float(np.mean([r.rank1 for r in results])),
        float(np.mean([r.map for r in results])),
        seed,
        results,
    )


def evaluate_all(dataset, features: np.ndarray, draws: int = 10, seed: int = 0, ids=None) -> list[EvalSummary]:
    return [
        evaluate_features(dataset, features, protocol, direction, draws, seed, ids)
        for protocol in Protocol
        for direction in Direction
    ]


def headline_rank1(summaries: list[EvalSummary]) -> float:
    """Single-shot Rank-1 averaged over both query directions."""
    vals = [s.rank1 for s in summaries if s.protocol is Protocol.SINGLE_SHOT]
    return float(np.mean(vals))


def headline_map(summaries: list[EvalSummary]) -> float:
    vals = [s.map for s in summaries if s.protocol is Protocol.SINGLE_SHOT]
    return float(np.mean(vals))


TABLE_HEADER = "protocol,direction,rank1,map,seed"


def write_results(summaries: list[EvalSummary], table_path: str | Path, kv_path: str | Path | None = None) -> None:
    lines = [TABLE_HEADER] + [s.row() for s in summaries]
    Path(table_path).write_text("\n".join(lines) + "\n")
    if kv_path is not None:
        kv = []
        for s in summaries:
            prefix = f"{s.protocol.value}.{s.direction.value}"
            kv.append(f"{prefix}.rank1={s.rank1:.6f}")
            kv.append(f"{prefix}.map={s.map:.6f}")
        kv.append(f"seed={summaries[0].seed if summaries else 0}")
        Path(kv_path).write_text("\n".join(kv) + "\n")
