"""Similarity, embedding tracking, structure penalties and uncertainty scores."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

PROB_EPS = 1e-7


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ScoringError(f"EMA momentum must lie in (0, 1), got {self.momentum}")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ScoringError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ScoringError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ScoringError("cannot normalize a zero vector")
    return v / n


def update_embedding_ema(old, new, cfg: EmaConfig = EmaConfig()) -> np.ndarray:
    """Blend ``old`` toward ``new`` and project back onto the unit sphere.

    If the blend cancels out exactly (``old`` antiparallel to ``new`` at the
    matching ratio) the fresh embedding is returned unchanged.
    """
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if old.shape != new.shape:
        raise ScoringError(f"dimension mismatch: {old.shape} vs {new.shape}")
    mixed = cfg.momentum * old + (1.0 - cfg.momentum) * new
    n = np.linalg.norm(mixed)
    if n == 0.0:
        return normalize(new)
    return mixed / n


@dataclass(frozen=True)
class PenaltyVector:
    """Per-class loss weights; ``raw`` keeps the pre-clamp normalized values."""

    weights: dict[int, float]
    raw: dict[int, float]

    def __getitem__(self, class_id: int) -> float:
        return self.weights[class_id]

    def __contains__(self, class_id) -> bool:
        return class_id in self.weights

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, class_ids: Iterable[int]) -> "PenaltyVector":
        w = {int(c): 1.0 for c in class_ids}
        return cls(weights=w, raw=dict(w))


def penalty_from_sizes(sizes: Mapping[int, float]) -> PenaltyVector:
    """Structure penalty from per-class voxel counts (zero-size classes dropped)."""
    sizes = {int(c): float(s) for c, s in sizes.items() if s > 0}
    m = len(sizes)
    if m == 0:
        raise ScoringError("structure penalty needs at least one non-empty structure")
    total = sum(sizes.values())
    ratio = {c: total / s for c, s in sizes.items()}
    ratio_sum = sum(ratio.values())
    raw = {c: r / ratio_sum * m for c, r in ratio.items()}
    weights = {}
    for c, a in raw.items():
        # the "else" branch also covers a <= 0, which cannot occur for positive sizes
        weights[c] = 1.0 if 0.0 < a < 1.0 else a
    return PenaltyVector(weights=weights, raw=raw)


def structure_penalty(ground_truth: Mapping[int, np.ndarray]) -> PenaltyVector:
    return penalty_from_sizes({c: int(np.count_nonzero(g)) for c, g in ground_truth.items()})


def _bce_map(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(g * np.log(p) + (1.0 - g) * np.log1p(-p))


def _stack(pred, gt, classes):
    for c in classes:
        if c not in pred or c not in gt:
            raise ScoringError(f"class {c} is annotated but missing from predictions or labels")
        if np.shape(pred[c]) != np.shape(gt[c]):
            raise ScoringError(f"shape mismatch for class {c}: {np.shape(pred[c])} vs {np.shape(gt[c])}")
    p = np.asarray([pred[c] for c in classes], dtype=np.float64)
    g = np.asarray([gt[c] for c in classes], dtype=np.float64)
    return p.reshape(len(classes), -1), g.reshape(len(classes), -1)


def bce_terms(pred: Mapping[int, np.ndarray], gt: Mapping[int, np.ndarray], mask) -> dict[int, float]:
    """Unweighted voxel-mean BCE per annotated class."""
    classes = sorted(mask)
    if not classes:
        return {}
    p, g = _stack(pred, gt, classes)
    terms = _bce_map(p, g).mean(axis=1)
    return {c: float(t) for c, t in zip(classes, terms)}


def weighted_bce_uncertainty(pred, gt, mask, alpha: PenaltyVector | None = None) -> float:
    """Penalty-weighted BCE summed over annotated classes.

    Classes in ``mask`` that ``alpha`` does not weight (structures absent
    from this sample) count with weight 1.
    """
    mask = set(mask)
    if alpha is not None:
        extra = set(alpha.weights) - mask
        if extra:
            raise ScoringError(f"penalty given for unannotated classes {sorted(extra)}")
    terms = bce_terms(pred, gt, mask)
    total = 0.0
    for c, t in terms.items():
        w = alpha.weights.get(c, 1.0) if alpha is not None else 1.0
        total += w * t
    return total


def _topk_count(k_fraction: float, n: int) -> int:
    # tolerate float noise such as 0.07 * 100 = 7.000000000000001
    return min(n, max(0, math.ceil(k_fraction * n - 1e-9)))


def topk_uncertain(uncertainties, k_fraction: float) -> set:
    """Ids of the ceil(k*n) most uncertain entries; ties go to the smaller id."""
    if not 0.0 <= k_fraction <= 1.0:
        raise ScoringError(f"k_fraction must lie in [0, 1], got {k_fraction}")
    items = list(uncertainties)
    k = _topk_count(k_fraction, len(items))
    ranked = sorted(items, key=lambda iu: (-iu[1], iu[0]))
    return {i for i, _ in ranked[:k]}
