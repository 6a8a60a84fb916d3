"""Synthetic sequential-site streams and a toy per-voxel segmentation learner."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .memory import Sample, fmt_decimal

STREAM_SCHEMA = "replaymem.stream/1"
DICE_SMOOTH = 1e-5


class StreamError(ValueError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the experiment seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class ShapeParams:
    radius: tuple[float, float]
    presence: float = 0.7


# Class 0 is the largest structure, class 5 the smallest.
DEFAULT_SHAPES = {
    0: ShapeParams((3.5, 5.0)),
    1: ShapeParams((3.0, 4.0)),
    2: ShapeParams((2.5, 3.5)),
    3: ShapeParams((2.0, 3.0)),
    4: ShapeParams((1.5, 2.5)),
    5: ShapeParams((1.0, 2.0)),
}


@dataclass(frozen=True)
class SourceSpec:
    source_id: int
    n_samples: int
    annotated_classes: frozenset
    feature_shift: tuple = (0.0, 0.0, 0.0, 0.0)
    # a float, or a (lo, hi) range drawn uniformly per sample; stored as (lo, hi)
    noise_sigma: float | tuple = 0.5
    shape_params: dict = field(default_factory=lambda: dict(DEFAULT_SHAPES))

    def __post_init__(self):
        object.__setattr__(self, "annotated_classes", frozenset(int(c) for c in self.annotated_classes))
        object.__setattr__(self, "feature_shift", tuple(float(x) for x in self.feature_shift))
        if not self.annotated_classes:
            raise StreamError(f"source {self.source_id}: annotated_classes is empty")
        if self.n_samples < 1:
            raise StreamError(f"source {self.source_id}: n_samples must be >= 1")
        sigma = self.noise_sigma
        lo, hi = (sigma, sigma) if np.isscalar(sigma) else tuple(sigma)
        object.__setattr__(self, "noise_sigma", (float(lo), float(hi)))
        if not 0 <= lo <= hi:
            raise StreamError(f"source {self.source_id}: noise_sigma must satisfy 0 <= lo <= hi, got {sigma}")
        missing = self.annotated_classes - set(self.shape_params)
        if missing:
            raise StreamError(f"source {self.source_id}: no shape params for annotated classes {sorted(missing)}")

    def with_samples(self, n: int) -> "SourceSpec":
        return SourceSpec(self.source_id, n, self.annotated_classes, self.feature_shift,
                          self.noise_sigma, self.shape_params)


def default_sources(n_samples: int = 200) -> list[SourceSpec]:
    """Four sites with overlapping partial annotations and shifted feature statistics.

    Scan quality varies within each site (noise sigma drawn per sample), so
    some samples are hard while sitting close to easy ones in embedding space.
    """
    noise = (0.2, 1.0)
    return [
        SourceSpec(0, n_samples, {0, 1, 2, 3}, feature_shift=(1.5, 0.0, 0.0, 0.0), noise_sigma=noise),
        SourceSpec(1, n_samples, {0, 2, 4, 5}, feature_shift=(0.0, 1.5, 0.0, 0.0), noise_sigma=noise),
        SourceSpec(2, n_samples, {1, 3, 4, 5}, feature_shift=(0.0, 0.0, 1.5, 0.0), noise_sigma=noise),
        SourceSpec(3, n_samples, {0, 1, 2, 5}, feature_shift=(0.0, 0.0, 0.0, 1.5), noise_sigma=noise),
    ]


def class_signatures(n_classes: int, n_features: int, scale: float = 3.0) -> np.ndarray:
    """Feature offset of each class; fixed for a given (n_classes, n_features).

    Axis directions come first, then negated pair sums, so that for up to
    ``2 * n_features`` classes every class is linearly separable from the
    others and from background.
    """
    eye = np.eye(n_features)
    dirs = [eye[i] for i in range(n_features)]
    for i in range(0, n_features - 1, 2):
        dirs.append(-(eye[i] + eye[i + 1]) / math.sqrt(2.0))
    rng = np.random.default_rng(np.random.SeedSequence([n_classes, n_features, 0x5E6]))
    while len(dirs) < n_classes:
        v = rng.normal(size=n_features)
        dirs.append(v / np.linalg.norm(v))
    return scale * np.asarray(dirs[:n_classes])


def _paint_sample(spec: SourceSpec, grid, signatures, rng) -> tuple[np.ndarray, np.ndarray]:
    h, w, f = grid
    lo, hi = spec.noise_sigma
    sigma = rng.uniform(lo, hi) if hi > lo else lo
    labelmap = np.full((h, w), -1, dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    for c in sorted(spec.shape_params):
        sp = spec.shape_params[c]
        if rng.random() >= sp.presence:
            continue
        r = rng.uniform(*sp.radius)
        cy = rng.uniform(r, h - 1 - r)
        cx = rng.uniform(r, w - 1 - r)
        labelmap[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = c
    feats = rng.normal(0.0, sigma, size=(h, w, f))
    feats += np.asarray(spec.feature_shift)
    fg = labelmap >= 0
    feats[fg] += signatures[labelmap[fg]]
    return feats, labelmap


def generate_stream(specs: Sequence[SourceSpec], grid=(16, 16, 4), seed: int = 0,
                    n_classes: int = 6, id_offset: int = 0, rng_name: str = "stream-gen") -> list[Sample]:
    """Emit every source in order, never shuffled; arrival indices are dense from 0."""
    if not specs:
        raise StreamError("at least one source spec is required")
    h, w, f = grid
    for spec in specs:
        if len(spec.feature_shift) != f:
            raise StreamError(f"source {spec.source_id}: feature_shift has {len(spec.feature_shift)} "
                              f"entries, grid has F={f}")
        for c, sp in spec.shape_params.items():
            if not 0 <= c < n_classes:
                raise StreamError(f"source {spec.source_id}: class {c} outside [0, {n_classes})")
            lo, hi = sp.radius
            if lo <= 0 or hi < lo:
                raise StreamError(f"source {spec.source_id}: bad radius range {sp.radius} for class {c}")
            if 2 * math.ceil(hi) + 1 > min(h, w):
                raise StreamError(f"grid {h}x{w} too small for class {c} blobs of radius {hi}")
    signatures = class_signatures(n_classes, f)
    rng = named_rng(seed, rng_name)
    out = []
    t = 0
    for spec in specs:
        for _ in range(spec.n_samples):
            feats, labelmap = _paint_sample(spec, (h, w, f), signatures, rng)
            labels = {c: labelmap == c for c in sorted(spec.annotated_classes)}
            out.append(Sample(id=id_offset + t, source_id=spec.source_id, arrival_index=t,
                              features=feats, labels=labels))
            t += 1
    return out


# ---------------------------------------------------------------------------
# toy learner


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class Prediction:
    probs: np.ndarray      # H x W x C
    embedding: np.ndarray

    def grids(self, classes: Optional[Iterable[int]] = None) -> dict[int, np.ndarray]:
        if classes is None:
            classes = range(self.probs.shape[-1])
        return {c: self.probs[..., c] for c in classes}


@dataclass(eq=False)
class ToyLearner:
    """Per-class logistic voxel classifier plus a fixed random embedding head.

    The embedding pools the voxel features together with the mean predicted
    class probabilities, so it drifts as the classifier trains.
    """

    weights: np.ndarray        # C x F
    bias: np.ndarray           # C
    projection: np.ndarray     # E x (F + C)
    learning_rate: float = 0.5

    @classmethod
    def create(cls, n_classes=6, n_features=4, embedding_dim=16, learning_rate=0.5,
               seed: int = 0) -> "ToyLearner":
        rng = named_rng(seed, "learner-init")
        proj = rng.normal(size=(embedding_dim, n_features + n_classes)) / math.sqrt(n_features + n_classes)
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes), proj, learning_rate)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def params(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def set_params(self, theta: np.ndarray) -> None:
        c, f = self.weights.shape
        self.weights = theta[: c * f].reshape(c, f).copy()
        self.bias = theta[c * f:].copy()


def _check_features(learner: ToyLearner, features: np.ndarray) -> None:
    if features.ndim != 3 or features.shape[-1] != learner.n_features:
        raise StreamError(f"expected H x W x {learner.n_features} features, got {features.shape}")


def _embed(learner: ToyLearner, features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    v = features.shape[0] * features.shape[1]
    pooled = np.concatenate([features.sum(axis=(0, 1)), probs.sum(axis=(0, 1))]) / v
    z = learner.projection @ pooled
    n = np.linalg.norm(z)
    if n == 0.0:
        z = np.zeros_like(z)
        z[0] = 1.0
        return z
    return z / n


def predict(learner: ToyLearner, sample: Sample) -> Prediction:
    _check_features(learner, sample.features)
    probs = _sigmoid(sample.features @ learner.weights.T + learner.bias)
    return Prediction(probs=probs, embedding=_embed(learner, sample.features, probs))


def _label_tensor(sample: Sample, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense V x C label matrix (zeros for unannotated classes) and the C-length annotation mask."""
    cached = sample.__dict__.get("_dense_labels")
    if cached is not None and cached[0].shape[1] == n_classes:
        return cached
    h, w = sample.features.shape[:2]
    g = np.zeros((h * w, n_classes))
    m = np.zeros(n_classes)
    for c, grid in sample.labels.items():
        g[:, c] = grid.reshape(-1)
        m[c] = 1.0
    sample.__dict__["_dense_labels"] = (g, m)
    return g, m


def loss_and_grad(learner: ToyLearner, batch: Sequence[Sample], with_preds: bool = False):
    """Masked BCE + soft-Dice over annotated classes, averaged over the batch.

    Each sample contributes the mean over its annotated classes; classes
    outside a sample's label mask get an exactly zero weight. Returns
    ``(loss, grad_weights, grad_bias)`` and, with ``with_preds``, the
    per-sample forward predictions as a fourth element.
    """
    nb = len(batch)
    c, f = learner.weights.shape
    for s in batch:
        _check_features(learner, s.features)
    x = np.stack([s.features.reshape(-1, f) for s in batch])          # B x V x F
    gm = [_label_tensor(s, c) for s in batch]
    g = np.stack([t[0] for t in gm])                                    # B x V x C
    m = np.stack([t[1] for t in gm])                                    # B x C
    v = x.shape[1]
    z = x @ learner.weights.T + learner.bias                            # B x V x C
    p = _sigmoid(z)
    n_annot = m.sum(axis=1, keepdims=True)
    scale = np.divide(m, nb * n_annot, out=np.zeros_like(m), where=n_annot > 0)
    bce = (np.logaddexp(0.0, z) - g * z).sum(axis=1) / v                # B x C
    inter = (p * g).sum(axis=1)
    denom = p.sum(axis=1) + g.sum(axis=1) + DICE_SMOOTH
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom
    loss = float((scale * (bce + dice)).sum())
    d_dice_dp = -(2.0 * g * denom[:, None, :] - (2.0 * inter + DICE_SMOOTH)[:, None, :]) / denom[:, None, :] ** 2
    dz = scale[:, None, :] * ((p - g) / v + d_dice_dp * p * (1.0 - p))
    gw = np.einsum("bvc,bvf->cf", dz, x)
    gb = dz.sum(axis=(0, 1))
    if with_preds:
        preds = []
        for s, pb in zip(batch, p):
            probs = pb.reshape(s.features.shape[:2] + (c,))
            preds.append(Prediction(probs, _embed(learner, s.features, probs)))
        return loss, gw, gb, preds
    return loss, gw, gb


def train_step(learner: ToyLearner, batch: Sequence[Sample]) -> float:
    """One SGD step; returns the loss measured before the update."""
    if not batch:
        raise StreamError("empty batch")
    loss, gw, gb = loss_and_grad(learner, batch)
    learner.weights -= learner.learning_rate * gw
    learner.bias -= learner.learning_rate * gb
    return loss


# ---------------------------------------------------------------------------
# stream dump files


def _flat(values) -> str:
    return "[" + ",".join(fmt_decimal(x) for x in np.ravel(values)) + "]"


def format_stream(samples: Sequence[Sample], grid, n_classes: int) -> str:
    h, w, f = grid
    header = {"schema": STREAM_SCHEMA, "grid": [h, w, f], "n_classes": n_classes,
              "n_samples": len(samples)}
    lines = [json.dumps(header, sort_keys=True)]
    for s in samples:
        unc = "null" if s.uncertainty is None else fmt_decimal(s.uncertainty)
        emb = "null" if s.embedding is None else _flat(s.embedding)
        labels = ",".join(f'"{c}":[' + ",".join("1" if b else "0" for b in s.labels[c].ravel()) + "]"
                          for c in sorted(s.labels))
        lines.append(
            f'{{"arrival_index":{s.arrival_index},"embedding":{emb},"features":{_flat(s.features)},'
            f'"id":{s.id},"labels":{{{labels}}},"source_id":{s.source_id},"uncertainty":{unc}}}'
        )
    return "\n".join(lines) + "\n"


def write_stream(samples: Sequence[Sample], path, grid, n_classes: int) -> Path:
    path = Path(path)
    path.write_text(format_stream(samples, grid, n_classes))
    return path


def read_stream(path) -> tuple[dict, list[Sample]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("schema") != STREAM_SCHEMA:
        raise StreamError(f"unsupported stream schema {header.get('schema')!r}")
    h, w, f = header["grid"]
    samples = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        emb = rec["embedding"]
        samples.append(Sample(
            id=rec["id"], source_id=rec["source_id"], arrival_index=rec["arrival_index"],
            features=np.asarray(rec["features"], dtype=np.float64).reshape(h, w, f),
            labels={int(c): np.asarray(v, dtype=bool).reshape(h, w) for c, v in rec["labels"].items()},
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
            uncertainty=rec["uncertainty"],
        ))
    return header, samples
