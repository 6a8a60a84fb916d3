"""Dice, peak-relative forgetting and buffer-composition diversity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

METRICS_SCHEMA = "replaymem.metrics/1"
THRESHOLD = 0.5


class MetricsError(ValueError):
    pass


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) > threshold


def dice_score(pred_binary, gt) -> float:
    p = np.asarray(pred_binary, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def forgetting_drop(history: Mapping[int, Sequence[tuple[int, float]]], source_id: int,
                    t: int, segment_end: Mapping[int, int]) -> float:
    """Relative Dice drop of ``source_id`` at arrival ``t``.

    ``history[source_id]`` is a time series of ``(arrival_index, dice)``; the
    reference is the best Dice seen up to the source's last arrival
    ``segment_end[source_id]``. The value at ``t`` is the latest observation
    at or before ``t``.
    """
    if source_id not in history or source_id not in segment_end:
        raise MetricsError(f"unknown source {source_id}")
    series = sorted(history[source_id])
    end = segment_end[source_id]
    if t < end:
        raise MetricsError(f"source {source_id} is still streaming at t={t} (ends at {end})")
    own = [d for a, d in series if a <= end]
    if not own:
        raise MetricsError(f"no observation of source {source_id} within its own segment")
    peak = max(own)
    if peak <= 0.0:
        return 0.0
    now = [d for a, d in series if a <= t][-1]
    return float(min(1.0, max(0.0, (peak - now) / peak)))


def composition_entropy(composition: Mapping[int, int]) -> float:
    counts = np.asarray([c for c in composition.values()], dtype=np.float64)
    if (counts < 0).any():
        raise MetricsError("negative count in composition")
    total = counts.sum()
    if total <= 0:
        raise MetricsError("composition of an empty buffer")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum()) + 0.0  # no -0.0 for a single source


@dataclass
class MetricsRecord:
    arrival_index: int
    per_source_per_class_dice: dict[tuple[int, int], float]
    buffer_composition: dict[int, int]
    mean_buffer_uncertainty: float
    loss: float
    protected_mean_uncertainty: Optional[float] = None
    unprotected_mean_uncertainty: Optional[float] = None

    def source_dice(self) -> dict[int, float]:
        """Average Dice over each source's evaluated classes."""
        acc: dict[int, list[float]] = {}
        for (s, _), d in self.per_source_per_class_dice.items():
            acc.setdefault(s, []).append(d)
        return {s: float(np.mean(v)) for s, v in sorted(acc.items())}

    def average_dice(self) -> float:
        return float(np.mean(list(self.per_source_per_class_dice.values())))

    def class_dice(self) -> dict[int, float]:
        acc: dict[int, list[float]] = {}
        for (_, c), d in self.per_source_per_class_dice.items():
            acc.setdefault(c, []).append(d)
        return {c: float(np.mean(v)) for c, v in sorted(acc.items())}

    def to_json(self) -> str:
        d = {
            "schema": METRICS_SCHEMA,
            "arrival_index": self.arrival_index,
            "dice": [[s, c, v] for (s, c), v in sorted(self.per_source_per_class_dice.items())],
            "buffer_composition": [[s, n] for s, n in sorted(self.buffer_composition.items())],
            "mean_buffer_uncertainty": self.mean_buffer_uncertainty,
            "loss": self.loss,
            "protected_mean_uncertainty": self.protected_mean_uncertainty,
            "unprotected_mean_uncertainty": self.unprotected_mean_uncertainty,
        }
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        if d.get("schema") != METRICS_SCHEMA:
            raise MetricsError(f"unsupported metrics schema {d.get('schema')!r}")
        return cls(
            arrival_index=d["arrival_index"],
            per_source_per_class_dice={(s, c): v for s, c, v in d["dice"]},
            buffer_composition={s: n for s, n in d["buffer_composition"]},
            mean_buffer_uncertainty=d["mean_buffer_uncertainty"],
            loss=d["loss"],
            protected_mean_uncertainty=d.get("protected_mean_uncertainty"),
            unprotected_mean_uncertainty=d.get("unprotected_mean_uncertainty"),
        )


def source_history(records: Sequence[MetricsRecord]) -> dict[int, list[tuple[int, float]]]:
    hist: dict[int, list[tuple[int, float]]] = {}
    for r in records:
        for s, d in r.source_dice().items():
            hist.setdefault(s, []).append((r.arrival_index, d))
    return hist


def forgetting_series(records: Sequence[MetricsRecord], segment_end: Mapping[int, int]) -> list[dict]:
    """Per record, the drop of every source that had finished streaming by then."""
    hist = source_history(records)
    out = []
    for r in records:
        drops = {s: forgetting_drop(hist, s, r.arrival_index, segment_end)
                 for s in sorted(hist) if s in segment_end and segment_end[s] <= r.arrival_index
                 and any(a <= segment_end[s] for a, _ in hist[s])}
        out.append({"arrival_index": r.arrival_index, "drop": drops})
    return out


def mean_final_forgetting(records: Sequence[MetricsRecord], segment_end: Mapping[int, int]) -> float:
    """Mean drop at the last record over the sources that finished before it."""
    if not records:
        raise MetricsError("no records")
    hist = source_history(records)
    t = records[-1].arrival_index
    drops = [forgetting_drop(hist, s, t, segment_end)
             for s in sorted(hist) if segment_end.get(s, math.inf) < t]
    return float(np.mean(drops)) if drops else 0.0


def summary_table(runs: Mapping[str, MetricsRecord]) -> dict:
    """Per-class and overall average Dice per strategy, from each run's final record."""
    classes = sorted({c for r in runs.values() for c in r.class_dice()})
    rows = {}
    for name, rec in runs.items():
        cd = rec.class_dice()
        rows[name] = {"per_class": {c: cd.get(c) for c in classes}, "average": rec.average_dice()}
    return {"classes": classes, "rows": rows}


def format_summary(table: dict) -> str:
    names = list(table["rows"])
    width = max(12, *(len(n) + 2 for n in names))
    head = "Class".ljust(10) + "".join(n.rjust(width) for n in names)
    lines = [head, "-" * len(head)]
    for c in table["classes"]:
        cells = []
        for n in names:
            v = table["rows"][n]["per_class"][c]
            cells.append(("-" if v is None else f"{v:.4f}").rjust(width))
        lines.append(f"class {c}".ljust(10) + "".join(cells))
    lines.append("-" * len(head))
    lines.append("Average".ljust(10) + "".join(f"{table['rows'][n]['average']:.4f}".rjust(width) for n in names))
    return "\n".join(lines)
