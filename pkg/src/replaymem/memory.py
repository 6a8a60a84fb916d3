"""Bounded replay buffers: FIFO, similarity-deduplicating and uncertainty-protected."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scoring import _topk_count, topk_uncertain

SNAPSHOT_SCHEMA = "replaymem.buffer/1"
DECIMALS = 9


# cosine values closer than this are treated as ties
SIM_TIE_TOL = 1e-12


class ReplayBufferError(ValueError):
    """Base class for replay-buffer contract violations."""


class DuplicateSampleError(ReplayBufferError):
    pass


class MissingEmbeddingError(ReplayBufferError):
    pass


class MissingUncertaintyError(ReplayBufferError):
    pass


class EmptyBufferError(ReplayBufferError):
    pass


class StrategyError(ReplayBufferError):
    pass


class Strategy(str, enum.Enum):
    LINEAR = "linear"
    DYNAMIC = "dynamic"
    SELECTIVE = "selective"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise StrategyError(f"unknown strategy {value!r}; expected one of "
                                f"{[s.value for s in cls]}") from None


@dataclass(eq=False)
class Sample:
    """One stream element.

    ``labels`` maps each annotated class id to its binary H x W grid, so the
    annotated set is exactly ``labels.keys()``.
    """

    id: int
    source_id: int
    arrival_index: int
    features: np.ndarray
    labels: dict[int, np.ndarray]
    embedding: Optional[np.ndarray] = None
    uncertainty: Optional[float] = None

    @property
    def label_mask(self) -> frozenset:
        return frozenset(self.labels)

    def set_embedding(self, z) -> None:
        z = np.asarray(z, dtype=np.float64)
        n = np.linalg.norm(z)
        if n == 0.0:
            raise MissingEmbeddingError(f"sample {self.id}: zero embedding")
        self.embedding = z / n


@dataclass(frozen=True)
class SamplingSchedule:
    rate: int = 100
    batch_size: int = 1

    def __post_init__(self):
        if self.rate < 1:
            raise ValueError(f"sampling rate must be >= 1, got {self.rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def steps_for_arrival(schedule: SamplingSchedule) -> int:
    """Training mini-batches drawn for each sample acquired from the stream."""
    return schedule.rate


@dataclass
class ReplayBuffer:
    capacity: int
    strategy: Strategy = Strategy.LINEAR
    protect_fraction: float = 0.0
    entries: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if self.capacity < 1:
            raise ReplayBufferError(f"capacity must be >= 1, got {self.capacity}")
        if not 0.0 <= self.protect_fraction <= 1.0:
            raise ReplayBufferError(f"protect fraction K must lie in [0, 1], got {self.protect_fraction}")
        self._ids: set[int] = set()
        self._emb: Optional[np.ndarray] = None
        self._sim: Optional[np.ndarray] = None
        if self.entries:
            loaded, self.entries = self.entries, []
            for s in loaded:
                self.insert(s)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._ids

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    @property
    def similarity_cache(self) -> Optional[np.ndarray]:
        if self._sim is None:
            return None
        return self._sim.copy()

    def insert(self, sample: Sample) -> Optional[Sample]:
        return _INSERTERS[self.strategy](self, sample)

    def composition(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.entries:
            counts[s.source_id] = counts.get(s.source_id, 0) + 1
        return dict(sorted(counts.items()))

    def protected_ids(self) -> set:
        """Ids currently exempt from eviction (top-K uncertainty over the entries)."""
        if self.strategy is not Strategy.SELECTIVE:
            return set()
        return topk_uncertain([(s.id, _uncertainty_of(s)) for s in self.entries],
                              self.protect_fraction)

    def update_entry(self, sample_id: int, embedding=None, uncertainty=None) -> None:
        """Overwrite a buffered sample's embedding and/or uncertainty, keeping the cache coherent."""
        idx = self._index_of(sample_id)
        s = self.entries[idx]
        if uncertainty is not None:
            s.uncertainty = float(uncertainty)
        if embedding is not None:
            s.set_embedding(embedding)
            if self._emb is not None:
                self._emb[idx] = s.embedding
                row = self._emb @ s.embedding
                self._sim[idx, :] = row
                self._sim[:, idx] = row

    def snapshot(self) -> "ReplayBuffer":
        """Cheap read-only copy for metrics; shares the Sample objects."""
        copy = ReplayBuffer.__new__(ReplayBuffer)
        copy.capacity = self.capacity
        copy.strategy = self.strategy
        copy.protect_fraction = self.protect_fraction
        copy.entries = list(self.entries)
        copy._ids = set(self._ids)
        copy._emb = None if self._emb is None else self._emb.copy()
        copy._sim = None if self._sim is None else self._sim.copy()
        return copy

    def _index_of(self, sample_id: int) -> int:
        for i, s in enumerate(self.entries):
            if s.id == sample_id:
                return i
        raise KeyError(sample_id)

    def _check_new(self, sample: Sample) -> None:
        if sample.id in self._ids:
            raise DuplicateSampleError(f"sample id {sample.id} is already buffered")

    def _append(self, sample: Sample) -> None:
        self.entries.append(sample)
        self._ids.add(sample.id)

    def _remove_at(self, idx: int) -> Sample:
        s = self.entries.pop(idx)
        self._ids.discard(s.id)
        return s


def _require(buffer: ReplayBuffer, strategy: Strategy) -> None:
    if buffer.strategy is not strategy:
        raise StrategyError(f"buffer strategy is {buffer.strategy.value}, not {strategy.value}")


def _uncertainty_of(s: Sample) -> float:
    if s.uncertainty is None:
        raise MissingUncertaintyError(f"sample {s.id} has no uncertainty")
    return s.uncertainty


def insert_linear(buffer: ReplayBuffer, sample: Sample) -> Optional[Sample]:
    _require(buffer, Strategy.LINEAR)
    buffer._check_new(sample)
    buffer._append(sample)
    if len(buffer.entries) > buffer.capacity:
        oldest = min(range(len(buffer.entries)), key=lambda i: buffer.entries[i].arrival_index)
        return buffer._remove_at(oldest)
    return None


def _max_pair_victim(sim: np.ndarray, pool: list[int], arrivals: list[int]) -> int:
    """Index (into the candidate list) to evict among ``pool``.

    The most similar pair inside ``pool`` is located; of its two members the
    one with the larger mean similarity to every other candidate goes, the
    newer one on a tie. Similarities within ``SIM_TIE_TOL`` count as equal,
    so exact duplicates resolve the same way however the cosine was rounded;
    among tied pairs the first in row-major order wins.
    """
    sub = sim[np.ix_(pool, pool)]
    iu, ju = np.triu_indices(len(pool), 1)
    vals = sub[iu, ju]
    k = int(np.flatnonzero(vals >= vals.max() - SIM_TIE_TOL)[0])
    a, b = pool[iu[k]], pool[ju[k]]
    n = sim.shape[0]
    mean_a = (sim[a].sum() - sim[a, a]) / (n - 1)
    mean_b = (sim[b].sum() - sim[b, b]) / (n - 1)
    if abs(mean_a - mean_b) > SIM_TIE_TOL:
        return a if mean_a > mean_b else b
    return a if arrivals[a] > arrivals[b] else b


def _stage_candidate(buffer: ReplayBuffer, sample: Sample) -> None:
    """Append ``sample`` and grow the similarity cache by one row/column."""
    z = sample.embedding
    if buffer._emb is None or len(buffer.entries) == 0:
        buffer._emb = z[None, :].copy()
        buffer._sim = np.array([[float(z @ z)]])
    else:
        row = buffer._emb @ z
        n = len(row)
        sim = np.empty((n + 1, n + 1))
        sim[:n, :n] = buffer._sim
        sim[n, :n] = row
        sim[:n, n] = row
        sim[n, n] = float(z @ z)
        buffer._sim = sim
        buffer._emb = np.vstack([buffer._emb, z])
    buffer._append(sample)


def _evict_index(buffer: ReplayBuffer, idx: int) -> Sample:
    keep = np.ones(len(buffer.entries), dtype=bool)
    keep[idx] = False
    buffer._emb = buffer._emb[keep]
    buffer._sim = buffer._sim[np.ix_(keep, keep)]
    return buffer._remove_at(idx)


def _prepare_embedded(buffer: ReplayBuffer, sample: Sample) -> None:
    buffer._check_new(sample)
    if sample.embedding is None:
        raise MissingEmbeddingError(f"sample {sample.id} has no embedding")
    sample.set_embedding(sample.embedding)


def insert_dynamic(buffer: ReplayBuffer, sample: Sample) -> Optional[Sample]:
    _require(buffer, Strategy.DYNAMIC)
    _prepare_embedded(buffer, sample)
    _stage_candidate(buffer, sample)
    n = len(buffer.entries)
    if n <= buffer.capacity:
        return None
    arrivals = [s.arrival_index for s in buffer.entries]
    victim = _max_pair_victim(buffer._sim, list(range(n)), arrivals)
    return _evict_index(buffer, victim)


def insert_selective(buffer: ReplayBuffer, sample: Sample) -> Optional[Sample]:
    _require(buffer, Strategy.SELECTIVE)
    _prepare_embedded(buffer, sample)
    _uncertainty_of(sample)
    for s in buffer.entries:
        _uncertainty_of(s)
    _stage_candidate(buffer, sample)
    n = len(buffer.entries)
    if n <= buffer.capacity:
        return None
    cands = buffer.entries
    protected = topk_uncertain([(s.id, s.uncertainty) for s in cands], buffer.protect_fraction)
    pool = [i for i, s in enumerate(cands) if s.id not in protected]
    if len(pool) >= 2:
        victim = _max_pair_victim(buffer._sim, pool, [s.arrival_index for s in cands])
    else:
        # with K = 1 everything is protected and capacity wins over protection
        search = pool or list(range(n))
        victim = min(search, key=lambda i: (cands[i].uncertainty, -cands[i].id))
    return _evict_index(buffer, victim)


_INSERTERS = {
    Strategy.LINEAR: insert_linear,
    Strategy.DYNAMIC: insert_dynamic,
    Strategy.SELECTIVE: insert_selective,
}


def protected_count(capacity: int, k_fraction: float) -> int:
    return _topk_count(k_fraction, capacity)


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> list[Sample]:
    """Uniform draw; without replacement unless the batch outgrows the buffer."""
    n = len(buffer.entries)
    if n == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return [buffer.entries[i] for i in idx]


# ---------------------------------------------------------------------------
# snapshot files


@dataclass(frozen=True)
class SnapshotEntry:
    id: int
    source_id: int
    arrival_index: int
    uncertainty: Optional[float]
    embedding: Optional[tuple]


def fmt_decimal(x: float) -> str:
    s = f"{float(x):.{DECIMALS}f}"
    return "0.000000000" if s == "-0.000000000" else s


def _fmt_vector(v) -> str:
    if v is None:
        return "null"
    return "[" + ",".join(fmt_decimal(x) for x in v) + "]"


def format_snapshot(header: dict, entries: list[SnapshotEntry]) -> str:
    lines = [json.dumps(header, sort_keys=True)]
    for e in entries:
        unc = "null" if e.uncertainty is None else fmt_decimal(e.uncertainty)
        lines.append(
            f'{{"arrival_index":{e.arrival_index},"embedding":{_fmt_vector(e.embedding)},'
            f'"id":{e.id},"source_id":{e.source_id},"uncertainty":{unc}}}'
        )
    return "\n".join(lines) + "\n"


def snapshot_header(buffer: ReplayBuffer) -> dict:
    return {
        "schema": SNAPSHOT_SCHEMA,
        "strategy": buffer.strategy.value,
        "capacity": buffer.capacity,
        "protect_fraction": fmt_decimal(buffer.protect_fraction),
    }


def snapshot_entries(buffer: ReplayBuffer) -> list[SnapshotEntry]:
    return [
        SnapshotEntry(
            id=s.id,
            source_id=s.source_id,
            arrival_index=s.arrival_index,
            uncertainty=s.uncertainty,
            embedding=None if s.embedding is None else tuple(float(x) for x in s.embedding),
        )
        for s in buffer.entries
    ]


def write_snapshot(buffer: ReplayBuffer, path) -> Path:
    path = Path(path)
    path.write_text(format_snapshot(snapshot_header(buffer), snapshot_entries(buffer)))
    return path


def parse_snapshot(text: str) -> tuple[dict, list[SnapshotEntry]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty snapshot")
    header = json.loads(lines[0])
    if header.get("schema") != SNAPSHOT_SCHEMA:
        raise ValueError(f"unsupported snapshot schema {header.get('schema')!r}")
    entries = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        emb = rec["embedding"]
        entries.append(SnapshotEntry(
            id=int(rec["id"]),
            source_id=int(rec["source_id"]),
            arrival_index=int(rec["arrival_index"]),
            uncertainty=rec["uncertainty"],
            embedding=None if emb is None else tuple(emb),
        ))
    return header, entries


def read_snapshot(path) -> tuple[dict, list[SnapshotEntry]]:
    return parse_snapshot(Path(path).read_text())
