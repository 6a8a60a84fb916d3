"""Single-pass online training loop over a replay buffer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .memory import ReplayBuffer, Sample, SamplingSchedule, Strategy, sample_minibatch, steps_for_arrival
from .metrics import MetricsRecord, binarize, dice_score
from .scoring import EmaConfig, PenaltyVector, ScoringError, structure_penalty, update_embedding_ema, \
    weighted_bce_uncertainty
from .stream import Prediction, SourceSpec, ToyLearner, generate_stream, loss_and_grad, named_rng, predict


def sample_uncertainty(sample: Sample, pred: Prediction) -> float:
    """Penalty-weighted BCE of ``pred`` against the sample's annotated classes."""
    if "_alpha" in sample.__dict__:
        alpha = sample.__dict__["_alpha"]
    else:
        try:
            alpha: Optional[PenaltyVector] = structure_penalty(sample.labels)
        except ScoringError:
            alpha = None
        sample.__dict__["_alpha"] = alpha
    mask = sample.label_mask
    return weighted_bce_uncertainty(pred.grids(mask), sample.labels, mask, alpha)


def evaluate(learner: ToyLearner, test_sets: Mapping[int, Sequence[Sample]]) -> dict[tuple[int, int], float]:
    out = {}
    for src in sorted(test_sets):
        scores: dict[int, list[float]] = {}
        for s in test_sets[src]:
            probs = predict(learner, s).probs
            for c in sorted(s.labels):
                scores.setdefault(c, []).append(dice_score(binarize(probs[..., c]), s.labels[c]))
        for c, v in scores.items():
            out[(src, c)] = float(np.mean(v))
    return out


@dataclass
class Eviction:
    arrival_index: int
    inserted_id: int
    evicted_id: int
    evicted_source: int

    def to_dict(self) -> dict:
        return {"arrival_index": self.arrival_index, "inserted_id": self.inserted_id,
                "evicted_id": self.evicted_id, "evicted_source": self.evicted_source}


@dataclass(eq=False)
class OnlineTrainer:
    """Owns the buffer and learner for one run.

    Each arriving sample is scored once by the current learner, inserted, and
    then ``schedule.rate`` mini-batches are drawn from the buffer. Buffered
    samples that appear in a batch get their embedding (EMA) and uncertainty
    refreshed from the forward pass of that step.
    """

    buffer: ReplayBuffer
    learner: ToyLearner
    schedule: SamplingSchedule
    test_sets: Mapping[int, Sequence[Sample]]
    seed: int = 0
    eval_interval: int = 50
    ema: EmaConfig = field(default_factory=EmaConfig)
    segment_end: Mapping[int, int] = field(default_factory=dict)
    on_source_end: Optional[Callable[[int, ReplayBuffer], None]] = None
    evictions: list[Eviction] = field(default_factory=list)

    def __post_init__(self):
        self._rng = named_rng(self.seed, "minibatch")

    def _refresh(self, s: Sample, pred: Prediction) -> None:
        emb = pred.embedding if s.embedding is None else update_embedding_ema(s.embedding, pred.embedding, self.ema)
        self.buffer.update_entry(s.id, embedding=emb, uncertainty=sample_uncertainty(s, pred))

    def _train(self) -> float:
        batch = sample_minibatch(self.buffer, self.schedule.batch_size, self._rng)
        loss, gw, gb, preds = loss_and_grad(self.learner, batch, with_preds=True)
        self.learner.weights -= self.learner.learning_rate * gw
        self.learner.bias -= self.learner.learning_rate * gb
        seen = set()
        for s, p in zip(batch, preds):
            if s.id in seen:
                continue
            seen.add(s.id)
            self._refresh(s, p)
        return loss

    def _record(self, t: int, losses: list[float]) -> MetricsRecord:
        entries = self.buffer.entries
        unc = [s.uncertainty for s in entries]
        rec = MetricsRecord(
            arrival_index=t,
            per_source_per_class_dice=evaluate(self.learner, self.test_sets),
            buffer_composition=self.buffer.composition(),
            mean_buffer_uncertainty=float(np.mean(unc)),
            loss=float(np.mean(losses)) if losses else float("nan"),
        )
        if self.buffer.strategy is Strategy.SELECTIVE:
            prot = self.buffer.protected_ids()
            pu = [s.uncertainty for s in entries if s.id in prot]
            uu = [s.uncertainty for s in entries if s.id not in prot]
            rec.protected_mean_uncertainty = float(np.mean(pu)) if pu else None
            rec.unprotected_mean_uncertainty = float(np.mean(uu)) if uu else None
        return rec

    def run(self, stream: Iterable[Sample]):
        """Consume ``stream`` once, yielding a MetricsRecord per evaluation interval.

        The last arrival of every source is always evaluated too, so each
        source has an in-segment reference for forgetting.
        """
        losses: list[float] = []
        t = None
        pending = False
        for sample in stream:
            t = sample.arrival_index
            pred = predict(self.learner, sample)
            sample.set_embedding(pred.embedding)
            sample.uncertainty = sample_uncertainty(sample, pred)
            evicted = self.buffer.insert(sample)
            if evicted is not None:
                self.evictions.append(Eviction(t, sample.id, evicted.id, evicted.source_id))
            for _ in range(steps_for_arrival(self.schedule)):
                losses.append(self._train())
            pending = True
            source_done = self.segment_end.get(sample.source_id) == t
            if source_done and self.on_source_end is not None:
                self.on_source_end(sample.source_id, self.buffer.snapshot())
            if (t + 1) % self.eval_interval == 0 or source_done:
                yield self._record(t, losses)
                losses = []
                pending = False
        if pending:
            yield self._record(t, losses)


def segment_ends(specs: Sequence[SourceSpec]) -> dict[int, int]:
    ends, t = {}, -1
    for s in specs:
        t += s.n_samples
        ends[s.source_id] = t
    return ends


def make_test_sets(specs: Sequence[SourceSpec], n_test: int, grid, n_classes: int, seed: int) -> dict[int, list[Sample]]:
    test_specs = [s.with_samples(n_test) for s in specs]
    pool = generate_stream(test_specs, grid, seed=seed, n_classes=n_classes, id_offset=10**9,
                           rng_name="test-gen")
    out: dict[int, list[Sample]] = {}
    for s in pool:
        out.setdefault(s.source_id, []).append(s)
    return out


def run_experiment(specs: Sequence[SourceSpec], strategy, schedule: SamplingSchedule, seed: int, *,
                   capacity: int = 128, protect_fraction: float = 0.25, grid=(16, 16, 4), n_classes: int = 6,
                   embedding_dim: int = 16, learning_rate: float = 0.5, eval_interval: int = 50,
                   n_test: int = 24, ema_momentum: float = 0.9, on_source_end=None,
                   stream: Optional[Iterable[Sample]] = None) -> tuple[list[MetricsRecord], OnlineTrainer]:
    strategy = Strategy.parse(strategy)
    buffer = ReplayBuffer(capacity, strategy, protect_fraction if strategy is Strategy.SELECTIVE else 0.0)
    learner = ToyLearner.create(n_classes, grid[2], embedding_dim, learning_rate, seed=seed)
    trainer = OnlineTrainer(
        buffer=buffer, learner=learner, schedule=schedule,
        test_sets=make_test_sets(specs, n_test, grid, n_classes, seed),
        seed=seed, eval_interval=eval_interval, ema=EmaConfig(ema_momentum),
        segment_end=segment_ends(specs), on_source_end=on_source_end,
    )
    if stream is None:
        stream = generate_stream(specs, grid, seed=seed, n_classes=n_classes)
    records = list(trainer.run(stream))
    return records, trainer


def run_multi_epoch_baseline(specs: Sequence[SourceSpec], total_steps: int, batch_size: int, seed: int, *,
                             grid=(16, 16, 4), n_classes: int = 6, embedding_dim: int = 16,
                             learning_rate: float = 0.5, n_test: int = 24) -> MetricsRecord:
    """Comparator: shuffled multi-pass training over the whole pool, same update budget."""
    pool = generate_stream(specs, grid, seed=seed, n_classes=n_classes)
    learner = ToyLearner.create(n_classes, grid[2], embedding_dim, learning_rate, seed=seed)
    rng = named_rng(seed, "epoch-shuffle")
    order: list[int] = []
    losses = []
    for _ in range(total_steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(pool)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        loss, gw, gb = loss_and_grad(learner, [pool[i] for i in idx])
        learner.weights -= learner.learning_rate * gw
        learner.bias -= learner.learning_rate * gb
        losses.append(loss)
    tests = make_test_sets(specs, n_test, grid, n_classes, seed)
    return MetricsRecord(
        arrival_index=len(pool) - 1,
        per_source_per_class_dice=evaluate(learner, tests),
        buffer_composition={s.source_id: s.n_samples for s in specs},
        mean_buffer_uncertainty=0.0,
        loss=float(np.mean(losses[-100:])),
    )
