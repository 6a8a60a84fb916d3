"""Replay-memory strategies for single-pass training on non-stationary streams."""
from .memory import (ReplayBuffer, Sample, SamplingSchedule, Strategy, insert_dynamic, insert_linear,
                     insert_selective, sample_minibatch, steps_for_arrival)
from .metrics import MetricsRecord, composition_entropy, dice_score, forgetting_drop
from .scoring import (EmaConfig, PenaltyVector, cosine_similarity, structure_penalty, topk_uncertain,
                      update_embedding_ema, weighted_bce_uncertainty)
from .stream import SourceSpec, ToyLearner, generate_stream, predict, train_step

__version__ = "0.1.0"
