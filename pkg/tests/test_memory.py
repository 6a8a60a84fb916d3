import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_similarity, eviction_oracle, make_sample
from replaymem.memory import (DuplicateSampleError, EmptyBufferError, MissingEmbeddingError,
                              MissingUncertaintyError, ReplayBuffer, ReplayBufferError, SamplingSchedule,
                              Strategy, StrategyError, insert_linear,
                              parse_snapshot, format_snapshot, protected_count, read_snapshot,
                              sample_minibatch, snapshot_entries, snapshot_header, steps_for_arrival,
                              write_snapshot)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def random_stream(rng, n, dim=4, with_unc=True):
    return [make_sample(t, rng.normal(size=dim), float(rng.random()) if with_unc else None) for t in range(n)]


class TestLinear:
    def test_evicts_oldest(self):
        buf = ReplayBuffer(2, Strategy.LINEAR)
        assert insert_linear(buf, make_sample(0)) is None
        assert insert_linear(buf, make_sample(1)) is None
        out = insert_linear(buf, make_sample(2))
        assert out.arrival_index == 0
        assert [s.arrival_index for s in buf] == [1, 2]

    def test_under_capacity(self):
        buf = ReplayBuffer(64, Strategy.LINEAR)
        assert insert_linear(buf, make_sample(0)) is None
        assert len(buf) == 1

    def test_300_into_128(self):
        buf = ReplayBuffer(128, Strategy.LINEAR)
        for t in range(300):
            buf.insert(make_sample(t))
        assert [s.arrival_index for s in buf] == list(range(172, 300))

    def test_duplicate_id(self):
        buf = ReplayBuffer(4, Strategy.LINEAR)
        buf.insert(make_sample(0))
        with pytest.raises(DuplicateSampleError):
            buf.insert(make_sample(0))

    def test_wrong_strategy(self):
        with pytest.raises(StrategyError):
            insert_linear(ReplayBuffer(4, Strategy.DYNAMIC), make_sample(0, [1, 0]))

    @given(st.integers(1, 16), st.integers(0, 60))
    def test_prefix_property(self, n, length):
        buf = ReplayBuffer(n, Strategy.LINEAR)
        for t in range(length):
            buf.insert(make_sample(t))
            assert [s.arrival_index for s in buf] == list(range(max(0, t + 1 - n), t + 1))


class TestDynamic:
    def test_hand_example(self):
        buf = ReplayBuffer(2, Strategy.DYNAMIC)
        buf.insert(make_sample(0, [1, 0]))
        buf.insert(make_sample(1, [0, 1]))
        out = buf.insert(make_sample(2, unit([0.8, 0.6])))
        assert out.id == 2
        assert [s.id for s in buf] == [0, 1]

    def test_duplicates_are_removed_first(self):
        buf = ReplayBuffer(3, Strategy.DYNAMIC)
        buf.insert(make_sample(0, [1, 0, 0]))
        buf.insert(make_sample(1, [1, 0, 0]))
        buf.insert(make_sample(2, [0, 1, 0]))
        out = buf.insert(make_sample(3, [0, 0, 1]))
        assert out.id in (0, 1)
        # identical pair, identical means: the newer one goes
        assert out.id == 1

    def test_missing_embedding(self):
        buf = ReplayBuffer(2, Strategy.DYNAMIC)
        with pytest.raises(MissingEmbeddingError):
            buf.insert(make_sample(0))
        assert len(buf) == 0

    def test_unit_norm_after_insert(self):
        buf = ReplayBuffer(3, Strategy.DYNAMIC)
        buf.insert(make_sample(0, [3.0, 4.0]))
        assert np.linalg.norm(buf.entries[0].embedding) == pytest.approx(1.0, abs=1e-12)

    def test_oracle_equivalence_and_cache(self):
        rng = np.random.default_rng(1234)
        for trial in range(100):
            n = int(rng.integers(2, 9))
            buf = ReplayBuffer(n, Strategy.DYNAMIC)
            for s in random_stream(rng, 3 * n, dim=int(rng.integers(2, 6))):
                expected = eviction_oracle(buf.entries + [s]) if len(buf) == n else None
                out = buf.insert(s)
                assert (out.id if out else None) == expected, f"trial {trial}"
                np.testing.assert_allclose(buf.similarity_cache,
                                           brute_similarity([e.embedding for e in buf]), atol=1e-9)
                assert len({e.id for e in buf}) == len(buf) <= n


class TestSelective:
    def test_protected_count_default_setting(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(128, Strategy.SELECTIVE, 0.25)
        for s in random_stream(rng, 200, dim=8):
            buf.insert(s)
        assert len(buf) == 128
        assert len(buf.protected_ids()) == 32
        assert protected_count(128, 0.25) == 32

    def test_k_zero_matches_dynamic(self):
        rng = np.random.default_rng(7)
        stream = random_stream(rng, 60, dim=5)
        dyn = ReplayBuffer(8, Strategy.DYNAMIC)
        sel = ReplayBuffer(8, Strategy.SELECTIVE, 0.0)
        for s in stream:
            a = dyn.insert(make_sample(s.id, s.embedding, s.uncertainty))
            b = sel.insert(make_sample(s.id, s.embedding, s.uncertainty))
            assert (a.id if a else None) == (b.id if b else None)
        assert [s.id for s in dyn] == [s.id for s in sel]

    def test_protection_overrides_similarity(self):
        buf = ReplayBuffer(4, Strategy.SELECTIVE, 0.4)
        # ceil(0.4 * 5) = 2 protected candidates: the duplicated pair below
        buf.insert(make_sample(0, [1, 0, 0], unc=5.0))
        buf.insert(make_sample(1, [1, 0, 0], unc=4.0))
        buf.insert(make_sample(2, [0, 1, 0], unc=0.1))
        buf.insert(make_sample(3, [0, 0.9, 0.1], unc=0.2))
        out = buf.insert(make_sample(4, [0, 0, 1], unc=0.3))
        assert out.id in (2, 3)
        assert {0, 1} <= {s.id for s in buf}

    def test_everything_protected_falls_back_to_lowest(self):
        buf = ReplayBuffer(2, Strategy.SELECTIVE, 1.0)
        buf.insert(make_sample(0, [1, 0], unc=0.5))
        buf.insert(make_sample(1, [1, 0], unc=0.9))
        out = buf.insert(make_sample(2, [0, 1], unc=0.7))
        assert out.id == 0

    def test_missing_uncertainty(self):
        buf = ReplayBuffer(2, Strategy.SELECTIVE, 0.25)
        with pytest.raises(MissingUncertaintyError):
            buf.insert(make_sample(0, [1, 0]))

    @pytest.mark.parametrize("k", [-0.1, 1.5])
    def test_k_range(self, k):
        with pytest.raises(ReplayBufferError):
            ReplayBuffer(4, Strategy.SELECTIVE, k)

    @pytest.mark.parametrize("k", [0.125, 0.25, 0.5, 0.9])
    def test_oracle_equivalence_and_protection(self, k):
        rng = np.random.default_rng(int(k * 1000))
        for trial in range(100):
            n = int(rng.integers(2, 9))
            buf = ReplayBuffer(n, Strategy.SELECTIVE, k)
            for s in random_stream(rng, 3 * n, dim=int(rng.integers(2, 6))):
                cands = buf.entries + [s]
                expected = None
                protected = set()
                if len(buf) == n:
                    expected = eviction_oracle(cands, k)
                    ranked = sorted(cands, key=lambda c: (-c.uncertainty, c.id))
                    protected = {c.id for c in ranked[:math.ceil(k * len(cands) - 1e-9)]}
                out = buf.insert(s)
                assert (out.id if out else None) == expected, f"trial {trial}"
                if out is not None and len(protected) < len(cands):
                    assert out.id not in protected
                np.testing.assert_allclose(buf.similarity_cache,
                                           brute_similarity([e.embedding for e in buf]), atol=1e-9)


def test_update_entry_keeps_cache_coherent():
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(6, Strategy.SELECTIVE, 0.25)
    for s in random_stream(rng, 10, dim=4):
        buf.insert(s)
    for _ in range(20):
        target = buf.entries[int(rng.integers(len(buf)))]
        buf.update_entry(target.id, embedding=rng.normal(size=4), uncertainty=float(rng.random()))
        assert np.linalg.norm(target.embedding) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(buf.similarity_cache, brute_similarity([e.embedding for e in buf]), atol=1e-9)


class TestSampling:
    def test_single(self):
        buf = ReplayBuffer(4, Strategy.LINEAR)
        buf.insert(make_sample(0))
        assert [s.id for s in sample_minibatch(buf, 1, np.random.default_rng(0))] == [0]

    def test_exhaustive_is_permutation(self):
        buf = ReplayBuffer(128, Strategy.LINEAR)
        for t in range(128):
            buf.insert(make_sample(t))
        ids = [s.id for s in sample_minibatch(buf, 128, np.random.default_rng(0))]
        assert sorted(ids) == list(range(128))

    def test_oversized_batch_draws_with_replacement(self):
        buf = ReplayBuffer(4, Strategy.LINEAR)
        for t in range(2):
            buf.insert(make_sample(t))
        assert len(sample_minibatch(buf, 5, np.random.default_rng(0))) == 5

    def test_uniform_frequencies(self):
        buf = ReplayBuffer(4, Strategy.LINEAR)
        for t in range(4):
            buf.insert(make_sample(t))
        rng = np.random.default_rng(42)
        counts = np.zeros(4)
        for _ in range(10_000):
            counts[sample_minibatch(buf, 1, rng)[0].id] += 1
        freq = counts / counts.sum()
        assert ((freq >= 0.22) & (freq <= 0.28)).all()

    def test_deterministic_and_non_mutating(self):
        buf = ReplayBuffer(16, Strategy.LINEAR)
        for t in range(16):
            buf.insert(make_sample(t))
        before = [s.id for s in buf]
        a = [s.id for s in sample_minibatch(buf, 8, np.random.default_rng(5))]
        b = [s.id for s in sample_minibatch(buf, 8, np.random.default_rng(5))]
        assert a == b and len(set(a)) == 8
        assert [s.id for s in buf] == before

    def test_empty(self):
        with pytest.raises(EmptyBufferError):
            sample_minibatch(ReplayBuffer(4), 1, np.random.default_rng(0))


class TestSchedule:
    def test_reference_rate(self):
        assert steps_for_arrival(SamplingSchedule(rate=100)) == 100

    def test_unit_rate(self):
        assert steps_for_arrival(SamplingSchedule(rate=1)) == 1

    def test_total_updates(self):
        sched = SamplingSchedule(rate=100)
        assert sum(steps_for_arrival(sched) for _ in range(2100)) == 210_000

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            SamplingSchedule(rate=0)


class TestSnapshot:
    def _buffer(self):
        rng = np.random.default_rng(9)
        buf = ReplayBuffer(8, Strategy.SELECTIVE, 0.25)
        for s in random_stream(rng, 12, dim=5):
            s.source_id = s.id % 3
            buf.insert(s)
        return buf

    def test_round_trip_bytes(self, tmp_path):
        buf = self._buffer()
        path = write_snapshot(buf, tmp_path / "snap.jsonl")
        text = path.read_text()
        header, entries = read_snapshot(path)
        assert format_snapshot(header, entries) == text
        assert header["strategy"] == "selective" and header["capacity"] == 8
        assert [e.id for e in entries] == [s.id for s in buf]
        for e, s in zip(entries, buf):
            np.testing.assert_allclose(e.embedding, s.embedding, atol=5e-10)
            assert e.uncertainty == pytest.approx(s.uncertainty, abs=5e-10)

    def test_nine_fraction_digits(self):
        buf = self._buffer()
        text = format_snapshot(snapshot_header(buf), snapshot_entries(buf))
        first = text.splitlines()[1]
        emb = first.split('"embedding":[')[1].split("]")[0].split(",")
        assert all(len(x.split(".")[1]) == 9 for x in emb)

    def test_bad_schema(self):
        with pytest.raises(ValueError):
            parse_snapshot('{"schema": "other"}\n')


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_same_stream_same_buffer(seed):
    def run():
        rng = np.random.default_rng(seed)
        buf = ReplayBuffer(5, Strategy.SELECTIVE, 0.25)
        log = [buf.insert(s) for s in random_stream(rng, 20)]
        return [s.id for s in buf], [e.id if e else None for e in log]

    assert run() == run()


def test_exact_duplicates_resolve_by_tie_rules():
    # ids 0 and 2 are identical; float noise in the cosine must not decide the victim
    buf = ReplayBuffer(2, Strategy.DYNAMIC)
    buf.insert(make_sample(0, [0.1, 0.7, 0.3]))
    buf.insert(make_sample(1, [1.0, 0.0, 0.0]))
    out = buf.insert(make_sample(2, [0.1, 0.7, 0.3]))
    assert out.id == 2
