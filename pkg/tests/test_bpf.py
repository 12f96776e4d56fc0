import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskfed import bpf
from maskfed.errors import EmptyClientError


def make_pool(counts: dict[int, int], epochs: int, client_id=0, kept=2, d=3):
    """One record per (class sample, epoch), like training collection."""
    pool = []
    for cls, n in counts.items():
        for epoch in range(epochs):
            for s in range(n):
                feats = np.full((kept + 1, d), 100 * cls + 10 * epoch + s,
                                dtype=np.float32)
                pool.append(bpf.PatchFeatureRecord(
                    client_id, cls, epoch, np.arange(kept), feats))
    return pool


def reference_balance_counts(counts: dict[int, int], epochs: int) -> dict[int, int]:
    """Literal reading of the sampling prose, written independently:
    lower median of class counts; minority classes (count < median) keep
    features from all epochs, majority classes keep only the final epoch;
    then every class is downsampled to at most the median."""
    values = sorted(counts.values())
    median = values[(len(values) - 1) // 2]
    out = {}
    for cls, n in counts.items():
        available = n * epochs if n < median else n
        out[cls] = min(median, available)
    return out


class TestClassMedian:
    def test_odd(self):
        assert bpf.class_median({0: 6, 1: 3, 2: 1}) == 3

    def test_singleton(self):
        assert bpf.class_median({5: 5}) == 5

    def test_even_lower_median(self):
        assert bpf.class_median({0: 4, 1: 2}) == 2

    def test_empty_raises(self):
        with pytest.raises(EmptyClientError):
            bpf.class_median({})
        with pytest.raises(EmptyClientError):
            bpf.class_median({0: 0})


class TestCollect:
    def test_pool_size_counts_epochs(self):
        pool = []
        feats = np.zeros((4, 3, 5), dtype=np.float32)
        idx = np.tile(np.arange(2), (4, 1))
        labels = np.array([0, 1, 0, 1])
        for epoch in range(3):
            bpf.collect(pool, 0, epoch, feats, labels, idx)
        assert len(pool) == 12

    def test_detachment_copies(self):
        pool = []
        feats = np.ones((1, 3, 2), dtype=np.float32)
        bpf.collect(pool, 0, 0, feats, np.array([1]), np.tile(np.arange(2), (1, 1)))
        pool[0].features[...] = 99.0
        assert (feats == 1.0).all()

    def test_provenance_labels(self):
        pool = []
        labels = np.array([3, 1, 4])
        bpf.collect(pool, 7, 2, np.zeros((3, 2, 2), dtype=np.float32), labels,
                    np.tile(np.arange(1), (3, 1)))
        assert [r.label for r in pool] == [3, 1, 4]
        assert all(r.client_id == 7 and r.epoch == 2 for r in pool)


class TestMedianBalance:
    def test_spec_worked_example(self):
        counts = {0: 6, 1: 3, 2: 1}
        pool = make_pool(counts, epochs=3)
        out = bpf.median_balance(pool, counts, 3, np.random.default_rng(0))
        assert out.per_class_count == {0: 3, 1: 3, 2: 3}
        # majority classes contribute final-epoch records only
        assert all(r.epoch == 2 for r in out.records if r.label in (0, 1))
        # the single minority sample appears once per epoch
        assert sorted(r.epoch for r in out.records if r.label == 2) == [0, 1, 2]

    def test_single_class(self):
        counts = {0: 5}
        pool = make_pool(counts, epochs=2)
        out = bpf.median_balance(pool, counts, 5, np.random.default_rng(0))
        assert out.per_class_count == {0: 5}
        assert all(r.epoch == 1 for r in out.records)

    def test_lower_median_two_classes(self):
        counts = {0: 9, 1: 1}
        pool = make_pool(counts, epochs=2)
        median = bpf.class_median(counts)
        assert median == 1
        out = bpf.median_balance(pool, counts, median, np.random.default_rng(0))
        assert out.per_class_count == {0: 1, 1: 1}

    def test_no_fabrication_membership(self):
        counts = {0: 4, 1: 2}
        pool = make_pool(counts, epochs=3)
        out = bpf.median_balance(pool, counts, 2, np.random.default_rng(1))
        ids = {id(r) for r in pool}
        assert all(id(r) in ids for r in out.records)
        # no duplicates either
        assert len({id(r) for r in out.records}) == len(out.records)

    def test_balance_invariant(self):
        counts = {0: 8, 1: 5, 2: 2, 3: 1}
        pool = make_pool(counts, epochs=2)
        median = bpf.class_median(counts)
        out = bpf.median_balance(pool, counts, median, np.random.default_rng(2))
        assert max(out.per_class_count.values()) <= median
        for cls, n in counts.items():
            if n >= median:
                assert out.per_class_count[cls] == median

    def test_determinism(self):
        counts = {0: 7, 1: 3}
        pool = make_pool(counts, epochs=2)
        a = bpf.median_balance(pool, counts, 3, np.random.default_rng(9))
        b = bpf.median_balance(pool, counts, 3, np.random.default_rng(9))
        assert [id(r) for r in a.records] == [id(r) for r in b.records]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_matches_brute_force_reference(self, classes, epochs, seed):
        rng = np.random.default_rng(seed)
        counts = {c: int(rng.integers(1, 11)) for c in range(classes)}
        pool = make_pool(counts, epochs)
        median = bpf.class_median(counts)
        out = bpf.median_balance(pool, counts, median, np.random.default_rng(seed + 1))
        assert out.per_class_count == reference_balance_counts(counts, epochs)


class TestWireFormat:
    def test_empty_set_round_trip(self):
        payload = bpf.serialize_bpf(bpf.BalancedFeatureSet(3, [], {}, 0))
        back = bpf.deserialize_bpf(payload)
        assert back.records == [] and back.client_id == 3

    def test_round_trip_bitwise(self):
        counts = {0: 3, 1: 2}
        pool = make_pool(counts, epochs=2, client_id=5, kept=4, d=6)
        out = bpf.median_balance(pool, counts, 2, np.random.default_rng(0))
        payload = bpf.serialize_bpf(out)
        back = bpf.deserialize_bpf(payload)
        assert bpf.serialize_bpf(back) == payload
        for a, b in zip(out.records, back.records):
            assert a.label == b.label
            np.testing.assert_array_equal(a.kept_indices, b.kept_indices)
            np.testing.assert_array_equal(a.features, b.features)

    def test_size_formula_audit(self):
        counts = {0: 4}
        kept, d = 3, 5
        pool = make_pool(counts, epochs=1, kept=kept, d=d)
        out = bpf.median_balance(pool, counts, 4, np.random.default_rng(0))
        payload = bpf.serialize_bpf(out)
        assert len(payload) == bpf.payload_nbytes(len(out.records), kept, d)
