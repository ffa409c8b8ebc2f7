import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxshift.sampling import (
    BatchStream,
    SamplerSpec,
    balanced_replica_indices,
    build_balanced_replica,
    class_sampling_probs,
    draw_indices,
    gamma_to_q,
)

from conftest import make_synthetic


class TestProbs:
    def test_q_half_oracle(self):
        # sqrt weights (10, sqrt 10, 1) normalised, mpmath at 30 digits
        expected = [0.706101111697, 0.223288777134, 0.0706101111697]
        np.testing.assert_allclose(class_sampling_probs([100, 10, 1], 0.5), expected, rtol=1e-11)

    def test_uniform_and_balanced(self):
        counts = [50, 30, 20]
        np.testing.assert_allclose(class_sampling_probs(counts, 1.0), [0.5, 0.3, 0.2], rtol=1e-14)
        np.testing.assert_allclose(class_sampling_probs(counts, 0.0), [1 / 3] * 3, rtol=1e-14)

    def test_single_class(self):
        assert class_sampling_probs([7], 0.3).tolist() == [1.0]

    @pytest.mark.parametrize("counts,q", [([5, 0], 1.0), ([], 0.5), ([3, 4], 1.5), ([3, 4], -0.1)])
    def test_rejects(self, counts, q):
        with pytest.raises(ValueError):
            class_sampling_probs(counts, q)

    def test_gamma(self):
        assert gamma_to_q(0.0) == 1.0 and gamma_to_q(1.0) == 0.0
        assert SamplerSpec.from_gamma([10, 1], 0.25).q == 0.75
        with pytest.raises(ValueError):
            gamma_to_q(2.0)

    @given(st.lists(st.integers(1, 10**6), min_size=1, max_size=200), st.floats(0, 1))
    def test_sum_and_monotone(self, counts, q):
        p = class_sampling_probs(counts, q)
        assert abs(p.sum() - 1) <= 1e-9
        order = np.argsort(counts, kind="stable")
        assert np.all(np.diff(p[order]) >= -1e-15)


class TestDraw:
    @pytest.mark.parametrize("q", [0.0, 0.5, 1.0])
    def test_empirical_matches(self, q):
        ds = make_synthetic([500, 120, 30, 6])
        spec = SamplerSpec.from_counts(ds.class_counts(), q)
        idx = draw_indices(ds, spec, 100_000, seed=1)
        freq = np.bincount(ds.labels[idx], minlength=4) / len(idx)
        assert np.abs(freq - np.array(spec.class_probs)).sum() < 0.01

    def test_within_class_uniform(self):
        ds = make_synthetic([10, 4])
        idx = draw_indices(ds, SamplerSpec.from_counts(ds.class_counts(), 0.0), 40_000, seed=2)
        hits = np.bincount(idx[ds.labels[idx] == 1], minlength=len(ds))[10:]
        np.testing.assert_allclose(hits / hits.sum(), 0.25, atol=0.02)

    def test_seeded(self):
        ds = make_synthetic([20, 5])
        spec = SamplerSpec.from_counts(ds.class_counts(), 0.0)
        np.testing.assert_array_equal(draw_indices(ds, spec, 50, 3), draw_indices(ds, spec, 50, 3))
        with pytest.raises(ValueError):
            draw_indices(ds, spec, 0, 3)


class TestReplica:
    def test_balanced_and_sized(self):
        ds = make_synthetic([50, 20, 7, 3])
        rep = build_balanced_replica(ds, seed=0)
        assert len(rep) == len(ds)
        counts = rep.class_counts()
        assert counts.max() - counts.min() <= 1
        assert rep.shot_groups == ds.shot_groups

    def test_large_class_without_replacement(self):
        labels = np.array([0] * 90 + [1] * 10)
        idx = balanced_replica_indices(labels, 2, seed=4)
        head = idx[labels[idx] == 0]
        assert len(np.unique(head)) == len(head) == 50

    @settings(max_examples=30)
    @given(st.lists(st.integers(1, 40), min_size=2, max_size=8), st.integers(0, 1000))
    def test_quota_property(self, counts, seed):
        labels = np.concatenate([np.full(n, k) for k, n in enumerate(counts)])
        idx = balanced_replica_indices(labels, len(counts), seed)
        got = np.bincount(labels[idx], minlength=len(counts))
        assert got.sum() == len(labels) and got.max() - got.min() <= 1


class TestBatchStream:
    def test_uniform_epoch_is_permutation(self):
        labels = np.repeat(np.arange(3), [6, 3, 3])
        s = BatchStream(labels, 4, seed=0, q=1.0)
        seen = np.concatenate([s.next() for _ in range(3)])
        assert sorted(seen) == list(range(12))

    def test_balanced_frequencies(self):
        labels = np.repeat(np.arange(3), [300, 30, 3])
        s = BatchStream(labels, 100, seed=1, q=0.0)
        drawn = np.concatenate([s.next() for _ in range(300)])
        freq = np.bincount(labels[drawn]) / len(drawn)
        np.testing.assert_allclose(freq, 1 / 3, atol=0.01)

    def test_fixed_indices(self):
        labels = np.zeros(10, dtype=np.int64)
        s = BatchStream(labels, 3, seed=0, indices=[2, 5, 7])
        assert sorted(np.concatenate([s.next(), s.next()])[:3]) == [2, 5, 7]
