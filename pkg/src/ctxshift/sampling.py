"""Class-aware re-sampling.

A class is drawn with probability ``n_k**q / sum_j n_j**q`` and an instance is
then drawn uniformly inside that class.  ``q = 1`` is ordinary uniform
sampling over instances; ``q = 0`` is class-balanced re-sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lt_data import LongTailDataset


def class_sampling_probs(counts, q: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("counts must be non-empty")
    if np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    # normalise in log space so large counts with q near 1 stay exact
    logw = q * np.log(counts)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def gamma_to_q(gamma: float) -> float:
    """Per-sample weight ``n_y**-gamma`` puts class mass ``n_k**(1-gamma)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return 1.0 - gamma


@dataclass(frozen=True)
class SamplerSpec:
    q: float
    class_probs: tuple[float, ...]

    @property
    def gamma(self) -> float:
        return 1.0 - self.q

    @classmethod
    def from_counts(cls, counts, q: float) -> "SamplerSpec":
        return cls(float(q), tuple(class_sampling_probs(counts, q).tolist()))

    @classmethod
    def from_gamma(cls, counts, gamma: float) -> "SamplerSpec":
        return cls.from_counts(counts, gamma_to_q(gamma))


def _draw(class_index: list[np.ndarray], probs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    classes = rng.choice(len(probs), size=count, p=probs)
    out = np.empty(count, dtype=np.int64)
    for k, members in enumerate(class_index):
        hit = np.flatnonzero(classes == k)
        if hit.size:
            out[hit] = members[rng.integers(0, len(members), size=hit.size)]
    return out


def draw_indices(dataset: LongTailDataset, spec: SamplerSpec, count: int, seed: int) -> np.ndarray:
    """``count`` dataset indices from the two-stage class-then-instance draw."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return _draw(dataset.class_indices(), np.asarray(spec.class_probs), count, rng)


def balanced_quota(N: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class sizes summing to N, each floor(N/K) or ceil(N/K)."""
    quota = np.full(K, N // K, dtype=np.int64)
    quota[rng.permutation(K)[: N % K]] += 1
    return quota


def balanced_replica_indices(labels: np.ndarray, K: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    N = len(labels)
    quota = balanced_quota(N, K, rng)
    picks = []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        replace = len(members) < quota[k]
        picks.append(rng.choice(members, size=quota[k], replace=replace))
    return rng.permutation(np.concatenate(picks))


def build_balanced_replica(dataset: LongTailDataset, seed: int) -> LongTailDataset:
    """A class-balanced resample of ``dataset`` with the same size N.

    Classes smaller than their quota are drawn with replacement, the rest
    without.  Shot groups and profile refer to the original dataset; the
    chosen indices are kept in ``metadata["replica_indices"]``.
    """
    idx = balanced_replica_indices(dataset.labels, dataset.num_classes, seed)
    return LongTailDataset(
        images=dataset.images[idx],
        labels=dataset.labels[idx],
        profile=dataset.profile,
        shot_groups=dataset.shot_groups,
        seed=seed,
        name=dataset.name,
        metadata={"replica_indices": idx},
    )


class BatchStream:
    """Endless stream of index mini-batches.

    ``q=1`` walks random permutations of the dataset (the usual epoch-style
    shuffling); other q values use the two-stage draw.  A fixed ``indices``
    array (e.g. a balanced replica) is walked in shuffled passes.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, seed: int, q: float = 1.0, indices=None):
        self.labels = labels
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.q = q
        self.indices = None if indices is None else np.asarray(indices)
        K = int(labels.max()) + 1
        self._members = [np.flatnonzero(labels == k) for k in range(K)]
        self._probs = class_sampling_probs(np.bincount(labels, minlength=K), q)
        self._queue = np.empty(0, dtype=np.int64)

    def _refill(self) -> np.ndarray:
        if self.indices is not None:
            return self.indices[self.rng.permutation(len(self.indices))]
        if self.q == 1.0:
            return self.rng.permutation(len(self.labels))
        return _draw(self._members, self._probs, len(self.labels), self.rng)

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self._refill()])
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return batch
