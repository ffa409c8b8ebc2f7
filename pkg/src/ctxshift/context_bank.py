from __future__ import annotations

from collections import deque

import numpy as np
import torch

from .saliency import ContextEntry


class BankNotReady(RuntimeError):
    pass


class ContextBank:
    """Bounded FIFO queue of (image, background mask) contexts.

    Once ``capacity`` entries are held every push evicts the oldest one.
    Sampling draws uniformly with replacement and leaves the queue intact.
    """

    def __init__(self, capacity: int, image_shape: tuple[int, ...] | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.entries: deque[ContextEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def _check(self, entry: ContextEntry) -> None:
        shape = tuple(entry.image.shape)
        if self.image_shape is None:
            self.image_shape = shape
        elif shape != self.image_shape:
            raise ValueError(f"context image shape {shape} != bank shape {self.image_shape}")
        if tuple(entry.mask.shape) != shape[-2:]:
            raise ValueError(f"mask shape {tuple(entry.mask.shape)} does not match image {shape}")

    def push(self, entry: ContextEntry) -> "ContextBank":
        self._check(entry)
        self.entries.append(entry)
        return self

    def extend(self, entries) -> "ContextBank":
        for e in entries:
            self.push(e)
        return self

    def is_ready(self) -> bool:
        return len(self.entries) == self.capacity

    def clear(self) -> None:
        self.entries.clear()

    def sample(self, count: int, seed: int | np.random.Generator) -> list[ContextEntry]:
        if not self.is_ready():
            raise BankNotReady(f"bank holds {len(self)}/{self.capacity} contexts")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        picks = rng.integers(0, len(self.entries), size=count)
        return [self.entries[i] for i in picks]

    def sample_tensors(self, count: int, rng) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked ``(images, masks)`` for ``count`` uniform draws."""
        drawn = self.sample(count, rng)
        return torch.stack([e.image for e in drawn]), torch.stack([e.mask for e in drawn])
