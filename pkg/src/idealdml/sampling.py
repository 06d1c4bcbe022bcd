"""P×K class-balanced mini-batch sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PKConfig:
    P: int = 8
    K: int = 4

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"PK sampler needs P >= 2 and K >= 2, got P={self.P}, K={self.K}", "sampler")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


class PKSampler:
    """Draws batches of ``P`` distinct classes with ``K`` items each.

    Classes are chosen uniformly without replacement inside a batch. Items
    are drawn without replacement when a class has at least ``K`` of them,
    otherwise with replacement.
    """

    def __init__(self, labels, cfg: PKConfig):
        labels = np.asarray(labels)
        self.cfg = cfg
        self.classes = np.unique(labels)
        if self.classes.size < cfg.P:
            raise ConfigError(
                f"PK sampler needs at least P={cfg.P} classes, dataset has {self.classes.size}", "sampler.P"
            )
        self.index_of = {int(c): np.flatnonzero(labels == c) for c in self.classes}
        self.num_items = labels.size

    def batches_per_epoch(self) -> int:
        return math.ceil(self.num_items / self.cfg.batch_size)

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        P, K = self.cfg.P, self.cfg.K
        chosen = rng.choice(self.classes, size=P, replace=False)
        out = []
        for c in chosen:
            pool = self.index_of[int(c)]
            out.append(rng.choice(pool, size=K, replace=pool.size < K))
        return np.concatenate(out)

    def epoch(self, rng: np.random.Generator):
        for _ in range(self.batches_per_epoch()):
            yield self.next_batch(rng)


def next_batch(labels, cfg: PKConfig, rng: np.random.Generator) -> np.ndarray:
    """One P·K batch of dataset indices."""
    return PKSampler(labels, cfg).next_batch(rng)
