"""Per-domain and ensemble embeddings, and Recall@K retrieval evaluation.

Protocol: every item queries all other items (self excluded), similarity is
the dot product, and equal similarities rank the lower gallery index first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .model import EmbeddingModel, embed
from .transforms import DomainSet, transform_batch

PROTOCOL = "all-vs-all/self-excluded/dot/lower-index-tiebreak"


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    data: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    segment_dim: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.segment_dim is None:
            self.segment_dim = self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def segments(self) -> list[np.ndarray]:
        d = self.segment_dim
        return [self.data[:, i:i + d] for i in range(0, self.data.shape[1], d)]

    def save(self, path) -> Path:
        meta = {"labels": self.labels.tolist(), "provenance": self.provenance, "segment_dim": self.segment_dim}
        return save_tensors(path, {"embeddings": self.data}, meta)

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        tensors, meta = load_tensors(path)
        return cls(tensors["embeddings"], np.array(meta["labels"]), meta["provenance"], meta["segment_dim"])


@dataclass
class RecallReport:
    recall: dict[int, float]
    protocol: str = PROTOCOL
    name: str = ""
    num_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "protocol": self.protocol,
            "num_queries": self.num_queries,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecallReport":
        return cls({int(k): float(v) for k, v in d["recall"].items()}, d["protocol"], d.get("name", ""),
                   d.get("num_queries", 0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def head_for(model: EmbeddingModel, domain_index: int) -> int:
    """Head to use for domain ``domain_index``; single-head models route everything to head 0."""
    return domain_index if model.config.split_heads else 0


def embed_images(model: EmbeddingModel, images: np.ndarray, rotation: int, head: int,
                 batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        chunk = transform_batch(images[start:start + batch_size], rotation)
        out.append(embed(model, chunk, head).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.head_dim))


def embed_dataset(model: EmbeddingModel, dataset, domain_index: int, rotation: int | None = None,
                  batch_size: int = 256) -> EmbeddingMatrix:
    """Row ``n`` is the embedding of item ``n`` rotated into the domain, through that domain's head."""
    rot = domain_index if rotation is None else rotation
    data = embed_images(model, dataset.images, rot, head_for(model, domain_index), batch_size)
    return EmbeddingMatrix(data, dataset.labels, provenance=f"domain{domain_index}")


def domain_embeddings(models: EmbeddingModel | Sequence[EmbeddingModel], dataset,
                      domains: DomainSet) -> list[EmbeddingMatrix]:
    """One matrix per domain. A list of models means model ``i`` owns domain ``i``."""
    if isinstance(models, EmbeddingModel):
        return [embed_dataset(models, dataset, i, rotation=r) for i, r in enumerate(domains)]
    if len(models) != len(domains):
        raise ValueError(f"{len(models)} models for {len(domains)} domains")
    return [embed_dataset(m, dataset, 0, rotation=r) for m, r in zip(models, domains)]


def concat_embeddings(mats: Sequence[EmbeddingMatrix]) -> EmbeddingMatrix:
    widths = {m.data.shape[1] for m in mats}
    seg = widths.pop() if len(widths) == 1 else None
    return EmbeddingMatrix(np.concatenate([m.data for m in mats], axis=1), mats[0].labels,
                           provenance="ensemble", segment_dim=seg)


def ensemble_embed(models, dataset, domains: DomainSet) -> EmbeddingMatrix:
    """Concatenate every item's per-domain embeddings."""
    return concat_embeddings(domain_embeddings(models, dataset, domains))


def rank_gallery(sim: np.ndarray) -> np.ndarray:
    """Gallery order per query: descending similarity, lower index first on ties, self last."""
    s = np.array(sim, dtype=np.float64, copy=True)
    np.fill_diagonal(s, -np.inf)
    return np.argsort(-s, axis=1, kind="stable")[:, :-1]


def first_hit_rank(sim: np.ndarray, labels) -> np.ndarray:
    """0-based rank of the best-ranked same-label gallery item per query (N if none exists)."""
    y = np.asarray(labels)
    n = y.size
    s = np.array(sim, dtype=np.float64, copy=True)
    np.fill_diagonal(s, -np.inf)
    pos = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    has_pos = pos.any(axis=1)
    masked = np.where(pos, s, -np.inf)
    best_j = np.argmax(masked, axis=1)  # first maximum -> lowest index among tied positives
    best_s = masked[np.arange(n), best_j][:, None]
    idx = np.arange(n)[None, :]
    ahead = (s > best_s) | ((s == best_s) & (idx < best_j[:, None]))
    ahead[np.arange(n), np.arange(n)] = False
    rank = ahead.sum(axis=1)
    return np.where(has_pos, rank, n)


def recall_at_k(emb: EmbeddingMatrix, ks: Sequence[int] = (1,), name: str = "") -> RecallReport:
    n = len(emb)
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ProtocolError(f"K values must be positive, got {ks}")
    if ks[-1] >= n:
        raise ProtocolError(f"K={ks[-1]} needs at least {ks[-1] + 1} items, have {n}")
    ranks = first_hit_rank(emb.data @ emb.data.T, emb.labels)
    recall = {k: float(np.mean(ranks < k)) for k in ks}
    return RecallReport(recall, name=name or emb.provenance, num_queries=n)


def evaluate(models, dataset, domains: DomainSet, ks: Sequence[int] = (1,)) -> dict[str, RecallReport]:
    """Recall reports keyed ``"0"``, ``"90"``, ... per domain (in degrees) plus ``"ensemble"``."""
    mats = domain_embeddings(models, dataset, domains)
    reports = {}
    for rot, m in zip(domains, mats):
        key = str(90 * rot)
        reports[key] = recall_at_k(m, ks, name=key)
    reports["ensemble"] = recall_at_k(concat_embeddings(mats), ks, name="ensemble")
    return reports
