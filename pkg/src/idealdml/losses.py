"""Contrastive, triplet and multi-similarity losses, and the per-domain IDEAL sum.

All losses take a batch of unit-norm embeddings (N×d tensor) and integer
labels, and return a scalar tensor. Pair and triplet masks depend only on
labels (and, for MS mining, on detached similarity values).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ConfigError, EmbeddingModel, embed
from .transforms import DomainSet, transform_batch

LOSS_KINDS = ("contrastive", "triplet", "multi-similarity")


class DegenerateBatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "multi-similarity"
    triplet_margin: float = 0.2
    triplet_reduction: str = "mean"
    pos_margin: float = 1.0
    neg_margin: float = 0.5
    ms_scale_pos: float = 2.0
    ms_scale_neg: float = 50.0
    ms_threshold: float = 1.0
    ms_margin: float = 0.1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}", "loss.kind")
        for key in ("triplet_margin", "pos_margin", "neg_margin", "ms_margin"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", f"loss.{key}")
        for key in ("ms_scale_pos", "ms_scale_neg"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0", f"loss.{key}")
        if self.triplet_reduction not in ("mean", "sum"):
            raise ConfigError("triplet_reduction must be 'mean' or 'sum'", "loss.triplet_reduction")


def pair_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    """Positive (same label, i != j) and negative (different label) N×N masks."""
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(y.size, dtype=bool)
    return pos, ~same


def triplet_mask(labels) -> np.ndarray:
    """``mask[a, p, n]`` is True for every valid (anchor, positive, negative)."""
    pos, neg = pair_masks(labels)
    return pos[:, :, None] & neg[:, None, :]


def similarity(emb: Tensor) -> Tensor:
    return ad.matmul(emb, ad.transpose(emb))


def pairwise_distance(emb: Tensor) -> Tensor:
    """Euclidean N×N distance matrix from explicit differences (exact zeros on coincident rows)."""
    n, d = emb.shape
    diff = ad.sub(ad.reshape(emb, (n, 1, d)), ad.reshape(emb, (1, n, d)))
    return ad.sqrt(ad.reduce_sum(ad.square(diff), axis=2))


def triplet_loss(emb: Tensor, labels, margin: float = 0.2, reduction: str = "mean") -> Tensor:
    """Hinge ``[d(a,p) - d(a,n) + margin]_+`` over every valid triplet in the batch.

    A batch with no valid triplet yields a zero loss and a
    :class:`DegenerateBatchWarning`.
    """
    mask = triplet_mask(labels)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("batch has no valid triplet", DegenerateBatchWarning, stacklevel=2)
        return ad.mul(ad.reduce_sum(emb), 0.0)
    n = emb.shape[0]
    dist = pairwise_distance(emb)
    gap = ad.sub(ad.reshape(dist, (n, n, 1)), ad.reshape(dist, (n, 1, n)))
    hinge = ad.relu(ad.add(gap, margin))
    total = ad.reduce_sum(ad.mul(hinge, mask.astype(np.float64)))
    return total if reduction == "sum" else ad.div(total, float(count))


def contrastive_loss(emb: Tensor, labels, pos_margin: float = 1.0, neg_margin: float = 0.5) -> Tensor:
    """Mean of ``[pos_margin - S]_+`` over positive pairs plus mean of ``[S - neg_margin]_+`` over negatives."""
    pos, neg = pair_masks(labels)
    sim = similarity(emb)
    terms = []
    if pos.any():
        hinge = ad.relu(ad.sub(pos_margin, sim))
        terms.append(ad.div(ad.reduce_sum(ad.mul(hinge, pos.astype(np.float64))), float(pos.sum())))
    if neg.any():
        hinge = ad.relu(ad.sub(sim, neg_margin))
        terms.append(ad.div(ad.reduce_sum(ad.mul(hinge, neg.astype(np.float64))), float(neg.sum())))
    if not terms:
        return ad.mul(ad.reduce_sum(emb), 0.0)
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def ms_mining(sim: np.ndarray, labels, margin: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multi-similarity pair mining on a similarity matrix.

    A negative is kept when ``S_an + margin > min_p S_ap``; a positive is kept
    when ``S_ap - margin < max_n S_an``. Returns (kept positives, kept
    negatives, active anchors), where an anchor is active if both kept sets
    are non-empty.
    """
    pos, neg = pair_masks(labels)
    big = np.inf
    hardest_pos = np.where(pos, sim, big).min(axis=1, keepdims=True)
    hardest_neg = np.where(neg, sim, -big).max(axis=1, keepdims=True)
    keep_neg = neg & (sim + margin > hardest_pos)
    keep_pos = pos & (sim - margin < hardest_neg)
    active = keep_pos.any(axis=1) & keep_neg.any(axis=1)
    return keep_pos, keep_neg, active


def ms_loss(emb: Tensor, labels, scale_pos: float = 2.0, scale_neg: float = 50.0,
            threshold: float = 1.0, margin: float = 0.1) -> Tensor:
    """Multi-similarity loss averaged over anchors that keep at least one positive and one negative."""
    sim = similarity(emb)
    keep_pos, keep_neg, active = ms_mining(sim.data, labels, margin)
    if not active.any():
        return ad.mul(ad.reduce_sum(emb), 0.0)
    rows = active.astype(np.float64)[:, None]
    pos_w = keep_pos.astype(np.float64) * rows
    neg_w = keep_neg.astype(np.float64) * rows
    shifted = ad.sub(sim, threshold)
    pos_sum = ad.reduce_sum(ad.mul(ad.exp(ad.mul(shifted, -scale_pos)), pos_w), axis=1)
    neg_sum = ad.reduce_sum(ad.mul(ad.exp(ad.mul(shifted, scale_neg)), neg_w), axis=1)
    per_anchor = ad.add(
        ad.mul(ad.log(ad.add(pos_sum, 1.0)), 1.0 / scale_pos),
        ad.mul(ad.log(ad.add(neg_sum, 1.0)), 1.0 / scale_neg),
    )
    return ad.div(ad.reduce_sum(per_anchor), float(active.sum()))


def base_loss(emb: Tensor, labels, cfg: LossConfig) -> Tensor:
    if cfg.kind == "triplet":
        return triplet_loss(emb, labels, cfg.triplet_margin, cfg.triplet_reduction)
    if cfg.kind == "contrastive":
        return contrastive_loss(emb, labels, cfg.pos_margin, cfg.neg_margin)
    return ms_loss(emb, labels, cfg.ms_scale_pos, cfg.ms_scale_neg, cfg.ms_threshold, cfg.ms_margin)


def domain_losses(model: EmbeddingModel, batch: np.ndarray, labels, domains: DomainSet,
                  cfg: LossConfig) -> list[Tensor]:
    """One base loss per domain: rotate the batch by ``T_i`` and embed it through head ``i``.

    No pair or triplet ever mixes two domains.
    """
    if len(domains) != model.config.num_domains:
        raise ConfigError(
            f"model has {model.config.num_domains} domains but the domain set has {len(domains)}",
            "model.num_domains",
        )
    return [
        base_loss(embed(model, transform_batch(batch, rot), i), labels, cfg)
        for i, rot in enumerate(domains)
    ]


def ideal_loss(model: EmbeddingModel, batch: np.ndarray, labels, domains: DomainSet, cfg: LossConfig) -> Tensor:
    """Unweighted sum of the per-domain losses."""
    terms = domain_losses(model, batch, labels, domains, cfg)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
