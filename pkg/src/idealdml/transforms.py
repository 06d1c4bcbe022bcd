"""Domain augmentation by exact quarter-turn rotations, plus crop/flip data augmentation.

Images are float64 arrays shaped C×H×W; batches are N×C×H×W. Rotations are
pure index permutations (counter-clockwise), so every domain is an exact,
information-preserving copy of the source data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DomainSet:
    """Ordered rotation indices; index ``i`` means a rotation by ``90 * i`` degrees."""

    rotations: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        rots = tuple(int(r) for r in self.rotations)
        object.__setattr__(self, "rotations", rots)
        if not rots or rots[0] != 0:
            raise ValueError(f"domain set must start with the identity rotation 0, got {list(rots)}")
        if len(set(rots)) != len(rots) or any(r not in (0, 1, 2, 3) for r in rots):
            raise ValueError(f"rotation indices must be distinct values in 0..3, got {list(rots)}")

    def __len__(self) -> int:
        return len(self.rotations)

    def __iter__(self):
        return iter(self.rotations)

    @property
    def degrees(self) -> list[int]:
        return [90 * r for r in self.rotations]


@dataclass(frozen=True)
class DataAugConfig:
    pad: int = 0
    crop_size: int | None = None
    flip_prob: float = 0.0

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


def rotate90(image: np.ndarray, i: int) -> np.ndarray:
    """Rotate a C×H×W image counter-clockwise by ``90 * i`` degrees.

    ``[[a, b], [c, d]]`` with ``i=1`` becomes ``[[b, d], [a, c]]``.
    """
    k = int(i) % 4
    if k == 0:
        return np.array(image, copy=True)
    return np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))


def transform_batch(batch: np.ndarray, rotation: int) -> np.ndarray:
    """Apply the same rotation to every image of an N×C×H×W batch."""
    # rot90 on the trailing axes rotates each image independently
    return rotate90(batch, rotation)


def rotate_each(batch: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Rotate image ``n`` of the batch by ``rotations[n]`` quarter turns."""
    rotations = np.asarray(rotations, dtype=int) % 4
    if batch.shape[-1] != batch.shape[-2] and np.any(rotations % 2):
        raise ValueError("per-image odd rotations need square images to stack into one batch")
    out = np.empty_like(batch)
    for n, r in enumerate(rotations):
        out[n] = rotate90(batch[n], r)
    return out


def apply_data_aug(image: np.ndarray, cfg: DataAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop back to ``crop_size`` and maybe mirror horizontally.

    Draws exactly three numbers from ``rng`` per call so streams stay aligned
    regardless of the config.
    """
    c, h, w = image.shape
    ch, cw = (cfg.crop_size, cfg.crop_size) if cfg.crop_size else (h, w)
    ph, pw = h + 2 * cfg.pad, w + 2 * cfg.pad
    if ch > ph or cw > pw:
        raise ValueError(f"crop size {cfg.crop_size} exceeds padded image {ph}x{pw}")
    top = int(rng.integers(0, ph - ch + 1))
    left = int(rng.integers(0, pw - cw + 1))
    flip = rng.random() < cfg.flip_prob
    if cfg.pad:
        image = np.pad(image, ((0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)))
    out = image[:, top:top + ch, left:left + cw]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(batch: np.ndarray, cfg: DataAugConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([apply_data_aug(img, cfg, rng) for img in batch])


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])
