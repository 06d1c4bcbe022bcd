"""Synthetic glyph/blob datasets, image-folder IO and class-disjoint splits."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .transforms import rotate90

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
MIN_IMAGE_SIZE = 16


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W in [0, 1]
    labels: np.ndarray  # N class ids
    class_names: list[str]
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.split == "train" and self.labels.size:
            _, counts = np.unique(self.labels, return_counts=True)
            if counts.min() < 2:
                raise ValueError("every training class needs at least 2 items to form positive pairs")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_names, split or self.split)


@dataclass(frozen=True)
class GlyphConfig:
    """Parameters of the synthetic generator.

    ``kind="glyph"`` draws chiral polyline glyphs; with ``orientation_classes``
    each quarter-turn of a base glyph is its own class, so rotating an image
    moves it to another class. ``kind="blob"`` draws isotropic Gaussian blobs
    whose class does not depend on orientation.

    ``stripe_sigma`` adds per-row brightness offsets (scanline noise) and
    ``horizon`` brightens every row below a random horizon line by that
    amount, like the ground in an upright photo. Both are applied after
    orientation, so they mark the upright image frame and do not rotate with
    the glyph.
    """

    num_base_shapes: int = 6
    orientation_classes: bool = True
    samples_per_class: int = 200
    image_size: int = 64
    translate: int = 3
    vertex_jitter: float = 1.0
    noise_sigma: float = 0.05
    stripe_sigma: float = 0.0
    horizon: float = 0.0
    stroke: float = 4.0
    kind: str = "glyph"
    seed: int = 0

    def __post_init__(self):
        if self.image_size < MIN_IMAGE_SIZE:
            raise ConfigError(f"image_size must be >= {MIN_IMAGE_SIZE} to fit a glyph, got {self.image_size}",
                              "dataset.synthetic.image_size")
        if self.kind not in ("glyph", "blob"):
            raise ConfigError(f"kind must be 'glyph' or 'blob', got {self.kind!r}", "dataset.synthetic.kind")
        if self.num_base_shapes < 1 or self.samples_per_class < 1:
            raise ConfigError("num_base_shapes and samples_per_class must be positive", "dataset.synthetic")

    @property
    def num_classes(self) -> int:
        if self.kind == "glyph" and self.orientation_classes:
            return 4 * self.num_base_shapes
        return self.num_base_shapes


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / max(length2, 1e-12), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def rasterize_polyline(points: np.ndarray, size: int, stroke: float) -> np.ndarray:
    """Binary H×W raster of a polyline given in pixel coordinates (x right, y down)."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dist = np.full((size, size), np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dist = np.minimum(dist, _segment_distance(xs, ys, x0, y0, x1, y1))
    return (dist <= stroke / 2.0).astype(np.float64)


def _dihedral(img: np.ndarray) -> list[np.ndarray]:
    out = []
    for base in (img, img[:, ::-1]):
        out.extend(np.rot90(base, k) for k in range(4))
    return out


def _random_polyline(rng: np.random.Generator, size: int) -> np.ndarray:
    # lattice walk on a 4×4 grid spanning the central ~60% of the canvas
    lo, hi = 0.2 * size, 0.8 * size
    grid = np.linspace(lo, hi, 4)
    n_vertices = int(rng.integers(4, 6))
    cur = rng.integers(0, 4, size=2)
    pts = [cur.copy()]
    for _ in range(n_vertices - 1):
        for _attempt in range(20):
            axis = rng.integers(0, 2)
            nxt = cur.copy()
            nxt[axis] = rng.integers(0, 4)
            if not np.array_equal(nxt, cur) and not any(np.array_equal(nxt, p) for p in pts):
                break
        cur = nxt
        pts.append(cur.copy())
    return np.array([[grid[p[0]], grid[p[1]]] for p in pts])


def base_glyphs(cfg: GlyphConfig) -> list[np.ndarray]:
    """Canonical polylines, one per base shape.

    Each accepted glyph is chiral with no rotational symmetry (its eight
    dihedral images differ pairwise) and differs from every earlier glyph
    under all dihedral transforms.
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    size, min_diff = cfg.image_size, max(8, cfg.image_size // 4)
    glyphs, seen = [], []
    for _ in range(10_000):
        if len(glyphs) == cfg.num_base_shapes:
            break
        poly = _random_polyline(rng, size)
        img = rasterize_polyline(poly, size, cfg.stroke)
        if img.sum() < size:
            continue
        variants = _dihedral(img)
        distinct = all(
            np.abs(variants[a] - variants[b]).sum() >= min_diff
            for a in range(8) for b in range(a + 1, 8)
        )
        novel = all(np.abs(v - s).sum() >= min_diff for v in variants for s in seen)
        if distinct and novel:
            glyphs.append(poly)
            seen.append(img)
    if len(glyphs) < cfg.num_base_shapes:
        raise ValueError(f"could not find {cfg.num_base_shapes} distinct glyphs at size {size}")
    return glyphs


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def render_glyph(poly: np.ndarray, orientation: int, cfg: GlyphConfig, rng: np.random.Generator | None) -> np.ndarray:
    """One 1×H×W sample of ``poly`` rotated by ``orientation`` quarter turns.

    With ``rng=None`` (or all jitter zero) this is the canonical image, and the
    canonical image of orientation ``o`` equals ``rotate90`` of orientation 0
    applied ``o`` times.
    """
    size = cfg.image_size
    if rng is not None and cfg.vertex_jitter > 0:
        poly = poly + rng.normal(0.0, cfg.vertex_jitter, size=poly.shape)
    img = rasterize_polyline(poly, size, cfg.stroke)[None]
    img = rotate90(img, orientation)
    if rng is None:
        return img
    if cfg.translate:
        dy, dx = rng.integers(-cfg.translate, cfg.translate + 1, size=2)
        img = _shift(img, int(dy), int(dx))
    if cfg.horizon > 0:
        level = int(rng.integers(int(0.6 * size), int(0.9 * size) + 1))
        img = img.copy()
        img[..., level:, :] += cfg.horizon
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    if cfg.stripe_sigma > 0:
        img = img + rng.normal(0.0, cfg.stripe_sigma, size=(1, size, 1))
    return np.clip(img, 0.0, 1.0)


def _render_blobs(class_id: int, cfg: GlyphConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    count = 1 + class_id % 4
    sigma = size * (0.05 + 0.03 * (class_id // 4))
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    img = np.zeros((size, size))
    centers = rng.uniform(0.25 * size, 0.75 * size, size=(count, 2))
    for cy, cx in centers:
        img += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))
    img = np.clip(img, 0.0, 1.0)[None]
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, size=img.shape), 0.0, 1.0)
    return img


def class_names_for(cfg: GlyphConfig) -> list[str]:
    if cfg.kind == "blob":
        return [f"blob{c:02d}" for c in range(cfg.num_classes)]
    if cfg.orientation_classes:
        return [f"glyph{s:02d}_rot{90 * o:03d}" for s in range(cfg.num_base_shapes) for o in range(4)]
    return [f"glyph{s:02d}" for s in range(cfg.num_base_shapes)]


def generate_synthetic(cfg: GlyphConfig) -> Dataset:
    """Deterministic dataset from ``cfg``; class ``4*s + o`` is glyph ``s`` at orientation ``o``."""
    rng = np.random.default_rng(cfg.seed)
    images, labels = [], []
    if cfg.kind == "blob":
        for c in range(cfg.num_classes):
            for _ in range(cfg.samples_per_class):
                images.append(_render_blobs(c, cfg, rng))
                labels.append(c)
    else:
        glyphs = base_glyphs(cfg)
        orientations = range(4) if cfg.orientation_classes else (0,)
        for s, poly in enumerate(glyphs):
            for o in orientations:
                label = 4 * s + o if cfg.orientation_classes else s
                for _ in range(cfg.samples_per_class):
                    images.append(render_glyph(poly, o, cfg, rng))
                    labels.append(label)
    return Dataset(np.stack(images), np.array(labels), class_names_for(cfg), split="all")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_train_test(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Class-disjoint split: the first ceil(C/2) class ids train, the rest test."""
    classes = dataset.classes
    if classes.size < 2:
        raise ValueError("need at least two classes to split")
    cut = math.ceil(classes.size / 2)
    train_mask = np.isin(dataset.labels, classes[:cut])
    return (
        dataset.subset(np.flatnonzero(train_mask), split="train"),
        dataset.subset(np.flatnonzero(~train_mask), split="test"),
    )


def take_per_class(dataset: Dataset, n: int) -> Dataset:
    """Keep the first ``n`` items of every class, preserving order."""
    keep = np.concatenate([np.flatnonzero(dataset.labels == c)[:n] for c in dataset.classes])
    return dataset.subset(np.sort(keep))


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------


def _decode(path: Path, size: int, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        w, h = im.size
        if (w, h) != (size, size):
            scale = size / min(w, h)
            im = im.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
            w, h = im.size
            left, top = (w - size) // 2, (h - size) // 2
            im = im.crop((left, top, left + size, top + size))
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def load_image_folder(path, image_size: int = 64, channels: int = 1) -> Dataset:
    """Read ``root/<class_name>/<file>`` into a dataset; labels follow sorted class names."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class subdirectories")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(_decode(f, image_size, channels))
            except (OSError, ValueError) as exc:
                warnings.warn(f"skipping unreadable image {f}: {exc}")
                continue
            labels.append(label)
            count += 1
        if count == 0:
            raise ValueError(f"class folder {cdir} has no readable images")
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], split="all")


def export_image_folder(dataset: Dataset, root, metadata: dict | None = None) -> Path:
    """Write ``dataset`` as ``root/<class_name>/<n>.pgm`` (``.ppm`` for RGB) plus ``metadata.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    channels = dataset.images.shape[1]
    suffix = ".pgm" if channels == 1 else ".ppm"
    counters: dict[int, int] = {}
    for img, label in zip(dataset.images, dataset.labels):
        name = dataset.class_names[int(label)]
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        k = counters.get(int(label), 0)
        counters[int(label)] = k + 1
        q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        pil = Image.fromarray(q[0]) if channels == 1 else Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)))
        pil.save(cdir / f"{k:05d}{suffix}")
    meta = {
        "num_classes": len(counters),
        "num_images": len(dataset),
        "class_names": [dataset.class_names[c] for c in sorted(counters)],
        "counts": {dataset.class_names[c]: n for c, n in sorted(counters.items())},
        "geometry": list(dataset.geometry),
    }
    if metadata:
        meta.update(metadata)
    (root / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def glyph_config_dict(cfg: GlyphConfig) -> dict:
    return asdict(cfg)
