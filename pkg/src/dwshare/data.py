"""Datasets: DTB/manifest I/O, shuffled batching and synthetic domains.

Every synthetic domain draws a single-channel pattern and colours it with the
same foreground/background palette, so the domains share their cross-channel
structure while differing in spatial statistics:

* ``blobs``        Gaussian blob; class = (grid position, scale)
* ``stripes``      sinusoidal grating; class = (orientation, frequency)
* ``polygons``     regular polygon; class = (vertex count, filled/outline)
* ``digits-grid``  3x5 cell font; class = which cells are lit
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidArgumentError
from .tensor import load_dtb, make_rng, save_dtb

SPLITS = ("train", "val", "test")
KINDS = ("blobs", "stripes", "polygons", "digits-grid")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"{self.name}/{self.split}: images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != self.images.shape[0] or len(self.labels) < 1:
            raise DataError(f"{self.name}/{self.split}: {self.images.shape[0]} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"{self.name}/{self.split}: labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0):
    """One shuffled epoch; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = make_rng(seed, 7, epoch).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def duplicate_count(a: Dataset, b: Dataset) -> int:
    """Number of images in ``b`` that are byte-identical to some image in ``a``."""
    seen = {hashlib.blake2b(img.tobytes(), digest_size=16).digest() for img in a.images}
    return sum(hashlib.blake2b(img.tobytes(), digest_size=16).digest() in seen for img in b.images)


# --------------------------------------------------------------------------
# manifest I/O

def _normalize(images: np.ndarray) -> np.ndarray:
    """Scale each channel into [0, 1]; data already in range is left untouched."""
    images = images.astype(np.float32, copy=False)
    if images.min() >= 0 and images.max() <= 1:
        return images
    lo = images.min(axis=(0, 2, 3), keepdims=True)
    hi = images.max(axis=(0, 2, 3), keepdims=True)
    return ((images - lo) / np.where(hi > lo, hi - lo, 1)).astype(np.float32)


def save_dataset(splits: dict[str, Dataset], directory: str | os.PathLike, name: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    name = name or first.name
    manifest = {"name": name, "num_classes": int(first.num_classes), "splits": {}}
    for split, ds in splits.items():
        img, lab = f"{split}_images.dtb", f"{split}_labels.dtb"
        save_dtb(directory / img, ds.images.astype(np.float32))
        save_dtb(directory / lab, ds.labels.astype(np.float32))
        manifest["splits"][split] = {"images": img, "labels": lab, "count": len(ds)}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    for key in ("name", "num_classes", "splits"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest field '{key}' missing")
    if not isinstance(manifest["num_classes"], int) or manifest["num_classes"] < 2:
        raise FormatError(f"{path}: field 'num_classes' must be an integer >= 2")
    return manifest


def load_dataset(manifest_path: str | os.PathLike, split: str = "train") -> Dataset:
    path = Path(manifest_path)
    manifest = _read_manifest(path)
    entry = manifest["splits"].get(split)
    if entry is None:
        raise FormatError(f"{path}: field 'splits.{split}' missing")
    for key in ("images", "labels", "count"):
        if key not in entry:
            raise FormatError(f"{path}: field 'splits.{split}.{key}' missing")
    images = load_dtb(path.parent / entry["images"])
    raw = load_dtb(path.parent / entry["labels"])
    if images.ndim != 4:
        raise FormatError(f"{path}: field 'splits.{split}.images' must be rank 4, got {list(images.shape)}")
    if images.shape[2] != images.shape[3]:
        raise FormatError(f"{path}: field 'splits.{split}.images' must be square, got {list(images.shape)}")
    if raw.ndim != 1 or raw.shape[0] != images.shape[0] or entry["count"] != images.shape[0]:
        raise FormatError(f"{path}: field 'splits.{split}.labels' count mismatch "
                          f"(images {images.shape[0]}, labels {raw.shape[0]}, count {entry['count']})")
    labels = raw.astype(np.int64)
    if not np.array_equal(labels, raw) or labels.min() < 0 or labels.max() >= manifest["num_classes"]:
        raise FormatError(f"{path}: field 'splits.{split}.labels' must hold integers in "
                          f"[0, {manifest['num_classes']})")
    return Dataset(_normalize(images), labels, manifest["num_classes"], split, manifest["name"])


def load_splits(manifest_path: str | os.PathLike) -> dict[str, Dataset]:
    manifest = _read_manifest(Path(manifest_path))
    return {s: load_dataset(manifest_path, s) for s in manifest["splits"]}


# --------------------------------------------------------------------------
# synthetic domains

@dataclass(frozen=True)
class SynthDomainSpec:
    kind: str
    num_classes: int = 10
    samples: dict = field(default_factory=lambda: {"train": 2000, "test": 500})
    image_size: int = 32
    noise: float = 0.1
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be >= 2")
        cap = capacity(self.kind)
        if self.num_classes > cap:
            raise InvalidArgumentError(f"{self.kind} supports at most {cap} classes, asked for {self.num_classes}")
        if self.image_size < 8:
            raise InvalidArgumentError("image_size must be >= 8")
        if self.noise < 0:
            raise InvalidArgumentError("noise must be >= 0")
        bad = set(self.samples) - set(SPLITS)
        if bad or any(int(n) < 1 for n in self.samples.values()):
            raise InvalidArgumentError(f"samples must map {SPLITS} to positive counts, got {self.samples}")


_BLOB_GRID = [(x, y) for y in (-0.5, 0.0, 0.5) for x in (-0.5, 0.0, 0.5)]
_BLOB_SCALES = (0.12, 0.3)
_STRIPE_ORIENT = 6
_STRIPE_FREQS = (1.5, 3.0, 5.0)
_POLY_VERTS = (3, 4, 5, 6, 8, 10)

# 3 wide x 5 tall, row-major
_FONT = [
    "111101101101111", "010110010010111", "111001111100111", "111001111001111", "101101111001001",
    "111100111001111", "111100111101111", "111001001001001", "111101111101111", "111101111001111",
    "010101111101101", "110101110101110", "111100100100111", "110101101101110", "111100110100111",
]


def capacity(kind: str) -> int:
    return {
        "blobs": len(_BLOB_GRID) * len(_BLOB_SCALES),
        "stripes": _STRIPE_ORIENT * len(_STRIPE_FREQS),
        "polygons": 2 * len(_POLY_VERTS),
        "digits-grid": len(_FONT),
    }[kind]


def _grid(size: int):
    t = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(t, t, indexing="xy")


def _blob(c, u, v, rng):
    cx, cy = _BLOB_GRID[c % len(_BLOB_GRID)]
    sigma = _BLOB_SCALES[c // len(_BLOB_GRID)] * rng.uniform(0.85, 1.15)
    cx, cy = cx + rng.uniform(-0.1, 0.1), cy + rng.uniform(-0.1, 0.1)
    return np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sigma ** 2))


def _stripes(c, u, v, rng):
    theta = np.pi * (c % _STRIPE_ORIENT) / _STRIPE_ORIENT + rng.uniform(-0.08, 0.08)
    freq = _STRIPE_FREQS[c // _STRIPE_ORIENT] * rng.uniform(0.92, 1.08)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)


def _polygon_mask(n, u, v, cx, cy, radius, rot):
    a = np.arctan2(v - cy, u - cx) - rot
    sector = np.mod(a, 2 * np.pi / n) - np.pi / n
    dist = np.hypot(u - cx, v - cy)
    return dist * np.cos(sector) <= radius * np.cos(np.pi / n)


def _polygon(c, u, v, rng):
    n = _POLY_VERTS[c % len(_POLY_VERTS)]
    radius = rng.uniform(0.5, 0.75)
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    rot = rng.uniform(0, 2 * np.pi)
    mask = _polygon_mask(n, u, v, cx, cy, radius, rot)
    if c >= len(_POLY_VERTS):
        mask &= ~_polygon_mask(n, u, v, cx, cy, 0.6 * radius, rot)
    return mask.astype(np.float64)


def _digit(c, u, v, rng):
    cells = np.array([ch == "1" for ch in _FONT[c]]).reshape(5, 3)
    w = rng.uniform(0.22, 0.28)
    x0, y0 = -1.5 * w + rng.uniform(-0.12, 0.12), -2.5 * w + rng.uniform(-0.08, 0.08)
    col = np.floor((u - x0) / w).astype(int)
    row = np.floor((v - y0) / w).astype(int)
    inside = (col >= 0) & (col < 3) & (row >= 0) & (row < 5)
    out = np.zeros(u.shape)
    out[inside] = cells[row[inside], col[inside]]
    return out


_PATTERNS = {"blobs": _blob, "stripes": _stripes, "polygons": _polygon, "digits-grid": _digit}


def _render(kind: str, label: int, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    u, v = _grid(size)
    pattern = _PATTERNS[kind](label, u, v, rng)
    # shared palette: bright saturated foreground on a dark background
    fg = rng.uniform(0.55, 1.0, size=3)
    fg[rng.integers(3)] *= rng.uniform(0.2, 0.6)
    bg = rng.uniform(0.0, 0.3, size=3)
    img = pattern[None] * fg[:, None, None] + (1 - pattern[None]) * bg[:, None, None]
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synth(spec: SynthDomainSpec, split: str = "train") -> Dataset:
    """Deterministic split of a synthetic domain; splits use disjoint seed streams."""
    if split not in spec.samples:
        raise InvalidArgumentError(f"split {split!r} not in spec.samples {sorted(spec.samples)}")
    n = int(spec.samples[split])
    rng = make_rng(spec.seed, 11, SPLITS.index(split))
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    for i, c in enumerate(labels):
        images[i] = _render(spec.kind, int(c), spec.image_size, spec.noise, rng)
    return Dataset(images, labels, spec.num_classes, split, spec.name or spec.kind)


def generate_domain(spec: SynthDomainSpec) -> dict[str, Dataset]:
    return {s: generate_synth(spec, s) for s in SPLITS if s in spec.samples}
