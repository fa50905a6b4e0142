"""Manifest loading, augmentation, and a procedural ultrasound-like dataset."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from .errors import DataError, IoError

LP2025_CLASSES = ("FHP1", "FHP2", "LLP", "RLP", "LPV-S", "HRP", "NSP")


@dataclass
class ManifestEntry:
    path: str
    label: int
    name: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    classes: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self):
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels(), minlength=self.num_classes)
        return dict(zip(self.classes, counts.tolist()))

    def split(self, seed: int = 0, fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> dict[str, list[int]]:
        """Stratified, seeded train/val/test index split."""
        if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
            raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
        rng = np.random.default_rng(seed)
        labels = self.labels()
        out = {"train": [], "val": [], "test": []}
        for c in range(self.num_classes):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            n_train = round(fractions[0] * len(idx))
            n_val = round(fractions[1] * len(idx))
            n_val = min(n_val, len(idx) - n_train)
            out["train"] += idx[:n_train].tolist()
            out["val"] += idx[n_train:n_train + n_val].tolist()
            out["test"] += idx[n_train + n_val:].tolist()
        return {k: sorted(v) for k, v in out.items()}

    def indices(self, which: str, seed: int = 0, fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> list[int]:
        if which == "all":
            return list(range(len(self.entries)))
        parts = self.split(seed, fractions)
        if which not in parts:
            raise DataError(f"unknown split {which!r}; use train, val, test or all")
        return parts[which]


def read_classes(path: Path) -> list[str]:
    if not path.is_file():
        raise IoError(f"class list not found: {path}")
    names = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate class names in {path}")
    return names


def load_manifest(path: str | Path, classes_path: Optional[str | Path] = None,
                  check_files: bool = True) -> DatasetManifest:
    """Read a ``path,label`` CSV whose labels are names listed in ``classes.txt``."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"manifest not found: {path}")
    root = path.parent
    classes = read_classes(Path(classes_path) if classes_path else root / "classes.txt")
    lookup = {name: i for i, name in enumerate(classes)}
    entries, seen = [], set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label"]:
            raise DataError(f"{path}: header must be 'path,label'")
        for row in reader:
            rel, name = row["path"].strip(), row["label"].strip()
            if name not in lookup:
                raise DataError(f"{path}: unknown label {name!r} for {rel}")
            if rel in seen:
                raise DataError(f"{path}: duplicate path {rel}")
            seen.add(rel)
            if check_files and not (root / rel).is_file():
                raise IoError(f"image listed in manifest does not exist: {root / rel}")
            entries.append(ManifestEntry(rel, lookup[name], name))
    if len(classes) < 2:
        raise DataError("need at least two classes for contrastive training")
    counts = np.bincount([e.label for e in entries], minlength=len(classes))
    empty = [classes[i] for i in np.flatnonzero(counts == 0)]
    if empty:
        raise DataError(f"classes without images: {', '.join(empty)}")
    return DatasetManifest(root, entries, classes)


def write_manifest(root: Path, entries: Sequence[tuple[str, str]], classes: Sequence[str]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(classes) + "\n")
    with (root / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(entries)


@dataclass
class AugmentPolicy:
    rotation: float = 0.0
    hflip: float = 0.0
    vflip: float = 0.0
    brightness: tuple[float, float] = (1.0, 1.0)
    size: int = 512

    def __post_init__(self):
        if self.rotation < 0:
            raise DataError("rotation range must be >= 0")
        for p in (self.hflip, self.vflip):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"flip probability {p} outside [0, 1]")
        lo, hi = self.brightness
        if lo <= 0 or hi < lo:
            raise DataError(f"bad brightness range {self.brightness}")


def resize(image: np.ndarray, size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.shape == (size, size):
        return image.copy()
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR), dtype=np.float32)


def augment(image: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """Resize, rotate (black fill), flip, scale brightness, clip to [0, 1]."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-policy.rotation, policy.rotation) if policy.rotation else 0.0
    hflip = rng.random() < policy.hflip
    vflip = rng.random() < policy.vflip
    factor = rng.uniform(*policy.brightness) if policy.brightness[0] != policy.brightness[1] else policy.brightness[0]
    out = resize(image, policy.size)
    if angle:
        out = np.asarray(Image.fromarray(out).rotate(angle, resample=Image.BILINEAR, fillcolor=0.0),
                         dtype=np.float32)
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    if factor != 1.0:
        out = out * factor
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


# --- synthetic ultrasound-like images -------------------------------------------------

def _segment_distance(x, y, p, q):
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    t = np.clip(((x - px) * dx + (y - py) * dy) / (dx * dx + dy * dy + 1e-12), 0.0, 1.0)
    return np.hypot(x - (px + t * dx), y - (py + t * dy))


def _tube(x, y, points, width):
    d = np.min([_segment_distance(x, y, p, q) for p, q in zip(points, points[1:])], axis=0)
    return (d <= width).astype(np.float32)


def _ellipse(x, y, cx, cy, a, b):
    return (((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 <= 1.0).astype(np.float32)


def _motif(family: int, x, y, rng):
    """Return (dark, bright) masks in the motif frame for one anatomy proxy."""
    zero = np.zeros_like(x)
    if family == 0:  # vessel bifurcation (Y)
        dark = np.maximum(_tube(x, y, [(-0.55, 0.0), (0.0, 0.0)], 0.07),
                          np.maximum(_tube(x, y, [(0.0, 0.0), (0.45, -0.3)], 0.06),
                                     _tube(x, y, [(0.0, 0.0), (0.45, 0.3)], 0.06)))
        return dark, zero
    if family == 1:  # two parallel vessels
        dark = np.maximum(_tube(x, y, [(-0.5, -0.12), (0.5, -0.12)], 0.06),
                          _tube(x, y, [(-0.5, 0.14), (0.5, 0.14)], 0.045))
        return dark, zero
    if family == 2:  # bright curved boundary (lobe edge)
        r = np.hypot(x, y + 0.6)
        bright = ((np.abs(r - 0.75) < 0.035) & (np.abs(x) < 0.55)).astype(np.float32)
        return zero, bright
    if family == 3:  # textured parenchyma patch
        region = _ellipse(x, y, 0.0, 0.0, 0.45, 0.3)
        stripes = (np.sin(28.0 * x + 9.0 * y) > 0.3).astype(np.float32)
        return zero, region * stripes
    if family == 4:  # hooked vessel with bright wall
        r = np.hypot(x + 0.1, y)
        dark = ((np.abs(r - 0.35) < 0.06) & (x > -0.2)).astype(np.float32)
        bright = ((np.abs(r - 0.35) < 0.1) & (np.abs(r - 0.35) >= 0.06) & (x > -0.2)).astype(np.float32)
        return dark, bright
    if family == 5:  # kidney: dark cortex ellipse, bright sinus
        outer = _ellipse(x, y, 0.0, 0.0, 0.45, 0.25)
        sinus = _ellipse(x, y, 0.05, 0.0, 0.2, 0.08)
        return outer * (1 - sinus), sinus
    # non-standard plane: random clutter lines
    bright = zero.copy()
    for _ in range(3):
        p = rng.uniform(-0.5, 0.5, 2)
        q = p + rng.uniform(-0.3, 0.3, 2)
        bright = np.maximum(bright, _tube(x, y, [tuple(p), tuple(q)], 0.025))
    return zero, bright


def render_sample(class_id: int, size: int, rng: np.random.Generator, contrast: float = 0.35,
                  speckle: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic B-mode-like image in [0, 1] and the boolean motif mask."""
    v, u = np.mgrid[0:size, 0:size].astype(np.float32)
    u = u / (size - 1) * 2 - 1
    v = v / (size - 1) * 2 - 1
    # fan-shaped field of view from an apex above the image
    ang = np.arctan2(u, v + 1.2)
    rad = np.hypot(u, v + 1.2)
    fan = ((np.abs(ang) < 0.62) & (rad > 0.35) & (rad < 2.25)).astype(np.float32)

    tissue = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8) * 6.0
    tissue = 0.45 + 0.08 * tissue - 0.12 * (v + 1) / 2

    family = class_id % 7
    theta = math.radians(rng.uniform(-20, 20) + 45.0 * (class_id // 7))
    scale = rng.uniform(0.85, 1.15)
    cx, cy = rng.uniform(-0.15, 0.15, 2)
    ct, st = math.cos(theta), math.sin(theta)
    x = (ct * (u - cx) + st * (v - cy)) / scale
    y = (-st * (u - cx) + ct * (v - cy)) / scale
    dark, bright = _motif(family, x, y, rng)
    dark = ndimage.gaussian_filter(dark, 0.8)
    bright = ndimage.gaussian_filter(bright, 0.8)
    gain = contrast * rng.uniform(0.7, 1.0)
    img = tissue * (1 - min(0.9, 2 * gain) * dark) + gain * bright

    # correlated Rayleigh speckle
    re = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.7)
    im = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.7)
    sp = np.hypot(re, im)
    sp = sp / sp.mean()
    img = img * (1 + speckle * (sp - 1) * 0.6)
    img = np.clip(img * fan, 0.0, 1.0).astype(np.float32)
    mask = ((dark > 0.05) | (bright > 0.05)) & (fan > 0)
    return img, mask


def class_names(num_classes: int) -> list[str]:
    if num_classes == len(LP2025_CLASSES):
        return list(LP2025_CLASSES)
    return [f"class_{k}" for k in range(num_classes)]


def gen_synth(out_dir: str | Path, num_classes: int = 7, per_class: int = 20, size: int = 128, seed: int = 0,
              contrast: float = 0.35, speckle: float = 1.0) -> DatasetManifest:
    """Write ``images/``, ``manifest.csv`` and ``classes.txt`` for a procedural dataset."""
    if num_classes < 2:
        raise DataError("synthetic dataset needs at least two classes")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = class_names(num_classes)
    rows = []
    for c, name in enumerate(names):
        for i in range(per_class):
            img, _ = render_sample(c, size, np.random.default_rng([seed, c, i]), contrast, speckle)
            rel = f"images/{name}_{i:04d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out_dir / rel)
            rows.append((rel, name))
    write_manifest(out_dir, rows, names)
    return load_manifest(out_dir / "manifest.csv")


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e


class ManifestDataset(Dataset):
    """Decoded images (cached in memory) with optional seeded augmentation."""

    def __init__(self, manifest: DatasetManifest, indices: Optional[Sequence[int]] = None, size: int = 512,
                 in_channels: int = 1, policy: Optional[AugmentPolicy] = None, seed: int = 0):
        self.manifest = manifest
        self.indices = list(range(len(manifest))) if indices is None else list(indices)
        if not self.indices:
            raise DataError("empty dataset split")
        self.size = size
        self.in_channels = in_channels
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.indices)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def labels(self) -> np.ndarray:
        return self.manifest.labels()[self.indices]

    def _image(self, k: int) -> np.ndarray:
        if k not in self._cache:
            img = read_image(self.manifest.root / self.manifest.entries[k].path)
            self._cache[k] = img if self.policy is not None else resize(img, self.size)
        return self._cache[k]

    def __getitem__(self, i):
        k = self.indices[i]
        img = self._image(k)
        if self.policy is not None:
            img = augment(img, self.policy, (self.seed, self.epoch, k))
        x = torch.tensor(img)[None]
        if self.in_channels == 3:
            x = x.expand(3, -1, -1).clone()
        return x, self.manifest.entries[k].label
