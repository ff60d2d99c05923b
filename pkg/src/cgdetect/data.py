"""Dataset manifests, decoding and center cropping, deterministic splits, the
accuracy metric, and a synthetic desk-scale dataset generator.

Manifest files are UTF-8 text, one `<relative-path>\\t<cg|pg>` record per
line, resolved against the manifest's directory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger("cgdetect.data")

LABELS = {"cg": 0, "pg": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}


class DataError(Exception):
    """Manifest, decode, or image-size problems."""


class UndersizedImageError(DataError):
    """Image smaller than the crop window; the sample is skipped with a warning."""


@dataclass
class Manifest:
    root: Path
    records: list  # of (relative path str, label str)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.records:
            raise DataError("manifest is empty")
        seen = set()
        for path, label in self.records:
            if label not in LABELS:
                raise DataError(f"unknown label {label!r} for {path}")
            if path in seen:
                raise DataError(f"duplicate path in manifest: {path}")
            seen.add(path)

    def __len__(self):
        return len(self.records)

    def paths(self):
        return [self.root / p for p, _ in self.records]

    def labels(self) -> np.ndarray:
        return np.array([LABELS[lab] for _, lab in self.records], dtype=np.int64)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        records = []
        for i, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{i}: expected '<path>\\t<cg|pg>'")
            records.append((parts[0], parts[1]))
        return cls(path.parent, records)

    def write(self, path) -> None:
        Path(path).write_text(
            "".join(f"{p}\t{lab}\n" for p, lab in self.records))


def center_crop(pixels: np.ndarray, crop: int) -> np.ndarray:
    """Crop the centered crop x crop window (floor rule for odd margins)."""
    h, w = pixels.shape[:2]
    if h < crop or w < crop:
        raise UndersizedImageError(f"image {w}x{h} smaller than crop {crop}")
    top = (h - crop) // 2
    left = (w - crop) // 2
    return pixels[top:top + crop, left:left + crop]


def load_and_crop(path, crop: int) -> np.ndarray:
    """Decode an 8-bit RGB image and center-crop.

    Returns (1, 3, crop, crop) float32 in 0-255 scale, channels R, G, B.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except UndersizedImageError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    cropped = center_crop(rgb, crop)
    return cropped.transpose(2, 0, 1)[None].astype(np.float32)


def split_manifest(manifest: Manifest, ratios, seed: int):
    """Deterministic stratified split into (train, val, test).

    Each class is shuffled by the seed and divided proportionally to the
    ratios with largest-remainder rounding, so the splits are disjoint,
    exhaustive, and preserve the class balance to within one item.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    per_label = {lab: [rec for rec in manifest.records if rec[1] == lab]
                 for lab in LABELS}
    for lab, recs in per_label.items():
        if not recs:
            raise DataError(f"manifest has no {lab!r} samples")
    parts = ([], [], [])
    total_ratio = sum(ratios)
    for lab in sorted(per_label):
        recs = per_label[lab]
        rng = np.random.default_rng([seed, LABELS[lab]])
        order = rng.permutation(len(recs))
        exact = [len(recs) * r / total_ratio for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        remainders = [e - c for e, c in zip(exact, counts)]
        for _ in range(len(recs) - sum(counts)):
            i = int(np.argmax(remainders))
            counts[i] += 1
            remainders[i] = -1.0
        start = 0
        for part, count in zip(parts, counts):
            part.extend(recs[j] for j in order[start:start + count])
            start += count
    return tuple(Manifest(manifest.root, list(p)) for p in parts)


@dataclass
class Metrics:
    """Counts and accuracy; pg is the positive class."""
    tp: int
    tn: int
    p: int
    n: int

    def __post_init__(self):
        if self.tp > self.p or self.tn > self.n:
            raise ValueError("correct counts cannot exceed class totals")

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / (self.p + self.n)


def accuracy(predictions, labels) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    pos = labels == LABELS["pg"]
    return Metrics(tp=int((predictions[pos] == LABELS["pg"]).sum()),
                   tn=int((predictions[~pos] == LABELS["cg"]).sum()),
                   p=int(pos.sum()), n=int((~pos).sum()))


# ---------------------------------------------------------------------------
# synthetic desk-scale data
#
# Both classes share the same smooth base construction (a random coarse grid,
# bilinearly upsampled) plus per-pixel Gaussian noise as a sensor-noise proxy.
# The cg-like class is box-filtered *after* the noise, which suppresses
# exactly the high-frequency residual the filter bank detects. The proxy
# isolates the noise-residual cue; it carries no semantic content.
# ---------------------------------------------------------------------------

_BASE_GRID = 6
_BOX = 3


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    pos = np.linspace(0.0, grid.shape[0] - 1.0, size)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, grid.shape[0] - 1)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def _box_filter(img: np.ndarray) -> np.ndarray:
    pad = _BOX // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for dy in range(_BOX):
        for dx in range(_BOX):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / (_BOX * _BOX)


def generate_synthetic(out_dir, count_per_class: int, size: int, seed: int,
                       noise_sigma: float = 3.0) -> Manifest:
    """Write PNG images and a manifest for the two proxy classes.

    Deterministic per seed: same seed, byte-identical files.
    """
    if size % 32:
        raise ValueError("size must be divisible by 32")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for label in ("pg", "cg"):
        for i in range(count_per_class):
            base = np.stack([_bilinear_upsample(rng.uniform(20.0, 235.0,
                                                            (_BASE_GRID, _BASE_GRID)),
                                                size)
                             for _ in range(3)], axis=-1)
            img = base + rng.normal(0.0, noise_sigma, base.shape)
            if label == "cg":
                img = _box_filter(img)
            img = np.clip(img, 0.0, 255.0).round().astype(np.uint8)
            name = f"{label}_{i:05d}.png"
            Image.fromarray(img, mode="RGB").save(out_dir / name)
            records.append((name, label))
    manifest = Manifest(out_dir, records)
    manifest.write(out_dir / "manifest.txt")
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def load_samples(manifest: Manifest, indices, crop: int, cache: dict | None = None):
    """Decode and crop the given record indices; returns (pixels, labels, kept).

    Undersized images are skipped with a warning; other decode errors carry
    the sample path. `kept` lists the indices actually delivered.
    """
    pixels, labels, kept = [], [], []
    for i in indices:
        rel, lab = manifest.records[i]
        if cache is not None and rel in cache:
            arr = cache[rel]
        else:
            try:
                arr = load_and_crop(manifest.root / rel, crop)
            except UndersizedImageError as exc:
                log.warning("skipping %s: %s", rel, exc)
                continue
            if cache is not None:
                cache[rel] = arr
        pixels.append(arr)
        labels.append(LABELS[lab])
        kept.append(i)
    if not pixels:
        return None, None, []
    return (np.concatenate(pixels, axis=0),
            np.asarray(labels, dtype=np.int64), kept)


def batch_iterator(manifest: Manifest, batch_size: int, seed: int, epoch: int,
                   crop: int, cache: dict | None = None):
    """Yield (pixels, labels) batches in a per-epoch deterministic shuffle.

    The order is fixed by (seed, epoch); the last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(manifest))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        pixels, labels, kept = load_samples(manifest, idx, crop, cache)
        if pixels is None:
            continue
        yield pixels, labels
