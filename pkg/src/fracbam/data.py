"""Dataset scanning, corruption pruning, splitting, decoding and batching.

Expected layout (FracAtlas classification export)::

    root/Fractured/**/*.jpg
    root/Non_fractured/**/*.jpg
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CLASS_DIRS = {"Fractured": "Fractured", "Non_fractured": "NonFractured"}
# index order of the two logits; index 1 is the positive class
CLASS_NAMES = ("NonFractured", "Fractured")
POSITIVE_CLASS = "Fractured"
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.80, 0.115, 0.085)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DataError(ValueError):
    """Problem with the dataset itself rather than with how it was called."""


@dataclass(frozen=True)
class Entry:
    path: str
    label: str
    size: int


@dataclass
class DatasetManifest:
    root: str
    entries: list
    scanned_at: str = ""

    def to_dict(self, timestamp=True) -> dict:
        doc = {"root": self.root,
               "entries": [{"path": e.path, "label": e.label, "size": e.size}
                           for e in self.entries]}
        if timestamp:
            doc["scanned_at"] = self.scanned_at
        return doc

    def to_json(self, timestamp=True) -> str:
        return json.dumps(self.to_dict(timestamp), indent=2) + "\n"


@dataclass
class SplitManifest:
    root: str
    seed: int
    ratios: tuple
    entries: list  # dicts with path, label, split
    rejected: list = field(default_factory=list)
    channels: int = 3

    @property
    def counts(self) -> dict:
        out = dict.fromkeys(SPLITS, 0)
        for e in self.entries:
            out[e["split"]] += 1
        return out

    def split(self, name) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e["split"] == name]

    def to_json(self) -> str:
        doc = {
            "root": self.root,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "channels": self.channels,
            "counts": self.counts,
            "entries": self.entries,
            "rejected": self.rejected,
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(doc["root"], int(doc["seed"]), tuple(doc["ratios"]),
                       [{"path": e["path"], "label": e["label"], "split": e["split"]}
                        for e in doc["entries"]],
                       list(doc.get("rejected", [])), int(doc.get("channels", 3)))
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read split manifest {path}: {exc}") from exc


# -- scanning and pruning ---------------------------------------------------

def scan_dataset(root) -> DatasetManifest:
    root = Path(root)
    entries = []
    for dirname, label in CLASS_DIRS.items():
        class_dir = root / dirname
        if not class_dir.is_dir():
            raise DataError(f"missing class directory {dirname!r} under {root}")
        found = [p for p in class_dir.rglob("*")
                 if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
        if not found:
            raise DataError(f"class directory {dirname!r} contains no images")
        entries.extend(Entry(p.relative_to(root).as_posix(), label, p.stat().st_size)
                       for p in found)
    entries.sort(key=lambda e: e.path)
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return DatasetManifest(str(root), entries, stamp)


def check_image(path) -> str | None:
    """Return ``None`` if the file fully decodes, else a short reason."""
    path = Path(path)
    try:
        if path.stat().st_size == 0:
            return "empty file"
        with Image.open(path) as im:
            im.load()
    except UnidentifiedImageError:
        return "unrecognized format"
    except (OSError, SyntaxError, ValueError, Image.DecompressionBombError) as exc:
        if "truncated" in str(exc).lower():
            return "truncated stream"
        return f"undecodable: {exc}"
    return None


def prune_corrupted(manifest: DatasetManifest, workers: int | None = None):
    """Split entries into decodable ones and a rejection log, keeping order."""
    root = Path(manifest.root)
    with ThreadPoolExecutor(max_workers=workers or min(8, os.cpu_count() or 1)) as pool:
        reasons = list(pool.map(lambda e: check_image(root / e.path), manifest.entries))
    accepted = [e for e, r in zip(manifest.entries, reasons) if r is None]
    rejected = [{"path": e.path, "reason": r}
                for e, r in zip(manifest.entries, reasons) if r is not None]
    return DatasetManifest(manifest.root, accepted, manifest.scanned_at), rejected


# -- splitting --------------------------------------------------------------

def largest_remainder(total: int, weights) -> list:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors first, then one extra unit to each of the largest fractional
    remainders; ties go to the earlier position.
    """
    weights = [float(w) for w in weights]
    wsum = sum(weights)
    if total == 0 or wsum == 0:
        return [0] * len(weights)
    quotas = [total * w / wsum for w in weights]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0,
                  fixed_assignments: dict | None = None, rejected=(),
                  channels: int = 3) -> SplitManifest:
    """Assign every accepted entry to train/val/test.

    Entries named in ``fixed_assignments`` (path -> split) keep their split.
    The remaining entries are shuffled with ``seed`` and fill each split up
    to its largest-remainder share of the whole accepted set.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    fixed = dict(fixed_assignments or {})
    known = {e.path for e in manifest.entries}
    rejected_paths = {r["path"] for r in rejected}
    for path, split in fixed.items():
        if path not in known and path not in rejected_paths:
            raise ValueError(f"fixed assignment for unknown path {path!r}")
        if split not in SPLITS:
            raise ValueError(f"fixed assignment {path!r} -> unknown split {split!r}")

    total = len(manifest.entries)
    targets = largest_remainder(total, ratios)
    assigned = {}
    fixed_counts = dict.fromkeys(SPLITS, 0)
    free = []
    for e in manifest.entries:
        if e.path in fixed:
            assigned[e.path] = fixed[e.path]
            fixed_counts[fixed[e.path]] += 1
        else:
            free.append(e)
    deficits = [max(t - fixed_counts[s], 0) for t, s in zip(targets, SPLITS)]
    if sum(deficits) == len(free):
        fill = deficits
    else:
        fill = largest_remainder(len(free), deficits if sum(deficits) else ratios)

    order = np.random.default_rng(seed).permutation(len(free))
    bounds = np.cumsum([0] + fill)
    for k, split in enumerate(SPLITS):
        for idx in order[bounds[k]:bounds[k + 1]]:
            assigned[free[idx].path] = split

    entries = [{"path": e.path, "label": e.label, "split": assigned[e.path]}
               for e in manifest.entries]
    return SplitManifest(manifest.root, int(seed), ratios, entries, list(rejected), channels)


def load_fixed_splits(path) -> dict:
    """Read a ``{relative path: split}`` JSON mapping."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read fixed splits {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("fixed splits file must be a JSON object of path -> split")
    return {str(k): str(v) for k, v in doc.items()}


# -- decoding ---------------------------------------------------------------

def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W (x C) array with half-pixel centres and
    edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    extra = (None,) * (img.ndim - 2)
    fx = fx[(None, slice(None)) + extra]
    fy = fy[(slice(None), None) + extra]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def decode_image(path, channels: int = 3) -> np.ndarray:
    """Decode to an H x W x C float64 array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode.startswith("I;16") or im.mode == "I":
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = arr[..., None]
            elif channels == 3 and im.mode not in ("L", "LA", "1"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64)[..., None] / 255.0
    except (OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if arr.shape[2] == 3 and channels != 3:
        arr = arr.mean(axis=2, keepdims=True)
    if arr.shape[2] == 1 and channels != 1:
        arr = np.repeat(arr, channels, axis=2)
    return np.clip(arr, 0.0, 1.0)


def load_and_resize(path, target=(224, 224), channels: int = 3) -> np.ndarray:
    """Decode, replicate/convert channels, bilinear-resize; C x H x W float32."""
    arr = decode_image(path, channels)
    if arr.shape[:2] != tuple(target):
        arr = resize_bilinear(arr, target[0], target[1])
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


# -- batching ---------------------------------------------------------------

def make_batches(n_entries: int, batch_size: int, seed: int, epoch: int = 0,
                 drop_last: bool = False) -> list:
    """Index batches covering ``range(n_entries)`` once, shuffled by
    ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if n_entries < 1:
        raise DataError("cannot batch an empty split")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n_entries)
    batches = [order[i:i + batch_size] for i in range(0, n_entries, batch_size)]
    if drop_last and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


def label_index(label: str) -> int:
    return CLASS_NAMES.index(label)


class ArrayData:
    """In-memory images (N x C x H x W) with integer labels."""

    def __init__(self, images, labels):
        self._images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self._images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def images(self, idx) -> np.ndarray:
        return self._images[np.asarray(idx)]


class SplitData:
    """Lazily decoded images for one split of a :class:`SplitManifest`."""

    def __init__(self, manifest: SplitManifest, split: str, target=(224, 224), cache=True):
        self.root = Path(manifest.root)
        self.entries = manifest.split(split)
        self.target = tuple(target)
        self.channels = manifest.channels
        self.labels = np.array([label_index(e["label"]) for e in self.entries], dtype=np.int64)
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def _load(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = load_and_resize(self.root / self.entries[i]["path"], self.target, self.channels)
        if self._cache is not None:
            self._cache[i] = img
        return img

    def images(self, idx) -> np.ndarray:
        return np.stack([self._load(int(i)) for i in idx])
