"""Dataset manifests, balanced few-shot sampling, augmentation, synthetic data.

On disk a dataset is a CSV with columns ``image_path,label,mask_path,split``
(paths relative to the CSV) plus a sibling ``<stem>.meta`` file of
``key = value`` lines carrying at least ``name`` and ``modality``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DataError

SPLITS = ("train_pool", "test")
CSV_FIELDS = ("image_path", "label", "mask_path", "split")


@dataclass(frozen=True)
class Entry:
    image_path: str
    label: int
    mask_path: str = ""
    split: str = "train_pool"


@dataclass
class DatasetManifest:
    name: str
    modality: str
    entries: List[Entry]
    root: str = "."

    def split(self, which: str) -> List[Entry]:
        return [e for e in self.entries if e.split == which]

    @property
    def train_pool(self) -> List[Entry]:
        return self.split("train_pool")

    @property
    def test(self) -> List[Entry]:
        return self.split("test")

    def segmentation_capable(self) -> bool:
        anomalous = [e for e in self.test if e.label == 1]
        return bool(anomalous) and all(e.mask_path for e in anomalous)

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)


@dataclass
class FewShotSpec:
    shots: int = 16
    seed: int = 0


@dataclass
class Sample:
    image: np.ndarray  # [h, w, 3] float32 in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None  # [h, w] float32 in {0, 1}
    path: str = ""


def _read_meta(path: Path) -> dict:
    meta = {}
    if path.exists():
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed meta line {line!r}")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _read_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.float32)


def load_manifest(path, check_masks: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV. Images are not loaded."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    meta = _read_meta(path.with_suffix(".meta"))
    root = path.parent
    entries: List[Entry] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{path}:{row_no}"
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise DataError(f"{where}: label {row['label']!r} is not an integer") from None
            if label not in (0, 1):
                raise DataError(f"{where}: label must be 0 or 1, got {label}")
            split = (row["split"] or "").strip()
            if split not in SPLITS:
                raise DataError(f"{where}: split must be one of {SPLITS}, got {split!r}")
            img = (row["image_path"] or "").strip()
            if not img or not (root / img).exists():
                raise DataError(f"{where}: image file not found: {img!r}")
            mask = (row["mask_path"] or "").strip()
            if mask:
                if not (root / mask).exists():
                    raise DataError(f"{where}: mask file not found: {mask!r}")
                if label == 0 and check_masks and _read_mask(str(root / mask)).any():
                    raise DataError(f"{where}: mask of a normal sample must be empty")
            entries.append(Entry(img, label, mask, split))
    return DatasetManifest(
        name=meta.get("name", path.stem),
        modality=meta.get("modality", "medical image"),
        entries=entries,
        root=str(root),
    )


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in manifest.entries:
            w.writerow([e.image_path, e.label, e.mask_path, e.split])
    path.with_suffix(".meta").write_text(f"name = {manifest.name}\nmodality = {manifest.modality}\n")
    return path


def load_sample(manifest: DatasetManifest, entry: Entry) -> Sample:
    with Image.open(manifest.resolve(entry.image_path)) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    mask = None
    if entry.mask_path:
        mask = _read_mask(manifest.resolve(entry.mask_path))
        if mask.shape != image.shape[:2]:
            raise DataError(f"mask {entry.mask_path} shape {mask.shape} != image shape {image.shape[:2]}")
    elif entry.label == 0 and manifest.segmentation_capable():
        # Normal images of a segmentation dataset have an empty mask by definition.
        mask = np.zeros(image.shape[:2], dtype=np.float32)
    return Sample(image, entry.label, mask, entry.image_path)


def few_shot_sample(manifest: DatasetManifest, spec: FewShotSpec) -> List[Entry]:
    """``spec.shots`` normal then ``spec.shots`` anomalous entries from the train pool."""
    pool = manifest.train_pool
    out: List[Entry] = []
    rng = np.random.default_rng(spec.seed)
    for label in (0, 1):
        cand = [e for e in pool if e.label == label]
        if len(cand) < spec.shots:
            raise DataError(
                f"{manifest.name}: need {spec.shots} samples with label {label} in train_pool, found {len(cand)}"
            )
        pick = np.sort(rng.choice(len(cand), size=spec.shots, replace=False))
        out.extend(cand[i] for i in pick)
    return out


def balanced_batches(items: Sequence, labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[List]:
    """Shuffle each class and yield batches holding equal counts of both labels.

    When the whole balanced set is smaller than ``batch_size`` it forms a single batch.
    """
    neg = [x for x, y in zip(items, labels) if y == 0]
    pos = [x for x, y in zip(items, labels) if y == 1]
    n = min(len(neg), len(pos))
    neg = [neg[i] for i in rng.permutation(len(neg))[:n]]
    pos = [pos[i] for i in rng.permutation(len(pos))[:n]]
    per_class = max(1, batch_size // 2)
    for start in range(0, n, per_class):
        yield neg[start : start + per_class] + pos[start : start + per_class]


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    scale: Tuple[float, float] = (0.9, 1.0)


def _resize(arr: np.ndarray, size: Tuple[int, int], resample) -> np.ndarray:
    h, w = size
    if arr.ndim == 2:
        im = Image.fromarray(np.ascontiguousarray(arr, dtype=np.float32))
        return np.asarray(im.resize((w, h), resample=resample), dtype=np.float32)
    chans = [_resize(arr[..., c], size, resample) for c in range(arr.shape[-1])]
    return np.stack(chans, axis=-1)


def augment(sample: Sample, seed, config: AugmentConfig = AugmentConfig()) -> Sample:
    """Random horizontal flip and random resized square crop; the mask follows the image."""
    if not config.enabled:
        return sample
    rng = np.random.default_rng(seed)
    img, mask = sample.image, sample.mask
    if rng.random() < config.flip_p:
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    lo, hi = config.scale
    h, w = img.shape[:2]
    s = rng.uniform(lo, hi) if hi > lo else lo
    ch, cw = max(1, int(round(h * np.sqrt(s)))), max(1, int(round(w * np.sqrt(s))))
    if (ch, cw) != (h, w):
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = _resize(np.ascontiguousarray(img[y0 : y0 + ch, x0 : x0 + cw]), (h, w), Image.BILINEAR)
        img = np.clip(img, 0.0, 1.0)
        if mask is not None:
            mask = _resize(np.ascontiguousarray(mask[y0 : y0 + ch, x0 : x0 + cw]), (h, w), Image.NEAREST)
    img = np.ascontiguousarray(img, dtype=np.float32)
    mask = None if mask is None else np.ascontiguousarray(mask, dtype=np.float32)
    return replace(sample, image=img, mask=mask)


def _smooth_background(rng: np.random.Generator, size: int, value_range: Tuple[float, float]) -> np.ndarray:
    coarse = rng.uniform(*value_range, size=(4, 4)).astype(np.float32)
    return _resize(coarse, (size, size), Image.BICUBIC).clip(0.0, 1.0)


def make_synthetic_dataset(
    out_dir,
    n_normal: int = 24,
    n_abnormal: int = 24,
    size: int = 64,
    seed: int = 0,
    blob_intensity: float = 0.45,
    test_fraction: float = 1.0 / 3.0,
    modality: str = "synthetic",
    name: str = "synthetic",
    blob_range: Tuple[int, int] = (8, 20),
    background_range: Tuple[float, float] = (0.15, 0.45),
) -> DatasetManifest:
    """Smooth random backgrounds; anomalies add a bright axis-aligned rectangle.

    The last ``round(n * test_fraction)`` samples of each class form the test split.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: List[Entry] = []
    for label, count in ((0, n_normal), (1, n_abnormal)):
        n_test = int(round(count * test_fraction))
        for i in range(count):
            bg = _smooth_background(rng, size, background_range)
            mask = np.zeros((size, size), dtype=np.uint8)
            img = bg
            if label == 1:
                bh, bw = (int(v) for v in rng.integers(blob_range[0], blob_range[1] + 1, size=2))
                y0 = int(rng.integers(0, size - bh + 1))
                x0 = int(rng.integers(0, size - bw + 1))
                mask[y0 : y0 + bh, x0 : x0 + bw] = 255
                img = bg + blob_intensity * (mask > 0)
            pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            stem = f"{'abnormal' if label else 'normal'}_{i:03d}"
            img_rel = f"images/{stem}.png"
            Image.fromarray(np.stack([pixels] * 3, axis=-1)).save(out / img_rel)
            mask_rel = f"masks/{stem}.png"
            Image.fromarray(mask).save(out / mask_rel)
            split = "test" if i >= count - n_test else "train_pool"
            entries.append(Entry(img_rel, label, mask_rel, split))
    manifest = DatasetManifest(name=name, modality=modality, entries=entries, root=str(out))
    write_manifest(manifest, out / "manifest.csv")
    return manifest
