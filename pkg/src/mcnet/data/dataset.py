"""Dataset manifests, sample loading, splitting and batching.

Directory layout::

    root/images/<stem>.pgm            single modality
    root/images/<stem>.<modality>.pgm multimodal, modality order from manifest.json
    root/masks/<stem>.pgm             pixel value = class label
    root/manifest.json                optional: {"n_classes", "label_values",
                                      "modalities", "preprocess"}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from mcnet.data.pgm import load_pgm, save_pgm
from mcnet.data.preprocess import preprocess
from mcnet.errors import DatasetError

BRATS_MODALITIES = ("flair", "t1", "t1ce", "t2")


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) integer labels
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise DatasetError(f"{self.id}: image must be (C, H, W) and mask (H, W)")
        if self.image.shape[1:] != self.mask.shape:
            raise DatasetError(
                f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ"
            )


class Entry(NamedTuple):
    stem: str
    image_files: tuple
    mask_file: Path


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    n_classes: int = 2
    label_values: tuple = (0, 1)
    modalities: tuple = ()
    preprocess: str = "resize"

    def __len__(self):
        return len(self.entries)

    @property
    def in_channels(self) -> int:
        return max(1, len(self.modalities))


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    meta = {}
    if (root / "manifest.json").exists():
        meta = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    modalities = tuple(meta.get("modalities") or ())

    groups: dict[str, dict] = {}
    for f in sorted(img_dir.glob("*.pgm")):
        stem = f.stem
        modality = None
        if modalities:
            stem, _, modality = stem.rpartition(".")
            if modality not in modalities or not stem:
                raise DatasetError(f"{f}: modality suffix not one of {list(modalities)}")
        groups.setdefault(stem, {})[modality] = f

    entries = []
    for stem, files in sorted(groups.items()):
        mask = mask_dir / f"{stem}.pgm"
        if not mask.exists():
            first = next(iter(files.values()))
            raise DatasetError(f"no mask {mask} for image {first}")
        if modalities:
            missing = [m for m in modalities if m not in files]
            if missing:
                raise DatasetError(f"{stem}: missing modalities {missing}")
            image_files = tuple(files[m] for m in modalities)
        else:
            image_files = (files[None],)
        entries.append(Entry(stem, image_files, mask))
    if not entries:
        raise DatasetError(f"{root}: no images found")

    n_classes = meta.get("n_classes")
    label_values = meta.get("label_values")
    if n_classes is None:
        top = max(int(load_pgm(e.mask_file)[0].max()) for e in entries)
        n_classes = max(2, top + 1)
    if label_values is None:
        label_values = list(range(n_classes))
    return DatasetManifest(root, entries, int(n_classes), tuple(label_values), modalities,
                           meta.get("preprocess", "resize"))


def load_sample(entry: Entry, manifest: DatasetManifest, side=None, mode=None) -> Sample:
    channels = []
    for f in entry.image_files:
        pixels, maxval = load_pgm(f)
        channels.append(pixels.astype(np.float64) / maxval)
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise DatasetError(f"{entry.stem}: modality images differ in size {sorted(shapes)}")
    image = np.stack(channels)
    mask = load_pgm(entry.mask_file)[0].astype(np.int64)
    bad = np.setdiff1d(np.unique(mask), manifest.label_values)
    if bad.size:
        raise DatasetError(f"{entry.mask_file}: labels {bad.tolist()} not in {list(manifest.label_values)}")
    if side is not None:
        image, mask = preprocess(image, mask, side, mode or manifest.preprocess)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask, entry.stem)


def load_samples(manifest: DatasetManifest, side=None, mode=None) -> list[Sample]:
    return [load_sample(e, manifest, side, mode) for e in manifest.entries]


def write_dataset(samples: Sequence[Sample], root, n_classes: int, modalities=()) -> Path:
    """Store samples in the directory layout read by :func:`load_manifest`.

    Images are quantised to 16 bits.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    modalities = tuple(modalities)
    for s in samples:
        if modalities and len(modalities) != s.image.shape[0]:
            raise DatasetError(f"{s.id}: {s.image.shape[0]} channels for {len(modalities)} modalities")
        if not modalities and s.image.shape[0] != 1:
            raise DatasetError(f"{s.id}: multichannel sample needs modality names")
        quant = np.round(np.clip(s.image, 0, 1) * 65535).astype(np.uint16)
        if modalities:
            for m, ch in zip(modalities, quant):
                save_pgm(ch, root / "images" / f"{s.id}.{m}.pgm", maxval=65535)
        else:
            save_pgm(quant[0], root / "images" / f"{s.id}.pgm", maxval=65535)
        save_pgm(s.mask.astype(np.uint8), root / "masks" / f"{s.id}.pgm", maxval=255)
    meta = {"n_classes": n_classes, "label_values": list(range(n_classes)),
            "modalities": list(modalities), "preprocess": "resize"}
    (root / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return root


def split_dataset(items, ratio=(3, 2), seed=0):
    """Shuffle deterministically, then cut into (train, test).

    The train side takes ``ceil(n * a / (a + b))`` items, so any rounding
    remainder lands in training.  Accepts a manifest or any sequence.
    """
    a, b = (int(r) for r in ratio)
    if a <= 0 or b <= 0:
        raise DatasetError(f"ratio must be two positive integers, got {ratio}")
    seq = list(items.entries) if isinstance(items, DatasetManifest) else list(items)
    if not seq:
        raise DatasetError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(seq))
    n_train = math.ceil(len(seq) * a / (a + b))
    train = [seq[i] for i in order[:n_train]]
    test = [seq[i] for i in order[n_train:]]
    if isinstance(items, DatasetManifest):
        return replace(items, entries=train), replace(items, entries=test)
    return train, test


class Batch(NamedTuple):
    images: np.ndarray  # (B, C, H, W) float32
    masks: np.ndarray  # (B, H, W) int
    ids: list


def stack(samples: Sequence[Sample]) -> Batch:
    return Batch(np.stack([s.image for s in samples]),
                 np.stack([s.mask for s in samples]),
                 [s.id for s in samples])


def batch_iterator(samples: Sequence[Sample], batch_size: int, seed=0, epoch=0,
                   shuffle=True) -> Iterator[Batch]:
    """Yield batches; the order depends only on ``(seed, epoch)``.  The last
    batch may be short."""
    if batch_size < 1:
        raise DatasetError(f"batch size must be positive, got {batch_size}")
    n = len(samples)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield stack([samples[i] for i in order[start:start + batch_size]])
