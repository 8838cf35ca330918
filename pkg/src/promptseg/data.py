"""Dataset manifests, caption generation, train/validation splits and image preprocessing."""
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidInputError

IMAGE_SIZE = 224
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"}


class CaptionStyle(str, enum.Enum):
    NAME_ONLY = "name_only"
    SENTENCE = "sentence"


SENTENCE_TEMPLATE = "This is an image of {}"


def normalize_class_name(class_name: str) -> str:
    """Lower-case, map ``_``/``-`` to spaces and collapse whitespace."""
    name = class_name.replace("_", " ").replace("-", " ")
    return " ".join(name.lower().split())


def build_caption(class_name: str, style=CaptionStyle.NAME_ONLY) -> str:
    name = normalize_class_name(class_name or "")
    if not name:
        raise InvalidInputError("class_name must be non-empty")
    style = CaptionStyle(style)
    if style is CaptionStyle.SENTENCE:
        return SENTENCE_TEMPLATE.format(name)
    return name


@dataclass(frozen=True)
class CaptionedSample:
    image_path: str
    caption: str
    class_name: str


@dataclass
class DatasetManifest:
    """Ordered ``(image_path, class_name)`` entries plus the class inventory."""

    entries: list
    class_names: tuple = ()

    def __post_init__(self):
        self.entries = [(str(p), str(c)) for p, c in self.entries]
        if not self.class_names:
            self.class_names = tuple(dict.fromkeys(c for _, c in self.entries))
        self.class_names = tuple(self.class_names)
        known = set(self.class_names)
        paths = set()
        for p, c in self.entries:
            if c not in known:
                raise InvalidInputError(f"entry {p!r} has unknown class {c!r}")
            if p in paths:
                raise InvalidInputError(f"duplicate image path {p!r}")
            paths.add(p)

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_directory(cls, root) -> "DatasetManifest":
        """One sub-directory per class, images inside (sorted for determinism)."""
        root = Path(root)
        entries = []
        classes = []
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if files:
                classes.append(d.name)
                entries.extend((str(f), d.name) for f in files)
        return cls(entries, tuple(classes))

    def captioned(self, style=CaptionStyle.NAME_ONLY) -> list:
        return [CaptionedSample(p, build_caption(c, style), c) for p, c in self.entries]

    def to_jsonl(self, path, style=CaptionStyle.NAME_ONLY) -> None:
        with open(path, "w") as fh:
            for s in self.captioned(style):
                fh.write(json.dumps({"image_path": s.image_path, "class_name": s.class_name,
                                     "caption": s.caption}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "DatasetManifest":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    entries.append((rec["image_path"], rec["class_name"]))
        return cls(entries)


def read_captioned_jsonl(path) -> list:
    """Samples exactly as stored, keeping whatever caption the file carries."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(CaptionedSample(rec["image_path"], rec["caption"], rec["class_name"]))
    return out


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}",
                              field="data.train_fraction")


def _stratified_counts(manifest, n_train, rng):
    by_class = {c: [] for c in manifest.class_names}
    for i, (_, c) in enumerate(manifest.entries):
        by_class[c].append(i)
    n = len(manifest)
    quota = {c: len(ix) * n_train / n for c, ix in by_class.items()}
    take = {c: math.floor(q) for c, q in quota.items()}
    leftover = n_train - sum(take.values())
    # largest remainders get the spare slots; class order breaks ties
    ranked = sorted(by_class, key=lambda c: (-(quota[c] - take[c]), manifest.class_names.index(c)))
    for c in ranked[:leftover]:
        take[c] += 1
    train_idx = []
    for c in manifest.class_names:
        ix = np.array(by_class[c], dtype=np.int64)
        rng.shuffle(ix)
        train_idx.extend(ix[:take[c]].tolist())
    return train_idx


def split_dataset(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    """Seeded partition into (train, validation) with ``floor(fraction * N)`` train entries.

    Both halves keep the original entry order and the full class inventory.
    """
    n = len(manifest)
    if n == 0:
        raise InvalidInputError("cannot split an empty manifest")
    n_train = math.floor(spec.train_fraction * n)
    rng = np.random.default_rng(spec.seed)
    if spec.stratify:
        train_idx = set(_stratified_counts(manifest, n_train, rng))
    else:
        train_idx = set(rng.permutation(n)[:n_train].tolist())
    train = [e for i, e in enumerate(manifest.entries) if i in train_idx]
    val = [e for i, e in enumerate(manifest.entries) if i not in train_idx]
    return DatasetManifest(train, manifest.class_names), DatasetManifest(val, manifest.class_names)


@dataclass
class PreprocessedImage:
    pixels: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise InvalidInputError(f"preprocessed pixels must be 224x224x3, got {self.pixels.shape}")


def normalization_range(mean=NORM_MEAN, std=NORM_STD):
    """Per-channel (low, high) reachable after normalising inputs in [0, 255]."""
    mean, std = np.asarray(mean), np.asarray(std)
    return (0.0 - mean) / std, (1.0 - mean) / std


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(img[..., c], dtype=np.float32), mode="F")
                   .resize((size, size), Image.BILINEAR), dtype=np.float64)
        for c in range(3)
    ]
    return np.stack(chans, axis=-1)


def preprocess_image(raw_image, source_path: str = "", mean=NORM_MEAN, std=NORM_STD,
                     size: int = IMAGE_SIZE) -> PreprocessedImage:
    """Resize to ``size`` x ``size`` (bilinear, aspect ignored) and normalise.

    ``raw_image`` holds RGB values in [0, 255] (any numeric dtype). Inputs
    that are already the target size skip resampling entirely.
    """
    img = np.asarray(raw_image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"expected a non-empty HxWx3 RGB image, got shape {img.shape}")
    img = img.astype(np.float64)
    if img.shape[:2] != (size, size):
        img = _resize_bilinear(img, size)
    pixels = (img / 255.0 - np.asarray(mean)) / np.asarray(std)
    return PreprocessedImage(pixels, source_path)


def denormalize(pixels: np.ndarray, mean=NORM_MEAN, std=NORM_STD) -> np.ndarray:
    """Back to float RGB in [0, 255] (no rounding)."""
    return (np.asarray(pixels) * np.asarray(std) + np.asarray(mean)) * 255.0


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
