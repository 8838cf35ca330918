"""Composite-image evaluation: four classes per image, one prompt, a classifier as judge."""
import colorsys
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .data import PreprocessedImage, denormalize, load_image, normalize_class_name
from .errors import InvalidInputError, NoCandidatesError
from .kernels import nearest_colour_counts
from .masks import Mask, rle_encode, save_masks_json
from .selector import Pipeline, RenderMode, SelectionResult, default_fill, render_segment

CELL = 224
CANVAS = 2 * CELL
WHITE = (255, 255, 255)
DEFAULT_N_SAMPLES = 400

DEFAULT_CLASSES = (
    "bulbasaur", "charmander", "squirtle", "pikachu", "jigglypuff", "meowth",
    "psyduck", "eevee", "snorlax", "mewtwo", "gengar", "onix",
)


@dataclass
class CompositeSample:
    image: np.ndarray
    cells: list  # (class_name, (x, y, w, h), Mask)
    seed: int

    @property
    def class_names(self):
        return [c for c, _, _ in self.cells]

    def mask_for(self, class_name: str) -> Mask:
        key = normalize_class_name(class_name)
        for c, _, m in self.cells:
            if normalize_class_name(c) == key:
                return m
        raise InvalidInputError(f"{class_name!r} is not in this composite")

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.image).tobytes())
        for c, box, m in self.cells:
            h.update(json.dumps([c, list(box), m.to_dict()]).encode())
        return h.hexdigest()


def _to_cell(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise InvalidInputError(f"exemplar must be a non-empty HxWx3 image, got {img.shape}")
    if img.shape[:2] == (CELL, CELL):
        return img.astype(np.uint8)
    return np.asarray(Image.fromarray(img.astype(np.uint8)).resize((CELL, CELL), Image.BILINEAR))


def compose(exemplars: Sequence, layout: str = "grid_2x2", seed: int = 0, background_tol: int = 0) -> CompositeSample:
    """Paste four ``(class_name, image)`` exemplars into a 2x2 grid on white.

    ``seed`` permutes which exemplar lands in which cell. A pixel belongs to
    an exemplar's ground truth when some channel differs from white by more
    than ``background_tol``.
    """
    if layout != "grid_2x2":
        raise InvalidInputError(f"unsupported layout {layout!r}")
    exemplars = list(exemplars)
    names = [normalize_class_name(c) for c, _ in exemplars]
    if len(exemplars) != 4 or len(set(names)) != 4:
        raise InvalidInputError("compose needs exactly 4 exemplars of distinct classes")
    order = np.random.default_rng(seed).permutation(4)
    canvas = np.full((CANVAS, CANVAS, 3), 255, dtype=np.uint8)
    cells = []
    for slot, k in enumerate(order):
        cls, img = exemplars[k]
        tile = _to_cell(img)
        x, y = (slot % 2) * CELL, (slot // 2) * CELL
        canvas[y:y + CELL, x:x + CELL] = tile
        fg = np.zeros((CANVAS, CANVAS), dtype=bool)
        fg[y:y + CELL, x:x + CELL] = (np.abs(tile.astype(np.int16) - 255) > background_tol).any(axis=2)
        cells.append((cls, (x, y, CELL, CELL), rle_encode(fg, quality=1.0, id=slot)))
    return CompositeSample(canvas, cells, seed)


# --------------------------------------------------------------------------
# exemplar pools
# --------------------------------------------------------------------------

def make_palette(class_names: Sequence[str]) -> dict:
    """Well-separated saturated colours, none close to white or the mid-grey fill."""
    n = len(class_names)
    out = {}
    for i, c in enumerate(class_names):
        r, g, b = colorsys.hsv_to_rgb(i / n, 1.0, 0.85 if i % 2 else 0.6)
        out[normalize_class_name(c)] = (int(r * 255), int(g * 255), int(b * 255))
    return out


def synthetic_exemplar(color, rng: np.random.Generator) -> np.ndarray:
    """A single filled rectangle or ellipse of ``color`` on a white 224x224 tile."""
    img = np.full((CELL, CELL, 3), 255, dtype=np.uint8)
    w, h = rng.integers(60, 180, size=2)
    x, y = rng.integers(0, CELL - w), rng.integers(0, CELL - h)
    if rng.random() < 0.5:
        img[y:y + h, x:x + w] = color
    else:
        yy, xx = np.mgrid[0:CELL, 0:CELL]
        cy, cx = y + h / 2, x + w / 2
        inside = ((yy + 0.5 - cy) / (h / 2)) ** 2 + ((xx + 0.5 - cx) / (w / 2)) ** 2 <= 1.0
        img[inside] = color
    return img


@dataclass
class ExemplarPool:
    """class name -> exemplar images (arrays, or paths loaded on demand)."""

    items: dict
    palette: Optional[dict] = None

    @property
    def class_names(self):
        return list(self.items)

    def image(self, class_name, index) -> np.ndarray:
        item = self.items[class_name][index]
        return load_image(item) if isinstance(item, (str, Path)) else item

    @classmethod
    def synthetic(cls, class_names: Sequence[str] = DEFAULT_CLASSES[:8], per_class: int = 5,
                  seed: int = 0) -> "ExemplarPool":
        palette = make_palette(class_names)
        rng = np.random.default_rng(seed)
        items = {normalize_class_name(c): [synthetic_exemplar(palette[normalize_class_name(c)], rng)
                                           for _ in range(per_class)]
                 for c in class_names}
        return cls(items, palette)

    @classmethod
    def from_manifest(cls, manifest) -> "ExemplarPool":
        items = defaultdict(list)
        for path, c in manifest.entries:
            items[c].append(path)
        return cls(dict(items))


def composite_stream(pool: ExemplarPool, n_samples: int, seed: int = 0, background_tol: int = 0):
    """Seeded ``(composite, prompt_class)`` pairs; identical for equal arguments."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    names = pool.class_names
    if len(names) < 4:
        raise InvalidInputError("the exemplar pool needs at least 4 classes")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_samples):
        chosen = [names[i] for i in rng.choice(len(names), size=4, replace=False)]
        ex = [(c, pool.image(c, int(rng.integers(len(pool.items[c]))))) for c in chosen]
        sample = compose(ex, seed=int(rng.integers(2 ** 31)), background_tol=background_tol)
        prompt = chosen[int(rng.integers(4))]
        out.append((sample, prompt))
    return out


# --------------------------------------------------------------------------
# judging
# --------------------------------------------------------------------------

class ClassifierOracle(Protocol):
    reported_accuracy: float

    def predict(self, image: PreprocessedImage) -> str: ...


class ColorKeyOracle:
    """Names the palette class whose colour dominates the image.

    White and the selector's fill colour never count. Returns ``""`` when no
    palette colour is present.
    """

    reported_accuracy = 1.0

    def __init__(self, palette: Mapping, fill=None):
        self.labels = list(palette)
        fill = default_fill() if fill is None else fill
        self._colours = np.asarray(list(palette.values()) + [WHITE, tuple(fill)], dtype=np.float64)

    def predict(self, image) -> str:
        pixels = image.pixels if isinstance(image, PreprocessedImage) else np.asarray(image)
        counts = nearest_colour_counts(denormalize(pixels), self._colours)[:len(self.labels)]
        if counts.max() == 0:
            return ""
        return self.labels[int(counts.argmax())]


def judge(result: SelectionResult, composite: CompositeSample, oracle: ClassifierOracle,
          masks: Optional[Sequence[Mask]] = None) -> bool:
    """True iff the oracle labels the chosen segment's rendering as the prompted class.

    The rendering reuses the selection's render mode, so the oracle sees what
    the selector scored.
    """
    prompt = normalize_class_name(result.prompt)
    if prompt not in {normalize_class_name(c) for c in composite.class_names}:
        raise InvalidInputError(f"prompt {result.prompt!r} is not one of the composite's classes")
    chosen = result.chosen_mask
    if chosen is None:
        chosen = next(m for m in masks if m.id == result.chosen_mask_id)
    crop = render_segment(composite.image, chosen, result.render_mode)
    return normalize_class_name(oracle.predict(crop.pixels)) == prompt


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    name: str
    total: int
    correct: int
    accuracy: float
    per_class_accuracy: dict
    config_snapshot: dict
    outcomes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "total": self.total, "correct": self.correct,
                "accuracy": self.accuracy, "per_class_accuracy": dict(sorted(self.per_class_accuracy.items())),
                "config_snapshot": self.config_snapshot, "outcomes": self.outcomes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate(pipelines: Mapping[str, Pipeline], oracle: ClassifierOracle, pool: ExemplarPool,
             n_samples: int = DEFAULT_N_SAMPLES, seed: int = 0, background_tol: int = 0,
             extra_snapshot: Optional[dict] = None) -> dict:
    """Run every pipeline on the same composite stream; one :class:`EvalReport` each."""
    stream = composite_stream(pool, n_samples, seed, background_tol)
    reports = {}
    for name, pipe in pipelines.items():
        hits = defaultdict(int)
        seen = defaultdict(int)
        outcomes = []
        for k, (sample, prompt) in enumerate(stream):
            try:
                result, _ = pipe.run(sample.image, prompt)
                ok = judge(result, sample, oracle)
                chosen = int(result.chosen_mask_id)
            except NoCandidatesError:
                ok, chosen = False, None
            seen[prompt] += 1
            hits[prompt] += int(ok)
            outcomes.append({"index": k, "prompt": prompt, "chosen_mask_id": chosen, "correct": bool(ok)})
        correct = sum(hits.values())
        snapshot = {"pipeline": pipe.describe(), "n_samples": n_samples, "seed": seed,
                    "oracle": type(oracle).__name__,
                    "oracle_reported_accuracy": float(oracle.reported_accuracy)}
        snapshot.update(extra_snapshot or {})
        reports[name] = EvalReport(name, n_samples, correct, correct / n_samples,
                                   {c: hits[c] / seen[c] for c in seen}, snapshot, outcomes)
    return reports


def accuracy_table(reports: Mapping[str, EvalReport], reference_rows: Optional[Mapping[str, float]] = None) -> str:
    """Two-column ``Model | Accuracy`` text table."""
    rows = [(name, f"{acc * 100:.2f}%") for name, acc in (reference_rows or {}).items()]
    rows += [(name, f"{r.accuracy * 100:.2f}%") for name, r in reports.items()]
    width = max([len("Model")] + [len(n) for n, _ in rows])
    lines = [f"{'Model'.ljust(width)} | Accuracy", f"{'-' * width}-+---------"]
    lines += [f"{n.ljust(width)} | {a}" for n, a in rows]
    return "\n".join(lines) + "\n"


def dump_composite(sample: CompositeSample, prompt: str, directory, index: int) -> None:
    """PNG of the composite plus its ground-truth masks as JSON, for audit."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image).save(d / f"composite_{index:04d}.png")
    save_masks_json([m for _, _, m in sample.cells], d / f"composite_{index:04d}_masks.json")
    (d / f"composite_{index:04d}.json").write_text(json.dumps(
        {"prompt": prompt, "seed": sample.seed,
         "cells": [{"class_name": c, "cell_bbox": list(b), "mask_id": m.id} for c, b, m in sample.cells]},
        indent=1))
