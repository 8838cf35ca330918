"""Score filtered segments against a text prompt and keep the best one."""
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import NORM_MEAN, NORM_STD, PreprocessedImage, preprocess_image
from .encoders import EmbeddingModel
from .errors import InvalidInputError, NoCandidatesError, ShapeError
from .filters import FilterConfig, filter_pipeline
from .masks import Mask

CROP_MARGIN = 4


class RenderMode(str, enum.Enum):
    MASKED_CROP = "masked_crop"
    BBOX_CROP = "bbox_crop"


def default_fill(mean=NORM_MEAN) -> tuple:
    """The normalisation mean as an 8-bit colour; it normalises to ~0."""
    return tuple(int(round(255 * m)) for m in mean)


@dataclass
class SegmentCrop:
    pixels: PreprocessedImage
    source_mask_id: int
    render_mode: RenderMode


@dataclass
class SelectionResult:
    chosen_mask_id: int
    scores: dict
    prompt: str
    chosen_mask: Optional[Mask] = None
    render_mode: RenderMode = RenderMode.MASKED_CROP

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "chosen_mask_id": int(self.chosen_mask_id),
                "render_mode": RenderMode(self.render_mode).value,
                "scores": {str(k): float(v) for k, v in sorted(self.scores.items())}}


def render_segment(image: np.ndarray, mask: Mask, mode=RenderMode.MASKED_CROP, fill=None,
                   margin: int = CROP_MARGIN, mean=NORM_MEAN, std=NORM_STD) -> SegmentCrop:
    """Crop the mask's bbox (plus ``margin``) and preprocess it.

    In MASKED_CROP mode every pixel outside the mask is painted ``fill``
    first; BBOX_CROP keeps the raw pixels.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape}")
    if mask.area == 0:
        raise InvalidInputError(f"mask {mask.id} is empty")
    mode = RenderMode(mode)
    h, w = mask.shape
    x, y, bw, bh = mask.bbox
    x0, y0 = max(0, x - margin), max(0, y - margin)
    x1, y1 = min(w, x + bw + margin), min(h, y + bh + margin)
    crop = image[y0:y1, x0:x1]
    if mode is RenderMode.MASKED_CROP:
        fill = default_fill(mean) if fill is None else fill
        crop = crop.astype(np.float64)
        crop[~mask.decode()[y0:y1, x0:x1]] = np.asarray(fill, dtype=np.float64)
    return SegmentCrop(preprocess_image(crop, mean=mean, std=std), mask.id, mode)


def _pick(scores: dict, by_id: dict) -> int:
    return max(scores, key=lambda i: (scores[i], by_id[i].area, -i))


def select_segment(image: np.ndarray, masks: Sequence[Mask], prompt: str, model: EmbeddingModel,
                   render_mode=RenderMode.MASKED_CROP, chunk: int = 64, **render_kwargs) -> SelectionResult:
    """Cosine-score every mask's rendering against the prompt and return the argmax.

    Ties go to the larger mask, then the lower id, so the result does not
    depend on the order of ``masks``.

    Raises:
        NoCandidatesError: when ``masks`` is empty.
        InvalidInputError: when ``prompt`` is blank.
    """
    masks = list(masks)
    if not masks:
        raise NoCandidatesError("no candidate masks to choose from")
    if not prompt or not prompt.strip():
        raise InvalidInputError("prompt must be non-empty")
    by_id = {m.id: m for m in masks}
    if len(by_id) != len(masks):
        raise InvalidInputError("mask ids must be unique")
    crops = [render_segment(image, m, render_mode, **render_kwargs) for m in masks]
    # identical renderings share one embedding so their scores tie exactly
    keys = [hashlib.blake2b(c.pixels.pixels.tobytes(), digest_size=16).digest() for c in crops]
    unique = list(dict.fromkeys(keys))
    first = {k: keys.index(k) for k in unique}
    img = model.embed_images([crops[first[k]].pixels for k in unique], chunk=chunk).vectors
    txt = model.embed_texts([prompt]).vectors[0]
    cos = dict(zip(unique, img @ txt))
    scores = {m.id: float(cos[k]) for m, k in zip(masks, keys)}
    chosen = _pick(scores, by_id)
    return SelectionResult(chosen, scores, prompt, by_id[chosen], RenderMode(render_mode))


class RandomChooser:
    """Baseline selector: a uniform pick among the candidates.

    The draw is seeded from ``seed``, the prompt, the image bytes and the
    candidate ids, so repeated calls on the same input agree.
    """

    __name__ = "random_chooser"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def __call__(self, image, masks, prompt, model=None, render_mode=RenderMode.MASKED_CROP, **_):
        masks = sorted(masks, key=lambda m: m.id)
        if not masks:
            raise NoCandidatesError("no candidate masks to choose from")
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        h.update(prompt.encode())
        h.update(np.ascontiguousarray(image).tobytes())
        h.update(str([m.id for m in masks]).encode())
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        pick = masks[int(rng.integers(len(masks)))]
        scores = {m.id: float(m.id == pick.id) for m in masks}
        return SelectionResult(pick.id, scores, prompt, pick, RenderMode(render_mode))


@dataclass
class Pipeline:
    """Proposals -> filters -> prompt selection."""

    proposer: object
    model: Optional[EmbeddingModel]
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    render_mode: RenderMode = RenderMode.MASKED_CROP
    selector: object = select_segment
    name: str = "pipeline"

    def segments(self, image) -> list:
        return filter_pipeline(self.proposer.propose(image), self.filter_config)

    def run(self, image, prompt: str):
        masks = self.segments(image)
        return self.selector(image, masks, prompt, self.model, render_mode=self.render_mode), masks

    def describe(self) -> dict:
        return {
            "name": self.name,
            "proposer": self.proposer.descriptor,
            "model": None if self.model is None else self.model.describe(),
            "filter": self.filter_config.to_dict(),
            "render_mode": RenderMode(self.render_mode).value,
            "selector": getattr(self.selector, "__name__", type(self.selector).__name__),
            "normalization": {"mean": list(NORM_MEAN), "std": list(NORM_STD)},
        }
