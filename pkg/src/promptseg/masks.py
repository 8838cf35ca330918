"""Binary segment proposals: RLE-backed ``Mask``, IoU, and proposal backends.

RLE follows the COCO convention: the raster is flattened column-major and
``counts`` alternates zero-runs and one-runs, starting with a (possibly
empty) zero-run.
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, ShapeError
from .kernels import pairwise_intersections, rle_decode_flat, rle_encode_flat

EMPTY_BBOX = (0, 0, 0, 0)
MIN_PROPOSAL_AREA = 16


@dataclass(frozen=True, eq=False)
class Mask:
    counts: tuple
    height: int
    width: int
    area: int
    bbox: tuple
    quality: float = 1.0
    id: int = 0

    def flat(self) -> np.ndarray:
        """Column-major flattened uint8 raster."""
        return rle_decode_flat(np.asarray(self.counts, dtype=np.int64), self.height * self.width)

    def decode(self) -> np.ndarray:
        return self.flat().reshape((self.height, self.width), order="F").astype(bool)

    @property
    def shape(self):
        return (self.height, self.width)

    def with_id(self, new_id: int) -> "Mask":
        return replace(self, id=int(new_id))

    def same_pixels(self, other: "Mask") -> bool:
        return self.shape == other.shape and tuple(self.counts) == tuple(other.counts)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "height": int(self.height),
            "width": int(self.width),
            "area": int(self.area),
            "bbox": [int(v) for v in self.bbox],
            "quality": float(self.quality),
            "rle": [int(c) for c in self.counts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mask":
        mask = cls(
            counts=tuple(int(c) for c in d["rle"]),
            height=int(d["height"]),
            width=int(d["width"]),
            area=int(d["area"]),
            bbox=tuple(int(v) for v in d["bbox"]),
            quality=float(d.get("quality", 1.0)),
            id=int(d.get("id", 0)),
        )
        validate_mask(mask)
        return mask

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.decode().astype(np.uint8) * 255, mode="L").save(path)


def bbox_of(raster: np.ndarray) -> tuple:
    """Tight ``(x, y, w, h)`` box of the set pixels; ``(0, 0, 0, 0)`` when empty."""
    rows = np.flatnonzero(raster.any(axis=1))
    if rows.size == 0:
        return EMPTY_BBOX
    cols = np.flatnonzero(raster.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def rle_encode(raster, quality: float = 1.0, id: int = 0) -> Mask:
    """Encode a 2-D binary raster into a :class:`Mask`.

    Raises:
        InvalidInputError: if the raster is not 2-D or has no pixels.
    """
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise InvalidInputError(f"raster must be a non-empty 2-D array, got shape {raster.shape}")
    raster = raster.astype(bool)
    counts = rle_encode_flat(raster.ravel(order="F"))
    return Mask(
        counts=tuple(int(c) for c in counts),
        height=int(raster.shape[0]),
        width=int(raster.shape[1]),
        area=int(raster.sum()),
        bbox=bbox_of(raster),
        quality=float(quality),
        id=int(id),
    )


def rle_decode(mask: Mask) -> np.ndarray:
    return mask.decode()


def validate_mask(mask: Mask) -> None:
    """Check the RLE/area/bbox/quality invariants; raise ``InvalidInputError`` on violation."""
    counts = np.asarray(mask.counts, dtype=np.int64)
    if mask.height <= 0 or mask.width <= 0:
        raise InvalidInputError(f"mask {mask.id}: non-positive size {mask.shape}")
    if np.any(counts < 0) or counts.sum() != mask.height * mask.width:
        raise InvalidInputError(f"mask {mask.id}: RLE counts do not cover {mask.shape}")
    raster = mask.decode()
    if int(raster.sum()) != mask.area:
        raise InvalidInputError(f"mask {mask.id}: area {mask.area} != {int(raster.sum())} set pixels")
    if tuple(mask.bbox) != bbox_of(raster):
        raise InvalidInputError(f"mask {mask.id}: bbox {mask.bbox} is not tight")
    if not 0.0 <= mask.quality <= 1.0:
        raise InvalidInputError(f"mask {mask.id}: quality {mask.quality} outside [0, 1]")


def check_same_shape(masks: Sequence[Mask]) -> None:
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise ShapeError(f"masks have differing dimensions: {sorted(shapes)}")


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union of two masks' pixel sets (0 when both are empty)."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    fa, fb = a.flat().astype(bool), b.flat().astype(bool)
    union = int(np.count_nonzero(fa | fb))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(fa & fb)) / union


def stack_masks(masks: Sequence[Mask]) -> np.ndarray:
    """``(N, H*W)`` bool stack of column-major flattened rasters."""
    if not masks:
        return np.zeros((0, 0), dtype=bool)
    check_same_shape(masks)
    return np.stack([m.flat().astype(bool) for m in masks])


def iou_matrix(masks: Sequence[Mask]) -> np.ndarray:
    stack = stack_masks(masks)
    inter = pairwise_intersections(stack).astype(np.float64)
    areas = np.diag(inter)
    union = areas[:, None] + areas[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def save_masks_json(masks: Sequence[Mask], path) -> None:
    Path(path).write_text(json.dumps([m.to_dict() for m in masks], indent=1))


def load_masks_json(path) -> list:
    return [Mask.from_dict(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# proposal backends
# --------------------------------------------------------------------------

class ProposalBackend(Protocol):
    descriptor: str

    def propose(self, image: np.ndarray) -> list: ...


def check_proposals(masks: Sequence[Mask], image_shape, min_area: int = MIN_PROPOSAL_AREA) -> list:
    """Validate backend output at the boundary and drop specks below ``min_area``."""
    h, w = image_shape[:2]
    kept = []
    for m in masks:
        if m.shape != (h, w):
            raise ShapeError(f"proposal {m.id} is {m.shape}, image is {(h, w)}")
        validate_mask(m)
        if m.area >= max(min_area, 1):
            kept.append(m)
    return kept


@dataclass
class SyntheticScene:
    """Known regions on a canvas, plus which distractor proposals to emit."""

    height: int
    width: int
    regions: list = field(default_factory=list)  # bool rasters, one per object
    duplicates: bool = False
    dilated: bool = False
    dilation: int = 1

    @classmethod
    def from_rectangles(cls, height, width, rects, **kwargs) -> "SyntheticScene":
        regions = []
        for x, y, w, h in rects:
            r = np.zeros((height, width), dtype=bool)
            r[y:y + h, x:x + w] = True
            regions.append(r)
        return cls(height, width, regions, **kwargs)


def dilate(raster: np.ndarray, pixels: int = 1) -> np.ndarray:
    """Square-structuring-element dilation, clipped to the canvas."""
    if pixels <= 0:
        return raster.copy()
    return ndimage.binary_dilation(raster, structure=np.ones((3, 3), bool), iterations=pixels)


def synthetic_proposer(scene: SyntheticScene) -> list:
    """Exact masks for every region (quality 1.0), then optional distractors (quality 0.5).

    Ids run 0..K-1 for the exact masks, then duplicates, then dilations.
    """
    out = []
    for r in scene.regions:
        out.append(rle_encode(r, quality=1.0, id=len(out)))
    if scene.duplicates:
        for r in scene.regions:
            out.append(rle_encode(r, quality=0.5, id=len(out)))
    if scene.dilated:
        for r in scene.regions:
            out.append(rle_encode(dilate(r, scene.dilation), quality=0.5, id=len(out)))
    return out


class ColorRegionProposer:
    """Connected components of each non-background colour, optionally with distractors.

    Exact on flat-colour synthetic images; on photographs set ``quantize`` to
    merge near-identical colours first. Stateless, so concurrent calls are safe.
    """

    def __init__(self, background=(255, 255, 255), quantize: int = 1, duplicates: bool = False,
                 dilated: bool = False, dilation: int = 1, min_area: int = MIN_PROPOSAL_AREA):
        self.background = tuple(int(c) for c in background)
        self.quantize = int(quantize)
        self.duplicates = duplicates
        self.dilated = dilated
        self.dilation = dilation
        self.min_area = min_area

    @property
    def descriptor(self) -> str:
        return (f"color-regions(q={self.quantize},dup={int(self.duplicates)},"
                f"dil={int(self.dilated)}x{self.dilation})")

    def regions(self, image: np.ndarray) -> list:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidInputError(f"expected an HxWx3 image, got {img.shape}")
        q = (img.astype(np.int64) // self.quantize) if self.quantize > 1 else img.astype(np.int64)
        bg = np.asarray(self.background) // max(self.quantize, 1)
        key = (q[..., 0] << 20) | (q[..., 1] << 10) | q[..., 2]
        bg_key = (int(bg[0]) << 20) | (int(bg[1]) << 10) | int(bg[2])
        regions = []
        for k in np.unique(key):
            if k == bg_key:
                continue
            labels, n = ndimage.label(key == k, structure=np.ones((3, 3), bool))
            for lab in range(1, n + 1):
                r = labels == lab
                if r.sum() >= self.min_area:
                    regions.append(r)
        # stable spatial order: by top-left of the bbox, then area
        regions.sort(key=lambda r: (bbox_of(r)[1], bbox_of(r)[0], -int(r.sum())))
        return regions

    def propose(self, image: np.ndarray) -> list:
        img = np.asarray(image)
        scene = SyntheticScene(img.shape[0], img.shape[1], self.regions(img),
                               duplicates=self.duplicates, dilated=self.dilated,
                               dilation=self.dilation)
        return check_proposals(synthetic_proposer(scene), img.shape, self.min_area)


def masks_from_sam_records(records, min_area: int = MIN_PROPOSAL_AREA) -> list:
    """Convert automatic-mask-generator records (dicts with ``segmentation``) to masks.

    Quality comes from ``stability_score`` (falling back to ``predicted_iou``),
    clamped to [0, 1].
    """
    out = []
    for rec in records:
        score = rec.get("stability_score", rec.get("predicted_iou", 1.0))
        quality = float(np.clip(score, 0.0, 1.0))
        m = rle_encode(np.asarray(rec["segmentation"], dtype=bool), quality=quality, id=len(out))
        if m.area >= max(min_area, 1):
            out.append(m)
    return out


class SamProposer:
    """Adapter around ``segment_anything``'s automatic mask generator.

    Generator settings (``points_per_side`` and friends) pass straight through.
    Requires the optional ``segment-anything`` package and a checkpoint file.
    """

    def __init__(self, checkpoint, model_type: str = "vit_h", device: str = "cpu",
                 min_area: int = MIN_PROPOSAL_AREA, **generator_kwargs):
        from segment_anything import SamAutomaticMaskGenerator, sam_model_registry

        sam = sam_model_registry[model_type](checkpoint=str(checkpoint))
        sam.to(device)
        self._generator = SamAutomaticMaskGenerator(sam, **generator_kwargs)
        self.min_area = min_area
        self.descriptor = f"sam({model_type})"

    def propose(self, image: np.ndarray) -> list:
        records = self._generator.generate(np.asarray(image, dtype=np.uint8))
        return check_proposals(masks_from_sam_records(records, self.min_area), image.shape, self.min_area)
