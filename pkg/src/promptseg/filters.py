"""Post-processing of raw proposals: duplicate suppression and overlap splitting.

Both stages rank masks by a strict total order built from (quality, area, id),
so results never depend on the order masks arrive in. Ids must be unique.
"""
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .kernels import assign_owners, pairwise_intersections
from .masks import Mask, check_same_shape, rle_encode, stack_masks


@dataclass
class FilterConfig:
    dup_iou_threshold: float = 0.9
    overlap_threshold: float = 0.05
    enable_dedup: bool = True
    enable_split: bool = True

    def __post_init__(self):
        for name in ("dup_iou_threshold", "overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}", field=f"filter.{name}")

    def to_dict(self):
        return asdict(self)


def _check(masks: Sequence[Mask]) -> None:
    check_same_shape(masks)
    ids = [m.id for m in masks]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("mask ids must be unique")


def dedup(masks: Sequence[Mask], config: FilterConfig = FilterConfig()) -> list:
    """Greedy duplicate suppression.

    Masks are visited best-first (higher quality, then larger area, then lower
    id); a mask is dropped when its IoU with an already kept mask reaches
    ``dup_iou_threshold``. Survivors come back sorted by id.
    """
    masks = list(masks)
    if not masks:
        return []
    _check(masks)
    inter = pairwise_intersections(stack_masks(masks)).astype(np.float64)
    areas = np.diag(inter).copy()
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].quality, -masks[i].area, masks[i].id))
    kept = []
    for i in order:
        duplicate = False
        for j in kept:
            union = areas[i] + areas[j] - inter[i, j]
            if union > 0 and inter[i, j] / union >= config.dup_iou_threshold:
                duplicate = True
                break
        if not duplicate:
            kept.append(i)
    return sorted((masks[i] for i in kept), key=lambda m: m.id)


def split_rank(masks: Sequence[Mask]) -> np.ndarray:
    """Priority rank for contested pixels: smaller area first, then higher quality, then lower id."""
    order = sorted(range(len(masks)), key=lambda i: (masks[i].area, -masks[i].quality, masks[i].id))
    rank = np.empty(len(masks), dtype=np.int64)
    rank[order] = np.arange(len(masks))
    return rank


def split_intersections(masks: Sequence[Mask], config: FilterConfig = FilterConfig()) -> list:
    """Make masks pairwise disjoint without losing any covered pixel.

    Each contested pixel goes to exactly one covering mask, chosen by
    :func:`split_rank`. Masks left with no pixels are dropped. Untouched masks
    are returned as-is.
    """
    masks = list(masks)
    if not masks:
        return []
    _check(masks)
    stack = stack_masks(masks)
    owner = assign_owners(stack, split_rank(masks))
    h, w = masks[0].shape
    out = []
    for i, m in enumerate(masks):
        mine = owner == i
        if np.array_equal(mine, stack[i]):
            out.append(m)
            continue
        if not mine.any():
            continue
        raster = mine.reshape((h, w), order="F")
        out.append(rle_encode(raster, quality=m.quality, id=m.id))
    return sorted(out, key=lambda m: m.id)


def filter_pipeline(masks: Sequence[Mask], config: FilterConfig = FilterConfig()) -> list:
    """Dedup then split, each stage gated by its enable flag."""
    out = sorted(masks, key=lambda m: m.id)
    if config.enable_dedup:
        out = dedup(out, config)
    if config.enable_split:
        out = split_intersections(out, config)
    return out


def significant_overlaps(masks: Sequence[Mask], config: FilterConfig = FilterConfig()) -> list:
    """Id pairs whose overlap is at least ``overlap_threshold`` of the smaller mask.

    Diagnostic only; splitting treats every shared pixel as contested.
    """
    masks = list(masks)
    if len(masks) < 2:
        return []
    check_same_shape(masks)
    inter = pairwise_intersections(stack_masks(masks))
    pairs = []
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            smaller = min(masks[i].area, masks[j].area)
            if smaller > 0 and inter[i, j] >= config.overlap_threshold * smaller:
                pairs.append((masks[i].id, masks[j].id))
    return pairs
