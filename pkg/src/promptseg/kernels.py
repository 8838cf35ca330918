"""Hot raster kernels behind the mask model and the overlap filters.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. Both must return identical results; the dispatching wrappers pick
the numba one unless ``PROMPTSEG_DISABLE_NUMBA`` is set.

Rasters are passed flattened in column-major (Fortran) order, so a flat index
``k`` is pixel ``(k % height, k // height)``.
"""
import numpy as np

from . import _accel
from ._accel import njit

__all__ = [
    "rle_encode_flat",
    "rle_decode_flat",
    "pairwise_intersections",
    "assign_owners",
    "nearest_colour_counts",
]


# --------------------------------------------------------------------------
# run-length encoding
# --------------------------------------------------------------------------

def _rle_encode_numpy(flat):
    flat = np.asarray(flat).astype(bool)
    n = flat.shape[0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    counts = np.diff(bounds).astype(np.int64)
    if flat[0]:
        counts = np.concatenate((np.zeros(1, dtype=np.int64), counts))
    return counts


@njit
def _rle_encode_numba(flat):
    n = flat.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    k = 0
    current = 0
    run = 0
    for i in range(n):
        v = 1 if flat[i] else 0
        if v != current:
            out[k] = run
            k += 1
            run = 0
            current = v
        run += 1
    out[k] = run
    k += 1
    return out[:k].copy()


def _rle_decode_numpy(counts, n):
    counts = np.asarray(counts, dtype=np.int64)
    values = (np.arange(counts.shape[0]) % 2).astype(np.uint8)
    flat = np.repeat(values, counts)
    if flat.shape[0] != n:
        raise ValueError(f"RLE counts sum to {flat.shape[0]}, expected {n}")
    return flat


@njit
def _rle_decode_numba_impl(counts, n):
    flat = np.zeros(n, dtype=np.uint8)
    pos = 0
    for k in range(counts.shape[0]):
        c = counts[k]
        if k % 2 == 1:
            for i in range(pos, min(pos + c, n)):
                flat[i] = 1
        pos += c
    return flat, pos


def _rle_decode_numba(counts, n):
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    flat, total = _rle_decode_numba_impl(counts, n)
    if total != n:
        raise ValueError(f"RLE counts sum to {total}, expected {n}")
    return flat


# --------------------------------------------------------------------------
# pairwise overlap
# --------------------------------------------------------------------------

def _pairwise_intersections_numpy(stack):
    s = np.asarray(stack, dtype=np.float64)
    return np.rint(s @ s.T).astype(np.int64)


@njit
def _pairwise_intersections_numba(stack):
    n, p = stack.shape
    out = np.zeros((n, n), dtype=np.int64)
    active = np.empty(n, dtype=np.int64)
    for j in range(p):
        m = 0
        for i in range(n):
            if stack[i, j]:
                active[m] = i
                m += 1
        for a in range(m):
            ia = active[a]
            for b in range(m):
                out[ia, active[b]] += 1
    return out


# --------------------------------------------------------------------------
# contested-pixel assignment
# --------------------------------------------------------------------------

def _assign_owners_numpy(stack, rank):
    stack = np.asarray(stack, dtype=bool)
    if stack.shape[0] == 0:
        return np.full(stack.shape[1], -1, dtype=np.int64)
    order = np.argsort(rank, kind="stable")
    ordered = stack[order]
    covered = ordered.any(axis=0)
    first = ordered.argmax(axis=0)
    return np.where(covered, order[first], -1).astype(np.int64)


@njit
def _assign_owners_numba(stack, rank):
    n, p = stack.shape
    owner = np.full(p, -1, dtype=np.int64)
    best = np.zeros(p, dtype=np.int64)
    for i in range(n):
        r = rank[i]
        for j in range(p):
            if stack[i, j] and (owner[j] < 0 or r < best[j]):
                owner[j] = i
                best[j] = r
    return owner


# --------------------------------------------------------------------------
# palette histogram
# --------------------------------------------------------------------------

def _nearest_colour_counts_numpy(rgb, colours):
    d = ((rgb[:, None, :] - colours[None, :, :]) ** 2).sum(axis=2)
    return np.bincount(d.argmin(axis=1), minlength=colours.shape[0]).astype(np.int64)


@njit
def _nearest_colour_counts_numba(rgb, colours):
    k = colours.shape[0]
    counts = np.zeros(k, dtype=np.int64)
    for i in range(rgb.shape[0]):
        best = 0
        best_d = np.inf
        for c in range(k):
            d = 0.0
            for ch in range(3):
                diff = rgb[i, ch] - colours[c, ch]
                d += diff * diff
            if d < best_d:
                best_d = d
                best = c
        counts[best] += 1
    return counts


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def rle_encode_flat(flat):
    """Alternating (zeros, ones, ...) run lengths of a flat binary vector.

    The first count is always a zero-run, possibly of length 0.
    """
    flat = np.ascontiguousarray(flat, dtype=bool)
    if _accel.USE_NUMBA:
        return _rle_encode_numba(flat)
    return _rle_encode_numpy(flat)


def rle_decode_flat(counts, n):
    """Inverse of :func:`rle_encode_flat`; returns a uint8 vector of length ``n``."""
    if _accel.USE_NUMBA:
        return _rle_decode_numba(counts, int(n))
    return _rle_decode_numpy(counts, int(n))


def pairwise_intersections(stack):
    """Pixel intersection counts for every pair of rows of a ``(N, P)`` bool stack."""
    stack = np.ascontiguousarray(stack, dtype=bool)
    if _accel.USE_NUMBA:
        return _pairwise_intersections_numba(stack)
    return _pairwise_intersections_numpy(stack)


def assign_owners(stack, rank):
    """For each pixel, the row index with the lowest ``rank`` covering it (-1 if none).

    ``rank`` must be a strict total order (distinct integers) for the result
    to be independent of row order.
    """
    stack = np.ascontiguousarray(stack, dtype=bool)
    rank = np.ascontiguousarray(rank, dtype=np.int64)
    if _accel.USE_NUMBA:
        return _assign_owners_numba(stack, rank)
    return _assign_owners_numpy(stack, rank)


def nearest_colour_counts(rgb, colours):
    """Histogram of ``(P, 3)`` pixels snapped to the nearest of ``(K, 3)`` colours.

    Ties go to the lower colour index.
    """
    rgb = np.ascontiguousarray(rgb, dtype=np.float64).reshape(-1, 3)
    colours = np.ascontiguousarray(colours, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _nearest_colour_counts_numba(rgb, colours)
    return _nearest_colour_counts_numpy(rgb, colours)


IMPLEMENTATIONS = {
    "rle_encode_flat": (_rle_encode_numpy, _rle_encode_numba),
    "rle_decode_flat": (_rle_decode_numpy, _rle_decode_numba),
    "pairwise_intersections": (_pairwise_intersections_numpy, _pairwise_intersections_numba),
    "assign_owners": (_assign_owners_numpy, _assign_owners_numba),
    "nearest_colour_counts": (_nearest_colour_counts_numpy, _nearest_colour_counts_numba),
}
