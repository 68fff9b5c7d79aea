"""Binary masks, the uncompressed column-major RLE codec and pixel-set ops.

A binary mask is a 2-D ``numpy`` array of dtype ``bool`` with shape
``(height, width)``. RLE counts alternate zero-runs and one-runs over the
mask flattened in column-major (Fortran) order and always start with a
zero-run, which may be empty. This is the layout used by COCO-style
uncompressed RLE, so ``{"h", "w", "counts"}`` documents interoperate with
common annotation tooling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionMismatch, SumMismatch


@dataclass(frozen=True)
class RleMask:
    h: int
    w: int
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"h": self.h, "w": self.w, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, doc: dict) -> "RleMask":
        return cls(int(doc["h"]), int(doc["w"]), tuple(int(c) for c in doc["counts"]))


def as_mask(bits, height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    """Coerce ``bits`` to a boolean mask; a flat sequence needs explicit dims (row-major)."""
    arr = np.asarray(bits)
    if height is not None:
        arr = arr.reshape(height, width)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"mask must be 2-D with positive dims, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def rle_encode(mask) -> RleMask:
    m = as_mask(mask)
    h, w = m.shape
    flat = m.ravel(order="F")
    # positions where the value changes, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return RleMask(h, w, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise SumMismatch("RLE counts must be non-negative")
    total = int(counts.sum())
    if total != rle.h * rle.w:
        raise SumMismatch(f"RLE counts sum to {total}, expected {rle.h}x{rle.w}={rle.h * rle.w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((rle.h, rle.w), order="F")


def area(mask) -> int:
    return int(np.count_nonzero(mask))


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask dims differ: {a.shape} vs {b.shape}")


def mask_iou(a, b) -> Optional[float]:
    """Pixel IoU of two masks, or ``None`` when both are empty."""
    a = as_mask(a)
    b = as_mask(b)
    _check_same_dims(a, b)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return None
    return inter / union


def class_union(regions: Iterable[tuple]) -> dict[int, np.ndarray]:
    """OR together the masks of each class.

    ``regions`` yields tuples whose first two items are ``(class_id, mask)``;
    any further items (scores) are ignored.
    """
    out: dict[int, np.ndarray] = {}
    shape = None
    for region in regions:
        cls, mask = int(region[0]), as_mask(region[1])
        if shape is None:
            shape = mask.shape
        elif mask.shape != shape:
            raise DimensionMismatch(f"mask dims differ: {shape} vs {mask.shape}")
        if cls in out:
            out[cls] = out[cls] | mask
        else:
            out[cls] = mask.copy()
    return out
