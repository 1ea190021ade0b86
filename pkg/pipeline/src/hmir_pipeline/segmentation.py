"""Hierarchical superpixel segmentation with exact per-level counts.

Superpixel algorithms return "approximately n" regions; the container format
downstream requires exactly n vectors per level.  After SLIC the label map is
repaired: too many regions and the smallest is merged into its most-adjacent
neighbor, too few and the largest is split across its wider axis, until the
count is exact.  Single-color images skip SLIC (it has no gradients to work
with) and take a uniform grid instead.  Every repair step preserves the
partition property: labels are disjoint and cover the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.segmentation import slic


class PipelineError(Exception):
    """Invalid input or unsatisfiable request."""


@dataclass(frozen=True)
class SegmentPatch:
    """One segment at one level, cropped to its bounding box.

    ``raster`` pixels outside the segment mask are black; ``bbox`` is
    (row0, col0, row1, col1) with exclusive ends, inside the image.
    """

    image_id: str
    level: int
    ordinal: int
    bbox: tuple[int, int, int, int]
    raster: np.ndarray


def _grid_labels(shape: tuple[int, int], n: int) -> np.ndarray:
    """n near-equal rectangles in r rows, where r is the largest divisor of n
    not exceeding sqrt(n) (so 4 -> 2x2 quadrants, 6 -> 2x3)."""
    rows_n = max(d for d in range(1, int(np.sqrt(n)) + 1) if n % d == 0)
    cols_n = n // rows_n
    h, w = shape
    labels = np.empty(shape, dtype=np.int64)
    row_edges = np.linspace(0, h, rows_n + 1, dtype=np.int64)
    col_edges = np.linspace(0, w, cols_n + 1, dtype=np.int64)
    for r in range(rows_n):
        for c in range(cols_n):
            labels[row_edges[r]:row_edges[r + 1],
                   col_edges[c]:col_edges[c + 1]] = r * cols_n + c
    return labels


def _relabel(labels: np.ndarray) -> np.ndarray:
    _, compact = np.unique(labels, return_inverse=True)
    return compact.reshape(labels.shape)


def _merge_smallest(labels: np.ndarray) -> np.ndarray:
    sizes = np.bincount(labels.ravel())
    victim = int(np.argmin(sizes))
    mask = labels == victim
    # Count boundary contacts with each neighboring label.
    contacts: dict[int, int] = {}
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        rolled = np.roll(labels, shift, axis=axis)
        edge = mask & (rolled != victim)
        # Rolling wraps around; drop the wrapped border row/column.
        if axis == 0:
            edge[0 if shift == 1 else -1, :] = False
        else:
            edge[:, 0 if shift == 1 else -1] = False
        for lab, cnt in zip(*np.unique(rolled[edge], return_counts=True)):
            contacts[int(lab)] = contacts.get(int(lab), 0) + int(cnt)
    if not contacts:
        raise PipelineError("cannot merge: segment has no neighbors")
    target = max(sorted(contacts), key=lambda lab: contacts[lab])
    labels = labels.copy()
    labels[mask] = target
    return _relabel(labels)


def _split_largest(labels: np.ndarray) -> np.ndarray:
    sizes = np.bincount(labels.ravel())
    for candidate in np.argsort(-sizes, kind="stable"):
        if sizes[candidate] < 2:
            break
        rows, cols = np.nonzero(labels == candidate)
        for coords in sorted((cols, rows), key=lambda c: -(c.max() - c.min())):
            cut = np.median(coords)
            # A skewed median can equal the segment's extreme on one side;
            # whichever strict half is non-empty gives a proper split.
            for part in (coords > cut, coords < cut):
                if 0 < part.sum() < coords.size:
                    labels = labels.copy()
                    labels[rows[part], cols[part]] = labels.max() + 1
                    return _relabel(labels)
    raise PipelineError("cannot split any segment further")


def exact_count(labels: np.ndarray, n: int) -> np.ndarray:
    """Repair a label map to exactly n regions, keeping it a partition."""
    labels = _relabel(labels)
    if labels.size < n:
        raise PipelineError(f"{n} segments requested for a {labels.size}-pixel image")
    while labels.max() + 1 > n:
        labels = _merge_smallest(labels)
    while labels.max() + 1 < n:
        labels = _split_largest(labels)
    return labels


def segment_masks(image: np.ndarray, n: int) -> np.ndarray:
    """Label map with exactly n segments for one level.

    Level 1 is the whole image; single-color images take the grid fallback.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise PipelineError("expected an (H, W, 3) RGB image array")
    h, w = image.shape[:2]
    if n < 1:
        raise PipelineError("segment count must be at least 1")
    if n > h * w:
        raise PipelineError(f"{n} segments requested for a {h * w}-pixel image")
    if n == 1:
        return np.zeros((h, w), dtype=np.int64)
    flat = image.reshape(-1, 3)
    if (flat == flat[0]).all():
        return _grid_labels((h, w), n)
    labels = slic(image, n_segments=n, compactness=10.0, start_label=0,
                  channel_axis=-1)
    return exact_count(labels, n)


def build_patches(image_id: str, image: np.ndarray, level: int,
                  labels: np.ndarray) -> list[SegmentPatch]:
    """Crop each segment to its bounding box, blacking out non-mask pixels."""
    patches = []
    for ordinal in range(int(labels.max()) + 1):
        mask = labels == ordinal
        rows, cols = np.nonzero(mask)
        bbox = (int(rows.min()), int(cols.min()),
                int(rows.max()) + 1, int(cols.max()) + 1)
        raster = image[bbox[0]:bbox[2], bbox[1]:bbox[3]].copy()
        raster[~mask[bbox[0]:bbox[2], bbox[1]:bbox[3]]] = 0
        patches.append(SegmentPatch(image_id, level, ordinal, bbox, raster))
    return patches


def segment_image(image_id: str, image: np.ndarray,
                  levels: tuple[int, ...]) -> dict[int, list[SegmentPatch]]:
    """Patches for every requested level, exactly ``level`` patches each."""
    return {
        level: build_patches(image_id, image, level, segment_masks(image, level))
        for level in levels
    }
