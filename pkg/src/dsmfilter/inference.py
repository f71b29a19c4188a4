"""Overlapping-tile prediction over whole rasters and multi-model fusion."""

from __future__ import annotations

import numpy as np
from scipy.special import softmax

from .raster import NUM_CLASSES, HeightMap, RasterError, RoofClassMap


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    """Tile offsets along one axis; the last tile sits flush with the border."""
    if length < patch:
        raise RasterError(f"extent {length} is smaller than patch {patch}")
    if stride < 1:
        raise ValueError("stride must be positive")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def predict_tiled(model, dsm: HeightMap, patch: int = 256, stride: int = 64, batch_size: int = 16):
    """Average overlapping tile predictions over the whole raster.

    Heights are averaged per pixel; segmentation takes the argmax of the
    mean per-tile softmax probabilities. Returns ``(HeightMap, RoofClassMap
    or None)``.
    """
    if stride > patch:
        raise ValueError(f"stride {stride} exceeds patch {patch}; tiles would leave gaps")
    values = dsm.values.astype(np.float64)
    rows, cols = values.shape
    origins = [(r, c) for r in tile_starts(rows, patch, stride) for c in tile_starts(cols, patch, stride)]
    height_sum = np.zeros((rows, cols))
    count = np.zeros((rows, cols))
    prob_sum = None
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        tiles = np.stack([values[r:r + patch, c:c + patch] for r, c in chunk])
        heights, logits = model.predict(tiles)
        if logits is not None and prob_sum is None:
            prob_sum = np.zeros((logits.shape[1], rows, cols))
        for k, (r, c) in enumerate(chunk):
            height_sum[r:r + patch, c:c + patch] += heights[k]
            count[r:r + patch, c:c + patch] += 1
            if logits is not None:
                prob_sum[:, r:r + patch, c:c + patch] += softmax(logits[k], axis=0)
    heights = dsm.like(height_sum / count)
    mask = None
    if prob_sum is not None:
        mask = RoofClassMap(np.argmax(prob_sum, axis=0), gsd=dsm.gsd, origin=dsm.origin)
    return heights, mask


def ensemble_dsm(maps: list[HeightMap]) -> HeightMap:
    """Per-pixel mean of equally weighted height maps."""
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise RasterError("ensemble inputs differ in shape")
    stacked = np.stack([m.values.astype(np.float64) for m in maps])
    return maps[0].like(stacked.mean(axis=0))


def ensemble_masks(masks: list[RoofClassMap]) -> RoofClassMap:
    """Per-pixel majority vote; ties go to the lowest class index."""
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise RasterError("ensemble inputs differ in shape")
    votes = np.zeros((NUM_CLASSES,) + shape, dtype=np.int64)
    for m in masks:
        for c in range(NUM_CLASSES):
            votes[c] += m.labels == c
    return RoofClassMap(np.argmax(votes, axis=0), gsd=masks[0].gsd, origin=masks[0].origin)
