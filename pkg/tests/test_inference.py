import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dsmfilter.inference import ensemble_dsm, ensemble_masks, predict_tiled, tile_starts
from dsmfilter.raster import HeightMap, RasterError, RoofClassMap


class Affine:
    """Pixelwise ``a * x + b`` with fixed logits favouring class 1."""

    def __init__(self, a=2.0, b=1.0, seg=True):
        self.a, self.b, self.seg = a, b, seg
        self.calls = []

    def predict(self, tiles):
        self.calls.append(tiles.shape)
        logits = None
        if self.seg:
            logits = np.zeros((tiles.shape[0], 3) + tiles.shape[1:])
            logits[:, 1] = 1.0
        return self.a * tiles + self.b, logits


class TileLocal:
    """Output depends on position inside the tile, so overlaps disagree."""

    def predict(self, tiles):
        n, p, _ = tiles.shape
        rr, cc = np.mgrid[0:p, 0:p]
        logits = np.zeros((n, 3, p, p))
        logits[:, 0] = (rr < p // 2)
        logits[:, 2] = (rr >= p // 2) * 0.5
        return np.broadcast_to(rr * 10.0 + cc, (n, p, p)).copy(), logits


def tiled_oracle(shape, patch, stride):
    rows, cols = shape
    starts_r = tile_starts(rows, patch, stride)
    starts_c = tile_starts(cols, patch, stride)
    out = np.zeros(shape)
    for i in range(rows):
        for j in range(cols):
            vals = [(i - r) * 10.0 + (j - c) for r in starts_r for c in starts_c
                    if r <= i < r + patch and c <= j < c + patch]
            out[i, j] = sum(vals) / len(vals)
    return out


def test_tile_starts_cover_flush():
    assert tile_starts(256, 256, 64) == [0]
    assert tile_starts(300, 256, 64) == [0, 44]
    assert tile_starts(384, 256, 64) == [0, 64, 128]
    with pytest.raises(RasterError):
        tile_starts(100, 256, 64)
    with pytest.raises(ValueError):
        tile_starts(300, 256, 0)


def test_constant_input_single_tile():
    model = Affine()
    hm, mask = predict_tiled(model, HeightMap(np.full((256, 256), 4.0), 0.5), 256, 64)
    assert len(model.calls) == 1
    assert np.all(hm.values == 9.0)
    assert np.all(mask.labels == 1)


def test_pixelwise_model_reproduced_exactly_on_large_raster():
    x = np.random.default_rng(0).normal(30, 5, (384, 384))
    hm, _ = predict_tiled(Affine(seg=False), HeightMap(x, 0.5, origin=(10.0, 20.0)), 256, 64, batch_size=4)
    assert np.allclose(hm.values, 2 * x + 1, atol=1e-9)
    assert hm.origin == (10.0, 20.0)


def test_stride_equal_patch_is_plain_tiling():
    x = np.zeros((96, 64))
    hm, mask = predict_tiled(TileLocal(), HeightMap(x, 0.5), 32, 32)
    rr, cc = np.mgrid[0:32, 0:32]
    assert np.array_equal(hm.values, np.tile(rr * 10.0 + cc, (3, 2)))
    assert np.array_equal(mask.labels, np.tile(np.where(rr < 16, 0, 2), (3, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(12, 30), st.integers(12, 30), st.integers(4, 12), st.integers(1, 8), st.integers(1, 5))
def test_overlap_average_matches_oracle(rows, cols, patch, stride, batch):
    stride = min(stride, patch)
    hm, _ = predict_tiled(TileLocal(), HeightMap(np.zeros((rows, cols)), 1.0), patch, stride, batch)
    assert np.allclose(hm.values, tiled_oracle((rows, cols), patch, stride), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_ensemble_mean_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    maps = [rng.normal(0, 10, (6, 7)) for _ in range(k)]
    out = ensemble_dsm([HeightMap(m, 0.5) for m in maps])
    assert np.allclose(out.values, oracles.mean_stack(maps), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_majority_vote_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    masks = [rng.integers(0, 3, (6, 7)) for _ in range(k)]
    out = ensemble_masks([RoofClassMap(m, 0.5) for m in masks])
    assert np.array_equal(out.labels, oracles.majority(masks))
    for perm in itertools.islice(itertools.permutations(masks), 6):
        assert np.array_equal(ensemble_masks([RoofClassMap(m, 0.5) for m in perm]).labels, out.labels)


def test_vote_tie_goes_to_lowest_class():
    a, b = np.full((2, 2), 2), np.full((2, 2), 1)
    assert np.all(ensemble_masks([RoofClassMap(a, 0.5), RoofClassMap(b, 0.5)]).labels == 1)
    three = [RoofClassMap(np.full((1, 1), c), 0.5) for c in (2, 0, 1)]
    assert ensemble_masks(three).labels[0, 0] == 0


def test_stride_beyond_patch_rejected():
    with pytest.raises(ValueError, match="gaps"):
        predict_tiled(Affine(), HeightMap(np.zeros((64, 64)), 0.5), 16, 32)


def test_ensemble_rejects_mismatch():
    with pytest.raises(ValueError):
        ensemble_dsm([])
    with pytest.raises(RasterError):
        ensemble_dsm([HeightMap(np.zeros((2, 2)), 1.0), HeightMap(np.zeros((2, 3)), 1.0)])
    with pytest.raises(RasterError):
        ensemble_masks([RoofClassMap(np.zeros((2, 2), int), 1.0), RoofClassMap(np.zeros((3, 2), int), 1.0)])
