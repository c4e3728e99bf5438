import struct

import numpy as np
import pytest

from lucmodel.raster import (BadMagicError, CategoryError, LengthMismatchError, LuGrid,
                             category_index, crop_patch, crop_patches, load_field, load_grid,
                             neighborhood_count_maps, neighborhood_counts, save_field, save_grid)

from conftest import random_grid


def test_grid_rejects_undeclared_codes():
    with pytest.raises(CategoryError):
        LuGrid([[0, 5]], (0, 1))


def test_masked_cells_may_hold_any_code():
    g = LuGrid([[0, 9]], (0, 1), mask=[[False, True]])
    assert g.valid_mask().tolist() == [[True, False]]


def test_grid_is_immutable():
    g = LuGrid(np.zeros((2, 2)), (0,))
    with pytest.raises(AttributeError):
        g.cell_size = 2.0
    with pytest.raises(ValueError):
        g.data[0, 0] = 1


@pytest.mark.parametrize("masked", [0.0, 0.2])
def test_grid_round_trip(tmp_path, rng, masked):
    g = random_grid(rng, masked=masked)
    save_grid(g, tmp_path / "g.lucr")
    assert load_grid(tmp_path / "g.lucr") == g


def test_grid_bad_magic(tmp_path, rng):
    path = tmp_path / "g.lucr"
    save_grid(random_grid(rng), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_grid(path)


def test_grid_truncated(tmp_path, rng):
    path = tmp_path / "g.lucr"
    save_grid(random_grid(rng), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(LengthMismatchError):
        load_grid(path)


@pytest.mark.parametrize("float64", [False, True])
def test_field_round_trip(tmp_path, rng, float64):
    arr = rng.normal(size=(3, 5, 7))
    save_field(arr, tmp_path / "f.lucf", float64=float64)
    back = load_field(tmp_path / "f.lucf")
    assert back.dtype == (np.float64 if float64 else np.float32)
    np.testing.assert_array_equal(back, arr.astype(back.dtype))


def test_field_header_layout(tmp_path):
    save_field(np.zeros((2, 3)), tmp_path / "f.lucf")
    magic, version, flags, bands, width, height = struct.unpack_from(
        "<4sHHHII", (tmp_path / "f.lucf").read_bytes())
    assert (magic, version, flags, bands, width, height) == (b"LUCF", 1, 0, 1, 3, 2)


def test_crop_patch_replicates_edges():
    image = np.arange(16, dtype=float).reshape(1, 4, 4)
    p = crop_patch(image, (0, 0), 3)
    np.testing.assert_array_equal(p[0], [[0, 0, 1], [0, 0, 1], [4, 4, 5]])


def test_crop_patches_matches_single(rng):
    image = rng.normal(size=(2, 9, 11))
    rows, cols = np.array([0, 4, 8]), np.array([10, 5, 0])
    batch = crop_patches(image, rows, cols, 5)
    for i, (r, c) in enumerate(zip(rows, cols)):
        np.testing.assert_array_equal(batch[i], crop_patch(image, (r, c), 5))


def test_crop_patch_even_size_rejected():
    with pytest.raises(ValueError):
        crop_patch(np.zeros((1, 5, 5)), (2, 2), 4)


def test_count_maps_match_pointwise(rng):
    g = random_grid(rng, shape=(11, 13), masked=0.15)
    maps = neighborhood_count_maps(g, 5)
    for r in range(g.height):
        for c in range(g.width):
            np.testing.assert_array_equal(maps[:, r, c], neighborhood_counts(g, (r, c), 5))


def test_category_index_marks_masked():
    g = LuGrid([[3, 7], [7, 3]], (7, 3), mask=[[True, False], [False, False]])
    assert category_index(g).tolist() == [[-1, 0], [0, 1]]
