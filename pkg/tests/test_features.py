import numpy as np
import pytest

from lucmodel.features import (EnrichmentError, assemble_dataset, balanced_minibatch,
                               build_feature_stack, compute_enrichment, distance_field,
                               left_columns_region, load_dataset, load_feature_stack,
                               region_split, save_dataset, save_feature_stack)
from lucmodel.raster import LuGrid

from conftest import random_grid


def test_enrichment_brute_force(rng):
    g = random_grid(rng, shape=(9, 10), masked=0.1)
    got = compute_enrichment(g, 2, 3)
    valid = g.valid_mask()
    share = np.mean(g.data[valid] == 2)
    for r in range(9):
        for c in range(10):
            if not valid[r, c]:
                assert got[r, c] == 0
                continue
            blk = g.data[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
            vb = valid[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
            local = np.mean(blk[vb] == 2)
            assert got[r, c] == pytest.approx(local / share, rel=1e-12)


def test_enrichment_absent_category():
    g = LuGrid(np.zeros((4, 4)), (0, 1))
    with pytest.raises(EnrichmentError):
        compute_enrichment(g, 1)
    with pytest.raises(EnrichmentError):
        compute_enrichment(g, 5)


def test_distance_field_brute_force(rng):
    target = rng.random((8, 9)) < 0.1
    target[0, 0] = True
    got = distance_field(target, cell_size=15.0)
    tr, tc = np.nonzero(target)
    for r in range(8):
        for c in range(9):
            assert got[r, c] == pytest.approx(15.0 * np.min(np.hypot(tr - r, tc - c)))


def test_distance_field_empty_target():
    with pytest.raises(ValueError):
        distance_field(np.zeros((3, 3), bool))


def _scene(rng):
    g0 = random_grid(rng, shape=(30, 30))
    data = g0.data.copy()
    flip = (data == 1) & (rng.random(data.shape) < 0.3)
    data[flip] = 3
    g1 = g0.replace(data=data)
    aux = {"a": rng.normal(size=(30, 30)), "b": rng.random((30, 30))}
    image = rng.normal(size=(2, 30, 30)).astype(np.float32)
    return g0, g1, aux, image


def test_feature_stack_normalised(rng):
    g0, _, aux, _ = _scene(rng)
    stack = build_feature_stack(g0, aux, 3, {0: "w", 1: "ag", 2: "f", 3: "b"})
    assert stack.names[:4] == ["enrichment_w", "enrichment_ag", "enrichment_f", "enrichment_b"]
    assert stack.n_features == 8
    np.testing.assert_allclose(stack.fields.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(stack.fields.std(axis=(1, 2)), 1, atol=1e-12)


def test_feature_stack_round_trip(tmp_path, rng):
    g0, _, aux, _ = _scene(rng)
    stack = build_feature_stack(g0, aux, 3)
    save_feature_stack(stack, tmp_path / "f.lucf")
    back = load_feature_stack(tmp_path / "f.lucf")
    assert back.names == stack.names
    np.testing.assert_allclose(back.fields, stack.fields, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(back.means, stack.means)


def test_dataset_labels_and_split(rng):
    g0, g1, aux, image = _scene(rng)
    ds = assemble_dataset(g0, g1, build_feature_stack(g0, aux, 3), image, (1, 3), 5)
    assert np.all(g0.data[ds.rows, ds.cols] == 1)
    np.testing.assert_array_equal(ds.labels, g1.data[ds.rows, ds.cols] == 3)
    region = left_columns_region(g0.shape, 0.2)
    tr, va = region_split(ds, region)
    assert len(tr) + len(va) == len(ds)
    assert np.all(va.cols < 6) and np.all(tr.cols >= 6)
    assert ds[0].image_patch.shape == (2, 5, 5)


def test_balanced_minibatch(rng):
    g0, g1, aux, image = _scene(rng)
    ds = assemble_dataset(g0, g1, build_feature_stack(g0, aux, 3), image, (1, 3), 5)
    mb = balanced_minibatch(ds, 64, np.random.default_rng(0))
    assert mb.labels.sum() == 32
    with pytest.raises(ValueError):
        balanced_minibatch(ds, 7, np.random.default_rng(0))


def test_dataset_round_trip(tmp_path, rng):
    g0, g1, aux, image = _scene(rng)
    ds = assemble_dataset(g0, g1, build_feature_stack(g0, aux, 3), image, (1, 3), 5)
    save_dataset(ds, tmp_path / "d.lucs", include_patches=True)
    back = load_dataset(tmp_path / "d.lucs")
    np.testing.assert_array_equal(back.rows, ds.rows)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.transition == (1, 3)
    np.testing.assert_allclose(back.patch_batch([0, 3]), ds.patch_batch([0, 3]), rtol=1e-6)
