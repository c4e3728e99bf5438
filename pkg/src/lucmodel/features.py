"""Geographic features, labelled transition samples and balanced mini-batches."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .raster import (BadMagicError, LengthMismatchError, LuGrid, RasterFormatError,
                     crop_patches, fields_shape_check, load_field, neighborhood_count_maps,
                     save_field)

log = logging.getLogger(__name__)

DATASET_MAGIC = b"LUCS"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHIHHH")

DEFAULT_ENRICHMENT_WINDOW = 7


class EnrichmentError(ValueError):
    pass


def compute_enrichment(grid: LuGrid, category: int, window: int = DEFAULT_ENRICHMENT_WINDOW) -> np.ndarray:
    """Neighbourhood share of ``category`` divided by its share of the whole map.

    The centre cell is part of its own neighbourhood; masked cells are ignored in
    all counts and receive 0.
    """
    if category not in grid.categories:
        raise EnrichmentError(f"category {category} not declared in {grid.categories}")
    valid = grid.valid_mask()
    total = int(valid.sum())
    n_k = int(np.count_nonzero((grid.data == category) & valid))
    if n_k == 0:
        raise EnrichmentError(f"category {category} absent from the map; enrichment undefined")
    counts = neighborhood_count_maps(grid, window)
    k = grid.categories.index(category)
    n_all = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.where(n_all > 0, counts[k] / np.maximum(n_all, 1), 0.0)
    out = local / (n_k / total)
    out[~valid] = 0.0
    return out


def distance_field(target: np.ndarray, cell_size: float = 1.0) -> np.ndarray:
    """Exact Euclidean distance (meters) from each cell centre to the nearest target cell."""
    target = np.asarray(target, dtype=bool)
    if not target.any():
        raise ValueError("distance_field: target mask is empty")
    return ndimage.distance_transform_edt(~target) * float(cell_size)


@dataclass
class FeatureStack:
    """Z-scored feature fields with the constants used to normalise them."""

    names: List[str]
    fields: np.ndarray  # (n_features, H, W), normalised
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if self.fields.shape[0] != len(self.names):
            raise ValueError("one field per feature name required")

    @property
    def n_features(self) -> int:
        return len(self.names)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Apply the stored constants to raw fields ``(n_features, H, W)``."""
        return (raw - self.means[:, None, None]) / self.sds[:, None, None]

    def at(self, rows, cols) -> np.ndarray:
        return np.ascontiguousarray(self.fields[:, rows, cols].T)


def _coordinate_fields(shape) -> Tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs / max(w - 1, 1), ys / max(h - 1, 1)


def build_feature_stack(grid_t0: LuGrid, aux: Mapping[str, np.ndarray],
                        enrichment_window: int = DEFAULT_ENRICHMENT_WINDOW,
                        category_names: Optional[Mapping[int, str]] = None) -> FeatureStack:
    """Enrichment per category, the auxiliary fields, and normalised coordinates."""
    fields_shape_check(*aux.values(), shape=grid_t0.shape)
    names, raw = [], []
    for code in grid_t0.categories:
        label = category_names.get(code, str(code)) if category_names else str(code)
        names.append(f"enrichment_{label}")
        raw.append(compute_enrichment(grid_t0, code, enrichment_window))
    for name, values in aux.items():
        names.append(str(name))
        raw.append(np.asarray(values, dtype=np.float64))
    xs, ys = _coordinate_fields(grid_t0.shape)
    names += ["coord_x", "coord_y"]
    raw += [xs, ys]
    raw = np.stack(raw)
    valid = grid_t0.valid_mask()
    if not np.isfinite(raw[:, valid]).all():
        raise ValueError("feature fields contain non-finite values on unmasked cells")
    means = raw[:, valid].mean(axis=1)
    sds = raw[:, valid].std(axis=1)
    sds = np.where(sds > 0, sds, 1.0)
    fields = (raw - means[:, None, None]) / sds[:, None, None]
    fields[:, ~valid] = 0.0
    return FeatureStack(names, fields, means, sds)


def save_feature_stack(stack: FeatureStack, path) -> None:
    """LUCF file with one band per feature plus a ``.manifest`` sidecar."""
    path = Path(path)
    save_field(stack.fields, path, float64=True)
    lines = [f"{n} {float(m)!r} {float(s)!r}" for n, m, s in zip(stack.names, stack.means, stack.sds)]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_feature_stack(path) -> FeatureStack:
    path = Path(path)
    fields = load_field(path).astype(np.float64)
    names, means, sds = [], [], []
    for line in Path(str(path) + ".manifest").read_text().splitlines():
        if not line.strip():
            continue
        n, m, s = line.split()
        names.append(n)
        means.append(float(m))
        sds.append(float(s))
    return FeatureStack(names, fields, np.array(means), np.array(sds))


@dataclass
class Sample:
    cell: Tuple[int, int]
    label: int
    geo_features: np.ndarray
    image_patch: Optional[np.ndarray] = None


@dataclass
class Dataset:
    """Struct-of-arrays set of labelled cells for one transition.

    Patches are cropped on demand from ``image`` (or read from ``patches`` when
    the dataset was loaded with stored patches).
    """

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    transition: Tuple[int, int]
    patch_size: int = 0
    image: Optional[np.ndarray] = field(default=None, repr=False)
    patches: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    @property
    def has_images(self) -> bool:
        return self.image is not None or self.patches is not None

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.rows[indices], self.cols[indices], self.labels[indices],
                       self.features[indices], self.transition, self.patch_size,
                       self.image, None if self.patches is None else self.patches[indices])

    def patch_batch(self, indices, size: Optional[int] = None, image=None) -> np.ndarray:
        """``(len(indices), bands, size, size)`` float64 patches."""
        indices = np.asarray(indices, dtype=np.intp)
        size = size or self.patch_size
        image = self.image if image is None else image
        if image is not None:
            return crop_patches(image, self.rows[indices], self.cols[indices], size)
        if self.patches is not None and size == self.patch_size:
            return self.patches[indices].astype(np.float64)
        raise ValueError("dataset has no image source for patches")

    def __getitem__(self, i) -> Sample:
        patch = self.patch_batch([i])[0] if self.has_images and self.patch_size else None
        return Sample((int(self.rows[i]), int(self.cols[i])), int(self.labels[i]),
                      self.features[i], patch)


def assemble_dataset(grid_t0: LuGrid, grid_t1: LuGrid, stack: FeatureStack,
                     image: Optional[np.ndarray], transition: Tuple[int, int],
                     patch_size: int = 27) -> Dataset:
    """One sample per unmasked cell of class ``from``; label 1 iff it became ``to``."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd, got {patch_size}")
    shape = fields_shape_check(grid_t0.data, grid_t1.data, stack.fields)
    if image is not None:
        fields_shape_check(image, shape=shape)
    src, dst = transition
    eligible = grid_t0.valid_mask() & grid_t1.valid_mask() & (grid_t0.data == src)
    rows, cols = np.nonzero(eligible)
    if rows.size == 0:
        raise ValueError(f"no eligible cells of class {src} for transition {transition}")
    labels = (grid_t1.data[rows, cols] == dst).astype(np.uint8)
    return Dataset(rows.astype(np.int64), cols.astype(np.int64), labels,
                   stack.at(rows, cols), (int(src), int(dst)), patch_size, image)


def region_split(dataset: Dataset, validation_region: np.ndarray,
                 validation_fraction_target: Optional[float] = None) -> Tuple[Dataset, Dataset]:
    """Spatial split: samples inside the region validate, the rest train."""
    region = np.asarray(validation_region, dtype=bool)
    inside = region[dataset.rows, dataset.cols]
    if not inside.any():
        raise ValueError("validation region contains no samples")
    if inside.all():
        raise ValueError("validation region covers every sample; nothing left to train on")
    frac = inside.mean()
    if validation_fraction_target is not None and abs(frac - validation_fraction_target) > 0.05:
        log.warning("validation fraction %.3f deviates from target %.3f",
                    frac, validation_fraction_target)
    return dataset.subset(np.flatnonzero(~inside)), dataset.subset(np.flatnonzero(inside))


def left_columns_region(shape, fraction: float) -> np.ndarray:
    """Region mask covering the leftmost ``fraction`` of columns."""
    h, w = shape
    ncols = max(1, int(round(w * fraction)))
    region = np.zeros(shape, dtype=bool)
    region[:, :ncols] = True
    return region


@dataclass
class MiniBatch:
    indices: np.ndarray
    labels: np.ndarray


def balanced_minibatch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> MiniBatch:
    """Half positives, half negatives, each drawn uniformly with replacement."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    pos, neg = dataset.positive_indices, dataset.negative_indices
    if pos.size == 0 or neg.size == 0:
        raise ValueError("balanced sampling needs at least one positive and one negative sample")
    half = batch_size // 2
    idx = np.concatenate([pos[rng.integers(0, pos.size, half)],
                          neg[rng.integers(0, neg.size, half)]])
    return MiniBatch(idx, dataset.labels[idx])


def save_dataset(dataset: Dataset, path, include_patches: bool = False) -> None:
    """Binary LUCS record file."""
    n = len(dataset)
    nfeat = dataset.features.shape[1]
    bands = size = 0
    patches = None
    if include_patches:
        patches = dataset.patch_batch(np.arange(n)).astype("<f4")
        bands, size = patches.shape[1], patches.shape[2]
    rec = np.dtype([("x", "<i4"), ("y", "<i4"), ("label", "u1"), ("features", "<f4", (nfeat,))]
                   + ([("patch", "<f4", (bands, size, size))] if patches is not None else []))
    arr = np.zeros(n, dtype=rec)
    arr["x"] = dataset.cols
    arr["y"] = dataset.rows
    arr["label"] = dataset.labels
    arr["features"] = dataset.features
    if patches is not None:
        arr["patch"] = patches
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, nfeat, bands, size)
    extra = struct.pack("<HH", *dataset.transition)
    Path(path).write_bytes(header + extra + arr.tobytes())


def load_dataset(path, image: Optional[np.ndarray] = None, patch_size: int = 0) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    _, version, n, nfeat, bands, size = _DATASET_HEADER.unpack_from(raw, 0)
    if version != DATASET_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    off = _DATASET_HEADER.size
    transition = struct.unpack_from("<HH", raw, off)
    off += 4
    rec = np.dtype([("x", "<i4"), ("y", "<i4"), ("label", "u1"), ("features", "<f4", (nfeat,))]
                   + ([("patch", "<f4", (bands, size, size))] if size else []))
    if len(raw) - off != n * rec.itemsize:
        raise LengthMismatchError(f"{path}: record section length mismatch")
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    return Dataset(arr["y"].astype(np.int64), arr["x"].astype(np.int64),
                   arr["label"].astype(np.uint8), arr["features"].astype(np.float64),
                   transition, size or patch_size, image,
                   arr["patch"].copy() if size else None)
