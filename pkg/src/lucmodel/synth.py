"""Synthetic landscapes with planted, exactly known transition rules.

The generator produces a clustered four-class map, auxiliary driver fields, a
seven-band image and a t1 map sampled from a logistic rule. Part of the rule
depends on small image motifs that no geographic feature exposes, so only
models that look at the image can recover it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .features import compute_enrichment, distance_field
from .raster import LuGrid, load_field, load_grid, save_field, save_grid

WATER, AGRICULTURE, FOREST, BUILT_UP = 0, 1, 2, 3
CATEGORY_NAMES = {WATER: "water", AGRICULTURE: "agriculture", FOREST: "forest",
                  BUILT_UP: "built_up"}
N_BANDS = 7

# Per-category band means; rows follow the category codes above.
DEFAULT_SIGNATURES = (
    (0.2, 0.3, 0.2, 0.1, 0.0, 0.0, 0.1),
    (0.6, 0.8, 0.7, 1.4, 1.0, 0.9, 0.6),
    (0.3, 0.5, 0.3, 1.8, 0.7, 0.4, 0.3),
    (1.2, 1.1, 1.3, 0.9, 1.5, 1.6, 1.4),
)
DEFAULT_SHARES = (0.08, 0.42, 0.30, 0.20)
AUX_NAMES = ("dist_road", "dist_station", "dist_center", "land_price",
             "population_density", "elevation")


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 256
    n_categories: int = 4
    shares: Tuple[float, ...] = DEFAULT_SHARES
    smoothing_radius: float = 6.0
    cell_size: float = 15.0
    signatures: Tuple[Tuple[float, ...], ...] = DEFAULT_SIGNATURES
    image_noise_sd: float = 0.05
    psf_sigma: float = 2.0
    motif_density: float = 0.004
    motif_amplitude: float = 3.0
    motif_bands: Tuple[int, int] = (3, 4)
    n_roads: int = 5
    n_stations: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if len(self.shares) != self.n_categories or len(self.signatures) < self.n_categories:
            raise ValueError("need one share and one signature per category")
        if self.image_noise_sd < 0:
            raise ValueError("image_noise_sd must be >= 0")
        if self.psf_sigma < 0:
            raise ValueError("psf_sigma must be >= 0")
        sig = np.asarray(self.signatures[:self.n_categories], dtype=float)
        for i in range(len(sig)):
            for j in range(i + 1, len(sig)):
                if np.allclose(sig[i], sig[j]):
                    raise ValueError("category signatures must be distinct")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PlantedRule:
    """Logistic transition rule ``sigmoid(intercept + sum(beta * feature))``.

    Feature names: ``enrichment`` (z-scored enrichment of the target class),
    any z-scored aux field name, and ``trigger`` (motif proximity in [0, 1]).
    """

    transition: Tuple[int, int] = (AGRICULTURE, BUILT_UP)
    intercept: float = -4.0
    coefficients: Tuple[Tuple[str, float], ...] = (
        ("enrichment", 3.0), ("dist_road", -3.0), ("trigger", 8.0))
    enrichment_window: int = 7
    trigger_radius: int = 6
    trigger_decay: float = 3.0


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _classify_shares(fields: np.ndarray, shares: Sequence[float], iterations=60) -> np.ndarray:
    """argmax of biased fields with biases tuned toward the target shares."""
    bias = np.zeros(len(shares))
    target = np.asarray(shares, dtype=float) / np.sum(shares)
    for _ in range(iterations):
        cls = np.argmax(fields + bias[:, None, None], axis=0)
        got = np.bincount(cls.ravel(), minlength=len(shares)) / cls.size
        bias += 0.5 * (target - got) / np.maximum(target, 1e-3) * 0.5
    return np.argmax(fields + bias[:, None, None], axis=0)


def _road_mask(rng, shape, n_roads):
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(max(n_roads, 1)):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        angle = rng.uniform(0, np.pi)
        t = np.linspace(-2 * max(h, w), 2 * max(h, w), 8 * max(h, w))
        rr = np.round(r0 + t * np.sin(angle)).astype(int)
        cc = np.round(c0 + t * np.cos(angle)).astype(int)
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        mask[rr[ok], cc[ok]] = True
    return mask


def generate_landscape(config: SynthConfig) -> Tuple[LuGrid, Dict[str, np.ndarray]]:
    """Clustered categorical map plus auxiliary driver fields."""
    rng = np.random.default_rng([config.rng_seed, 11])
    shape = (config.height, config.width)
    fields = np.stack([_smooth_noise(rng, shape, config.smoothing_radius)
                       for _ in range(config.n_categories)])
    classes = _classify_shares(fields, config.shares)
    # guarantee every class is present with at least 1% of cells
    min_cells = max(1, int(np.ceil(0.01 * classes.size)))
    for k in range(config.n_categories):
        deficit = min_cells - int(np.count_nonzero(classes == k))
        if deficit > 0:
            order = np.argsort(-(fields[k] - fields.max(axis=0)), axis=None, kind="stable")
            flat = classes.ravel()
            counts = np.bincount(flat, minlength=config.n_categories)
            for idx in order:
                if deficit == 0:
                    break
                if flat[idx] != k and counts[flat[idx]] > min_cells:
                    counts[flat[idx]] -= 1
                    flat[idx] = k
                    deficit -= 1
            classes = flat.reshape(shape)
    grid = LuGrid(classes.astype(np.uint8), range(config.n_categories), config.cell_size)

    roads = _road_mask(rng, shape, config.n_roads)
    stations = np.zeros(shape, dtype=bool)
    stations[rng.integers(0, shape[0], config.n_stations),
             rng.integers(0, shape[1], config.n_stations)] = True
    center = np.zeros(shape, dtype=bool)
    center[shape[0] // 2 + rng.integers(-shape[0] // 8, shape[0] // 8 + 1),
           shape[1] // 2 + rng.integers(-shape[1] // 8, shape[1] // 8 + 1)] = True
    dist_center = distance_field(center, config.cell_size)
    scale = config.cell_size * max(shape) / 3
    built = (classes == BUILT_UP).astype(float) if config.n_categories > BUILT_UP else 0.0
    aux = {
        "dist_road": distance_field(roads, config.cell_size),
        "dist_station": distance_field(stations, config.cell_size),
        "dist_center": dist_center,
        "land_price": np.exp(-dist_center / scale) + 0.1 * _smooth_noise(rng, shape, 8.0),
        "population_density": ndimage.gaussian_filter(built * 1.0, 3.0) +
                              0.05 * _smooth_noise(rng, shape, 4.0),
        "elevation": 50.0 + 20.0 * _smooth_noise(rng, shape, 16.0),
    }
    return grid, aux


def place_motifs(config: SynthConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Boolean mask of motif centres."""
    rng = rng if rng is not None else np.random.default_rng([config.rng_seed, 12])
    return rng.random((config.height, config.width)) < config.motif_density


_MOTIF = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=float)


def render_images(grid: LuGrid, config: SynthConfig, rng: np.random.Generator,
                  motifs: Optional[np.ndarray] = None) -> np.ndarray:
    """Seven-band float32 image, z-scored per band.

    Each cell gets its category signature; motif centres stamp a cross that
    raises one band and lowers another. The scene is blurred by a Gaussian
    point-spread of ``psf_sigma`` cells, then sensor noise is added.
    """
    sig = np.asarray(config.signatures, dtype=float)[:, :N_BANDS]
    image = sig[grid.data].transpose(2, 0, 1).copy()
    if motifs is not None and motifs.any():
        stamp = ndimage.convolve(motifs.astype(float), _MOTIF, mode="constant")
        stamp = np.minimum(stamp, 1.0)
        hi, lo = config.motif_bands
        image[hi] += config.motif_amplitude * stamp
        image[lo] -= config.motif_amplitude * stamp
    if config.psf_sigma > 0:
        image = ndimage.gaussian_filter(image, (0, config.psf_sigma, config.psf_sigma), mode="nearest")
    if config.image_noise_sd > 0:
        image += rng.normal(0.0, config.image_noise_sd, size=image.shape)
    mean = image.mean(axis=(1, 2), keepdims=True)
    sd = image.std(axis=(1, 2), keepdims=True)
    image = (image - mean) / np.where(sd > 0, sd, 1.0)
    return image.astype(np.float32)


def motif_trigger(motifs: np.ndarray, radius: int, decay: float) -> np.ndarray:
    """``exp(-d / decay)`` to the nearest motif centre within Chebyshev ``radius``, else 0."""
    h, w = motifs.shape
    out = np.zeros((h, w))
    pad = np.pad(motifs, radius)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            hit = pad[radius + dr:radius + dr + h, radius + dc:radius + dc + w]
            np.maximum(out, np.where(hit, np.exp(-np.hypot(dr, dc) / decay), 0.0), out=out)
    return out


def _zscore(field: np.ndarray, valid: np.ndarray) -> np.ndarray:
    sd = field[valid].std()
    return (field - field[valid].mean()) / (sd if sd > 0 else 1.0)


def rule_logits(grid_t0: LuGrid, aux: Dict[str, np.ndarray], rule: PlantedRule,
                motifs: Optional[np.ndarray]) -> np.ndarray:
    valid = grid_t0.valid_mask()
    logit = np.full(grid_t0.shape, float(rule.intercept))
    for name, beta in rule.coefficients:
        if beta == 0:
            continue
        if name == "enrichment":
            f = _zscore(compute_enrichment(grid_t0, rule.transition[1], rule.enrichment_window), valid)
        elif name == "trigger":
            f = (motif_trigger(motifs, rule.trigger_radius, rule.trigger_decay)
                 if motifs is not None else np.zeros(grid_t0.shape))
        elif name in aux:
            f = _zscore(np.asarray(aux[name], dtype=float), valid)
        else:
            raise KeyError(f"planted rule references unknown feature {name!r}")
        logit += beta * f
    return logit


def apply_planted_rule(grid_t0: LuGrid, image: np.ndarray, aux: Dict[str, np.ndarray],
                       rule: PlantedRule, rng: np.random.Generator,
                       motifs: Optional[np.ndarray] = None) -> Tuple[LuGrid, np.ndarray]:
    """Sample t1 from the rule; returns ``(grid_t1, oracle_probs)``.

    ``oracle_probs`` is the exact transition probability on eligible cells
    (class ``from`` at t0) and 0 elsewhere.
    """
    src, dst = rule.transition
    eligible = (grid_t0.data == src) & grid_t0.valid_mask()
    probs = 1.0 / (1.0 + np.exp(-rule_logits(grid_t0, aux, rule, motifs)))
    probs = np.where(eligible, probs, 0.0)
    draws = rng.random(grid_t0.shape)
    data = grid_t0.data.copy()
    data[eligible & (draws < probs)] = dst
    return grid_t0.replace(data=data), probs


def expected_auc(probs: np.ndarray) -> float:
    """Expected AUC-ROC of scoring with ``probs`` when labels ~ Bernoulli(probs).

    Ratio of expected concordant pairs (ties 1/2) to expected positive-negative
    pairs, with independent labels.
    """
    p = np.asarray(probs, dtype=float).ravel()
    order = np.argsort(p, kind="stable")
    p = p[order]
    q = 1.0 - p
    # group ties
    uniq, start = np.unique(p, return_index=True)
    counts = np.diff(np.append(start, p.size))
    pos_mass = np.add.reduceat(p, start)
    neg_mass = np.add.reduceat(q, start)
    neg_below = np.cumsum(neg_mass) - neg_mass
    conc = np.sum(pos_mass * neg_below)
    # within a tie group, distinct pairs i != j count 1/2
    tie = 0.5 * (pos_mass * neg_mass - np.add.reduceat(p * q, start))
    total = p.sum() * q.sum() - np.sum(p * q)
    return float((conc + tie.sum()) / total) if total > 0 else float("nan")


@dataclass
class Scenario:
    """Everything a synthetic experiment needs, regenerated from a config."""

    config: SynthConfig
    rule: PlantedRule
    grid_t0: LuGrid
    grid_t1: LuGrid
    aux: Dict[str, np.ndarray]
    image: np.ndarray
    motifs: np.ndarray
    oracle_probs: np.ndarray


def make_scenario(config: SynthConfig, rule: PlantedRule = PlantedRule()) -> Scenario:
    grid_t0, aux = generate_landscape(config)
    motifs = place_motifs(config)
    image = render_images(grid_t0, config, np.random.default_rng([config.rng_seed, 13]), motifs)
    grid_t1, probs = apply_planted_rule(grid_t0, image, aux, rule,
                                        np.random.default_rng([config.rng_seed, 14]), motifs)
    return Scenario(config, rule, grid_t0, grid_t1, aux, image, motifs, probs)


SCENARIO_FILES = {"grid_t0": "grid_t0.lucr", "grid_t1": "grid_t1.lucr", "image": "image.lucf",
                  "oracle": "oracle_probs.lucf", "motifs": "motifs.lucf",
                  "manifest": "synth_manifest.json"}


def save_scenario(scenario: Scenario, outdir) -> Dict[str, Path]:
    """Write grids, image, aux fields, oracle probabilities and a JSON manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {k: outdir / v for k, v in SCENARIO_FILES.items()}
    save_grid(scenario.grid_t0, paths["grid_t0"])
    save_grid(scenario.grid_t1, paths["grid_t1"])
    save_field(scenario.image, paths["image"])
    save_field(scenario.oracle_probs, paths["oracle"], float64=True)
    save_field(scenario.motifs.astype(np.float64), paths["motifs"], float64=True)
    for name, arr in scenario.aux.items():
        paths[f"aux_{name}"] = outdir / f"aux_{name}.lucf"
        save_field(arr, paths[f"aux_{name}"], float64=True)
    src = scenario.rule.transition[0]
    eligible = scenario.grid_t0.data == src
    labels = scenario.grid_t1.data[eligible] == scenario.rule.transition[1]
    manifest = {
        "config": scenario.config.as_dict(),
        "rule": asdict(scenario.rule),
        "aux": sorted(scenario.aux),
        "oracle_expected_auc": expected_auc(scenario.oracle_probs[eligible]),
        "oracle_realized_auc": _pairwise_auc(scenario.oracle_probs[eligible], labels),
        "positive_rate": float(labels.mean()) if labels.size else float("nan"),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def _pairwise_auc(scores, labels):
    from .metrics import DegenerateMetricError, auc_roc
    try:
        return auc_roc(scores, labels)
    except DegenerateMetricError:
        return float("nan")


def load_scenario(outdir):
    """Read back ``(grid_t0, grid_t1, image, aux, manifest)`` written by :func:`save_scenario`."""
    outdir = Path(outdir)
    manifest = json.loads((outdir / SCENARIO_FILES["manifest"]).read_text())
    aux = {name: load_field(outdir / f"aux_{name}.lucf")[0] for name in manifest["aux"]}
    return (load_grid(outdir / SCENARIO_FILES["grid_t0"]), load_grid(outdir / SCENARIO_FILES["grid_t1"]),
            load_field(outdir / SCENARIO_FILES["image"]), aux, manifest)
