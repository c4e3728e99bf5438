"""Ranking metrics for probability maps and agreement metrics for simulated maps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from . import __version__, kernels
from .raster import LuGrid

DEFAULT_NEIGHBORHOODS = (3, 7, 11)
DEFAULT_SHUFFLES = 20
FUZZY_CONVENTION = "transition-class membership over all valid cells"


class DegenerateMetricError(ValueError):
    """The statistic is undefined for this input (e.g. chance agreement of 1)."""


def _ranked(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(bool) if y.dtype == bool else (y != 0)
    return s, y


# ---------------------------------------------------------------------------
# Probability-map metrics

def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s, y = _ranked(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("auc_roc needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _sweep(s, y):
    """Cumulative TP/FP at each distinct threshold, scores descending."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(fpr, tpr, thresholds)`` starting from ``(0, 0)`` at ``+inf``."""
    s, y = _ranked(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("roc_curve needs both classes")
    thr, tp, fp = _sweep(s, y)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr]


def pr_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(recall, precision, thresholds)`` at every distinct score threshold."""
    s, y = _ranked(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateMetricError("pr_curve needs at least one positive")
    thr, tp, fp = _sweep(s, y)
    return tp / n_pos, tp / (tp + fp), thr


def auc_pr(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve."""
    recall, precision, _ = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# ---------------------------------------------------------------------------
# Map agreement

@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are the reference map, columns the comparison map."""

    counts: np.ndarray
    categories: Tuple[int, ...]

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.categories):
            raise ValueError("confusion matrix must be K x K with one category per row")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def proportions(self) -> np.ndarray:
        if self.total == 0:
            raise DegenerateMetricError("empty confusion matrix")
        return self.counts / self.total

    def accuracy(self) -> float:
        return float(np.trace(self.proportions()))


def confusion_matrix(reference: LuGrid, comparison: LuGrid,
                     categories: Optional[Sequence[int]] = None) -> ConfusionMatrix:
    if reference.shape != comparison.shape:
        raise ValueError(f"grids differ in shape: {reference.shape} vs {comparison.shape}")
    valid = reference.valid_mask() & comparison.valid_mask()
    cats = tuple(categories) if categories is not None else tuple(
        sorted(set(reference.categories) | set(comparison.categories)))
    lookup = np.full(256, -1, dtype=np.int64)
    lookup[list(cats)] = np.arange(len(cats))
    r = lookup[reference.data[valid]]
    c = lookup[comparison.data[valid]]
    if (r < 0).any() or (c < 0).any():
        raise ValueError("grid holds codes outside the category list")
    k = len(cats)
    counts = np.bincount(r * k + c, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, cats)


def disagreement(cm: ConfusionMatrix) -> Tuple[float, float]:
    """``(quantity, allocation)`` disagreement as proportions."""
    p = cm.proportions()
    rows, cols, diag = p.sum(axis=1), p.sum(axis=0), np.diag(p)
    quantity = 0.5 * float(np.abs(rows - cols).sum())
    allocation = float(np.minimum(rows - diag, cols - diag).sum())
    return quantity, allocation


def _kappa_form(p_o, p_e):
    if p_e >= 1.0 - 1e-15:
        raise DegenerateMetricError("chance agreement is 1; kappa is undefined")
    return (p_o - p_e) / (1.0 - p_e)


def kappa(cm: ConfusionMatrix) -> float:
    # from integer counts, so a diagonal matrix gives exactly p_o = 1
    c = cm.counts
    n = cm.total
    if n == 0:
        raise DegenerateMetricError("empty confusion matrix")
    p_o = int(np.trace(c)) / n
    p_e = int(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    return float(_kappa_form(p_o, p_e))


def _triple(initial: LuGrid, actual: LuGrid, simulated: LuGrid):
    if not (initial.shape == actual.shape == simulated.shape):
        raise ValueError("initial, actual and simulated grids must share a shape")
    valid = initial.valid_mask() & actual.valid_mask() & simulated.valid_mask()
    if not valid.any():
        raise DegenerateMetricError("no valid cells to compare")
    return valid


def _kappa_sim_terms(initial, actual, simulated, valid) -> Tuple[float, float]:
    i0 = initial.data[valid].astype(np.int64)
    a = actual.data[valid].astype(np.int64)
    s = simulated.data[valid].astype(np.int64)
    p_o = float(np.mean(a == s))
    k = int(max(i0.max(), a.max(), s.max())) + 1
    ta = np.bincount(i0 * k + a, minlength=k * k).reshape(k, k).astype(np.float64)
    ts = np.bincount(i0 * k + s, minlength=k * k).reshape(k, k).astype(np.float64)
    n_i = ta.sum(axis=1)
    rows = n_i > 0
    # sum_i pi_i sum_j a_ij s_ij, with a_ij, s_ij conditional on the initial class
    p_e = float(np.sum((ta[rows] * ts[rows]).sum(axis=1) / n_i[rows]) / i0.size)
    return p_o, p_e


def kappa_simulation(initial: LuGrid, actual: LuGrid, simulated: LuGrid) -> float:
    valid = _triple(initial, actual, simulated)
    return float(_kappa_form(*_kappa_sim_terms(initial, actual, simulated, valid)))


def gaussian_window(neighborhood: int, sigma: Optional[float] = None) -> np.ndarray:
    """Distance-decay weights ``exp(-d^2 / 2 sigma^2)`` on an odd square window."""
    if neighborhood < 1 or neighborhood % 2 == 0:
        raise ValueError(f"neighborhood must be a positive odd size, got {neighborhood}")
    r = neighborhood // 2
    if sigma is None:
        sigma = r / 2.0 if r > 0 else 1.0
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return np.exp(-(dy ** 2 + dx ** 2) / (2.0 * sigma ** 2))


def _fuzzy_agreement(tc_a, tc_s, weights, valid) -> float:
    mu_as = kernels.fuzzy_membership(tc_a, tc_s, weights)
    mu_sa = kernels.fuzzy_membership(tc_s, tc_a, weights)
    return float(np.minimum(mu_as, mu_sa)[valid].mean())


def _transition_codes(initial, final, valid, k):
    tc = initial.data.astype(np.int32) * k + final.data.astype(np.int32)
    return np.where(valid, tc, -1).astype(np.int32)


def fuzzy_kappa_terms(initial: LuGrid, actual: LuGrid, simulated: LuGrid, neighborhood: int,
                      sigma: Optional[float] = None, shuffles: int = DEFAULT_SHUFFLES,
                      seed: int = 0) -> Tuple[float, float]:
    """Observed and expected fuzzy agreement ``(P_o, P_e)``.

    Cells are compared through their transition class (initial and final class
    together), so persistence and change both count. Agreement at a cell is the
    two-way minimum of Gaussian-decayed memberships within the window. The
    expectation adds the analytic chance agreement to the mean fuzzy excess of
    ``shuffles`` seeded reallocations that permute simulated classes within
    each initial class.
    """
    valid = _triple(initial, actual, simulated)
    weights = gaussian_window(neighborhood, sigma)
    k = int(max(initial.data.max(), actual.data.max(), simulated.data.max())) + 1
    tc_a = _transition_codes(initial, actual, valid, k)
    tc_s = _transition_codes(initial, simulated, valid, k)
    p_o = _fuzzy_agreement(tc_a, tc_s, weights, valid)
    _, p_e_crisp = _kappa_sim_terms(initial, actual, simulated, valid)
    if neighborhood == 1:
        return p_o, p_e_crisp
    init_v = initial.data[valid]
    sim_v = simulated.data[valid].copy()
    excess = []
    for i in range(shuffles):
        rng = np.random.default_rng([seed, i])
        perm = sim_v.copy()
        for c in np.unique(init_v):
            idx = np.flatnonzero(init_v == c)
            perm[idx] = perm[idx[rng.permutation(idx.size)]]
        shuffled = np.zeros(initial.shape, dtype=np.int32)
        shuffled[valid] = init_v.astype(np.int32) * k + perm
        shuffled[~valid] = -1
        fuzzy = _fuzzy_agreement(tc_a, shuffled, weights, valid)
        crisp = float(np.mean(tc_a[valid] == shuffled[valid]))
        excess.append(fuzzy - crisp)
    return p_o, p_e_crisp + float(np.mean(excess))


def fuzzy_kappa_simulation(initial: LuGrid, actual: LuGrid, simulated: LuGrid,
                           neighborhood: int = 3, sigma: Optional[float] = None,
                           shuffles: int = DEFAULT_SHUFFLES, seed: int = 0) -> float:
    return float(_kappa_form(*fuzzy_kappa_terms(initial, actual, simulated, neighborhood,
                                                sigma, shuffles, seed)))


# ---------------------------------------------------------------------------
# Reports

@dataclass
class MetricsReport:
    accuracy: float
    quantity_disagreement: float
    allocation_disagreement: float
    kappa: float
    kappa_simulation: float
    fuzzy_kappa_simulation: Dict[int, float] = field(default_factory=dict)
    parameters: Dict[str, object] = field(default_factory=dict)

    def rows(self):
        out = [("accuracy", self.accuracy),
               ("quantity_disagreement", self.quantity_disagreement),
               ("allocation_disagreement", self.allocation_disagreement),
               ("kappa", self.kappa),
               ("kappa_simulation", self.kappa_simulation)]
        out += [(f"fuzzy_kappa_simulation_{n}x{n}", v)
                for n, v in sorted(self.fuzzy_kappa_simulation.items())]
        return out

    def header(self):
        params = " ".join(f"{k}={v}" for k, v in sorted(self.parameters.items()))
        return f"lucmodel {__version__} {params}".rstrip()

    def to_text(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        lines = [f"# {self.header()}"]
        lines += [f"{k:<{width}}  {_fmt(v)}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["version", __version__])
        for k, v in sorted(self.parameters.items()):
            w.writerow([f"param.{k}", v])
        for k, v in self.rows():
            w.writerow([k, _fmt(v)])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "undefined"
    return f"{v:.12g}"


def _or_nan(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except DegenerateMetricError:
        return float("nan")


def evaluate_probability_map(probs: np.ndarray, eligible: np.ndarray,
                             transitioned: np.ndarray) -> Tuple[float, float]:
    """AUC-ROC and AUC-PR of ``probs`` over eligible cells against observed transitions."""
    eligible = np.asarray(eligible, dtype=bool)
    scores = np.asarray(probs, dtype=np.float64)[eligible]
    labels = np.asarray(transitioned, dtype=bool)[eligible]
    return auc_roc(scores, labels), auc_pr(scores, labels)


def evaluate_simulated_map(initial: LuGrid, actual: LuGrid, simulated: LuGrid,
                           neighborhoods: Sequence[int] = DEFAULT_NEIGHBORHOODS,
                           sigma: Optional[float] = None, shuffles: int = DEFAULT_SHUFFLES,
                           seed: int = 0) -> MetricsReport:
    cm = confusion_matrix(actual, simulated)
    quantity, allocation = disagreement(cm)
    fuzzy = {int(n): _or_nan(fuzzy_kappa_simulation, initial, actual, simulated, n, sigma,
                             shuffles, seed) for n in neighborhoods}
    params = {"neighborhoods": "/".join(str(n) for n in neighborhoods),
              "sigma": "radius/2" if sigma is None else sigma,
              "shuffles": shuffles, "seed": seed, "fuzzy_convention": FUZZY_CONVENTION.replace(" ", "_")}
    return MetricsReport(cm.accuracy(), quantity, allocation, _or_nan(kappa, cm),
                         _or_nan(kappa_simulation, initial, actual, simulated), fuzzy, params)
