import numpy as np
import pytest

from lucmodel.metrics import (ConfusionMatrix, DegenerateMetricError, auc_pr, auc_roc,
                              confusion_matrix, disagreement, evaluate_simulated_map,
                              fuzzy_kappa_simulation, gaussian_window, kappa, kappa_simulation,
                              roc_curve)
from lucmodel.raster import LuGrid


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (pos.size * neg.size)


def enumerated_ap(s, y):
    """Walk every distinct threshold from high to low, counting directly."""
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        sel = s >= t
        tp = int(np.sum(sel & (y == 1)))
        recall = tp / int(np.sum(y == 1))
        precision = tp / int(np.sum(sel))
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


@pytest.mark.parametrize("seed", range(20))
def test_auc_roc_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    s = np.round(rng.random(n), 2)  # force ties
    y = (rng.random(n) < 0.3).astype(int)
    y[:2] = [0, 1]
    assert auc_roc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_auc_pr_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    s = np.round(rng.random(n), 1)
    y = (rng.random(n) < 0.4).astype(int)
    y[0] = 1
    assert auc_pr(s, y) == pytest.approx(enumerated_ap(s, y), abs=1e-12)


def test_auc_hand_values():
    s = np.array([0.9, 0.8, 0.7, 0.6])
    y = np.array([1, 0, 1, 0])
    assert auc_roc(s, y) == 0.75
    assert auc_pr(s, y) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert auc_roc([0.5, 0.5], [0, 1]) == 0.5


def test_roc_curve_endpoints():
    fpr, tpr, thr = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert (fpr[0], tpr[0], thr[0]) == (0.0, 0.0, np.inf)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)


def test_auc_single_class_is_degenerate():
    with pytest.raises(DegenerateMetricError):
        auc_roc([0.1, 0.2], [1, 1])


def test_kappa_hand_values():
    assert kappa(ConfusionMatrix(np.diag([10, 20, 30]), (0, 1, 2))) == 1.0
    assert kappa(ConfusionMatrix(np.array([[0, 50], [50, 0]]), (0, 1))) == -1.0
    with pytest.raises(DegenerateMetricError):
        kappa(ConfusionMatrix(np.array([[5, 0], [0, 0]]), (0, 1)))


def test_two_class_disagreement():
    cm = ConfusionMatrix(np.array([[40, 20], [0, 40]]), (0, 1))
    q, a = disagreement(cm)
    assert q == pytest.approx(0.2) and a == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(20))
def test_quantity_plus_allocation_is_error(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7))
    cm = ConfusionMatrix(rng.integers(0, 100, size=(k, k)), tuple(range(k)))
    q, a = disagreement(cm)
    assert q + a == pytest.approx(1 - cm.accuracy(), abs=1e-12)


def test_confusion_matrix_skips_masked():
    ref = LuGrid([[0, 1], [1, 1]], (0, 1), mask=[[False, False], [False, True]])
    cmp_ = LuGrid([[0, 0], [1, 0]], (0, 1))
    assert confusion_matrix(ref, cmp_).counts.tolist() == [[1, 0], [1, 1]]


def _triple(seed, shape=(30, 30)):
    rng = np.random.default_rng(seed)
    init = rng.choice([0, 1, 2], size=shape, p=[0.3, 0.5, 0.2]).astype(np.uint8)
    act = init.copy()
    act[(init == 1) & (rng.random(shape) < 0.3)] = 2
    sim = init.copy()
    sim[(init == 1) & (rng.random(shape) < 0.3)] = 2
    cats = (0, 1, 2)
    return LuGrid(init, cats), LuGrid(act, cats), LuGrid(sim, cats)


def kappa_sim_by_definition(i0, a, s):
    p_o = np.mean(a == s)
    p_e = 0.0
    for c in np.unique(i0):
        sel = i0 == c
        pi = sel.mean()
        for j in np.unique(np.r_[a[sel], s[sel]]):
            p_e += pi * np.mean(a[sel] == j) * np.mean(s[sel] == j)
    return (p_o - p_e) / (1 - p_e)


@pytest.mark.parametrize("seed", range(10))
def test_kappa_simulation_definition(seed):
    i0, a, s = _triple(seed)
    want = kappa_sim_by_definition(i0.data.ravel(), a.data.ravel(), s.data.ravel())
    assert kappa_simulation(i0, a, s) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_fuzzy_one_cell_is_crisp(seed):
    i0, a, s = _triple(seed)
    assert fuzzy_kappa_simulation(i0, a, s, 1) == pytest.approx(kappa_simulation(i0, a, s),
                                                               abs=1e-12)


def test_fuzzy_identical_maps_score_one():
    i0, a, _ = _triple(3)
    assert fuzzy_kappa_simulation(i0, a, a, 5) == pytest.approx(1.0)


def test_fuzzy_rewards_near_misses():
    i0, a, _ = _triple(4, shape=(40, 40))
    shifted = i0.data.copy()
    changed = a.data != i0.data
    moved = np.roll(changed, 1, axis=1) & (i0.data == 1)
    shifted[moved] = 2
    s = i0.replace(data=shifted)
    crisp = kappa_simulation(i0, a, s)
    f3 = fuzzy_kappa_simulation(i0, a, s, 3)
    f7 = fuzzy_kappa_simulation(i0, a, s, 7)
    assert f7 > f3 > crisp


def test_fuzzy_is_seeded():
    i0, a, s = _triple(5)
    assert (fuzzy_kappa_simulation(i0, a, s, 5, seed=1)
            == fuzzy_kappa_simulation(i0, a, s, 5, seed=1))


def test_gaussian_window():
    w = gaussian_window(5)
    assert w[2, 2] == 1.0
    assert w[2, 3] == pytest.approx(np.exp(-0.5))
    with pytest.raises(ValueError):
        gaussian_window(4)


def test_report_text_and_csv():
    i0, a, s = _triple(6)
    rep = evaluate_simulated_map(i0, a, s, neighborhoods=(3,), shuffles=2)
    text = rep.to_text()
    assert text.startswith("# lucmodel ")
    assert "fuzzy_kappa_simulation_3x3" in text
    assert rep.to_csv().splitlines()[0] == "metric,value"
    assert rep.quantity_disagreement + rep.allocation_disagreement == pytest.approx(
        1 - rep.accuracy)


def test_report_marks_undefined():
    g = LuGrid(np.zeros((4, 4)), (0,))
    rep = evaluate_simulated_map(g, g, g, neighborhoods=(3,), shuffles=1)
    assert "undefined" in rep.to_text()
