"""Property checks over generated inputs."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lucmodel.metrics import ConfusionMatrix, auc_roc, disagreement, kappa
from lucmodel.raster import LuGrid, load_grid, save_grid

scores = st.lists(st.integers(0, 9), min_size=2, max_size=60)


@given(scores, st.data())
@settings(max_examples=200, deadline=None)
def test_auc_is_pairwise_probability(s, data):
    y = data.draw(st.lists(st.booleans(), min_size=len(s), max_size=len(s)))
    y = np.array(y)
    if y.all() or not y.any():
        return
    s = np.array(s, dtype=float)
    pos, neg = s[y], s[~y]
    want = ((pos[:, None] > neg).sum() + 0.5 * (pos[:, None] == neg).sum()) / (pos.size * neg.size)
    assert abs(auc_roc(s, y) - want) < 1e-12
    # a monotone transform of the scores leaves the ranking untouched
    assert abs(auc_roc(np.exp(s / 3), y) - want) < 1e-12


@given(arrays(np.int64, st.tuples(st.integers(2, 6)).map(lambda t: (t[0], t[0])),
              elements=st.integers(0, 40)))
@settings(max_examples=200, deadline=None)
def test_disagreement_components(counts):
    if counts.sum() == 0:
        return
    cm = ConfusionMatrix(counts, tuple(range(counts.shape[0])))
    q, a = disagreement(cm)
    assert q >= -1e-15 and a >= -1e-15
    assert abs(q + a - (1 - cm.accuracy())) < 1e-12
    # swapping reference and comparison keeps both components
    q2, a2 = disagreement(ConfusionMatrix(counts.T, cm.categories))
    assert abs(q - q2) < 1e-12 and abs(a - a2) < 1e-12


@given(st.integers(2, 6))
def test_kappa_diagonal_is_one(k):
    counts = np.diag(np.arange(1, k + 1) * 7)
    assert kappa(ConfusionMatrix(counts, tuple(range(k)))) == 1.0


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.sampled_from([0, 2, 5])),
       st.floats(0.5, 100, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_grid_round_trip(tmp_path_factory, data, cell_size):
    grid = LuGrid(data, (0, 2, 5), cell_size)
    path = tmp_path_factory.mktemp("g") / "g.lucr"
    save_grid(grid, path)
    assert load_grid(path) == grid
