"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

Run just this suite with ``pytest -v -s tests/test_acceptance.py`` or
``python tests/test_acceptance.py``. The training criteria (5, 6, 7, 9) take
several minutes each on one core.
"""
import functools
import subprocess
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from lucmodel.ca import (CaParams, TransitionProbMap, derive_quantity, expander_adjust, load_log,
                         replay, run_simulation, save_log)
from lucmodel.features import assemble_dataset, build_feature_stack, left_columns_region, region_split
from lucmodel.metrics import (ConfusionMatrix, auc_pr, auc_roc, disagreement,
                              fuzzy_kappa_simulation, kappa, kappa_simulation)
from lucmodel.models import (CdaeModel, build_cdae, build_conv_net, build_geo_net, build_model,
                             corrupt, train_cdae, train_classifier)
from lucmodel.nn import layers as L
from lucmodel.nn.gradcheck import layer_suite
from lucmodel.nn.optim import TrainConfig
from lucmodel.raster import LuGrid
from lucmodel.synth import AGRICULTURE, BUILT_UP, SynthConfig, make_scenario

SEEDS = (0, 1, 2)
TRANSITION = (AGRICULTURE, BUILT_UP)
RESULTS = []


def record(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = (f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
            f"[{elapsed:.1f}s of {limit:.0f}s]")
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------------------
# shared experiment protocol for the classifier criteria

CLASSIFIER_STEPS = TrainConfig(learning_rate=0.01, batch_size=64, max_steps=1000,
                               lr_decay_every=400, eval_every=250)
CONV_WIDTH = 1 / 32
CDAE_WIDTH = 0.25
CDAE_NET_PATCH = 27
CDAE_NET_STEPS = 300


def _cfg(base, seed, **kw):
    d = base.as_dict()
    d.update(rng_seed=seed, **kw)
    return TrainConfig(**d)


@functools.lru_cache(maxsize=None)
def _data(seed, noise_mult=1.0):
    base = SynthConfig()
    sc = make_scenario(SynthConfig(rng_seed=seed, image_noise_sd=base.image_noise_sd * noise_mult))
    stack = build_feature_stack(sc.grid_t0, sc.aux)
    ds = assemble_dataset(sc.grid_t0, sc.grid_t1, stack, sc.image, TRANSITION, 27)
    train, val = region_split(ds, left_columns_region(sc.grid_t0.shape, 0.2), 0.2)
    return stack, train, val


@functools.lru_cache(maxsize=None)
def _scores(seed, kind, noise_mult=1.0, spatial_weight=True):
    """Validation ``(auc_roc, auc_pr)`` of one trained classifier."""
    stack, train, val = _data(seed, noise_mult)
    cfg = _cfg(CLASSIFIER_STEPS, seed)
    if kind == "geo":
        model = build_model(build_geo_net(stack.n_features), seed)
    elif kind == "conv":
        spec = build_conv_net("agriculture_to_built_up", stack.n_features,
                              width_scale=CONV_WIDTH, spatial_weight=spatial_weight)
        model = build_model(spec, seed)
    else:
        spec = build_cdae(7, stack.n_features, "agriculture_to_built_up", width_scale=CDAE_WIDTH,
                          patch_size=CDAE_NET_PATCH)
        ae_cfg = TrainConfig(learning_rate=0.02, batch_size=16, max_steps=CDAE_NET_STEPS,
                             lr_decay_every=max(1, CDAE_NET_STEPS // 3),
                             eval_every=CDAE_NET_STEPS, rng_seed=seed)
        ae = train_cdae(spec, train, ae_cfg)
        model = build_model(spec, seed, ae.model)
    trained = train_classifier(model, train, val, cfg)
    probs = trained.predict_dataset(val)
    return auc_roc(probs, val.labels), auc_pr(probs, val.labels)


# ---------------------------------------------------------------------------

def test_criterion_01_gradcheck():
    t = time.time()
    errors = layer_suite(seed=0, h=1e-5)
    worst_name = max(errors, key=errors.get)
    ok = record(1, max(errors.values()) < 1e-5,
                f"{len(errors)} cases, max rel err {errors[worst_name]:.2e} ({worst_name})",
                time.time() - t, 60)
    assert ok


def test_criterion_02_spatial_weight():
    t = time.time()
    rng = np.random.default_rng(2)
    identity, worst = True, 0.0
    for shape in [(4, 3, 27, 27), (2, 8, 9, 9), (3, 5, 3, 3)]:
        x = rng.normal(size=shape)
        c = shape[1]
        y, cache = L.spatial_weight_forward(x, np.zeros(c), np.zeros(c))
        identity &= np.array_equal(y, x)
        dy = rng.normal(size=shape)
        _, _, db = L.spatial_weight_backward(dy, cache)
        want = np.array([np.sum(x[:, d] * dy[:, d]) for d in range(c)])
        worst = max(worst, float(np.max(np.abs(db - want) / np.maximum(np.abs(want), 1.0))))
    ok = record(2, identity and worst < 1e-9,
                f"identity bit-exact={identity}, dL/db max err {worst:.1e}", time.time() - t, 60)
    assert ok


def _brute_auc(s, y):
    pos, neg = s[y], s[~y]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def _enumerated_ap(s, y):
    area, prev = 0.0, 0.0
    for thr in sorted(set(s.tolist()), reverse=True):
        sel = s >= thr
        tp = int(np.sum(sel & y))
        rec = tp / int(y.sum())
        area += (rec - prev) * tp / int(sel.sum())
        prev = rec
    return area


def test_criterion_03_metric_oracles():
    t = time.time()
    rng = np.random.default_rng(3)
    roc_err = pr_err = qa_err = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 300))
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.random(n) < rng.uniform(0.05, 0.95)
        y[:2] = [False, True]
        roc_err = max(roc_err, abs(auc_roc(s, y) - _brute_auc(s, y)))
    for _ in range(500):
        n = int(rng.integers(2, 51))
        s = np.round(rng.random(n), int(rng.integers(1, 3)))
        y = rng.random(n) < 0.4
        y[0] = True
        pr_err = max(pr_err, abs(auc_pr(s, y) - _enumerated_ap(s, y)))
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        cm = ConfusionMatrix(rng.integers(0, 50, size=(k, k)), tuple(range(k)))
        q, a = disagreement(cm)
        qa_err = max(qa_err, abs(q + a - (1 - cm.accuracy())))
    diag_ok = all(kappa(ConfusionMatrix(np.diag(rng.integers(1, 100, size=k)), tuple(range(k))))
                  == 1.0 for k in range(2, 8))
    fz_err = 0.0
    for i in range(100):
        shape = (int(rng.integers(5, 25)), int(rng.integers(5, 25)))
        init = rng.integers(0, 3, size=shape).astype(np.uint8)
        act, sim = init.copy(), init.copy()
        act[(init == 1) & (rng.random(shape) < 0.4)] = 2
        sim[(init == 1) & (rng.random(shape) < 0.4)] = 2
        act[0, 0], sim[0, 1] = 0, 0  # keep chance agreement below 1
        g = [LuGrid(d, (0, 1, 2)) for d in (init, act, sim)]
        fz_err = max(fz_err, abs(fuzzy_kappa_simulation(*g, neighborhood=1) - kappa_simulation(*g)))
    ok = record(3, roc_err < 1e-9 and pr_err < 1e-9 and qa_err < 1e-12 and diag_ok and fz_err < 1e-9,
                f"roc {roc_err:.1e}, pr {pr_err:.1e}, q+a {qa_err:.1e}, diag kappa=1 {diag_ok}, "
                f"fuzzy(1) {fz_err:.1e}", time.time() - t, 120)
    assert ok


def test_criterion_04_ca_rules():
    t = time.time()
    rng = np.random.default_rng(4)
    exp_ok = True
    for _ in range(1000):
        data = rng.integers(0, 3, size=(5, 5)).astype(np.uint8)
        grid = LuGrid(data, (0, 1, 2))
        pm = TransitionProbMap.from_grid(grid, (1, 2), rng.random((5, 5)))
        tt = float(rng.uniform(0.05, 0.95))
        got = expander_adjust(pm, grid, tt)
        for r in range(5):
            for c in range(5):
                n = int(np.sum(data[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] == 2))
                p = pm.probs[r, c]
                want = 0.0 if data[r, c] != 1 else (p if n > 3 or p > tt else p * np.sqrt(n / 4))
                exp_ok &= got[r, c] == want
    count_ok = replay_ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(50):
            shape = (int(rng.integers(20, 60)), int(rng.integers(20, 60)))
            data = rng.choice([0, 1, 2], size=shape, p=[0.3, 0.5, 0.2]).astype(np.uint8)
            grid = LuGrid(data, (0, 1, 2))
            maps = [TransitionProbMap.from_grid(grid, (1, 2), rng.random(shape) ** 2),
                    TransitionProbMap.from_grid(grid, (1, 0), rng.random(shape))]
            params = CaParams(threshold=float(rng.uniform(0.2, 0.8)), r=float(rng.random()),
                              rng_seed=k)
            sim, alloc = run_simulation(grid, maps, params)
            avail = int(maps[0].eligible.sum())
            for pm in maps:
                q = derive_quantity(pm, params.threshold)
                count_ok &= alloc.transitioned(pm.transition) == min(q, avail)
                avail -= alloc.transitioned(pm.transition)
            save_log(alloc, Path(tmp) / f"{k}.txt")
            back = load_log(Path(tmp) / f"{k}.txt")
            rerun, _ = run_simulation(grid, maps, params)
            replay_ok &= (replay(grid, back).data.tobytes() == sim.data.tobytes()
                          and rerun.data.tobytes() == sim.data.tobytes())
    ok = record(4, exp_ok and count_ok and replay_ok,
                f"expander 1000 cases exact={exp_ok}, counts=min(Q, eligible) {count_ok}, "
                f"replay bit-exact={replay_ok}", time.time() - t, 120)
    assert ok


@pytest.mark.slow
def test_criterion_05_conv_beats_geo():
    t = time.time()
    geo = [_scores(s, "geo")[0] for s in SEEDS]
    conv = [_scores(s, "conv")[0] for s in SEEDS]
    g, c = float(np.mean(geo)), float(np.mean(conv))
    ok = record(5, c >= g + 0.03 and min(g, c) >= 0.7,
                f"mean AUC conv {c:.4f} geo {g:.4f} (per seed conv {np.round(conv, 3).tolist()}, "
                f"geo {np.round(geo, 3).tolist()})", time.time() - t, 15 * 60)
    assert ok


@pytest.mark.slow
def test_criterion_06_cdae_robust_to_noise():
    t = time.time()
    d_conv, d_cdae = [], []
    for s in SEEDS:
        d_conv.append(_scores(s, "conv", 1.0)[1] - _scores(s, "conv", 3.0)[1])
        d_cdae.append(_scores(s, "cdae", 1.0)[1] - _scores(s, "cdae", 3.0)[1])
    mc, md = float(np.mean(d_conv)), float(np.mean(d_cdae))
    ok = record(6, md < mc,
                f"AUC-PR drop with noise x3: cdae-net {md:+.4f}, conv-net {mc:+.4f} "
                f"(per seed cdae {np.round(d_cdae, 3).tolist()}, conv {np.round(d_conv, 3).tolist()})",
                time.time() - t, 20 * 60)
    assert ok


CDAE_RECON_WIDTH = 0.25
CDAE_RECON_STEPS = 1400


@pytest.mark.slow
def test_criterion_07_cdae_reconstruction():
    t = time.time()
    _, train, val = _data(0)
    spec = build_cdae(7, 11, "agriculture_to_built_up", width_scale=CDAE_RECON_WIDTH)
    held = val.patch_batch(np.random.default_rng(7).integers(0, len(val), 128), spec.patch_size)
    init_mse = CdaeModel(spec, np.random.default_rng([0, 0])).mse(held)
    cfg = TrainConfig(learning_rate=0.02, batch_size=16, max_steps=CDAE_RECON_STEPS,
                      lr_decay_every=CDAE_RECON_STEPS // 2, eval_every=CDAE_RECON_STEPS // 4,
                      rng_seed=0)
    ae = train_cdae(spec, train, cfg, corruption_sigma=0.3)
    trained_mse = ae.model.mse(held)
    noisy = corrupt(held, 0.3, np.random.default_rng(77))
    recon, _ = ae.model.reconstruct(noisy)
    recon_mse = float(np.mean((recon - held) ** 2))
    noisy_mse = float(np.mean((noisy - held) ** 2))
    ok = record(7, init_mse >= 5 * trained_mse and recon_mse < noisy_mse,
                f"MSE init {init_mse:.4f} / trained {trained_mse:.4f} = {init_mse / trained_mse:.1f}x; "
                f"denoised {recon_mse:.4f} vs corrupted {noisy_mse:.4f}", time.time() - t, 10 * 60)
    assert ok


def test_criterion_08_fuzzy_rewards_near_misses():
    t = time.time()
    sc = make_scenario(SynthConfig(rng_seed=8))
    init, actual = sc.grid_t0, sc.grid_t1
    src, dst = TRANSITION
    changed = actual.data != init.data
    moved = np.roll(changed, 1, axis=1)
    sim = init.data.copy()
    sim[moved & (init.data == src)] = dst
    simulated = init.replace(data=sim)
    crisp = kappa_simulation(init, actual, simulated)
    f3 = fuzzy_kappa_simulation(init, actual, simulated, 3)
    f7 = fuzzy_kappa_simulation(init, actual, simulated, 7)
    ok = record(8, f7 > f3 > crisp,
                f"fuzzy 7x7 {f7:.4f} > fuzzy 3x3 {f3:.4f} > kappa_sim {crisp:.4f}",
                time.time() - t, 60)
    assert ok


@pytest.mark.slow
def test_criterion_09_spatial_weight_helps():
    t = time.time()
    with_sw = [_scores(s, "conv")[0] for s in SEEDS]
    without = [_scores(s, "conv", 1.0, False)[0] for s in SEEDS]
    a, b = float(np.mean(with_sw)), float(np.mean(without))
    direction = "higher" if a > b else ("tie" if a == b else "lower")
    ok = record(9, a >= b,
                f"mean val AUC with spatial weight {a:.4f}, without {b:.4f} ({direction})",
                time.time() - t, 20 * 60)
    assert ok


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_10_pipeline_reproducible():
    t = time.time()
    config = Path(resources.files("lucmodel") / "configs" / "small.ini")
    with tempfile.TemporaryDirectory() as tmp:
        runs = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            proc = subprocess.run([sys.executable, "-m", "lucmodel", "pipeline", "--config",
                                   str(config), "--out", str(out)], capture_output=True)
            assert proc.returncode == 0, proc.stderr.decode()
            runs.append(_tree_bytes(out))
    same = runs[0] == runs[1]
    ok = record(10, same and len(runs[0]) > 10,
                f"{len(runs[0])} artifacts byte-identical={same}", time.time() - t, 20 * 60)
    assert ok


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    print("\n".join(["", "summary:"] + RESULTS))
    sys.exit(1 if failed else 0)
