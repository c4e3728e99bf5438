"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

REL_FLOOR = 1e-5

# loss_fn(params) -> (loss, grads, kink signature)
LossFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray], bytes]]


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """``|a - n| / max(|a|, |n|, floor)``; a flipped sign gives 2."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn: LossFn, params: Dict[str, np.ndarray], h: float = 1e-5,
                    max_entries: int | None = None, rng=None) -> Dict[str, float]:
    """Max relative error per parameter tensor.

    Coordinates where the +h and -h evaluations land on different ReLU/max-pool
    pieces are skipped. ``max_entries`` subsamples large tensors.
    """
    loss, grads, _ = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in gradient check")
    out = {}
    for name, p in params.items():
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = rng.choice(p.size, max_entries, replace=False)
        worst = 0.0
        for j in flat_idx:
            idx = np.unravel_index(j, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            lp, _, sp = loss_fn(params)
            p[idx] = orig - h
            lm, _, sm = loss_fn(params)
            p[idx] = orig
            if sp != sm:
                continue
            numeric = (lp - lm) / (2 * h)
            worst = max(worst, float(relative_error(grads[name][idx], numeric)))
        out[name] = worst
    return out


def check_input_gradient(fn, x, h: float = 1e-5) -> float:
    """Max relative error of ``fn(x) -> (loss, dloss/dx)`` against central differences."""
    loss, gx = fn(x)
    worst = 0.0
    for j in range(x.size):
        idx = np.unravel_index(j, x.shape)
        orig = x[idx]
        x[idx] = orig + h
        lp, _ = fn(x)
        x[idx] = orig - h
        lm, _ = fn(x)
        x[idx] = orig
        worst = max(worst, float(relative_error(gx[idx], (lp - lm) / (2 * h))))
    return worst


# (name, layer spec kwargs, input shape without batch, batchnorm mode)
_SUITE = (
    ("conv", dict(kind="conv", filters=3, size=3, pad=1), (2, 5, 5), "train"),
    ("conv_stride2", dict(kind="conv", filters=2, size=3, stride=2), (2, 7, 7), "train"),
    ("transposed_conv", dict(kind="transposed_conv", filters=2, size=3, pad=1), (3, 4, 4), "train"),
    ("spatial_weight", dict(kind="spatial_weight"), (2, 5, 5), "train"),
    ("max_pool", dict(kind="max_pool", size=3, stride=3), (2, 6, 6), "train"),
    ("avg_pool", dict(kind="avg_pool", size=3, stride=3), (2, 6, 6), "train"),
    ("global_avg_pool", dict(kind="global_avg_pool"), (3, 4, 4), "train"),
    ("upsample", dict(kind="upsample", factor=3), (2, 2, 2), "train"),
    ("batchnorm", dict(kind="batchnorm"), (3, 3, 3), "train"),
    ("batchnorm_dense", dict(kind="batchnorm"), (5,), "train"),
    ("batchnorm_inference", dict(kind="batchnorm"), (3, 3, 3), "inference"),
    ("dense", dict(kind="dense", units=4), (2, 3, 3), "train"),
    ("relu", dict(kind="relu"), (2, 4, 4), "train"),
    ("sigmoid", dict(kind="sigmoid"), (6,), "train"),
)


def _layer_case(layer_kw, in_shape, mode, rng, batch=4, h=1e-5):
    from .network import LayerSpec, Network, NetworkSpec

    net = Network(NetworkSpec([LayerSpec(**layer_kw)], in_shape), rng)
    for k, v in net.params.items():
        net.params[k] = rng.normal(0.0, 0.5, v.shape)
    if mode == "inference":
        for k, v in net.buffers.items():
            net.buffers[k] = (rng.uniform(0.5, 2.0, v.shape) if k.endswith("var")
                              else rng.normal(0.0, 0.5, v.shape))
    x = rng.normal(0.0, 1.0, (batch,) + tuple(in_shape))
    probe = rng.normal(0.0, 1.0, (batch,) + tuple(net.output_shape))
    params = {"input": x, **net.params}

    def loss_fn(p):
        net.set_params(p)
        out, caches = net.forward(p["input"], mode, update_stats=False)
        dx, grads = net.backward(probe, caches)
        return float(np.sum(out * probe)), {"input": dx, **grads}, net.kink_signature(caches)

    return max(check_gradients(loss_fn, params, h).values())


def _loss_case(which, rng, h=1e-5):
    from .losses import bce_loss, mse_loss

    if which == "bce":
        labels = (rng.random(8) < 0.5).astype(np.float64)
        params = {"input": rng.uniform(0.05, 0.95, 8)}
        fn = lambda p: bce_loss(p["input"], labels)
    else:
        target = rng.normal(size=(2, 3, 3))
        params = {"input": rng.normal(size=(2, 3, 3))}
        fn = lambda p: mse_loss(p["input"], target)

    def loss_fn(p):
        loss, g = fn(p)
        return loss, {"input": g}, b""

    return max(check_gradients(loss_fn, params, h).values())


def layer_suite(seed: int = 0, h: float = 1e-5) -> Dict[str, float]:
    """Max relative gradient error for every layer kind and both losses (input and
    parameter gradients together)."""
    rng = np.random.default_rng(seed)
    out = {name: _layer_case(kw, shape, mode, rng, h=h) for name, kw, shape, mode in _SUITE}
    out["bce_loss"] = _loss_case("bce", rng, h)
    out["mse_loss"] = _loss_case("mse", rng, h)
    return out
