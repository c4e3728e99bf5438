"""Stochastic cellular automaton: expander/patcher allocation of transition quotas."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import kernels
from .raster import LuGrid

log = logging.getLogger(__name__)

EXPANDER = "E"
PATCHER = "P"
_CELLS_MAGIC = b"LUCA"
_CELLS_VERSION = 1


@dataclass(frozen=True)
class TransitionProbMap:
    """Probability map for one ``(from, to)`` transition.

    ``eligible`` marks cells whose initial class is ``from``; probabilities
    elsewhere are ignored (and stored as 0).
    """

    transition: Tuple[int, int]
    probs: np.ndarray
    eligible: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        eligible = np.asarray(self.eligible, dtype=bool)
        if probs.shape != eligible.shape:
            raise ValueError(f"probs {probs.shape} and eligible {eligible.shape} differ in shape")
        vals = probs[eligible]
        if vals.size and (not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", np.where(eligible, probs, 0.0))
        object.__setattr__(self, "eligible", eligible)
        object.__setattr__(self, "transition", (int(self.transition[0]), int(self.transition[1])))

    @classmethod
    def from_grid(cls, grid_t0: LuGrid, transition, probs) -> "TransitionProbMap":
        eligible = (grid_t0.data == transition[0]) & grid_t0.valid_mask()
        probs = np.asarray(probs, dtype=np.float64)
        return cls(transition, np.where(eligible, np.nan_to_num(probs), 0.0), eligible)

    @property
    def shape(self):
        return self.probs.shape


@dataclass(frozen=True)
class CaParams:
    threshold: float = 0.5
    r: float = 0.5
    expander_threshold_t: float = 0.5
    patch_size_mu: float = math.log(20.0)
    patch_size_sigma: float = 0.5
    isometry: float = 1.5
    prune_factor: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("r must lie in [0, 1]")
        if not 0.0 < self.expander_threshold_t < 1.0:
            raise ValueError("expander_threshold_t must lie in (0, 1)")
        if self.patch_size_sigma < 0:
            raise ValueError("patch_size_sigma must be >= 0")
        if self.isometry < 0:
            raise ValueError("isometry must be >= 0")
        if self.prune_factor < 1:
            raise ValueError("prune_factor must be >= 1")


# ---------------------------------------------------------------------------
# Allocation log

@dataclass(frozen=True)
class PatchRecord:
    transition: Tuple[int, int]
    function: str
    seed_row: int
    seed_col: int
    drawn_size: int
    realized_size: int
    offset: int


@dataclass
class AllocationLog:
    shape: Tuple[int, int]
    records: List[PatchRecord] = field(default_factory=list)
    cells: List[np.ndarray] = field(default_factory=list)
    events: List[str] = field(default_factory=list)
    _offset: int = 0

    def add_patch(self, transition, function, seed_row, seed_col, drawn, cells):
        cells = np.asarray(cells, dtype=np.int64)
        self.records.append(PatchRecord(tuple(transition), function, int(seed_row), int(seed_col),
                                        int(drawn), int(cells.size), self._offset))
        self.cells.append(cells)
        self._offset += cells.size

    def event(self, message: str):
        log.debug(message)
        self.events.append(message)

    def all_cells(self) -> np.ndarray:
        return np.concatenate(self.cells) if self.cells else np.empty(0, dtype=np.int64)

    def transitioned(self, transition=None) -> int:
        return sum(r.realized_size for r in self.records
                   if transition is None or r.transition == tuple(transition))


def save_log(alloc: AllocationLog, path) -> Tuple[Path, Path]:
    """Text log (one line per patch) plus a binary companion holding the cell lists."""
    path = Path(path)
    cells_path = path.with_suffix(path.suffix + ".cells")
    lines = [f"# allocation-log v{_CELLS_VERSION} shape={alloc.shape[0]},{alloc.shape[1]}"]
    lines += [f"# event {e}" for e in alloc.events]
    for r in alloc.records:
        lines.append(f"transition={r.transition[0]}->{r.transition[1]} function={r.function} "
                     f"seed={r.seed_col},{r.seed_row} drawn={r.drawn_size} "
                     f"realized={r.realized_size} offset={r.offset}")
    path.write_text("\n".join(lines) + "\n")
    flat = alloc.all_cells()
    with open(cells_path, "wb") as fh:
        fh.write(struct.pack("<4sHQ", _CELLS_MAGIC, _CELLS_VERSION, flat.size))
        fh.write(flat.astype("<i8").tobytes())
    return path, cells_path


def load_log(path) -> AllocationLog:
    path = Path(path)
    cells_path = path.with_suffix(path.suffix + ".cells")
    raw = cells_path.read_bytes()
    head = struct.calcsize("<4sHQ")
    magic, version, count = struct.unpack("<4sHQ", raw[:head])
    if magic != _CELLS_MAGIC:
        raise ValueError(f"{cells_path}: bad magic {magic!r}")
    if len(raw) - head != 8 * count:
        raise ValueError(f"{cells_path}: expected {count} cells, found {(len(raw) - head) // 8}")
    flat = np.frombuffer(raw[head:], dtype="<i8").astype(np.int64)
    shape, records, events = None, [], []
    for line in path.read_text().splitlines():
        if line.startswith("# allocation-log"):
            h, w = line.split("shape=")[1].split(",")
            shape = (int(h), int(w))
        elif line.startswith("# event "):
            events.append(line[len("# event "):])
        elif line.strip():
            kv = dict(tok.split("=", 1) for tok in line.split())
            src, dst = kv["transition"].split("->")
            x, y = kv["seed"].split(",")
            records.append(PatchRecord((int(src), int(dst)), kv["function"], int(y), int(x),
                                       int(kv["drawn"]), int(kv["realized"]), int(kv["offset"])))
    if shape is None:
        raise ValueError(f"{path}: missing header line")
    alloc = AllocationLog(shape, events=events)
    for r in records:
        alloc.records.append(r)
        alloc.cells.append(flat[r.offset:r.offset + r.realized_size])
    alloc._offset = int(flat.size)
    return alloc


def replay(initial: LuGrid, alloc: AllocationLog) -> LuGrid:
    """Apply every logged patch to ``initial``."""
    if tuple(initial.shape) != tuple(alloc.shape):
        raise ValueError(f"log shape {alloc.shape} does not match grid {initial.shape}")
    data = initial.data.copy().ravel()
    for rec, cells in zip(alloc.records, alloc.cells):
        data[cells] = rec.transition[1]
    return initial.replace(data=data.reshape(initial.shape))


# ---------------------------------------------------------------------------
# Allocation primitives

def derive_quantity(pmap: TransitionProbMap, threshold: float) -> int:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return int(np.count_nonzero(pmap.eligible & (pmap.probs > threshold)))


def split_quota(q: int, r: float) -> Tuple[int, int]:
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must lie in [0, 1]")
    expander = int(round(r * q))
    return expander, int(q) - expander


def class_counts_3x3(data: np.ndarray, category: int) -> np.ndarray:
    """Cells of ``category`` in each 3x3 window (centre included, outside = none)."""
    hit = (np.asarray(data) == category).astype(np.int64)
    return ndimage.convolve(hit, np.ones((3, 3), dtype=np.int64), mode="constant", cval=0)


def expander_adjust(pmap: TransitionProbMap, grid: LuGrid, t: float) -> np.ndarray:
    """Keep ``P`` where the window holds more than 3 target cells or ``P > t``,
    otherwise damp it to ``P * sqrt(n / 4)``."""
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie in (0, 1)")
    n = class_counts_3x3(grid.data, pmap.transition[1])
    p = pmap.probs
    keep = (n > 3) | (p > t)
    out = np.where(keep, p, p * np.sqrt(n / 4.0))
    return np.where(pmap.eligible, out, 0.0)


def select_seeds(field: np.ndarray, count: int, prune_factor: float, rng: np.random.Generator,
                 candidates: Optional[np.ndarray] = None) -> List[Tuple[int, int]]:
    """Weighted draw without replacement from the top ``prune_factor * count`` cells.

    Ties in the ranking go to the lower row-major index. When fewer cells in the
    pool have positive weight than requested, the rest are taken by rank.
    """
    if count < 0:
        raise ValueError("seed count must be >= 0")
    field = np.asarray(field, dtype=np.float64)
    w = field.shape[1]
    flat = field.ravel()
    cand = np.flatnonzero(candidates.ravel() if candidates is not None else np.ones(flat.size, bool))
    if count == 0 or cand.size == 0:
        return []
    order = cand[np.argsort(-flat[cand], kind="stable")]
    pool = order[:max(count, int(math.ceil(prune_factor * count)))]
    if pool.size < count:
        log.info("select_seeds: pool of %d cells short of %d requested", pool.size, count)
        return [divmod(int(i), w) for i in pool]
    weights = np.clip(flat[pool], 0.0, None)
    positive = np.flatnonzero(weights > 0)
    if positive.size >= count:
        chosen = rng.choice(pool.size, size=count, replace=False, p=weights / weights.sum())
    else:
        chosen = list(positive)
        if positive.size:
            chosen = list(rng.choice(pool.size, size=positive.size, replace=False,
                                     p=weights / weights.sum()))
        rest = [i for i in range(pool.size) if weights[i] <= 0][:count - len(chosen)]
        chosen = chosen + rest
    return [divmod(int(pool[i]), w) for i in chosen]


def draw_patch_size(mu: float, sigma: float, rng: np.random.Generator) -> int:
    return max(1, int(round(float(rng.lognormal(mu, sigma)))))


def grow_patch(available: np.ndarray, field: np.ndarray, seed: Tuple[int, int], target_size: int,
               isometry: float) -> np.ndarray:
    """Flat indices of a compact region grown from ``seed`` over ``available`` cells."""
    return kernels.grow_region(np.ascontiguousarray(available, dtype=np.uint8),
                               np.ascontiguousarray(field, dtype=np.float64),
                               int(seed[0]), int(seed[1]), int(target_size), float(isometry))


# ---------------------------------------------------------------------------
# Simulation

@dataclass
class SimulationState:
    grid: np.ndarray
    claimed: np.ndarray
    rng: np.random.Generator
    log: AllocationLog
    quotas: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @classmethod
    def start(cls, initial: LuGrid, seed: int) -> "SimulationState":
        return cls(initial.data.copy(), np.zeros(initial.shape, dtype=bool),
                   np.random.default_rng(seed), AllocationLog(tuple(initial.shape)))


def _available(state: SimulationState, pmap: TransitionProbMap) -> np.ndarray:
    return pmap.eligible & ~state.claimed & (state.grid == pmap.transition[0])


def _run_pass(state: SimulationState, pmap: TransitionProbMap, params: CaParams,
              quota: int, function: str) -> int:
    """Allocate up to ``quota`` cells with one function; returns the cells placed."""
    src, dst = pmap.transition
    mean_size = math.exp(params.patch_size_mu + params.patch_size_sigma ** 2 / 2)
    remaining = quota
    while remaining > 0:
        available = _available(state, pmap)
        if function == EXPANDER:
            current = LuGrid(state.grid, tuple(range(int(state.grid.max()) + 1)))
            fld = expander_adjust(pmap, current, params.expander_threshold_t)
            candidates = available & (class_counts_3x3(state.grid, dst) > 0)
        else:
            fld = pmap.probs
            candidates = available
        if not candidates.any():
            break
        n_seeds = max(1, int(math.ceil(remaining / mean_size)))
        seeds = select_seeds(fld, n_seeds, params.prune_factor, state.rng, candidates)
        for row, col in seeds:
            if remaining == 0:
                break
            if not (available[row, col] and not state.claimed[row, col]):
                state.log.event(f"skip transition={src}->{dst} function={function} "
                                f"seed={col},{row} reason=claimed")
                continue
            drawn = draw_patch_size(params.patch_size_mu, params.patch_size_sigma, state.rng)
            target = min(drawn, remaining)
            cells = grow_patch(available & ~state.claimed, fld, (row, col), target, params.isometry)
            if cells.size < target:
                state.log.event(f"frontier-exhausted transition={src}->{dst} function={function} "
                                f"seed={col},{row} target={target} realized={cells.size}")
            state.grid.ravel()[cells] = dst
            state.claimed.ravel()[cells] = True
            state.log.add_patch((src, dst), function, row, col, drawn, cells)
            remaining -= cells.size
    return quota - remaining


def simulate_transition(state: SimulationState, pmap: TransitionProbMap,
                        params: CaParams) -> SimulationState:
    """Expander pass then patcher pass; the expander's shortfall moves to the patcher."""
    src, dst = pmap.transition
    q = derive_quantity(pmap, params.threshold)
    state.quotas[(src, dst)] = q
    overlap = int(np.count_nonzero(pmap.eligible & state.claimed))
    if overlap:
        state.log.event(f"overlap transition={src}->{dst} cells={overlap} resolution=first-wins")
    exp_q, pat_q = split_quota(q, params.r)
    placed = _run_pass(state, pmap, params, exp_q, EXPANDER)
    if placed < exp_q:
        state.log.event(f"shortfall transition={src}->{dst} function=E "
                        f"quota={exp_q} placed={placed} moved-to-patcher={exp_q - placed}")
    pat_q += exp_q - placed
    placed_p = _run_pass(state, pmap, params, pat_q, PATCHER)
    if placed_p < pat_q:
        state.log.event(f"shortfall transition={src}->{dst} function=P "
                        f"quota={pat_q} placed={placed_p}")
    return state


def run_simulation(initial: LuGrid, pmaps: Sequence[TransitionProbMap],
                   params, seed: Optional[int] = None) -> Tuple[LuGrid, AllocationLog]:
    """Simulate every transition in declared order against the evolving grid.

    ``params`` is a single :class:`CaParams` or one per map. The rng seed is
    ``seed`` when given, else the first map's ``rng_seed``.
    """
    if isinstance(params, CaParams):
        params = [params] * len(pmaps)
    if len(params) != len(pmaps):
        raise ValueError("need one CaParams per transition map")
    pairs = [p.transition for p in pmaps]
    if len(set(pairs)) != len(pairs):
        raise ValueError(f"duplicate transitions in {pairs}")
    for p in pmaps:
        if tuple(p.shape) != tuple(initial.shape):
            raise ValueError(f"map for {p.transition} has shape {p.shape}, grid is {initial.shape}")
    if seed is None:
        seed = params[0].rng_seed if params else 0
    state = SimulationState.start(initial, seed)
    for pmap, prm in zip(pmaps, params):
        simulate_transition(state, pmap, prm)
    return initial.replace(data=state.grid.copy()), state.log


def save_simulation(grid: LuGrid, alloc: AllocationLog, prefix) -> Dict[str, Path]:
    from .raster import save_grid
    prefix = Path(prefix)
    grid_path = prefix.with_suffix(".lucr")
    save_grid(grid, grid_path)
    log_path, cells_path = save_log(alloc, prefix.with_suffix(".alloc.txt"))
    return {"grid": grid_path, "log": log_path, "cells": cells_path}
