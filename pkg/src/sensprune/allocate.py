"""Split a global weight budget across parameter groups.

The allocator grants weights one at a time to the group whose certificate
drops the most. For the deterministic strategy each group's error is a sum
of its dropped sensitivities, so the marginal gains are the sorted
sensitivities themselves and the greedy allocation is optimal.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .sensitivity import RegularityConstants, SensitivityTable
from .sparsify import eps_det, rand_epsilon

STRATEGIES = ("det", "rand", "hybrid")


def _flatten(tables) -> List[SensitivityTable]:
    flat = []
    for item in tables:
        if isinstance(item, SensitivityTable):
            flat.append(item)
        else:
            flat.extend(item)
    return flat


def group_error(table: SensitivityTable, m: int, strategy: str = "det",
                consts: RegularityConstants = RegularityConstants(), eta: int = 1) -> float:
    """Certificate of one group when ``m`` of its weights survive."""
    if not 0 <= m <= len(table):
        raise ValueError(f"m={m} outside 0..{len(table)}")
    det = eps_det(table, m, consts.C)
    if strategy == "det" or m == 0:
        return det
    rnd = rand_epsilon(table, m, consts, eta)
    if strategy == "rand":
        return rnd
    if strategy == "hybrid":
        return min(det, rnd)
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class AllocationPlan:
    """Per-group budgets aligned with ``keys`` (``(layer, group)`` pairs)."""

    keys: List[Tuple[int, int]]
    budgets: List[int]
    errors: List[float]
    objective: float
    strategy: str
    budget: int

    @property
    def total(self) -> int:
        return sum(self.budgets)

    def as_dict(self) -> Dict[Tuple[int, int], int]:
        return dict(zip(self.keys, self.budgets))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "group", "allocated_m", "group_error"])
            for (ell, i), m, e in zip(self.keys, self.budgets, self.errors):
                writer.writerow([ell, i, m, repr(float(e))])
        return path


def _plan(flat, budgets, strategy, consts, eta, B) -> AllocationPlan:
    errors = [group_error(t, m, strategy, consts, eta) for t, m in zip(flat, budgets)]
    if strategy == "det":
        # exact sum of all dropped sensitivities so equal optima compare equal
        objective = consts.C * math.fsum(np.concatenate([t.dropped(m) for t, m in zip(flat, budgets)]))
    else:
        objective = math.fsum(errors)
    return AllocationPlan([(t.layer, t.group) for t in flat], list(budgets), errors,
                          objective, strategy, B)


def opt_alloc(tables, B: int, strategy: str = "det",
              consts: RegularityConstants = RegularityConstants(), eta: int = 1,
              floor: int = 1) -> AllocationPlan:
    """Greedy marginal-gain allocation of ``B`` weights minimising the summed certificates.

    Every group starts with ``min(floor, size)`` weights. Ties go to the larger
    next sensitivity, then the larger next |w|, then the lower (layer, group).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    flat = _flatten(tables)
    start = [min(floor, len(t)) for t in flat]
    if B < sum(start):
        raise ValueError(f"budget {B} is below the per-group floor total {sum(start)}")
    budgets = list(start)
    remaining = B - sum(budgets)

    cache: Dict[Tuple[int, int], float] = {}

    def err(k, m):
        key = (k, m)
        if key not in cache:
            cache[key] = group_error(flat[k], m, strategy, consts, eta)
        return cache[key]

    def entry(k):
        t, m = flat[k], budgets[k]
        j = t.order[m]
        if strategy == "det":
            gain = float(t.s[j])
        else:
            gain = err(k, m) - err(k, m + 1)
        return (-gain, -float(t.abs_weights[j]), t.layer, t.group, k)

    heap = [entry(k) for k in range(len(flat)) if budgets[k] < len(flat[k])]
    heapq.heapify(heap)
    while remaining > 0 and heap:
        k = heapq.heappop(heap)[-1]
        budgets[k] += 1
        remaining -= 1
        if budgets[k] < len(flat[k]):
            heapq.heappush(heap, entry(k))
    return _plan(flat, budgets, strategy, consts, eta, B)


def sipp_simple(tables, B: int, consts: RegularityConstants = RegularityConstants(),
                floor: int = 0) -> AllocationPlan:
    """Keep the ``B`` globally most sensitive weights (after an optional per-group floor)."""
    if B < 0:
        raise ValueError("budget must be nonnegative")
    flat = _flatten(tables)
    budgets = [min(floor, len(t)) for t in flat]
    if B < sum(budgets):
        raise ValueError(f"budget {B} is below the per-group floor total {sum(budgets)}")
    s_all, w_all, key_all, grp_all = [], [], [], []
    for k, t in enumerate(flat):
        rest = t.order[budgets[k]:]
        s_all.append(t.s[rest])
        w_all.append(t.abs_weights[rest])
        grp_all.append(np.full(rest.size, k))
        key_all.append(np.stack([np.full(rest.size, t.layer), np.full(rest.size, t.group), rest], axis=1))
    if flat:
        s = np.concatenate(s_all)
        w = np.concatenate(w_all)
        grp = np.concatenate(grp_all)
        keys = np.concatenate(key_all)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], -w, -s))
        take = order[:B - sum(budgets)]
        counts = np.bincount(grp[take], minlength=len(flat))
        budgets = [b + int(c) for b, c in zip(budgets, counts)]
    return _plan(flat, budgets, "det", consts, 1, B)


def magnitude_masks(weights: Sequence[np.ndarray], B: int) -> List[np.ndarray]:
    """Boolean keep-masks for the ``B`` globally largest |w| (ties by layer, then flat index)."""
    mags = np.concatenate([np.abs(w).reshape(-1) for w in weights])
    layer_id = np.concatenate([np.full(w.size, ell) for ell, w in enumerate(weights)])
    flat_id = np.concatenate([np.arange(w.size) for w in weights])
    order = np.lexsort((flat_id, layer_id, -mags))
    keep = np.zeros(mags.size, dtype=bool)
    keep[order[:max(B, 0)]] = True
    masks, pos = [], 0
    for w in weights:
        masks.append(keep[pos:pos + w.size].reshape(w.shape))
        pos += w.size
    return masks
