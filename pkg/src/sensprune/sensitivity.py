"""Relative importance and empirical sensitivity of weights within parameter groups.

Signed weights and activations are handled quadrant-wise: the group and each
patch are split into positive and negative parts, every (weight sign,
activation sign) pair gives a nonnegative dot product, and a weight's
importance is its largest share of any of those four sums.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .net import QUADRANTS, Network, quadrant_split

# elements per intermediate block when vectorising over groups
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class RegularityConstants:
    """Distribution constants ``C``, ``K`` and failure probability ``delta``.

    They cannot be estimated from data; every certificate reports the values
    it assumed.
    """

    C: float = 2.0
    K: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class SensitivityTable:
    """Empirical sensitivities of one parameter group.

    ``abs_weights`` is only used to break ties when ordering indices.
    """

    layer: int
    group: int
    s: np.ndarray
    abs_weights: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.abs_weights is None:
            self.abs_weights = np.zeros_like(self.s)
        else:
            self.abs_weights = np.abs(np.asarray(self.abs_weights, dtype=np.float64))

    def __len__(self):
        return self.s.size

    @cached_property
    def order(self) -> np.ndarray:
        """Indices by descending sensitivity, then descending |w|, then ascending index."""
        idx = np.arange(self.s.size)
        return np.lexsort((idx, -self.abs_weights, -self.s))

    @cached_property
    def total(self) -> float:
        return math.fsum(self.s)

    @property
    def positive_count(self) -> int:
        return int(np.count_nonzero(self.s > 0))

    def partial_sum(self, m: int) -> float:
        """Sum of the ``m`` largest sensitivities."""
        return math.fsum(self.s[self.order[:m]])

    def dropped(self, m: int) -> np.ndarray:
        """Sensitivities of the indices outside the top ``m``."""
        return self.s[self.order[m:]]

    def dropped_sum(self, m: int) -> float:
        return math.fsum(self.dropped(m))


def _quadrant_importance(w: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Importance for groups ``w`` (G, d) against patches (B, P, d) -> (B, G, d).

    Result is the maximum over quadrants and patches of each weight's share.
    """
    w_parts = quadrant_split(w)
    a_parts = quadrant_split(patches)
    best = np.zeros((patches.shape[0], w.shape[0], w.shape[1]))
    for ws, as_ in QUADRANTS:
        num = w_parts[ws][None, :, None, :] * a_parts[as_][:, None, :, :]
        den = num.sum(axis=-1, keepdims=True)
        # 0/0 contributes nothing; den == 0 forces every numerator to 0
        ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        np.maximum(best, ratio.max(axis=2), out=best)
    return best


def relative_importance(weights, patches) -> np.ndarray:
    """Relative importance ``g_j(x)`` of each weight for one input's patch matrix."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.shape[-1] != w.shape[1]:
        raise ValueError(f"patch length {p.shape[-1]} != group size {w.shape[1]}")
    return _quadrant_importance(w, p[None])[0, 0]


def empirical_sensitivity(weights, sample_patches, layer: int = 0, group: int = 0) -> SensitivityTable:
    """Sensitivity table from patch matrices of every point in the sample set.

    ``sample_patches`` has shape ``(points, patches, group_size)``.
    """
    p = np.asarray(sample_patches, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, None, :]
    if p.shape[0] < 1:
        raise ValueError("sample set must contain at least one point")
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    g = _quadrant_importance(w, p)
    return SensitivityTable(layer, group, g.max(axis=0)[0], np.abs(w[0]))


def layer_sensitivities(net: Network, ell: int, a_prev) -> List[SensitivityTable]:
    """Tables for every group of layer ``ell`` given the batch of its inputs on S."""
    layer = net.layer(ell)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if a_prev.shape[0] < 1:
        raise ValueError("sample set must contain at least one point")
    patches = layer.unfold(a_prev)
    w = layer.group_matrix()
    b, n_patch, d = patches.shape
    per_group = max(1, b * n_patch * d)
    step = max(1, _CHUNK_ELEMENTS // per_group)
    tables = []
    for start in range(0, w.shape[0], step):
        block = w[start:start + step]
        s = _quadrant_importance(block, patches).max(axis=0)
        for k in range(block.shape[0]):
            tables.append(SensitivityTable(ell, start + k, s[k], np.abs(block[k])))
    return tables


def network_sensitivities(net: Network, trace) -> List[List[SensitivityTable]]:
    """Tables for every layer from a forward trace over the sample set."""
    return [layer_sensitivities(net, ell, trace.A[ell - 1]) for ell in range(1, net.L + 1)]


def sample_set_size(eta: int, rho: int, delta: float, K: float = 1.0) -> int:
    """Points needed so the sensitivity inequality holds network-wide w.p. 1 - delta."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if eta <= 0 or rho <= 0 or K <= 0:
        raise ValueError("eta, rho and K must be positive")
    return int(math.ceil(K * math.log(8.0 * eta * rho / delta)))


def draw_sample_set(data: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Uniform sample of ``n`` rows without replacement (all rows if fewer)."""
    count = data.shape[0]
    if count < 1:
        raise ValueError("cannot sample from an empty data set")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(count, size=min(n, count), replace=False))
    return data[idx]


def write_sensitivity_csv(path, tables: Iterable[SensitivityTable]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "group", "weight_index", "sensitivity"])
        for t in tables:
            for j, s in enumerate(t.s):
                writer.writerow([t.layer, t.group, j, repr(float(s))])
    return path
