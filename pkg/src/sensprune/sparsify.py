"""Per-group pruning: deterministic top-m, importance sampling, and the hybrid of both."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .sensitivity import RegularityConstants, SensitivityTable

SeedLike = Union[int, np.random.Generator, None]


@dataclass
class PrunedGroup:
    """Result of pruning one parameter group.

    ``weights`` holds the new group (zeros for discarded indices). For the
    sampled strategy ``counts`` are the multinomial draw counts over ``draws``
    samples; both are ``None`` for the deterministic strategy.
    """

    kept: np.ndarray
    weights: np.ndarray
    strategy: str
    epsilon: float
    m: int
    draws: Optional[int] = None
    counts: Optional[np.ndarray] = None


def group_rng(seed: int, ell: int, i: int) -> np.random.Generator:
    """Independent stream per (seed, layer, group) so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(ell), int(i)]))


def patch_delta(delta: float, eta: int) -> float:
    """Failure probability per patch and quadrant after the network-wide union bound."""
    return delta / (8.0 * eta)


def sampling_scale(total: float, C: float, delta: float, eta: int) -> float:
    """Bernstein scale ``(C * S / 3) * ln(2 / delta_patch)`` of the sampled estimator."""
    return C * total / 3.0 * math.log(2.0 / patch_delta(delta, eta))


def eps_rand(scale: float, N: int) -> float:
    """Relative error certificate of the sampled estimator after ``N`` draws."""
    if N < 1:
        return math.inf
    return (scale + math.sqrt(scale * (scale + 6.0 * N))) / N


def eps_det(table: SensitivityTable, m: int, C: float) -> float:
    """``C`` times the total sensitivity outside the ``m`` most sensitive weights."""
    return C * table.dropped_sum(m)


def expected_unique(q, N: int) -> float:
    """Expected number of distinct indices after ``N`` draws with replacement from ``q``."""
    q = np.asarray(q, dtype=np.float64)
    q = q[q > 0]
    if N <= 0:
        return 0.0
    with np.errstate(divide="ignore"):
        return float(np.sum(-np.expm1(N * np.log1p(-np.minimum(q, 1.0)))))


def expected_draws(q, m: int) -> int:
    """Smallest draw count whose expected number of distinct indices reaches ``m``.

    The expectation only approaches the number of positive entries, so targets
    within 0.25 of that asymptote are capped: ``N`` is then the smallest count
    whose expectation strictly exceeds ``positives - 0.25``.
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("q must be a probability vector")
    positives = int(np.count_nonzero(q > 0))
    if not 1 <= m <= positives:
        raise ValueError(f"cannot expect {m} unique draws from {positives} positive entries")
    cap = positives - 0.25
    if m <= cap:
        def reached(n):
            return expected_unique(q, n) >= m
    else:
        def reached(n):
            return expected_unique(q, n) > cap
    hi = 1
    while not reached(hi):
        hi *= 2
        if hi > 1 << 62:
            raise ValueError("expected draw count does not fit in 64 bits")
    lo = hi // 2 + 1 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if reached(mid):
            hi = mid
        else:
            lo = mid + 1
    return hi


def _check_budget(table: SensitivityTable, m: int):
    if not 1 <= m <= len(table):
        raise ValueError(f"budget m={m} outside 1..{len(table)}")


def sipp_det(weights, table: SensitivityTable, m: int, C: float = 1.0) -> PrunedGroup:
    """Keep the ``m`` most sensitive weights unchanged and zero the rest."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    _check_budget(table, m)
    kept = np.sort(table.order[:m])
    out = np.zeros_like(w)
    out[kept] = w[kept]
    return PrunedGroup(kept, out, "det", eps_det(table, m, C), m)


def _as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rand_draws(table: SensitivityTable, m: int) -> int:
    """Draw count used by the sampled strategy for a budget of ``m`` unique weights."""
    m = min(m, table.positive_count)
    return expected_draws(table.s / table.total, m)


def rand_epsilon(table: SensitivityTable, m: int, consts: RegularityConstants, eta: int) -> float:
    if table.positive_count == 0 or m < 1:
        return math.inf
    N = rand_draws(table, m)
    return eps_rand(sampling_scale(table.total, consts.C, consts.delta, eta), N)


def reweight(weights: np.ndarray, q: np.ndarray, counts: np.ndarray, N: int) -> np.ndarray:
    """Unbiased reweighting ``w_j * n_j / (N q_j)``; undrawn weights become 0.

    ``counts`` may carry leading batch axes (one row per independent draw).
    """
    q = np.asarray(q, dtype=np.float64)
    counts = np.asarray(counts)
    out = np.zeros(np.broadcast_shapes(counts.shape, q.shape))
    scale = np.divide(counts, N * q, out=out, where=q > 0)
    return scale * weights


def sipp_rand(weights, table: SensitivityTable, m: int, consts: RegularityConstants,
              eta: int, seed: SeedLike = None) -> PrunedGroup:
    """Sample ``N`` indices proportionally to sensitivity and reweight the survivors."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    _check_budget(table, m)
    if table.positive_count == 0:
        raise ValueError("all sensitivities are zero; no sampling distribution")
    q = table.s / table.total
    N = rand_draws(table, m)
    counts = _as_rng(seed).multinomial(N, q)
    kept = np.flatnonzero(counts)
    eps = eps_rand(sampling_scale(table.total, consts.C, consts.delta, eta), N)
    return PrunedGroup(kept, reweight(w, q, counts, N), "rand", eps, int(kept.size), N, counts)


def sipp_hybrid(weights, table: SensitivityTable, m: int, consts: RegularityConstants,
                eta: int, seed: SeedLike = None) -> PrunedGroup:
    """Apply whichever of the two strategies carries the smaller certificate."""
    _check_budget(table, m)
    det = eps_det(table, m, consts.C)
    rnd = rand_epsilon(table, m, consts, eta)
    if rnd > det:
        return sipp_det(weights, table, m, consts.C)
    return sipp_rand(weights, table, m, consts, eta, seed)
