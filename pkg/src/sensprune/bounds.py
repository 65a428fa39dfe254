"""Layer- and network-level relative error certificates.

All norms are taken on the bias-free part of each pre-activation, since
biases are never pruned and cancel in every error term.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .allocate import AllocationPlan, group_error
from .net import ForwardTrace, Network, frobenius_norm, quadrant_split
from .sensitivity import RegularityConstants


def _norms(batch: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(batch.reshape(batch.shape[0], -1) ** 2, axis=1))


def linear_part(net: Network, ell: int, trace: ForwardTrace) -> np.ndarray:
    layer = net.layer(ell)
    z = trace.Z[ell]
    if layer.bias is None:
        return z
    return z - layer.bias_view(z.ndim)


def quadrant_preactivations(net: Network, ell: int, a_prev: np.ndarray) -> Dict[str, np.ndarray]:
    """The four nonnegative pre-activation quadrants ``++, +-, -+, --`` of layer ``ell``."""
    layer = net.layer(ell)
    w_pos, w_neg = quadrant_split(layer.weights)
    a_pos, a_neg = quadrant_split(a_prev)
    return {
        "++": layer.linear(a_pos, w_pos),
        "+-": layer.linear(a_neg, w_pos),
        "-+": layer.linear(a_pos, w_neg),
        "--": layer.linear(a_neg, w_neg),
    }


def sign_complexity_per_point(net: Network, ell: int, trace: ForwardTrace) -> np.ndarray:
    """Quadrant norm mass over pre-activation norm for each point; NaN where the norm is 0."""
    quads = quadrant_preactivations(net, ell, trace.A[ell - 1])
    num = sum(_norms(q) for q in quads.values())
    den = _norms(linear_part(net, ell, trace))
    return np.divide(num, den, out=np.full_like(den, np.nan), where=den > 0)


def sign_complexity(net: Network, ell: int, trace: ForwardTrace) -> float:
    """Largest ratio over the sample set; NaN when every point has a zero pre-activation."""
    vals = sign_complexity_per_point(net, ell, trace)
    if np.isnan(vals).any():
        warnings.warn(f"layer {ell}: {int(np.isnan(vals).sum())} points with zero pre-activation skipped")
    return float(np.nanmax(vals)) if not np.isnan(vals).all() else math.nan


def downstream_frobenius(net: Network, ell: int) -> float:
    """Product of Frobenius norms of layers after ``ell`` (1 for the last layer)."""
    return math.prod(frobenius_norm(net.layer(k).weights) for k in range(ell + 1, net.L + 1))


def layer_condition_per_point(net: Network, ell: int, trace: ForwardTrace) -> np.ndarray:
    out = _norms(trace.output)
    z = _norms(linear_part(net, ell, trace))
    ratio = np.divide(z, out, out=np.full_like(out, np.nan), where=out > 0)
    return downstream_frobenius(net, ell) * ratio


def layer_condition(net: Network, ell: int, trace: ForwardTrace) -> float:
    vals = layer_condition_per_point(net, ell, trace)
    if np.isnan(vals).any():
        warnings.warn(f"layer {ell}: {int(np.isnan(vals).sum())} points with zero output skipped")
    return float(np.nanmax(vals)) if not np.isnan(vals).all() else math.nan


def layer_certificate(plan: AllocationPlan, tables, ell: int,
                      consts: RegularityConstants = RegularityConstants(), eta: int = 1,
                      group_eps: Optional[Dict[Tuple[int, int], float]] = None) -> float:
    """Largest group certificate in layer ``ell``.

    ``group_eps`` overrides the plan's strategy with certificates of the groups
    as actually pruned (e.g. the branch the hybrid strategy took).
    """
    lookup = {(t.layer, t.group): t for t in _iter_tables(tables)}
    worst = 0.0
    for key, m in zip(plan.keys, plan.budgets):
        if key[0] != ell:
            continue
        if group_eps is not None:
            e = group_eps[key]
        else:
            e = group_error(lookup[key], m, plan.strategy, consts, eta)
        worst = max(worst, e)
    return worst


def _iter_tables(tables):
    for item in tables:
        if isinstance(item, (list, tuple)):
            yield from item
        else:
            yield item


def propagation_bound(net: Network, trace: ForwardTrace, layer_eps: Sequence[float],
                      deltas: Sequence[float]) -> np.ndarray:
    """Per-point bound on ``|A_hat^l - A^l|`` for every layer, shape ``(L, points)``.

    Row ``l`` is ``|W^l|_F * row(l-1) + eps^l * Delta^l * |Z^l|``.
    """
    rows = []
    prev = np.zeros(trace.A[0].shape[0])
    for ell in range(1, net.L + 1):
        term = layer_eps[ell - 1] * deltas[ell - 1] * _norms(linear_part(net, ell, trace))
        if layer_eps[ell - 1] == 0:
            term = np.zeros_like(prev)
        prev = (frobenius_norm(net.layer(ell).weights) * prev if ell > 1 else 0.0) + term
        rows.append(prev)
    return np.vstack(rows)


@dataclass
class LayerBound:
    eps: float
    Delta: float
    kappa: float


@dataclass
class PruneCertificate:
    group_eps: Dict[Tuple[int, int], float]
    layers: List[LayerBound]
    network_eps: float
    delta: float
    C: float
    K: float
    sample_size: int
    strategy: str
    flags: List[str] = field(default_factory=list)

    @property
    def undefined(self) -> bool:
        return "undefined" in self.flags

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v

        return {
            "delta": self.delta,
            "C": self.C,
            "K": self.K,
            "sample_size": self.sample_size,
            "strategy": self.strategy,
            "per_layer": [{k: clean(v) for k, v in asdict(b).items()} for b in self.layers],
            "network_eps": clean(self.network_eps),
            "flags": list(self.flags),
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def network_certificate(net: Network, tables, plan: AllocationPlan, trace: ForwardTrace,
                        consts: RegularityConstants = RegularityConstants(), eta: Optional[int] = None,
                        group_eps: Optional[Dict[Tuple[int, int], float]] = None) -> PruneCertificate:
    """Network-wide certificate ``sum_l kappa^l * Delta^l * eps^l`` on the sample set ``trace``."""
    if eta is None:
        eta = sum(net.patch_counts())
    flags = []
    if plan.strategy != "det":
        flags.append("analogous-composition")
    lookup = {(t.layer, t.group): t for t in _iter_tables(tables)}
    geps = {}
    for key, m in zip(plan.keys, plan.budgets):
        geps[key] = group_eps[key] if group_eps is not None else group_error(
            lookup[key], m, plan.strategy, consts, eta)
    layers = []
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for ell in range(1, net.L + 1):
            eps = max((e for k, e in geps.items() if k[0] == ell), default=0.0)
            d_pts = sign_complexity_per_point(net, ell, trace)
            k_pts = layer_condition_per_point(net, ell, trace)
            if np.isnan(d_pts).any():
                flags.append(f"layer {ell}: skipped {int(np.isnan(d_pts).sum())} points with zero pre-activation")
            if np.isnan(k_pts).any():
                flags.append(f"layer {ell}: skipped {int(np.isnan(k_pts).sum())} points with zero output")
            Delta = float(np.nanmax(d_pts)) if not np.isnan(d_pts).all() else math.nan
            kappa = float(np.nanmax(k_pts)) if not np.isnan(k_pts).all() else math.nan
            layers.append(LayerBound(eps, Delta, kappa))
            if math.isnan(Delta) or math.isnan(kappa):
                if "undefined" not in flags:
                    flags.append("undefined")
                if eps > 0:
                    total = math.nan
                continue
            if eps > 0:
                total += kappa * Delta * eps
    return PruneCertificate(geps, layers, total, consts.delta, consts.C, consts.K,
                            int(trace.A[0].shape[0]), plan.strategy, flags)
