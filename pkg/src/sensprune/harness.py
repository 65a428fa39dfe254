"""Experiment harness: synthetic models and data, pruning runs, evaluation and sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io
from .allocate import AllocationPlan, magnitude_masks, opt_alloc, sipp_simple
from .bounds import PruneCertificate, network_certificate
from .net import ForwardTrace, LayerSpec, Network, forward, predict
from .sensitivity import (RegularityConstants, SensitivityTable, draw_sample_set,
                          network_sensitivities, sample_set_size, write_sensitivity_csv)
from .sparsify import group_rng, sipp_det, sipp_hybrid, sipp_rand

log = logging.getLogger(__name__)

RUN_STRATEGIES = ("det", "rand", "hybrid", "simple", "wt")
INITS = ("uniform_nonneg", "gaussian")


def parse_layers(text: str) -> List[dict]:
    """Parse ``dense:16:relu,conv:8:3x3:s1:p1:relu`` into layer descriptions.

    The activation is optional and defaults to relu.
    """
    layers = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        kind = parts[0].lower()
        desc = {"activation": "relu"}
        if kind == "dense":
            desc.update(kind="dense", out=int(parts[1]))
            rest = parts[2:]
        elif kind in ("conv", "conv2d"):
            kh, kw = (int(v) for v in parts[2].lower().split("x"))
            desc.update(kind="conv2d", out=int(parts[1]), kernel=(kh, kw), stride=1, padding=0)
            rest = parts[3:]
        else:
            raise ValueError(f"unknown layer kind in {item!r}")
        for token in rest:
            if token[0] == "s" and token[1:].isdigit():
                desc["stride"] = int(token[1:])
            elif token[0] == "p" and token[1:].isdigit():
                desc["padding"] = int(token[1:])
            else:
                desc["activation"] = token.lower()
        layers.append(desc)
    if not layers:
        raise ValueError("no layers given")
    return layers


def build_model(input_shape: Sequence[int], layers: Sequence[dict], init: str = "uniform_nonneg",
                seed: int = 0, bias: bool = False) -> Network:
    """Random network; ``uniform_nonneg`` draws U[0, 1], ``gaussian`` N(0, 1/fan_in)."""
    if init not in INITS:
        raise ValueError(f"init must be one of {INITS}")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    built = []
    for desc in layers:
        if desc["kind"] == "dense":
            wshape = (desc["out"], int(np.prod(shape)))
        else:
            if len(shape) != 3:
                raise ValueError(f"conv2d layer needs a (C, H, W) input, got {shape}")
            wshape = (desc["out"], shape[0]) + tuple(desc["kernel"])
        fan_in = int(np.prod(wshape[1:]))
        if init == "uniform_nonneg":
            w = rng.uniform(0.0, 1.0, size=wshape)
            b = rng.uniform(0.0, 1.0, size=wshape[0]) if bias else None
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=wshape)
            b = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=wshape[0]) if bias else None
        layer = LayerSpec(desc["kind"], w, desc.get("activation", "relu"), b,
                          desc.get("stride", 1), desc.get("padding", 0))
        built.append(layer)
        shape = layer.output_shape(shape)
    return Network(tuple(input_shape), built)


def gen_model(out_dir, input_shape, layers, init="uniform_nonneg", seed=0, bias=False) -> Network:
    if isinstance(layers, str):
        layers = parse_layers(layers)
    net = build_model(input_shape, layers, init, seed, bias)
    io.save_model(net, out_dir)
    return net


def build_data(shape: Sequence[int], distribution: str = "uniform_nonneg", count: int = 1,
               seed: int = 0) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    if distribution not in INITS:
        raise ValueError(f"distribution must be one of {INITS}")
    rng = np.random.default_rng(seed)
    size = (count,) + tuple(int(s) for s in shape)
    if distribution == "uniform_nonneg":
        return rng.uniform(0.0, 1.0, size=size)
    return rng.normal(0.0, 1.0, size=size)


def gen_data(path, shape, distribution="uniform_nonneg", count=1, seed=0) -> np.ndarray:
    data = build_data(shape, distribution, count, seed)
    io.write_tensor(path, data)
    return data


@dataclass
class RunConfig:
    model: Optional[str] = None
    data: Optional[str] = None
    test_data: Optional[str] = None
    strategy: str = "det"
    budget: Optional[int] = None
    ratio: Optional[float] = None
    delta: float = 0.1
    C: float = 2.0
    K: float = 1.0
    seed: int = 0
    out: Optional[str] = None
    sample_size: Optional[int] = None
    floor: int = 1

    def __post_init__(self):
        if self.strategy not in RUN_STRATEGIES:
            raise ValueError(f"strategy must be one of {RUN_STRATEGIES}")

    @property
    def consts(self) -> RegularityConstants:
        return RegularityConstants(self.C, self.K, self.delta)

    def resolve_budget(self, total: int) -> int:
        if (self.budget is None) == (self.ratio is None):
            raise ValueError("give exactly one of budget or ratio")
        if self.budget is not None:
            if self.budget < 0:
                raise ValueError("budget must be nonnegative")
            return int(self.budget)
        return ratio_to_budget(self.ratio, total)


def ratio_to_budget(ratio: float, total: int) -> int:
    if not 0 <= ratio < 1:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    return int(round((1.0 - ratio) * total))


@dataclass
class SampleContext:
    """Everything computed once from the sensitivity split and reused across budgets."""

    net: Network
    points: np.ndarray
    trace: ForwardTrace
    tables: List[List[SensitivityTable]]
    eta: int
    consts: RegularityConstants
    seconds: float

    @property
    def flat_tables(self) -> List[SensitivityTable]:
        return [t for layer in self.tables for t in layer]


def prepare(net: Network, data: np.ndarray, consts: RegularityConstants, seed: int = 0,
            sample_size: Optional[int] = None) -> SampleContext:
    """Draw the sample set and compute sensitivities for every group."""
    start = time.perf_counter()
    eta = sum(net.patch_counts())
    n = sample_size or sample_set_size(eta, net.max_group_size(), consts.delta, consts.K)
    if data.shape[0] < n:
        log.warning("sensitivity split has %d points, fewer than the %d requested", data.shape[0], n)
    points = draw_sample_set(net.check_batch(data), n, seed)
    trace = forward(net, points)
    tables = network_sensitivities(net, trace)
    return SampleContext(net, points, trace, tables, eta, consts, time.perf_counter() - start)


@dataclass
class PruneResult:
    net: Network
    plan: AllocationPlan
    certificate: PruneCertificate
    strategies: Dict[Tuple[int, int], str]


def _wt_plan(ctx: SampleContext, B: int) -> Tuple[AllocationPlan, List[np.ndarray], Dict]:
    masks = magnitude_masks([layer.weights for layer in ctx.net.layers], B)
    keys, budgets, errors, geps, dropped = [], [], [], {}, []
    for ell, layer_tables in enumerate(ctx.tables, start=1):
        mask = masks[ell - 1].reshape(len(layer_tables), -1)
        for t in layer_tables:
            gone = t.s[~mask[t.group]]
            e = ctx.consts.C * math.fsum(gone)
            keys.append((ell, t.group))
            budgets.append(int(mask[t.group].sum()))
            errors.append(e)
            geps[(ell, t.group)] = e
            dropped.append(gone)
    objective = ctx.consts.C * math.fsum(np.concatenate(dropped)) if dropped else 0.0
    return AllocationPlan(keys, budgets, errors, objective, "det", B), masks, geps


def prune_with_context(ctx: SampleContext, B: int, strategy: str, seed: int = 0,
                       floor: int = 1) -> PruneResult:
    """Allocate ``B`` weights, prune every group and certify the result."""
    net, consts, eta = ctx.net, ctx.consts, ctx.eta
    if strategy == "wt":
        plan, masks, geps = _wt_plan(ctx, B)
        pruned = net.with_weights([np.where(m, l.weights, 0.0) for m, l in zip(masks, net.layers)])
        cert = network_certificate(net, ctx.tables, plan, ctx.trace, consts, eta, geps)
        cert.strategy = "wt"
        return PruneResult(pruned, plan, cert, {k: "det" for k in geps})

    if strategy == "simple":
        plan = sipp_simple(ctx.tables, B, consts, floor=0)
        group_strategy = "det"
    else:
        plan = opt_alloc(ctx.tables, B, strategy, consts, eta, floor)
        group_strategy = strategy
    budgets = plan.as_dict()
    new_weights, geps, used = [], {}, {}
    for ell, layer_tables in enumerate(ctx.tables, start=1):
        layer = net.layer(ell)
        rows = layer.group_matrix().copy()
        for t in layer_tables:
            key = (ell, t.group)
            m = budgets[key]
            w = rows[t.group]
            if m == 0:
                rows[t.group] = 0.0
                geps[key] = consts.C * t.total
                used[key] = "det"
                continue
            if group_strategy == "det" or t.positive_count == 0:
                res = sipp_det(w, t, m, consts.C)
            elif group_strategy == "rand":
                res = sipp_rand(w, t, m, consts, eta, group_rng(seed, ell, t.group))
            else:
                res = sipp_hybrid(w, t, m, consts, eta, group_rng(seed, ell, t.group))
            rows[t.group] = res.weights
            geps[key] = res.epsilon
            used[key] = res.strategy
        new_weights.append(rows.reshape(layer.weights.shape))
    pruned = net.with_weights(new_weights)
    cert = network_certificate(net, ctx.tables, plan, ctx.trace, consts, eta, geps)
    cert.strategy = strategy
    return PruneResult(pruned, plan, cert, used)


def relative_errors(reference: Network, pruned: Network, test: np.ndarray) -> np.ndarray:
    """``|f_hat(x) - f(x)| / |f(x)|`` per test point (0/0 -> 0, x/0 -> inf)."""
    f = predict(reference, test).reshape(test.shape[0], -1)
    fh = predict(pruned, test).reshape(test.shape[0], -1)
    diff = np.linalg.norm(fh - f, axis=1)
    ref = np.linalg.norm(f, axis=1)
    out = np.where(diff == 0, 0.0, np.inf)
    return np.divide(diff, ref, out=out, where=ref > 0)


def error_stats(errors: np.ndarray, eps: Optional[float] = None) -> dict:
    stats = {
        "count": int(errors.size),
        "mean": float(np.mean(errors)),
        "max": float(np.max(errors)),
        "q50": float(np.quantile(errors, 0.5)),
        "q90": float(np.quantile(errors, 0.9)),
        "q99": float(np.quantile(errors, 0.99)),
    }
    if eps is not None and math.isfinite(eps):
        stats["coverage"] = float(np.mean(errors <= eps))
    else:
        stats["coverage"] = None
    return stats


@dataclass
class RunReport:
    strategy: str
    budget: int
    kept_per_layer: List[int]
    total_per_layer: List[int]
    certificate: dict
    empirical: Optional[dict]
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def kept(self) -> int:
        return sum(self.kept_per_layer)

    @property
    def total(self) -> int:
        return sum(self.total_per_layer)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kept"] = self.kept
        d["total"] = self.total
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def _report(result: PruneResult, B: int, test: Optional[np.ndarray], reference: Network,
            timings: dict) -> RunReport:
    start = time.perf_counter()
    empirical = None
    if test is not None:
        errors = relative_errors(reference, result.net, test)
        empirical = error_stats(errors, result.certificate.network_eps)
    timings["evaluate"] = time.perf_counter() - start
    kept = [int(np.count_nonzero(l.weights)) for l in result.net.layers]
    total = [int(l.weights.size) for l in result.net.layers]
    return RunReport(result.certificate.strategy, B, kept, total, result.certificate.to_dict(),
                     empirical, timings)


def _load_inputs(config: RunConfig):
    net = io.load_model(config.model)
    data = io.read_tensor(config.data)
    test = io.read_tensor(config.test_data) if config.test_data else None
    if test is not None:
        net.check_batch(test)
    return net, data, test


def prune_run(config: RunConfig, net: Optional[Network] = None, data=None, test=None) -> Tuple[RunReport, Network]:
    """Sensitivity, allocation, pruning, certificate and evaluation for one budget.

    Writes the pruned bundle and reports under ``config.out`` when set.
    """
    if net is None:
        net, data, test = _load_inputs(config)
    B = config.resolve_budget(net.prunable_count())
    ctx = prepare(net, data, config.consts, config.seed, config.sample_size)
    start = time.perf_counter()
    result = prune_with_context(ctx, B, config.strategy, config.seed, config.floor)
    timings = {"sensitivity": ctx.seconds, "prune": time.perf_counter() - start}
    report = _report(result, B, test, net, timings)
    if config.out:
        out = Path(config.out)
        io.save_model(result.net, out / "model")
        report.write_json(out / "report.json")
        result.certificate.write_json(out / "certificate.json")
        write_sensitivity_csv(out / "sensitivity.csv", ctx.flat_tables)
        result.plan.write_csv(out / "plan.csv")
    return report, result.net


def certify(config: RunConfig) -> PruneCertificate:
    """Certificate for a budget without writing a pruned model."""
    net = io.load_model(config.model)
    data = io.read_tensor(config.data)
    ctx = prepare(net, data, config.consts, config.seed, config.sample_size)
    B = config.resolve_budget(net.prunable_count())
    return prune_with_context(ctx, B, config.strategy, config.seed, config.floor).certificate


SWEEP_COLUMNS = ["ratio", "strategy", "budget", "kept", "certificate_eps",
                 "empirical_mean", "empirical_max", "coverage"]


def sweep(config: RunConfig, ratios: Sequence[float], strategies: Optional[Sequence[str]] = None,
          net: Optional[Network] = None, data=None, test=None) -> List[dict]:
    """One pruning run per ratio (and strategy), sharing the sensitivity computation."""
    if net is None:
        net, data, test = _load_inputs(config)
    strategies = list(strategies or [config.strategy])
    ctx = prepare(net, data, config.consts, config.seed, config.sample_size)
    rows = []
    for strategy in strategies:
        for r in ratios:
            B = ratio_to_budget(r, net.prunable_count())
            result = prune_with_context(ctx, B, strategy, config.seed, config.floor)
            row = {"ratio": r, "strategy": strategy, "budget": B,
                   "kept": sum(int(np.count_nonzero(l.weights)) for l in result.net.layers),
                   "certificate_eps": result.certificate.network_eps,
                   "empirical_mean": None, "empirical_max": None, "coverage": None}
            if test is not None:
                stats = error_stats(relative_errors(net, result.net, test), result.certificate.network_eps)
                row.update(empirical_mean=stats["mean"], empirical_max=stats["max"],
                           coverage=stats["coverage"])
            rows.append(row)
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out / "sweep.csv", rows)
    return rows


def write_sweep_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else
                                 repr(float(row[k])) if isinstance(row[k], float) else row[k])
                             for k in SWEEP_COLUMNS})
    return path


def evaluate(model, reference, test_data, eps: Optional[float] = None) -> dict:
    pruned = io.load_model(model)
    ref = io.load_model(reference)
    test = ref.check_batch(io.read_tensor(test_data))
    stats = error_stats(relative_errors(ref, pruned, test), eps)
    stats["kept"] = sum(int(np.count_nonzero(l.weights)) for l in pruned.layers)
    stats["total"] = pruned.prunable_count()
    return stats
