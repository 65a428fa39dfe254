import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sensprune.allocate import AllocationPlan, opt_alloc
from sensprune.bounds import (downstream_frobenius, layer_certificate, layer_condition,
                              layer_condition_per_point, linear_part, network_certificate,
                              propagation_bound, quadrant_preactivations, sign_complexity,
                              sign_complexity_per_point)
from sensprune.harness import build_model, parse_layers, prepare, prune_with_context
from sensprune.net import LayerSpec, Network, forward
from sensprune.sensitivity import RegularityConstants, SensitivityTable, network_sensitivities

C1 = RegularityConstants(C=1.0, K=1.0, delta=0.1)


def mlp(seed, arch="dense:6:relu,dense:5:relu,dense:3:identity", init="uniform_nonneg", shape=(4,)):
    return build_model(shape, parse_layers(arch), init, seed)


def inputs(net, n, seed, signed=False):
    rng = np.random.default_rng(seed)
    shape = (n,) + tuple(net.input_shape)
    return rng.normal(size=shape) if signed else rng.uniform(0, 1, size=shape)


def _n(v):
    return np.linalg.norm(v.reshape(v.shape[0], -1), axis=1)


class TestSignComplexity:
    def test_nonneg_network_is_one(self):
        net = mlp(0)
        tr = forward(net, inputs(net, 10, 1))
        for ell in range(1, net.L + 1):
            np.testing.assert_allclose(sign_complexity_per_point(net, ell, tr), 1.0, rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_at_least_one(self, seed):
        net = mlp(seed, init="gaussian")
        tr = forward(net, inputs(net, 6, seed, signed=True))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for ell in range(1, net.L + 1):
                d = sign_complexity(net, ell, tr)
                assert math.isnan(d) or d >= 1.0 - 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_four_pass_oracle(self, seed):
        # each quadrant as its own forward pass through a bias-free copy of the layer
        net = build_model((2, 5, 5), parse_layers("conv:3:3x3:s1:p1:relu,dense:4:identity"),
                          "gaussian", seed, bias=True)
        tr = forward(net, inputs(net, 16, seed, signed=True))
        for ell in (1, 2):
            layer = net.layer(ell)
            a = tr.A[ell - 1]
            quads = quadrant_preactivations(net, ell, a)
            bare = layer.with_weights(layer.weights)
            bare.bias = None
            ref = {}
            for name, ws, as_ in [("++", 1, 1), ("+-", 1, -1), ("-+", -1, 1), ("--", -1, -1)]:
                wq = np.maximum(ws * layer.weights, 0)
                ref[name] = bare.with_weights(wq).preactivation(np.maximum(as_ * a, 0))
                np.testing.assert_allclose(quads[name], ref[name], rtol=0, atol=1e-10)
            recomb = ref["++"] - ref["+-"] - ref["-+"] + ref["--"]
            np.testing.assert_allclose(recomb, linear_part(net, ell, tr), rtol=0, atol=1e-10)
            direct = sum(_n(q) for q in ref.values()) / _n(linear_part(net, ell, tr))
            np.testing.assert_allclose(sign_complexity_per_point(net, ell, tr), direct, rtol=1e-10)

    def test_zero_preactivation_skipped(self):
        net = mlp(1)
        x = inputs(net, 4, 2)
        x[0] = 0
        tr = forward(net, x)
        with pytest.warns(UserWarning):
            d = sign_complexity(net, 1, tr)
        assert d == pytest.approx(1.0)


class TestCondition:
    def test_last_identity_layer_is_one(self):
        net = mlp(3)
        tr = forward(net, inputs(net, 5, 0))
        assert downstream_frobenius(net, net.L) == 1.0
        np.testing.assert_allclose(layer_condition_per_point(net, net.L, tr), 1.0, rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_direct_evaluation(self, seed):
        net = mlp(seed, init="gaussian")
        x = inputs(net, 5, seed, signed=True)
        tr = forward(net, x)
        out = np.linalg.norm(tr.output, axis=1)
        for ell in range(1, net.L + 1):
            frob = 1.0
            for k in range(ell + 1, net.L + 1):
                frob *= np.sqrt((net.layer(k).weights ** 2).sum())
            z = np.linalg.norm(tr.Z[ell], axis=1)
            # points whose output vanishes (dead units) are skipped as NaN
            ref = np.full_like(out, np.nan)
            ref[out > 0] = frob * z[out > 0] / out[out > 0]
            np.testing.assert_allclose(layer_condition_per_point(net, ell, tr), ref, rtol=1e-12)
            if np.all(np.isnan(ref)):
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert layer_condition(net, ell, tr) == pytest.approx(np.nanmax(ref), rel=1e-12)


    def test_single_relu_layer_at_least_one(self):
        net = mlp(12, "dense:5:relu", init="gaussian")
        tr = forward(net, inputs(net, 20, 1, signed=True))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert layer_condition(net, 1, tr) >= 1.0

    def test_scaling_last_layer(self):
        net = mlp(13)
        x = inputs(net, 6, 2)
        lam = 3.0
        scaled = net.with_weights([l.weights for l in net.layers[:-1]] + [lam * net.layers[-1].weights])
        a, b = forward(net, x), forward(scaled, x)
        for ell in range(1, net.L):
            # Frobenius product and output norm both scale by lam
            np.testing.assert_allclose(layer_condition_per_point(scaled, ell, b),
                                       layer_condition_per_point(net, ell, a), rtol=1e-12)
        np.testing.assert_allclose(layer_condition_per_point(scaled, net.L, b), 1.0, rtol=1e-12)


def det_setup(net, x, B=None):
    tr = forward(net, x)
    tables = network_sensitivities(net, tr)
    flat = [t for layer in tables for t in layer]
    if B is None:
        B = sum(len(t) for t in flat)
    return tr, tables, opt_alloc(flat, B, "det", C1)


class TestCertificate:
    def test_layer_certificate_is_max(self):
        net = mlp(4)
        tr, tables, plan = det_setup(net, inputs(net, 8, 1), B=40)
        for ell in range(1, net.L + 1):
            errs = [e for k, e in zip(plan.keys, plan.errors) if k[0] == ell]
            assert layer_certificate(plan, tables, ell, C1) == pytest.approx(max(errs))

    def test_max_of_two_groups(self):
        tables = [SensitivityTable(1, 0, [0.5, 0.1]), SensitivityTable(1, 1, [0.5, 0.3])]
        plan = AllocationPlan([(1, 0), (1, 1)], [1, 1], [0.1, 0.3], 0.4, "det", 2)
        assert layer_certificate(plan, tables, 1, C1) == pytest.approx(0.3)

    def test_tiny_layer_sweep(self):
        tables = [SensitivityTable(1, 0, [0.6, 0.3, 0.1]), SensitivityTable(1, 1, [0.2, 0.5, 0.3])]
        for B in range(2, 7):
            plan = opt_alloc(tables, B, "det", C1)
            expect = max(math.fsum(sorted(t.s, reverse=True)[m:]) for t, m in zip(tables, plan.budgets))
            assert layer_certificate(plan, tables, 1, C1) == pytest.approx(expect, abs=1e-15)

    def test_unpruned_is_zero(self):
        net = mlp(5)
        tr, tables, plan = det_setup(net, inputs(net, 8, 1))
        cert = network_certificate(net, tables, plan, tr, C1)
        assert cert.network_eps == 0.0
        assert all(l.eps == 0.0 for l in cert.layers)
        assert cert.flags == []

    def test_single_layer_composition(self):
        net = mlp(6, "dense:5:identity")
        x = inputs(net, 8, 2)
        tr, tables, plan = det_setup(net, x, B=10)
        cert = network_certificate(net, tables, plan, tr, C1)
        lb = cert.layers[0]
        assert lb.kappa == pytest.approx(1.0) and lb.Delta == pytest.approx(1.0)
        assert cert.network_eps == pytest.approx(lb.eps)
        res = prune_with_context(prepare(net, x, C1, sample_size=8), 10, "det")
        err = _n(forward(res.net, x).output - tr.output) / _n(tr.output)
        assert np.all(err <= cert.network_eps * (1 + 1e-12))

    def test_two_layer_sum(self):
        net = mlp(7, "dense:5:relu,dense:3:identity", init="gaussian")
        tr, tables, plan = det_setup(net, inputs(net, 8, 3, signed=True), B=20)
        cert = network_certificate(net, tables, plan, tr, C1)
        expect = math.fsum(l.kappa * l.Delta * l.eps for l in cert.layers)
        assert cert.network_eps == pytest.approx(expect, rel=1e-12)
        for ell, l in enumerate(cert.layers, start=1):
            assert l.eps == layer_certificate(plan, tables, ell, C1)
            assert l.Delta == sign_complexity(net, ell, tr)
            assert l.kappa == layer_condition(net, ell, tr)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.booleans())
    def test_propagation_recursion_holds_in_sample(self, seed, signed):
        net = mlp(seed, init="gaussian" if signed else "uniform_nonneg")
        x = inputs(net, 8, seed, signed=signed)
        ctx = prepare(net, x, C1, sample_size=8)
        res = prune_with_context(ctx, net.prunable_count() // 2, "det")
        cert = res.certificate
        bound = propagation_bound(net, ctx.trace, [l.eps for l in cert.layers],
                                  [l.Delta for l in cert.layers])
        pruned = forward(res.net, ctx.points)
        for ell in range(1, net.L + 1):
            actual = _n(pruned.A[ell] - ctx.trace.A[ell])
            assert np.all(actual <= bound[ell - 1] * (1 + 1e-9) + 1e-12)

    def test_monotone_in_budget(self):
        net = mlp(8)
        x = inputs(net, 10, 0)
        tr = forward(net, x)
        tables = network_sensitivities(net, tr)
        flat = [t for layer in tables for t in layer]
        eps = [network_certificate(net, tables, opt_alloc(flat, B, "det", C1), tr, C1).network_eps
               for B in range(14, sum(len(t) for t in flat) + 1, 4)]
        assert all(a >= b - 1e-12 for a, b in zip(eps, eps[1:]))

    def test_non_det_flagged(self):
        net = mlp(9)
        tr = forward(net, inputs(net, 6, 0))
        tables = network_sensitivities(net, tr)
        flat = [t for layer in tables for t in layer]
        cert = network_certificate(net, tables, opt_alloc(flat, 30, "hybrid", C1, eta=14), tr, C1)
        assert "analogous-composition" in cert.flags

    def test_undefined_when_all_outputs_vanish(self, tmp_path):
        layers = [LayerSpec.dense(np.ones((2, 3)), "relu"), LayerSpec.dense(np.ones((1, 2)), "identity")]
        net = Network((3,), layers)
        x = np.zeros((3, 3))
        tr, tables, plan = det_setup(net, x + 1.0, B=4)
        cert = network_certificate(net, tables, plan, forward(net, x), C1)
        assert cert.undefined
        assert math.isnan(cert.network_eps)
        data = json.loads(cert.write_json(tmp_path / "c.json").read_text())
        assert data["network_eps"] is None
        assert data["flags"][-1] == "undefined" or "undefined" in data["flags"]

    def test_partial_skip_flagged(self):
        net = mlp(10)
        x = inputs(net, 5, 0)
        x[2] = 0
        tr, tables, plan = det_setup(net, x, B=30)
        cert = network_certificate(net, tables, plan, tr, C1)
        assert not cert.undefined and math.isfinite(cert.network_eps)
        assert any("skipped 1 points" in f for f in cert.flags)

    def test_json_fields(self, tmp_path):
        net = mlp(11)
        tr, tables, plan = det_setup(net, inputs(net, 6, 0), B=30)
        cert = network_certificate(net, tables, plan, tr, C1)
        data = json.loads(cert.write_json(tmp_path / "c.json").read_text())
        assert set(data) == {"delta", "C", "K", "sample_size", "strategy", "per_layer", "network_eps", "flags"}
        assert len(data["per_layer"]) == net.L
        assert data["sample_size"] == 6
        assert data["network_eps"] == pytest.approx(cert.network_eps)
