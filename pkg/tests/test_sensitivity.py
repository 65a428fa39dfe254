import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sensprune.harness import build_model, parse_layers
from sensprune.net import forward
from sensprune.sensitivity import (RegularityConstants, SensitivityTable, draw_sample_set,
                                   empirical_sensitivity, layer_sensitivities, relative_importance,
                                   sample_set_size, write_sensitivity_csv)


def loop_importance(w, patches):
    """Quadrant-wise relative importance written out with plain loops."""
    g = [0.0] * len(w)
    for ws in (1, -1):
        for as_ in (1, -1):
            wq = [max(ws * v, 0.0) for v in w]
            for patch in patches:
                aq = [max(as_ * v, 0.0) for v in patch]
                den = sum(x * y for x, y in zip(wq, aq))
                if den <= 0:
                    continue
                for j in range(len(w)):
                    g[j] = max(g[j], wq[j] * aq[j] / den)
    return np.array(g)


class TestRelativeImportance:
    def test_symmetric(self):
        np.testing.assert_allclose(relative_importance([1, 1], [[1, 1]]), [0.5, 0.5])

    def test_ratio(self):
        np.testing.assert_allclose(relative_importance([3, 1], [[1, 1]]), [0.75, 0.25])

    def test_signed_weights(self):
        np.testing.assert_allclose(relative_importance([1, -1], [[1, 1]]), [1.0, 1.0])

    def test_zero_denominator_contributes_nothing(self):
        np.testing.assert_array_equal(relative_importance([1, 2], [[0, 0]]), [0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d, p = rng.integers(1, 8), rng.integers(1, 5)
        w = rng.normal(size=d)
        patches = rng.normal(size=(p, d))
        np.testing.assert_allclose(relative_importance(w, patches), loop_importance(w, patches),
                                   rtol=1e-12, atol=0)

    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, lam):
        rng = np.random.default_rng(seed)
        w, patches = rng.normal(size=6), rng.normal(size=(3, 6))
        np.testing.assert_allclose(relative_importance(w, lam * patches),
                                   relative_importance(w, patches), rtol=1e-12, atol=1e-15)

    @given(st.integers(0, 2**31 - 1))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        g = relative_importance(rng.normal(size=7), rng.normal(size=(4, 7)))
        assert ((g >= 0) & (g <= 1)).all()

    @given(st.integers(0, 2**31 - 1))
    def test_single_quadrant_shares_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        w, a = rng.uniform(0.1, 1, size=5), rng.uniform(0.1, 1, size=5)
        assert math.isclose(relative_importance(w, a[None]).sum(), 1.0, rel_tol=1e-12)


class TestEmpiricalSensitivity:
    def test_single_point(self):
        rng = np.random.default_rng(0)
        w, patches = rng.normal(size=5), rng.normal(size=(3, 5))
        table = empirical_sensitivity(w, patches[None])
        np.testing.assert_array_equal(table.s, relative_importance(w, patches))

    def test_elementwise_max(self):
        # w=(2, 8), a=(1, 1) -> g=(0.2, 0.8); w=(2, 8), a=(3, 0.5) -> g=(0.6, 0.4)
        table = empirical_sensitivity([2.0, 8.0], np.array([[[1.0, 1.0]], [[3.0, 0.5]]]))
        np.testing.assert_allclose(table.s, [0.6, 0.8])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            empirical_sensitivity([1.0], np.zeros((0, 1, 1)))

    def test_in_sample_inequality(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(0, 1, size=4)
        patches = rng.uniform(0, 1, size=(8, 3, 4))
        table = empirical_sensitivity(w, patches)
        for x in patches:
            for a in x:
                z = float(w @ a)
                assert np.all(w * a <= table.s * z * (1 + 1e-12))

    @given(st.integers(0, 2**31 - 1))
    def test_monotone_in_sample_set(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=5)
        pts = rng.normal(size=(6, 2, 5))
        small = empirical_sensitivity(w, pts[:3]).s
        big = empirical_sensitivity(w, pts).s
        assert np.all(big >= small)

    def test_layer_tables_match_group_function(self):
        net = build_model((2, 5, 5), parse_layers("conv:3:3x3:p1:relu,dense:4:identity"), "gaussian", 2)
        x = np.random.default_rng(3).normal(size=(6, 2, 5, 5))
        tr = forward(net, x)
        for ell in (1, 2):
            layer = net.layer(ell)
            tables = layer_sensitivities(net, ell, tr.A[ell - 1])
            patches = layer.unfold(tr.A[ell - 1])
            for t in tables:
                ref = empirical_sensitivity(layer.group_matrix()[t.group], patches)
                np.testing.assert_array_equal(t.s, ref.s)
                assert (t.layer, t.group) == (ell, tables.index(t))


class TestTable:
    def test_order_and_partial_sums(self):
        t = SensitivityTable(1, 0, [0.2, 0.5, 0.2, 0.1], [1.0, 1.0, 3.0, 0.0])
        # 0.5 first, then the two 0.2s with the larger |w| (index 2) ahead of index 0
        assert list(t.order) == [1, 2, 0, 3]
        assert t.total == pytest.approx(1.0)
        sums = [t.partial_sum(m) for m in range(5)]
        assert sums == sorted(sums)
        assert sums[-1] == t.total
        assert t.dropped_sum(1) == pytest.approx(0.5)

    def test_csv_export(self, tmp_path):
        t = SensitivityTable(2, 1, [0.25, 0.75])
        path = write_sensitivity_csv(tmp_path / "s.csv", [t])
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,group,weight_index,sensitivity"
        assert lines[1:] == ["2,1,0,0.25", "2,1,1,0.75"]


class TestSampleSetSize:
    def test_small(self):
        assert sample_set_size(1, 1, 0.5, 1.0) == math.ceil(math.log(16)) == 3

    def test_large(self):
        assert sample_set_size(10, 100, 0.1, 2.0) == 23

    @given(st.integers(1, 10**6), st.integers(1, 10**4), st.floats(0.001, 0.99), st.floats(0.1, 5))
    def test_doubling_rho(self, eta, rho, delta, K):
        diff = sample_set_size(eta, 2 * rho, delta, K) - sample_set_size(eta, rho, delta, K)
        assert 0 <= diff <= math.ceil(K * math.log(2))

    @pytest.mark.parametrize("delta", [0.0, 1.0, 2.9])
    def test_bad_delta(self, delta):
        with pytest.raises(ValueError):
            sample_set_size(1, 1, delta)


def test_constants_validation():
    with pytest.raises(ValueError):
        RegularityConstants(delta=1.5)
    with pytest.raises(ValueError):
        RegularityConstants(K=0)


def test_sample_draw_is_seeded_and_without_replacement():
    data = np.arange(50.0)[:, None]
    a = draw_sample_set(data, 10, seed=4)
    b = draw_sample_set(data, 10, seed=4)
    np.testing.assert_array_equal(a, b)
    assert len(np.unique(a)) == 10
    assert draw_sample_set(data, 100, seed=0).shape[0] == 50
