import math

import numpy as np
import pytest
from sklearn.base import clone

from splitmc import (LIE, STRANG, ArrheniusRates, RerAccumulator, RerEstimator, SpinConfiguration,
                     checkerboard, commutator, dt_for_tolerance, expm, f_term, f_value,
                     info_criterion, leading_rer_coefficient, local_commutator,
                     local_scheme_coefficient, pp_rer, rer, scheme_matrix)
from splitmc.estimator import (PatchCache, accumulate, admissible_tuples, all_tuples,
                               crossover_dt, is_admissible, is_singular)
from splitmc.exact import generator_stationary, scheme_taylor
from splitmc.lattice import split_generators
from splitmc.model import enumerate_states, lattice


def state_totals(dec, params, scheme, variant):
    cache = PatchCache(dec, params, scheme, variant, admissible_tuples(dec, scheme))
    return np.array([cache.total(s) for s in enumerate_states(dec.n_sites)])


class TestTuples:
    def test_ring6_lie(self):
        dec = checkerboard(6, 3)
        assert admissible_tuples(dec, LIE) == [(1, 2), (3, 4)]

    def test_ring6_strang(self):
        dec = checkerboard(6, 3)
        assert admissible_tuples(dec, STRANG) == [(0, 1, 2), (1, 2, 3), (2, 3, 4), (3, 4, 5)]

    def test_single_group_not_admissible(self):
        dec = checkerboard(6, 3)
        assert not is_admissible((0, 5), dec, LIE)
        assert not is_admissible((1, 3), dec, LIE)
        assert not is_admissible((1, 1), dec, LIE)
        assert is_admissible((2, 1), dec, LIE)

    def test_torus_counts(self):
        # every cross-group bond is one Lie tuple
        dec = checkerboard((4, 4), 2)
        g = dec.site_groups
        nbrs = lattice((4, 4)).neighbors
        bonds = {tuple(sorted((x, y))) for x in range(16) for y in nbrs[x] if g[x] != g[y]}
        assert set(admissible_tuples(dec, LIE)) == bonds


class TestLocalCoefficients:
    @pytest.mark.parametrize("scheme", [LIE, STRANG, LIE.reversed()])
    def test_commutator_matches_dense(self, ring6, scheme):
        dims, params, dec, (L, L1, L2) = ring6
        C = commutator(L, L1, L2, scheme).C
        adm = set(admissible_tuples(dec, scheme))
        n = dec.n_sites
        for s in range(2 ** n):
            sigma = SpinConfiguration.from_index(dims, s)
            for tup in all_tuples(n, scheme.p):
                target = sigma.flip(*tup).index
                c = local_commutator(sigma, tup, dec, params, scheme)
                if tup in adm:
                    assert c == pytest.approx(C[s, target], abs=1e-7)
                else:
                    assert c == 0.0
                    assert abs(C[s, target]) < 1e-7

    @pytest.mark.parametrize("scheme", [LIE, STRANG])
    def test_scheme_coefficient_matches_taylor(self, ring4, scheme):
        dims, params, dec, (L, L1, L2) = ring4
        T = scheme_taylor(L1, L2, scheme, scheme.p)[scheme.p]
        for s in range(16):
            sigma = SpinConfiguration.from_index(dims, s)
            for tup in admissible_tuples(dec, scheme):
                b = local_scheme_coefficient(sigma, tup, dec, params, scheme)
                assert b == pytest.approx(T[s, sigma.flip(*tup).index], rel=1e-12, abs=1e-14)

    def test_non_unit_rates(self):
        dims, params = (4,), ArrheniusRates(0.7, 2.0, 1.3, -0.6, 0.4)
        dec = checkerboard(dims, 2)
        L, L1, L2 = split_generators(dims, params, dec)
        C = commutator(L, L1, L2, LIE).C
        for s in range(16):
            sigma = SpinConfiguration.from_index(dims, s)
            for tup in admissible_tuples(dec, LIE):
                assert local_commutator(sigma, tup, dec, params, LIE) == pytest.approx(
                    C[s, sigma.flip(*tup).index], abs=1e-7)

    def test_f_term(self, ring6):
        dims, params, dec, _ = ring6
        sigma = SpinConfiguration(dims, [0, 1, 0, 1, 1, 0])
        t = f_term(sigma, (1, 2), dec, params, LIE)
        a = t.lq + t.c
        assert t.f == pytest.approx(t.lq * math.log(t.lq / a) - t.lq + a, rel=1e-10)
        assert f_term(sigma, (0, 5), dec, params, LIE).f == 0.0


class TestLocalTerm:
    def test_exact_matches_log_form(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.uniform(0.01, 5, 2)
            assert f_value(a - b, b) == pytest.approx(b * math.log(b / a) - b + a, rel=1e-9, abs=1e-15)

    def test_limits(self):
        assert f_value(0.0, 1.3) == 0.0
        assert f_value(0.8, 0.0) == 0.8
        assert f_value(0.8, 0.0, "conservative") == pytest.approx(0.8)

    def test_equal_c_and_lq(self):
        # a = 2 b gives log 2 - 1/2 per unit b
        assert f_value(1.0, 1.0) == pytest.approx(1.0 - math.log(2.0))

    def test_conservative_dominates(self):
        rng = np.random.default_rng(1)
        b = rng.uniform(0.0, 3, 200)
        c = rng.uniform(-0.99, 3, 200) * np.maximum(b, 0.1)
        c = np.where(b + c > 0, c, 0.0)
        assert np.all(f_value(c, b, "conservative") >= f_value(c, b, "exact") - 1e-15)

    def test_singular(self):
        assert is_singular(-1.0, 1.0)
        assert not is_singular(0.0, 0.0)
        with pytest.raises(ValueError):
            f_value(1.0, 1.0, "other")


class TestLeadingCoefficient:
    @pytest.mark.parametrize("fixture", ["ring4", "ring6"])
    @pytest.mark.parametrize("scheme", [LIE, STRANG])
    def test_exact_variant_matches_dense(self, request, fixture, scheme):
        dims, params, dec, (L, L1, L2) = request.getfixturevalue(fixture)
        mu = generator_stationary(L)
        coeff, order = leading_rer_coefficient(L, L1, L2, scheme)
        assert order == scheme.rer_order
        assert mu @ state_totals(dec, params, scheme, "exact") == pytest.approx(coeff, rel=1e-9)

    def test_conservative_over_estimates(self, ring6):
        dims, params, dec, (L, L1, L2) = ring6
        mu = generator_stationary(L)
        coeff, _ = leading_rer_coefficient(L, L1, L2, STRANG)
        assert mu @ state_totals(dec, params, STRANG, "conservative") >= coeff

    def test_matches_small_step_rer(self, ring6):
        dims, params, dec, (L, L1, L2) = ring6
        coeff, _ = leading_rer_coefficient(L, L1, L2, LIE)
        dt = 2.0 ** -10
        assert rer(scheme_matrix(L1, L2, LIE, dt), expm(L, dt)) / dt == pytest.approx(coeff, rel=0.01)

    def test_pp_rer_size_independent(self):
        params = ArrheniusRates()
        dt = 0.05
        for scheme in (LIE, STRANG):
            vals = []
            for N, m in ((4, 2), (8, 4)):
                dec = checkerboard(N, m)
                L, L1, L2 = split_generators((N,), params, dec)
                vals.append(rer(scheme_matrix(L1, L2, scheme, dt), expm(L, dt)) / N)
            assert vals[1] == pytest.approx(vals[0], rel=0.2)


class TestAccumulator:
    def test_mean_and_batches(self):
        acc = RerAccumulator("lie", 1, batch_size=4)
        values = np.arange(10.0)
        for v in values:
            acc.add(v)
        assert acc.estimate == pytest.approx(4.5)
        assert acc.batch_means == [1.5, 5.5]
        assert acc.stderr == pytest.approx(np.std([1.5, 5.5], ddof=1) / math.sqrt(2))
        assert acc.variance == pytest.approx(np.var(values, ddof=1))

    def test_merge_equals_sequential(self):
        rng = np.random.default_rng(2)
        values = rng.exponential(size=250)
        whole = RerAccumulator("strang", 2, batch_size=50)
        left = RerAccumulator("strang", 2, batch_size=50)
        right = RerAccumulator("strang", 2, batch_size=50)
        for v in values:
            whole.add(v)
        for v in values[:100]:
            left.add(v)
        for v in values[100:]:
            right.add(v)
        merged = left.merge(right)
        assert merged.count == whole.count
        assert merged.sum == whole.sum
        assert merged.estimate == whole.estimate

    def test_merge_mismatch(self):
        with pytest.raises(ValueError):
            RerAccumulator("lie", 1).merge(RerAccumulator("strang", 2))

    def test_empty(self):
        acc = RerAccumulator("lie", 1)
        with pytest.raises(ValueError):
            acc.estimate
        assert math.isnan(acc.stderr)

    def test_accumulate(self, ring6):
        dims, params, dec, _ = ring6
        acc = RerAccumulator("lie", 1)
        sigma = SpinConfiguration(dims, [1, 0, 1, 1, 0, 0])
        accumulate(acc, sigma, dec, params, LIE)
        expected = sum(f_term(sigma, t, dec, params, LIE).f for t in admissible_tuples(dec, LIE))
        assert acc.estimate == pytest.approx(expected, rel=1e-12)

    def test_pp_rer(self):
        acc = RerAccumulator("strang", 2)
        acc.add(3.0)
        assert pp_rer(acc, 6, 0.1) == pytest.approx(3.0 * 0.01 / 6)


class TestRerEstimator:
    def test_sklearn_api(self):
        est = RerEstimator(dims=6, m=3, scheme="strang")
        params = est.get_params()
        assert params["scheme"] == "strang" and params["m"] == 3
        assert clone(est).get_params() == params

    def test_fit_matches_totals(self, ring6):
        dims, params, dec, _ = ring6
        X = enumerate_states(6)
        est = RerEstimator(dims=6, m=3, scheme="lie").fit(X)
        totals = state_totals(dec, params, LIE, "exact")
        assert est.coef_ == pytest.approx(totals.mean(), rel=1e-12)
        np.testing.assert_allclose(est.predict([0.1, 0.2]), totals.mean() * np.array([0.1, 0.2]))
        assert est.variant_ == "exact"

    def test_partial_fit_and_hook(self):
        X = enumerate_states(6)
        a = RerEstimator(scheme="strang").fit(X[:20]).partial_fit(X[20:])
        b = RerEstimator(scheme="strang")
        for row in X:
            b(row, 0)
        assert a.coef_ == b.coef_
        assert a.variant_ == "conservative"

    def test_cache_agrees(self):
        X = enumerate_states(6)
        a = RerEstimator(scheme="strang", cache=True).fit(np.vstack([X, X]))
        b = RerEstimator(scheme="strang", cache=False).fit(np.vstack([X, X]))
        assert a.coef_ == b.coef_

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            RerEstimator().fit(np.zeros((3, 5)))
        with pytest.raises(ValueError):
            RerEstimator().fit(np.full((3, 6), 2))
        with pytest.raises(ValueError):
            RerEstimator(variant="bogus").fit(np.zeros((3, 6)))


class TestDerived:
    def test_dt_for_tolerance(self):
        assert dt_for_tolerance(0.1, 1, 1e-3) == pytest.approx(1e-2)
        assert dt_for_tolerance(0.01, 2, 1e-4) == pytest.approx(0.1)
        assert dt_for_tolerance(1e-6, 2, 1.0) == 1.0
        with pytest.raises(ValueError):
            dt_for_tolerance(0.0, 1, 1e-3)

    def test_info_criterion(self):
        assert info_criterion(0.1, (0.124, 1), (0.0279, 3)) == pytest.approx(0.0124 - 0.0000279)
        with pytest.raises(ValueError):
            info_criterion(1.5, (1, 1), (1, 2))

    def test_crossover(self):
        dt = crossover_dt((0.01, 1), (0.4, 2))
        assert dt == pytest.approx(0.025)
        assert info_criterion(dt, (0.01, 1), (0.4, 2)) == pytest.approx(0.0, abs=1e-15)
        assert crossover_dt((1, 2), (2, 2)) is None
