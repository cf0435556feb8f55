import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from sklearn.base import clone

from conftest import THREE_STATE_Q, random_generator
from splitmc import (LIE, STRANG, AbsoluteContinuityError, DenseGenerator, PowerLawRegressor,
                     ReducibleChainError, TheoremInapplicable, TransitionMatrix, commutator,
                     connectivity, expm, fit_order, goal_oriented_bounds, leading_rer_coefficient,
                     linearized_bound, path_relative_entropy, predict_order, rer, scheme_matrix,
                     stationary, tilted_eigenvalue)
from splitmc.exact import (autocovariance_sum, check_ergodic, dyadic_grid, generator_stationary,
                           kl_divergence, kl_rows, leading_divergence, local_error, rer_curve,
                           richardson, trotter_error)

# stationary law of the three-state chain, solved by hand
MU_THREE = np.array([4.0, 1.0, 9.0]) / 14.0
# leading coefficients from the single distance-2 transition 2 -> 1
LIE_REVERSE_COEFF = 9.0 / 14.0 * (math.log(2.0) - 0.5)
LIE_FORWARD_COEFF = 9.0 / 14.0 * 0.5
STRANG_COEFF = 25.0 / 896.0


def null_space_stationary(P):
    v = scipy.linalg.null_space(P.T - np.eye(P.shape[0]))[:, 0]
    return v / v.sum()


class TestExpm:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        Q = random_generator(rng, 6, density=0.6)
        for t in (1e-3, 0.1, 1.0, 7.5):
            np.testing.assert_allclose(expm(Q, t).probs, scipy.linalg.expm(Q * t), atol=1e-13)

    def test_offset_relative_precision(self):
        Q = THREE_STATE_Q
        t = 1e-9
        taylor = Q * t + Q @ Q * t ** 2 / 2 + Q @ Q @ Q * t ** 3 / 6
        np.testing.assert_allclose(expm(Q, t).offset, taylor, rtol=1e-12, atol=1e-30)

    def test_zero_time(self):
        np.testing.assert_array_equal(expm(THREE_STATE_Q, 0.0).probs, np.eye(3))

    def test_negative_time(self):
        with pytest.raises(ValueError):
            expm(THREE_STATE_Q, -1.0)

    def test_power_and_product(self):
        P = expm(THREE_STATE_Q, 0.1)
        np.testing.assert_allclose(P.power(10).probs, expm(THREE_STATE_Q, 1.0).probs, atol=1e-13)
        np.testing.assert_allclose((P @ P).probs, expm(THREE_STATE_Q, 0.2).probs, atol=1e-14)


class TestSchemeMatrix:
    def test_lie_forward_and_reverse(self, three_state):
        L, L1, L2 = three_state
        dt = 0.3
        E1, E2 = scipy.linalg.expm(L1.rates * dt), scipy.linalg.expm(L2.rates * dt)
        np.testing.assert_allclose(scheme_matrix(L1, L2, LIE, dt).probs, E1 @ E2, atol=1e-14)
        np.testing.assert_allclose(scheme_matrix(L1, L2, LIE.reversed(), dt).probs, E2 @ E1, atol=1e-14)

    def test_strang(self, three_state):
        L, L1, L2 = three_state
        dt = 0.3
        H1, E2 = scipy.linalg.expm(L1.rates * dt / 2), scipy.linalg.expm(L2.rates * dt)
        np.testing.assert_allclose(scheme_matrix(L1, L2, STRANG, dt).probs, H1 @ E2 @ H1, atol=1e-14)

    def test_unsplit_is_exact(self, three_state):
        L = three_state[0]
        zero = DenseGenerator(np.zeros((3, 3)))
        for scheme in (LIE, STRANG):
            Q = scheme_matrix(L, zero, scheme, 0.05)
            assert rer(Q, expm(L, 0.05)) == 0.0

    def test_rejects_large_dt(self, three_state):
        _, L1, L2 = three_state
        with pytest.raises(ValueError):
            scheme_matrix(L1, L2, LIE, 1.5)


class TestStationary:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_null_space(self, seed):
        rng = np.random.default_rng(seed)
        P = expm(random_generator(rng, 7), 0.2)
        np.testing.assert_allclose(stationary(P), null_space_stationary(P.probs), atol=1e-12)

    def test_three_state(self):
        np.testing.assert_allclose(generator_stationary(THREE_STATE_Q), MU_THREE, atol=1e-13)

    def test_small_step_converges(self):
        P = expm(THREE_STATE_Q, 2.0 ** -14)
        np.testing.assert_allclose(stationary(P), MU_THREE, atol=1e-11)

    def test_reducible(self):
        P = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ReducibleChainError) as info:
            stationary(P)
        assert sorted(map(sorted, info.value.components)) == [[0, 1], [2]]

    def test_periodic(self):
        with pytest.raises(ReducibleChainError):
            check_ergodic(np.array([[0.0, 1.0], [1.0, 0.0]]))


class TestRelativeEntropy:
    def test_direct_formula(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Q = rng.dirichlet(np.ones(4), size=4)
            P = rng.dirichlet(np.ones(4), size=4)
            mu = rng.dirichlet(np.ones(4))
            direct = sum(mu[i] * Q[i, j] * math.log(Q[i, j] / P[i, j])
                         for i in range(4) for j in range(4))
            assert rer(Q, P, mu) == pytest.approx(direct, rel=1e-12, abs=1e-15)

    def test_normalised_by_dt(self):
        P = expm(THREE_STATE_Q, 0.1)
        Q = expm(THREE_STATE_Q * 1.1, 0.1)
        mu = stationary(Q)
        assert rer(Q, P) == pytest.approx(kl_rows(Q, P) @ mu / 0.1, rel=1e-12)

    def test_identical_is_zero(self):
        P = expm(THREE_STATE_Q, 0.1)
        assert rer(P, P) == 0.0

    def test_absolute_continuity(self):
        P = np.array([[0.5, 0.5], [1.0, 0.0]])
        Q = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(AbsoluteContinuityError) as info:
            rer(Q, P, [0.5, 0.5])
        assert info.value.pair == (1, 1)

    def test_absent_target_gives_plain_term(self, three_state):
        # forward Lie never reaches 2 -> 1 at second order, leaving the exact mass
        L, L1, L2 = three_state
        coeff, order = leading_rer_coefficient(L, L1, L2, LIE)
        assert order == 1
        assert coeff == pytest.approx(LIE_FORWARD_COEFF, rel=1e-12)

    def test_kl_divergence(self):
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(
            0.5 * math.log(2) + 0.5 * math.log(2 / 3))
        with pytest.raises(AbsoluteContinuityError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])

    def test_path_entropy_brute_force(self, three_state):
        L, L1, L2 = three_state
        P = expm(L, 0.05)
        Q = scheme_matrix(L1, L2, LIE.reversed(), 0.05)
        rng = np.random.default_rng(0)
        nu0, mu0 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        total = 0.0
        for path in itertools.product(range(3), repeat=4):
            q, p = nu0[path[0]], mu0[path[0]]
            for a, b in zip(path[:-1], path[1:]):
                q *= Q.probs[a, b]
                p *= P.probs[a, b]
            if q > 0:
                total += q * math.log(q / p)
        assert path_relative_entropy(Q, P, nu0, mu0, 3) == pytest.approx(total, abs=1e-12)


class TestCommutator:
    def test_lie_bracket(self, three_state):
        L, L1, L2 = three_state
        bracket = L1.rates @ L2.rates - L2.rates @ L1.rates
        rep = commutator(L, L1, L2, LIE)
        np.testing.assert_allclose(rep.C, -0.5 * bracket, atol=1e-7)
        assert rep.lie_sign == -1
        assert commutator(L, L1, L2, LIE.reversed()).lie_sign == 1

    @pytest.mark.parametrize("scheme", [LIE, STRANG, LIE.reversed()])
    def test_matches_finite_difference(self, three_state, scheme):
        L, L1, L2 = three_state
        rep = commutator(L, L1, L2, scheme)
        h = 1e-3
        fd = (scipy.linalg.expm(L.rates * h) - scheme_matrix(L1, L2, scheme, h).probs) / h ** scheme.p
        np.testing.assert_allclose(rep.C, fd, atol=50 * h)
        assert rep.formula_gap < 1e-6

    def test_rows_sum_to_zero(self, three_state):
        rep = commutator(*three_state, STRANG)
        np.testing.assert_allclose(rep.C.sum(axis=1), 0.0, atol=1e-6)

    def test_richardson_polynomial(self):
        vals = [np.array([3.0 + 2.0 * h - h ** 2 + 0.5 * h ** 3]) for h in 0.5 ** np.arange(6)]
        best, err = richardson(vals)
        assert best[0] == pytest.approx(3.0, abs=1e-12)
        assert err < 1e-10


class TestConnectivity:
    def test_three_state(self):
        conn = connectivity(THREE_STATE_Q, 2)
        assert conn.diameter == 2 and conn.k_hat == 2
        assert conn.dist[2, 1] == 2 and conn.dist[0, 1] == 1

    def test_floyd_warshall(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            Q = random_generator(rng, 7, density=0.3)
            D = np.where(Q > 0, 1.0, np.inf)
            np.fill_diagonal(D, 0.0)
            for k in range(7):
                D = np.minimum(D, D[:, [k]] + D[[k], :])
            np.testing.assert_array_equal(connectivity(Q, 3).dist, D)

    def test_predict_order(self, three_state):
        L, L1, L2 = three_state
        assert predict_order(connectivity(L, 2), commutator(L, L1, L2, LIE.reversed())) == 1
        assert predict_order(connectivity(L, 3), commutator(L, L1, L2, STRANG)) == 3

    def test_commuting_split_inapplicable(self, three_state):
        L = three_state[0]
        half = DenseGenerator(L.rates / 2)
        with pytest.raises(TheoremInapplicable):
            predict_order(connectivity(L, 2), commutator(L, half, half, LIE))


class TestFit:
    def test_recovers_power_law(self):
        g = dyadic_grid(3, 9)
        fit = fit_order(zip(g, 0.7 * g ** 2 - 0.2 * g ** 3))
        assert fit.order == 2
        assert fit.coeffs[0] == pytest.approx(0.7, rel=1e-9)
        assert fit.coeffs[1] == pytest.approx(-0.2, rel=1e-7)

    def test_regressor_api(self):
        g = dyadic_grid(3, 9)
        reg = PowerLawRegressor(degree=2).fit(g, 3 * g)
        assert clone(reg).get_params() == {"degree": 2, "order": None}
        np.testing.assert_allclose(reg.predict([0.1]), [0.3], rtol=1e-9)
        assert reg.score(g, 3 * g) == pytest.approx(1.0)

    @pytest.mark.parametrize("bad", [[0.1, 0.2, 0.3], [0.1, 0.2, 0.3, 1.5]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            fit_order([(d, d) for d in bad])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fit_order([(0.1, 1.0), (0.2, 0.0), (0.3, 1.0), (0.4, 1.0)])


class TestLeadingCoefficient:
    def test_closed_forms(self, three_state):
        L, L1, L2 = three_state
        c, k = leading_rer_coefficient(L, L1, L2, LIE.reversed())
        assert (k, c) == (1, pytest.approx(LIE_REVERSE_COEFF, rel=1e-12))
        c, k = leading_rer_coefficient(L, L1, L2, STRANG)
        assert (k, c) == (3, pytest.approx(STRANG_COEFF, rel=1e-10))

    @pytest.mark.parametrize("scheme,coeff", [(LIE.reversed(), LIE_REVERSE_COEFF),
                                              (STRANG, STRANG_COEFF)])
    def test_small_step_limit(self, three_state, scheme, coeff):
        L, L1, L2 = three_state
        k = 1 if scheme.kind.value == "lie" else 3
        hs = 2.0 ** -np.arange(10, 14)
        ratios = rer_curve(L, L1, L2, scheme, hs) / hs ** k
        assert ratios[-1] == pytest.approx(coeff, rel=5e-4)

    def test_divergence_identity(self):
        rng = np.random.default_rng(5)
        b = rng.uniform(0.01, 3, 50)
        a = rng.uniform(0.01, 3, 50)
        np.testing.assert_allclose(leading_divergence(a - b, b), b * np.log(b / a) - b + a,
                                   rtol=1e-10, atol=1e-15)
        assert leading_divergence(2.0, 0.0) == 2.0


class TestLocalError:
    def test_lie_and_strang_orders(self, three_state):
        g = dyadic_grid(4, 9)
        lie = fit_order([(d, local_error(*three_state, LIE, d)) for d in g])
        strang = fit_order([(d, local_error(*three_state, STRANG, d)) for d in g])
        assert abs(lie.slope - 2.0) < 0.1
        assert abs(strang.slope - 3.0) < 0.1

    def test_trotter_halving(self, three_state):
        errs = [trotter_error(*three_state, LIE, 1.0, n) for n in (16, 32, 64, 128)]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        np.testing.assert_allclose(ratios, 2.0, atol=0.1)


class TestBounds:
    def test_tilted_eigenvalue(self):
        P = expm(THREE_STATE_Q, 0.2)
        f = np.array([1.0, -0.5, 2.0])
        mu = stationary(P)
        for c in (-2.0, 0.3, 4.0):
            tilt = P.probs * np.exp(c * (f - mu @ f))[None, :]
            expected = math.log(max(abs(np.linalg.eigvals(tilt))))
            assert tilted_eigenvalue(P, f, c) == pytest.approx(expected, rel=1e-10, abs=1e-13)

    def test_autocovariance_fundamental_matrix(self):
        P = expm(THREE_STATE_Q, 0.2)
        f = np.array([1.0, -0.5, 2.0])
        mu = stationary(P.probs)
        fbar = f - mu @ f
        Z = np.linalg.inv(np.eye(3) - P.probs + np.outer(np.ones(3), mu))
        expected = 2 * (mu * fbar) @ Z @ fbar - (mu * fbar) @ fbar
        assert autocovariance_sum(P, f) == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("scheme", [LIE, LIE.reversed(), STRANG])
    def test_contains_gap(self, three_state, scheme):
        L, L1, L2 = three_state
        P = expm(L, 0.1)
        Q = scheme_matrix(L1, L2, scheme, 0.1)
        for i in range(3):
            f = np.eye(3)[i]
            gap = stationary(Q) @ f - stationary(P) @ f
            lo, hi = goal_oriented_bounds(Q, P, f)
            assert lo <= gap <= hi
            assert abs(gap) <= linearized_bound(Q, P, f)

    def test_exact_scheme_zero_width(self, three_state):
        P = expm(three_state[0], 0.1)
        assert goal_oriented_bounds(P, P, [1.0, 0.0, 0.0]) == (0.0, 0.0)
        assert linearized_bound(P, P, [1.0, 0.0, 0.0]) == 0.0


def test_transition_matrix_validation():
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[1.2, -0.2], [0.5, 0.5]]))
