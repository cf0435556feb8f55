"""Dense-matrix reference engine for small chains.

Everything here works on explicit ``n x n`` matrices and is exact up to
floating point. Transition matrices carry their offset from the identity
(``P - I``) alongside the probabilities so that differences between two
nearby one-step matrices keep full relative precision at small time steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import (AbsoluteContinuityError, ConvergenceError,
                     ReducibleChainError, TheoremInapplicable)
from .model import DenseGenerator, SchemeKind, SchemeSpec
from .validation import check_distribution, check_stochastic_matrix, check_timestep

MAX_DENSE_STATES = 4096
ZERO_PROB = 1e-300
RICHARDSON_LEVELS = tuple(range(6, 13))


# ---------------------------------------------------------------------------
# transition matrices

@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic one-step matrix built at time step ``dt``.

    Attributes
    ----------
    probs : ndarray
        Transition probabilities.
    dt : float
        Time step the matrix represents.
    offset : ndarray
        ``probs - I`` kept to full relative precision.
    """

    probs: np.ndarray
    dt: float = 1.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.offset is None:
            probs = check_stochastic_matrix(self.probs)
            offset = probs - np.eye(probs.shape[0])
        else:
            offset = np.array(self.offset, dtype=np.float64)
            probs = check_stochastic_matrix(np.eye(offset.shape[0]) + offset)
            # keep the offset consistent with any clamping
            off_diag = ~np.eye(offset.shape[0], dtype=bool)
            offset[off_diag] = probs[off_diag]
        probs.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def __matmul__(self, other: "TransitionMatrix") -> "TransitionMatrix":
        E, F = self.offset, other.offset
        return TransitionMatrix(None, self.dt + other.dt, E + F + E @ F)

    def power(self, n: int) -> "TransitionMatrix":
        """``n``-fold product, by binary powering on the offsets."""
        if n < 0:
            raise ValueError("n must be non-negative")
        size = self.n_states
        result = np.zeros((size, size))
        base = self.offset
        while n:
            if n & 1:
                result = result + base + result @ base
            n >>= 1
            if n:
                base = 2 * base + base @ base
        return TransitionMatrix(None, self.dt, result)


def as_transition(P, dt: float | None = None) -> TransitionMatrix:
    if isinstance(P, TransitionMatrix):
        return P
    return TransitionMatrix(np.asarray(P, dtype=np.float64), 1.0 if dt is None else dt)


def _as_generator(gen) -> DenseGenerator:
    if isinstance(gen, DenseGenerator):
        return gen
    return DenseGenerator(gen)


def _check_size(n: int):
    if n > MAX_DENSE_STATES:
        raise ValueError(f"dense engine is capped at {MAX_DENSE_STATES} states, got {n}")


def _expm_offset(A: np.ndarray) -> np.ndarray:
    """``exp(A) - I`` by scaling and squaring of the Taylor series."""
    n = A.shape[0]
    norm = np.abs(A).sum(axis=1).max() if n else 0.0
    if norm == 0.0:
        return np.zeros_like(A)
    s = max(0, int(math.ceil(math.log2(norm / 0.5))))
    B = A / (2.0 ** s)
    S = B.copy()
    term = B.copy()
    for k in range(2, 60):
        term = term @ B / k
        if np.abs(term).max() <= 1e-16 * np.abs(S).max():
            S += term
            break
        S += term
    for _ in range(s):
        S = 2.0 * S + S @ S
    return S


def expm(gen, t: float) -> TransitionMatrix:
    """Transition matrix ``exp(t L)`` of a generator.

    Parameters
    ----------
    gen : DenseGenerator or array_like
        Rate matrix; validated if given as an array.
    t : float
        Non-negative time.
    """
    gen = _as_generator(gen)
    _check_size(gen.n_states)
    t = float(t)
    if t < 0:
        raise ValueError("t must be non-negative")
    return TransitionMatrix(None, t, _expm_offset(gen.rates * t))


def scheme_matrix(L1, L2, scheme: SchemeSpec, dt: float) -> TransitionMatrix:
    """One-step matrix of a splitting scheme.

    The sub-step exponentials are multiplied in ``scheme.steps`` order, so
    the forward Lie scheme gives ``exp(dt L1) exp(dt L2)``.
    """
    L1, L2 = _as_generator(L1), _as_generator(L2)
    if L1.n_states != L2.n_states:
        raise ValueError(f"dimension mismatch: {L1.n_states} vs {L2.n_states}")
    dt = check_timestep(dt)
    gens = {1: L1, 2: L2}
    # zero factors are dropped and neighbouring factors of one group merged,
    # both exact identities, so degenerate splittings reproduce expm bit for bit
    merged: list[list] = []
    for group, frac in scheme.steps:
        if not np.any(gens[group].rates):
            continue
        if merged and merged[-1][0] == group:
            merged[-1][1] += frac
        else:
            merged.append([group, frac])
    cache = {}
    R = np.zeros((L1.n_states, L1.n_states))
    for group, frac in merged:
        key = (group, frac)
        if key not in cache:
            cache[key] = _expm_offset(gens[group].rates * (frac * dt))
        E = cache[key]
        R = R + E + R @ E
    return TransitionMatrix(None, dt, R)


# ---------------------------------------------------------------------------
# stationary laws

def _graph(probs: np.ndarray) -> csr_matrix:
    return csr_matrix(probs > 0)


def check_ergodic(P) -> None:
    """Raise :class:`ReducibleChainError` unless ``P`` is irreducible and aperiodic."""
    probs = as_transition(P).probs
    g = _graph(probs)
    n_comp, labels = connected_components(g, directed=True, connection="strong")
    if n_comp > 1:
        comps = [np.flatnonzero(labels == k).tolist() for k in range(n_comp)]
        raise ReducibleChainError(f"chain is reducible; strongly connected components: {comps}",
                                  components=comps)
    # period = gcd of level differences along edges of a BFS tree
    dist = shortest_path(g, directed=True, unweighted=True, indices=0)
    rows, cols = g.nonzero()
    diffs = (dist[rows] + 1 - dist[cols]).astype(np.int64)
    period = int(np.gcd.reduce(np.abs(diffs))) if diffs.size else 0
    if period != 1:
        raise ReducibleChainError(f"chain is periodic with period {period}")


def stationary(P, tol: float = 1e-13, max_squarings: int = 64) -> np.ndarray:
    """Unique stationary law of an ergodic transition matrix.

    Power iteration from the uniform law. When an iteration does not meet
    the L1 tolerance the iteration matrix is squared, so slowly mixing
    chains (small time steps) converge in logarithmically many rounds.
    """
    P = as_transition(P)
    check_ergodic(P)
    n = P.n_states
    v = np.full(n, 1.0 / n)
    E = P.offset.copy()
    for _ in range(max_squarings):
        for _ in range(4):
            step = v @ E
            v = v + step
            v = np.clip(v, 0.0, None)
            v /= v.sum()
            if np.abs(step).sum() < tol:
                return _polish(v, P.offset, tol)
        E = 2.0 * E + E @ E
    raise ConvergenceError("stationary iteration did not converge")


def _polish(v, E, tol):
    for _ in range(8):
        step = v @ E
        v = np.clip(v + step, 0.0, None)
        v /= v.sum()
        if np.abs(step).sum() < tol:
            break
    return v


def generator_stationary(gen) -> np.ndarray:
    """Stationary law of a continuous-time chain (null left vector of ``L``)."""
    gen = _as_generator(gen)
    scale = max(1.0, gen.total_rates.max())
    return stationary(expm(gen, 1.0 / scale))


# ---------------------------------------------------------------------------
# relative entropy

def _phi(x: np.ndarray) -> np.ndarray:
    """``(1 + x) log(1 + x) - x``, accurate near zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = np.abs(x) < 0.05
    xs = x[small]
    acc = np.zeros_like(xs)
    pw = xs * xs
    for k in range(2, 18):
        acc += (1 if k % 2 == 0 else -1) * pw / (k * (k - 1))
        pw = pw * xs
    out[small] = acc
    xl = x[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = (1.0 + xl) * np.log1p(xl) - xl
    out[~small] = np.where(xl <= -1.0, 1.0, vals)
    return out


def kl_rows(Q, P) -> np.ndarray:
    """Per-row divergence ``sum_j Q_ij log(Q_ij / P_ij)`` for every row.

    Rows where ``Q`` charges a transition that ``P`` forbids get ``inf``.
    """
    Q, P = as_transition(Q), as_transition(P)
    if Q.n_states != P.n_states:
        raise ValueError("dimension mismatch")
    p = P.probs
    q = Q.probs
    d = Q.offset - P.offset
    pos = p > ZERO_PROB
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * _phi(d[pos] / p[pos])
    bad = (~pos) & (q > ZERO_PROB)
    rows = terms.sum(axis=1)
    rows[bad.any(axis=1)] = np.inf
    return rows


def rer(Q, P, sampling=None, dt: float | None = None) -> float:
    """Relative entropy rate of ``Q`` with respect to ``P`` per unit time.

    Parameters
    ----------
    Q, P : TransitionMatrix
        Approximating and reference one-step matrices.
    sampling : array_like, optional
        Law of the current state; defaults to the stationary law of ``Q``.
    dt : float, optional
        Time step used for normalisation; defaults to ``Q.dt``.
    """
    Q, P = as_transition(Q), as_transition(P)
    dt = Q.dt if dt is None else float(dt)
    mu = stationary(Q) if sampling is None else check_distribution(sampling, Q.n_states, "sampling")
    rows = kl_rows(Q, P)
    support = mu > 0
    if np.isinf(rows[support]).any():
        bad = (P.probs <= ZERO_PROB) & (Q.probs > ZERO_PROB) & support[:, None]
        i, j = (int(k) for k in np.argwhere(bad)[0])
        raise AbsoluteContinuityError(f"Q({i},{j}) > 0 but P({i},{j}) = 0", pair=(i, j))
    return float(mu[support] @ rows[support]) / dt


def kl_divergence(nu, mu) -> float:
    """Relative entropy of ``nu`` with respect to ``mu``."""
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    pos = nu > 0
    if np.any(mu[pos] <= 0):
        raise AbsoluteContinuityError("nu charges a state that mu does not")
    return float(np.sum(nu[pos] * np.log(nu[pos] / mu[pos])))


def path_relative_entropy(Q, P, nu0, mu0, M: int) -> float:
    """Relative entropy of the ``M``-step path law of ``Q`` against ``P``.

    ``nu0`` is the initial law of the ``Q`` path and ``mu0`` that of the
    ``P`` path. By the chain rule the result is the initial divergence plus
    ``dt * H_{nu_i}(Q|P)`` summed over steps, with ``nu_i = nu0 Q^(i-1)``.
    """
    Q, P = as_transition(Q), as_transition(P)
    if int(M) < 1:
        raise ValueError("M must be at least 1")
    nu = check_distribution(nu0, Q.n_states, "nu0")
    mu0 = check_distribution(mu0, Q.n_states, "mu0")
    total = kl_divergence(nu, mu0)
    for _ in range(int(M)):
        total += rer(Q, P, sampling=nu, dt=1.0)
        nu = nu @ Q.probs
        nu = np.clip(nu, 0, None) / nu.sum()
    return total


# ---------------------------------------------------------------------------
# commutators, connectivity and orders

@dataclass(frozen=True)
class CommutatorReport:
    """Leading Taylor coefficient of the exact minus the scheme matrix.

    Attributes
    ----------
    C : ndarray
        Coefficient of ``dt**p`` in ``exp(dt L) - scheme(dt)``.
    p : int
    residual : float
        Error estimate of the extrapolated ``C`` (max norm).
    formula : ndarray
        Closed commutator formula for the same coefficient.
    formula_gap : float
        ``max |C - formula|``.
    lie_sign : int
        For the first-order scheme, the sign ``s`` with ``C = s [L1, L2] / 2``.
    """

    C: np.ndarray
    p: int
    residual: float
    formula: np.ndarray
    formula_gap: float
    lie_sign: int = 0


def commutator_bracket(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A @ B - B @ A


def scheme_taylor(L1, L2, scheme: SchemeSpec, order: int) -> list[np.ndarray]:
    """Taylor coefficients ``T_0 .. T_order`` of the scheme matrix in ``dt``."""
    gens = {1: _as_generator(L1).rates, 2: _as_generator(L2).rates}
    n = gens[1].shape[0]
    result = [np.eye(n)] + [np.zeros((n, n)) for _ in range(order)]
    for group, frac in scheme.steps:
        A = frac * gens[group]
        factor = [np.eye(n)]
        for k in range(1, order + 1):
            factor.append(factor[-1] @ A / k)
        new = [np.zeros((n, n)) for _ in range(order + 1)]
        for i in range(order + 1):
            for j in range(order + 1 - i):
                new[i + j] += result[i] @ factor[j]
        result = new
    return result


def exact_taylor(L, order: int) -> list[np.ndarray]:
    A = _as_generator(L).rates
    out = [np.eye(A.shape[0])]
    for k in range(1, order + 1):
        out.append(out[-1] @ A / k)
    return out


def commutator_formula(L1, L2, scheme: SchemeSpec) -> np.ndarray:
    """Closed form of the leading coefficient of ``exp(dt L) - scheme``."""
    A, B = _as_generator(L1).rates, _as_generator(L2).rates
    if scheme.kind is SchemeKind.LIE:
        sign = -1.0 if scheme.steps[0][0] == 1 else 1.0
        return sign * 0.5 * commutator_bracket(A, B)
    first = scheme.steps[0][0]
    X, Y = (A, B) if first == 1 else (B, A)
    return (commutator_bracket(X, commutator_bracket(X, Y))
            - 2.0 * commutator_bracket(Y, commutator_bracket(Y, X))) / 24.0


def _check_split(L, L1, L2):
    L, L1, L2 = _as_generator(L), _as_generator(L1), _as_generator(L2)
    scale = max(1.0, np.abs(L.rates).max())
    if np.abs(L.rates - L1.rates - L2.rates).max() > 1e-12 * scale:
        raise ValueError("L is not the sum of L1 and L2")
    return L, L1, L2


def richardson(values: Sequence[np.ndarray], ratio: float = 2.0,
               floors: Sequence[float] | None = None) -> tuple[np.ndarray, float]:
    """Extrapolate ``D(h) = C + a1 h + a2 h^2 + ...`` to ``h = 0``.

    ``values`` are evaluations on ``h_k = h_0 / ratio**k``. Returns the best
    tableau entry and its error estimate, taken as the larger of the two
    neighbouring differences plus the round-off floor of its inputs.
    """
    levels = len(values)
    floors = [0.0] * levels if floors is None else list(floors)
    T = [[np.asarray(values[i], dtype=np.float64)] for i in range(levels)]
    best, best_err = T[-1][0], np.inf
    for i in range(1, levels):
        for j in range(1, i + 1):
            f = ratio ** j
            T[i].append(T[i][j - 1] + (T[i][j - 1] - T[i - 1][j - 1]) / (f - 1.0))
            err = np.abs(T[i][j] - T[i][j - 1]).max()
            if j < i:
                err = max(err, np.abs(T[i][j] - T[i - 1][j]).max())
            err += floors[i] * (2.0 ** j)
            if err < best_err:
                best, best_err = T[i][j], err
    return best, float(best_err)


def _richardson_coefficient(diff_fn, p: int, scale: float):
    # shrink the steps for stiff chains so that h * |L| <= 1/4 on the coarsest level
    shift = max(0, math.ceil(math.log2(scale * 2.0 ** -RICHARDSON_LEVELS[0] * 4))) if scale > 0 else 0
    hs = [2.0 ** (-k - shift) for k in RICHARDSON_LEVELS]
    vals = [diff_fn(h) / h ** p for h in hs]
    eps = np.finfo(float).eps
    floors = [8 * eps * max(1.0, scale * h) / h ** p for h in hs]
    return richardson(vals, 2.0, floors)


def commutator(L, L1, L2, scheme: SchemeSpec) -> CommutatorReport:
    """Extract the ``dt**p`` coefficient of ``exp(dt L) - scheme(dt)``.

    Richardson extrapolation on ``dt = 2**-k``, ``k = 6..12``, shifted to
    smaller steps when the rates are large. The result is
    compared with the closed commutator formula of the scheme.
    """
    L, L1, L2 = _check_split(L, L1, L2)
    _check_size(L.n_states)
    p = scheme.p
    scale = np.abs(L.rates).sum(axis=1).max()

    def diff(h):
        return expm(L, h).offset - scheme_matrix(L1, L2, scheme, h).offset

    C, resid = _richardson_coefficient(diff, p, scale)
    formula = commutator_formula(L1, L2, scheme)
    gap = float(np.abs(C - formula).max())
    sign = 0
    if scheme.kind is SchemeKind.LIE:
        half = 0.5 * commutator_bracket(L1.rates, L2.rates)
        if np.abs(half).max() > 0:
            sign = 1 if np.abs(C - half).max() <= np.abs(C + half).max() else -1
    return CommutatorReport(C=C, p=p, residual=resid, formula=formula,
                            formula_gap=gap, lie_sign=sign)


@dataclass(frozen=True)
class ConnectivityReport:
    """Geodesic distances of the rate graph.

    Attributes
    ----------
    dist : ndarray
        Shortest directed path lengths, ``inf`` where unreachable.
    diameter : int
        Largest finite distance.
    k_hat : int
        ``min(diameter, p)``.
    """

    dist: np.ndarray
    diameter: int
    k_hat: int


def connectivity(gen, p: int) -> ConnectivityReport:
    """Breadth-first distances over the edges with positive rate."""
    gen = _as_generator(gen)
    adj = gen.rates > 0
    np.fill_diagonal(adj, False)
    dist = shortest_path(csr_matrix(adj), directed=True, unweighted=True)
    finite = dist[np.isfinite(dist)]
    diameter = int(finite.max()) if finite.size else 0
    return ConnectivityReport(dist=dist, diameter=diameter, k_hat=min(diameter, int(p)))


def commutator_threshold(report: CommutatorReport) -> float:
    return max(10.0 * report.residual, 1e-9 * max(1.0, float(np.abs(report.C).max())))


def predict_order(conn: ConnectivityReport, comm: CommutatorReport) -> int:
    """Exponent ``2p - (k_hat + 1)`` of the normalised RER.

    Raises
    ------
    TheoremInapplicable
        If no pair at distance ``k_hat`` has a nonzero commutator entry.
    """
    at_k = conn.dist == conn.k_hat
    if not np.any(np.abs(comm.C[at_k]) > commutator_threshold(comm)):
        raise TheoremInapplicable("no nonzero commutator entry at distance k_hat; theorem inapplicable")
    return 2 * comm.p - (conn.k_hat + 1)


@dataclass(frozen=True)
class OrderFit:
    """Power-law fit ``H(dt) ~ dt**slope``.

    Attributes
    ----------
    slope : float
        Least-squares slope of ``log H`` against ``log dt``.
    coeffs : ndarray
        Coefficients of ``H / dt**order`` as a polynomial in ``dt``, constant
        term first.
    grid : ndarray
        Time steps used, increasing.
    rsq : float
        Coefficient of determination of the log-log line.
    order : int
        ``round(slope)``.
    """

    slope: float
    coeffs: np.ndarray
    grid: np.ndarray
    rsq: float
    order: int

    @property
    def leading(self) -> float:
        return float(self.coeffs[0])


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """Fit ``y = dt**k * (c0 + c1 dt + ...)`` with ``k`` the rounded log-log slope.

    Parameters
    ----------
    degree : int or None
        Polynomial degree for the correction; ``None`` uses
        ``min(3, n_samples - 2)``.
    order : int or None
        Fix the exponent instead of rounding the fitted slope.
    """

    def __init__(self, degree: int | None = None, order: int | None = None):
        self.degree = degree
        self.order = order

    def fit(self, X, y):
        dt = np.asarray(X, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if dt.size != y.size:
            raise ValueError("X and y lengths differ")
        if dt.size < 4:
            raise ValueError("need at least 4 samples")
        if np.any(~np.isfinite(y)) or np.any(y <= 0):
            raise ValueError("all H values must be positive")
        if np.any(dt <= 0) or np.any(dt >= 1):
            raise ValueError("all dt must lie in (0, 1)")
        order_idx = np.argsort(dt)
        dt, y = dt[order_idx], y[order_idx]
        if np.any(np.diff(dt) <= 0):
            raise ValueError("dt values must be distinct")
        lx, ly = np.log(dt), np.log(y)
        slope, intercept = np.polyfit(lx, ly, 1)
        resid = ly - (slope * lx + intercept)
        ss_tot = np.sum((ly - ly.mean()) ** 2)
        self.slope_ = float(slope)
        self.intercept_ = float(intercept)
        self.rsq_ = float(1.0 - resid @ resid / ss_tot) if ss_tot > 0 else 1.0
        self.order_ = int(round(slope)) if self.order is None else int(self.order)
        deg = min(3, dt.size - 2) if self.degree is None else int(self.degree)
        self.coef_ = np.polyfit(dt, y / dt ** self.order_, deg)[::-1].copy()
        self.grid_ = dt
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        dt = np.asarray(X, dtype=np.float64).reshape(-1)
        return dt ** self.order_ * np.polynomial.polynomial.polyval(dt, self.coef_)

    def to_fit(self) -> OrderFit:
        check_is_fitted(self, "coef_")
        return OrderFit(slope=self.slope_, coeffs=self.coef_, grid=self.grid_,
                        rsq=self.rsq_, order=self.order_)


def fit_order(samples, degree: int | None = None, order: int | None = None) -> OrderFit:
    """Fit the observable order of ``H`` from ``(dt, H)`` pairs."""
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be (dt, H) pairs")
    return PowerLawRegressor(degree=degree, order=order).fit(arr[:, 0], arr[:, 1]).to_fit()


def dyadic_grid(k_min: int, k_max: int) -> np.ndarray:
    """``2**-k`` for ``k = k_max .. k_min``, increasing."""
    return 2.0 ** -np.arange(k_max, k_min - 1, -1, dtype=np.float64)


def rer_curve(L, L1, L2, scheme: SchemeSpec, grid, sampling: str | np.ndarray = "stationary"):
    """Normalised RER of the scheme against the exact chain on a grid of steps."""
    L = _as_generator(L)
    out = []
    for dt in grid:
        P = expm(L, dt)
        Q = scheme_matrix(L1, L2, scheme, dt)
        if isinstance(sampling, str):
            if sampling == "stationary":
                mu = None
            elif sampling == "uniform":
                mu = np.full(L.n_states, 1.0 / L.n_states)
            elif sampling == "exact":
                mu = stationary(P)
            else:
                raise ValueError(f"unknown sampling {sampling!r}")
        else:
            mu = sampling
        out.append(rer(Q, P, mu))
    return np.asarray(out)


def local_error(L, L1, L2, scheme: SchemeSpec, dt: float) -> float:
    """Max-norm one-step error of the scheme."""
    return float(np.abs(expm(L, dt).offset - scheme_matrix(L1, L2, scheme, dt).offset).max())


def trotter_error(L, L1, L2, scheme: SchemeSpec, T: float, n: int) -> float:
    """Max-norm error of ``n`` scheme steps of size ``T / n`` over time ``T``."""
    step = scheme_matrix(L1, L2, scheme, T / n)
    return float(np.abs(step.power(n).offset - expm(L, T).offset).max())


# ---------------------------------------------------------------------------
# leading coefficient of the RER

def leading_divergence(c, lq) -> np.ndarray:
    """Leading coefficient of ``Pb log(Pb / Po) - Pb + Po`` at one target.

    With ``Po = a dt^p`` and ``Pb = b dt^p`` to leading order, ``c = a - b``
    and ``lq = b``. The term equals ``b log(b / a) - b + a``, written as
    ``c M - 2 lq (artanh M - M)`` with ``M = c / (2 lq + c)``. The limit
    ``lq -> 0`` gives ``c``.
    """
    c = np.asarray(c, dtype=np.float64)
    lq = np.asarray(lq, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        M = np.where(c == 0, 0.0, c / (2.0 * lq + c))
        # artanh M = log(a / b) / 2, which stays finite when M rounds to 1
        ratio = c / lq
        at = np.where(np.isfinite(ratio), 0.5 * np.log1p(ratio),
                      0.5 * (np.log(lq + c) - np.log(lq)))
        small = np.abs(M) < 1e-3
        # artanh M - M = M^3/3 + M^5/5 + ...
        gap = np.where(small, M ** 3 / 3 + M ** 5 / 5 + M ** 7 / 7, at - M)
        val = c * M - 2.0 * lq * gap
        val = np.where(lq == 0, np.where(c > 0, c, 0.0), val)
    return val


def chi2_divergence(c, lq) -> np.ndarray:
    """Chi-square upper bound ``c**2 / (lq + c)`` of :func:`leading_divergence`."""
    c = np.asarray(c, dtype=np.float64)
    lq = np.asarray(lq, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(c == 0, 0.0, c * c / (lq + c))


def leading_rer_coefficient(L, L1, L2, scheme: SchemeSpec, sampling=None) -> tuple[float, int]:
    """Exact leading coefficient and exponent of the normalised RER.

    Targets at geodesic distance ``k_hat`` carry the leading term. For
    ``k_hat = p`` each contributes :func:`leading_divergence` of the
    ``dt**p`` coefficients; for ``k_hat < p`` it is ``C**2 / (2 b)`` with
    ``b`` the ``dt**k_hat`` coefficient of the scheme matrix.

    Returns
    -------
    coeff : float
    order : int
        ``2p - (k_hat + 1)``.
    """
    L, L1, L2 = _check_split(L, L1, L2)
    p = scheme.p
    conn = connectivity(L, p)
    k = conn.k_hat
    mu = generator_stationary(L) if sampling is None else check_distribution(sampling, L.n_states)
    Tq = scheme_taylor(L1, L2, scheme, p)
    To = exact_taylor(L, p)
    C = To[p] - Tq[p]
    mask = conn.dist == k
    if k == p:
        terms = np.where(mask, leading_divergence(C, Tq[p]), 0.0)
    else:
        b = Tq[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(mask & (C != 0), C * C / (2.0 * b), 0.0)
    return float(mu @ terms.sum(axis=1)), 2 * p - (k + 1)


# ---------------------------------------------------------------------------
# uncertainty bounds for observables

def _tilted_log_radius(P: np.ndarray, w: np.ndarray, max_squarings: int = 80) -> float:
    """``log`` spectral radius of ``P diag(w)`` by repeated normalised squaring."""
    M = P * w[None, :]
    s = M.sum(axis=1).max()
    if s <= 0:
        return -np.inf
    M = M / s
    log_scale, n = math.log(s), 1.0
    prev = np.inf
    for _ in range(max_squarings):
        est = (log_scale + math.log(M.sum(axis=1).max())) / n
        if abs(est - prev) < 1e-15 * max(1.0, abs(est)):
            return est
        prev = est
        M = M @ M
        nrm = M.max()
        if nrm <= 0 or not np.isfinite(nrm):
            raise ConvergenceError("tilted power iteration broke down")
        M /= nrm
        log_scale = 2.0 * log_scale + math.log(nrm)
        n *= 2.0
    if abs(est - prev) < 1e-10 * max(1.0, abs(est)):
        return est
    raise ConvergenceError("tilted power iteration did not converge")


def tilted_eigenvalue(P, f, c: float, mu=None) -> float:
    """Log of the largest eigenvalue of ``P(x, y) exp(c (f(y) - E_mu f))``.

    ``mu`` defaults to the stationary law of ``P``.
    """
    P = as_transition(P)
    if mu is None:
        mu = stationary(P)
    else:
        check_ergodic(P)
    f = np.asarray(f, dtype=np.float64).ravel()
    return _tilted(P, f - mu @ f, c)


def _tilted(P: TransitionMatrix, fbar: np.ndarray, c: float) -> float:
    if c == 0 or np.all(fbar == 0):
        return 0.0
    z = c * fbar
    top = z.max()
    return float(top + _tilted_log_radius(P.probs, np.exp(z - top)))


def _golden_min(fn, lo: float, hi: float, max_iter: int = 200, tol: float = 1e-8):
    """Minimise a unimodal function on ``[lo, hi]`` by golden-section search."""
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(max_iter):
        if b - a < tol:
            x = 0.5 * (a + b)
            return x, min(fn(x), f1, f2)
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = fn(x2)
    raise ConvergenceError("golden-section search did not converge")


def goal_oriented_bounds(Q, P, f, c_range=(1e-3, 1e3), H: float | None = None) -> tuple[float, float]:
    """Interval guaranteed to contain the stationary mean gap of ``f``.

    Returns ``(xi_minus, xi_plus)`` with
    ``xi_minus <= E_{mu_Q} f - E_{mu_P} f <= xi_plus``, where
    ``xi_plus = inf_c (lambda(c) + dt H) / c`` and
    ``xi_minus = -inf_c (lambda(-c) + dt H) / c``.
    """
    Q, P = as_transition(Q), as_transition(P)
    f = np.asarray(f, dtype=np.float64).ravel()
    mu_p = stationary(P)
    fbar = f - mu_p @ f
    h_step = (rer(Q, P) * Q.dt) if H is None else float(H) * Q.dt
    if h_step == 0.0 or np.all(fbar == 0):
        return 0.0, 0.0
    lo, hi = math.log(c_range[0]), math.log(c_range[1])

    def objective(sign):
        def fn(logc):
            c = math.exp(logc)
            return (_tilted(P, fbar, sign * c) + h_step) / c
        return fn

    out = []
    for sign in (1.0, -1.0):
        fn = objective(sign)
        # coarse scan brackets the minimum before refining
        xs = np.linspace(lo, hi, 25)
        vals = [fn(x) for x in xs]
        k = int(np.argmin(vals))
        a, b = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
        _, best = _golden_min(fn, a, b)
        out.append(min(best, vals[k]))
    return -out[1], out[0]


def autocovariance_sum(P, f, max_lag: int | None = None, tol: float = 1e-12,
                       lag_cap: int = 10_000_000) -> float:
    """Integrated autocovariance ``sum_{k=-K..K} E[fbar(X_k) fbar(X_0)]`` under ``mu_P``."""
    P = as_transition(P)
    f = np.asarray(f, dtype=np.float64).ravel()
    mu = stationary(P)
    fbar = f - mu @ f
    weighted = mu * fbar
    g = fbar.copy()
    total = float(weighted @ g)
    k = 0
    while True:
        k += 1
        g = g + P.offset @ g
        ck = float(weighted @ g)
        total += 2.0 * ck
        if max_lag is not None:
            if k >= max_lag:
                break
        elif abs(ck) < tol:
            break
        if k >= lag_cap:
            raise ConvergenceError("autocorrelation did not decay before the lag cap")
    return max(total, 0.0)


def linearized_bound(Q, P, f, K: int | None = None) -> float:
    """Linearised bound ``sqrt(v) sqrt(2 dt H)`` on the stationary mean gap."""
    Q, P = as_transition(Q), as_transition(P)
    H = rer(Q, P)
    if H == 0.0:
        return 0.0
    v = autocovariance_sum(P, f, max_lag=K)
    return float(math.sqrt(v) * math.sqrt(2.0 * Q.dt * H))
