"""Simulation-time estimates of the leading RER coefficient on lattices.

For a splitting with local order ``p`` on a lattice whose rate graph has
diameter at least ``p``, the normalised RER behaves as
``coeff * dt**(p - 1)``. The coefficient is the stationary mean of a sum of
local terms, one per target configuration reachable by flipping an
admissible set of ``p`` sites. Each term depends only on the spins in a
small patch around those sites, so it can be averaged along a trajectory.

For a site set ``S`` let ``a`` and ``b`` be the ``dt**p`` coefficients of
the exact and the scheme transition probabilities from ``sigma`` to
``sigma`` with every site of ``S`` flipped, and ``c = a - b`` the local
commutator. The local term is ``b log(b / a) - b + a`` (the ``exact``
variant) or its chi-square upper bound ``c**2 / a`` (the ``conservative``
variant, which over-estimates the coefficient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations, permutations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exact import chi2_divergence, leading_divergence
from .lattice import Decomposition, checkerboard
from .model import ArrheniusRates, SchemeKind, SchemeSpec, SpinConfiguration, lattice
from .validation import check_configurations

VARIANTS = ("exact", "conservative")


def default_variant(scheme: SchemeSpec) -> str:
    return "conservative" if scheme.kind is SchemeKind.STRANG else "exact"


# ---------------------------------------------------------------------------
# local coefficients

@dataclass(frozen=True)
class LocalTerms:
    """Local coefficients for one target.

    Attributes
    ----------
    c : float
        Commutator ``a - b``.
    lq : float
        Scheme coefficient ``b``.
    f : float
        Contribution to the leading RER coefficient.
    """

    c: float
    lq: float
    f: float

    @property
    def a(self) -> float:
        return self.c + self.lq


@lru_cache(maxsize=4096)
def _stage_weight(groups: tuple[int, ...], steps: tuple[tuple[int, float], ...]) -> float:
    """Weight of one flip order in the ``dt**p`` coefficient of the scheme.

    The flips must be cut into consecutive blocks, one per sub-step, with
    every flip in a block belonging to that sub-step's group. A block of
    ``n`` flips in a sub-step of fraction ``f`` carries ``f**n / n!``.
    """
    n = len(groups)

    @lru_cache(maxsize=None)
    def w(pos, stage):
        if stage == len(steps):
            return 1.0 if pos == n else 0.0
        g, frac = steps[stage]
        total = w(pos, stage + 1)
        k = pos
        while k < n and groups[k] == g:
            k += 1
            total += frac ** (k - pos) / math.factorial(k - pos) * w(k, stage + 1)
        return total

    return w(0, 0)


class _LocalRates:
    """Flip rates read through an overlay of pending flips."""

    __slots__ = ("nbrs", "fill", "empty", "evals")

    def __init__(self, params: ArrheniusRates, nbrs):
        self.nbrs = nbrs
        self.fill = float(params.c1)
        k = np.arange(max(len(n) for n in nbrs) + 1)
        self.empty = (params.c2 * np.exp(-params.beta * (params.J0 * k + params.h))).tolist()
        self.evals = 0

    def rate(self, spins, flipped: set, x: int) -> float:
        self.evals += 1
        s = spins[x] ^ (x in flipped)
        if s == 0:
            return self.fill
        occ = 0
        for y in self.nbrs[x]:
            occ += spins[y] ^ (y in flipped)
        return self.empty[occ]


def _coefficients(spins, sites: tuple[int, ...], groups: tuple[int, ...], rates: _LocalRates,
                  steps) -> tuple[float, float]:
    """``dt**p`` coefficients ``(a, b)`` of the exact and scheme probabilities."""
    p = len(sites)
    a = 0.0
    b = 0.0
    for order in permutations(range(p)):
        flipped: set = set()
        prod = 1.0
        for i in order:
            prod *= rates.rate(spins, flipped, sites[i])
            flipped.add(sites[i])
        a += prod
        w = _stage_weight(tuple(groups[i] for i in order), steps)
        if w:
            b += prod * w
    return a / math.factorial(p), b


def _is_connected(sites, nbrs) -> bool:
    sites = list(sites)
    seen = {sites[0]}
    stack = [sites[0]]
    members = set(sites)
    while stack:
        x = stack.pop()
        for y in nbrs[x]:
            if y in members and y not in seen:
                seen.add(y)
                stack.append(y)
    return len(seen) == len(members)


def is_admissible(sites, decomposition: Decomposition, scheme: SchemeSpec) -> bool:
    """Whether a site set can carry a nonzero local commutator.

    The set must have ``p`` distinct sites, contain both groups and be
    connected through nearest-neighbour bonds.
    """
    sites = tuple(int(x) for x in sites)
    if len(set(sites)) != len(sites) or len(sites) != scheme.p:
        return False
    g = decomposition.site_groups
    if len({int(g[x]) for x in sites}) < 2:
        return False
    return _is_connected(sites, lattice(decomposition.dims).neighbors)


def admissible_tuples(decomposition: Decomposition, scheme: SchemeSpec) -> list[tuple[int, ...]]:
    """All admissible site sets, as sorted tuples in lexicographic order."""
    nbrs = lattice(decomposition.dims).neighbors
    g = decomposition.site_groups
    p = scheme.p
    found = set()
    # a connected set of size p lies within distance p - 1 of its smallest site
    for x in range(decomposition.n_sites):
        ball = {x}
        frontier = {x}
        for _ in range(p - 1):
            frontier = {y for z in frontier for y in nbrs[z]} - ball
            ball |= frontier
        for rest in combinations(sorted(ball - {x}), p - 1):
            t = tuple(sorted((x,) + rest))
            if t in found or t[0] != x:
                continue
            if len({int(g[s]) for s in t}) > 1 and _is_connected(t, nbrs):
                found.add(t)
    return sorted(found)


def all_tuples(n_sites: int, p: int) -> list[tuple[int, ...]]:
    return list(combinations(range(n_sites), p))


def _spins_of(sigma):
    if isinstance(sigma, SpinConfiguration):
        return sigma.spins.tolist()
    return np.asarray(sigma).astype(int).tolist()


def _local(sigma, sites, decomposition, params, scheme):
    sites = tuple(sorted(int(x) for x in sites))
    nbrs = lattice(decomposition.dims).neighbors
    groups = tuple(int(decomposition.site_groups[x]) for x in sites)
    return _coefficients(_spins_of(sigma), sites, groups, _LocalRates(params, nbrs), scheme.steps)


def local_commutator(sigma, sites, decomposition: Decomposition, params: ArrheniusRates,
                     scheme: SchemeSpec) -> float:
    """``dt**p`` coefficient of exact minus scheme probability of flipping ``sites``.

    Returns 0 without evaluating rates for non-admissible site sets.
    """
    if not is_admissible(sites, decomposition, scheme):
        return 0.0
    a, b = _local(sigma, sites, decomposition, params, scheme)
    return a - b


def local_scheme_coefficient(sigma, sites, decomposition: Decomposition, params: ArrheniusRates,
                             scheme: SchemeSpec) -> float:
    """``dt**p`` coefficient of the scheme probability of flipping ``sites``."""
    if len(set(int(x) for x in sites)) != len(tuple(sites)):
        raise ValueError("sites must be distinct")
    return _local(sigma, sites, decomposition, params, scheme)[1]


def f_value(c, lq, variant: str = "exact"):
    """Local RER term from the commutator ``c`` and scheme coefficient ``lq``.

    ``exact`` gives ``c M - 2 lq (artanh M - M)`` with ``M = c / (2 lq + c)``,
    which equals ``b log(b / a) - b + a`` for ``a = lq + c`` and ``b = lq``.
    ``conservative`` gives the upper bound ``c**2 / (lq + c)``.
    """
    if variant == "exact":
        out = leading_divergence(c, lq)
    elif variant == "conservative":
        out = chi2_divergence(c, lq)
    else:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return float(out) if np.ndim(out) == 0 else out


def is_singular(c, lq) -> bool:
    """True when the local term is undefined: ``lq + c <= 0`` with ``c != 0``."""
    return c != 0 and lq + c <= 0


def f_term(sigma, sites, decomposition: Decomposition, params: ArrheniusRates,
           scheme: SchemeSpec, variant: str | None = None) -> LocalTerms:
    """Local terms for flipping ``sites`` from ``sigma``."""
    variant = variant or default_variant(scheme)
    if not is_admissible(sites, decomposition, scheme):
        return LocalTerms(0.0, local_scheme_coefficient(sigma, sites, decomposition, params, scheme), 0.0)
    a, b = _local(sigma, sites, decomposition, params, scheme)
    c = a - b
    if is_singular(c, b):
        raise ZeroDivisionError(f"singular local term at sites {tuple(sites)}: lq + c = {a}")
    return LocalTerms(c, b, f_value(c, b, variant))


# ---------------------------------------------------------------------------
# accumulation

def _msum_add(partials: list, x: float):
    """Add ``x`` to a list of non-overlapping partial sums (exact summation)."""
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


@dataclass
class RerAccumulator:
    """Mergeable running mean of per-sample local-term totals.

    Sums are kept exactly (as non-overlapping float partials) so merging in
    any grouping gives the same estimate to the last bit. The standard error
    uses non-overlapping batch means.

    Attributes
    ----------
    scheme : str
    order : int
        Exponent of ``dt`` the coefficient multiplies.
    batch_size : int
    count : int
    excluded : int
        Samples dropped because a local term was singular.
    """

    scheme: str
    order: int
    batch_size: int = 100
    count: int = 0
    excluded: int = 0
    _sum: list = field(default_factory=list, repr=False)
    _sum_sq: list = field(default_factory=list, repr=False)
    batch_means: list = field(default_factory=list, repr=False)
    _batch: list = field(default_factory=list, repr=False)
    _batch_count: int = 0

    def add(self, value: float):
        value = float(value)
        _msum_add(self._sum, value)
        _msum_add(self._sum_sq, value * value)
        _msum_add(self._batch, value)
        self.count += 1
        self._batch_count += 1
        if self._batch_count == self.batch_size:
            self.batch_means.append(math.fsum(self._batch) / self.batch_size)
            self._batch = []
            self._batch_count = 0

    def merge(self, other: "RerAccumulator") -> "RerAccumulator":
        """Combined accumulator; ``self`` is taken to precede ``other``."""
        if (self.scheme, self.order) != (other.scheme, other.order):
            raise ValueError("cannot merge accumulators of different schemes")
        out = RerAccumulator(self.scheme, self.order, self.batch_size,
                             self.count + other.count, self.excluded + other.excluded,
                             list(self._sum), list(self._sum_sq),
                             self.batch_means + other.batch_means, list(self._batch),
                             self._batch_count)
        for x in other._sum:
            _msum_add(out._sum, x)
        for x in other._sum_sq:
            _msum_add(out._sum_sq, x)
        for x in other._batch:
            _msum_add(out._batch, x)
        out._batch_count += other._batch_count
        if out._batch_count >= out.batch_size:
            out.batch_means.append(math.fsum(out._batch) / out._batch_count)
            out._batch = []
            out._batch_count = 0
        return out

    @property
    def sum(self) -> float:
        return math.fsum(self._sum)

    @property
    def sum_sq(self) -> float:
        return math.fsum(self._sum_sq)

    @property
    def estimate(self) -> float:
        if self.count == 0:
            raise ValueError("empty accumulator")
        return self.sum / self.count

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        mean = self.sum / self.count
        return max(self.sum_sq / self.count - mean * mean, 0.0) * self.count / (self.count - 1)

    @property
    def stderr(self) -> float:
        nb = len(self.batch_means)
        if nb >= 2:
            return float(np.std(self.batch_means, ddof=1) / math.sqrt(nb))
        if self.count < 2:
            return float("nan")
        return math.sqrt(self.variance / self.count)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "order": self.order, "estimate": self.estimate if self.count else None,
                "stderr": self.stderr if self.count > 1 else None, "count": self.count,
                "excluded": self.excluded, "batch_size": self.batch_size}


class PatchCache:
    """Local-term tables keyed by patch shape and patch spins.

    On a periodic lattice the local term of a site set depends only on its
    shape, its group labels and the spins in the set plus its neighbours.
    Tuples sharing those share one table indexed by the packed patch spins.
    """

    def __init__(self, decomposition: Decomposition, params: ArrheniusRates, scheme: SchemeSpec,
                 variant: str, tuples, cache: bool = True):
        self.dec = decomposition
        self.scheme = scheme
        self.variant = variant
        self.cache = cache
        lat = lattice(decomposition.dims)
        self.lat = lat
        self.rates = _LocalRates(params, lat.neighbors)
        g = decomposition.site_groups
        self.tuples = [tuple(t) for t in tuples]
        self.groups = [tuple(int(g[x]) for x in t) for t in self.tuples]
        shapes: dict = {}
        self.shape_of = []
        patches = []
        for t, gr in zip(self.tuples, self.groups):
            patch = set(t)
            for x in t:
                patch.update(lat.neighbors[x])
            origin = t[0]
            patch = sorted(patch, key=lambda y: lat.displacement(origin, y))
            key = (tuple(lat.displacement(origin, x) for x in t), gr,
                   tuple(lat.displacement(origin, y) for y in patch))
            self.shape_of.append(shapes.setdefault(key, len(shapes)))
            patches.append(patch)
        self.patches = patches
        self.n_shapes = len(shapes)
        # tuples grouped by shape so each shape is one vectorised lookup
        self.by_shape = []
        for s in range(self.n_shapes):
            idx = [i for i, sh in enumerate(self.shape_of) if sh == s]
            pat = np.asarray([patches[i] for i in idx], dtype=np.int64)
            weights = (1 << np.arange(pat.shape[1], dtype=np.int64)) if pat.size else np.zeros(0, np.int64)
            table = np.full(1 << pat.shape[1], np.nan) if pat.size else np.zeros(0)
            self.by_shape.append((np.asarray(idx), pat, weights, table))
        self.excluded_tuples = 0

    def _compute(self, spins_list, i):
        a, b = _coefficients(spins_list, self.tuples[i], self.groups[i], self.rates, self.scheme.steps)
        c = a - b
        if is_singular(c, b):
            return np.nan
        return f_value(c, b, self.variant)

    def terms(self, spins: np.ndarray) -> np.ndarray:
        """Local terms of every tuple at configuration ``spins`` (tuple order)."""
        out = np.empty(len(self.tuples))
        spins_list = None
        for idx, pat, weights, table in self.by_shape:
            if idx.size == 0:
                continue
            if not self.cache:
                spins_list = spins_list or spins.tolist()
                out[idx] = [self._compute(spins_list, i) for i in idx]
                continue
            codes = spins[pat].astype(np.int64) @ weights
            vals = table[codes]
            miss = np.flatnonzero(np.isnan(vals))
            if miss.size:
                spins_list = spins_list or spins.tolist()
                for j in miss:
                    code = codes[j]
                    if np.isnan(table[code]):
                        v = self._compute(spins_list, int(idx[j]))
                        # singular entries stay NaN and are recomputed, never cached
                        if not np.isnan(v):
                            table[code] = v
                        vals[j] = v
                    else:
                        vals[j] = table[code]
            out[idx] = vals
        return out

    def total(self, spins: np.ndarray) -> float:
        """Sum of local terms; NaN if any term is singular."""
        t = self.terms(spins)
        return float(np.sum(t))

    @property
    def rate_evals(self) -> int:
        return self.rates.evals


def accumulate(acc: RerAccumulator, sigma, decomposition: Decomposition, params: ArrheniusRates,
               scheme: SchemeSpec | None = None, variant: str | None = None,
               cache: PatchCache | None = None) -> RerAccumulator:
    """Add one sample's local-term total to ``acc`` (in place) and return it."""
    scheme = scheme or SchemeSpec.from_name(acc.scheme)
    if cache is None:
        cache = PatchCache(decomposition, params, scheme, variant or default_variant(scheme),
                           admissible_tuples(decomposition, scheme), cache=False)
    spins = sigma.spins if isinstance(sigma, SpinConfiguration) else np.asarray(sigma)
    total = cache.total(spins)
    if np.isnan(total):
        acc.excluded += 1
    else:
        acc.add(total)
    return acc


class RerEstimator(BaseEstimator):
    """Ergodic-average estimator of the leading RER coefficient.

    Feed it configurations sampled from the scheme's own chain after burn-in
    with :meth:`fit`, :meth:`partial_fit` or by calling it as a simulation
    hook. :meth:`predict` returns the normalised RER ``coef_ * dt**order_``.

    Parameters
    ----------
    dims : int or tuple of int
        Lattice shape.
    m : int
        Sublattices per axis of the checkerboard.
    rates : ArrheniusRates
    scheme : {'lie', 'strang'} or SchemeSpec
    variant : {'exact', 'conservative'} or None
        Local term; ``None`` picks ``exact`` for Lie and ``conservative``
        for Strang.
    batch_size : int
        Batch length for the batch-means standard error.
    cache : bool
        Memoise local terms per patch.
    """

    def __init__(self, dims=6, m=3, rates=None, scheme="lie", variant=None,
                 batch_size=100, cache=True):
        self.dims = dims
        self.m = m
        self.rates = rates
        self.scheme = scheme
        self.variant = variant
        self.batch_size = batch_size
        self.cache = cache

    def _setup(self):
        scheme = self.scheme if isinstance(self.scheme, SchemeSpec) else SchemeSpec.from_name(self.scheme)
        params = self.rates if self.rates is not None else ArrheniusRates()
        dec = checkerboard(self.dims, self.m)
        variant = self.variant or default_variant(scheme)
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.scheme_ = scheme
        self.decomposition_ = dec
        self.variant_ = variant
        self.tuples_ = admissible_tuples(dec, scheme)
        self.patch_cache_ = PatchCache(dec, params, scheme, variant, self.tuples_, self.cache)
        self.order_ = scheme.rer_order
        self.accumulator_ = RerAccumulator(scheme.name, self.order_, int(self.batch_size))
        self.n_sites_ = dec.n_sites

    def fit(self, X, y=None):
        self._setup()
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "accumulator_"):
            self._setup()
        X = check_configurations(X, self.n_sites_)
        for row in X:
            self._add(row)
        return self

    def _add(self, spins):
        total = self.patch_cache_.total(spins)
        if np.isnan(total):
            self.accumulator_.excluded += 1
        else:
            self.accumulator_.add(total)

    def __call__(self, spins, step=None):
        if not hasattr(self, "accumulator_"):
            self._setup()
        self._add(spins)

    @property
    def coef_(self) -> float:
        check_is_fitted(self, "accumulator_")
        return self.accumulator_.estimate

    @property
    def stderr_(self) -> float:
        check_is_fitted(self, "accumulator_")
        return self.accumulator_.stderr

    def predict(self, X):
        """Normalised RER ``coef_ * dt**order_`` at the given time steps."""
        dt = np.asarray(X, dtype=np.float64).reshape(-1)
        return self.coef_ * dt ** self.order_

    def pp_rer(self, dt: float) -> float:
        return pp_rer(self.accumulator_, self.n_sites_, dt)

    def result(self) -> dict:
        out = self.accumulator_.to_dict()
        out["variant"] = self.variant_
        out["n_tuples"] = len(self.tuples_)
        return out


# ---------------------------------------------------------------------------
# derived quantities

def pp_rer(acc: RerAccumulator, n_sites: int, dt: float) -> float:
    """Per-site RER ``estimate * dt**order / n_sites``."""
    if acc.count == 0:
        raise ValueError("empty accumulator")
    return acc.estimate * dt ** acc.order / n_sites


def dt_for_tolerance(coeff: float, order: int, tol: float) -> float:
    """Largest step with ``coeff * dt**order <= tol``, capped at 1."""
    if coeff <= 0 or tol <= 0:
        raise ValueError("coeff and tol must be positive")
    return min(1.0, (tol / coeff) ** (1.0 / order))


def info_criterion(dt: float, first: tuple[float, float], second: tuple[float, float]) -> float:
    """Difference ``A1 dt**p1 - A2 dt**p2`` of two schemes' leading RER terms."""
    if not 0 < dt <= 1:
        raise ValueError("dt must lie in (0, 1]")
    (a1, p1), (a2, p2) = first, second
    return a1 * dt ** p1 - a2 * dt ** p2


def crossover_dt(first: tuple[float, float], second: tuple[float, float]) -> float | None:
    """Step where the two leading terms are equal, or ``None`` if they never cross."""
    (a1, p1), (a2, p2) = first, second
    if p1 == p2 or a1 <= 0 or a2 <= 0:
        return None
    return (a1 / a2) ** (1.0 / (p2 - p1))
