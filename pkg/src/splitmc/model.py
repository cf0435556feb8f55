"""States, rates, generators and splitting schemes.

Lattice states are binary occupation vectors on a periodic 1D ring or 2D
torus. Enumerated chains index a lattice state by packing its spins into an
integer with site 0 as the least significant bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

from .errors import GeneratorError, StateSpaceOverflow
from .validation import check_generator_matrix

MAX_LATTICE_STATES = 4096


# ---------------------------------------------------------------------------
# lattice geometry

@dataclass(frozen=True)
class Lattice:
    """Periodic lattice with axis nearest neighbours.

    Sites are numbered row-major: in 2D site ``(i, j)`` has index ``i * N + j``.
    """

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (1, 2) or any(d < 1 for d in dims):
            raise ValueError(f"dims must be (N,) or (N, N) with N >= 1, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def coords(self, x: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(x, self.dims))

    def site(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(c % d for c, d in zip(coords, self.dims)), self.dims))

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """Distinct periodic neighbours of every site, self excluded."""
        out = []
        for x in range(self.n_sites):
            c = self.coords(x)
            nb = []
            for axis in range(self.ndim):
                for step in (-1, 1):
                    shifted = list(c)
                    shifted[axis] += step
                    y = self.site(shifted)
                    if y != x and y not in nb:
                        nb.append(y)
            out.append(tuple(sorted(nb)))
        return tuple(out)

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_sites, self.n_sites), dtype=np.int64)
        for x, nb in enumerate(self.neighbors):
            a[x, list(nb)] = 1
        a.setflags(write=False)
        return a

    def displacement(self, x: int, y: int) -> tuple[int, ...]:
        """Minimal-image displacement from ``x`` to ``y``."""
        out = []
        for cx, cy, d in zip(self.coords(x), self.coords(y), self.dims):
            delta = (cy - cx) % d
            if delta > d // 2:
                delta -= d
            out.append(delta)
        return tuple(out)


@lru_cache(maxsize=64)
def lattice(dims: tuple[int, ...]) -> Lattice:
    return Lattice(tuple(dims))


def _as_dims(dims) -> tuple[int, ...]:
    if np.isscalar(dims):
        return (int(dims),)
    return tuple(int(d) for d in dims)


# ---------------------------------------------------------------------------
# states and rates

class SpinConfiguration:
    """Immutable occupation state on a periodic lattice.

    Parameters
    ----------
    dims : int or tuple of int
        ``N`` for a ring or ``(N, N)`` for a torus.
    spins : array_like
        Flat array of 0/1 values in site order.
    """

    __slots__ = ("dims", "spins")

    def __init__(self, dims, spins):
        dims = _as_dims(dims)
        arr = np.asarray(spins).ravel()
        n = int(np.prod(dims))
        if arr.size != n:
            raise ValueError(f"expected {n} spins, got {arr.size}")
        if np.any((arr != 0) & (arr != 1)):
            raise ValueError("spin values must be 0 or 1")
        arr = arr.astype(np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spins", arr)

    def __setattr__(self, name, value):
        raise AttributeError("SpinConfiguration is immutable")

    @classmethod
    def empty(cls, dims) -> "SpinConfiguration":
        return cls(dims, np.zeros(int(np.prod(_as_dims(dims))), dtype=np.int8))

    @classmethod
    def from_index(cls, dims, index: int) -> "SpinConfiguration":
        dims = _as_dims(dims)
        n = int(np.prod(dims))
        return cls(dims, (int(index) >> np.arange(n)) & 1)

    @property
    def lattice(self) -> Lattice:
        return lattice(self.dims)

    @property
    def n_sites(self) -> int:
        return self.spins.size

    @property
    def index(self) -> int:
        return int(np.dot(self.spins.astype(np.int64), 1 << np.arange(self.n_sites, dtype=np.int64)))

    def flip(self, *sites: int) -> "SpinConfiguration":
        s = self.spins.copy()
        for x in sites:
            s[x] ^= 1
        return SpinConfiguration(self.dims, s)

    def __eq__(self, other):
        if not isinstance(other, SpinConfiguration):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.spins, other.spins)

    def __hash__(self):
        return hash((self.dims, self.spins.tobytes()))

    def __repr__(self):
        return f"SpinConfiguration(dims={self.dims}, spins={''.join(map(str, self.spins))})"


@dataclass(frozen=True)
class ArrheniusRates:
    """Adsorption/desorption rates with nearest-neighbour interaction.

    An empty site fills at rate ``c1``; an occupied site empties at rate
    ``c2 * exp(-beta * (J0 * occupied_neighbours + h))``.
    """

    c1: float = 1.0
    c2: float = 1.0
    beta: float = 1.0
    J0: float = 1.0
    h: float = 0.0

    def __post_init__(self):
        for name in ("c1", "c2", "beta", "J0", "h"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be non-negative")

    def rate(self, spin, occupied_neighbors):
        """Vectorised flip rate given own spin and neighbour occupancy."""
        spin = np.asarray(spin)
        occ = np.asarray(occupied_neighbors)
        return np.where(spin == 0, self.c1,
                        self.c2 * np.exp(-self.beta * (self.J0 * occ + self.h)))

    @property
    def is_zero(self) -> bool:
        return self.c1 == 0 and self.c2 == 0


def arrhenius_rate(x: int, sigma: SpinConfiguration, params: ArrheniusRates) -> float:
    """Flip rate of site ``x`` in configuration ``sigma``."""
    s = sigma.spins
    if s[x] == 0:
        return params.c1
    occ = int(sum(s[y] for y in sigma.lattice.neighbors[x]))
    return float(params.c2 * np.exp(-params.beta * (params.J0 * occ + params.h)))


def site_rates(sigma: SpinConfiguration, params: ArrheniusRates) -> np.ndarray:
    """Flip rates of every site at once."""
    occ = sigma.lattice.adjacency @ sigma.spins.astype(np.int64)
    return params.rate(sigma.spins, occ).astype(np.float64)


# ---------------------------------------------------------------------------
# dense generators

class DenseGenerator:
    """Rate matrix of a finite continuous-time Markov chain.

    The diagonal is always recomputed from the off-diagonal entries, so the
    stored matrix has exact zero row sums up to floating point addition.
    """

    __slots__ = ("rates",)

    def __init__(self, rates, validate: bool = True):
        a = check_generator_matrix(rates) if validate else np.array(rates, dtype=np.float64)
        np.fill_diagonal(a, 0.0)
        if validate and np.any(a < 0):
            raise GeneratorError("negative off-diagonal rate")
        np.fill_diagonal(a, -a.sum(axis=1))
        a.setflags(write=False)
        object.__setattr__(self, "rates", a)

    def __setattr__(self, name, value):
        raise AttributeError("DenseGenerator is immutable")

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    @property
    def total_rates(self) -> np.ndarray:
        return -np.diag(self.rates).copy()

    def __add__(self, other: "DenseGenerator") -> "DenseGenerator":
        if self.n_states != other.n_states:
            raise ValueError("generator dimensions differ")
        return DenseGenerator(self.rates + other.rates)

    def __sub__(self, other: "DenseGenerator") -> "DenseGenerator":
        return DenseGenerator(self.rates - other.rates)

    def allclose(self, other: "DenseGenerator", atol: float = 1e-12) -> bool:
        return self.rates.shape == other.rates.shape and np.allclose(self.rates, other.rates, rtol=0, atol=atol)

    def __repr__(self):
        return f"DenseGenerator(n_states={self.n_states})"


def total_rate(state, gen) -> float:
    """Total jump rate out of ``state``.

    ``state`` is a state index with ``gen`` a :class:`DenseGenerator` or
    matrix, or a :class:`SpinConfiguration` with ``gen`` an
    :class:`ArrheniusRates`.
    """
    if isinstance(state, SpinConfiguration):
        if not isinstance(gen, ArrheniusRates):
            raise TypeError("lattice states need ArrheniusRates")
        return float(site_rates(state, gen).sum())
    q = gen.rates if isinstance(gen, DenseGenerator) else np.asarray(gen, dtype=float)
    row = q[int(state)].copy()
    row[int(state)] = 0.0
    return float(row.sum())


@dataclass(frozen=True)
class RestrictionSpec:
    """Pair mask for dense chains or site groups for lattices.

    Exactly one of ``mask`` (boolean ``n x n`` array of allowed ordered pairs)
    or ``site_groups`` (group label 1 or 2 per lattice site) is set.
    """

    mask: np.ndarray | None = None
    site_groups: np.ndarray | None = None

    def __post_init__(self):
        if (self.mask is None) == (self.site_groups is None):
            raise ValueError("give exactly one of mask or site_groups")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool).copy()
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("mask must be a square boolean matrix")
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)
        else:
            g = np.asarray(self.site_groups, dtype=np.int8).ravel().copy()
            if np.any((g != 1) & (g != 2)):
                raise ValueError("site groups must be 1 or 2")
            g.setflags(write=False)
            object.__setattr__(self, "site_groups", g)

    @classmethod
    def from_pairs(cls, n: int, pairs) -> "RestrictionSpec":
        m = np.zeros((n, n), dtype=bool)
        for i, j in pairs:
            m[i, j] = True
        return cls(mask=m)

    @classmethod
    def all_pairs(cls, n: int) -> "RestrictionSpec":
        return cls(mask=np.ones((n, n), dtype=bool))

    def complement(self) -> "RestrictionSpec":
        if self.mask is not None:
            return RestrictionSpec(mask=~self.mask)
        return RestrictionSpec(site_groups=3 - self.site_groups)

    def sites(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.site_groups == group)

    def __eq__(self, other):
        if not isinstance(other, RestrictionSpec):
            return NotImplemented
        a = self.mask if self.mask is not None else self.site_groups
        b = other.mask if other.mask is not None else other.site_groups
        return (self.mask is None) == (other.mask is None) and np.array_equal(a, b)

    __hash__ = None


def restrict(gen: DenseGenerator, spec: RestrictionSpec) -> DenseGenerator:
    """Keep only the rates on pairs allowed by ``spec.mask``."""
    if spec.mask is None:
        raise ValueError("dense restriction needs a pair mask")
    if spec.mask.shape != gen.rates.shape:
        raise ValueError(f"mask shape {spec.mask.shape} does not match generator {gen.rates.shape}")
    off = np.where(spec.mask, gen.rates, 0.0)
    np.fill_diagonal(off, 0.0)
    return DenseGenerator(off, validate=False)


def split_masks_cover(gen: DenseGenerator, a: RestrictionSpec, b: RestrictionSpec) -> bool:
    """True if the masks are disjoint and cover every positive-rate pair."""
    off = gen.rates > 0
    np.fill_diagonal(off, False)
    disjoint = not np.any(a.mask & b.mask & off)
    covered = np.all(a.mask[off] | b.mask[off])
    return bool(disjoint and covered)


def enumerate_states(n_sites: int) -> np.ndarray:
    """All ``2**n_sites`` configurations, row ``k`` being state index ``k``."""
    idx = np.arange(1 << n_sites, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_sites)) & 1).astype(np.int8)


def lattice_generator(dims, params: ArrheniusRates, sites=None,
                      max_states: int = MAX_LATTICE_STATES) -> DenseGenerator:
    """Dense generator of the spin-flip chain on a small periodic lattice.

    Parameters
    ----------
    dims : int or tuple of int
        Lattice shape.
    params : ArrheniusRates
    sites : array_like of int, optional
        If given, only flips of these sites are kept (a group restriction).
    max_states : int
        Refuse to build chains with more states than this.
    """
    lat = lattice(_as_dims(dims))
    n = lat.n_sites
    if (1 << n) > max_states:
        raise StateSpaceOverflow(f"2^{n} states exceeds the cap of {max_states}")
    states = enumerate_states(n)
    occ = states.astype(np.int64) @ lat.adjacency
    rates = params.rate(states, occ).astype(np.float64)
    active = np.arange(n) if sites is None else np.unique(np.asarray(sites, dtype=np.int64))
    S = 1 << n
    idx = np.arange(S)
    q = np.zeros((S, S))
    for x in active:
        q[idx, idx ^ (1 << int(x))] = rates[:, x]
    return DenseGenerator(q, validate=False)


# ---------------------------------------------------------------------------
# schemes

class SchemeKind(str, Enum):
    LIE = "lie"
    STRANG = "strang"


@dataclass(frozen=True)
class SchemeSpec:
    """A two-group splitting scheme.

    ``schedule`` lists the canonical ``(group, fraction)`` sub-steps. The
    order in which they are applied, both in simulation time and in the
    matrix product, is :attr:`steps`: the schedule itself for
    ``composition='forward'`` and the schedule run backwards for
    ``composition='reverse'``. Reversal leaves the symmetric scheme unchanged.
    """

    kind: SchemeKind
    p: int
    schedule: tuple[tuple[int, float], ...]
    composition: str = "forward"

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        sched = tuple((int(g), float(f)) for g, f in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if self.composition not in ("forward", "reverse"):
            raise ValueError("composition must be 'forward' or 'reverse'")
        for g in (1, 2):
            tot = sum(f for gg, f in sched if gg == g)
            if abs(tot - 1.0) > 1e-12:
                raise ValueError(f"fractions for group {g} sum to {tot}, expected 1")
        expected = {SchemeKind.LIE: 2, SchemeKind.STRANG: 3}[self.kind]
        if self.p != expected:
            raise ValueError(f"{self.kind.value} scheme has local order {expected}, got {self.p}")

    @classmethod
    def lie(cls) -> "SchemeSpec":
        return cls(SchemeKind.LIE, 2, ((1, 1.0), (2, 1.0)))

    @classmethod
    def strang(cls) -> "SchemeSpec":
        return cls(SchemeKind.STRANG, 3, ((1, 0.5), (2, 1.0), (1, 0.5)))

    @classmethod
    def from_name(cls, name: str, composition: str = "forward") -> "SchemeSpec":
        base = {"lie": cls.lie, "strang": cls.strang}[str(name).lower()]()
        return base if composition == "forward" else base.reversed()

    def reversed(self) -> "SchemeSpec":
        comp = "reverse" if self.composition == "forward" else "forward"
        return SchemeSpec(self.kind, self.p, self.schedule, comp)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def rer_order(self) -> int:
        """Exponent of the normalised RER on lattices with diameter >= p."""
        return self.p - 1

    @property
    def steps(self) -> tuple[tuple[int, float], ...]:
        """Sub-steps in the order they are applied (matrix-product order)."""
        return self.schedule if self.composition == "forward" else self.schedule[::-1]

    @property
    def sync_events_per_step(self) -> int:
        return len(self.schedule) - 1


LIE = SchemeSpec.lie()
STRANG = SchemeSpec.strang()
