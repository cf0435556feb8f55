"""Checkerboard-parallel kinetic Monte Carlo on periodic lattices.

A scheme step runs its schedule of sub-steps. In each sub-step every
sublattice of one group evolves by an exact SSA for ``fraction * dt`` while
all sites of the other group stay frozen. Sublattices of one group that
touch each other (only possible across a periodic wrap with odd ``m``) are
merged into one execution unit, so units never read a site another unit
writes and can run on separate threads.

Random numbers come from counter-based Philox streams keyed by
``(seed, unit)`` with counter ``(step, substep)``, which makes every
trajectory independent of the thread count and execution order.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DecompositionError
from .model import (ArrheniusRates, DenseGenerator, SchemeSpec, SpinConfiguration,
                    lattice, lattice_generator)

NN_RANGE = 1


# ---------------------------------------------------------------------------
# decomposition

@dataclass(frozen=True, eq=False)
class Decomposition:
    """Checkerboard partition of a periodic lattice.

    Attributes
    ----------
    dims : tuple of int
    m : int
        Sublattices per axis.
    assignment : ndarray
        Sublattice id of every site.
    groups : ndarray
        Group label (1 or 2) of every sublattice.
    boundary_sites : tuple of ndarray
        Per sublattice, the sites with a neighbour outside it.
    units : tuple of ndarray
        Execution units: arrays of sublattice ids that run together. Each
        unit lies in one group and no two units of a group are adjacent.
    """

    dims: tuple[int, ...]
    m: int
    assignment: np.ndarray
    groups: np.ndarray
    boundary_sites: tuple[np.ndarray, ...]
    units: tuple[np.ndarray, ...]

    @property
    def n_sites(self) -> int:
        return self.assignment.size

    @property
    def n_sublattices(self) -> int:
        return self.groups.size

    @property
    def site_groups(self) -> np.ndarray:
        return self.groups[self.assignment]

    def group_sites(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.site_groups == group)

    def sublattice_sites(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def unit_group(self, u: int) -> int:
        return int(self.groups[self.units[u][0]])

    def unit_sites(self, u: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.assignment, self.units[u]))

    def units_of(self, group: int) -> list[int]:
        return [u for u in range(len(self.units)) if self.unit_group(u) == group]

    def describe(self) -> dict:
        return {"dims": list(self.dims), "m": self.m, "boundary": "periodic",
                "n_sublattices": self.n_sublattices, "n_units": len(self.units)}


def checkerboard(dims, m: int, nn_range: int = NN_RANGE) -> Decomposition:
    """Split a periodic lattice into ``m`` (1D) or ``m * m`` (2D) blocks.

    Blocks alternate between group 1 and group 2: in 1D block ``k`` is in
    group 1 when ``k`` is even, in 2D block ``(i, j)`` when ``i + j`` is even.
    ``m = 1`` gives a single group-1 block.

    Raises
    ------
    DecompositionError
        If ``m`` does not divide the side or the blocks are not wider than
        the interaction range.
    """
    lat = lattice(tuple(np.atleast_1d(dims).astype(int).tolist()))
    N = lat.dims[0]
    if lat.ndim == 2 and lat.dims[0] != lat.dims[1]:
        raise DecompositionError("2D lattices must be square")
    m = int(m)
    if m < 1 or m > N:
        raise DecompositionError(f"m must lie in [1, {N}], got {m}")
    if N % m:
        raise DecompositionError(f"N={N} is not divisible by m={m}")
    side = N // m
    if m > 1 and side <= nn_range:
        raise DecompositionError(f"sublattice side {side} must exceed the interaction range {nn_range}")
    coords = np.array([lat.coords(x) for x in range(lat.n_sites)])
    block = coords // side
    if lat.ndim == 1:
        assignment = block[:, 0]
        groups = np.where(np.arange(m) % 2 == 0, 1, 2)
    else:
        assignment = block[:, 0] * m + block[:, 1]
        bi, bj = np.divmod(np.arange(m * m), m)
        groups = np.where((bi + bj) % 2 == 0, 1, 2)
    assignment = assignment.astype(np.int64)
    groups = groups.astype(np.int8)
    nsub = groups.size
    boundary = []
    touch = np.zeros((nsub, nsub), dtype=bool)
    for k in range(nsub):
        sites = np.flatnonzero(assignment == k)
        bnd = []
        for x in sites:
            outside = [y for y in lat.neighbors[x] if assignment[y] != k]
            if outside:
                bnd.append(x)
            for y in outside:
                touch[k, assignment[y]] = True
        arr = np.asarray(bnd, dtype=np.int64)
        arr.setflags(write=False)
        boundary.append(arr)
    same = touch & (groups[:, None] == groups[None, :])
    _, labels = connected_components(csr_matrix(same | same.T), directed=False)
    units = []
    for lab in sorted(set(labels.tolist()), key=lambda l: int(np.flatnonzero(labels == l)[0])):
        u = np.flatnonzero(labels == lab).astype(np.int64)
        u.setflags(write=False)
        units.append(u)
    assignment.setflags(write=False)
    groups.setflags(write=False)
    return Decomposition(lat.dims, m, assignment, groups, tuple(boundary), tuple(units))


def split_generators(dims, params: ArrheniusRates, decomposition: Decomposition,
                     max_states: int = 4096) -> tuple[DenseGenerator, DenseGenerator, DenseGenerator]:
    """Dense ``(L, L1, L2)`` of a small lattice under a decomposition."""
    L1 = lattice_generator(dims, params, decomposition.group_sites(1), max_states)
    L2 = lattice_generator(dims, params, decomposition.group_sites(2), max_states)
    return L1 + L2, L1, L2


def comm_bound(m: int, N: int, scheme: SchemeSpec) -> float:
    """Upper bound on boundary sites touched per step, as a fraction of sites."""
    if m > N:
        raise ValueError("m must not exceed N")
    factor = 2 if scheme.kind.value == "lie" else 6
    return factor * (m + 1) / N


# ---------------------------------------------------------------------------
# random streams

class StreamFactory:
    """Counter-based uniform streams, one Philox generator per execution unit.

    The stream for ``(unit, step, substep)`` always yields the same numbers
    regardless of which thread asks for it or when.
    """

    def __init__(self, seed: int, n_units: int):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self._bits = []
        self._gens = []
        self._keys = []
        for u in range(n_units):
            bg = np.random.Philox(key=seed * (2 ** 64) + u)
            self._bits.append(bg)
            self._gens.append(np.random.Generator(bg))
            self._keys.append(bg.state["state"]["key"].copy())

    def uniforms(self, unit: int, step: int, substep: int) -> "UniformStream":
        bg = self._bits[unit]
        bg.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array([0, 0, substep, step], dtype=np.uint64),
                      "key": self._keys[unit]},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return UniformStream(self._gens[unit])


class UniformStream:
    """Uniforms on ``[0, 1)`` drawn in blocks from one generator."""

    __slots__ = ("_gen", "_buf", "_pos")

    def __init__(self, gen: np.random.Generator, block: int = 16):
        self._gen = gen
        self._buf = gen.random(block).tolist()
        self._pos = 0

    def __call__(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(2 * len(self._buf)).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


# ---------------------------------------------------------------------------
# SSA

class _RateTable:
    """Flip rate lookup by own spin and occupied-neighbour count."""

    def __init__(self, params: ArrheniusRates, max_nb: int):
        k = np.arange(max_nb + 1)
        self.fill = float(params.c1)
        self.empty = (params.c2 * np.exp(-params.beta * (params.J0 * k + params.h))).tolist()

    def rate(self, spins, nbrs, x) -> float:
        if spins[x] == 0:
            return self.fill
        occ = 0
        for y in nbrs[x]:
            occ += spins[y]
        return self.empty[occ]


def _ssa(spins: list, active: list[int], nbrs, table: _RateTable, horizon: float,
         uniform: Callable[[], float], log: list | None = None, tag=None) -> list[int]:
    """Rejection-free SSA over ``active`` sites, mutating ``spins`` in place.

    Sites outside ``active`` are read but never written. The event that
    would fire after ``horizon`` is discarded. Returns the flipped sites in
    event order.
    """
    if horizon <= 0 or not active:
        return []
    local = {x: i for i, x in enumerate(active)}
    rates = [table.rate(spins, nbrs, x) for x in active]
    flipped = []
    t = 0.0
    while True:
        total = math.fsum(rates)
        if total <= 0.0:
            break
        t += -math.log(1.0 - uniform()) / total
        if t > horizon:
            break
        target = uniform() * total
        acc = 0.0
        pick = len(rates) - 1
        for i, r in enumerate(rates):
            acc += r
            if target < acc:
                pick = i
                break
        while rates[pick] == 0.0:
            pick -= 1
        x = active[pick]
        spins[x] ^= 1
        flipped.append(x)
        if log is not None:
            log.append((tag, x, spins[x], t))
        rates[pick] = table.rate(spins, nbrs, x)
        for y in nbrs[x]:
            i = local.get(y)
            if i is not None:
                rates[i] = table.rate(spins, nbrs, y)
    return flipped


def ssa_run(sigma: SpinConfiguration, active, params: ArrheniusRates, horizon: float,
            rng: np.random.Generator, frozen: SpinConfiguration | None = None):
    """Exact SSA restricted to flips of ``active`` sites.

    Parameters
    ----------
    sigma : SpinConfiguration
        Starting configuration.
    active : iterable of int
        Sites allowed to flip.
    params : ArrheniusRates
    horizon : float
        Length of the time window.
    rng : numpy.random.Generator
    frozen : SpinConfiguration, optional
        Snapshot supplying the spins of non-active sites; defaults to
        ``sigma``.

    Returns
    -------
    SpinConfiguration
        Configuration at the horizon.
    list of (site, new_spin, time)
        Accepted events.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    lat = sigma.lattice
    base = (frozen if frozen is not None else sigma).spins.tolist()
    act = sorted(set(int(x) for x in active))
    for x in act:
        base[x] = int(sigma.spins[x])
    table = _RateTable(params, max((len(n) for n in lat.neighbors), default=0))
    log: list = []
    uniform = UniformStream(rng)
    _ssa(base, act, lat.neighbors, table, float(horizon), uniform, log)
    out = sigma.spins.copy()
    out[act] = [base[x] for x in act]
    return SpinConfiguration(sigma.dims, out), [(x, s, t) for _, x, s, t in log]


# ---------------------------------------------------------------------------
# scheme steps

@dataclass
class CommStats:
    """Communication counters.

    ``boundary_rate_evals`` counts, at every exchange between groups, the
    receiving-group sites whose rates must be refreshed because a
    neighbour in the other group flipped. ``wall_fraction_comm`` is timing
    only and excluded from equality.
    """

    boundary_rate_evals: int = 0
    sync_events: int = 0
    steps: int = 0
    max_step_boundary_evals: int = 0
    wall_fraction_comm: float = field(default=0.0, compare=False)

    def __iadd__(self, other: "CommStats"):
        self.boundary_rate_evals += other.boundary_rate_evals
        self.sync_events += other.sync_events
        self.steps += other.steps
        self.max_step_boundary_evals = max(self.max_step_boundary_evals, other.max_step_boundary_evals)
        return self

    def per_step(self, n_sites: int) -> float:
        """Mean boundary evaluations per step as a fraction of sites."""
        return self.boundary_rate_evals / max(self.steps, 1) / n_sites

    def max_per_step(self, n_sites: int) -> float:
        return self.max_step_boundary_evals / n_sites

    def to_dict(self) -> dict:
        return {"boundary_rate_evals": self.boundary_rate_evals, "sync_events": self.sync_events,
                "steps": self.steps, "max_step_boundary_evals": self.max_step_boundary_evals}


@dataclass
class SimClock:
    """Global time plus per-sublattice clocks within the current step."""

    dt: float
    n_sublattices: int
    step_count: int = 0
    local: np.ndarray = None

    def __post_init__(self):
        self.local = np.zeros(self.n_sublattices)

    @property
    def global_time(self) -> float:
        return self.step_count * self.dt

    def advance(self, sublattices, amount: float):
        self.local[sublattices] += amount

    def finish_step(self):
        if not np.all(self.local == self.dt):
            raise RuntimeError("sublattice clocks out of sync at step end")
        self.local[:] = 0.0
        self.step_count += 1


class LatticeStepper:
    """Reusable state for running scheme steps on one decomposition."""

    def __init__(self, decomposition: Decomposition, params: ArrheniusRates, scheme: SchemeSpec,
                 dt: float, seed: int = 0, threads: int = 1, event_log: list | None = None):
        if not 0 < dt <= 1:
            raise ValueError(f"dt must lie in (0, 1], got {dt}")
        self.dec = decomposition
        self.params = params
        self.scheme = scheme
        self.dt = float(dt)
        lat = lattice(decomposition.dims)
        self.nbrs = lat.neighbors
        self.table = _RateTable(params, max(len(n) for n in lat.neighbors))
        self.streams = StreamFactory(seed, len(decomposition.units))
        self.unit_sites = [decomposition.unit_sites(u).tolist() for u in range(len(decomposition.units))]
        self.units_by_group = {g: decomposition.units_of(g) for g in (1, 2)}
        self.site_group = decomposition.site_groups.tolist()
        self.unit_sublattices = [np.asarray(u) for u in decomposition.units]
        self.threads = max(1, int(threads))
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.event_log = event_log
        self.comm_time = 0.0
        self.total_time = 0.0

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _run_unit(self, spins, u, step, sub, horizon):
        log = [] if self.event_log is not None else None
        uniform = self.streams.uniforms(u, step, sub)
        flipped = _ssa(spins, self.unit_sites[u], self.nbrs, self.table, horizon, uniform, log, u)
        return flipped, log

    def step(self, spins: list, step: int, clock: SimClock | None = None) -> CommStats:
        """Advance ``spins`` (a mutable list) by one scheme step in place."""
        t0 = time.perf_counter()
        comm = 0.0
        stats = CommStats(steps=1)
        prev_group, prev_flipped = None, []
        for sub, (group, frac) in enumerate(self.scheme.steps):
            if prev_group is not None and group != prev_group:
                tc = time.perf_counter()
                stats.sync_events += 1
                touched = set()
                for x in prev_flipped:
                    for y in self.nbrs[x]:
                        if self.site_group[y] == group:
                            touched.add(y)
                stats.boundary_rate_evals += len(touched)
                stats.max_step_boundary_evals += len(touched)
                prev_flipped = []
                comm += time.perf_counter() - tc
            horizon = frac * self.dt
            units = self.units_by_group[group]
            if self.pool is not None and len(units) > 1:
                results = list(self.pool.map(lambda u: self._run_unit(spins, u, step, sub, horizon), units))
            else:
                results = [self._run_unit(spins, u, step, sub, horizon) for u in units]
            for u, (flipped, log) in zip(units, results):
                prev_flipped.extend(flipped)
                if log:
                    for _, x, s, t in log:
                        self.event_log.append((step, int(self.dec.assignment[x]), x, s, t))
            if clock is not None:
                for u in units:
                    clock.advance(self.unit_sublattices[u], horizon)
            prev_group = group
        if clock is not None:
            # sublattices of a group with no sites still keep time
            missing = [k for k in range(self.dec.n_sublattices) if clock.local[k] != self.dt]
            clock.local[missing] = self.dt
            clock.finish_step()
        self.comm_time += comm
        self.total_time += time.perf_counter() - t0
        return stats


def scheme_step(sigma: SpinConfiguration, decomposition: Decomposition, scheme: SchemeSpec,
                dt: float, params: ArrheniusRates, seed: int = 0, step: int = 0,
                threads: int = 1) -> tuple[SpinConfiguration, CommStats]:
    """One scheme step from ``sigma``; the randomness is fixed by ``(seed, step)``."""
    with LatticeStepper(decomposition, params, scheme, dt, seed, threads) as stepper:
        spins = sigma.spins.tolist()
        stats = stepper.step(spins, step)
    return SpinConfiguration(sigma.dims, spins), stats


@dataclass
class SimulationResult:
    final: SpinConfiguration
    clock: SimClock
    stats: CommStats
    n_samples: int
    hooks: dict

    @property
    def wall_fraction_comm(self) -> float:
        return self.stats.wall_fraction_comm


def simulate(initial: SpinConfiguration, decomposition: Decomposition, scheme: SchemeSpec,
             dt: float, T: float, params: ArrheniusRates, burn_in: float = 0.0,
             hooks: Mapping[str, Callable] | None = None, seed: int = 0, threads: int = 1,
             event_log: list | None = None) -> SimulationResult:
    """Run ``T / dt`` scheme steps and feed post-burn-in states to hooks.

    Each hook is called as ``hook(spins, step)`` with a read-only int8 array
    after every step whose end time exceeds ``burn_in``. Hooks exposing a
    ``result()`` method contribute to :attr:`SimulationResult.hooks`.
    """
    if not T >= burn_in >= 0:
        raise ValueError("need T >= burn_in >= 0")
    n_steps = int(round(T / dt))
    n_burn = int(round(burn_in / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a multiple of dt")
    hooks = dict(hooks or {})
    spins = initial.spins.tolist()
    clock = SimClock(dt, decomposition.n_sublattices)
    total = CommStats()
    n_samples = 0
    arr = np.empty(len(spins), dtype=np.int8)
    with LatticeStepper(decomposition, params, scheme, dt, seed, threads, event_log) as stepper:
        for k in range(n_steps):
            total += stepper.step(spins, k, clock)
            if k + 1 > n_burn and hooks:
                arr[:] = spins
                view = arr.view()
                view.setflags(write=False)
                for hook in hooks.values():
                    hook(view, k)
                n_samples += 1
        if stepper.total_time > 0:
            total.wall_fraction_comm = stepper.comm_time / stepper.total_time
    results = {name: (h.result() if hasattr(h, "result") else None) for name, h in hooks.items()}
    return SimulationResult(SpinConfiguration(initial.dims, spins), clock, total, n_samples, results)


class CoverageHook:
    """Running mean of the fraction of occupied sites."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def __call__(self, spins, step):
        self.total += float(spins.mean())
        self.count += 1

    def result(self) -> float:
        return self.total / self.count if self.count else float("nan")


def write_event_log(path, events: Iterable[tuple]):
    """Write events as CSV with columns step, sublattice, site, new_spin, local_time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sublattice", "site", "new_spin", "local_time"])
        for step, sub, site, s, t in events:
            w.writerow([step, sub, site, s, repr(float(t))])
