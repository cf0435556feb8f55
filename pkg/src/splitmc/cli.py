"""Command-line interface.

Subcommands read a YAML run configuration and write JSON reports and CSV
tables into an output directory. Every file embeds the resolved
configuration and seed. Files are written to a temporary name and renamed
into place, so a failed run leaves no partial output.

Exit codes: 0 success, 2 analysis error, 3 configuration or validation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DecompositionError, SplitMCError, TheoremInapplicable
from .estimator import (RerEstimator, crossover_dt, default_variant, dt_for_tolerance,
                        info_criterion)
from .exact import (MAX_DENSE_STATES, commutator, connectivity, dyadic_grid, expm, fit_order,
                    goal_oriented_bounds, leading_rer_coefficient, linearized_bound,
                    predict_order, rer, rer_curve, scheme_matrix, stationary)
from .lattice import CoverageHook, checkerboard, comm_bound, simulate, split_generators
from .model import ArrheniusRates, DenseGenerator, SchemeSpec, SpinConfiguration

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG = 0, 2, 3


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    """Resolved run configuration.

    ``system`` is either ``{"kind": "dense", "generator": [[...]], "L1": [[...]]}``
    (``L2 = generator - L1``) or ``{"kind": "lattice", "dims": [...], "rates": {...}}``.
    """

    system: dict
    m: int = 1
    schemes: list = field(default_factory=lambda: ["lie"])
    composition: str = "forward"
    variant: str | None = None
    dt: float = 0.1
    dt_grid: list = field(default_factory=list)
    T: float = 100.0
    burn_in: float = 10.0
    seed: int = 0
    observables: Any = "coordinates"
    tolerances: list = field(default_factory=lambda: [1e-3])
    record_every: int = 1
    event_log: bool = False
    compare: dict = field(default_factory=dict)
    comm: dict = field(default_factory=dict)
    initial: Any = "empty"

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        known = set(cls.__dataclass_fields__) | {"scheme", "decomposition", "outputs"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(raw)
        if "system" not in data:
            raise ConfigError("config needs a 'system' section")
        scheme = data.pop("scheme", None)
        if scheme is not None:
            data["schemes"] = [scheme] if isinstance(scheme, str) else list(scheme)
        dec = data.pop("decomposition", None)
        if dec is not None:
            data["m"] = dec.get("m", 1) if isinstance(dec, dict) else dec
        data.pop("outputs", None)
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        sys_ = self.system
        kind = sys_.get("kind")
        if kind not in ("dense", "lattice"):
            raise ConfigError("system.kind must be 'dense' or 'lattice'")
        for s in self.schemes:
            if str(s).lower() not in ("lie", "strang"):
                raise ConfigError(f"unknown scheme {s!r}")
        self.schemes = [str(s).lower() for s in self.schemes]
        if self.composition not in ("forward", "reverse"):
            raise ConfigError("composition must be 'forward' or 'reverse'")
        if self.variant not in (None, "exact", "conservative"):
            raise ConfigError("variant must be exact, conservative or null")
        if not (0 < float(self.dt) <= 1):
            raise ConfigError("dt must lie in (0, 1]")
        self.dt = float(self.dt)
        self.T = float(self.T)
        self.burn_in = float(self.burn_in)
        if not self.T >= self.burn_in >= 0:
            raise ConfigError("need T >= burn_in >= 0")
        self.seed = int(self.seed)
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.m = int(self.m)
        if self.dt_grid:
            self.dt_grid = [float(x) for x in self.grid()]
        if kind == "dense":
            self.generator()
        else:
            self.rates()
            self.dims()

    def grid(self) -> np.ndarray:
        g = self.dt_grid
        if isinstance(g, dict):
            return dyadic_grid(int(g["k_min"]), int(g["k_max"]))
        if not g:
            return dyadic_grid(4, 10)
        arr = np.sort(np.asarray(g, dtype=np.float64))
        if np.any(arr <= 0) or np.any(arr > 1):
            raise ConfigError("dt grid values must lie in (0, 1]")
        return arr

    # system accessors
    def dims(self) -> tuple[int, ...]:
        d = self.system.get("dims")
        if d is None:
            raise ConfigError("lattice system needs dims")
        return tuple(int(x) for x in np.atleast_1d(d))

    def rates(self) -> ArrheniusRates:
        try:
            return ArrheniusRates(**self.system.get("rates", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad rates: {exc}") from exc

    def generator(self):
        """Dense ``(L, L1, L2)``."""
        if self.system["kind"] == "lattice":
            dims = self.dims()
            n = int(np.prod(dims))
            if (1 << n) > MAX_DENSE_STATES:
                raise ConfigError(f"lattice with {n} sites is too large for the dense engine")
            return split_generators(dims, self.rates(), self.decomposition())
        try:
            L = DenseGenerator(self.system["generator"])
            if "L1" in self.system:
                L1 = DenseGenerator(self.system["L1"])
            elif "pairs1" in self.system:
                mask = np.zeros(L.rates.shape, dtype=bool)
                for i, j in self.system["pairs1"]:
                    mask[int(i), int(j)] = True
                off = np.where(mask, L.rates, 0.0)
                np.fill_diagonal(off, 0.0)
                L1 = DenseGenerator(off, validate=False)
            else:
                raise ConfigError("dense system needs L1 or pairs1")
            L2 = DenseGenerator(L.rates - L1.rates)
        except KeyError as exc:
            raise ConfigError(f"missing system key {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return L, L1, L2

    def decomposition(self):
        try:
            return checkerboard(self.dims(), self.m)
        except DecompositionError:
            raise
        except ValueError as exc:
            raise DecompositionError(str(exc)) from exc

    def scheme(self, name: str) -> SchemeSpec:
        return SchemeSpec.from_name(name, self.composition)

    def echo(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    try:
        return RunConfig.from_mapping(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# output helpers

class OutputSet:
    """Collects output files and publishes them atomically together."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add_json(self, name: str, payload: dict):
        self.files[name] = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"

    def add_csv(self, name: str, header: list, rows: list, meta: dict):
        buf = io.StringIO()
        buf.write("# " + json.dumps(_jsonable(meta), sort_keys=True) + "\r\n")
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for v in r])
        self.files[name] = buf.getvalue()

    def publish(self):
        os.makedirs(self.out_dir, exist_ok=True)
        staged = []
        try:
            for name, text in self.files.items():
                fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
                with os.fdopen(fd, "w", newline="") as fh:
                    fh.write(text)
                staged.append((tmp, os.path.join(self.out_dir, name)))
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


def _header(cfg: RunConfig, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "package_version": __version__,
            "seed": cfg.seed, "config": cfg.echo(), "boundary": "periodic"}


def _observables(cfg: RunConfig, n: int) -> list:
    obs = cfg.observables
    if obs in (None, "none"):
        return []
    if obs == "coordinates":
        return [np.eye(n)[i] for i in range(n)] if n <= 16 else []
    arr = [np.asarray(o, dtype=np.float64) for o in obs]
    for o in arr:
        if o.size != n:
            raise ConfigError(f"observable length {o.size} does not match {n} states")
    return arr


# ---------------------------------------------------------------------------
# commands

def cmd_analyze_chain(cfg: RunConfig, out: OutputSet, threads: int = 1) -> dict:
    """Dense analysis of a small chain for every configured scheme."""
    L, L1, L2 = cfg.generator()
    grid = cfg.grid()
    report = _header(cfg, "analyze-chain")
    report["n_states"] = L.n_states
    P = expm(L, cfg.dt)
    report["stationary_exact"] = stationary(P)
    schemes = {}
    for name in cfg.schemes:
        scheme = cfg.scheme(name)
        entry: dict = {"scheme": name, "composition": scheme.composition, "p": scheme.p}
        H = rer_curve(L, L1, L2, scheme, grid)
        Hu = rer_curve(L, L1, L2, scheme, grid, "uniform")
        entry["rer"] = [{"dt": d, "stationary": h, "uniform": u} for d, h, u in zip(grid, H, Hu)]
        if np.all(H == 0):
            entry["fit"] = None
            entry["fit_uniform"] = None
            entry["note"] = "scheme reproduces the exact chain; RER is identically zero"
        else:
            fit = fit_order(zip(grid, H))
            fit_u = fit_order(zip(grid, Hu))
            entry["fit"] = {"slope": fit.slope, "order": fit.order, "coeffs": fit.coeffs, "rsq": fit.rsq}
            entry["fit_uniform"] = {"slope": fit_u.slope, "order": fit_u.order, "coeffs": fit_u.coeffs,
                                    "rsq": fit_u.rsq}
        conn = connectivity(L, scheme.p)
        entry["connectivity"] = {"diameter": conn.diameter, "k_hat": conn.k_hat}
        comm = commutator(L, L1, L2, scheme)
        entry["commutator"] = {"p": comm.p, "max_abs": float(np.abs(comm.C).max()),
                               "residual": comm.residual, "formula_gap": comm.formula_gap,
                               "lie_sign": comm.lie_sign,
                               "max_row_sum": float(np.abs(comm.C.sum(axis=1)).max())}
        try:
            entry["predicted_order"] = predict_order(conn, comm)
        except TheoremInapplicable as exc:
            entry["predicted_order"] = None
            entry["predicted_order_error"] = str(exc)
        coeff, order = leading_rer_coefficient(L, L1, L2, scheme)
        entry["leading_coefficient"] = {"value": coeff, "order": order}
        Q = scheme_matrix(L1, L2, scheme, cfg.dt)
        muQ = stationary(Q)
        muP = report["stationary_exact"]
        entry["stationary_scheme"] = muQ
        entry["rer_at_dt"] = rer(Q, P)
        bounds = []
        for k, f in enumerate(_observables(cfg, L.n_states)):
            lo, hi = goal_oriented_bounds(Q, P, f)
            bounds.append({"observable": k, "gap": float(muQ @ f - muP @ f), "xi_minus": lo, "xi_plus": hi,
                           "linearized": linearized_bound(Q, P, f)})
        entry["bounds"] = bounds
        schemes[name] = entry
    report["schemes"] = schemes
    out.add_json("analysis.json", report)
    return report


def _initial(cfg: RunConfig, dims) -> SpinConfiguration:
    init = cfg.initial
    if init == "empty":
        return SpinConfiguration.empty(dims)
    if init == "full":
        return SpinConfiguration(dims, np.ones(int(np.prod(dims)), dtype=np.int8))
    return SpinConfiguration(dims, np.asarray(init))


class _Recorder:
    """Thinned record of coverage and local-term totals."""

    def __init__(self, every: int, dt: float, estimator: RerEstimator):
        self.every = max(1, int(every))
        self.dt = dt
        self.est = estimator
        self.rows = []

    def __call__(self, spins, step):
        if (step + 1) % self.every == 0:
            total = self.est.patch_cache_.total(spins)
            self.rows.append((step + 1, (step + 1) * self.dt, float(spins.mean()), total))


def _run_lattice(cfg: RunConfig, scheme_name: str, dt: float, threads: int, record: bool = False,
                 events: list | None = None):
    dims = cfg.dims()
    params = cfg.rates()
    dec = cfg.decomposition()
    scheme = cfg.scheme(scheme_name)
    est = RerEstimator(dims, cfg.m, params, scheme, cfg.variant)
    cov = CoverageHook()
    hooks = {"rer": est, "coverage": cov}
    rec = None
    if record:
        rec = _Recorder(cfg.record_every, dt, est)
        hooks["record"] = rec
    T = round(cfg.T / dt) * dt
    burn = min(round(cfg.burn_in / dt) * dt, T)
    t0 = time.perf_counter()
    res = simulate(_initial(cfg, dims), dec, scheme, dt, T, params, burn, hooks, cfg.seed, threads, events)
    wall = time.perf_counter() - t0
    acc = est.accumulator_
    if acc.excluded:
        raise SplitMCError(f"{acc.excluded} samples had singular local terms")
    return est, cov, res, rec, wall, dec


def cmd_simulate(cfg: RunConfig, out: OutputSet, threads: int = 1) -> dict:
    """Simulate every configured scheme at ``cfg.dt`` and report estimates."""
    if cfg.system["kind"] != "lattice":
        raise ConfigError("simulate needs a lattice system")
    report = _header(cfg, "simulate")
    timing = {"schema_version": SCHEMA_VERSION, "note": "wall-clock data, not deterministic"}
    rows = []
    events: list | None = [] if cfg.event_log else None
    n_sites = int(np.prod(cfg.dims()))
    results = {}
    for name in cfg.schemes:
        est, cov, res, rec, wall, dec = _run_lattice(cfg, name, cfg.dt, threads, True, events)
        acc = est.accumulator_
        has = acc.count > 0
        scheme = cfg.scheme(name)
        N = cfg.dims()[0]
        results[name] = {
            "estimate": acc.estimate if has else None,
            "stderr": acc.stderr if acc.count > 1 else None,
            "order": acc.order,
            "variant": est.variant_,
            "n_samples": acc.count,
            "excluded": acc.excluded,
            "pp_rer": est.pp_rer(cfg.dt) if has else None,
            "pp_rer_stderr": (acc.stderr * cfg.dt ** acc.order / n_sites) if acc.count > 1 else None,
            "mean_coverage": cov.result() if cov.count else None,
            "final_time": res.clock.global_time,
            "comm": dict(res.stats.to_dict(),
                         boundary_evals_per_step=res.stats.per_step(n_sites),
                         sync_events_per_step=res.stats.sync_events / max(res.stats.steps, 1),
                         comm_bound=comm_bound(cfg.m, N, scheme)),
            "decomposition": dec.describe(),
        }
        timing[name] = {"wall_seconds": wall, "wall_fraction_comm": res.wall_fraction_comm}
        rows.extend((name,) + r for r in rec.rows)
    report["results"] = results
    out.add_json("estimate.json", report)
    out.add_csv("trajectory.csv", ["scheme", "step", "time", "coverage", "local_term_total"], rows,
                _header(cfg, "simulate"))
    out.add_json("timing.json", timing)
    if events is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["step", "sublattice", "site", "new_spin", "local_time"])
        for e in events:
            w.writerow([e[0], e[1], e[2], e[3], repr(float(e[4]))])
        out.files["events.csv"] = buf.getvalue()
    return report


def _weighted_coefficient(values, errors):
    v = np.asarray(values, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = np.isfinite(e) & (e > 0)
    if ok.sum() == len(v):
        w = 1.0 / e ** 2
        return float(np.sum(w * v) / np.sum(w))
    return float(np.mean(v))


def cmd_sweep(cfg: RunConfig, out: OutputSet, threads: int = 1) -> dict:
    """pp-RER estimates on a grid of steps, with slopes and tolerance inversion."""
    if cfg.system["kind"] != "lattice":
        raise ConfigError("sweep needs a lattice system")
    grid = cfg.grid()
    if grid.size < 4:
        raise ConfigError("sweep needs at least 4 grid points")
    dims = cfg.dims()
    n_sites = int(np.prod(dims))
    dense = (1 << n_sites) <= MAX_DENSE_STATES
    if dense:
        L, L1, L2 = cfg.generator()
    rows = []
    summary = {}
    for name in cfg.schemes:
        scheme = cfg.scheme(name)
        pts = []
        for dt in grid:
            est, _, _, _, _, _ = _run_lattice(cfg, name, float(dt), threads)
            acc = est.accumulator_
            exact_pp = None
            if dense:
                exact_pp = rer(scheme_matrix(L1, L2, scheme, dt), expm(L, dt)) / n_sites
            pts.append((float(dt), acc.estimate, acc.stderr, est.pp_rer(dt),
                        acc.stderr * dt ** acc.order / n_sites, exact_pp))
            rows.append(["point", name, dt, pts[-1][3], pts[-1][4], exact_pp, None, None, None, None, None])
        order = scheme.rer_order
        fit = fit_order([(p[0], p[3]) for p in pts]) if all(p[3] > 0 for p in pts) else None
        fit_dense = fit_order([(p[0], p[5]) for p in pts]) if dense and all(p[5] > 0 for p in pts) else None
        coeff_pp = _weighted_coefficient([p[1] for p in pts], [p[2] for p in pts]) / n_sites
        rows.append(["fit", name, None, None, None, None, None, None,
                     fit.slope if fit else None, fit_dense.slope if fit_dense else None, coeff_pp])
        tol_rows = {}
        for tol in cfg.tolerances:
            dtt = dt_for_tolerance(coeff_pp, order, float(tol)) if coeff_pp > 0 else 1.0
            tol_rows[str(tol)] = dtt
            rows.append(["tolerance", name, None, None, None, None, float(tol), dtt, None, None, coeff_pp])
        summary[name] = {"slope": fit.slope if fit else None,
                         "slope_dense": fit_dense.slope if fit_dense else None,
                         "coefficient_pp": coeff_pp, "order": order, "dt_for_tolerance": tol_rows}
    header = ["row_type", "scheme", "dt", "pp_rer", "stderr", "pp_rer_dense", "tolerance",
              "dt_for_tolerance", "slope", "slope_dense", "coefficient_pp"]
    meta = _header(cfg, "sweep")
    out.add_csv("sweep.csv", header, rows, meta)
    report = dict(meta, summary=summary)
    out.add_json("sweep_summary.json", report)
    return report


def _scheme_coefficient(cfg: RunConfig, entry: dict | str, threads: int):
    if isinstance(entry, dict) and "A" in entry:
        return str(entry.get("name", "scheme")), float(entry["A"]), float(entry["p"])
    name = entry["name"] if isinstance(entry, dict) else str(entry)
    scheme = cfg.scheme(name)
    if cfg.system["kind"] == "dense" or (1 << int(np.prod(cfg.dims()))) <= MAX_DENSE_STATES:
        L, L1, L2 = cfg.generator()
        A, order = leading_rer_coefficient(L, L1, L2, scheme)
        return name, A, order
    est, *_ = _run_lattice(cfg, name, cfg.dt, threads)
    return name, est.accumulator_.estimate, est.order_


def cmd_compare(cfg: RunConfig, out: OutputSet, threads: int = 1) -> dict:
    """Information criterion between two schemes on a grid of steps."""
    pair = (cfg.compare or {}).get("schemes") or cfg.schemes
    if len(pair) != 2:
        raise ConfigError("compare needs exactly two schemes")
    (n1, a1, p1), (n2, a2, p2) = (_scheme_coefficient(cfg, s, threads) for s in pair)
    grid = cfg.grid() if cfg.dt_grid else np.asarray([cfg.dt])
    report = _header(cfg, "compare")
    report.update({"A1": a1, "p1": p1, "A2": a2, "p2": p2, "names": [n1, n2],
                   "criterion": [{"dt": float(d), "value": info_criterion(float(d), (a1, p1), (a2, p2))}
                                 for d in grid],
                   "crossover_dt": crossover_dt((a1, p1), (a2, p2))})
    comm = cfg.comm or {}
    if not comm and cfg.system["kind"] == "lattice":
        comm = {"N": cfg.dims()[0], "m": cfg.m}
    if comm:
        N, m = int(comm["N"]), int(comm["m"])
        report["comm_bound"] = {"N": N, "m": m,
                                "lie": comm_bound(m, N, SchemeSpec.lie()),
                                "strang": comm_bound(m, N, SchemeSpec.strang())}
    out.add_json("compare.json", report)
    return report


COMMANDS = {
    "analyze-chain": cmd_analyze_chain,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("SPLITMC_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        k = int(value)
    except ValueError as exc:
        raise ConfigError(f"bad thread count {value!r}") from exc
    if k < 1:
        raise ConfigError("thread count must be at least 1")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
        p.add_argument("--threads", default=None, help="worker threads (default: $SPLITMC_THREADS or all cores)")
        p.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        threads = _threads(args.threads)
        out = OutputSet(args.out)
        COMMANDS[args.command](cfg, out, threads)
        out.publish()
    except (ConfigError, DecompositionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SplitMCError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
