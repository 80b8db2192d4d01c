"""Scenario harness coupling the simulator with the fluid engine.

Every routine returns plain tables (lists of dicts) and, given an output
directory, writes ``scenario.meta``, one CSV per sweep point and ``summary.csv``.
Replications run on a thread pool; the compiled event loop releases the GIL.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .core import OccupancyVector, ParameterError, Regime, RegimeKind, SystemParams, weighted_norm
from .fluid import (
    FluidParams,
    constrained_delay,
    equilibrium,
    integrate,
    power_of_d_delay,
)
from .sim import DEFAULT_SEED, run_steady_state, run_trajectory

__all__ = [
    "Scenario",
    "ComparisonRecord",
    "reference_occupancy",
    "reference_delay",
    "run_replications",
    "run_sweep",
    "run_figure4",
    "run_figure3",
    "run_convergence_study",
    "run_interchange_check",
    "write_table",
    "read_table",
    "FIGURE4_LAMBDAS",
]

FIGURE4_LAMBDAS = (0.5, 0.7, 0.9, 0.95, 0.99, 0.995)


@dataclass
class Scenario:
    """A named experiment: base parameters, sweep axes and replication seeds."""

    name: str
    params: SystemParams | None = None
    fluid: FluidParams | None = None
    seeds: tuple = (DEFAULT_SEED,)
    axes: dict = field(default_factory=dict)
    horizon: float = 2000.0
    warmup: float | None = None
    output_dir: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ParameterError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ParameterError("seeds must be distinct across replications")
        for key, values in self.axes.items():
            if key not in ("lam", "c", "alpha", "n", "d"):
                raise ParameterError(f"unknown sweep axis {key!r}")
            if len(values) == 0:
                raise ParameterError(f"sweep axis {key!r} is empty")

    @property
    def replications(self) -> int:
        return len(self.seeds)

    def meta(self) -> dict:
        out = {"name": self.name, "version": __version__, "seeds": " ".join(map(str, self.seeds)),
               "horizon": self.horizon, "warmup": self.warmup}
        if self.params is not None:
            p = self.params
            out.update(n=p.n, lam=p.lam, regime=p.regime.kind.value)
            if p.regime.kind.uses_tokens:
                out.update(c=p.c, mu=p.mu)
        for key, values in self.axes.items():
            out[f"axis.{key}"] = " ".join(map(repr, values))
        return out


@dataclass
class ComparisonRecord:
    """Simulated quantity next to its fluid or closed-form prediction."""

    scenario: str
    sim_delay: float
    sim_ci: float
    fluid_delay: float
    trajectory_gap: float | None = None
    message_rate: float | None = None
    nominal_rate: float | None = None
    replications: int = 1
    flagged: bool = False

    @property
    def relative_error(self) -> float:
        if self.fluid_delay == 0:
            return math.inf if self.sim_delay else 0.0
        return abs(self.sim_delay - self.fluid_delay) / self.fluid_delay

    def row(self) -> dict:
        return dataclasses.asdict(self)


def reference_occupancy(params: SystemParams, levels: int = 64) -> np.ndarray:
    """Large-n fixed point of the occupancy for any simulated policy."""
    lam = params.lam
    i = np.arange(levels + 1, dtype=float)
    k = params.regime.kind
    if k.uses_tokens:
        return equilibrium(FluidParams.from_system(params, truncation=levels)).s_star.padded(levels)
    if k is RegimeKind.RANDOM_ROUTING:
        return lam**i
    if k is RegimeKind.PULL:
        out = np.zeros(levels + 1)
        out[0], out[1] = 1.0, lam
        return out
    d = params.regime.d
    if d == 1:
        return lam**i
    return lam ** ((float(d) ** i - 1.0) / (d - 1.0))


def reference_delay(params: SystemParams) -> float:
    """Large-n waiting time for any simulated policy."""
    lam = params.lam
    k = params.regime.kind
    if k.uses_tokens:
        return equilibrium(FluidParams.from_system(params, truncation=8)).delay
    if k is RegimeKind.RANDOM_ROUTING or (k is RegimeKind.POWER_OF_D and params.regime.d == 1):
        return lam / (1.0 - lam)
    if k is RegimeKind.PULL:
        return 0.0
    return power_of_d_delay(lam, params.regime.d)


def _ci(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return math.inf
    return float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))


def run_replications(params: SystemParams, seeds, horizon: float, warmup: float | None = None,
                     jobs: int = 1, **kw):
    """Independent steady-state runs, one per seed, in seed order."""
    kw.setdefault("strict", False)

    def one(seed):
        return run_steady_state(params, horizon, warmup, seed, **kw)

    if jobs <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, seeds))


def _record(name, params, runs, nominal_rate=None) -> ComparisonRecord:
    means = [r.waiting.mean for r in runs]
    ci = _ci(means) if len(runs) > 1 else runs[0].waiting.half_width
    return ComparisonRecord(
        scenario=name,
        sim_delay=float(np.mean(means)),
        sim_ci=ci,
        fluid_delay=reference_delay(params),
        message_rate=float(np.mean([r.message_rate for r in runs])),
        nominal_rate=nominal_rate,
        replications=len(runs),
        flagged=any(r.under_sampled for r in runs),
    )


def _point_name(params: SystemParams) -> str:
    r = params.regime
    tag = r.kind.value
    if r.kind.uses_tokens:
        tag += f"_c{params.c}_mu{params.mu:g}"
    elif r.kind is RegimeKind.POWER_OF_D:
        tag += f"_d{r.d}"
    return f"{tag}_n{params.n}_lam{params.lam:g}"


def _write_point(outdir, params, runs) -> None:
    rows = [r.summary_row() for r in runs]
    write_table(os.path.join(outdir, _point_name(params) + ".csv"), list(rows[0]),
                [list(r.values()) for r in rows])


def _write_meta(outdir, meta: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "scenario.meta"), "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def run_sweep(scenario: Scenario, jobs: int = 1) -> list[ComparisonRecord]:
    """Grid over the scenario axes around ``scenario.params``.

    Axis ``alpha`` sets ``mu = alpha / (1 - lam)`` for token policies; the
    nominal message rate reported is then ``alpha * n``.
    """
    base = scenario.params
    if base is None:
        raise ParameterError("sweep needs system parameters")
    axes = {k: list(v) for k, v in scenario.axes.items()}
    grid = [{}]
    for key in ("n", "lam", "c", "alpha", "d"):
        if key in axes:
            grid = [dict(g, **{key: v}) for g in grid for v in axes[key]]
    records = []
    for point in grid:
        params, nominal = _apply_point(base, point)
        runs = run_replications(params, scenario.seeds, scenario.horizon, scenario.warmup, jobs)
        rec = _record(_point_name(params), params, runs, nominal)
        records.append(rec)
        if scenario.output_dir:
            _write_point(scenario.output_dir, params, runs)
    if scenario.output_dir:
        _write_meta(scenario.output_dir, scenario.meta())
        _write_records(os.path.join(scenario.output_dir, "summary.csv"), records)
    return records


def _apply_point(base: SystemParams, point: dict):
    n = int(point.get("n", base.n))
    lam = float(point.get("lam", base.lam))
    r = base.regime
    nominal = None
    if r.kind.uses_tokens:
        c = int(point.get("c", r.c if r.c is not None else 1))
        mu = r.mu
        if "alpha" in point:
            mu = point["alpha"] / (1.0 - lam)
            nominal = point["alpha"] * n
        if r.kind is RegimeKind.CONSTRAINED:
            r = Regime.constrained(c, mu)
        elif r.kind is RegimeKind.HIGH_MESSAGE:
            r = Regime.high_message(c)
        else:
            r = Regime.high_memory(mu)
    elif r.kind is RegimeKind.POWER_OF_D and "d" in point:
        r = Regime.power_of_d(int(point["d"]))
    return dataclasses.replace(base, n=n, lam=lam, regime=r), nominal


def _write_records(path, records) -> None:
    rows = [r.row() for r in records]
    write_table(path, list(rows[0]), [list(r.values()) for r in rows])


def run_figure4(lambdas=FIGURE4_LAMBDAS, n: int = 500, c: int = 2, seeds=tuple(range(1, 9)),
                horizon: float = 2000.0, warmup: float = 600.0, d: int = 2, jobs: int = 1,
                output_dir: str | None = None):
    """Delay of the token policy (alpha = lam), power-of-d and pull across loads.

    Returns ``(rows, runs)``: ``rows`` has one dict per (lam, policy) with the
    plot key ``x = log(1/(1-lam))``; ``runs`` maps ``(lam, policy)`` to the
    individual replication results.
    """
    rows, runs = [], {}
    for lam in lambdas:
        alpha = lam
        policies = {
            "rcpb": Regime.constrained(c, alpha / (1.0 - lam)),
            f"power_of_{d}": Regime.power_of_d(d),
            "pull": Regime.pull(),
        }
        for name, regime in policies.items():
            params = SystemParams(n, lam, regime)
            res = run_replications(params, seeds, horizon, warmup, jobs)
            runs[(lam, name)] = res
            rec = _record(name, params, res)
            if name == "rcpb":
                formula = constrained_delay(lam, alpha, c)
                bound = 1.0 / sum(alpha**k for k in range(1, c + 1))
            elif name == "pull":
                formula, bound = 0.0, math.nan
            else:
                formula, bound = power_of_d_delay(lam, d), math.nan
            rows.append({
                "lam": lam, "x": math.log(1.0 / (1.0 - lam)), "policy": name,
                "sim_delay": rec.sim_delay, "sim_ci": rec.sim_ci, "formula": formula,
                "uniform_bound": bound, "message_rate": rec.message_rate,
                "replications": rec.replications, "flagged": int(rec.flagged),
            })
            if output_dir:
                os.makedirs(output_dir, exist_ok=True)
                _write_point(output_dir, params, res)
    if output_dir:
        _write_meta(output_dir, {
            "name": "figure4", "version": __version__, "n": n, "c": c, "alpha": "lambda", "d": d,
            "lambdas": " ".join(map(repr, lambdas)), "seeds": " ".join(map(str, seeds)),
            "horizon": horizon, "warmup": warmup,
        })
        write_table(os.path.join(output_dir, "summary.csv"), list(rows[0]),
                    [list(r.values()) for r in rows])
        with open(os.path.join(output_dir, "figure4.plot"), "w") as fh:
            fh.write(_FIG4_PLOT)
    return rows, runs


_FIG4_PLOT = """\
# declarative plot description; render with any plotting tool
data = summary.csv
x = x
x_label = log(1/(1-lambda))
y = sim_delay
y_error = sim_ci
y_label = average delay
series = policy
series.rcpb = marker:square color:blue
series.power_of_2 = marker:circle color:red
series.pull = marker:asterisk color:green
"""


def run_figure3(lam: float = 0.9, c: int = 1, initial=(0.7, 0.7, 0.7), horizon: float = 200.0,
                sample_dt: float = 0.05, output_dir: str | None = None):
    """High-message fluid trajectory from ``s_1 = s_2 = s_3 = 0.7``.

    Returns ``(solution, notes)`` where ``notes`` holds the hitting and release
    times of ``s_1 = 1``, ``s_2`` at release and the final distance to ``s*``.
    """
    fp = FluidParams(lam, Regime.high_message(c))
    sol = integrate(OccupancyVector.from_tail(initial), fp, horizon, sample_dt=sample_dt)
    eq = equilibrium(fp)
    hits, releases = sol.event_times("hit"), sol.event_times("release")
    rel_states = [s for _, k, s in sol.events if k == "release"]
    notes = {
        "hit_time": float(hits[0]) if hits else math.nan,
        "release_time": float(releases[0]) if releases else math.nan,
        "s2_at_release": float(rel_states[0][2]) if rel_states else math.nan,
        "final_gap": weighted_norm(sol.final, eq.s_star),
    }
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        sol.to_csv(os.path.join(output_dir, "figure3.csv"), levels=8)
        _write_meta(output_dir, {"name": "figure3", "version": __version__, "lam": lam, "c": c,
                                 "initial": " ".join(map(repr, initial)), "horizon": horizon,
                                 **{k: repr(v) for k, v in notes.items()}})
        with open(os.path.join(output_dir, "figure3.plot"), "w") as fh:
            fh.write("data = figure3.csv\nx = t\ny = s_1 s_2 s_3\nmarkers = event\n")
    return sol, notes


def trajectory_gap(traj, sol) -> float:
    """``sup_t ||S^n(t) - s(t)||_w`` over the common sample grid."""
    if traj.times.shape != sol.times.shape or not np.allclose(traj.times, sol.times):
        raise ValueError("trajectories must share a time grid")
    k = min(traj.occupancy.shape[1], sol.states.shape[1])
    diff = traj.occupancy[:, :k] - sol.states[:, :k]
    w = np.ldexp(1.0, -np.arange(k))
    return float(np.sqrt((diff * diff * w).sum(axis=1)).max())


def run_convergence_study(ns, params: SystemParams, initial, horizon: float, seeds,
                          sample_dt: float = 0.05, levels: int = 24, jobs: int = 1,
                          output_dir: str | None = None) -> list[dict]:
    """Mean over seeds of the sup-in-time gap between ``S^n`` and the fluid path, per n.

    A warning is issued (and rows kept) when the gaps are not strictly
    decreasing in n.
    """
    ns = [int(n) for n in ns]
    initial = initial if isinstance(initial, OccupancyVector) else OccupancyVector(initial)
    fp = FluidParams.from_system(dataclasses.replace(params, n=max(ns)))
    sol = integrate(initial, fp, horizon, sample_dt=sample_dt)
    rows = []
    for n in ns:
        p = dataclasses.replace(params, n=n)

        def one(seed, p=p):
            return trajectory_gap(run_trajectory(p, initial, horizon, seed, sample_dt=sample_dt,
                                                 levels=levels), sol)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                gaps = list(pool.map(one, seeds))
        else:
            gaps = [one(s) for s in seeds]
        rows.append({"n": n, "mean_gap": float(np.mean(gaps)), "ci": _ci(gaps),
                     "replications": len(gaps), "gaps": " ".join(repr(g) for g in gaps)})
    if len(rows) > 1 and not all(a["mean_gap"] > b["mean_gap"] for a, b in zip(rows, rows[1:])):
        warnings.warn("trajectory gap is not strictly decreasing in n", RuntimeWarning, stacklevel=2)
    if output_dir:
        _write_meta(output_dir, {"name": "convergence", "version": __version__,
                                 "ns": " ".join(map(str, ns)), "horizon": horizon,
                                 "seeds": " ".join(map(str, seeds)), "lam": params.lam,
                                 "regime": params.regime.kind.value})
        write_table(os.path.join(output_dir, "summary.csv"), list(rows[0]),
                    [list(r.values()) for r in rows])
    return rows


def run_interchange_check(params: SystemParams, horizon: float = 1000.0, seeds=(DEFAULT_SEED,),
                          levels: int = 6, warmup: float | None = None, jobs: int = 1) -> dict:
    """Time-averaged ``S_i`` (averaged over seeds) against the fixed point, ``i <= levels``."""
    runs = run_replications(params, seeds, horizon, warmup, jobs, levels=max(levels, 8))
    avg = np.mean([r.occupancy.mean[: levels + 1] for r in runs], axis=0)
    ref = reference_occupancy(params, levels)
    gaps = np.abs(avg - ref)[1:]
    return {
        "n": params.n, "lam": params.lam, "regime": params.regime.kind.value,
        "occupancy": avg, "reference": ref, "max_gap": float(gaps.max()),
        "flagged": any(r.under_sampled for r in runs), "runs": runs,
    }


def write_table(path, header, rows) -> None:
    """CSV with ``repr`` floats so that ``read_table`` restores values exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _parse(cell: str):
    if cell in ("", "None"):
        return None
    if cell in ("True", "False"):
        return cell == "True"
    for conv in (int, float):
        try:
            return conv(cell)
        except ValueError:
            pass
    return cell


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header = rows[0]
    return [dict(zip(header, map(_parse, r))) for r in rows[1:]]
