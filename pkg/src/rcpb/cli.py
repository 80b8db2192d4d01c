"""``rcpb`` command line: simulate, fluid, sweep and compare.

Configuration is an INI file with sections ``[system]``, ``[regime]``,
``[fluid]`` and ``[experiment]``. Unknown sections or keys are errors. Any key
can be overridden from the environment as ``RCPB_<SECTION>_<KEY>``, for
example ``RCPB_SYSTEM_LAM=0.95``.
"""

from __future__ import annotations

import argparse
import configparser
import os
import secrets
import sys
import warnings

import numpy as np

from . import __version__
from .core import (OccupancyVector, ParameterError, Regime, RegimeKind, Schedule, SystemParams,
                   validate_params, weighted_norm)
from .fluid import FluidParams, equilibrium, integrate
from .sim import DEFAULT_SEED, run_trajectory
from . import experiments as ex

ENV_PREFIX = "RCPB_"


class ConfigError(Exception):
    """Invalid configuration; the message names the offending section or key."""


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kind(text):
    return RegimeKind(text.strip().lower())


# section -> key -> (parser, description)
SCHEMA = {
    "system": {
        "n": (int, "number of servers"),
        "lam": (float, "per-server arrival rate, 0 < lam < 1"),
    },
    "regime": {
        "kind": (_kind, "high_memory | high_message | constrained | random_routing | power_of_d | pull"),
        "c": (int, "token memory (high_message, constrained; constrained default 2)"),
        "mu": (float, "idle message rate (high_memory, constrained; constrained default lam/(1-lam))"),
        "alpha": (float, "sets mu = alpha/(1-lam) when mu is not given"),
        "d": (int, "samples per arrival (power_of_d)"),
        "memory_capacity": (Schedule.parse, "c(n) for high_memory: 9 | 2*log(n) | 1*n^0.5"),
        "idle_rate": (Schedule.parse, "mu(n) for high_message, same syntax"),
    },
    "fluid": {
        "truncation": (int, "number of tracked levels K"),
        "rtol": (float, "integrator relative tolerance"),
        "atol": (float, "integrator absolute tolerance"),
        "max_step": (float, "largest integrator step"),
        "boundary_tol": (float, "band for detecting s_1 = 1"),
        "tail_tol": (float, "largest admissible s_K"),
        "horizon": (float, "integration horizon"),
        "sample_dt": (float, "output grid spacing"),
        "initial": (_floats, "initial s_1 s_2 ... (default empty system)"),
        "levels": (int, "levels written to trajectory CSV"),
    },
    "experiment": {
        "name": (str, "scenario name"),
        "preset": (str, "figure4 | convergence | figure3 | grid"),
        "horizon": (float, "simulated time per run"),
        "warmup": (float, "discarded initial time (default 30% of horizon)"),
        "seeds": (_ints, "explicit replication seeds"),
        "replications": (int, "seeds --seed, --seed+1, ... when seeds is not given"),
        "batches": (int, "batches for batch-means confidence intervals"),
        "levels": (int, "occupancy levels tracked by the simulator"),
        "trajectory": (_bool, "simulate: also record a sampled trajectory"),
        "sample_dt": (float, "trajectory sampling interval"),
        "initial": (_floats, "trajectory initial s_1 s_2 ... (default empty system)"),
        "lambdas": (_floats, "sweep axis over lam"),
        "ns": (_ints, "sweep axis over n"),
        "cs": (_ints, "sweep axis over c"),
        "alphas": (_floats, "sweep axis over alpha"),
        "ds": (_ints, "sweep axis over d"),
    },
}


class Config:
    """Parsed and type-checked configuration with environment overrides applied."""

    def __init__(self, values: dict, present: set):
        self.values = values
        self.present = present

    @classmethod
    def load(cls, path: str | None = None, environ=None) -> "Config":
        raw = configparser.ConfigParser(interpolation=None)
        if path is not None:
            try:
                with open(path) as fh:
                    raw.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
        environ = os.environ if environ is None else environ
        for var, text in environ.items():
            if not var.startswith(ENV_PREFIX):
                continue
            rest = var[len(ENV_PREFIX):].lower()
            section = next((s for s in SCHEMA if rest.startswith(s + "_")), None)
            if section is None:
                raise ConfigError(f"environment variable {var}: unknown section")
            if not raw.has_section(section):
                raw.add_section(section)
            raw.set(section, rest[len(section) + 1:], text)
        values, present = {}, set()
        for section in raw.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            present.add(section)
            for key, text in raw.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key '{key}' in [{section}]")
                conv = SCHEMA[section][key][0]
                try:
                    values[(section, key)] = conv(text)
                except (ValueError, ParameterError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
        return cls(values, present)

    def get(self, section, key, default=None):
        return self.values.get((section, key), default)

    def require(self, section):
        if section not in self.present:
            raise ConfigError(f"missing [{section}] section")

    def regime(self, lam: float) -> Regime:
        kind = self.get("regime", "kind", RegimeKind.CONSTRAINED)
        c = self.get("regime", "c")
        mu = self.get("regime", "mu")
        if mu is None and self.get("regime", "alpha") is not None:
            mu = self.get("regime", "alpha") / (1.0 - lam)
        d = self.get("regime", "d")

        def need(key, value):
            if value is None:
                raise ConfigError(f"[regime] {key}: required for {kind.value}")
            return value

        if kind is RegimeKind.HIGH_MEMORY:
            need("memory_capacity", self.get("regime", "memory_capacity"))
            r = Regime.high_memory(need("mu", mu))
        elif kind is RegimeKind.HIGH_MESSAGE:
            r = Regime.high_message(need("c", c))
        elif kind is RegimeKind.CONSTRAINED:
            # defaults: two tokens of memory and alpha = lam
            r = Regime.constrained(2 if c is None else c, lam / (1.0 - lam) if mu is None else mu)
        elif kind is RegimeKind.POWER_OF_D:
            r = Regime.power_of_d(need("d", d))
        elif kind is RegimeKind.PULL:
            r = Regime.pull()
        else:
            r = Regime.random_routing()
        try:
            r.check()
        except ParameterError as exc:
            raise ConfigError(f"[regime] {exc}") from exc
        return r

    def lam(self) -> float:
        lam = self.get("system", "lam", 0.9)
        if not 0.0 < lam < 1.0:
            raise ConfigError(f"[system] lam: lambda out of range (0, 1): {lam}")
        return lam

    def system(self) -> SystemParams:
        lam = self.lam()
        n = self.get("system", "n", 500)
        if n < 1:
            raise ConfigError(f"[system] n: must be a positive integer, got {n}")
        regime = self.regime(lam)
        memory = self.get("regime", "memory_capacity")
        rate = self.get("regime", "idle_rate")
        if regime.kind is RegimeKind.HIGH_MESSAGE and rate is None:
            raise ConfigError("[regime] idle_rate: required for high_message")
        params = SystemParams(n, lam, regime, memory, rate)
        try:
            validate_params(params)
        except ParameterError as exc:
            raise ConfigError(f"[system] {exc}") from exc
        return params

    def fluid(self) -> FluidParams:
        lam = self.lam()
        regime = self.regime(lam)
        if not regime.kind.uses_tokens:
            raise ConfigError(f"[regime] kind: no fluid model for {regime.kind.value}")
        kw = {k: self.get("fluid", k) for k in ("truncation", "rtol", "atol", "max_step",
                                                 "boundary_tol", "tail_tol")
              if self.get("fluid", k) is not None}
        try:
            return FluidParams(lam, regime, **kw)
        except ParameterError as exc:
            raise ConfigError(f"[fluid] {exc}") from exc

    def seeds(self, base: int) -> tuple:
        seeds = self.get("experiment", "seeds")
        if seeds is None:
            reps = self.get("experiment", "replications", 1)
            if reps < 1:
                raise ConfigError("[experiment] replications: must be >= 1")
            seeds = tuple(base + i for i in range(reps))
        if len(set(seeds)) != len(seeds):
            raise ConfigError("[experiment] seeds: must be distinct")
        return seeds


def _initial(values, levels=None):
    if values is None:
        return OccupancyVector.empty(levels or 2)
    return OccupancyVector.from_tail(values)


def _out(args, name):
    os.makedirs(args.output, exist_ok=True)
    return os.path.join(args.output, name)


def cmd_simulate(cfg: Config, args) -> int:
    params = cfg.system()
    horizon = args.horizon or cfg.get("experiment", "horizon", 1000.0)
    warmup = cfg.get("experiment", "warmup")
    seeds = cfg.seeds(args.seed)
    runs = ex.run_replications(params, seeds, horizon, warmup, args.jobs,
                               batches=cfg.get("experiment", "batches", 32),
                               levels=cfg.get("experiment", "levels", 32))
    for r in runs:
        m_mean = float(np.dot(np.arange(r.token_hist.size), r.token_hist))
        hist = " ".join(f"{p:.4f}" for p in r.token_hist[: min(r.token_hist.size, 6)])
        print(f"seed={r.seed} delay={r.waiting.mean:.6g} +/- {r.waiting.half_width:.3g} "
              f"message_rate={r.message_rate:.6g} tokens_mean={m_mean:.4g} P(M=0..)={hist}"
              + (" UNDER-SAMPLED" if r.under_sampled else ""))
        if args.output:
            r.to_summary_csv(_out(args, f"run_seed{r.seed}.csv"))
    if cfg.get("experiment", "trajectory", False):
        traj = run_trajectory(params, _initial(cfg.get("experiment", "initial")), horizon, seeds[0],
                              sample_dt=cfg.get("experiment", "sample_dt", 0.05),
                              levels=cfg.get("experiment", "levels", 32))
        if args.output:
            traj.to_csv(_out(args, f"trajectory_seed{seeds[0]}.csv"))
    return 0


def cmd_fluid(cfg: Config, args) -> int:
    fp = cfg.fluid()
    eq = equilibrium(fp)
    prefix = " ".join(f"{x:.6g}" for x in eq.s_star.values[:6])
    print(f"P0*={eq.p0_star:.6g} delay={eq.delay:.6g}")
    print(f"s*=({prefix}, ...)")
    if args.output:
        with open(_out(args, "equilibrium.txt"), "w") as fh:
            fh.write(eq.to_record())
    if args.equilibrium_only:
        return 0
    horizon = args.horizon or cfg.get("fluid", "horizon", 200.0)
    sol = integrate(_initial(cfg.get("fluid", "initial"), fp.truncation), fp, horizon,
                    sample_dt=cfg.get("fluid", "sample_dt"))
    for t, kind, s in sol.events:
        print(f"event {kind} t={t:.6g} s_1={s[1]:.6g} s_2={s[2]:.6g}")
    print(f"final gap to s*={weighted_norm(sol.final, eq.s_star):.3g} at t={horizon:g}")
    if args.output:
        sol.to_csv(_out(args, "trajectory.csv"), levels=cfg.get("fluid", "levels", 8))
    return 0


def _figure4(cfg: Config, args):
    sys_n = cfg.get("system", "n", 500)
    seeds = cfg.seeds(args.seed) if ("experiment", "seeds") in cfg.values or \
        ("experiment", "replications") in cfg.values else tuple(args.seed + i for i in range(8))
    rows, _ = ex.run_figure4(
        lambdas=cfg.get("experiment", "lambdas", ex.FIGURE4_LAMBDAS),
        n=sys_n, c=cfg.get("regime", "c", 2), d=cfg.get("regime", "d", 2), seeds=seeds,
        horizon=args.horizon or cfg.get("experiment", "horizon", 2000.0),
        warmup=cfg.get("experiment", "warmup", 600.0), jobs=args.jobs, output_dir=args.output)
    for r in rows:
        flag = " FLAGGED" if r["flagged"] else ""
        print(f"lam={r['lam']:g} policy={r['policy']} delay={r['sim_delay']:.5g} +/- {r['sim_ci']:.3g} "
              f"formula={r['formula']:.5g}{flag}")
    return rows


def _convergence(cfg: Config, args):
    lam = cfg.get("system", "lam", 0.9)
    if ("regime", "kind") in cfg.values:
        params = SystemParams(100, cfg.lam(), cfg.regime(lam),
                              cfg.get("regime", "memory_capacity"), cfg.get("regime", "idle_rate"))
    else:
        params = SystemParams(100, cfg.lam(), Regime.constrained(2, 9.0))
    seeds = cfg.seeds(args.seed) if ("experiment", "seeds") in cfg.values or \
        ("experiment", "replications") in cfg.values else tuple(args.seed + i for i in range(8))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = ex.run_convergence_study(
            cfg.get("experiment", "ns", (100, 1000, 10000)), params,
            _initial(cfg.get("experiment", "initial")),
            args.horizon or cfg.get("experiment", "horizon", 20.0), seeds,
            sample_dt=cfg.get("experiment", "sample_dt", 0.05), jobs=args.jobs,
            output_dir=args.output)
    for r in rows:
        print(f"n={r['n']} gap={r['mean_gap']:.5g} +/- {r['ci']:.3g}")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return rows


def _grid(cfg: Config, args):
    axes = {}
    for key, axis in (("lambdas", "lam"), ("ns", "n"), ("cs", "c"), ("alphas", "alpha"), ("ds", "d")):
        if cfg.get("experiment", key) is not None:
            axes[axis] = cfg.get("experiment", key)
    try:
        sc = ex.Scenario(cfg.get("experiment", "name", "grid"), params=cfg.system(),
                         seeds=cfg.seeds(args.seed), axes=axes,
                         horizon=args.horizon or cfg.get("experiment", "horizon", 1000.0),
                         warmup=cfg.get("experiment", "warmup"), output_dir=args.output)
    except ParameterError as exc:
        raise ConfigError(f"[experiment] {exc}") from exc
    records = ex.run_sweep(sc, jobs=args.jobs)
    for r in records:
        nominal = "" if r.nominal_rate is None else f" nominal_rate={r.nominal_rate:.6g}"
        print(f"{r.scenario} delay={r.sim_delay:.5g} +/- {r.sim_ci:.3g} fluid={r.fluid_delay:.5g} "
              f"message_rate={r.message_rate:.6g}{nominal}" + (" FLAGGED" if r.flagged else ""))
    return records


def _figure3(cfg: Config, args):
    lam = cfg.get("system", "lam", 0.9)
    sol, notes = ex.run_figure3(lam=lam, c=cfg.get("regime", "c", 1),
                                initial=cfg.get("fluid", "initial", (0.7, 0.7, 0.7)),
                                horizon=args.horizon or cfg.get("fluid", "horizon", 200.0),
                                sample_dt=cfg.get("fluid", "sample_dt", 0.05), output_dir=args.output)
    print(" ".join(f"{k}={v:.6g}" for k, v in notes.items()))
    return notes


PRESETS = {"figure4": _figure4, "convergence": _convergence, "figure3": _figure3, "grid": _grid}


def cmd_sweep(cfg: Config, args) -> int:
    preset = args.preset or cfg.get("experiment", "preset", "grid")
    if preset not in PRESETS:
        raise ConfigError(f"[experiment] preset: unknown preset {preset!r}")
    PRESETS[preset](cfg, args)
    return 0


def cmd_compare(cfg: Config, args) -> int:
    cfg.require("system")
    cfg.require("fluid")
    params = cfg.system()
    fp = cfg.fluid()
    eq = equilibrium(fp)
    seeds = cfg.seeds(args.seed)
    horizon = args.horizon or cfg.get("experiment", "horizon", 1000.0)
    runs = ex.run_replications(params, seeds, horizon, cfg.get("experiment", "warmup"), args.jobs)
    rec = ex._record("compare", params, runs, None)
    rec.fluid_delay = eq.delay
    fluid_horizon = cfg.get("fluid", "horizon")
    if fluid_horizon:
        dt = cfg.get("fluid", "sample_dt", 0.05)
        init = _initial(cfg.get("fluid", "initial"), fp.truncation)
        sol = integrate(init, fp, fluid_horizon, sample_dt=dt)
        gaps = [ex.trajectory_gap(run_trajectory(params, init, fluid_horizon, s, sample_dt=dt), sol)
                for s in seeds]
        rec.trajectory_gap = float(np.mean(gaps))
    gap = "" if rec.trajectory_gap is None else f" trajectory_gap={rec.trajectory_gap:.4g}"
    print(f"delay={rec.sim_delay:.6g} +/- {rec.sim_ci:.3g} fluid_delay={rec.fluid_delay:.6g} "
          f"message_rate={rec.message_rate:.6g}{gap}" + (" FLAGGED" if rec.flagged else ""))
    if args.output:
        row = rec.row()
        ex.write_table(_out(args, "compare.csv"), list(row), [list(row.values())])
    return 0


COMMANDS = {"simulate": cmd_simulate, "fluid": cmd_fluid, "sweep": cmd_sweep, "compare": cmd_compare}


def _config_epilog() -> str:
    lines = ["configuration keys (override with RCPB_<SECTION>_<KEY>):"]
    for section, keys in SCHEMA.items():
        for key, (_, text) in keys.items():
            lines.append(f"  [{section}] {key}: {text}")
    return "\n".join(lines)


def _seed(text: str) -> int:
    if text == "random":
        return secrets.randbits(63)
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--seed", type=_seed, default=DEFAULT_SEED, metavar="U64",
                        help=f"base seed (default {DEFAULT_SEED}); 'random' draws one from the OS")
    common.add_argument("--output", metavar="DIR", help="directory for CSV and record files")
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="maximum concurrent replications (default 1)")
    common.add_argument("--horizon", type=float, help="override the configured horizon")
    parser = argparse.ArgumentParser(
        prog="rcpb", description="Token-based load balancing: simulator and fluid model. "
        "Every subcommand accepts --config, --seed, --output, --jobs and --horizon.",
        epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"rcpb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], epilog=_config_epilog(),
              formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("simulate", help="steady-state runs of the n-server system", **kw)
    f = sub.add_parser("fluid", help="fluid equilibrium and trajectory", **kw)
    f.add_argument("--equilibrium-only", action="store_true", help="skip trajectory integration")
    s = sub.add_parser("sweep", help="parameter sweeps and figure presets", **kw)
    s.add_argument("--preset", choices=sorted(PRESETS), help="override [experiment] preset")
    sub.add_parser("compare", help="simulation against the fluid prediction", **kw)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = Config.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
