"""Deterministic fluid engine for the token-based dispatcher.

The state is the truncated occupancy vector ``s`` (``s_i`` = fraction of
servers with at least ``i`` jobs). Drift, equilibria and asymptotic delays are
closed forms; trajectories are integrated with an embedded Dormand-Prince 5(4)
pair plus projection onto the monotone set. In the high-message regime the
drift is discontinuous at ``s_1 = 1``; the integrator detects the hitting
time, holds ``s_1`` at one with the sliding value of P0, and releases once
``s_2`` drops to ``1 - lambda``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .core import (
    DEFAULT_TRUNCATION,
    OccupancyVector,
    ParameterError,
    Regime,
    RegimeKind,
    SystemParams,
    total_mass,
)

__all__ = [
    "FluidParams",
    "FluidSolution",
    "Equilibrium",
    "TruncationError",
    "PhaseTransition",
    "p0",
    "fluid_drift",
    "integrate",
    "equilibrium",
    "constrained_delay",
    "phase_transition_limit",
    "power_of_d_delay",
    "delay_from_equilibrium",
    "suggest_truncation",
]

FLUID_REGIMES = (RegimeKind.HIGH_MEMORY, RegimeKind.HIGH_MESSAGE, RegimeKind.CONSTRAINED)


class TruncationError(ParameterError):
    """The trajectory put more than the tail tolerance on the last coordinate."""


@dataclass(frozen=True)
class FluidParams:
    lam: float
    regime: Regime
    truncation: int = DEFAULT_TRUNCATION
    rtol: float = 1e-9
    atol: float = 1e-12
    max_step: float = 1.0
    boundary_tol: float = 1e-9
    tail_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ParameterError(f"lambda out of range (0, 1): {self.lam}")
        if self.regime.kind not in FLUID_REGIMES:
            raise ParameterError(f"no fluid model for regime {self.regime.kind.value}")
        if self.regime.kind is RegimeKind.HIGH_MEMORY:
            if self.regime.mu is None or not self.regime.mu > 0:
                raise ParameterError("high_memory: mu must be > 0")
        elif self.regime.kind is RegimeKind.CONSTRAINED:
            self.regime.check()
        if self.truncation < 2:
            raise ParameterError("truncation must be >= 2")

    @classmethod
    def from_system(cls, params: SystemParams, **kw) -> "FluidParams":
        """Fluid counterpart of a finite system (memory and rate limits taken per regime)."""
        k = params.regime.kind
        if k is RegimeKind.HIGH_MESSAGE:
            regime = Regime.high_message(params.c)
        elif k is RegimeKind.HIGH_MEMORY:
            regime = Regime.high_memory(params.mu)
        elif k is RegimeKind.CONSTRAINED:
            regime = Regime.constrained(params.c, params.mu)
        else:
            raise ParameterError(f"no fluid model for regime {k.value}")
        return cls(params.lam, regime, **kw)

    def with_truncation(self, k: int) -> "FluidParams":
        return FluidParams(self.lam, self.regime, k, self.rtol, self.atol,
                           self.max_step, self.boundary_tol, self.tail_tol)


@dataclass
class FluidSolution:
    """Integrated trajectory on a time grid.

    ``events`` holds ``(t, kind, state)`` tuples where ``kind`` is ``"hit"``
    (``s_1`` reached one) or ``"release"`` (``s_1`` left one).
    """

    times: np.ndarray
    states: np.ndarray
    params: FluidParams
    events: list = field(default_factory=list)

    def state(self, j: int) -> OccupancyVector:
        return OccupancyVector(self.states[j])

    @property
    def final(self) -> OccupancyVector:
        return OccupancyVector(self.states[-1])

    def event_times(self, kind: str) -> list[float]:
        return [t for t, k, _ in self.events if k == kind]

    def to_csv(self, path=None, levels: int | None = None) -> str:
        """Rows ``t, event, s_1..s_K``; boundary events appear as extra annotated rows."""
        k = self.states.shape[1] - 1 if levels is None else levels
        rows = [(t, "", s) for t, s in zip(self.times, self.states)]
        rows += [(t, kind, s) for t, kind, s in self.events]
        rows.sort(key=lambda r: (r[0], r[1] != ""))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "event"] + [f"s_{i}" for i in range(1, k + 1)])
        for t, kind, s in rows:
            w.writerow([repr(float(t)), kind] + [repr(float(x)) for x in s[1 : k + 1]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @staticmethod
    def read_csv(path) -> tuple[np.ndarray, np.ndarray, list]:
        """Parse a trajectory CSV back into ``(times, states, events)``."""
        times, states, events = [], [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                s = np.concatenate(([1.0], np.array(row[2:], dtype=float)))
                if row[1]:
                    events.append((float(row[0]), row[1], s))
                else:
                    times.append(float(row[0]))
                    states.append(s)
        return np.array(times), np.array(states), events


@dataclass(frozen=True)
class Equilibrium:
    p0_star: float
    s_star: OccupancyVector
    delay: float

    def to_record(self, prefix: int = 6) -> str:
        """Flat ``key=value`` text record."""
        lines = [f"p0_star={float(self.p0_star)!r}", f"delay={float(self.delay)!r}"]
        lines += [f"s_{i}={float(self.s_star[i])!r}" for i in range(1, min(prefix, self.s_star.truncation_level) + 1)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_record(text: str) -> dict[str, float]:
        out = {}
        for line in text.splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                out[key.strip()] = float(val)
        return out


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, OccupancyVector) else np.asarray(s, dtype=float)


def _constrained_p0(x: float, c: int) -> float:
    # 0**0 == 1 in Python, which is the convention needed at s_1 = 1
    return 1.0 / sum(x**k for k in range(c + 1))


def p0(s, params: FluidParams) -> float:
    """Limiting probability that the token store is empty at occupancy ``s``."""
    v = _values(s)
    s1 = v[1]
    s2 = v[2] if v.size > 2 else 0.0
    lam = params.lam
    kind = params.regime.kind
    if kind is RegimeKind.HIGH_MEMORY:
        return max(0.0, 1.0 - params.regime.mu * (1.0 - s1) / lam)
    if kind is RegimeKind.HIGH_MESSAGE:
        if s1 < 1.0 - params.boundary_tol:
            return 0.0
        return max(0.0, 1.0 - (1.0 - s2) / lam)
    return _constrained_p0(params.regime.mu * (1.0 - s1) / lam, params.regime.c)


def _drift(v: np.ndarray, lam: float, p: float) -> np.ndarray:
    f = np.zeros_like(v)
    nxt = np.empty_like(v)
    nxt[:-1] = v[1:]
    nxt[-1] = 0.0
    f[1] = lam * (1.0 - p) + lam * (1.0 - v[1]) * p - (v[1] - nxt[1])
    f[2:] = lam * (v[1:-1] - v[2:]) * p - (v[2:] - nxt[2:])
    return f


def fluid_drift(s, params: FluidParams) -> np.ndarray:
    """Drift vector ``F(s)`` with ``F_0 = 0`` and the closure ``s_{K+1} = 0``."""
    v = _values(s)
    return _drift(v, params.lam, p0(v, params))


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _project(v: np.ndarray, pinned: bool) -> np.ndarray:
    v[0] = 1.0
    np.clip(v, 0.0, 1.0, out=v)
    if pinned:
        v[1] = 1.0
    np.minimum.accumulate(v, out=v)
    return v


class _Integrator:
    """Single-trajectory DP45 stepper aware of the high-message boundary."""

    def __init__(self, params: FluidParams):
        self.params = params
        self.lam = params.lam
        self.sliding = params.regime.kind is RegimeKind.HIGH_MESSAGE
        self.release_level = 1.0 - params.lam + params.boundary_tol
        self.hit_level = 1.0 - params.boundary_tol
        self.pinned = False

    def rhs(self, v: np.ndarray) -> np.ndarray:
        if not self.sliding:
            return _drift(v, self.lam, p0(v, self.params))
        if self.pinned:
            p = max(0.0, 1.0 - (1.0 - v[2]) / self.lam)
            f = _drift(v, self.lam, p)
            f[1] = 0.0
            return f
        return _drift(v, self.lam, 0.0)

    def step(self, v, f0, h):
        k = [f0]
        for i in range(1, 7):
            y = v + h * sum(a * kj for a, kj in zip(_A[i], k))
            k.append(self.rhs(y))
        y5 = v + h * sum(b * kj for b, kj in zip(_B, k) if b)
        err = h * sum(e * kj for e, kj in zip(_E, k) if e)
        return y5, err

    def err_norm(self, v, y, err) -> float:
        p = self.params
        scale = p.atol + p.rtol * np.maximum(np.abs(v), np.abs(y))
        return float(np.sqrt(np.mean((err / scale) ** 2)))

    def guard(self, v) -> float:
        """Signed distance to the next mode switch; crossing zero from above triggers it."""
        if not self.sliding:
            return 1.0
        if self.pinned:
            return v[2] - self.release_level
        return self.hit_level - v[1]


def integrate(initial, params: FluidParams, horizon: float, *, sample_dt: float | None = None,
              t_eval=None) -> FluidSolution:
    """Integrate ``ds/dt = F(s)`` from ``initial`` over ``[0, horizon]``.

    Output is reported at ``t_eval`` (default: a grid of spacing ``sample_dt``,
    itself defaulting to ``horizon / 1000``). Steps are clipped so every output
    time is hit exactly. Raises TruncationError when ``s_K`` exceeds the tail
    tolerance.
    """
    p = params
    v = OccupancyVector(initial).padded(p.truncation) if not isinstance(initial, OccupancyVector) \
        else initial.padded(p.truncation)
    if v.size > p.truncation + 1:
        if np.any(v[p.truncation + 1 :] > p.tail_tol):
            raise TruncationError(f"initial state has mass beyond truncation K={p.truncation}")
        v = v[: p.truncation + 1].copy()
    if t_eval is None:
        dt = sample_dt if sample_dt is not None else (horizon / 1000 if horizon > 0 else 1.0)
        m = int(math.floor(horizon / dt + 1e-9))
        t_eval = np.arange(m + 1) * dt
        if t_eval[-1] < horizon - 1e-12:
            t_eval = np.append(t_eval, horizon)
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.size == 0 or t_eval[0] < 0 or np.any(np.diff(t_eval) <= 0):
        raise ValueError("t_eval must be nonempty, nonnegative and strictly increasing")

    ig = _Integrator(p)
    events = []
    if ig.sliding and v[1] >= ig.hit_level:
        if v[2] > ig.release_level:
            ig.pinned = True
        v[1] = 1.0
    v = _project(v, ig.pinned)
    _check_tail(v, p)

    out = np.empty((t_eval.size, v.size))
    t = 0.0
    j = 0
    while j < t_eval.size and t_eval[j] <= 0.0:
        out[j] = v
        j += 1
    f = ig.rhs(v)
    h = min(p.max_step, 0.01)
    while j < t_eval.size:
        target = t_eval[j]
        h_try = min(h, target - t, p.max_step)
        y, err = ig.step(v, f, h_try)
        en = ig.err_norm(v, y, err)
        if en > 1.0:
            h = h_try * max(0.2, 0.9 * en ** -0.2)
            if h < 1e-14:
                raise RuntimeError(f"step size underflow at t={t}")
            continue
        g0, g1 = ig.guard(v), ig.guard(y)
        if g0 > 0.0 and g1 <= 0.0:
            # locate the switch within the step by root finding on the step length
            hs = brentq(lambda hh: ig.guard(ig.step(v, f, hh)[0]), 0.0, h_try, xtol=1e-14, rtol=1e-14)
            y, _ = ig.step(v, f, hs)
            t += hs
            ig.pinned = not ig.pinned
            if ig.pinned:
                y[1] = 1.0
            v = _project(y, ig.pinned)
            events.append((t, "hit" if ig.pinned else "release", v.copy()))
            if ig.pinned and ig.guard(v) <= 0.0:
                ig.pinned = False
                events.append((t, "release", v.copy()))
            f = ig.rhs(v)
            h = h_try
            if np.isclose(t, target, rtol=0, atol=1e-13):
                t = target
                out[j] = v
                j += 1
            continue
        t = target if h_try == target - t else t + h_try
        v = _project(y, ig.pinned)
        _check_tail(v, p)
        f = ig.rhs(v)
        if t >= target:
            out[j] = v
            j += 1
        grow = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.2)
        h = max(h_try * grow, h) if h_try < h else h_try * grow
    return FluidSolution(t_eval, out, p, events)


def _check_tail(v: np.ndarray, p: FluidParams) -> None:
    if v[-1] > p.tail_tol:
        raise TruncationError(
            f"s_K = {v[-1]:.3g} exceeds tail tolerance {p.tail_tol:g} at K={p.truncation}; "
            "increase the truncation level"
        )


def equilibrium(params: FluidParams) -> Equilibrium:
    """Unique fixed point ``s_i* = lam (lam P0*)^(i-1)`` and its delay."""
    lam = params.lam
    r = params.regime
    if r.kind is RegimeKind.HIGH_MEMORY:
        p = max(0.0, 1.0 - r.mu * (1.0 - lam) / lam)
    elif r.kind is RegimeKind.HIGH_MESSAGE:
        p = 0.0
    else:
        p = _constrained_p0(r.mu * (1.0 - lam) / lam, r.c)
    i = np.arange(1, params.truncation + 1)
    s = np.empty(params.truncation + 1)
    s[0] = 1.0
    s[1:] = lam * (lam * p) ** (i - 1)
    rho = lam * p
    return Equilibrium(p, OccupancyVector(s), rho / (1.0 - rho))


def suggest_truncation(params: FluidParams, tol: float = 1e-14) -> int:
    """Smallest K whose equilibrium tail ``sum_{i>K} s_i*`` is below ``tol`` (at least 8)."""
    rho = params.lam * equilibrium(params.with_truncation(2)).p0_star
    if rho <= 0.0:
        return 8
    # tail = lam rho^K / (1 - rho)
    k = math.log(tol * (1.0 - rho) / params.lam) / math.log(rho)
    return max(8, int(math.ceil(k)) + 1)


def constrained_delay(lam: float, alpha: float, c: int) -> float:
    """Asymptotic delay ``lam / (1 - lam + sum_{k=1..c} (alpha/lam)^k)``.

    ``alpha`` is the per-server average message rate, i.e. ``mu = alpha/(1-lam)``.
    ``alpha = 0`` gives the M/M/1 value ``lam/(1-lam)``.
    """
    if not 0.0 < lam < 1.0:
        raise ParameterError(f"lambda out of range (0, 1): {lam}")
    if alpha < 0 or c < 0:
        raise ParameterError("alpha and c must be nonnegative")
    r = alpha / lam
    if r == 0.0 or c == 0:
        geo = 0.0
    elif r == 1.0:
        geo = float(c)
    elif r > 1.0 and c * math.log(r) > 700.0:
        # sum ~ r^(c+1)/(r-1); evaluate lam/sum in logs
        return lam * math.exp(math.log(r - 1.0) - (c + 1) * math.log(r))
    else:
        geo = r * (1.0 - r**c) / (1.0 - r)
    return lam / (1.0 - lam + geo)


@dataclass(frozen=True)
class PhaseTransition:
    """Behaviour of the constrained delay as memory ``c`` grows at fixed ``lam, alpha``.

    ``case`` is ``"below"`` (alpha < lam, finite positive limit), ``"critical"``
    (alpha = lam, decay like 1/c) or ``"above"`` (alpha > lam, exponential decay).
    ``printed_limit`` is the alternative closed form with ``+1`` in the
    denominator, kept for comparison only.
    """

    case: str
    lam: float
    alpha: float
    limit: float
    printed_limit: float | None = None

    def bound(self, c: int) -> float:
        if self.case == "critical":
            return self.lam / (1.0 - self.lam + c)
        if self.case == "above":
            return (self.lam / self.alpha) ** c
        return constrained_delay(self.lam, self.alpha, c)


def phase_transition_limit(lam: float, alpha: float) -> PhaseTransition:
    if not 0.0 < lam < 1.0 or not alpha > 0:
        raise ParameterError("need 0 < lambda < 1 and alpha > 0")
    if alpha < lam:
        gap = lam - alpha
        return PhaseTransition(
            "below", lam, alpha,
            limit=lam * gap / ((1.0 - lam) * gap + alpha),
            printed_limit=lam * gap / ((1.0 - lam) * gap + 1.0),
        )
    if alpha == lam:
        return PhaseTransition("critical", lam, alpha, limit=0.0)
    return PhaseTransition("above", lam, alpha, limit=0.0)


def power_of_d_delay(lam: float, d: int, tol: float = 1e-12) -> float:
    """Asymptotic waiting time of join-shortest-of-d: ``sum_{i>=1} lam^((d^i-d)/(d-1)) - 1``."""
    if not 0.0 < lam < 1.0:
        raise ParameterError(f"lambda out of range (0, 1): {lam}")
    if d < 2:
        raise ParameterError("power_of_d_delay needs d >= 2")
    total = 0.0
    expo = 0
    while True:
        term = lam**expo
        total += term
        if term < tol:
            break
        expo = expo * d + d
    return total - 1.0


def delay_from_equilibrium(s_star, lam: float) -> float:
    """Waiting time from an occupancy fixed point via Little's law: ``sum_{i>=1} s_i / lam - 1``."""
    return total_mass(_values(s_star), 1) / lam - 1.0
