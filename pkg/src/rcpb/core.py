"""Shared domain types: regimes, system parameters, occupancy vectors and the weighted norm."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParameterError",
    "RegimeKind",
    "Regime",
    "Schedule",
    "SystemParams",
    "OccupancyVector",
    "validate_params",
    "weighted_norm",
    "total_mass",
    "DEFAULT_TRUNCATION",
    "MONOTONE_SLACK",
]

DEFAULT_TRUNCATION = 64
MONOTONE_SLACK = 1e-12


class ParameterError(ValueError):
    """Raised when a parameter set violates a model constraint."""


class RegimeKind(str, enum.Enum):
    HIGH_MEMORY = "high_memory"
    HIGH_MESSAGE = "high_message"
    CONSTRAINED = "constrained"
    RANDOM_ROUTING = "random_routing"
    POWER_OF_D = "power_of_d"
    PULL = "pull"

    @property
    def uses_tokens(self) -> bool:
        return self in (RegimeKind.HIGH_MEMORY, RegimeKind.HIGH_MESSAGE, RegimeKind.CONSTRAINED)


@dataclass(frozen=True)
class Regime:
    """A dispatching policy together with its policy-specific parameters.

    Only the fields relevant to ``kind`` are meaningful:

    * high_memory: ``mu`` (idle message rate); memory grows with n
    * high_message: ``c`` (memory); message rate grows with n
    * constrained: ``c`` and ``mu``
    * power_of_d: ``d``
    * random_routing, pull: nothing
    """

    kind: RegimeKind
    mu: float | None = None
    c: int | None = None
    d: int | None = None

    @classmethod
    def high_memory(cls, mu: float) -> "Regime":
        return cls(RegimeKind.HIGH_MEMORY, mu=float(mu))

    @classmethod
    def high_message(cls, c: int) -> "Regime":
        return cls(RegimeKind.HIGH_MESSAGE, c=int(c))

    @classmethod
    def constrained(cls, c: int, mu: float) -> "Regime":
        return cls(RegimeKind.CONSTRAINED, mu=float(mu), c=int(c))

    @classmethod
    def random_routing(cls) -> "Regime":
        return cls(RegimeKind.RANDOM_ROUTING)

    @classmethod
    def power_of_d(cls, d: int) -> "Regime":
        return cls(RegimeKind.POWER_OF_D, d=int(d))

    @classmethod
    def pull(cls) -> "Regime":
        return cls(RegimeKind.PULL)

    def check(self) -> None:
        k = self.kind
        if k in (RegimeKind.HIGH_MEMORY, RegimeKind.CONSTRAINED):
            if self.mu is None or not self.mu > 0:
                raise ParameterError(f"{k.value}: idle message rate mu must be > 0, got {self.mu}")
        if k in (RegimeKind.HIGH_MESSAGE, RegimeKind.CONSTRAINED):
            if self.c is None or self.c < 1:
                raise ParameterError(f"{k.value}: memory c must be >= 1, got {self.c}")
        if k is RegimeKind.POWER_OF_D and (self.d is None or self.d < 1):
            raise ParameterError(f"power_of_d: d must be >= 1, got {self.d}")


@dataclass(frozen=True)
class Schedule:
    """Closed-form dependence of a resource on n: ``a``, ``a*log(n)`` or ``a*n**p``."""

    kind: str = "constant"
    a: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "log", "power"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, n: int) -> float:
        if self.kind == "constant":
            return float(self.a)
        if self.kind == "log":
            return self.a * math.log(n)
        return self.a * float(n) ** self.p

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse ``"9"``, ``"2*log(n)"`` or ``"1*n^0.5"`` (also ``n**p``)."""
        t = text.replace(" ", "").lower()
        try:
            if "log" in t:
                coef = t.split("log")[0].rstrip("*")
                return cls("log", float(coef) if coef else 1.0)
            if "n" in t:
                coef, _, power = t.partition("n")
                coef = coef.rstrip("*")
                power = power.lstrip("*^")
                return cls("power", float(coef) if coef else 1.0, float(power) if power else 1.0)
            return cls("constant", float(t))
        except ValueError as exc:
            raise ParameterError(f"cannot parse schedule {text!r}") from exc

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"{self.a:g}"
        if self.kind == "log":
            return f"{self.a:g}*log(n)"
        return f"{self.a:g}*n^{self.p:g}"


@dataclass(frozen=True)
class SystemParams:
    """Axes of one experiment: n servers, per-server load ``lam`` and the policy.

    ``memory_capacity`` is required for high_memory, ``idle_rate`` for
    high_message; the other regimes carry their constants in ``regime``.
    """

    n: int
    lam: float
    regime: Regime
    memory_capacity: Schedule | None = None
    idle_rate: Schedule | None = None

    @property
    def c(self) -> int:
        """Token memory c(n). ``n`` for pull, 0 for policies without tokens."""
        k = self.regime.kind
        if k is RegimeKind.HIGH_MEMORY:
            if self.memory_capacity is None:
                raise ParameterError("high_memory requires a memory_capacity schedule")
            return int(math.floor(self.memory_capacity(self.n) + 1e-9))
        if k in (RegimeKind.HIGH_MESSAGE, RegimeKind.CONSTRAINED):
            return int(self.regime.c)
        if k is RegimeKind.PULL:
            return self.n
        return 0

    @property
    def mu(self) -> float:
        """Idle message rate mu(n). ``inf`` for pull, 0 for policies without tokens."""
        k = self.regime.kind
        if k is RegimeKind.HIGH_MESSAGE:
            if self.idle_rate is None:
                raise ParameterError("high_message requires an idle_rate schedule")
            return float(self.idle_rate(self.n))
        if k in (RegimeKind.HIGH_MEMORY, RegimeKind.CONSTRAINED):
            return float(self.regime.mu)
        if k is RegimeKind.PULL:
            return math.inf
        return 0.0


def validate_params(params: SystemParams) -> SystemParams:
    """Return ``params`` unchanged if every model constraint holds, else raise ParameterError."""
    if not isinstance(params.n, (int, np.integer)) or params.n < 1:
        raise ParameterError(f"n must be a positive integer, got {params.n!r}")
    if not 0.0 < params.lam < 1.0:
        raise ParameterError(f"lambda out of range (0, 1): {params.lam}")
    params.regime.check()
    c = params.c
    if c > params.n:
        raise ParameterError(f"memory exceeds n: c(n)={c} > n={params.n}")
    if params.regime.kind.uses_tokens and c < 1:
        raise ParameterError(f"memory c(n) must be >= 1, got {c}")
    mu = params.mu
    if params.regime.kind.uses_tokens and not mu > 0:
        raise ParameterError(f"idle rate mu(n) must be > 0, got {mu}")
    return params


class OccupancyVector:
    """Truncated occupancy state ``(s_0, ..., s_K)`` with ``s_0 = 1``, nonincreasing.

    Entries past the truncation level are taken to be zero. Monotonicity and
    range violations up to ``MONOTONE_SLACK`` are clamped away; anything larger
    raises ParameterError.
    """

    __slots__ = ("_values",)

    def __init__(self, values, *, slack: float = MONOTONE_SLACK):
        v = np.array(values, dtype=float).ravel()
        if v.size == 0:
            raise ParameterError("occupancy vector must contain s_0")
        if not np.all(np.isfinite(v)):
            raise ParameterError("occupancy vector has non-finite entries")
        if abs(v[0] - 1.0) > slack:
            raise ParameterError(f"s_0 must equal 1, got {v[0]}")
        if v.min() < -slack or v.max() > 1.0 + slack:
            raise ParameterError("occupancy entries must lie in [0, 1]")
        if np.any(np.diff(v) > slack):
            i = int(np.argmax(np.diff(v) > slack))
            raise ParameterError(f"occupancy not nonincreasing at i={i}: {v[i]} < {v[i + 1]}")
        v[0] = 1.0
        v = np.minimum.accumulate(np.clip(v, 0.0, 1.0))
        v.setflags(write=False)
        self._values = v

    @classmethod
    def empty(cls, truncation: int = DEFAULT_TRUNCATION) -> "OccupancyVector":
        v = np.zeros(truncation + 1)
        v[0] = 1.0
        return cls(v)

    @classmethod
    def from_tail(cls, tail, truncation: int | None = None) -> "OccupancyVector":
        """Build from ``(s_1, s_2, ...)``, zero-padding up to ``truncation``."""
        tail = np.asarray(tail, dtype=float)
        k = max(len(tail), truncation or 0)
        v = np.zeros(k + 1)
        v[0] = 1.0
        v[1 : len(tail) + 1] = tail
        return cls(v)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def truncation_level(self) -> int:
        return self._values.size - 1

    def padded(self, truncation: int) -> np.ndarray:
        out = np.zeros(max(truncation, self.truncation_level) + 1)
        out[: self._values.size] = self._values
        return out

    def __getitem__(self, i):
        return self._values[i]

    def __len__(self) -> int:
        return self._values.size

    def __array__(self, dtype=None, copy=None):
        return self._values.astype(dtype) if dtype is not None else self._values.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyVector):
            return NotImplemented
        k = max(self.truncation_level, other.truncation_level)
        return bool(np.array_equal(self.padded(k), other.padded(k)))

    def __hash__(self):
        return hash(np.trim_zeros(self._values, "b").tobytes())

    def __repr__(self) -> str:
        head = ", ".join(f"{x:.6g}" for x in self._values[:6])
        more = ", ..." if self._values.size > 6 else ""
        return f"OccupancyVector(({head}{more}), K={self.truncation_level})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, OccupancyVector):
        return x.values
    return np.asarray(x, dtype=float)


def weighted_norm(x, y) -> float:
    """``sqrt(sum_i |x_i - y_i|^2 / 2^i)``, zero-padding the shorter argument."""
    a, b = _as_array(x), _as_array(y)
    k = max(a.size, b.size)
    diff = np.zeros(k)
    diff[: a.size] += a
    diff[: b.size] -= b
    w = np.ldexp(1.0, -np.arange(k))
    return float(np.sqrt(np.sum(diff * diff * w)))


def total_mass(s, start: int = 1) -> float:
    """Partial sum ``sum_{i >= start} s_i``; with ``start=1`` this is jobs per server."""
    return float(np.sum(_as_array(s)[start:]))
