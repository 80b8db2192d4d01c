"""Exact simulation of the n-server system under each dispatching policy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..core import OccupancyVector, ParameterError, RegimeKind, SystemParams, validate_params
from . import _kernel as K

__all__ = [
    "DEFAULT_SEED",
    "UnderSampledError",
    "SimState",
    "EventClock",
    "EventRecord",
    "WaitingTimeStats",
    "OccupancySampler",
    "RunResult",
    "Trajectory",
    "step",
    "dispatch_power_of_d",
    "dispatch_pull",
    "run_steady_state",
    "run_trajectory",
    "measure_message_rate",
    "level_fill",
]

DEFAULT_SEED = 20160614
_EVENT_NAMES = {K.EV_ARRIVAL: "arrival", K.EV_DEPARTURE: "departure", K.EV_TOKEN: "token"}


class UnderSampledError(RuntimeError):
    """The run finished with fewer waiting-time samples than requested."""


def _policy(params: SystemParams) -> tuple[int, float, int, int]:
    """Kernel policy code, idle message rate, token capacity and d."""
    k = params.regime.kind
    if k.uses_tokens:
        return K.TOKENS, params.mu, params.c, 1
    if k is RegimeKind.PULL:
        return K.PULL, 0.0, params.n, 1
    if k is RegimeKind.POWER_OF_D:
        return K.POWER_OF_D, 0.0, 0, int(params.regime.d)
    return K.RANDOM, 0.0, 0, 1


class SimState:
    """Queue lengths, token store and the index sets the event loop works on.

    ``levels`` is how many occupancy levels ``S_1..S_levels`` are tracked.
    For the pull policy every idle server always holds a token.
    """

    def __init__(self, queues, *, tokens=(), pull: bool = False, levels: int = 32, t: float = 0.0):
        q = np.array(queues, dtype=np.int64)
        if q.ndim != 1 or q.size == 0 or np.any(q < 0):
            raise ParameterError("queues must be a nonempty sequence of nonnegative integers")
        n = q.size
        tokens = set(int(j) for j in tokens)
        if pull:
            tokens = set(np.flatnonzero(q == 0).tolist())
        if any(q[j] != 0 for j in tokens):
            raise ParameterError("tokens may only be held by idle servers")
        self.q = q
        self.where = np.empty(n, dtype=np.int64)
        self.pos = np.empty(n, dtype=np.int64)
        self.members = np.zeros((3, n), dtype=np.int64)
        self.counts = np.zeros(3, dtype=np.int64)
        for j in range(n):
            s = K.BUSY if q[j] > 0 else (K.TOKENED if j in tokens else K.IDLE)
            self.where[j] = s
            self.pos[j] = self.counts[s]
            self.members[s, self.counts[s]] = j
            self.counts[s] += 1
        cap = 16
        while cap <= q.max():
            cap *= 2
        self.buf = np.full((n, cap), t)
        self.head = np.zeros(n, dtype=np.int64)
        self.cnt = np.array([(q >= lv).sum() for lv in range(levels + 1)], dtype=np.int64)
        self.t = float(t)

    @classmethod
    def empty(cls, n: int, **kw) -> "SimState":
        return cls(np.zeros(n, dtype=np.int64), **kw)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def levels(self) -> int:
        return self.cnt.size - 1

    @property
    def queues(self) -> np.ndarray:
        return self.q.copy()

    @property
    def tokens(self) -> int:
        return int(self.counts[K.TOKENED])

    @property
    def token_set(self) -> frozenset:
        return frozenset(self.members[K.TOKENED, : self.counts[K.TOKENED]].tolist())

    @property
    def idle(self) -> int:
        return int(self.counts[K.IDLE] + self.counts[K.TOKENED])

    def occupancy(self) -> OccupancyVector:
        return OccupancyVector(self.cnt / self.n)

    def check(self, capacity: int | None = None) -> None:
        """Assert the state invariants; raises AssertionError on breach."""
        q = self.q
        assert np.all(q >= 0)
        assert self.counts.sum() == self.n
        for s in range(3):
            for p in range(self.counts[s]):
                j = self.members[s, p]
                assert self.where[j] == s and self.pos[j] == p
        assert np.all((q > 0) == (self.where == K.BUSY))
        m = self.tokens
        assert m == len(self.token_set)
        assert all(q[j] == 0 for j in self.token_set)
        if capacity is not None:
            assert m <= capacity
        lv = np.arange(self.levels + 1)
        assert np.array_equal(self.cnt, (q[None, :] >= lv[:, None]).sum(axis=1))


@dataclass
class EventClock:
    """Rates and random stream driving the chain.

    The total event rate at a state is ``lam*n`` (arrivals) plus the number of
    busy servers (completions) plus ``mu * (#idle servers without a token)``
    while the store has room (accepted idle messages).
    """

    params: SystemParams
    rng: np.random.Generator

    @classmethod
    def for_params(cls, params: SystemParams, seed: int = DEFAULT_SEED) -> "EventClock":
        return cls(validate_params(params), np.random.default_rng(seed))

    def rates(self, state: SimState) -> dict[str, float]:
        code, mu, cap, _ = _policy(self.params)
        nu = int(state.counts[K.IDLE])
        tok = mu * nu if code == K.TOKENS and state.tokens < cap else 0.0
        return {
            "arrival": self.params.lam * self.params.n,
            "departure": float(state.counts[K.BUSY]),
            "token": tok,
        }

    def total_rate(self, state: SimState) -> float:
        return sum(self.rates(state).values())


@dataclass(frozen=True)
class EventRecord:
    kind: str
    server: int
    time: float


def _stat_buffers(levels, cap_tokens, nbatch=1, warmup=math.inf, horizon=math.inf, samples=None):
    bounds = np.array([warmup, horizon]) if nbatch == 1 and math.isinf(warmup) \
        else np.linspace(warmup, horizon, nbatch + 1)
    floats = np.zeros(K.N_FLOATS)
    floats[K.F_WAIT_MIN] = math.inf
    floats[K.F_WAIT_MAX] = -math.inf
    return dict(
        bounds=bounds,
        wait_batch=np.zeros((nbatch, 2)),
        area=np.zeros((nbatch, levels + 1)),
        last=np.zeros(levels + 1),
        tok_hist=np.zeros(cap_tokens + 1),
        counters=np.zeros(K.N_COUNTERS, dtype=np.int64),
        floats=floats,
        sample_times=np.zeros(0) if samples is None else samples,
    )


def _advance(state, clock, horizon, max_events, bufs, n_samples_cols, ev_log):
    code, mu, cap, d = _policy(clock.params)
    samples = np.zeros((bufs["sample_times"].size, n_samples_cols))
    t, buf, done = K.run_events(
        state.q, state.where, state.pos, state.members, state.counts, state.buf, state.head,
        state.cnt, state.t, horizon, max_events, clock.params.lam, mu, cap, code, d, clock.rng,
        bufs["bounds"], bufs["wait_batch"], bufs["area"], bufs["last"], bufs["tok_hist"],
        bufs["counters"], bufs["floats"], bufs["sample_times"], samples, ev_log,
    )
    state.buf = buf
    state.t = t
    return samples, done


def step(state: SimState, clock: EventClock) -> tuple[SimState, EventRecord, float]:
    """Apply exactly one transition of the chain, in place.

    Returns the (mutated) state, a record of what happened and the elapsed time.
    """
    _, _, cap, _ = _policy(clock.params)
    bufs = _stat_buffers(state.levels, cap)
    ev_log = np.zeros((1, 2), dtype=np.int64)
    t0 = state.t
    _advance(state, clock, math.inf, 1, bufs, 2, ev_log)
    rec = EventRecord(_EVENT_NAMES[int(ev_log[0, 0])], int(ev_log[0, 1]), state.t)
    return state, rec, state.t - t0


def dispatch_power_of_d(state: SimState, d: int, rng: np.random.Generator) -> int:
    """Index of the shortest of ``d`` uniformly sampled servers (with replacement)."""
    if d < 1:
        raise ParameterError("d must be >= 1")
    return int(K.choose_power_of_d(state.q, d, rng, np.empty(d, dtype=np.int64)))


def dispatch_pull(state: SimState, rng: np.random.Generator) -> int:
    """A uniformly random idle server, or a uniformly random server if none is idle."""
    idle = np.flatnonzero(state.q == 0)
    if idle.size:
        return int(idle[rng.integers(0, idle.size)])
    return int(rng.integers(0, state.n))


def _half_width(batch_values: np.ndarray, level: float = 0.95) -> float:
    b = np.asarray(batch_values, dtype=float)
    b = b[np.isfinite(b)]
    if b.size < 2:
        return math.inf
    return float(stats.t.ppf(0.5 + level / 2, b.size - 1) * b.std(ddof=1) / math.sqrt(b.size))


@dataclass(frozen=True)
class WaitingTimeStats:
    """Per-job waiting times (arrival to service start) collected after warm-up.

    ``half_width`` is a 95% batch-means confidence half-width.
    """

    count: int
    mean: float
    variance: float
    min: float
    max: float
    half_width: float
    batch_means: np.ndarray = field(repr=False)

    def contains(self, value: float, slack: float = 1.0) -> bool:
        return abs(self.mean - value) <= slack * self.half_width


@dataclass(frozen=True)
class OccupancySampler:
    """Time averages of ``S_i = (1/n) #{servers with >= i jobs}`` and of ``||S||_1``."""

    mean: np.ndarray
    half_width: np.ndarray
    l1_mean: float
    l1_half_width: float
    batch_means: np.ndarray = field(repr=False)

    @property
    def levels(self) -> int:
        return self.mean.size - 1

    def as_occupancy(self) -> OccupancyVector:
        return OccupancyVector(self.mean, slack=1e-9)


@dataclass
class RunResult:
    params: SystemParams
    seed: int
    horizon: float
    warmup: float
    waiting: WaitingTimeStats
    occupancy: OccupancySampler
    token_hist: np.ndarray
    counters: dict
    messages: int
    under_sampled: bool = False

    @property
    def window(self) -> float:
        return self.horizon - self.warmup

    @property
    def message_rate(self) -> float:
        return measure_message_rate(self)

    def summary_row(self) -> dict:
        return {
            "n": self.params.n,
            "lam": self.params.lam,
            "regime": self.params.regime.kind.value,
            "seed": self.seed,
            "mean_wait": self.waiting.mean,
            "wait_ci": self.waiting.half_width,
            "jobs": self.waiting.count,
            "message_rate": self.message_rate,
            "l1_mean": self.occupancy.l1_mean,
            "l1_ci": self.occupancy.l1_half_width,
            "under_sampled": int(self.under_sampled),
        }

    def to_summary_csv(self, path=None) -> str:
        row = self.summary_row()
        text = header_line(self.params, self.seed) + _csv_rows(list(row), [list(row.values())])
        if path is not None:
            _write(path, text)
        return text


def run_steady_state(params: SystemParams, horizon: float, warmup: float | None = None,
                     seed: int = DEFAULT_SEED, *, batches: int = 32, levels: int = 32,
                     min_samples: int = 10_000, strict: bool = True) -> RunResult:
    """Simulate from the empty state and collect post-warm-up statistics.

    ``warmup`` defaults to 30% of the horizon. With ``strict`` an
    UnderSampledError is raised when fewer than ``min_samples`` jobs were
    measured; otherwise the result is flagged.
    """
    validate_params(params)
    if warmup is None:
        warmup = 0.3 * horizon
    if not 0.0 <= warmup < horizon:
        raise ParameterError("need 0 <= warmup < horizon")
    clock = EventClock.for_params(params, seed)
    code, mu, cap, _ = _policy(params)
    state = SimState.empty(params.n, pull=code == K.PULL, levels=levels)
    bufs = _stat_buffers(levels, cap, batches, warmup, horizon)
    _advance(state, clock, horizon, np.iinfo(np.int64).max, bufs, 2, np.zeros((0, 2), dtype=np.int64))

    wb = bufs["wait_batch"]
    fl = bufs["floats"]
    count = int(wb[:, 1].sum())
    mean = fl[K.F_WAIT_SUM] / count if count else math.nan
    var = (fl[K.F_WAIT_SQ] / count - mean**2) * count / (count - 1) if count > 1 else math.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        bm = wb[:, 0] / wb[:, 1]
    waiting = WaitingTimeStats(count, mean, max(var, 0.0) if count > 1 else var,
                               fl[K.F_WAIT_MIN], fl[K.F_WAIT_MAX], _half_width(bm), bm)

    blen = (horizon - warmup) / batches
    occ = bufs["area"] / (params.n * blen)
    occ[:, 0] = 1.0
    l1 = 1.0 + bufs["area"][:, 0] / (params.n * blen)
    occupancy = OccupancySampler(
        occ.mean(axis=0),
        np.array([_half_width(occ[:, i]) if i else 0.0 for i in range(levels + 1)]),
        float(l1.mean()), _half_width(l1), occ,
    )
    ctr = bufs["counters"]
    counters = {
        "events": int(ctr[K.C_EVENTS]), "arrivals": int(ctr[K.C_ARRIVALS_PW]),
        "accepted_tokens": int(ctr[K.C_TOKENS_PW]), "idlings": int(ctr[K.C_IDLINGS_PW]),
        "token_routed": int(ctr[K.C_TOKEN_ROUTED]),
    }
    if code == K.TOKENS:
        # rejected messages never change the state: given the path they form a
        # Poisson process with the accumulated intensity
        messages = counters["accepted_tokens"] + int(clock.rng.poisson(fl[K.F_REJECT_INTENSITY]))
    elif code == K.PULL:
        messages = counters["idlings"]
    elif code == K.POWER_OF_D:
        messages = 2 * params.regime.d * counters["arrivals"]
    else:
        messages = 0
    tok = bufs["tok_hist"]
    tok = tok / tok.sum() if tok.sum() > 0 else tok
    res = RunResult(params, seed, horizon, warmup, waiting, occupancy, tok, counters, messages,
                    under_sampled=count < min_samples)
    if strict and res.under_sampled:
        raise UnderSampledError(
            f"only {count} waiting-time samples (< {min_samples}); increase the horizon"
        )
    return res


def measure_message_rate(result: RunResult) -> float:
    """Messages per unit time over the measurement window.

    Token policies count every idle-server message (accepted or discarded);
    pull counts one message per idling; power-of-d counts a query and a reply
    per sampled server.
    """
    return result.messages / result.window


def level_fill(initial: OccupancyVector, n: int) -> np.ndarray:
    """Queue lengths realising ``initial`` with ``n`` servers.

    Each ``s_i`` is rounded to the nearest multiple of ``1/n`` and the counts
    are made nonincreasing by cumulative minima; server ``j`` then holds one
    job for every level ``i`` with ``j < round(n s_i)``.
    """
    occ = initial if isinstance(initial, OccupancyVector) else OccupancyVector(initial)
    k = np.minimum.accumulate(np.rint(occ.values * n).astype(np.int64))
    if k[0] != n:
        raise ParameterError("initial occupancy is not realisable")
    j = np.arange(n)
    return (j[:, None] < k[None, 1:]).sum(axis=1).astype(np.int64)


@dataclass
class Trajectory:
    """Sampled path of the empirical occupancy ``S^n(t)`` and token count."""

    params: SystemParams
    seed: int
    times: np.ndarray
    occupancy: np.ndarray
    tokens: np.ndarray

    def state(self, j: int) -> OccupancyVector:
        return OccupancyVector(self.occupancy[j])

    def to_csv(self, path=None) -> str:
        k = self.occupancy.shape[1] - 1
        rows = [[repr(float(t))] + [repr(float(x)) for x in s[1:]] + [int(m)]
                for t, s, m in zip(self.times, self.occupancy, self.tokens)]
        text = header_line(self.params, self.seed) + _csv_rows(
            ["t"] + [f"S_{i}" for i in range(1, k + 1)] + ["M"], rows)
        if path is not None:
            _write(path, text)
        return text


def run_trajectory(params: SystemParams, initial, horizon: float, seed: int = DEFAULT_SEED, *,
                   sample_dt: float = 0.05, levels: int = 32) -> Trajectory:
    """Simulate from a level-filled realisation of ``initial`` and sample ``S^n`` on a grid."""
    validate_params(params)
    initial = initial if isinstance(initial, OccupancyVector) else OccupancyVector(initial)
    q0 = level_fill(initial, params.n)
    if q0.max(initial=0) > levels:
        levels = int(q0.max())
    clock = EventClock.for_params(params, seed)
    code, _, cap, _ = _policy(params)
    state = SimState(q0, pull=code == K.PULL, levels=levels)
    m = int(math.floor(horizon / sample_dt + 1e-9))
    times = np.arange(m + 1) * sample_dt
    bufs = _stat_buffers(levels, cap, samples=times)
    samples, _ = _advance(state, clock, horizon, np.iinfo(np.int64).max, bufs, levels + 2,
                          np.zeros((0, 2), dtype=np.int64))
    occ = samples[:, : levels + 1].copy()
    occ[:, 0] = 1.0
    return Trajectory(params, seed, times, occ, samples[:, -1].astype(np.int64))


def describe(params: SystemParams) -> str:
    r = params.regime
    parts = [f"n={params.n}", f"lambda={params.lam!r}", f"regime={r.kind.value}"]
    if r.kind.uses_tokens:
        parts += [f"c={params.c}", f"mu={params.mu!r}"]
    if r.kind is RegimeKind.POWER_OF_D:
        parts.append(f"d={r.d}")
    return " ".join(parts)


def header_line(params: SystemParams, seed: int) -> str:
    from .. import __version__

    return f"# rcpb {__version__} seed={seed} {describe(params)}\n"


def _csv_rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)
