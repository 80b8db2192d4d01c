import math

import numpy as np
import pytest

from exact_chain import summary
from rcpb.core import OccupancyVector, ParameterError, Regime, Schedule, SystemParams, weighted_norm
from rcpb.fluid import FluidParams, integrate
from rcpb.sim import (
    EventClock,
    SimState,
    UnderSampledError,
    dispatch_power_of_d,
    dispatch_pull,
    level_fill,
    run_steady_state,
    run_trajectory,
    step,
)

SMALL = SystemParams(4, 0.5, Regime.constrained(1, 1.0))


# ---------------------------------------------------------------- single steps

def _event_sequence(seed, steps=200):
    state = SimState.empty(4)
    clock = EventClock.for_params(SMALL, seed)
    out = []
    for _ in range(steps):
        _, rec, dt = step(state, clock)
        out.append((rec.kind, rec.server, rec.time, dt))
    return out, state.queues


def test_step_is_deterministic_given_seed():
    a, qa = _event_sequence(42)
    b, qb = _event_sequence(42)
    assert a == b
    np.testing.assert_array_equal(qa, qb)
    c, _ = _event_sequence(43)
    assert a != c


def test_step_preserves_invariants_and_rates():
    state = SimState.empty(4)
    clock = EventClock.for_params(SMALL, 7)
    kinds = set()
    for _ in range(3000):
        rates = clock.rates(state)
        idle_free = state.idle - state.tokens
        assert rates["arrival"] == pytest.approx(2.0)
        assert rates["departure"] == state.n - state.idle
        expected_tok = idle_free * 1.0 if state.tokens < 1 else 0.0
        assert rates["token"] == pytest.approx(expected_tok)
        assert clock.total_rate(state) == pytest.approx(sum(rates.values()))
        _, rec, dt = step(state, clock)
        kinds.add(rec.kind)
        assert dt > 0
        state.check(capacity=1)
    assert kinds == {"arrival", "departure", "token"}


def test_arrival_goes_to_tokened_server():
    params = SystemParams(5, 0.5, Regime.constrained(1, 1e-12))
    for seed in range(20):
        state = SimState.empty(5, tokens=[3])
        clock = EventClock.for_params(params, seed)
        # with all servers idle and a negligible message rate the first event is an arrival
        _, rec, _ = step(state, clock)
        assert rec.kind == "arrival" and rec.server == 3
        assert state.tokens == 0
        assert state.queues[3] == 1


def test_no_messages_without_idle_servers():
    state = SimState([1, 2, 3])
    clock = EventClock.for_params(SystemParams(3, 0.5, Regime.constrained(2, 5.0)), 1)
    assert clock.rates(state)["token"] == 0.0


def test_token_rate_counts_only_untokened_idle_servers():
    state = SimState([0, 0, 0, 2], tokens=[1])
    clock = EventClock.for_params(SystemParams(4, 0.5, Regime.constrained(2, 3.0)), 1)
    assert clock.rates(state)["token"] == pytest.approx(3.0 * 2)


def test_tokens_only_on_idle_servers():
    with pytest.raises(ParameterError):
        SimState([1, 0], tokens=[0])


# ---------------------------------------------------------------- dispatch rules

def test_power_of_d_degenerate_and_exhaustive():
    rng = np.random.default_rng(0)
    state = SimState([2, 0, 1])
    counts = np.zeros(3)
    for _ in range(30000):
        counts[dispatch_power_of_d(state, 1, rng)] += 1
    assert np.all(np.abs(counts / 30000 - 1 / 3) < 0.02)
    # d=3: the empty queue wins unless it is never sampled; P(chosen) = 1 - (2/3)^3
    counts[:] = 0
    for _ in range(30000):
        counts[dispatch_power_of_d(state, 3, rng)] += 1
    p = counts / 30000
    assert p[1] == pytest.approx(1 - (2 / 3) ** 3, abs=0.015)
    # queue 0 is chosen only if every sample is queue 0
    assert p[0] == pytest.approx((1 / 3) ** 3, abs=0.01)


def test_power_of_d_ties_uniform_over_distinct_minimisers():
    rng = np.random.default_rng(1)
    state = SimState([0, 0, 5, 5])
    counts = np.zeros(4)
    for _ in range(40000):
        counts[dispatch_power_of_d(state, 2, rng)] += 1
    assert counts[2] + counts[3] == pytest.approx(40000 / 4, rel=0.05)
    assert counts[0] == pytest.approx(counts[1], rel=0.05)


def test_dispatch_pull():
    rng = np.random.default_rng(2)
    assert all(dispatch_pull(SimState([1, 0, 3]), rng) == 1 for _ in range(100))
    busy = SimState([1, 2, 3, 4])
    counts = np.bincount([dispatch_pull(busy, rng) for _ in range(20000)], minlength=4)
    assert np.all(np.abs(counts / 20000 - 0.25) < 0.02)
    q = np.ones(10, dtype=int)
    q[[2, 7]] = 0
    two_idle = SimState(q)
    draws = np.array([dispatch_pull(two_idle, rng) for _ in range(100000)])
    assert set(np.unique(draws)) == {2, 7}
    freq = np.mean(draws == 2)
    half = 1.96 * math.sqrt(0.25 / draws.size)
    assert abs(freq - 0.5) <= 2 * half


# ---------------------------------------------------------------- steady state

@pytest.mark.parametrize("policy,regime,kw", [
    ("tokens", Regime.constrained(1, 1.0), dict(c=1, mu=1.0)),
    ("tokens", Regime.constrained(2, 0.7), dict(c=2, mu=0.7)),
    ("power_of_d", Regime.power_of_d(2), dict(d=2)),
    ("pull", Regime.pull(), {}),
    ("random", Regime.random_routing(), {}),
])
def test_matches_exact_chain(policy, regime, kw):
    exact = summary(3, 0.5, policy, qmax=9, **kw)
    res = run_steady_state(SystemParams(3, 0.5, regime), 4e4, seed=11, levels=8)
    tol = 3 * res.waiting.half_width
    assert abs(res.waiting.mean - exact["wait"]) <= tol
    occ = res.occupancy
    for i in range(1, 5):
        assert abs(occ.mean[i] - exact["occupancy"][i]) <= max(3 * occ.half_width[i], 0.01)
    if policy == "tokens":
        m = exact["tokens"]
        np.testing.assert_allclose(res.token_hist[: m.size], m, atol=0.02)


def test_mm1_oracle():
    res = run_steady_state(SystemParams(1, 0.5, Regime.random_routing()), 2e5, seed=3)
    assert res.waiting.contains(1.0)
    # five correlated 95% intervals; allow two half-widths per level
    for k in range(1, 6):
        assert abs(res.occupancy.mean[k] - 0.5**k) <= 2 * res.occupancy.half_width[k]


def test_light_traffic_has_no_waiting():
    for regime in (Regime.constrained(2, 1.0), Regime.random_routing(), Regime.pull()):
        res = run_steady_state(SystemParams(100, 0.01, regime), 2e4, seed=5)
        assert res.waiting.mean <= 0.02 + res.waiting.half_width


def test_waiting_stats_invariants():
    res = run_steady_state(SystemParams(50, 0.8, Regime.constrained(2, 4.0)), 1000, seed=2)
    w = res.waiting
    assert w.min >= 0.0 and w.min <= w.mean <= w.max
    assert w.half_width > 0
    occ = res.occupancy.mean
    assert np.all((occ >= 0) & (occ <= 1))
    assert np.all(np.diff(occ) <= 1e-12)
    assert res.token_hist.sum() == pytest.approx(1.0)
    assert res.token_hist.size == 3


def test_under_sampled_error():
    params = SystemParams(10, 0.5, Regime.random_routing())
    with pytest.raises(UnderSampledError, match="increase the horizon"):
        run_steady_state(params, 100.0, seed=1)
    res = run_steady_state(params, 100.0, seed=1, strict=False)
    assert res.under_sampled


def test_steady_state_is_deterministic():
    params = SystemParams(50, 0.9, Regime.constrained(2, 9.0))
    a = run_steady_state(params, 500, seed=9)
    b = run_steady_state(params, 500, seed=9)
    assert a.to_summary_csv() == b.to_summary_csv()
    np.testing.assert_array_equal(a.occupancy.batch_means, b.occupancy.batch_means)


def test_warmup_must_precede_horizon():
    with pytest.raises(ParameterError):
        run_steady_state(SMALL, 10.0, warmup=10.0)


# ---------------------------------------------------------------- messages

def test_message_rates():
    lam, alpha, n = 0.9, 0.9, 500
    con = run_steady_state(SystemParams(n, lam, Regime.constrained(2, alpha / (1 - lam))), 300, seed=1)
    assert con.message_rate == pytest.approx(alpha * n, rel=0.1)
    pod = run_steady_state(SystemParams(n, lam, Regime.power_of_d(2)), 300, seed=1)
    assert pod.message_rate == pytest.approx(1800, rel=0.02)
    rr = run_steady_state(SystemParams(n, lam, Regime.random_routing()), 300, seed=1)
    assert rr.message_rate == 0.0


# ---------------------------------------------------------------- Lyapunov bounds

@pytest.mark.parametrize("lam", [0.5, 0.9])
@pytest.mark.parametrize("regime,extra", [
    (Regime.constrained(2, 3.0), {}),
    (Regime.high_memory(1.0), dict(memory_capacity=Schedule.parse("2*log(n)"))),
    (Regime.high_message(1), dict(idle_rate=Schedule.parse("1*n^0.5"))),
    (Regime.random_routing(), {}),
    (Regime.power_of_d(2), {}),
    (Regime.pull(), {}),
])
def test_lyapunov_tail_and_mass_bounds(lam, regime, extra):
    res = run_steady_state(SystemParams(200, lam, regime, **extra), 600, seed=4)
    occ = res.occupancy
    for k in range(1, 11):
        assert occ.mean[k] <= (1 / (2 - lam)) ** (k / 2) + 3 * occ.half_width[k]
    assert occ.l1_mean <= 2 + 2 / (1 - lam) + 3 * occ.l1_half_width


# ---------------------------------------------------------------- trajectories

def test_level_fill_example():
    q = level_fill(OccupancyVector([1, 0.7, 0.7, 0.7]), 10)
    assert sorted(q.tolist()) == [0] * 3 + [3] * 7
    assert (q == 3).sum() == 7 and (q == 0).sum() == 3


def test_level_fill_rounds_and_remonotonises():
    q = level_fill(OccupancyVector([1, 0.34, 0.33]), 3)
    # 0.34 -> 1/3 and 0.33 -> 1/3
    assert sorted(q.tolist()) == [0, 0, 2]
    s = np.array([(q >= i).mean() for i in range(3)])
    assert weighted_norm(s, [1, 0.34, 0.33]) < 1 / 3


def test_short_trajectory_stays_near_empty():
    params = SystemParams(1000, 0.9, Regime.constrained(2, 9.0))
    tr = run_trajectory(params, OccupancyVector.empty(4), 0.01, seed=1, sample_dt=0.001)
    assert np.all(tr.occupancy[:, 1] <= 0.9 * 0.01 + 0.02)
    assert tr.occupancy[0, 1] == 0.0


def test_trajectory_csv_header_and_columns(tmp_path):
    params = SystemParams(20, 0.5, Regime.constrained(1, 1.0))
    tr = run_trajectory(params, OccupancyVector.from_tail([0.5]), 1.0, seed=77, sample_dt=0.5, levels=4)
    path = tmp_path / "t.csv"
    tr.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# rcpb 0.1.0 seed=77 n=20 lambda=0.5 regime=constrained c=1 mu=1.0")
    assert lines[1] == "t,S_1,S_2,S_3,S_4,M"
    assert len(lines) == 2 + 3
    assert float(lines[2].split(",")[1]) == 0.5
    assert run_trajectory(params, OccupancyVector.from_tail([0.5]), 1.0, seed=77, sample_dt=0.5,
                          levels=4).to_csv() == path.read_text()


def test_high_message_trajectory_tracks_fluid():
    n, lam = 10_000, 0.9
    params = SystemParams(n, lam, Regime.high_message(1), idle_rate=Schedule.parse("1*n^1"))
    init = OccupancyVector.from_tail([0.7, 0.7, 0.7])
    horizon, dt = 30.0, 0.05
    tr = run_trajectory(params, init, horizon, seed=5, sample_dt=dt, levels=16)
    sol = integrate(init, FluidParams.from_system(params), horizon, sample_dt=dt)
    gaps = [weighted_norm(tr.occupancy[j], sol.states[j, :17]) for j in range(tr.times.size)]
    assert max(gaps) <= 0.05
