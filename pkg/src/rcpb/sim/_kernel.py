"""Compiled event loop for the n-server CTMC.

Servers live in three index sets (busy / idle without token / idle holding a
token) so every uniform choice the dynamics needs is O(1). Jobs are kept in
per-server FIFO ring buffers of arrival times so waiting times are exact.
"""

import numpy as np
from numba import njit

# policy codes
TOKENS = 0
RANDOM = 1
POWER_OF_D = 2
PULL = 3

# set ids
BUSY = 0
IDLE = 1
TOKENED = 2

# event codes
EV_ARRIVAL = 0
EV_DEPARTURE = 1
EV_TOKEN = 2

# counter slots
C_EVENTS = 0
C_ARRIVALS = 1
C_DEPARTURES = 2
C_TOKENS = 3
C_IDLINGS = 4
C_ARRIVALS_PW = 5
C_TOKENS_PW = 6
C_IDLINGS_PW = 7
C_TOKEN_ROUTED = 8
N_COUNTERS = 9

# float accumulator slots
F_REJECT_INTENSITY = 0
F_IDLE_AREA = 1
F_WAIT_SUM = 2
F_WAIT_SQ = 3
F_WAIT_MIN = 4
F_WAIT_MAX = 5
N_FLOATS = 6


@njit(cache=True, nogil=True)
def _move(members, counts, where, pos, j, dest):
    src = where[j]
    last = members[src, counts[src] - 1]
    p = pos[j]
    members[src, p] = last
    pos[last] = p
    counts[src] -= 1
    members[dest, counts[dest]] = j
    pos[j] = counts[dest]
    counts[dest] += 1
    where[j] = dest


@njit(cache=True, nogil=True)
def choose_power_of_d(q, d, rng, ties):
    """Shortest of ``d`` servers sampled with replacement; ties uniform over distinct minimisers."""
    n = q.shape[0]
    best = np.iinfo(np.int64).max
    nt = 0
    for _ in range(d):
        j = rng.integers(0, n)
        if q[j] < best:
            best = q[j]
            ties[0] = j
            nt = 1
        elif q[j] == best:
            dup = False
            for k in range(nt):
                if ties[k] == j:
                    dup = True
                    break
            if not dup:
                ties[nt] = j
                nt += 1
    if nt == 1:
        return ties[0]
    return ties[rng.integers(0, nt)]


@njit(cache=True, nogil=True)
def _grow(buf, head, q):
    n, cap = buf.shape
    new = np.empty((n, cap * 2))
    for j in range(n):
        for k in range(q[j]):
            new[j, k] = buf[j, (head[j] + k) % cap]
        head[j] = 0
    return new


@njit(cache=True, nogil=True)
def _level_touch(area, last, cnt, level, t, b):
    if b >= 0:
        area[b, level] += cnt[level] * (t - last[level])
    last[level] = t


@njit(cache=True, nogil=True)
def _record_wait(arrived, started, warmup, blen, wait_batch, floats):
    # batches are indexed by arrival time
    w = started - arrived
    wb = min(int((arrived - warmup) / blen), wait_batch.shape[0] - 1)
    wait_batch[wb, 0] += w
    wait_batch[wb, 1] += 1.0
    floats[F_WAIT_SUM] += w
    floats[F_WAIT_SQ] += w * w
    if w < floats[F_WAIT_MIN]:
        floats[F_WAIT_MIN] = w
    if w > floats[F_WAIT_MAX]:
        floats[F_WAIT_MAX] = w


@njit(cache=True, nogil=True)
def run_events(q, where, pos, members, counts, buf, head, cnt, t0, horizon, max_events,
               lam, mu, cap_tokens, policy, d, rng,
               bounds, wait_batch, area, last, tok_hist, counters, floats,
               sample_times, samples, ev_log):
    """Advance the chain from time ``t0`` until ``horizon`` or ``max_events`` events.

    ``bounds`` holds ``nbatch + 1`` batch boundaries starting at the warm-up
    time; statistics before ``bounds[0]`` are discarded. ``cnt[l]`` is the
    number of servers with at least ``l`` jobs (column ``l`` of ``area``),
    while column 0 of ``area`` integrates the total number of jobs.
    Returns ``(t, buf, n_events)``; ``buf`` may have been reallocated.
    """
    n = q.shape[0]
    K = cnt.shape[0] - 1
    nbatch = bounds.shape[0] - 1
    warmup = bounds[0]
    blen = (bounds[nbatch] - warmup) / nbatch
    ties = np.empty(max(d, 1), dtype=np.int64)
    nlog = ev_log.shape[0]
    nsamp = sample_times.shape[0]
    t = t0
    b = -1
    while b < nbatch - 1 and t >= bounds[b + 1]:
        b += 1
    if b >= 0:
        for lv in range(K + 1):
            if last[lv] < bounds[b]:
                last[lv] = bounds[b]
    si = 0
    while si < nsamp and sample_times[si] < t:
        si += 1
    jobs = 0
    for j in range(n):
        jobs += q[j]
    arrival_rate = lam * n
    done = 0
    while done < max_events:
        nb = counts[BUSY]
        nu = counts[IDLE]
        m = counts[TOKENED]
        tok_rate = 0.0
        if policy == TOKENS and m < cap_tokens:
            tok_rate = mu * nu
        total = arrival_rate + nb + tok_rate
        t_new = t + rng.standard_exponential() / total
        stop = t_new > horizon
        t_end = horizon if stop else t_new

        # state is constant on [t, t_end): record samples and time averages
        while si < nsamp and (sample_times[si] < t_end or (stop and sample_times[si] <= t_end)):
            samples[si, 0] = sample_times[si]
            for lv in range(1, samples.shape[1] - 1):
                samples[si, lv] = cnt[lv] / n
            samples[si, samples.shape[1] - 1] = m
            si += 1
        seg0 = t if t > warmup else warmup
        if t_end > seg0:
            dt = t_end - seg0
            tok_hist[min(m, tok_hist.shape[0] - 1)] += dt
            floats[F_IDLE_AREA] += (nu + m) * dt
            if policy == TOKENS:
                rej = m
                if m >= cap_tokens:
                    rej += nu
                floats[F_REJECT_INTENSITY] += mu * rej * dt
        while b < nbatch - 1 and t_end >= bounds[b + 1]:
            tb = bounds[b + 1]
            for lv in range(K + 1):
                val = jobs if lv == 0 else cnt[lv]
                if b >= 0:
                    area[b, lv] += val * (tb - last[lv])
                last[lv] = tb
            b += 1
        if stop:
            if b >= 0:
                for lv in range(K + 1):
                    val = jobs if lv == 0 else cnt[lv]
                    area[b, lv] += val * (horizon - last[lv])
                    last[lv] = horizon
            t = horizon
            break
        t = t_new
        post = t >= warmup

        u = rng.random() * total
        if u < arrival_rate:
            # arrival
            if policy == TOKENS or policy == PULL:
                if m > 0:
                    j = members[TOKENED, rng.integers(0, m)]
                    counters[C_TOKEN_ROUTED] += 1
                else:
                    j = rng.integers(0, n)
            elif policy == POWER_OF_D:
                j = choose_power_of_d(q, d, rng, ties)
            else:
                j = rng.integers(0, n)
            qj = q[j]
            cap = buf.shape[1]
            if qj == cap:
                buf = _grow(buf, head, q)
                cap = buf.shape[1]
            buf[j, (head[j] + qj) % cap] = t
            if qj == 0:
                _move(members, counts, where, pos, j, BUSY)
                if post:
                    _record_wait(t, t, warmup, blen, wait_batch, floats)
            if qj + 1 <= K:
                _level_touch(area, last, cnt, qj + 1, t, b)
                cnt[qj + 1] += 1
            if b >= 0:
                area[b, 0] += jobs * (t - last[0])
            last[0] = t
            jobs += 1
            q[j] = qj + 1
            counters[C_ARRIVALS] += 1
            if post:
                counters[C_ARRIVALS_PW] += 1
            ev = EV_ARRIVAL
        elif u < arrival_rate + nb:
            # service completion at a uniformly chosen busy server
            idx = int(u - arrival_rate)
            if idx >= nb:
                idx = nb - 1
            j = members[BUSY, idx]
            qj = q[j]
            cap = buf.shape[1]
            head[j] = (head[j] + 1) % cap
            if qj <= K:
                _level_touch(area, last, cnt, qj, t, b)
                cnt[qj] -= 1
            if b >= 0:
                area[b, 0] += jobs * (t - last[0])
            last[0] = t
            jobs -= 1
            q[j] = qj - 1
            if qj > 1:
                a = buf[j, head[j]]
                if a >= warmup:
                    _record_wait(a, t, warmup, blen, wait_batch, floats)
            else:
                counters[C_IDLINGS] += 1
                if post:
                    counters[C_IDLINGS_PW] += 1
                if policy == PULL:
                    _move(members, counts, where, pos, j, TOKENED)
                else:
                    _move(members, counts, where, pos, j, IDLE)
            counters[C_DEPARTURES] += 1
            ev = EV_DEPARTURE
        else:
            # accepted idle message: a uniformly chosen idle server without a token joins the store
            idx = int((u - arrival_rate - nb) / mu)
            if idx >= nu:
                idx = nu - 1
            j = members[IDLE, idx]
            _move(members, counts, where, pos, j, TOKENED)
            counters[C_TOKENS] += 1
            if post:
                counters[C_TOKENS_PW] += 1
            ev = EV_TOKEN
        if counters[C_EVENTS] < nlog:
            ev_log[counters[C_EVENTS], 0] = ev
            ev_log[counters[C_EVENTS], 1] = j
        counters[C_EVENTS] += 1
        done += 1
    return t, buf, done
