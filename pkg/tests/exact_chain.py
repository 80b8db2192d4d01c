"""Brute-force stationary law of the (q, m) chain for tiny systems.

Independent of the simulator: states are enumerated, the generator is built
directly from the per-transition rates, and ``pi Q = 0`` is solved densely.
Queue lengths are capped at ``qmax`` (arrivals to a full queue are blocked),
so keep the load low enough that the cap is invisible.
"""

import itertools

import numpy as np


def _pod_probs(q, d):
    n = len(q)
    probs = np.zeros(n)
    for sample in itertools.product(range(n), repeat=d):
        best = min(q[j] for j in sample)
        ties = sorted({j for j in sample if q[j] == best})
        for j in ties:
            probs[j] += 1.0 / len(ties)
    return probs / n**d


def stationary(n, lam, policy, *, c=0, mu=0.0, d=2, qmax=10):
    """Return ``(states, pi)``; states are ``(q_tuple, m)``.

    ``policy`` is one of ``"tokens"``, ``"random"``, ``"power_of_d"``, ``"pull"``.
    For pull ``m`` is the number of idle servers.
    """
    states = []
    for q in itertools.product(range(qmax + 1), repeat=n):
        idle = sum(1 for x in q if x == 0)
        if policy == "tokens":
            states += [(q, m) for m in range(min(c, idle) + 1)]
        elif policy == "pull":
            states.append((q, idle))
        else:
            states.append((q, 0))
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))

    def add(src, dst, rate):
        if rate > 0 and dst in index:
            Q[index[src], index[dst]] += rate

    for s in states:
        q, m = s
        idle = [i for i in range(n) if q[i] == 0]
        if policy == "tokens" and m > 0:
            route = {i: n * lam / len(idle) for i in idle}
        elif policy == "pull" and idle:
            route = {i: n * lam / len(idle) for i in idle}
        elif policy == "power_of_d":
            route = dict(enumerate(n * lam * _pod_probs(q, d)))
        else:
            route = {i: lam for i in range(n)}
        for i, rate in route.items():
            if q[i] < qmax:
                q2 = q[:i] + (q[i] + 1,) + q[i + 1 :]
                if policy == "tokens":
                    m2 = m - 1 if m > 0 else 0
                elif policy == "pull":
                    m2 = sum(1 for x in q2 if x == 0)
                else:
                    m2 = 0
                add(s, (q2, m2), rate)
        for i in range(n):
            if q[i] > 0:
                q2 = q[:i] + (q[i] - 1,) + q[i + 1 :]
                m2 = sum(1 for x in q2 if x == 0) if policy == "pull" else m
                add(s, (q2, m2), 1.0)
        if policy == "tokens" and m < c:
            add(s, (q, m + 1), mu * (len(idle) - m))
    np.fill_diagonal(Q, -Q.sum(axis=1))
    A = np.vstack([Q.T, np.ones(len(states))])
    b = np.zeros(len(states) + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    return states, pi


def summary(n, lam, policy, levels=4, **kw):
    """Exact mean waiting time (Little's law), E[S_i] and the law of m."""
    states, pi = stationary(n, lam, policy, **kw)
    jobs = sum(p * sum(q) for (q, _), p in zip(states, pi))
    occ = np.array([sum(p * sum(1 for x in q if x >= i) / n for (q, _), p in zip(states, pi))
                    for i in range(levels + 1)])
    mmax = max(m for _, m in states)
    mlaw = np.zeros(mmax + 1)
    for (_, m), p in zip(states, pi):
        mlaw[m] += p
    return {"wait": jobs / (lam * n) - 1.0, "occupancy": occ, "tokens": mlaw}
