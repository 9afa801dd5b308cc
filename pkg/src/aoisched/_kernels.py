"""Compiled slot loop for the simulator.

Every built-in scheduler has a compiled twin here selected by ``kind``; the
Python classes in :mod:`aoisched.schedulers` remain the reference and the test
suite checks both paths produce identical metrics.  Learner state lives in the
policy's own numpy arrays, so learning done here is visible to the policy.
"""

from __future__ import annotations

import numba
import numpy as np

IDLE = 0
THRESHOLD = 1
INDEX = 2
MAX_AGE = 3
ROUND_ROBIN = 4
RANDOM_ARRIVAL = 5
TABLE = 6
INDEX_ONLINE = 7
MDP_ONLINE = 8
BUFFERED_TABLE = 9

EMPTY_BUFFER = 2**62


@numba.njit(cache=True)
def _index_value(x, p):
    xf = float(x)
    return xf * xf / 2 - xf / 2 + xf / p


@numba.njit(cache=True)
def run_chunk(
    kind,
    arrivals,
    uniforms,
    ages,
    bufs,
    buffered,
    start_slot,
    warmup,
    iparams,
    fparams,
    table,
    values,
    state,
    acc_total,
    acc_user,
    acc_updates,
    trace,
    trace_every,
):
    n_slots, n = arrivals.shape
    lam = np.zeros(n, dtype=np.int64)
    for k in range(n_slots):
        t = start_slot + k
        if buffered:
            for i in range(n):
                if arrivals[k, i]:
                    bufs[i] = 0
                elif bufs[i] < EMPTY_BUFFER:
                    bufs[i] += 1
                lam[i] = 1 if bufs[i] == 0 else 0
        else:
            for i in range(n):
                lam[i] = arrivals[k, i]

        d = 0
        if kind == THRESHOLD:
            if lam[0] == 1 and ages[0] >= iparams[0]:
                d = 1
        elif kind == INDEX:
            best = 0.0
            for i in range(n):
                if lam[i] == 1:
                    v = _index_value(ages[i], fparams[i])
                    if v > best:
                        best = v
                        d = i + 1
        elif kind == MAX_AGE:
            best_age = 0
            for i in range(n):
                v = ages[i] * lam[i]
                if v > best_age:
                    best_age = v
                    d = i + 1
        elif kind == ROUND_ROBIN:
            ptr = state[0]
            for j in range(n):
                i = (ptr + j) % n
                if lam[i] == 1:
                    d = i + 1
                    state[0] = (i + 1) % n
                    break
        elif kind == RANDOM_ARRIVAL:
            count = 0
            for i in range(n):
                count += lam[i]
            if count > 0:
                pick = int(uniforms[k] * count)
                for i in range(n):
                    if lam[i] == 1:
                        if pick == 0:
                            d = i + 1
                            break
                        pick -= 1
        elif kind == TABLE or kind == BUFFERED_TABLE:
            m = iparams[0]
            code = 0
            ctx = 0
            mult = 1
            cmult = 1
            for i in range(n):
                code += (min(ages[i], m) - 1) * mult
                mult *= m
                if kind == TABLE:
                    ctx += lam[i] * cmult
                    cmult *= 2
                else:
                    ctx += min(bufs[i], m) * cmult
                    cmult *= m + 1
            d = table[ctx * mult + code]
        elif kind == INDEX_ONLINE:
            state[0] += 1
            best = 0.0
            for i in range(n):
                state[i + 1] += lam[i]
            for i in range(n):
                if lam[i] == 1:
                    p = state[i + 1] / state[0]
                    v = _index_value(ages[i], p)
                    if v > best:
                        best = v
                        d = i + 1
        elif kind == MDP_ONLINE:
            d = _mdp_online_step(ages, lam, n, iparams[0], iparams[1], fparams[0], values, state)

        # transition on true ages
        served = -1
        if d > 0:
            if buffered:
                if bufs[d - 1] < EMPTY_BUFFER:
                    served = d - 1
            elif lam[d - 1] == 1:
                served = d - 1
        total = 0
        for i in range(n):
            if i == served:
                if buffered:
                    ages[i] = bufs[i] + 1
                else:
                    ages[i] = 1
            else:
                ages[i] += 1
            total += ages[i]
        if t >= warmup:
            acc_total[0] += total
            for i in range(n):
                acc_user[i] += ages[i]
            if served >= 0:
                acc_updates[served] += 1
        if trace_every > 0 and t % trace_every == 0:
            trace[t // trace_every] = total


@numba.njit(cache=True)
def _mdp_online_step(ages, lam, n, m, ref, gamma_a, values, state):
    # state = [slot counter, arrival code entering this slot]
    n_ages = m**n
    xcode = 0
    lcode = 0
    mult = 1
    base = 0
    for i in range(n):
        xv = min(ages[i], m)
        xcode += (xv - 1) * mult
        lcode += lam[i] << i
        base += xv + 1
        mult *= m
    cur = state[1] * n_ages + xcode
    best_q = 0.0
    best_d = 0
    for dd in range(n + 1):
        cost = base
        ncode = 0
        mult = 1
        for i in range(n):
            xv = min(ages[i], m)
            if dd == i + 1 and lam[i] == 1:
                cost -= xv
                nx = 1
            else:
                nx = min(xv + 1, m)
            ncode += (nx - 1) * mult
            mult *= m
        q = cost + values[lcode * n_ages + ncode]
        if dd == 0 or q < best_q:
            best_q = q
            best_d = dd
    v = best_q - values[ref]
    t = state[0]
    gamma = gamma_a if t == 0 else gamma_a / t
    values[cur] = (1.0 - gamma) * values[cur] + gamma * v
    state[0] = t + 1
    state[1] = lcode
    return best_d
