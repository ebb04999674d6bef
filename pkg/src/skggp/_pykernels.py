"""Pure-Python kernels.

These are the reference semantics; ``_ckernels`` mirrors every function
here operation for operation so both backends return bit-identical
results. Only this module supports decision tracing.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np

from .trees import (DIV_EPS, INF, OP_ADD, OP_CONST, OP_DIV, OP_MIN, OP_MUL, OP_NEG,
                    OP_SUB)

KNEE_TIE_EPS = 1e-12
_QUANT_HALF = np.uint64(2048)
_QUANT_MASK = ~np.uint64(4095)


def quantise(values: np.ndarray) -> np.ndarray:
    """Round off the low 12 mantissa bits (half away from zero).

    Priorities are compared after this so that values differing only by
    accumulated rounding error tie, and a strictly increasing affine
    transform of a rule leaves its ranks unchanged.
    """
    v = np.array(values, dtype=np.float64, copy=True)
    fin = np.isfinite(v)
    bits = v.view(np.uint64)
    bits[fin] = (bits[fin] + _QUANT_HALF) & _QUANT_MASK
    return v


def quantise_scalar(x: float) -> float:
    if not math.isfinite(x):
        return x
    (b,) = struct.unpack("<Q", struct.pack("<d", x))
    (y,) = struct.unpack("<d", struct.pack("<Q", (b + 2048) & ~4095 & 0xFFFFFFFFFFFFFFFF))
    return y


def knee_cut(sorted_priorities: Sequence[float]) -> int:
    """Length of the prefix kept by the knee cut of an ascending sequence."""
    q = sorted_priorities
    m = len(q)
    if m <= 2:
        return m
    f = m
    while f > 0 and not math.isfinite(q[f - 1]):
        f -= 1
    if f == 0:
        return m
    if f <= 2:
        return f
    lo, hi = q[0], q[f - 1]
    if hi == lo:
        return f
    span = hi - lo
    halved = not math.isfinite(span)
    if halved:
        span = hi * 0.5 - lo * 0.5
    dist = []
    for i in range(f):
        x = i / (f - 1)
        y = (q[i] * 0.5 - lo * 0.5) / span if halved else (q[i] - lo) / span
        dist.append(abs(x - y))
    dmax = max(dist)
    if dmax <= KNEE_TIE_EPS:
        return f
    for i, d in enumerate(dist):
        if d >= dmax - KNEE_TIE_EPS:
            return i + 1
    return f  # pragma: no cover


def enumerate_groups(dem: Sequence[Sequence[int]], act: Sequence[int], avail: Sequence[int],
                     cap: int) -> list[list[int]]:
    """Maximal resource-feasible groups (one mode per activity), include-first DFS.

    Returns member index lists into ``dem``/``act`` in discovery order,
    truncated to ``cap`` groups.
    """
    s = len(act)
    R = len(avail)
    last_same = [0] * s
    seen: dict[int, int] = {}
    for j in range(s - 1, -1, -1):
        last_same[j] = seen.setdefault(act[j], j)
    suffix = [[0] * R for _ in range(s + 1)]
    for j in range(s - 1, -1, -1):
        suffix[j] = [suffix[j + 1][r] + dem[j][r] for r in range(R)]
    rem = list(avail)
    used: set[int] = set()
    chosen: list[int] = []
    out: list[list[int]] = []

    def fits(k: int) -> bool:
        d = dem[k]
        for r in range(R):
            if d[r] > rem[r]:
                return False
        return True

    def dfs(i: int) -> None:
        if len(out) >= cap:
            return
        suf = suffix[i]
        for k in range(i):
            if act[k] in used or not fits(k) or last_same[k] >= i:
                continue
            d = dem[k]
            for r in range(R):
                if d[r] + suf[r] > rem[r]:
                    break
            else:
                return  # k can never be blocked: every leaf below is non-maximal
        if i == s:
            out.append(list(chosen))
            return
        if act[i] not in used and fits(i):
            d = dem[i]
            used.add(act[i])
            for r in range(R):
                rem[r] -= d[r]
            chosen.append(i)
            dfs(i + 1)
            chosen.pop()
            for r in range(R):
                rem[r] += d[r]
            used.discard(act[i])
        dfs(i + 1)

    if s:
        dfs(0)
    return out


def utilisation(avail: Sequence[int], cap: Sequence[int], weight: Sequence[float],
                denom: float) -> float:
    s = 0.0
    for r in range(len(cap)):
        s += (cap[r] - avail[r]) * weight[r]
    return s / denom


def group_row(members: Sequence[tuple[int, int]], static, demand, dmd_num, avail: Sequence[int],
              cap: Sequence[int], weight: Sequence[float], denom: float) -> list[float]:
    R = len(cap)
    size = 0.0
    sum_dur = 0.0
    max_dur = -INF
    g_dmd = 0.0
    g_succ = 0.0
    used = [0] * R
    for a, m in members:
        st = static[a][m]
        size += 1.0
        sum_dur += st[0]
        if st[0] > max_dur:
            max_dur = st[0]
        g_dmd += dmd_num[a][m]
        g_succ += st[5]
        d = demand[a][m]
        for r in range(R):
            used[r] += d[r]
    slack = 0.0
    for r in range(R):
        slack += (avail[r] - used[r]) * weight[r]
    return [size, sum_dur, max_dur, g_dmd / denom, g_succ, slack / denom]


def _finite(x: float) -> float:
    return x if math.isfinite(x) else INF


def simulate(arr, durations: np.ndarray, ord_fn: Callable, grp_fn: Callable, group_cap: int,
             trace: Callable | None = None):
    """Event-driven execution of one project under a rule pair.

    Returns ``(makespan, log)`` where ``log`` is an ``(n, 3)`` int32 array of
    ``(activity, mode, start)`` rows in start order.
    """
    n = len(arr.n_modes)
    n_modes = arr.n_modes.tolist()
    demand = arr.demand.tolist()
    cap = arr.capacity.tolist()
    static = arr.static.tolist()
    succ_ptr = arr.succ_ptr.tolist()
    succ_idx = arr.succ_idx.tolist()
    dur = durations.tolist()
    R = len(cap)
    weight = arr.frac_weight.tolist()
    denom = arr.frac_denom
    dmd_num = arr.dmd_num.tolist()

    remaining = arr.pred_count.tolist()
    status = [0] * n  # 0 waiting, 1 running, 2 finished
    finish = [0] * n
    mode_of = [0] * n
    avail = list(cap)
    running: list[int] = []
    log: list[tuple[int, int, int]] = []
    t = 0
    done = 0
    while done < n:
        while True:
            elig = []
            for a in range(n):
                if status[a] or remaining[a]:
                    continue
                dm = demand[a]
                for m in range(n_modes[a]):
                    d = dm[m]
                    for r in range(R):
                        if d[r] > avail[r]:
                            break
                    else:
                        elig.append((a, m))
            if not elig:
                break
            dyn = [float(len(elig)), utilisation(avail, cap, weight, denom), float(t)]
            rows = [static[a][m] + dyn for a, m in elig]
            prios = [quantise_scalar(_finite(ord_fn(row))) for row in rows]
            order = sorted(range(len(elig)), key=prios.__getitem__)
            k = knee_cut([prios[i] for i in order])
            subset = [elig[i] for i in order[:k]]
            groups = enumerate_groups([demand[a][m] for a, m in subset],
                                      [a for a, _ in subset], avail, group_cap)
            grows = [group_row([subset[i] for i in g], static, demand, dmd_num, avail, cap, weight,
                               denom)
                     for g in groups]
            gprios = [quantise_scalar(_finite(grp_fn(row))) for row in grows]
            best = 0
            for gi in range(1, len(gprios)):
                if gprios[gi] < gprios[best]:
                    best = gi
            if trace is not None:
                trace({
                    "time": t,
                    "available": list(avail),
                    "finished": [a for a in range(n) if status[a] == 2],
                    "running": {a: (mode_of[a], finish[a]) for a in running},
                    "eligible": list(elig),
                    "eligible_rows": rows,
                    "priorities": prios,
                    "knee_subset": subset,
                    "groups": [[subset[i] for i in g] for g in groups],
                    "group_rows": grows,
                    "group_priorities": gprios,
                    "chosen": best,
                })
            for i in groups[best]:
                a, m = subset[i]
                status[a] = 1
                finish[a] = t + dur[a][m]
                mode_of[a] = m
                d = demand[a][m]
                for r in range(R):
                    avail[r] -= d[r]
                running.append(a)
                log.append((a, m, t))
        if not running:  # pragma: no cover - excluded by instance validation
            raise RuntimeError("deadlock: nothing running and nothing startable")
        t = min(finish[a] for a in running)
        still = []
        for a in running:
            if finish[a] == t:
                status[a] = 2
                done += 1
                d = demand[a][mode_of[a]]
                for r in range(R):
                    avail[r] += d[r]
                for j in range(succ_ptr[a], succ_ptr[a + 1]):
                    remaining[succ_idx[j]] -= 1
            else:
                still.append(a)
        running = still
    return t, np.asarray(log, dtype=np.int32).reshape(-1, 3)


def eval_rows(ops: np.ndarray, consts: np.ndarray, attrs: np.ndarray) -> np.ndarray:
    stack: list[np.ndarray] = []
    rows = attrs.shape[0]
    with np.errstate(all="ignore"):
        for op, c in zip(ops.tolist(), consts.tolist()):
            if op >= 0:
                stack.append(attrs[:, op])
            elif op == OP_CONST:
                stack.append(np.full(rows, c))
            elif op == OP_NEG:
                stack.append(-stack.pop())
            else:
                a = stack.pop()  # reversed prefix order: first argument on top
                b = stack.pop()
                if op == OP_ADD:
                    stack.append(a + b)
                elif op == OP_SUB:
                    stack.append(a - b)
                elif op == OP_MUL:
                    stack.append(a * b)
                elif op == OP_DIV:
                    ok = np.abs(b) > DIV_EPS
                    stack.append(np.where(ok, a / np.where(ok, b, 1.0), 1.0))
                elif op == OP_MIN:
                    stack.append(np.where(a < b, a, b))
                else:
                    stack.append(np.where(a > b, a, b))
    out = np.array(stack[0], dtype=np.float64, copy=True)
    out[~np.isfinite(out)] = INF
    return out


def competition_ranks(values: np.ndarray, seg_ptr: np.ndarray) -> np.ndarray:
    """1 + number of strictly smaller values within each segment."""
    out = np.empty(values.shape[0], dtype=np.int32)
    ptr = seg_ptr.tolist()
    values = quantise(values)
    for s in range(len(ptr) - 1):
        v = values[ptr[s]:ptr[s + 1]]
        out[ptr[s]:ptr[s + 1]] = (v[None, :] < v[:, None]).sum(axis=1) + 1
    return out


def nearest(db: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and Manhattan distance of the first closest row of ``db`` per query."""
    db64 = db.astype(np.int64, copy=False)
    idx = np.empty(queries.shape[0], dtype=np.int64)
    dist = np.empty(queries.shape[0], dtype=np.int64)
    for q in range(queries.shape[0]):
        d = np.abs(db64 - queries[q].astype(np.int64)).sum(axis=1)
        j = int(np.argmin(d))
        idx[q] = j
        dist[q] = d[j]
    return idx, dist
