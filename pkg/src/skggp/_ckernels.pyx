# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels mirroring ``_pykernels`` operation for operation.

The simulation loop runs without the GIL so fitness evaluations can be
spread over threads.
"""

from libc.math cimport fabs, isfinite, INFINITY
from libc.stdlib cimport malloc, free, calloc
from libc.string cimport memcpy

import numpy as np

cdef enum:
    OP_CONST = -1
    OP_ADD = -2
    OP_SUB = -3
    OP_MUL = -4
    OP_DIV = -5
    OP_MIN = -6
    OP_MAX = -7
    OP_NEG = -8
    N_STATIC = 8
    N_ORD = 11
    N_GRP = 6

cdef double KNEE_TIE_EPS = 1e-12
cdef double DIV_EPS = 1e-9


cdef inline double run_program(const int* ops, const double* consts, int n_ops,
                               const double* row, double* stack) noexcept nogil:
    cdef int sp = 0
    cdef int pos, op
    cdef double a, b
    for pos in range(n_ops):
        op = ops[pos]
        if op >= 0:
            stack[sp] = row[op]
            sp += 1
        elif op == OP_CONST:
            stack[sp] = consts[pos]
            sp += 1
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        else:
            # reversed prefix order: the first argument is on top
            a = stack[sp - 1]
            b = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                a = a + b
            elif op == OP_SUB:
                a = a - b
            elif op == OP_MUL:
                a = a * b
            elif op == OP_DIV:
                if fabs(b) > DIV_EPS:
                    a = a / b
                else:
                    a = 1.0
            elif op == OP_MIN:
                if not (a < b):
                    a = b
            else:
                if not (a > b):
                    a = b
            stack[sp - 1] = a
    a = stack[0]
    if not isfinite(a):
        return INFINITY
    return a


cdef void run_program_cols(const int* ops, const double* consts, int n_ops,
                           const double* x, int rows, int width, double* stack,
                           double* out, bint column_major=False) noexcept nogil:
    """Same semantics as run_program, one opcode at a time over all rows.

    ``x`` is rows x width, or width x rows when ``column_major``.
    """
    cdef int sp = 0
    cdef int pos, op, r
    cdef double a, b, cval
    cdef double* top
    cdef double* nxt
    for pos in range(n_ops):
        op = ops[pos]
        if op >= 0:
            top = stack + sp * rows
            if column_major:
                memcpy(top, x + op * rows, rows * sizeof(double))
            else:
                for r in range(rows):
                    top[r] = x[r * width + op]
            sp += 1
        elif op == OP_CONST:
            top = stack + sp * rows
            cval = consts[pos]
            for r in range(rows):
                top[r] = cval
            sp += 1
        elif op == OP_NEG:
            top = stack + (sp - 1) * rows
            for r in range(rows):
                top[r] = -top[r]
        else:
            top = stack + (sp - 1) * rows
            nxt = stack + (sp - 2) * rows
            sp -= 1
            if op == OP_ADD:
                for r in range(rows):
                    nxt[r] = top[r] + nxt[r]
            elif op == OP_SUB:
                for r in range(rows):
                    nxt[r] = top[r] - nxt[r]
            elif op == OP_MUL:
                for r in range(rows):
                    nxt[r] = top[r] * nxt[r]
            elif op == OP_DIV:
                for r in range(rows):
                    b = nxt[r]
                    nxt[r] = top[r] / b if fabs(b) > DIV_EPS else 1.0
            elif op == OP_MIN:
                for r in range(rows):
                    a = top[r]
                    b = nxt[r]
                    nxt[r] = a if a < b else b
            else:
                for r in range(rows):
                    a = top[r]
                    b = nxt[r]
                    nxt[r] = a if a > b else b
    for r in range(rows):
        a = stack[r]
        out[r] = a if isfinite(a) else INFINITY


cdef extern from *:
    """
    /* cnt[j] = 1 + #{k : v[k] < v[j]}, written so the inner loop vectorises */
    static inline void skggp_segment_ranks(const double* __restrict v, int m,
                                           double* __restrict cnt) {
        for (int j = 0; j < m; ++j) cnt[j] = 1.0;
        for (int k = 0; k < m; ++k) {
            const double x = v[k];
            for (int j = 0; j < m; ++j) cnt[j] += (x < v[j]) ? 1.0 : 0.0;
        }
    }
    """
    void segment_ranks "skggp_segment_ranks"(const double* v, int m, double* cnt) noexcept nogil


cdef extern from *:
    """
    /* sum |a[i] - b[i]| over a short chunk; int32 partial sums cannot overflow here */
    static inline long long skggp_l1_chunk(const int* __restrict a, const int* __restrict b,
                                           int n) {
        int acc = 0;
        for (int i = 0; i < n; ++i) {
            int d = a[i] - b[i];
            acc += d < 0 ? -d : d;
        }
        return (long long)acc;
    }
    """
    long long l1_chunk "skggp_l1_chunk"(const int* a, const int* b, int n) noexcept nogil


cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    #include <math.h>
    /* round off the low 12 mantissa bits (half away from zero) */
    static inline double skggp_quantise(double x) {
        uint64_t b;
        if (!isfinite(x)) return x;
        memcpy(&b, &x, sizeof b);
        b = (b + 2048u) & ~(uint64_t)4095u;
        memcpy(&x, &b, sizeof b);
        return x;
    }
    """
    double quantise "skggp_quantise"(double x) noexcept nogil


cdef int c_knee_cut(const double* q, int m, double* dist) noexcept nogil:
    cdef int f = m
    cdef int i
    cdef double lo, hi, span, x, y, dmax
    cdef bint halved
    if m <= 2:
        return m
    while f > 0 and not isfinite(q[f - 1]):
        f -= 1
    if f == 0:
        return m
    if f <= 2:
        return f
    lo = q[0]
    hi = q[f - 1]
    if hi == lo:
        return f
    span = hi - lo
    halved = not isfinite(span)
    if halved:
        span = hi * 0.5 - lo * 0.5
    dmax = -1.0
    for i in range(f):
        x = <double>i / <double>(f - 1)
        if halved:
            y = (q[i] * 0.5 - lo * 0.5) / span
        else:
            y = (q[i] - lo) / span
        dist[i] = fabs(x - y)
        if dist[i] > dmax:
            dmax = dist[i]
    if dmax <= KNEE_TIE_EPS:
        return f
    for i in range(f):
        if dist[i] >= dmax - KNEE_TIE_EPS:
            return i + 1
    return f


cdef struct GroupSearch:
    int s
    int R
    int cap
    int nout
    int nchosen
    int* dem
    int* act
    int* last_same
    int* suffix
    int* rem
    char* used
    int* chosen
    int* out
    int* out_len


cdef inline bint gs_fits(GroupSearch* g, int k) noexcept nogil:
    cdef int r
    for r in range(g.R):
        if g.dem[k * g.R + r] > g.rem[r]:
            return False
    return True


cdef void gs_dfs(GroupSearch* g, int i) noexcept nogil:
    cdef int k, r
    cdef bint blockable
    if g.nout >= g.cap:
        return
    for k in range(i):
        if g.used[g.act[k]] or not gs_fits(g, k) or g.last_same[k] >= i:
            continue
        blockable = False
        for r in range(g.R):
            if g.dem[k * g.R + r] + g.suffix[i * g.R + r] > g.rem[r]:
                blockable = True
                break
        if not blockable:
            return
    if i == g.s:
        for k in range(g.nchosen):
            g.out[g.nout * g.s + k] = g.chosen[k]
        g.out_len[g.nout] = g.nchosen
        g.nout += 1
        return
    if not g.used[g.act[i]] and gs_fits(g, i):
        g.used[g.act[i]] = 1
        for r in range(g.R):
            g.rem[r] -= g.dem[i * g.R + r]
        g.chosen[g.nchosen] = i
        g.nchosen += 1
        gs_dfs(g, i + 1)
        g.nchosen -= 1
        for r in range(g.R):
            g.rem[r] += g.dem[i * g.R + r]
        g.used[g.act[i]] = 0
    gs_dfs(g, i + 1)


cdef void gs_prepare(GroupSearch* g, int* lastpos) noexcept nogil:
    """Fill last_same and suffix for the current subset (lastpos is all -1)."""
    cdef int j, r, a
    for j in range(g.s - 1, -1, -1):
        a = g.act[j]
        if lastpos[a] < 0:
            lastpos[a] = j
        g.last_same[j] = lastpos[a]
    for j in range(g.s):
        lastpos[g.act[j]] = -1
    for r in range(g.R):
        g.suffix[g.s * g.R + r] = 0
    for j in range(g.s - 1, -1, -1):
        for r in range(g.R):
            g.suffix[j * g.R + r] = g.suffix[(j + 1) * g.R + r] + g.dem[j * g.R + r]


def knee_cut(const double[::1] q):
    cdef int m = q.shape[0]
    cdef double* dist = <double*>malloc((m + 1) * sizeof(double))
    cdef int k
    k = c_knee_cut(&q[0] if m else NULL, m, dist)
    free(dist)
    return k


def enumerate_groups(const int[:, ::1] dem, const int[::1] act, const int[::1] avail, int cap, int n_act):
    cdef int s = act.shape[0]
    cdef int R = avail.shape[0]
    cdef GroupSearch g
    cdef int j
    cdef int* lastpos
    if s == 0:
        return []
    g.s = s
    g.R = R
    g.cap = cap
    g.nout = 0
    g.nchosen = 0
    g.dem = <int*>&dem[0, 0]
    g.act = <int*>&act[0]
    g.last_same = <int*>malloc(s * sizeof(int))
    g.suffix = <int*>malloc((s + 1) * R * sizeof(int))
    g.rem = <int*>malloc(R * sizeof(int))
    g.used = <char*>calloc(n_act, sizeof(char))
    g.chosen = <int*>malloc(s * sizeof(int))
    g.out = <int*>malloc(cap * s * sizeof(int))
    g.out_len = <int*>malloc(cap * sizeof(int))
    lastpos = <int*>malloc(n_act * sizeof(int))
    for j in range(n_act):
        lastpos[j] = -1
    for j in range(R):
        g.rem[j] = avail[j]
    gs_prepare(&g, lastpos)
    gs_dfs(&g, 0)
    result = [[g.out[j * s + k] for k in range(g.out_len[j])] for j in range(g.nout)]
    free(g.last_same); free(g.suffix); free(g.rem); free(g.used)
    free(g.chosen); free(g.out); free(g.out_len); free(lastpos)
    return result


cdef int c_simulate(int n, int M, int R,
                    const int* n_modes, const int* demand, const int* capacity,
                    const int* pred_count, const int* succ_ptr, const int* succ_idx,
                    const double* static, const double* dmd_num, const double* weight,
                    double denom, const int* durations,
                    const int* ord_ops, const double* ord_consts, int n_ord,
                    const int* grp_ops, const double* grp_consts, int n_grp,
                    int group_cap, int* log) noexcept nogil:
    """Returns the makespan, or -1 on allocation failure / deadlock."""
    cdef int P = n * M
    cdef int a, m, r, i, j, k, t, done, ne, nrun, nstill, nlog, best, gi, idx, key_i
    cdef double util, key
    cdef bint ok
    cdef int* remaining = <int*>malloc(n * sizeof(int))
    cdef char* status = <char*>calloc(n, sizeof(char))
    cdef int* finish = <int*>calloc(n, sizeof(int))
    cdef int* mode_of = <int*>calloc(n, sizeof(int))
    cdef int* avail = <int*>malloc(R * sizeof(int))
    cdef int* running = <int*>malloc(n * sizeof(int))
    cdef int* elig_a = <int*>malloc(P * sizeof(int))
    cdef int* elig_m = <int*>malloc(P * sizeof(int))
    cdef double* prio = <double*>malloc(P * sizeof(double))
    cdef int* order = <int*>malloc(P * sizeof(int))
    cdef double* sorted_p = <double*>malloc(P * sizeof(double))
    cdef double* dist = <double*>malloc(P * sizeof(double))
    cdef double* row = <double*>malloc(N_ORD * sizeof(double))
    cdef double* grow = <double*>malloc(N_GRP * sizeof(double))
    cdef double* stack = <double*>malloc((n_ord + n_grp + 2) * sizeof(double))
    cdef int* sub_a = <int*>malloc(P * sizeof(int))
    cdef int* sub_m = <int*>malloc(P * sizeof(int))
    cdef int* gused = <int*>malloc(R * sizeof(int))
    cdef int* lastpos = <int*>malloc(n * sizeof(int))
    cdef GroupSearch g
    cdef double size, sum_dur, max_dur, g_dmd, g_succ, slack, gp, best_p
    cdef const double* st
    cdef int makespan = -1
    cdef bint goto_cleanup

    g.R = R
    g.cap = group_cap
    g.dem = <int*>malloc(P * R * sizeof(int))
    g.act = sub_a
    g.last_same = <int*>malloc(P * sizeof(int))
    g.suffix = <int*>malloc((P + 1) * R * sizeof(int))
    g.rem = <int*>malloc(R * sizeof(int))
    g.used = <char*>calloc(n, sizeof(char))
    g.chosen = <int*>malloc(P * sizeof(int))
    g.out = <int*>malloc(group_cap * P * sizeof(int))
    g.out_len = <int*>malloc(group_cap * sizeof(int))

    if (remaining == NULL or status == NULL or finish == NULL or mode_of == NULL
            or avail == NULL or running == NULL or elig_a == NULL or elig_m == NULL
            or prio == NULL or order == NULL or sorted_p == NULL or dist == NULL
            or row == NULL or grow == NULL or stack == NULL or sub_a == NULL
            or sub_m == NULL or gused == NULL or lastpos == NULL or g.dem == NULL
            or g.last_same == NULL or g.suffix == NULL or g.rem == NULL
            or g.used == NULL or g.chosen == NULL or g.out == NULL or g.out_len == NULL):
        goto_cleanup = True
    else:
        goto_cleanup = False

    if not goto_cleanup:
        for a in range(n):
            remaining[a] = pred_count[a]
            lastpos[a] = -1
        for r in range(R):
            avail[r] = capacity[r]
        t = 0
        done = 0
        nrun = 0
        nlog = 0
        while done < n:
            while True:
                ne = 0
                for a in range(n):
                    if status[a] != 0 or remaining[a] != 0:
                        continue
                    for m in range(n_modes[a]):
                        ok = True
                        for r in range(R):
                            if demand[(a * M + m) * R + r] > avail[r]:
                                ok = False
                                break
                        if ok:
                            elig_a[ne] = a
                            elig_m[ne] = m
                            ne += 1
                if ne == 0:
                    break
                util = 0.0
                for r in range(R):
                    util += <double>(capacity[r] - avail[r]) * weight[r]
                util = util / denom
                for i in range(ne):
                    st = static + (elig_a[i] * M + elig_m[i]) * N_STATIC
                    for j in range(N_STATIC):
                        row[j] = st[j]
                    row[8] = <double>ne
                    row[9] = util
                    row[10] = <double>t
                    prio[i] = quantise(run_program(ord_ops, ord_consts, n_ord, row, stack))
                # stable insertion sort of indices by priority
                for i in range(ne):
                    key = prio[i]
                    j = i - 1
                    while j >= 0 and key < sorted_p[j]:
                        sorted_p[j + 1] = sorted_p[j]
                        order[j + 1] = order[j]
                        j -= 1
                    sorted_p[j + 1] = key
                    order[j + 1] = i
                k = c_knee_cut(sorted_p, ne, dist)
                for i in range(k):
                    sub_a[i] = elig_a[order[i]]
                    sub_m[i] = elig_m[order[i]]
                    for r in range(R):
                        g.dem[i * R + r] = demand[(sub_a[i] * M + sub_m[i]) * R + r]
                g.s = k
                g.nout = 0
                g.nchosen = 0
                for r in range(R):
                    g.rem[r] = avail[r]
                gs_prepare(&g, lastpos)
                gs_dfs(&g, 0)

                best = 0
                best_p = INFINITY
                for gi in range(g.nout):
                    size = 0.0
                    sum_dur = 0.0
                    max_dur = -INFINITY
                    g_dmd = 0.0
                    g_succ = 0.0
                    for r in range(R):
                        gused[r] = 0
                    for j in range(g.out_len[gi]):
                        idx = g.out[gi * k + j]
                        st = static + (sub_a[idx] * M + sub_m[idx]) * N_STATIC
                        size += 1.0
                        sum_dur += st[0]
                        if st[0] > max_dur:
                            max_dur = st[0]
                        g_dmd += dmd_num[sub_a[idx] * M + sub_m[idx]]
                        g_succ += st[5]
                        for r in range(R):
                            gused[r] += g.dem[idx * R + r]
                    slack = 0.0
                    for r in range(R):
                        slack += <double>(avail[r] - gused[r]) * weight[r]
                    grow[0] = size
                    grow[1] = sum_dur
                    grow[2] = max_dur
                    grow[3] = g_dmd / denom
                    grow[4] = g_succ
                    grow[5] = slack / denom
                    gp = quantise(run_program(grp_ops, grp_consts, n_grp, grow, stack))
                    if gi == 0 or gp < best_p:
                        best = gi
                        best_p = gp
                for j in range(g.out_len[best]):
                    idx = g.out[best * k + j]
                    a = sub_a[idx]
                    m = sub_m[idx]
                    status[a] = 1
                    finish[a] = t + durations[a * M + m]
                    mode_of[a] = m
                    for r in range(R):
                        avail[r] -= demand[(a * M + m) * R + r]
                    running[nrun] = a
                    nrun += 1
                    log[nlog * 3] = a
                    log[nlog * 3 + 1] = m
                    log[nlog * 3 + 2] = t
                    nlog += 1
            if nrun == 0:
                break
            t = finish[running[0]]
            for i in range(1, nrun):
                if finish[running[i]] < t:
                    t = finish[running[i]]
            nstill = 0
            for i in range(nrun):
                a = running[i]
                if finish[a] == t:
                    status[a] = 2
                    done += 1
                    m = mode_of[a]
                    for r in range(R):
                        avail[r] += demand[(a * M + m) * R + r]
                    for j in range(succ_ptr[a], succ_ptr[a + 1]):
                        remaining[succ_idx[j]] -= 1
                else:
                    running[nstill] = a
                    nstill += 1
            nrun = nstill
        if done == n:
            makespan = t

    free(remaining); free(status); free(finish); free(mode_of); free(avail)
    free(running); free(elig_a); free(elig_m); free(prio); free(order)
    free(sorted_p); free(dist); free(row); free(grow); free(stack)
    free(sub_a); free(sub_m); free(gused); free(lastpos)
    free(g.dem); free(g.last_same); free(g.suffix); free(g.rem); free(g.used)
    free(g.chosen); free(g.out); free(g.out_len)
    return makespan


def simulate(arr, durations, ord_ops, ord_consts, grp_ops, grp_consts, int group_cap):
    """Compiled counterpart of ``_pykernels.simulate`` (no tracing)."""
    cdef const int[::1] n_modes = np.ascontiguousarray(arr.n_modes, dtype=np.int32)
    cdef const int[:, :, ::1] demand = np.ascontiguousarray(arr.demand, dtype=np.int32)
    cdef const int[::1] capacity = np.ascontiguousarray(arr.capacity, dtype=np.int32)
    cdef const int[::1] pred_count = np.ascontiguousarray(arr.pred_count, dtype=np.int32)
    cdef const int[::1] succ_ptr = np.ascontiguousarray(arr.succ_ptr, dtype=np.int32)
    cdef const int[::1] succ_idx = np.ascontiguousarray(
        arr.succ_idx if arr.succ_idx.size else np.zeros(1), dtype=np.int32)
    cdef const double[:, :, ::1] static = np.ascontiguousarray(arr.static, dtype=np.float64)
    cdef const double[:, ::1] dnum = np.ascontiguousarray(arr.dmd_num, dtype=np.float64)
    cdef const double[::1] weight = np.ascontiguousarray(arr.frac_weight, dtype=np.float64)
    cdef double denom = arr.frac_denom
    cdef const int[:, ::1] dur = np.ascontiguousarray(durations, dtype=np.int32)
    cdef const int[::1] oo = np.ascontiguousarray(ord_ops, dtype=np.int32)
    cdef const double[::1] oc = np.ascontiguousarray(ord_consts, dtype=np.float64)
    cdef const int[::1] go = np.ascontiguousarray(grp_ops, dtype=np.int32)
    cdef const double[::1] gc = np.ascontiguousarray(grp_consts, dtype=np.float64)
    cdef int n = n_modes.shape[0]
    cdef int M = demand.shape[1]
    cdef int R = demand.shape[2]
    log_arr = np.zeros((n, 3), dtype=np.int32)
    cdef int[:, ::1] log = log_arr
    cdef int makespan
    if n == 0:
        return 0, log_arr
    with nogil:
        makespan = c_simulate(n, M, R, &n_modes[0], &demand[0, 0, 0], &capacity[0],
                              &pred_count[0], &succ_ptr[0], &succ_idx[0],
                              &static[0, 0, 0], &dnum[0, 0], &weight[0],
                              denom, &dur[0, 0],
                              &oo[0], &oc[0], oo.shape[0],
                              &go[0], &gc[0], go.shape[0],
                              group_cap, &log[0, 0])
    if makespan < 0:
        raise MemoryError("simulation kernel failed to allocate or deadlocked")
    return makespan, log_arr


def eval_rows(ops, consts, attrs):
    cdef const int[::1] o = np.ascontiguousarray(ops, dtype=np.int32)
    cdef const double[::1] c = np.ascontiguousarray(consts, dtype=np.float64)
    cdef const double[:, ::1] x = np.ascontiguousarray(attrs, dtype=np.float64)
    cdef int rows = x.shape[0]
    cdef int n_ops = o.shape[0]
    out_arr = np.empty(rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    if rows == 0 or n_ops == 0:
        return out_arr
    cdef double* stack = <double*>malloc((n_ops + 1) * rows * sizeof(double))
    if stack == NULL:
        raise MemoryError()
    with nogil:
        run_program_cols(&o[0], &c[0], n_ops, &x[0, 0], rows, x.shape[1], stack, &out[0])
    free(stack)
    return out_arr


def competition_ranks(const double[::1] values, seg_ptr):
    cdef const int[::1] ptr = np.ascontiguousarray(seg_ptr, dtype=np.int32)
    cdef int nseg = ptr.shape[0] - 1
    out_arr = np.empty(values.shape[0], dtype=np.int32)
    cdef int[::1] out = out_arr
    cdef int s, i, j, rank
    cdef double* q = <double*>malloc((values.shape[0] + 1) * sizeof(double))
    if q == NULL:
        raise MemoryError()
    with nogil:
        for i in range(values.shape[0]):
            q[i] = quantise(values[i])
        for s in range(nseg):
            for i in range(ptr[s], ptr[s + 1]):
                rank = 1
                for j in range(ptr[s], ptr[s + 1]):
                    rank += <int>(q[j] < q[i])
                out[i] = rank
    free(q)
    return out_arr


def rank_matrix(ops, consts, prog_ptr, attrs, seg_ptr):
    """Competition ranks of many programs over one block of situations.

    Programs are concatenated in ``ops``/``consts`` and delimited by
    ``prog_ptr``; ``attrs`` rows are the candidates, ``seg_ptr`` splits them
    into situations. Returns an ``(n_programs, rows)`` int32 matrix.
    """
    cdef const int[::1] o = np.ascontiguousarray(ops, dtype=np.int32)
    cdef const double[::1] c = np.ascontiguousarray(consts, dtype=np.float64)
    cdef const long long[::1] pp = np.ascontiguousarray(prog_ptr, dtype=np.int64)
    cdef const double[:, ::1] xt = np.ascontiguousarray(np.asarray(attrs, dtype=np.float64).T)
    cdef const int[::1] seg = np.ascontiguousarray(seg_ptr, dtype=np.int32)
    cdef int n = pp.shape[0] - 1
    cdef int rows = xt.shape[1]
    cdef int width = xt.shape[0]
    cdef int nseg = seg.shape[0] - 1
    out_arr = np.empty((n, rows), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    if n == 0 or rows == 0:
        return out_arr
    cdef int longest = 1
    cdef int i, s, j
    for i in range(n):
        if pp[i + 1] - pp[i] > longest:
            longest = <int>(pp[i + 1] - pp[i])
    cdef double* stack = <double*>malloc((longest + 1) * (rows + 1) * sizeof(double))
    cdef double* vals = <double*>malloc((rows + 1) * sizeof(double))
    cdef double* cnt = <double*>malloc((rows + 1) * sizeof(double))
    if stack == NULL or vals == NULL or cnt == NULL:
        free(stack)
        free(vals)
        free(cnt)
        raise MemoryError()
    with nogil:
        for i in range(n):
            run_program_cols(&o[pp[i]], &c[pp[i]], <int>(pp[i + 1] - pp[i]),
                             &xt[0, 0], rows, width, stack, vals, True)
            for j in range(rows):
                vals[j] = quantise(vals[j])
            for s in range(nseg):
                segment_ranks(vals + seg[s], seg[s + 1] - seg[s], cnt)
                for j in range(seg[s], seg[s + 1]):
                    out[i, j] = <int>cnt[j - seg[s]]
    free(stack)
    free(vals)
    free(cnt)
    return out_arr


def nearest(db, queries):
    cdef const int[:, ::1] d = np.ascontiguousarray(db, dtype=np.int32)
    cdef const int[:, ::1] q = np.ascontiguousarray(queries, dtype=np.int32)
    cdef int P = d.shape[0]
    cdef int Q = q.shape[0]
    cdef int L = d.shape[1]
    idx_arr = np.empty(Q, dtype=np.int64)
    dist_arr = np.empty(Q, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    cdef long long[::1] dist = dist_arr
    cdef int qi, p, l, diff
    cdef long long acc, best
    cdef int best_i
    cdef int start, stop
    with nogil:
        for qi in range(Q):
            best = -1
            best_i = 0
            for p in range(P):
                acc = 0
                # early exit once the running sum cannot beat the best, checked per chunk
                start = 0
                while start < L:
                    stop = start + 64 if start + 64 < L else L
                    acc += l1_chunk(&d[p, start], &q[qi, start], stop - start)
                    if best >= 0 and acc >= best:
                        break
                    start = stop
                if best < 0 or acc < best:
                    best = acc
                    best_i = p
            idx[qi] = best_i
            dist[qi] = best if best >= 0 else 0
    return idx_arr, dist_arr


def compile_tokens(tuple tokens, dict codes):
    """Reversed-prefix program for a token tuple (see ``trees.compile_program``)."""
    cdef Py_ssize_t n = len(tokens)
    cdef Py_ssize_t i
    ops_arr = np.empty(n, dtype=np.int32)
    consts_arr = np.zeros(n, dtype=np.float64)
    cdef int[::1] o = ops_arr
    cdef double[::1] c = consts_arr
    for i in range(n):
        t = tokens[n - 1 - i]
        if type(t) is str:
            o[i] = codes[t]
        else:
            o[i] = OP_CONST
            c[i] = t
    return ops_arr, consts_arr
