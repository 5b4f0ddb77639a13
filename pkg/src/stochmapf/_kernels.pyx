# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conflict-scan kernel; same contract as ``_kernels_py``."""
import numpy as np


def first_violations(double[:, ::1] mi_s, double[:, ::1] mi_e,
                     double[:, ::1] mj_s, double[:, ::1] mj_e,
                     double[:, ::1] vi_a, double[:, ::1] vi_d,
                     double[:, ::1] vj_a, double[:, ::1] vj_d,
                     long long[:, ::1] epairs, long long[:, ::1] ecmds,
                     long long[:, ::1] vpairs, long long[:, ::1] vcmds,
                     long long[::1] vlock):
    cdef Py_ssize_t n = mi_s.shape[0] if mi_s.shape[1] else vi_a.shape[0]
    cdef Py_ssize_t P = epairs.shape[0]
    cdef Py_ssize_t Q = vpairs.shape[0]
    ci_arr = np.full(n, -1, dtype=np.int64)
    cj_arr = np.full(n, -1, dtype=np.int64)
    t_arr = np.full(n, np.inf)
    cdef long long[::1] out_ci = ci_arr
    cdef long long[::1] out_cj = cj_arr
    cdef double[::1] out_t = t_arr
    cdef Py_ssize_t s, p, a, b
    cdef double bt, t, x0, x1, y0, y1
    cdef long long bci, bcj, ci, cj
    for s in range(n):
        bt = np.inf
        bci = -1
        bcj = -1
        for p in range(P):
            a = epairs[p, 0]
            b = epairs[p, 1]
            x0 = mi_s[s, a]
            x1 = mi_e[s, a]
            y0 = mj_s[s, b]
            y1 = mj_e[s, b]
            if x0 <= y1 and y0 <= x1:
                t = x0 if x0 > y0 else y0
                ci = ecmds[p, 0]
                cj = ecmds[p, 1]
                if t < bt or (t == bt and (ci < bci or (ci == bci and cj < bcj))):
                    bt = t
                    bci = ci
                    bcj = cj
        for p in range(Q):
            a = vpairs[p, 0]
            b = vpairs[p, 1]
            x0 = vi_a[s, a]
            x1 = vi_d[s, a]
            y0 = vj_a[s, b]
            y1 = vj_d[s, b]
            if x0 <= y1 and y0 <= x1 and not (vlock[p] and x0 == y0):
                t = x0 if x0 > y0 else y0
                ci = vcmds[p, 0]
                cj = vcmds[p, 1]
                if t < bt or (t == bt and (ci < bci or (ci == bci and cj < bcj))):
                    bt = t
                    bci = ci
                    bcj = cj
        if bci >= 0:
            out_ci[s] = bci
            out_cj[s] = bcj
            out_t[s] = bt
    return ci_arr, cj_arr, t_arr
