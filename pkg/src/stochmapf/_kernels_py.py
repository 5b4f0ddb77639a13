"""Pure numpy implementation of the conflict-scan kernel.

Mirrors ``_kernels.pyx`` exactly; selected by :mod:`stochmapf.kernels` when
the compiled module is unavailable.
"""
import numpy as np


def first_violations(mi_s, mi_e, mj_s, mj_e, vi_a, vi_d, vj_a, vj_d, epairs, ecmds, vpairs, vcmds, vlock):
    """Earliest traffic-rule violation between two agents, per sample.

    ``m*_s``/``m*_e`` hold move start/end times (samples x moves), ``v*_a``/``v*_d``
    vertex-visit arrival/departure times (samples x visits). ``epairs`` lists
    (move of i, move of j) on opposite directions of an edge, ``vpairs`` lists
    (visit of i, visit of j) at the same vertex; ``ecmds``/``vcmds`` give the
    command indices charged for each candidate. Intervals are closed.
    A vertex pair flagged in ``vlock`` starts with two committed arrivals and
    is skipped in samples where those arrivals coincide, since no plan can
    avoid it.

    Returns ``(ci, cj, t)``; ``ci == -1`` marks samples without a violation.
    Ties in time are broken by the smaller ``(ci, cj)``.
    """
    n = mi_s.shape[0] if mi_s.shape[1] else vi_a.shape[0]
    best_t = np.full(n, np.inf)
    best_ci = np.full(n, -1, dtype=np.int64)
    best_cj = np.full(n, -1, dtype=np.int64)

    def consider(hit, t, ci, cj):
        better = hit & (
            (t < best_t)
            | ((t == best_t) & ((ci < best_ci) | ((ci == best_ci) & (cj < best_cj))))
        )
        best_t[better] = t[better]
        best_ci[better] = ci
        best_cj[better] = cj

    for p in range(len(epairs)):
        a, b = epairs[p]
        si, ei, sj, ej = mi_s[:, a], mi_e[:, a], mj_s[:, b], mj_e[:, b]
        consider((si <= ej) & (sj <= ei), np.maximum(si, sj), int(ecmds[p][0]), int(ecmds[p][1]))
    for p in range(len(vpairs)):
        a, b = vpairs[p]
        ai, di, aj, dj = vi_a[:, a], vi_d[:, a], vj_a[:, b], vj_d[:, b]
        hit = (ai <= dj) & (aj <= di)
        if vlock[p]:
            hit &= ai != aj
        consider(hit, np.maximum(ai, aj), int(vcmds[p][0]), int(vcmds[p][1]))
    return best_ci, best_cj, best_t
