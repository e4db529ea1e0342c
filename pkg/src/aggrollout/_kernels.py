"""Compiled inner loops: nearest grid point and base-policy simulation.

The numpy implementations in :mod:`simplex` and :mod:`rollout` are the
reference; these kernels follow them operation for operation so that both
give the same indices and the same inverse-CDF draws.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _feasible(work, m, t, rho, tol):
    lo_sum = 0.0
    hi_sum = 0.0
    for y in range(m):
        lo = max(np.ceil(work[0, y] - t - tol), 0.0)
        hi = min(np.floor(work[0, y] + t + tol), rho)
        if lo > hi:
            return False
        lo_sum += lo
        hi_sum += hi
    return lo_sum <= rho and hi_sum >= rho


@njit(cache=True)
def nearest_rank(q, rho, tol, binom, work):
    """Rank of the lexicographically smallest max-norm-nearest composition of ``rho q``.

    ``work`` is scratch space of shape ``(3, 2 m + 1)``.  It is indexed
    directly rather than sliced, which keeps the call free of allocations.
    """
    m = q.shape[0]
    work[1, 0] = 0.0
    for y in range(m):
        x = q[y] * rho
        work[0, y] = x
        f = x - np.floor(x)
        work[1, 1 + y] = f
        work[1, 1 + m + y] = 1.0 - f
    # No integer lies closer than t0 = max_y min(f_y, 1 - f_y) to some
    # coordinate, so candidates below t0 - tol are infeasible.  Usually t0
    # itself is feasible; then only candidates within tol below it matter.
    t0 = 0.0
    for y in range(m):
        t0 = max(t0, min(work[1, 1 + y], work[1, 1 + m + y]))
    if _feasible(work, m, t0, rho, tol):
        t = t0
        for i in range(2 * m + 1):
            c = work[1, i]
            if t0 - 2.0 * tol < c < t and _feasible(work, m, c, rho, tol):
                t = c
    else:
        # insertion sort of the 2m + 1 candidate radii, then bisection
        for i in range(1, 2 * m + 1):
            v = work[1, i]
            k = i - 1
            while k >= 0 and work[1, k] > v:
                work[1, k + 1] = work[1, k]
                k -= 1
            work[1, k + 1] = v
        lo_k, hi_k = 0, 2 * m
        while lo_k < hi_k:
            mid = (lo_k + hi_k) // 2
            if _feasible(work, m, work[1, mid], rho, tol):
                hi_k = mid
            else:
                lo_k = mid + 1
        t = work[1, lo_k]
        if not _feasible(work, m, t, rho, tol):
            return -1
    # suffix sums of the upper box bounds, then the greedy smallest composition
    acc = 0.0
    for y in range(m - 1, -1, -1):
        work[2, y] = acc
        acc += min(np.floor(work[0, y] + t + tol), rho)
    rank = 0
    remaining = np.int64(rho)
    for y in range(m):
        lo = np.int64(max(np.ceil(work[0, y] - t - tol), 0.0))
        beta = max(lo, remaining - np.int64(work[2, y]))
        if y < m - 1:
            p = m - y - 1
            rank += binom[remaining + p, p] - binom[remaining - beta + p, p]
        remaining -= beta
    return rank


@njit(cache=True)
def nearest_rank_batch(Q, rho, tol, binom):
    out = np.empty(Q.shape[0], dtype=np.int64)
    work = np.empty((3, 2 * Q.shape[1] + 1))
    for k in range(Q.shape[0]):
        out[k] = nearest_rank(Q[k], rho, tol, binom, work)
    return out


@njit(cache=True)
def _phi(b, s2f, rho, tol, binom, q, work):
    for y in range(q.shape[0]):
        q[y] = 0.0
    for i in range(b.shape[0]):
        q[s2f[i]] += b[i]
    return nearest_rank(q, rho, tol, binom, work)


@njit(cache=True)
def _draw(cdf, r):
    # count of cdf entries strictly below r * total, clipped to the last index
    target = r * cdf[cdf.shape[0] - 1]
    k = 0
    while k < cdf.shape[0] and cdf[k] < target:
        k += 1
    return min(k, cdf.shape[0] - 1)


@njit(cache=True)
def simulate_rows(
    B0, steps, first, P, G, s2f, m_f, rho, tol, binom, pi, r, tables, local, draws, root, sim, alpha
):
    """Discounted ``steps``-stage base-policy cost plus ``alpha^steps r[Phi(b)]`` per row.

    ``draws[root[k], sim[k], t]`` holds the uniforms for row ``k`` at stage
    ``t``: one for the next state and one per observation factor.
    ``first[k] >= 0`` forces the stage-0 control.
    """
    N, n = B0.shape
    K = tables.shape[1]
    S = tables.shape[3]
    out = np.empty(N)
    b = np.empty(n)
    pred = np.empty(n)
    cdf = np.empty(n)
    ocdf = np.empty(S)
    digits = np.empty(K, dtype=np.int64)
    q = np.empty(m_f)
    work = np.empty((3, 2 * m_f + 1))
    for k in range(N):
        for i in range(n):
            b[i] = B0[k, i]
        total = 0.0
        disc = 1.0
        for t in range(steps):
            if t == 0 and first[k] >= 0:
                u = first[k]
            else:
                u = pi[_phi(b, s2f, rho, tol, binom, q, work)]
            g = 0.0
            for i in range(n):
                g += b[i] * G[u, i]
            total += disc * g
            for j in range(n):
                pred[j] = 0.0
            for i in range(n):
                bi = b[i]
                if bi != 0.0:
                    for j in range(n):
                        pred[j] += bi * P[u, i, j]
            pred_total = 0.0
            for j in range(n):
                pred_total += pred[j]
                cdf[j] = pred_total
            e, c = root[k], sim[k]
            j_next = _draw(cdf, draws[e, c, t, 0])
            for l in range(K):
                acc = 0.0
                r_l = local[j_next, l]
                for s in range(S):
                    acc += tables[u, l, r_l, s]
                    ocdf[s] = acc
                digits[l] = _draw(ocdf, draws[e, c, t, 1 + l])
            total_w = 0.0
            for j in range(n):
                w = pred[j]
                for l in range(K):
                    w *= tables[u, l, local[j, l], digits[l]]
                b[j] = w
                total_w += w
            if total_w > 0.0:
                for j in range(n):
                    b[j] /= total_w
            else:
                for j in range(n):
                    b[j] = pred[j] / pred_total
            disc *= alpha
        out[k] = total + disc * r[_phi(b, s2f, rho, tol, binom, q, work)]
    return out


@njit(cache=True)
def exact_rows(prior, Ot, s2f, m_f, rho, tol, binom, slot, rows, cols, vals):
    """Aggregate transition rows by enumerating every observation.

    ``Ot[z, j] = p(z | j, u)``.  For row ``k`` and observation ``z`` the
    posterior's feature belief is mapped to its representative;
    probabilities landing on the same representative are summed.  ``slot``
    must hold -1 everywhere on entry and is restored on exit.  Returns the
    number of entries written to ``rows/cols/vals``.
    """
    N, n = prior.shape
    Z = Ot.shape[0]
    q = np.empty(m_f)
    work = np.empty((3, 2 * m_f + 1))
    out = 0
    for k in range(N):
        start = out
        for z in range(Z):
            for y in range(m_f):
                q[y] = 0.0
            p = 0.0
            for j in range(n):
                w = prior[k, j] * Ot[z, j]
                q[s2f[j]] += w
                p += w
            if p <= 0.0:
                continue
            for y in range(m_f):
                q[y] /= p
            dest = nearest_rank(q, rho, tol, binom, work)
            if dest < 0:
                return -1
            s = slot[dest]
            if s < 0:
                slot[dest] = out
                rows[out] = k
                cols[out] = dest
                vals[out] = p
                out += 1
            else:
                vals[s] += p
        for e in range(start, out):
            slot[cols[e]] = -1
    return out
