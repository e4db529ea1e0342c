"""Uniform grids on the probability simplex.

A grid point is ``beta / rho`` where ``beta`` is a composition of ``rho``
into ``m`` non-negative parts.  Points are indexed in ascending
lexicographic order of ``beta``.  Nearest-point queries use the max norm and
break ties toward the smallest index.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

from .errors import CapacityExceeded

DEFAULT_CAPACITY = 10**7
# Distances are compared in units of 1/rho; closer than this counts as a tie.
TIE_TOL = 1e-9


def composition_count(m: int, rho: int) -> int:
    """Number of grid points, ``C(rho + m - 1, m - 1)``."""
    if m < 1 or rho < 0:
        raise ValueError("need m >= 1 and rho >= 0")
    return comb(rho + m - 1, m - 1)


@lru_cache(maxsize=64)
def _compositions(m: int, rho: int) -> np.ndarray:
    if m == 1:
        return np.array([[rho]], dtype=np.int64)
    blocks = []
    for v in range(rho + 1):
        sub = _compositions(m - 1, rho - v)
        blocks.append(np.column_stack([np.full(len(sub), v, dtype=np.int64), sub]))
    out = np.vstack(blocks)
    out.setflags(write=False)
    return out


def enumerate_compositions(m: int, rho: int, capacity: int = DEFAULT_CAPACITY) -> np.ndarray:
    count = composition_count(m, rho)
    if count > capacity:
        raise CapacityExceeded(f"{count} grid points exceed the capacity {capacity}")
    return _compositions(m, rho)


@lru_cache(maxsize=64)
def _binom_table(top: int, p_max: int) -> np.ndarray:
    t = np.zeros((top + 1, p_max + 1), dtype=np.int64)
    for s in range(top + 1):
        for p in range(p_max + 1):
            t[s, p] = comb(s, p)
    return t


def rank_compositions(beta: np.ndarray, rho: int) -> np.ndarray:
    """Lexicographic index of each row of ``beta`` among all compositions."""
    beta = np.atleast_2d(np.asarray(beta, dtype=np.int64))
    m = beta.shape[1]
    table = _binom_table(rho + m, m)
    rank = np.zeros(len(beta), dtype=np.int64)
    remaining = np.full(len(beta), rho, dtype=np.int64)
    for y in range(m - 1):
        p = m - y - 1
        # compositions with the same prefix and a smaller value at position y
        rank += table[remaining + p, p] - table[remaining - beta[:, y] + p, p]
        remaining -= beta[:, y]
    return rank


def _feasible(x: np.ndarray, t: np.ndarray, rho: int, tol: float) -> np.ndarray:
    lo = np.maximum(np.ceil(x - t - tol), 0.0)
    hi = np.minimum(np.floor(x + t + tol), rho)
    return np.all(lo <= hi, axis=1) & (lo.sum(axis=1) <= rho) & (hi.sum(axis=1) >= rho)


def nearest_compositions(q: np.ndarray, rho: int, tol: float = TIE_TOL) -> np.ndarray:
    """Lexicographically smallest max-norm-nearest grid composition for each row.

    Solves ``min_beta max_y |beta_y - rho q_y|`` exactly.  The optimum is below
    one grid step, so it is one of ``{0, f_y, 1 - f_y}`` with ``f_y`` the
    fractional part of ``rho q_y``.  The smallest feasible candidate (found by
    bisection) fixes the box ``[lo_y, hi_y]`` from which the smallest
    composition is read off greedily.
    """
    x = np.atleast_2d(np.asarray(q, dtype=float)) * rho
    B, m = x.shape
    f = x - np.floor(x)
    cands = np.sort(np.concatenate([np.zeros((B, 1)), f, 1.0 - f], axis=1), axis=1)
    # feasibility is monotone in t and the largest candidate is always feasible,
    # so binary search for the first feasible candidate
    lo_k = np.zeros(B, dtype=np.int64)
    hi_k = np.full(B, cands.shape[1] - 1, dtype=np.int64)
    rows = np.arange(B)
    while np.any(lo_k < hi_k):
        mid = (lo_k + hi_k) // 2
        ok = _feasible(x, cands[rows, mid][:, None], rho, tol)
        hi_k = np.where(ok, mid, hi_k)
        lo_k = np.where(ok, lo_k, mid + 1)
    t = cands[rows, lo_k][:, None]
    if not np.all(_feasible(x, t, rho, tol)):
        raise ValueError("input rows are not on the simplex")
    lo = np.maximum(np.ceil(x - t - tol), 0.0).astype(np.int64)
    hi = np.minimum(np.floor(x + t + tol), rho).astype(np.int64)
    suffix_hi = np.concatenate(
        [np.cumsum(hi[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((B, 1), np.int64)], axis=1
    )
    beta = np.empty((B, m), dtype=np.int64)
    used = np.zeros(B, dtype=np.int64)
    for y in range(m):
        beta[:, y] = np.maximum(lo[:, y], rho - used - suffix_hi[:, y])
        used += beta[:, y]
    return beta


def nearest_index(q: np.ndarray, rho: int, tol: float = TIE_TOL) -> np.ndarray:
    """Index of the nearest grid point for each row; compiled equivalent of
    ``rank_compositions(nearest_compositions(q, rho), rho)``."""
    from ._kernels import nearest_rank_batch

    q = np.ascontiguousarray(np.atleast_2d(np.asarray(q, dtype=float)))
    idx = nearest_rank_batch(q, rho, tol, _binom_table(rho + q.shape[1], q.shape[1]))
    if np.any(idx < 0):
        raise ValueError("input rows are not on the simplex")
    return idx


def nearest_bruteforce(q: np.ndarray, points: np.ndarray, rho: int, tol: float = TIE_TOL) -> np.ndarray:
    """Reference nearest-point search by full enumeration (same tie rule)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    out = np.empty(len(q), dtype=np.int64)
    for k, row in enumerate(q):
        d = np.max(np.abs(points - rho * row[None, :]), axis=1)
        out[k] = int(np.flatnonzero(d <= d.min() + tol)[0])
    return out
