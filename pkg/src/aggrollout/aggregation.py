"""Feature-based belief aggregation.

States are grouped into feature states, beliefs over feature states are
discretised onto a uniform simplex grid, and the resulting finite aggregate
MDP is solved offline.  Its solution, composed with the nearest-grid-point
mapping, gives a base policy and a cost approximation on the belief space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CapacityExceeded, NonConvergence
from .pomdp import PomdpModel
from ._kernels import exact_rows
from .simplex import (
    DEFAULT_CAPACITY,
    TIE_TOL,
    _binom_table,
    composition_count,
    enumerate_compositions,
    nearest_index,
    rank_compositions,
)

VI_THRESHOLD = 0.1
VI_MAX_ITER = 10**6
EXACT_OBS_LIMIT = 10**5
DEFAULT_NSIM = 10**4


# --- feature space -----------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpace:
    """Partition of the states into feature states with disaggregation weights.

    ``state_to_feature[i]`` is the feature state containing ``i``;
    ``disaggregation[y]`` is a distribution over states supported on that
    feature state's subset.
    """

    state_to_feature: np.ndarray
    disaggregation: np.ndarray

    def __post_init__(self):
        s2f = np.asarray(self.state_to_feature, dtype=np.int64)
        D = np.asarray(self.disaggregation, dtype=float)
        m_f, n = D.shape
        if s2f.shape != (n,):
            raise ValueError("state_to_feature must map every state")
        if s2f.min() < 0 or s2f.max() >= m_f:
            raise ValueError("state_to_feature refers to unknown feature states")
        if np.bincount(s2f, minlength=m_f).min() == 0:
            raise ValueError("every feature state needs a non-empty subset")
        if np.any(D < 0) or np.max(np.abs(D.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("disaggregation rows must be distributions")
        if np.any(D[s2f[None, :] != np.arange(m_f)[:, None]] != 0):
            raise ValueError("disaggregation must vanish outside each feature subset")
        s2f.setflags(write=False)
        D.setflags(write=False)
        object.__setattr__(self, "state_to_feature", s2f)
        object.__setattr__(self, "disaggregation", D)

    @property
    def m_f(self) -> int:
        return self.disaggregation.shape[0]

    @property
    def n(self) -> int:
        return self.disaggregation.shape[1]

    @cached_property
    def aggregation(self) -> np.ndarray:
        """One-hot ``(n, m_f)`` matrix ``phi[j, y]``."""
        phi = np.zeros((self.n, self.m_f))
        phi[np.arange(self.n), self.state_to_feature] = 1.0
        return phi

    @property
    def is_identity(self) -> bool:
        return self.m_f == self.n and bool(np.all(self.state_to_feature == np.arange(self.n)))

    @classmethod
    def identity(cls, n: int) -> "FeatureSpace":
        return cls(np.arange(n), np.eye(n))

    @classmethod
    def from_partition(cls, state_to_feature, weights=None) -> "FeatureSpace":
        """Build from a state->feature map; disaggregation is uniform unless weighted."""
        s2f = np.asarray(state_to_feature, dtype=np.int64)
        m_f = int(s2f.max()) + 1
        w = np.ones(len(s2f)) if weights is None else np.asarray(weights, dtype=float)
        D = np.zeros((m_f, len(s2f)))
        D[s2f, np.arange(len(s2f))] = w
        mass = D.sum(axis=1, keepdims=True)
        if np.any(mass <= 0):
            raise ValueError("every feature state needs a non-empty subset with positive weight")
        return cls(s2f, D / mass)

    def to_dict(self) -> dict:
        return {
            "state_to_feature": self.state_to_feature.tolist(),
            "disaggregation": self.disaggregation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(np.array(d["state_to_feature"]), np.array(d["disaggregation"]))


def feature_belief(b, fs: FeatureSpace) -> np.ndarray:
    """``q(y) = sum_i b(i) phi_iy``; accepts a single belief or a batch."""
    return np.asarray(b, dtype=float) @ fs.aggregation


def disaggregate(q, fs: FeatureSpace) -> np.ndarray:
    """``b(i) = sum_y q(y) d_yi``; accepts a single feature belief or a batch."""
    return np.asarray(q, dtype=float) @ fs.disaggregation


# --- representative feature beliefs -----------------------------------------


class RepresentativeBeliefSet:
    """The grid ``{beta / rho}`` over ``m_f`` feature states, lexicographically ordered."""

    def __init__(self, m_f: int, rho: int, capacity: int = DEFAULT_CAPACITY):
        if m_f < 1 or rho < 1:
            raise ValueError("need m_f >= 1 and rho >= 1")
        self.m_f = m_f
        self.rho = rho
        self.count = composition_count(m_f, rho)
        if self.count > capacity:
            raise CapacityExceeded(f"{self.count} representatives exceed the capacity {capacity}")
        self.capacity = capacity

    def __len__(self) -> int:
        return self.count

    @cached_property
    def compositions(self) -> np.ndarray:
        return enumerate_compositions(self.m_f, self.rho, self.capacity)

    @cached_property
    def points(self) -> np.ndarray:
        return self.compositions / self.rho

    def nearest(self, q) -> np.ndarray:
        """Index of the max-norm nearest point for each row of ``q`` (smallest index on ties)."""
        return nearest_index(q, self.rho)

    def index_of(self, beta) -> np.ndarray:
        return rank_compositions(beta, self.rho)


def enumerate_representatives(m_f: int, rho: int, capacity: int = DEFAULT_CAPACITY) -> RepresentativeBeliefSet:
    reps = RepresentativeBeliefSet(m_f, rho, capacity)
    reps.points  # materialise, so capacity problems surface here
    return reps


def phi_map(b, fs: FeatureSpace, reps: RepresentativeBeliefSet):
    """Index of ``Phi(b)``; returns an int for one belief and an array for a batch."""
    b = np.asarray(b, dtype=float)
    idx = reps.nearest(np.atleast_2d(feature_belief(b, fs)))
    return int(idx[0]) if b.ndim == 1 else idx


# --- aggregate MDP -----------------------------------------------------------


@dataclass
class AggregateMdp:
    reps: RepresentativeBeliefSet
    transitions: list[sp.csr_matrix]
    stage_cost: np.ndarray
    discount: float
    mode: str = "exact"
    n_sim: int | None = None
    r_star: np.ndarray | None = None
    pi_star: np.ndarray | None = None
    iterations: int = 0
    residual: float = float("nan")

    @property
    def num_states(self) -> int:
        return self.stage_cost.shape[0]

    @property
    def num_controls(self) -> int:
        return self.stage_cost.shape[1]

    @property
    def solved(self) -> bool:
        return self.r_star is not None

    def row_sum_error(self) -> float:
        return max(float(np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1.0))) for P in self.transitions)

    def bellman(self, r: np.ndarray) -> np.ndarray:
        """``Q[k, u] = G[k, u] + alpha * sum_k' P_u[k, k'] r[k']``."""
        return self.stage_cost + self.discount * np.column_stack([P @ r for P in self.transitions])


def _disaggregated_reps(fs: FeatureSpace, reps: RepresentativeBeliefSet) -> np.ndarray:
    return disaggregate(reps.points, fs)


def build_aggregate_mdp(
    model: PomdpModel,
    fs: FeatureSpace,
    reps: RepresentativeBeliefSet,
    mode: str = "auto",
    n_sim: int = DEFAULT_NSIM,
    seed=None,
    budget: int = 10**9,
    chunk_elems: int = 2_000_000,
) -> AggregateMdp:
    """Construct the aggregate MDP over the representative feature beliefs.

    ``mode='exact'`` sums ``p_hat(z | b, u)`` over all observations;
    ``mode='sampled'`` estimates the same transition rows from ``n_sim``
    observation draws per (representative, control) pair.  ``'auto'`` picks
    exact whenever the observation space has at most 1e5 elements.
    """
    if fs.n != model.n or reps.m_f != fs.m_f:
        raise ValueError("model, feature space and representative set disagree in size")
    if mode == "auto":
        mode = "exact" if model.num_observations <= EXACT_OBS_LIMIT else "sampled"
    if mode not in ("exact", "sampled"):
        raise ValueError(f"unknown construction mode {mode!r}")
    N, U = len(reps), model.num_controls
    work = N * U * (model.num_observations if mode == "exact" else n_sim)
    if work > budget:
        raise CapacityExceeded(f"construction needs {work} updates, budget is {budget}")
    rng = np.random.default_rng(seed)
    B = _disaggregated_reps(fs, reps)
    G = np.column_stack([B @ model.expected_cost(u) for u in range(U)])
    phi = fs.aggregation
    transitions = []
    for u in range(U):
        prior = B @ model.transition_matrix(u)
        if mode == "exact":
            P = _exact_rows(prior, model.observation_matrix(u), phi, reps, chunk_elems)
        else:
            P = _sampled_rows(model, u, prior, phi, reps, n_sim, rng)
        transitions.append(P)
    return AggregateMdp(reps, transitions, G, model.discount, mode, n_sim if mode == "sampled" else None)


def _exact_rows(prior, O, phi, reps, chunk_elems) -> sp.csr_matrix:
    N, n = prior.shape
    Z = O.shape[1]
    s2f = np.argmax(phi, axis=1).astype(np.int64)
    binom = _binom_table(reps.rho + reps.m_f, reps.m_f)
    slot = np.full(N, -1, dtype=np.int64)
    step = max(1, chunk_elems // Z)
    Ot = np.ascontiguousarray(O.T, dtype=float)
    rows, cols, vals = [], [], []
    for start in range(0, N, step):
        pr = np.ascontiguousarray(prior[start : start + step])
        size = len(pr) * Z
        r = np.empty(size, dtype=np.int64)
        c = np.empty(size, dtype=np.int64)
        v = np.empty(size)
        used = exact_rows(pr, Ot, s2f, reps.m_f, reps.rho, TIE_TOL, binom, slot, r, c, v)
        if used < 0:
            raise ValueError("posterior left the simplex")
        rows.append(r[:used] + start)
        cols.append(c[:used])
        vals.append(v[:used])
    return _coo_to_csr(rows, cols, vals, N)


def _sampled_rows(model, u, prior, phi, reps, n_sim, rng) -> sp.csr_matrix:
    N, n = prior.shape
    rows, cols, vals = [], [], []
    enumerable = model.num_observations <= EXACT_OBS_LIMIT
    O = model.observation_matrix(u) if enumerable else None
    for k in range(N):
        if enumerable:
            p_hat = prior[k] @ O
            zs = rng.choice(len(p_hat), size=n_sim, p=p_hat / p_hat.sum())
        else:
            js = rng.choice(n, size=n_sim, p=prior[k])
            zs = np.array([model.sample_observation(int(j), u, rng) for j in js])
        uz, counts = np.unique(zs, return_counts=True)
        L = O[:, uz].T if enumerable else np.stack([model.obs_likelihood(int(z), u) for z in uz])
        W = prior[k][None, :] * L
        post = W / W.sum(axis=1, keepdims=True)
        dest = reps.nearest(post @ phi)
        rows.append(np.full(len(uz), k))
        cols.append(dest)
        vals.append(counts / n_sim)
    return _coo_to_csr(rows, cols, vals, N)


def _coo_to_csr(rows, cols, vals, N) -> sp.csr_matrix:
    M = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    ).tocsr()
    M.sum_duplicates()
    return M


def value_iteration(
    mdp: AggregateMdp,
    threshold: float = VI_THRESHOLD,
    max_iter: int = VI_MAX_ITER,
    r0: np.ndarray | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the aggregate MDP; stops once successive iterates differ by at most ``threshold``.

    Stores the solution on ``mdp`` and returns ``(r_star, pi_star)``; the
    policy takes the smallest control index among minimisers.
    """
    r = np.zeros(mdp.num_states) if r0 is None else np.asarray(r0, dtype=float).copy()
    for it in range(1, max_iter + 1):
        Q = mdp.bellman(r)
        r_new = Q.min(axis=1)
        delta = float(np.max(np.abs(r_new - r))) if len(r) else 0.0
        r = r_new
        if callback is not None:
            callback(it, r)
        if delta <= threshold:
            break
    else:
        raise NonConvergence(f"value iteration did not reach {threshold} in {max_iter} sweeps")
    Q = mdp.bellman(r)
    mdp.r_star = r
    mdp.pi_star = np.argmin(Q, axis=1)
    mdp.iterations = it
    mdp.residual = float(np.max(np.abs(Q.min(axis=1) - r)))
    return mdp.r_star, mdp.pi_star


# --- base policy -------------------------------------------------------------


@dataclass
class BasePolicyBundle:
    """Solved aggregation: base policy ``mu = pi* o Phi`` and cost ``J~ = r* o Phi``."""

    fs: FeatureSpace
    reps: RepresentativeBeliefSet
    mdp: AggregateMdp
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mdp.solved:
            raise ValueError("the aggregate MDP must be solved first")

    @property
    def discount(self) -> float:
        return self.mdp.discount

    def index(self, b):
        return phi_map(b, self.fs, self.reps)

    def cost(self, b):
        idx = self.index(b)
        return self.mdp.r_star[idx] if np.ndim(idx) else float(self.mdp.r_star[idx])

    def control(self, b):
        idx = self.index(b)
        return self.mdp.pi_star[idx] if np.ndim(idx) else int(self.mdp.pi_star[idx])

    def __call__(self, b) -> int:
        return self.control(b)

    # serialisation: npz with a JSON header
    def save(self, path: str | Path) -> None:
        mdp = self.mdp
        header = {
            "m_f": self.reps.m_f,
            "rho": self.reps.rho,
            "controls": mdp.num_controls,
            "discount": mdp.discount,
            "mode": mdp.mode,
            "n_sim": mdp.n_sim,
            "iterations": mdp.iterations,
            "meta": self.meta,
        }
        arrays = {}
        for u, P in enumerate(mdp.transitions):
            arrays[f"P{u}_indptr"] = P.indptr
            arrays[f"P{u}_indices"] = P.indices
            arrays[f"P{u}_data"] = P.data
        np.savez_compressed(
            path,
            header=np.array(json.dumps(header)),
            representatives=self.reps.compositions,
            stage_cost=mdp.stage_cost,
            r_star=mdp.r_star,
            pi_star=mdp.pi_star,
            state_to_feature=self.fs.state_to_feature,
            disaggregation=self.fs.disaggregation,
            **arrays,
        )

    @classmethod
    def load(cls, path: str | Path) -> "BasePolicyBundle":
        with np.load(path, allow_pickle=False) as f:
            header = json.loads(str(f["header"]))
            reps = RepresentativeBeliefSet(header["m_f"], header["rho"])
            if not np.array_equal(f["representatives"], reps.compositions):
                raise ValueError("representative list does not match the canonical order")
            N = len(reps)
            transitions = [
                sp.csr_matrix(
                    (f[f"P{u}_data"], f[f"P{u}_indices"], f[f"P{u}_indptr"]), shape=(N, N)
                )
                for u in range(header["controls"])
            ]
            mdp = AggregateMdp(
                reps,
                transitions,
                f["stage_cost"],
                header["discount"],
                header["mode"],
                header["n_sim"],
                f["r_star"],
                f["pi_star"],
                header["iterations"],
            )
            fs = FeatureSpace(f["state_to_feature"], f["disaggregation"])
        return cls(fs, reps, mdp, header.get("meta", {}))


def solve_aggregation(
    model: PomdpModel,
    fs: FeatureSpace,
    rho: int,
    threshold: float = VI_THRESHOLD,
    mode: str = "auto",
    n_sim: int = DEFAULT_NSIM,
    seed=None,
    capacity: int = DEFAULT_CAPACITY,
    max_iter: int = VI_MAX_ITER,
) -> BasePolicyBundle:
    """Representatives -> aggregate MDP -> value iteration, in one call."""
    reps = enumerate_representatives(fs.m_f, rho, capacity)
    mdp = build_aggregate_mdp(model, fs, reps, mode=mode, n_sim=n_sim, seed=seed)
    value_iteration(mdp, threshold, max_iter)
    return BasePolicyBundle(fs, reps, mdp)


def base_policy_and_cost(bundle: BasePolicyBundle, b) -> tuple[int, float]:
    k = bundle.index(b)
    return int(bundle.mdp.pi_star[k]), float(bundle.mdp.r_star[k])


# --- error diagnostics --------------------------------------------------------


@dataclass
class EpsilonReport:
    epsilon: float
    bound: float
    observed_error: float
    groups: int
    worst_group: int


def epsilon_and_bound(
    bundle: BasePolicyBundle,
    oracle: Callable[[np.ndarray], np.ndarray],
    probe_grid: Sequence,
) -> EpsilonReport:
    """Empirical ``epsilon`` over the partition cells hit by the probes.

    ``epsilon`` is the largest spread of the oracle cost within one cell,
    ``bound = epsilon / (1 - alpha)``, and ``observed_error`` is the largest
    ``|J~(b) - J*(b)|`` over the probes.  ``oracle`` maps a batch of beliefs
    to costs.
    """
    probes = np.asarray(probe_grid, dtype=float)
    cells = bundle.index(probes)
    js = np.asarray(oracle(probes), dtype=float)
    order = np.argsort(cells, kind="stable")
    cs, jv = cells[order], js[order]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    spread = np.maximum.reduceat(jv, starts) - np.minimum.reduceat(jv, starts)
    worst = int(np.argmax(spread))
    eps = float(spread[worst])
    approx = bundle.mdp.r_star[cells]
    return EpsilonReport(
        epsilon=eps,
        bound=eps / (1.0 - bundle.discount),
        observed_error=float(np.max(np.abs(approx - js))),
        groups=len(starts),
        worst_group=int(cs[starts[worst]]),
    )


def partition_diameters(bundle: BasePolicyBundle, probe_grid) -> dict[int, float]:
    """Max-norm diameter of each partition cell as seen on the probes."""
    probes = np.asarray(probe_grid, dtype=float)
    cells = bundle.index(probes)
    out = {}
    for c in np.unique(cells):
        pts = probes[cells == c]
        span = pts.max(axis=0) - pts.min(axis=0)
        out[int(c)] = float(span.max())
    return out


class OracleCost:
    """Stand-in for the optimal cost: identity aggregation at a fine resolution."""

    def __init__(self, bundle: BasePolicyBundle):
        self.bundle = bundle

    def __call__(self, b):
        return self.bundle.cost(b)

    def interpolated(self, b) -> np.ndarray:
        """Linear interpolation between grid points (two-state models only)."""
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if self.bundle.fs.n != 2:
            raise ValueError("interpolation is only provided for two states")
        pts = self.bundle.reps.points[:, 1]
        order = np.argsort(pts)
        return np.interp(b[:, 1], pts[order], self.bundle.mdp.r_star[order])


def oracle_cost_function(
    model: PomdpModel,
    rho_fine: int = 200,
    threshold: float = 1e-4,
    capacity: int = DEFAULT_CAPACITY,
) -> OracleCost:
    fs = FeatureSpace.identity(model.n)
    reps = RepresentativeBeliefSet(model.n, rho_fine, capacity)
    mdp = build_aggregate_mdp(model, fs, reps, mode="auto")
    value_iteration(mdp, threshold)
    return OracleCost(BasePolicyBundle(fs, reps, mdp, {"rho": rho_fine, "oracle": True}))


def belief_grid_2(points: int) -> np.ndarray:
    """Uniform grid of two-state beliefs ``(1 - x, x)``."""
    x = np.linspace(0.0, 1.0, points)
    return np.column_stack([1.0 - x, x])
