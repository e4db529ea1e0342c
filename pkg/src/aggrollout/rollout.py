"""Rollout with lookahead on top of an aggregation base policy.

A decision at belief ``b`` expands the control/observation tree to depth
``lookahead``, estimates the cost-to-go of the base policy at every leaf by
``num_sims`` simulated trajectories of length ``horizon`` (exact belief
updates, terminal cost ``J~``), and backs the estimates up by per-node
minimisation over controls.

Planning is vectorised over many root beliefs at once, which is how closed
loop evaluation runs episodes in lockstep.  Random draws for root ``r`` come
from ``default_rng([seed, *key_r])``; all controls and observation branches
below one root share the same simulation draws (common random numbers).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregation import BasePolicyBundle
from .errors import BudgetExceeded
from ._kernels import simulate_rows
from .pomdp import PomdpModel, validate_belief
from .simplex import TIE_TOL as TIE_TOL_GRID
from .simplex import _binom_table

OBS_MODES = ("auto", "exact", "sampled")
LEAF_SAMPLING = ("nested", "paired")
TIE_TOL = 1e-12


@dataclass(frozen=True)
class RolloutConfig:
    """Lookahead depth, rollout horizon ``m`` and simulation count ``L``.

    ``obs_mode`` picks how the expectation over observations is formed:
    ``exact`` enumerates (pruning branches below ``prune``), ``sampled`` draws
    ``obs_samples`` observations per node, ``auto`` enumerates when
    ``|Z| <= exact_obs_limit``.  With ``leaf_sampling="paired"`` the last
    level is estimated by ``num_sims`` simulations that each draw their own
    first observation instead of ``obs_samples x num_sims`` simulations.
    """

    lookahead: int = 1
    horizon: int = 10
    num_sims: int = 20
    seed: int = 0
    prune: float = 1e-6
    obs_mode: str = "auto"
    obs_samples: int = 64
    exact_obs_limit: int = 512
    leaf_sampling: str = "nested"
    node_budget: int = 10**7
    warn_budget: int = 10**5

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.num_sims < 1 or self.obs_samples < 1:
            raise ValueError("num_sims and obs_samples must be >= 1")
        if self.obs_mode not in OBS_MODES:
            raise ValueError(f"obs_mode must be one of {OBS_MODES}")
        if self.leaf_sampling not in LEAF_SAMPLING:
            raise ValueError(f"leaf_sampling must be one of {LEAF_SAMPLING}")
        if not 0.0 <= self.prune < 1.0:
            raise ValueError("prune must lie in [0, 1)")

    def resolved_obs_mode(self, model: PomdpModel) -> str:
        if self.obs_mode != "auto":
            return self.obs_mode
        return "exact" if model.num_observations <= self.exact_obs_limit else "sampled"

    def tree_size(self, model: PomdpModel) -> int:
        """``(|U| |Z|)^(l-1) |U|`` with ``|Z|`` the branching actually used."""
        branch = model.num_observations if self.resolved_obs_mode(model) == "exact" else self.obs_samples
        U = model.num_controls
        return (U * branch) ** (self.lookahead - 1) * U

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecisionReport:
    control: int
    q_values: list[float]
    nodes_per_depth: list[int]
    leaves: int
    obs_mode: str
    leaf_sampling: str
    wall_time: float | None = None
    warning: str | None = None

    @property
    def node_count(self) -> int:
        return sum(self.nodes_per_depth)

    def to_json(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


# --- batched simulation of the base policy -------------------------------------


def simulate_base(
    model: PomdpModel,
    bundle: BasePolicyBundle,
    beliefs: np.ndarray,
    steps: int,
    draws: np.ndarray,
    root: np.ndarray,
    sim: np.ndarray,
    first_control: np.ndarray | None = None,
) -> np.ndarray:
    """Discounted cost of ``steps`` base-policy stages plus ``alpha^steps J~``.

    Row ``k`` uses the uniforms ``draws[root[k], sim[k], t]`` at stage ``t``
    (one for the next state, then one per observation factor).  If
    ``first_control`` is given it replaces the base-policy control at stage 0.
    """
    B = np.ascontiguousarray(beliefs, dtype=float)
    N = len(B)
    first = np.full(N, -1, dtype=np.int64) if first_control is None else np.asarray(first_control, dtype=np.int64)
    tables, local = _obs_factors(model)
    P = _transition_stack(model)
    fs, reps, mdp = bundle.fs, bundle.reps, bundle.mdp
    return simulate_rows(
        B,
        int(steps),
        first,
        P,
        np.ascontiguousarray(model.cost_table, dtype=float),
        np.ascontiguousarray(fs.state_to_feature, dtype=np.int64),
        fs.m_f,
        reps.rho,
        TIE_TOL_GRID,
        _binom_table(reps.rho + fs.m_f, fs.m_f),
        np.ascontiguousarray(mdp.pi_star, dtype=np.int64),
        np.ascontiguousarray(mdp.r_star, dtype=float),
        tables,
        local,
        np.ascontiguousarray(draws, dtype=float),
        np.asarray(root, dtype=np.int64),
        np.asarray(sim, dtype=np.int64),
        float(model.discount),
    )


def _obs_factors(model: PomdpModel):
    cached = getattr(model, "_obs_factor_cache", None)
    if cached is None:
        tables, local = model.obs_factors()
        cached = (np.ascontiguousarray(tables, dtype=float), np.ascontiguousarray(local, dtype=np.int64))
        model._obs_factor_cache = cached
    return cached


def _transition_stack(model: PomdpModel) -> np.ndarray:
    cached = getattr(model, "_transition_stack_cache", None)
    if cached is None:
        cached = np.ascontiguousarray(
            np.stack([model.transition_matrix(u) for u in range(model.num_controls)]), dtype=float
        )
        model._transition_stack_cache = cached
    return cached


def simulate_base_reference(
    model: PomdpModel,
    bundle: BasePolicyBundle,
    beliefs: np.ndarray,
    steps: int,
    draws: np.ndarray,
    root: np.ndarray,
    sim: np.ndarray,
    first_control: np.ndarray | None = None,
) -> np.ndarray:
    """Plain numpy version of :func:`simulate_base`, kept for cross-checking."""
    B = np.array(beliefs, dtype=float)
    N, n = B.shape
    alpha = model.discount
    G = model.cost_table
    pi, r = bundle.mdp.pi_star, bundle.mdp.r_star
    total = np.zeros(N)
    disc = 1.0
    for t in range(steps):
        if t == 0 and first_control is not None:
            u = np.asarray(first_control, dtype=np.int64)
        else:
            u = pi[bundle.index(B)]
        total += disc * np.einsum("ij,ij->i", B, G[u])
        pred = _predict_rows(model, B, u)
        d = draws[root, sim, t]
        j = _sample_rows(pred, d[:, 0])
        z = model.observations_from_uniforms(j, u, d[:, 1:])
        B = _normalise(pred * model.likelihood_rows(z, u), pred)
        disc *= alpha
    return total + disc * r[bundle.index(B)]


def _predict_rows(model: PomdpModel, B: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.empty_like(B)
    for c in np.unique(u):
        sel = u == c
        out[sel] = B[sel] @ model.transition_matrix(int(c))
    return out


def _sample_rows(P: np.ndarray, r: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(P, axis=1)
    j = (cdf < r[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(j, P.shape[1] - 1)


def _normalise(post: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    s = post.sum(axis=1, keepdims=True)
    bad = s[:, 0] <= 0
    if bad.any():  # cannot happen for draws from the model itself
        post[bad] = fallback[bad]
        s[bad] = fallback[bad].sum(axis=1, keepdims=True)
    return post / s


# --- planner --------------------------------------------------------------------


class RolloutPlanner:
    """Rollout policy ``mu~`` built from a base bundle and a (possibly changed) model.

    The bundle is never modified; swapping the model while keeping the bundle
    is how a system change is represented.
    """

    def __init__(self, model: PomdpModel, bundle: BasePolicyBundle, config: RolloutConfig | None = None):
        self.model = model
        self.bundle = bundle
        self.config = config or RolloutConfig()
        if bundle.fs.n != model.n:
            raise ValueError("bundle and model disagree on the number of states")
        self._warned = False

    def with_model(self, model: PomdpModel) -> "RolloutPlanner":
        return RolloutPlanner(model, self.bundle, self.config)

    # random streams
    def _root_rngs(self, keys) -> list[np.random.Generator]:
        return [np.random.default_rng([self.config.seed, *_as_key(k)]) for k in keys]

    def cost_to_go(self, beliefs, keys=None) -> np.ndarray:
        """Batched :func:`rollout_cost_to_go`."""
        B = np.atleast_2d(np.asarray(beliefs, dtype=float))
        keys = [0] * len(B) if keys is None else list(keys)
        cfg = self.config
        if cfg.horizon == 0:
            return np.asarray(self.bundle.cost(B), dtype=float)
        d = 1 + self.model.obs_uniforms
        draws = np.stack([g.random((cfg.num_sims, cfg.horizon, d)) for g in self._root_rngs(keys)])
        rows = np.repeat(B, cfg.num_sims, axis=0)
        root = np.repeat(np.arange(len(B)), cfg.num_sims)
        sim = np.tile(np.arange(cfg.num_sims), len(B))
        costs = simulate_base(self.model, self.bundle, rows, cfg.horizon, draws, root, sim)
        return costs.reshape(len(B), cfg.num_sims).mean(axis=1)

    def plan(self, beliefs, keys=None, timing: bool = True) -> list[DecisionReport]:
        """Rollout decisions for a batch of root beliefs."""
        t0 = time.perf_counter()
        B0 = np.atleast_2d(np.asarray(beliefs, dtype=float))
        E = len(B0)
        keys = [0] * E if keys is None else list(keys)
        cfg, model = self.config, self.model
        mode = cfg.resolved_obs_mode(model)
        paired = mode == "sampled" and cfg.leaf_sampling == "paired"
        U, alpha = model.num_controls, model.discount
        warning = None
        if cfg.tree_size(model) > cfg.warn_budget:
            warning = f"lookahead tree has about {cfg.tree_size(model)} nodes"
            if not self._warned:
                warnings.warn(warning, RuntimeWarning, stacklevel=2)
                self._warned = True

        rngs = self._root_rngs(keys)
        d = 1 + model.obs_uniforms
        sim_steps = cfg.horizon + (1 if paired else 0)
        sim_draws = np.stack([g.random((cfg.num_sims, max(sim_steps, 1), d)) for g in rngs])

        # level-by-level expansion; nodes carry their root index
        levels = [(B0, np.arange(E))]
        links = []  # per depth: (parent node, control, weight) of each child
        nodes_per_depth = []
        budget_used = 0
        last = cfg.lookahead - 1 if paired else cfg.lookahead
        for depth in range(last):
            B, root = levels[-1]
            nodes_per_depth.append(len(B) * U)
            branch = model.num_observations if mode == "exact" else cfg.obs_samples
            budget_used += len(B) * U
            if budget_used + len(B) * U * branch > cfg.node_budget:
                raise BudgetExceeded(
                    f"expanding depth {depth + 1} needs {budget_used + len(B) * U * branch} nodes "
                    f"(budget {cfg.node_budget})"
                )
            if mode == "exact":
                child, parent, ctrl, w = _children_exact(model, B, cfg.prune)
            else:
                counts = np.bincount(root, minlength=E)
                draws = np.empty((len(B), cfg.obs_samples, d))
                draws[np.argsort(root, kind="stable")] = np.concatenate(
                    [g.random((c, cfg.obs_samples, d)) for g, c in zip(rngs, counts)]
                )
                child, parent, ctrl, w = _children_sampled(model, B, draws)
            links.append((parent, ctrl, w))
            levels.append((child, root[parent]))

        B, root = levels[-1]
        L = cfg.num_sims
        sim = np.arange(L)
        if paired:
            nodes_per_depth.append(len(B) * U)
            rows = np.repeat(B, U * L, axis=0)
            row_root = np.repeat(root, U * L)
            first = np.tile(np.repeat(np.arange(U), L), len(B))
            row_sim = np.tile(sim, len(B) * U)
            costs = simulate_base(model, self.bundle, rows, sim_steps, sim_draws, row_root, row_sim, first)
            Q = costs.reshape(len(B), U, L).mean(axis=2)
            leaves = len(rows) // L
        else:
            leaves = len(B)
            if cfg.horizon == 0:
                V = np.asarray(self.bundle.cost(B), dtype=float)
            else:
                rows = np.repeat(B, L, axis=0)
                row_root = np.repeat(root, L)
                row_sim = np.tile(sim, len(B))
                costs = simulate_base(model, self.bundle, rows, cfg.horizon, sim_draws, row_root, row_sim)
                V = costs.reshape(len(B), L).mean(axis=1)
            Q = None

        # back up
        for depth in range(len(links) - 1, -1, -1):
            parent, ctrl, w = links[depth]
            Bp = levels[depth][0]
            if Q is not None:
                V = Q.min(axis=1)
            Qp = np.zeros((len(Bp), U))
            np.add.at(Qp, (parent, ctrl), w * V)
            Q = Bp @ model.cost_table.T + alpha * Qp
        elapsed = time.perf_counter() - t0 if timing else None
        out = []
        for e in range(E):
            q = Q[e]
            u = int(np.flatnonzero(q <= q.min() + TIE_TOL)[0])
            out.append(
                DecisionReport(
                    control=u,
                    q_values=q.tolist(),
                    nodes_per_depth=nodes_per_depth,
                    leaves=leaves,
                    obs_mode=mode,
                    leaf_sampling=cfg.leaf_sampling if mode == "sampled" else "exact",
                    wall_time=elapsed,
                    warning=warning,
                )
            )
        return out

    def controls(self, beliefs, keys=None) -> np.ndarray:
        return np.array([r.control for r in self.plan(beliefs, keys, timing=False)], dtype=np.int64)

    def __call__(self, b) -> int:
        return rollout_control(self, b)


def _as_key(k) -> tuple:
    return tuple(k) if isinstance(k, (tuple, list)) else (int(k),)


def _children_exact(model: PomdpModel, B: np.ndarray, prune: float):
    """All observation children of every (node, control), pruned and renormalised."""
    parents, ctrls, weights, kids = [], [], [], []
    for u in range(model.num_controls):
        pred = B @ model.transition_matrix(u)  # (N, n)
        joint = pred[:, :, None] * model.observation_matrix(u)[None, :, :]  # (N, n, Z)
        p = joint.sum(axis=1)  # (N, Z)
        keep = p >= prune
        keep &= p > 0
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=1, keepdims=True)
        node, z = np.nonzero(keep)
        post = joint[node, :, z]
        kids.append(post / post.sum(axis=1, keepdims=True))
        parents.append(node)
        ctrls.append(np.full(len(node), u))
        weights.append(p[node, z])
    return np.vstack(kids), np.concatenate(parents), np.concatenate(ctrls), np.concatenate(weights)


def _children_sampled(model: PomdpModel, B: np.ndarray, draws: np.ndarray):
    """``S`` sampled observation children per (node, control), equal weights.

    ``draws`` has shape ``(N, S, 1 + obs_uniforms)`` and is shared by all
    controls.
    """
    N, S, _ = draws.shape
    parents, ctrls, kids = [], [], []
    node = np.repeat(np.arange(N), S)
    flat = draws.reshape(N * S, -1)
    for u in range(model.num_controls):
        pred = (B @ model.transition_matrix(u))[node]
        uu = np.full(N * S, u)
        j = _sample_rows(pred, flat[:, 0])
        z = model.observations_from_uniforms(j, uu, flat[:, 1:])
        kids.append(_normalise(pred * model.likelihood_rows(z, uu), pred))
        parents.append(node)
        ctrls.append(uu)
    w = np.full(N * S * model.num_controls, 1.0 / S)
    return np.vstack(kids), np.concatenate(parents), np.concatenate(ctrls), w


def rollout_cost_to_go(planner: RolloutPlanner, b, key=0) -> float:
    """Average over ``L`` simulations of the ``m``-step base-policy cost plus ``alpha^m J~``."""
    b = validate_belief(b, planner.model.n)
    return float(planner.cost_to_go(b[None, :], [key])[0])


def rollout_control(planner: RolloutPlanner, b, key=0) -> int:
    b = validate_belief(b, planner.model.n)
    return planner.plan(b[None, :], [key], timing=False)[0].control


def rollout_decision(planner: RolloutPlanner, b, key=0, timing: bool = True) -> DecisionReport:
    b = validate_belief(b, planner.model.n)
    return planner.plan(b[None, :], [key], timing=timing)[0]


# --- closed-loop Monte Carlo evaluation ----------------------------------------


@dataclass
class EpisodeResult:
    costs: np.ndarray  # discounted cost per episode
    horizon: int
    truncation_bound: float
    degenerate_steps: int = 0

    @property
    def mean(self) -> float:
        return float(self.costs.mean())

    @property
    def stderr(self) -> float:
        if len(self.costs) < 2:
            return 0.0
        return float(self.costs.std(ddof=1) / np.sqrt(len(self.costs)))


def run_episodes(
    model,
    decide,
    b0,
    horizon: int,
    episodes: int,
    seed: int = 0,
    *,
    controls_for_step=None,
) -> EpisodeResult:
    """Simulate ``episodes`` closed-loop runs in lockstep with exact belief tracking.

    ``decide(beliefs, keys)`` maps an ``(E, n)`` belief array and a list of
    ``(episode, step)`` keys to controls.  ``model`` may be a callable
    ``step -> PomdpModel`` to represent a scenario switch.  ``b0`` is one
    belief shared by all episodes or an ``(episodes, n)`` array.  Episode
    ``e`` draws its true trajectory from ``default_rng([seed, e])``.
    """
    model_at = model if callable(model) and not isinstance(model, PomdpModel) else (lambda k: model)
    m0 = model_at(0)
    b0 = np.asarray(b0, dtype=float)
    if b0.ndim == 1:
        B = np.tile(validate_belief(b0, m0.n), (episodes, 1))
    else:
        if b0.shape[0] != episodes:
            raise ValueError("need one initial belief per episode")
        B = np.array([validate_belief(b, m0.n) for b in b0]).reshape(episodes, m0.n)
    rngs = [np.random.default_rng([seed, e]) for e in range(episodes)]
    state = np.array([g.choice(m0.n, p=b) for g, b in zip(rngs, B)], dtype=np.int64)
    total = np.zeros(episodes)
    disc = 1.0
    g_max = 0.0
    for k in range(horizon):
        mk = model_at(k)
        g_max = max(g_max, mk.g_max)
        keys = [(e, k) for e in range(episodes)]
        u = np.asarray(decide(B, keys), dtype=np.int64)
        total += disc * mk.cost_table[u, state]
        draws = np.stack([g.random(2 + mk.obs_uniforms) for g in rngs])
        # true transition, observation, belief update
        rows = np.stack([mk.transition_matrix(int(c))[s] for c, s in zip(u, state)])
        state = _sample_rows(rows, draws[:, 0])
        z = mk.observations_from_uniforms(state, u, draws[:, 2:])
        pred = _predict_rows(mk, B, u)
        B = _normalise(pred * mk.likelihood_rows(z, u), pred)
        disc *= mk.discount
    alpha = m0.discount
    bound = alpha**horizon * g_max / (1 - alpha) if horizon else m0.g_max / (1 - alpha)
    return EpisodeResult(total, horizon, float(bound))


def base_decider(bundle: BasePolicyBundle):
    return lambda B, keys: bundle.mdp.pi_star[bundle.index(B)]


def rollout_decider(planner_at):
    """``planner_at(step) -> RolloutPlanner``, or a planner used at every step."""
    get = planner_at if callable(planner_at) and not isinstance(planner_at, RolloutPlanner) else (lambda k: planner_at)

    def decide(B, keys):
        k = keys[0][1]
        return get(k).controls(B, keys)

    return decide


# --- policy improvement checks ----------------------------------------------


@dataclass
class ImprovementReport:
    probes: np.ndarray
    base: np.ndarray
    base_se: np.ndarray
    rollout: np.ndarray
    rollout_se: np.ndarray
    improvement_fraction: float
    margin_sigma: float
    oracle: np.ndarray | None = None
    base_estimate: np.ndarray | None = None
    suboptimality: float | None = None
    bound: float | None = None
    bound_holds: bool | None = None
    truncation_bound: float = 0.0
    extra: dict = field(default_factory=dict)


def verify_policy_improvement(
    model: PomdpModel,
    bundle: BasePolicyBundle,
    config: RolloutConfig,
    probes,
    episodes: int,
    horizon: int,
    seed: int = 0,
    oracle=None,
    margin_sigma: float = 2.0,
) -> ImprovementReport:
    """Monte Carlo comparison of ``J_mu~`` and ``J_mu`` at each probe belief.

    If ``oracle`` (batch of beliefs -> ``J*``) is given, the suboptimality
    ``max |J_mu~ - J*|`` is checked against ``2 alpha^l / (1 - alpha)``
    times ``max |J~_mu - J*|``, where ``J~_mu`` is the rollout estimate of
    the base cost; the left side is allowed the Monte Carlo and truncation
    margin.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    planner = RolloutPlanner(model, bundle, config)
    P = len(probes)
    # all probes run in one lockstep batch; episode e belongs to probe e // episodes
    starts = np.repeat(probes, episodes, axis=0)
    rb = run_episodes(model, base_decider(bundle), starts, horizon, P * episodes, seed=seed)
    rr = run_episodes(model, rollout_decider(planner), starts, horizon, P * episodes, seed=seed)
    cb = rb.costs.reshape(P, episodes)
    cr = rr.costs.reshape(P, episodes)
    ddof = 1 if episodes > 1 else 0
    base, roll = cb.mean(axis=1), cr.mean(axis=1)
    base_se = cb.std(axis=1, ddof=ddof) / np.sqrt(episodes)
    roll_se = cr.std(axis=1, ddof=ddof) / np.sqrt(episodes)
    trunc = rb.truncation_bound
    margin = margin_sigma * np.sqrt(base_se**2 + roll_se**2)
    frac = float(np.mean(roll <= base + margin))
    rep = ImprovementReport(probes, base, base_se, roll, roll_se, frac, margin_sigma, truncation_bound=trunc)
    if oracle is not None:
        alpha = model.discount
        j_star = np.asarray(oracle(probes), dtype=float)
        est = planner.cost_to_go(probes, keys=[(10**9, p) for p in range(P)])
        rep.oracle = j_star
        rep.base_estimate = est
        rep.suboptimality = float(np.max(np.abs(roll - j_star)))
        rep.bound = float(2 * alpha**config.lookahead / (1 - alpha) * np.max(np.abs(est - j_star)))
        slack = float(np.max(margin_sigma * roll_se)) + trunc
        rep.bound_holds = rep.suboptimality <= rep.bound + slack
    return rep
