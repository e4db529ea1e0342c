"""Finite POMDP models and exact belief arithmetic.

States, controls and observations are 0-based integer indices.  A model is an
evaluator: subclasses expose per-control transition matrices, observation
likelihood vectors and expected stage costs, and may compute them lazily.
Beliefs are plain 1-D float arrays on the probability simplex.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ZeroLikelihood

PROB_TOL = 1e-9
MC_PROB_TOL = 1e-6

Policy = Callable[[np.ndarray], int]


def validate_belief(b, n: int | None = None, tol: float = PROB_TOL) -> np.ndarray:
    """Return ``b`` as a float array after checking it lies on the simplex."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise ValueError(f"belief must be 1-D, got shape {b.shape}")
    if n is not None and b.shape[0] != n:
        raise ValueError(f"belief has dimension {b.shape[0]}, model has n={n}")
    if np.any(b < -tol):
        raise ValueError("belief has negative entries")
    if abs(b.sum() - 1.0) > tol:
        raise ValueError(f"belief sums to {b.sum()!r}, not 1")
    return b


def point_belief(n: int, i: int) -> np.ndarray:
    b = np.zeros(n)
    b[i] = 1.0
    return b


def uniform_belief(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


class PomdpModel(ABC):
    """Finite-state controlled Markov chain with an observation channel.

    Subclasses must provide :meth:`transition_matrix`, :meth:`obs_likelihood`
    and :meth:`expected_cost`.  The observation for a transition ``i -> j``
    under ``u`` is drawn from ``p(z | j, u)``.
    """

    n: int
    num_controls: int
    num_observations: int
    discount: float

    @abstractmethod
    def transition_matrix(self, u: int) -> np.ndarray:
        """Row-stochastic ``(n, n)`` matrix ``P[i, j] = p_ij(u)``."""

    @abstractmethod
    def obs_likelihood(self, z: int, u: int) -> np.ndarray:
        """Vector over next states ``j`` of ``p(z | j, u)``."""

    @abstractmethod
    def expected_cost(self, u: int) -> np.ndarray:
        """Vector over ``i`` of ``sum_j p_ij(u) g(i, u, j)``."""

    @abstractmethod
    def cost(self, i: int, u: int, j: int) -> float:
        """Stage cost ``g(i, u, j)``."""

    def observation_matrix(self, u: int) -> np.ndarray:
        """``(n, |Z|)`` matrix ``O[j, z] = p(z | j, u)``."""
        return np.stack(
            [self.obs_likelihood(z, u) for z in range(self.num_observations)], axis=1
        )

    def transition(self, i: int, u: int, j: int) -> float:
        return float(self.transition_matrix(u)[i, j])

    def observation_prob(self, z: int, j: int, u: int) -> float:
        return float(self.obs_likelihood(z, u)[j])

    def sample_observation(self, j: int, u: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.num_observations, p=self.observation_matrix(u)[j]))

    def sample(self, i: int, u: int, rng: np.random.Generator) -> tuple[int, int, float]:
        """Draw ``(j, z, g(i, u, j))`` from the model."""
        row = self.transition_matrix(u)[i]
        j = int(rng.choice(self.n, p=row))
        z = self.sample_observation(j, u, rng)
        return j, z, self.cost(i, u, j)

    def sample_next_states(
        self, states: np.ndarray, u: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Vectorised transition sampling for an array of current states."""
        cdf = np.cumsum(self.transition_matrix(u), axis=1)
        r = rng.random(len(states))
        nxt = (cdf[states] < r[:, None]).sum(axis=1)
        return np.minimum(nxt, self.n - 1)

    # --- batched helpers used by the rollout simulator ---

    @property
    def obs_uniforms(self) -> int:
        """Uniform draws consumed per observation by :meth:`observations_from_uniforms`."""
        return 1

    @cached_property
    def _obs_cdf(self) -> np.ndarray:
        return np.stack([np.cumsum(self.observation_matrix(u), axis=1) for u in range(self.num_controls)])

    def observations_from_uniforms(self, j: np.ndarray, u: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Inverse-CDF observation draws for next states ``j`` under controls ``u``."""
        rows = self._obs_cdf[u, j]
        z = (rows < r[:, :1] * rows[:, -1:]).sum(axis=1)
        return np.minimum(z, self.num_observations - 1)

    def likelihood_rows(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``(N, n)`` array whose row ``k`` is ``p(z_k | ., u_k)``."""
        out = np.empty((len(z), self.n))
        for c in np.unique(u):
            sel = u == c
            out[sel] = self.observation_matrix(int(c))[:, z[sel]].T
        return out

    def obs_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Factored observation tables ``(T[u, l, r, s], local[j, l])``.

        ``p(z | j, u) = prod_l T[u, l, local[j, l], z_l]`` where ``z_l`` are the
        base-``S`` digits of ``z``, most significant first.  The default is a
        single factor holding the whole observation matrix.
        """
        tables = np.stack([self.observation_matrix(u) for u in range(self.num_controls)])[:, None]
        return np.ascontiguousarray(tables), np.arange(self.n)[:, None]

    @cached_property
    def cost_table(self) -> np.ndarray:
        """``(|U|, n)`` table of expected stage costs."""
        return np.stack([self.expected_cost(u) for u in range(self.num_controls)])

    @cached_property
    def g_max(self) -> float:
        """Largest absolute stage cost, used for truncation bounds."""
        return float(
            max(
                abs(self.cost(i, u, j))
                for u in range(self.num_controls)
                for i in range(self.n)
                for j in range(self.n)
            )
        )

    def check(self, tol: float = PROB_TOL) -> None:
        """Raise ``ValueError`` if any transition/observation row is not stochastic."""
        for u in range(self.num_controls):
            P = self.transition_matrix(u)
            if np.any(P < -tol) or np.max(np.abs(P.sum(axis=1) - 1.0)) > tol:
                raise ValueError(f"transition rows for control {u} are not stochastic")
            O = self.observation_matrix(u)
            if np.any(O < -tol) or np.max(np.abs(O.sum(axis=1) - 1.0)) > tol:
                raise ValueError(f"observation rows for control {u} are not stochastic")


class DenseModel(PomdpModel):
    """Model backed by explicit tensors.

    Arrays are stored control-major: ``T[u, i, j]``, ``O[u, j, z]``,
    ``G[u, i, j]``.
    """

    def __init__(self, T, O, G, discount: float, check: bool = True):
        self.T = np.asarray(T, dtype=float)
        self.O = np.asarray(O, dtype=float)
        self.G = np.asarray(G, dtype=float)
        if not 0.0 < discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        self.discount = float(discount)
        self.num_controls, self.n, n2 = self.T.shape
        if n2 != self.n or self.G.shape != self.T.shape:
            raise ValueError("transition and cost tensors must have shape (U, n, n)")
        if self.O.shape[:2] != (self.num_controls, self.n):
            raise ValueError("observation tensor must have shape (U, n, Z)")
        self.num_observations = self.O.shape[2]
        self._exp_cost = np.einsum("uij,uij->ui", self.T, self.G)
        for a in (self.T, self.O, self.G, self._exp_cost):
            a.setflags(write=False)
        if check:
            self.check()

    def transition_matrix(self, u):
        return self.T[u]

    def obs_likelihood(self, z, u):
        return self.O[u, :, z]

    def observation_matrix(self, u):
        return self.O[u]

    def likelihood_rows(self, z, u):
        return self.O[u, :, z]

    def expected_cost(self, u):
        return self._exp_cost[u]

    def cost(self, i, u, j):
        return float(self.G[u, i, j])

    @cached_property
    def g_max(self) -> float:
        return float(np.max(np.abs(self.G)))

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "controls": self.num_controls,
            "observations": self.num_observations,
            "discount": self.discount,
            "transition": self.T.transpose(1, 0, 2).tolist(),
            "observation": self.O.transpose(1, 0, 2).tolist(),
            "cost": self.G.transpose(1, 0, 2).tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DenseModel":
        T = np.asarray(d["transition"], dtype=float).transpose(1, 0, 2)
        O = np.asarray(d["observation"], dtype=float).transpose(1, 0, 2)
        G = np.asarray(d["cost"], dtype=float).transpose(1, 0, 2)
        model = cls(T, O, G, d["discount"])
        if (model.n, model.num_controls, model.num_observations) != (
            d["n"],
            d["controls"],
            d["observations"],
        ):
            raise ValueError("declared dimensions do not match the arrays")
        return model

    @classmethod
    def from_model(cls, model: PomdpModel) -> "DenseModel":
        """Materialise any model into dense tensors (small models only)."""
        U, n = model.num_controls, model.n
        T = np.stack([model.transition_matrix(u) for u in range(U)])
        O = np.stack([model.observation_matrix(u) for u in range(U)])
        G = np.array(
            [[[model.cost(i, u, j) for j in range(n)] for i in range(n)] for u in range(U)]
        )
        return cls(T, O, G, model.discount)


def model_to_json(model: PomdpModel) -> dict:
    if hasattr(model, "to_json_dict"):
        return model.to_json_dict()
    return DenseModel.from_model(model).to_json_dict()


def model_from_json(d: dict) -> PomdpModel:
    """Load either a dense model or a named factored generator."""
    if "generator" in d:
        if d["generator"] != "recovery":
            raise ValueError(f"unknown model generator {d['generator']!r}")
        from .recovery import RecoveryParams, build_recovery_pomdp

        return build_recovery_pomdp(RecoveryParams.from_dict(d.get("params", {})))
    return DenseModel.from_json_dict(d)


def save_model(model: PomdpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)))


def load_model(path: str | Path) -> PomdpModel:
    return model_from_json(json.loads(Path(path).read_text()))


# --- belief arithmetic -------------------------------------------------------


def predict(model: PomdpModel, b: np.ndarray, u: int) -> np.ndarray:
    """Distribution of the next state: ``sum_i b(i) p_ij(u)``."""
    return b @ model.transition_matrix(u)


def belief_update_exact(model: PomdpModel, b, u: int, z: int) -> np.ndarray:
    """Bayes filter ``F(b, u, z)``; O(n^2) per call."""
    b = np.asarray(b, dtype=float)
    w = predict(model, b, u) * model.obs_likelihood(z, u)
    total = w.sum()
    if total <= 0.0:
        raise ZeroLikelihood(f"observation {z} has zero probability under control {u}")
    return w / total


def stage_cost_expected(model: PomdpModel, b, u: int) -> float:
    return float(np.asarray(b, dtype=float) @ model.expected_cost(u))


def obs_prob_given_belief(model: PomdpModel, b, u: int, z: int) -> float:
    return float(predict(model, np.asarray(b, dtype=float), u) @ model.obs_likelihood(z, u))


def observation_distribution(model: PomdpModel, b, u: int) -> np.ndarray:
    """``p_hat(. | b, u)`` over all observations."""
    return predict(model, np.asarray(b, dtype=float), u) @ model.observation_matrix(u)


def all_posteriors(model: PomdpModel, b, u: int) -> tuple[np.ndarray, np.ndarray]:
    """Observation probabilities and posterior beliefs for every ``z``.

    Returns ``(p, B)`` with ``p[z] = p_hat(z | b, u)`` and ``B[z] = F(b, u, z)``.
    Rows of ``B`` for impossible observations hold the predicted belief.
    """
    prior = predict(model, np.asarray(b, dtype=float), u)
    W = model.observation_matrix(u).T * prior[None, :]
    p = W.sum(axis=1)
    B = np.empty_like(W)
    ok = p > 0
    B[ok] = W[ok] / p[ok, None]
    B[~ok] = prior
    return p, B


# --- closed-loop simulation --------------------------------------------------


@dataclass(frozen=True)
class Step:
    belief: np.ndarray
    control: int
    observation: int
    cost: float


@dataclass
class Trajectory:
    steps: list[Step]
    discount: float
    truncation_bound: float = 0.0
    states: list[int] = field(default_factory=list)

    @property
    def discounted_cost(self) -> float:
        return float(sum(self.discount**k * s.cost for k, s in enumerate(self.steps)))

    def __len__(self) -> int:
        return len(self.steps)


def simulate_policy(
    model: PomdpModel,
    policy: Policy,
    b0,
    horizon: int,
    seed=None,
    *,
    stage_cost: str = "realized",
    initial_state: int | None = None,
) -> Trajectory:
    """Run ``policy`` in closed loop with exact belief updates.

    ``stage_cost`` selects whether each step records the realised
    ``g(i, u, j)`` or the belief-averaged ``g_hat(b, u)``; both give unbiased
    estimates of the policy cost.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if stage_cost not in ("realized", "expected"):
        raise ValueError("stage_cost must be 'realized' or 'expected'")
    rng = np.random.default_rng(seed)
    b = validate_belief(b0, model.n)
    i = int(rng.choice(model.n, p=b)) if initial_state is None else int(initial_state)
    steps, states = [], [i]
    for _ in range(horizon):
        u = int(policy(b))
        j, z, g = model.sample(i, u, rng)
        if stage_cost == "expected":
            g = stage_cost_expected(model, b, u)
        steps.append(Step(b, u, z, float(g)))
        b = belief_update_exact(model, b, u, z)
        i = j
        states.append(i)
    alpha = model.discount
    bound = alpha**horizon * model.g_max / (1.0 - alpha)
    return Trajectory(steps, alpha, bound, states)


def discounted_sum(costs: Sequence[float], alpha: float) -> float:
    return float(np.sum(np.asarray(costs) * alpha ** np.arange(len(costs))))
