"""The intrusion-recovery POMDP with K service replicas.

Each replica is safe (0) or compromised (1).  Control bit ``u^l = 1``
recovers replica ``l``, which is then safe at the next step.  A compromised
replica that is not recovered stays compromised; a safe one that is not
recovered is compromised with probability ``min(rate * (1 + N_l(i)), 1)``,
where ``N_l(i)`` counts compromised neighbours.  Replicas transition
independently given the full current state.  Each replica emits an alert
count drawn from a Beta-binomial distribution that depends on its next
state only.

State, control and observation vectors are encoded big-endian: replica 1 is
the most significant digit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import betaln, gammaln

from .aggregation import FeatureSpace
from .errors import CapacityExceeded
from .pomdp import DenseModel, PomdpModel

MAX_DENSE_STATES = 4096


def betabin_pmf(trials: int, a: float, b: float) -> np.ndarray:
    """Beta-binomial pmf over ``0..trials``."""
    if trials < 0 or a <= 0 or b <= 0:
        raise ValueError("need trials >= 0, a > 0 and b > 0")
    k = np.arange(trials + 1)
    log_choose = gammaln(trials + 1) - gammaln(k + 1) - gammaln(trials - k + 1)
    pmf = np.exp(log_choose + betaln(k + a, trials - k + b) - betaln(a, b))
    return pmf / pmf.sum()


def _default_safe() -> list[float]:
    return betabin_pmf(7, 0.7, 3.0).tolist()


def _default_compromised() -> list[float]:
    return betabin_pmf(7, 1.0, 0.7).tolist()


@dataclass(frozen=True)
class RecoveryParams:
    K: int = 1
    adjacency: tuple[tuple[int, ...], ...] | None = None  # None -> complete graph
    base_compromise_rate: float = 0.2
    obs_safe: tuple[float, ...] = field(default_factory=lambda: tuple(_default_safe()))
    obs_compromised: tuple[float, ...] = field(default_factory=lambda: tuple(_default_compromised()))
    intrusion_cost_weight: float = 2.0
    recovery_cost_weight: float = 1.0
    compromised_recovery_cost: float = -1.0
    discount: float = 0.99

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("obs_safe", "obs_compromised"):
            d = np.asarray(getattr(self, name), dtype=float)
            if d.ndim != 1 or np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a distribution")
            object.__setattr__(self, name, tuple(float(x) for x in d))
        if len(self.obs_safe) != len(self.obs_compromised):
            raise ValueError("observation distributions need a common support")
        if self.adjacency is not None:
            adj = tuple(tuple(int(x) for x in row) for row in self.adjacency)
            A = np.asarray(adj)
            if A.shape != (self.K, self.K) or np.any(np.diag(A)) or np.any(A != A.T):
                raise ValueError("adjacency must be a symmetric K x K 0/1 matrix without self-loops")
            object.__setattr__(self, "adjacency", adj)

    @property
    def obs_support(self) -> int:
        return len(self.obs_safe)

    @property
    def adjacency_matrix(self) -> np.ndarray:
        if self.adjacency is None:
            return np.ones((self.K, self.K), dtype=np.int64) - np.eye(self.K, dtype=np.int64)
        return np.asarray(self.adjacency, dtype=np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adjacency"] = None if self.adjacency is None else [list(r) for r in self.adjacency]
        d["obs_safe"] = list(self.obs_safe)
        d["obs_compromised"] = list(self.obs_compromised)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecoveryParams":
        d = dict(d)
        for name in ("obs_safe", "obs_compromised"):
            if isinstance(d.get(name), dict):  # {"trials":7,"a":..,"b":..}
                spec = d[name]
                d[name] = tuple(betabin_pmf(spec["trials"], spec["a"], spec["b"]))
            elif name in d:
                d[name] = tuple(d[name])
        if d.get("adjacency") is not None:
            d["adjacency"] = tuple(tuple(r) for r in d["adjacency"])
        return cls(**d)


def bits(index: int | np.ndarray, K: int) -> np.ndarray:
    """Big-endian bit vector(s) of ``index``."""
    shifts = np.arange(K - 1, -1, -1)
    return (np.asarray(index)[..., None] >> shifts) & 1


def index_of_bits(b) -> int:
    out = 0
    for x in b:
        out = (out << 1) | int(x)
    return out


class RecoveryModel(PomdpModel):
    """Factored evaluator; tables are built lazily and cached per control."""

    def __init__(self, params: RecoveryParams):
        self.params = params
        K = params.K
        self.K = K
        self.n = 2**K
        self.num_controls = 2**K
        self.S = params.obs_support
        self.num_observations = self.S**K
        self.discount = params.discount
        self._O1 = np.array([params.obs_safe, params.obs_compromised])  # [state bit, alert]
        self._adj = params.adjacency_matrix
        self._P: dict[int, np.ndarray] = {}
        self._O: np.ndarray | None = None

    # --- per-replica structure ---
    def compromise_probs(self, i: int | np.ndarray, u: int) -> np.ndarray:
        """Probability that each replica is compromised at the next step."""
        ib = bits(i, self.K)
        ub = bits(u, self.K)
        neighbours = ib @ self._adj
        p_new = np.minimum(self.params.base_compromise_rate * (1 + neighbours), 1.0)
        p = np.where(ib == 1, 1.0, p_new)
        return np.where(ub == 1, 0.0, p)

    def stage_cost(self, i: int | np.ndarray, u: int | np.ndarray) -> np.ndarray | float:
        ib, ub = bits(i, self.K), bits(u, self.K)
        p = self.params
        per = (
            p.intrusion_cost_weight * ib * (1 - ub)
            + p.recovery_cost_weight * ub * (1 - ib)
            + p.compromised_recovery_cost * ub * ib
        )
        return per.sum(axis=-1)

    def obs_digits(self, z: int) -> np.ndarray:
        return np.array([(z // self.S ** (self.K - 1 - l)) % self.S for l in range(self.K)])

    def obs_index(self, digits) -> int:
        out = 0
        for d in digits:
            out = out * self.S + int(d)
        return out

    # --- evaluator interface ---
    def transition_matrix(self, u):
        if u not in self._P:
            if self.n > MAX_DENSE_STATES:
                raise CapacityExceeded(f"transition matrix with n={self.n} is not materialised")
            p1 = self.compromise_probs(np.arange(self.n), u)  # (n, K)
            jb = bits(np.arange(self.n), self.K)  # (n, K)
            P = np.prod(np.where(jb[None, :, :] == 1, p1[:, None, :], 1 - p1[:, None, :]), axis=2)
            P.setflags(write=False)
            self._P[u] = P
        return self._P[u]

    def obs_likelihood(self, z, u):
        d = self.obs_digits(z)
        jb = bits(np.arange(self.n), self.K)
        return np.prod(self._O1[jb, d[None, :]], axis=1)

    def observation_matrix(self, u):
        if self._O is None:
            if self.n * self.num_observations > 5 * 10**7:
                raise CapacityExceeded("observation matrix too large to materialise")
            O = np.ones((1, 1))
            for _ in range(self.K):
                O = np.einsum("ab,cd->acbd", O, self._O1).reshape(O.shape[0] * 2, O.shape[1] * self.S)
            O.setflags(write=False)
            self._O = O
        return self._O

    @cached_property
    def _exp_cost(self) -> np.ndarray:
        i = np.arange(self.n)
        return np.stack([self.stage_cost(i, u) for u in range(self.num_controls)]).astype(float)

    def expected_cost(self, u):
        return self._exp_cost[u]

    def cost(self, i, u, j):
        return float(self.stage_cost(i, u))

    @cached_property
    def g_max(self) -> float:
        p = self.params
        per = max(abs(p.intrusion_cost_weight), abs(p.recovery_cost_weight), abs(p.compromised_recovery_cost))
        return float(self.K * per)

    def sample_observation(self, j, u, rng):
        jb = bits(j, self.K)
        digits = [rng.choice(self.S, p=self._O1[b]) for b in jb]
        return self.obs_index(digits)

    def sample(self, i, u, rng):
        p1 = self.compromise_probs(i, u)
        jb = (rng.random(self.K) < p1).astype(np.int64)
        j = index_of_bits(jb)
        cdf = np.cumsum(self._O1, axis=1)
        digits = [min(int(np.searchsorted(cdf[b], rng.random(), side="right")), self.S - 1) for b in jb]
        return j, self.obs_index(digits), float(self.stage_cost(i, u))

    def sample_next_states(self, states, u, rng):
        states = np.asarray(states)
        p1 = self.compromise_probs(states, u)
        jb = (rng.random(p1.shape) < p1).astype(np.int64)
        return jb @ (1 << np.arange(self.K - 1, -1, -1))

    # batched helpers: one uniform per replica digit
    @property
    def obs_uniforms(self) -> int:
        return self.K

    @cached_property
    def _state_bits(self) -> np.ndarray:
        return bits(np.arange(self.n), self.K)

    def observations_from_uniforms(self, j, u, r):
        cdf = np.cumsum(self._O1, axis=1)
        jb = bits(np.asarray(j), self.K)  # (N, K)
        digits = (cdf[jb] < r[:, :, None] * cdf[jb][..., -1:]).sum(axis=2)
        digits = np.minimum(digits, self.S - 1)
        return digits @ (self.S ** np.arange(self.K - 1, -1, -1))

    def likelihood_rows(self, z, u):
        z = np.asarray(z)
        out = np.ones((len(z), self.n))
        for l in range(self.K):
            d = (z // self.S ** (self.K - 1 - l)) % self.S
            out *= self._O1[:, d].T[:, self._state_bits[:, l]]
        return out

    def obs_factors(self):
        tables = np.broadcast_to(self._O1, (self.num_controls, self.K, 2, self.S))
        return np.ascontiguousarray(tables), self._state_bits

    @property
    def cost_table(self) -> np.ndarray:
        return self._exp_cost

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "controls": self.num_controls,
            "observations": self.num_observations,
            "discount": self.discount,
            "generator": "recovery",
            "params": self.params.to_dict(),
        }


def build_recovery_pomdp(params: RecoveryParams, dense: bool | None = None) -> PomdpModel:
    """Dense tensors for ``K <= 2`` (unless overridden), the factored evaluator otherwise."""
    factored = RecoveryModel(params)
    if dense is None:
        dense = params.K <= 2
    if not dense:
        return factored
    model = DenseModel.from_model(factored)
    model.params = params
    return model


@dataclass(frozen=True)
class ScenarioSwitch:
    """Parameter change taking effect from step ``switch_step`` on."""

    switch_step: int
    changes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.switch_step < 0:
            raise ValueError("switch_step must be >= 0")

    def post_params(self, params: RecoveryParams) -> RecoveryParams:
        return replace(params, **self.changes) if self.changes else params


def mixed_alert_shift(params: RecoveryParams, weight: float = 0.3) -> dict:
    """Default post-switch change: safe alerts shifted toward the compromised profile."""
    safe = np.asarray(params.obs_safe)
    comp = np.asarray(params.obs_compromised)
    return {"obs_safe": tuple((1 - weight) * safe + weight * comp)}


class SwitchedModels:
    """Pre/post-switch model pair for one scenario."""

    def __init__(self, params: RecoveryParams, switch: ScenarioSwitch, dense: bool | None = None):
        self.switch = switch
        self.pre = build_recovery_pomdp(params, dense)
        post_params = switch.post_params(params)
        self.post = self.pre if post_params == params else build_recovery_pomdp(post_params, dense)

    def at(self, k: int) -> PomdpModel:
        return apply_scenario_switch(self, self.switch, k)


def apply_scenario_switch(models: SwitchedModels, switch: ScenarioSwitch, k: int) -> PomdpModel:
    return models.pre if k < switch.switch_step else models.post


def zone_feature_space(params: RecoveryParams, zones) -> FeatureSpace:
    """Feature bit ``y^v = 1`` iff any replica in zone ``v`` is compromised."""
    K = params.K
    members = sorted(r for z in zones for r in z)
    if members != list(range(K)):
        raise ValueError("zones must partition the replicas 0..K-1")
    states = bits(np.arange(2**K), K)  # (n, K)
    zone_bits = np.stack([states[:, list(z)].max(axis=1) for z in zones], axis=1)
    s2f = zone_bits @ (1 << np.arange(len(zones) - 1, -1, -1))
    return FeatureSpace.from_partition(s2f)
