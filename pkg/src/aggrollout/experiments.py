"""Experiment configuration and the runners behind the command-line verbs.

A configuration is a JSON document validated against ``CONFIG_SCHEMA`` and
merged over ``DEFAULT_CONFIG``.  Every runner is a pure function of the
resolved configuration and the seed, so the CLI only handles files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .aggregation import (
    FeatureSpace,
    BasePolicyBundle,
    belief_grid_2,
    epsilon_and_bound,
    oracle_cost_function,
    solve_aggregation,
)
from .errors import ConfigError, MetricUndefined
from .pomdp import PomdpModel, load_model, point_belief, validate_belief
from .recovery import RecoveryParams, ScenarioSwitch, SwitchedModels, build_recovery_pomdp, mixed_alert_shift, zone_feature_space
from .rollout import RolloutConfig, RolloutPlanner, base_decider, rollout_decider, run_episodes
from .simplex import composition_count

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "results",
    "model": {"recovery": {"K": 1}},
    "aggregation": {"features": "identity", "zones": None, "rho": 1, "mode": "auto", "n_sim": 10000},
    "solver": {"threshold": 0.1, "max_iter": 1000000, "capacity": 10000000},
    "rollout": {
        "lookahead": 1,
        "horizon": 10,
        "num_sims": 20,
        "obs_mode": "auto",
        "obs_samples": 64,
        "leaf_sampling": "nested",
        "prune": 1e-6,
        "node_budget": 10000000,
    },
    "evaluation": {
        "episodes": 1000,
        "horizon": 500,
        "initial_state": 0,
        "initial_belief": None,
        "policies": ["base", "rollout"],
        "rho_list": None,
        "bundle": None,
    },
    "scenario": None,
    "bound": {"rho_list": [1, 2, 3, 4, 5, 10, 20, 50], "oracle_rho": 200, "oracle_threshold": 1e-4, "probe_points": 1001},
    "oracle": {"rho": 200, "threshold": 1e-4, "grid_points": 101},
    "counts": {"m_f": [2, 4, 8], "rho": [1, 2, 3, 4, 5, 6, 7, 8]},
    "adaptation": None,
}

_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_INT_LIST = {"type": "array", "items": _POS}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _NONNEG,
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"recovery": {"type": "object"}, "path": {"type": "string"}},
            "oneOf": [{"required": ["recovery"]}, {"required": ["path"]}],
        },
        "aggregation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "features": {"enum": ["identity", "zones"]},
                "zones": {"type": ["array", "null"], "items": {"type": "array", "items": _NONNEG}},
                "rho": _POS,
                "mode": {"enum": ["auto", "exact", "sampled"]},
                "n_sim": _POS,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"threshold": {"type": "number", "exclusiveMinimum": 0}, "max_iter": _POS, "capacity": _POS},
        },
        "rollout": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lookahead": _POS,
                "horizon": _NONNEG,
                "num_sims": _POS,
                "obs_mode": {"enum": ["auto", "exact", "sampled"]},
                "obs_samples": _POS,
                "leaf_sampling": {"enum": ["nested", "paired"]},
                "prune": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "node_budget": _POS,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "episodes": _NONNEG,
                "horizon": _NONNEG,
                "initial_state": _NONNEG,
                "initial_belief": {"type": ["array", "null"], "items": _NUM},
                "policies": {"type": "array", "items": {"enum": ["base", "rollout"]}},
                "rho_list": {"type": ["array", "null"], "items": _POS},
                "bundle": {"type": ["string", "null"]},
            },
        },
        "scenario": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["switch_step"],
            "properties": {
                "switch_step": _NONNEG,
                "changes": {"type": "object"},
                "alert_shift": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "bound": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho_list": {"type": "array", "items": _POS},
                "oracle_rho": _POS,
                "oracle_threshold": {"type": "number", "exclusiveMinimum": 0},
                "probe_points": {"type": "integer", "minimum": 2},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": _POS,
                "threshold": {"type": "number", "exclusiveMinimum": 0},
                "grid_points": {"type": "integer", "minimum": 2},
            },
        },
        "counts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"m_f": _INT_LIST, "rho": _INT_LIST},
        },
        "adaptation": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["J1"],
            "properties": {
                "J1": _NUM,
                "episodes": _POS,
                "horizon": _NONNEG,
                "budgets": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["lookahead", "horizon"],
                        "properties": {"lookahead": _POS, "horizon": _NONNEG},
                    },
                },
            },
        },
    },
}

ADAPTATION_DEFAULTS = {
    "episodes": 200,
    "horizon": 100,
    "budgets": [
        {"lookahead": 1, "horizon": 0},
        {"lookahead": 1, "horizon": 5},
        {"lookahead": 1, "horizon": 10},
        {"lookahead": 1, "horizon": 20},
        {"lookahead": 2, "horizon": 10},
        {"lookahead": 2, "horizon": 20},
    ],
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated configuration with all defaults filled in."""

    data: dict
    seed: int

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        data = _merge(DEFAULT_CONFIG, raw)
        if "model" in raw:  # a model path replaces the default recovery model
            data["model"] = copy.deepcopy(raw["model"])
        if data["adaptation"] is not None:
            data["adaptation"] = _merge(ADAPTATION_DEFAULTS, data["adaptation"])
        if seed is not None:
            data["seed"] = int(seed)
        cfg = cls(data, int(data["seed"]))
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path | None, seed: int | None = None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, seed)
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw, seed)

    def check(self) -> None:
        """Semantic checks beyond the schema, so bad values fail before any work."""
        self.recovery_params()
        self.rollout_config()
        agg = self.data["aggregation"]
        if agg["features"] == "zones" and not agg["zones"]:
            raise ConfigError("zone features need an 'aggregation.zones' list")
        sc = self.data["scenario"]
        if sc is not None and "changes" in sc and "alert_shift" in sc:
            raise ConfigError("scenario takes either 'changes' or 'alert_shift', not both")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # --- builders ---------------------------------------------------------

    def recovery_params(self) -> RecoveryParams | None:
        spec = self.data["model"].get("recovery")
        if spec is None:
            return None
        try:
            return RecoveryParams.from_dict(spec)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid recovery parameters: {exc}") from None

    def model(self) -> PomdpModel:
        params = self.recovery_params()
        if params is not None:
            return build_recovery_pomdp(params)
        try:
            return load_model(self.data["model"]["path"])
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load model: {exc}") from None

    def scenario(self) -> ScenarioSwitch | None:
        sc = self.data["scenario"]
        if sc is None:
            return None
        params = self.recovery_params()
        if params is None:
            raise ConfigError("scenario switches need a recovery model")
        if "alert_shift" in sc:
            changes = mixed_alert_shift(params, sc["alert_shift"])
        else:
            try:
                post = RecoveryParams.from_dict({**params.to_dict(), **sc.get("changes", {})})
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"invalid scenario changes: {exc}") from None
            changes = {k: getattr(post, k) for k in post.__dataclass_fields__ if getattr(post, k) != getattr(params, k)}
        return ScenarioSwitch(sc["switch_step"], changes)

    def feature_space(self, model: PomdpModel) -> FeatureSpace:
        agg = self.data["aggregation"]
        if agg["features"] == "identity":
            return FeatureSpace.identity(model.n)
        params = self.recovery_params()
        if params is None:
            raise ConfigError("zone features need a recovery model")
        try:
            return zone_feature_space(params, agg["zones"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def rollout_config(self, **overrides) -> RolloutConfig:
        d = {**self.data["rollout"], **overrides}
        d.setdefault("seed", self.seed)
        try:
            return RolloutConfig(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid rollout settings: {exc}") from None

    def initial_belief(self, model: PomdpModel) -> np.ndarray:
        ev = self.data["evaluation"]
        if ev["initial_belief"] is not None:
            try:
                return validate_belief(ev["initial_belief"], model.n)
            except ValueError as exc:
                raise ConfigError(f"initial_belief: {exc}") from None
        if ev["initial_state"] >= model.n:
            raise ConfigError("initial_state is out of range")
        return point_belief(model.n, ev["initial_state"])

    def solve(self, model: PomdpModel, rho: int | None = None) -> BasePolicyBundle:
        agg, sol = self.data["aggregation"], self.data["solver"]
        rho = agg["rho"] if rho is None else rho
        bundle = solve_aggregation(
            model,
            self.feature_space(model),
            rho,
            threshold=sol["threshold"],
            mode=agg["mode"],
            n_sim=agg["n_sim"],
            seed=[self.seed, 1],
            capacity=sol["capacity"],
            max_iter=sol["max_iter"],
        )
        bundle.meta.update({"rho": rho, "features": agg["features"], "config_sha256": self.digest})
        return bundle


# --- runners -----------------------------------------------------------------


def run_solve(cfg: ExperimentConfig, timing: bool = True) -> tuple[BasePolicyBundle, dict]:
    t0 = time.perf_counter()
    model = cfg.model()
    bundle = cfg.solve(model)
    mdp = bundle.mdp
    summary = {
        "representatives": len(bundle.reps),
        "feature_states": bundle.fs.m_f,
        "rho": bundle.reps.rho,
        "iterations": mdp.iterations,
        "residual": mdp.residual,
        "construction": mdp.mode,
    }
    if timing:
        summary["wall_time"] = time.perf_counter() - t0
    return bundle, summary


EVAL_COLUMNS = ["rho", "policy", "episodes", "mean", "std", "stderr", "horizon", "truncation_bound"]


def run_evaluate(cfg: ExperimentConfig, bundle: BasePolicyBundle | None = None, timing: bool = True) -> list[dict]:
    """Monte Carlo cost of the base and rollout policies, one row per (rho, policy)."""
    ev = cfg["evaluation"]
    if ev["episodes"] == 0:
        return []
    switch = cfg.scenario()
    if switch is None:
        model = cfg.model()
        model_at = None
    else:
        models = SwitchedModels(cfg.recovery_params(), switch)
        model, model_at = models.pre, models.at
    b0 = cfg.initial_belief(model)
    if bundle is None and ev["bundle"] is not None:
        bundle = BasePolicyBundle.load(ev["bundle"])
    if bundle is not None:
        bundles = [bundle]
    else:
        rhos = ev["rho_list"] or [cfg["aggregation"]["rho"]]
        bundles = [cfg.solve(model, rho) for rho in rhos]
    rows = []
    for bun in bundles:
        for policy in ev["policies"]:
            t0 = time.perf_counter()
            if policy == "base":
                decide = base_decider(bun)
            else:
                planner = RolloutPlanner(model, bun, cfg.rollout_config())
                if model_at is None:
                    decide = rollout_decider(planner)
                else:
                    planners = {id(m): planner.with_model(m) for m in (models.pre, models.post)}
                    decide = rollout_decider(lambda k: planners[id(model_at(k))])
            res = run_episodes(model_at or model, decide, b0, ev["horizon"], ev["episodes"], seed=cfg.seed)
            std = float(res.costs.std(ddof=1)) if len(res.costs) > 1 else 0.0
            row = {
                "rho": bun.reps.rho,
                "policy": policy,
                "episodes": len(res.costs),
                "mean": res.mean,
                "std": std,
                "stderr": res.stderr,
                "horizon": res.horizon,
                "truncation_bound": res.truncation_bound,
            }
            if timing:
                row["wall_time"] = time.perf_counter() - t0
            rows.append(row)
    return rows


BOUND_COLUMNS = ["rho", "representatives", "epsilon", "bound", "observed_error"]


def bound_probes(n: int, points: int, seed) -> np.ndarray:
    """Probe beliefs: a uniform grid for two states, vertices plus Dirichlet draws otherwise."""
    if n == 2:
        return belief_grid_2(points)
    rng = np.random.default_rng(seed)
    return np.vstack([np.eye(n), rng.dirichlet(np.ones(n), size=max(points - n, 0))])


def run_bound_experiment(cfg: ExperimentConfig, timing: bool = True) -> list[dict]:
    bd = cfg["bound"]
    if not bd["rho_list"]:
        return []
    model = cfg.model()
    oracle = oracle_cost_function(model, bd["oracle_rho"], bd["oracle_threshold"], cfg["solver"]["capacity"])
    probes = bound_probes(model.n, bd["probe_points"], [cfg.seed, 2])
    rows = []
    for rho in bd["rho_list"]:
        t0 = time.perf_counter()
        rep = epsilon_and_bound(cfg.solve(model, rho), oracle, probes)
        row = {
            "rho": rho,
            "representatives": composition_count(cfg.feature_space(model).m_f, rho),
            "epsilon": rep.epsilon,
            "bound": rep.bound,
            "observed_error": rep.observed_error,
        }
        if timing:
            row["wall_time"] = time.perf_counter() - t0
        rows.append(row)
    return rows


COUNT_COLUMNS = ["m_f", "rho", "count"]


def count_representatives(m_f_list, rho_list) -> list[dict]:
    return [{"m_f": m, "rho": r, "count": composition_count(m, r)} for m in m_f_list for r in rho_list]


def run_oracle(cfg: ExperimentConfig) -> tuple[BasePolicyBundle, list[str], list[dict]]:
    """Fine identity aggregation; returns the bundle and its cost on a probe grid."""
    oc = cfg["oracle"]
    model = cfg.model()
    oracle = oracle_cost_function(model, oc["rho"], oc["threshold"], cfg["solver"]["capacity"])
    probes = bound_probes(model.n, oc["grid_points"], [cfg.seed, 3])
    cost = oracle(probes)
    columns = [f"b{i}" for i in range(model.n)] + ["cost"]
    rows = [{**{f"b{i}": float(p[i]) for i in range(model.n)}, "cost": float(c)} for p, c in zip(probes, cost)]
    return oracle.bundle, columns, rows


# --- adaptation ----------------------------------------------------------------


def adaptation_metric(J0: float, J1: float, J: float) -> float:
    """Fraction of the gap from ``J0`` to the reference cost ``J1`` closed by ``J``."""
    if J0 == J1:
        raise MetricUndefined("J0 equals J1; the adaptation metric is undefined")
    return (J0 - J) / (J0 - J1)


@dataclass
class AdaptationRecord:
    """Cost after a scenario switch as a function of online compute.

    ``points`` holds one entry per compute budget, in the configured order:
    lookahead, rollout horizon, per-decision wall time (``None`` when timing
    is off), estimated cost, its standard error and ``A``.
    """

    J0: float
    J1: float
    points: list[dict] = field(default_factory=list)
    switch: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.J0 == self.J1:
            raise MetricUndefined("J0 equals J1; the adaptation metric is undefined")

    def add(self, lookahead: int, horizon: int, wall_time: float | None, cost: float, stderr: float) -> dict:
        p = {
            "lookahead": lookahead,
            "horizon": horizon,
            "wall_time": wall_time,
            "cost": cost,
            "stderr": stderr,
            "A": adaptation_metric(self.J0, self.J1, cost),
        }
        self.points.append(p)
        return p

    @property
    def series(self) -> list[tuple[float | None, float]]:
        return [(p["wall_time"], p["cost"]) for p in self.points]

    @property
    def A(self) -> list[float]:
        return [p["A"] for p in self.points]

    def to_json(self) -> dict:
        return {"J0": self.J0, "J1": self.J1, "switch": self.switch, "points": self.points}


def run_adaptation(cfg: ExperimentConfig, timing: bool = True) -> AdaptationRecord:
    """Apply the switch, then sweep rollout budgets against the stale base policy.

    The base policy is solved on the pre-switch model and not re-solved.
    ``J0`` is its cost on the post-switch model; each budget runs rollout
    on the post-switch model with that base policy.
    """
    ad = cfg["adaptation"]
    if ad is None:
        raise ConfigError("the adaptation command needs an 'adaptation' section with J1")
    params = cfg.recovery_params()
    if params is None:
        raise ConfigError("adaptation needs a recovery model")
    switch = cfg.scenario() or ScenarioSwitch(0, {})
    models = SwitchedModels(params, switch)
    bundle = cfg.solve(models.pre)
    post = models.post
    b0 = cfg.initial_belief(post)
    base = run_episodes(post, base_decider(bundle), b0, ad["horizon"], ad["episodes"], seed=cfg.seed)
    record = AdaptationRecord(base.mean, float(ad["J1"]), switch={"switch_step": switch.switch_step, "changed": sorted(switch.changes)})
    for budget in ad["budgets"]:
        planner = RolloutPlanner(post, bundle, cfg.rollout_config(**budget))
        t0 = time.perf_counter()
        res = run_episodes(post, rollout_decider(planner), b0, ad["horizon"], ad["episodes"], seed=cfg.seed)
        decisions = max(ad["horizon"] * ad["episodes"], 1)
        wall = (time.perf_counter() - t0) / decisions if timing else None
        record.add(budget["lookahead"], budget["horizon"], wall, res.mean, res.stderr)
    return record
