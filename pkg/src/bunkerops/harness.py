"""Seeded multi-rollout evaluation of trained agents and the metric suite.

Runs fixed-horizon inference episodes, accumulates the per-episode metrics
online, and aggregates them across (training seed x rollout) grids with the
best/median seed selection rule: the best seed has the fewest collision
timesteps on average, and the median seed is the middle of the remaining
seeds on the same metric. A threshold sweep evaluates the override across a
probability grid and picks the one whose collision counts vary least (CV%).

Episodes are evaluated on the multimodal (two-peak) reward, the task's
final reward shape. This module only emits data; figure rendering lives in
the report layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from multiprocessing import Pool
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .env import (
    FacilityConfig,
    FacilityState,
    derive_rng,
    observation,
    reset,
    step,
    trajectory_record,
)
from .gbdt import BoostedEnsemble
from .override import OverrideConfig, decide
from .ppo import PolicyParams, act
from .rewards import Phase, RewardParams, reward_params_for_phase

# How far above its higher peak a container may be emptied before the empty
# counts as a safety-limit violation.
SAFETY_MARGIN = 5.0


class MissingArtifactError(RuntimeError):
    """A required trained artifact (policy or model) is absent."""


@dataclass
class EpisodeMetrics:
    """Every per-episode quantity the evaluation reports.

    ``total_volume_deviation`` is the mean distance of container volumes to
    their nearest ideal peak, as a percentage of the overflow limit.
    ``actions_per_container_*`` summarize successful-empty counts across
    containers; ``reward_per_action`` divides total reward by all non-no-op
    attempts. ``higher_lower_peak_ratio`` is 100 x (empties nearer the high
    peak) / (empties nearer the low peak), with ties counted as higher.
    """

    press_idle_time: int = 0
    total_volume_processed: float = 0.0
    collision_timesteps: int = 0
    total_volume_deviation: float = 0.0
    actions_per_container_mean: float = 0.0
    actions_per_container_std: float = 0.0
    reward_per_action: float = 0.0
    higher_lower_peak_ratio: float = 0.0
    safety_violations_pct: float = 0.0
    terminated_early: bool = False
    total_reward: float = 0.0
    steps: int = 0
    n_empties: int = 0
    n_actions: int = 0


METRIC_FIELDS = [f.name for f in fields(EpisodeMetrics)]

# Fields aggregated with mean/std/CV% in reports.
NUMERIC_METRICS = [
    "press_idle_time",
    "total_volume_processed",
    "collision_timesteps",
    "total_volume_deviation",
    "actions_per_container_mean",
    "reward_per_action",
    "higher_lower_peak_ratio",
    "safety_violations_pct",
    "total_reward",
]

DecideFn = Callable[[FacilityState, np.ndarray, np.random.Generator], int]


def policy_decide_fn(facility: FacilityConfig, params: PolicyParams) -> DecideFn:
    """Plain policy: sample an action, no override."""

    def fn(state: FacilityState, prev_volumes: np.ndarray, rng: np.random.Generator) -> int:
        return act(params, observation(state, facility), rng)[0]

    return fn


def override_decide_fn(
    facility: FacilityConfig,
    params: PolicyParams,
    ensemble: BoostedEnsemble,
    override_cfg: OverrideConfig,
) -> DecideFn:
    """Policy plus the collision-model override on no-ops."""

    def fn(state: FacilityState, prev_volumes: np.ndarray, rng: np.random.Generator) -> int:
        return decide(state, facility, params, ensemble, override_cfg, rng,
                      prev_volumes=prev_volumes)

    return fn


def run_episode(
    facility: FacilityConfig,
    decide_fn: DecideFn,
    seed: int,
    reward_params: Optional[RewardParams] = None,
    collect_trajectory: bool = False,
) -> tuple[EpisodeMetrics, list[dict]]:
    """Simulate one episode and accumulate all metrics online.

    The environment noise and the action sampling use independent streams
    derived from ``seed``, so two decision rules that consume policy samples
    identically see identical worlds. Returns (metrics, trajectory records);
    records are empty unless requested.
    """
    if reward_params is None:
        reward_params = reward_params_for_phase(Phase.MULTIMODAL, facility.penalty)
    state = reset(facility, seed)
    env_rng = derive_rng(seed, 1)
    act_rng = derive_rng(seed, 2)

    n = facility.n
    peak_lows = facility.peak_lows
    peak_highs = facility.peak_highs
    limit = facility.overflow_limit

    empties_per_container = np.zeros(n, dtype=np.int64)
    deviation_sum = 0.0
    higher = lower = violations = 0
    metrics = EpisodeMetrics()
    records: list[dict] = []
    prev_volumes = state.volumes.copy()

    terminated = False
    while not terminated:
        deviation_sum += float(
            np.minimum(np.abs(state.volumes - peak_lows),
                       np.abs(state.volumes - peak_highs)).sum()
        )
        pu_busy_before = state.pu_counter > 0

        action = decide_fn(state, prev_volumes, act_rng)
        outcome = step(state, action, facility, reward_params, env_rng)
        info = outcome.info

        metrics.total_reward += outcome.reward
        metrics.steps += 1
        if action != 0:
            metrics.n_actions += 1
        if info.emptied_container is not None:
            c = info.emptied_container - 1
            v = info.emptied_volume
            empties_per_container[c] += 1
            metrics.total_volume_processed += v
            metrics.n_empties += 1
            if v > peak_highs[c] + SAFETY_MARGIN:
                violations += 1
            if abs(v - peak_highs[c]) <= abs(v - peak_lows[c]):
                higher += 1
            else:
                lower += 1
        elif not pu_busy_before:
            metrics.press_idle_time += 1
        if info.collision_now:
            metrics.collision_timesteps += 1
        if info.overflowed_container is not None:
            metrics.terminated_early = True
        if collect_trajectory:
            records.append(trajectory_record(action, outcome))

        prev_volumes = state.volumes.copy()
        state = outcome.next_state
        terminated = outcome.terminated

    metrics.total_volume_deviation = 100.0 * deviation_sum / (n * metrics.steps * limit)
    metrics.actions_per_container_mean = float(empties_per_container.mean())
    metrics.actions_per_container_std = float(empties_per_container.std())
    metrics.reward_per_action = (
        metrics.total_reward / metrics.n_actions if metrics.n_actions else 0.0
    )
    if lower:
        metrics.higher_lower_peak_ratio = 100.0 * higher / lower
    else:
        metrics.higher_lower_peak_ratio = math.inf if higher else 0.0
    metrics.safety_violations_pct = (
        100.0 * violations / metrics.n_empties if metrics.n_empties else 0.0
    )
    return metrics, records


def cv_pct(values: Sequence[float]) -> float:
    """Coefficient of variation: 100 * std / mean with the population std
    (ddof=0); zero for a constant (or all-zero) series."""
    arr = np.asarray(values, dtype=float)
    mean = arr.mean()
    if mean == 0.0:
        return 0.0
    return float(100.0 * arr.std() / abs(mean))


@dataclass
class AggregateReport:
    """All rows of one method's evaluation plus the derived summaries."""

    method: str
    config_label: str
    rows: list[tuple[int, int, EpisodeMetrics]]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)
    best_seed: int = -1
    median_seed: int = -1

    def finalize(self) -> "AggregateReport":
        # canonical order makes aggregation bitwise invariant to how the
        # rows were produced (worker pools may deliver them shuffled)
        self.rows.sort(key=lambda row: (row[0], row[1]))
        by_metric = {
            m: np.array([getattr(em, m) for _, _, em in self.rows]) for m in NUMERIC_METRICS
        }
        # infinite peak ratios make std/cv nan; that is the honest summary
        with np.errstate(invalid="ignore"):
            self.summary = {
                m: {"mean": float(vals.mean()), "std": float(vals.std()),
                    "cv_pct": cv_pct(vals)}
                for m, vals in by_metric.items()
            }
        seeds = sorted({s for s, _, _ in self.rows})
        for s in seeds:
            self.per_seed[s] = {
                m: float(np.mean([getattr(em, m) for s2, _, em in self.rows if s2 == s]))
                for m in NUMERIC_METRICS
            }
        ranked = sorted(seeds, key=lambda s: (self.per_seed[s]["collision_timesteps"], s))
        self.best_seed = ranked[0]
        remaining = ranked[1:] or ranked
        self.median_seed = remaining[(len(remaining) - 1) // 2]
        return self

    def seed_stats(self, seed: int, metric: str) -> tuple[float, float]:
        vals = np.array([getattr(em, metric) for s, _, em in self.rows if s == seed])
        with np.errstate(invalid="ignore"):
            return float(vals.mean()), float(vals.std())

    def metric_values(self, metric: str) -> np.ndarray:
        return np.array([getattr(em, metric) for _, _, em in self.rows])


def episode_seed(eval_seed: int, train_seed: int, rollout: int) -> int:
    """Stable scalar episode seed; independent of the method under test so
    every method faces identical worlds."""
    return int(np.random.SeedSequence([eval_seed, train_seed, rollout]).generate_state(1)[0])


def _episode_worker(args) -> tuple[int, int, EpisodeMetrics]:
    facility, recipe, train_seed, rollout, eval_seed, reward_params = args
    decide_fn = _decide_fn_from_recipe(facility, recipe)
    metrics, _ = run_episode(
        facility, decide_fn, episode_seed(eval_seed, train_seed, rollout), reward_params
    )
    return train_seed, rollout, metrics


def _decide_fn_from_recipe(facility: FacilityConfig, recipe: tuple) -> DecideFn:
    if recipe[0] == "policy":
        return policy_decide_fn(facility, recipe[1])
    return override_decide_fn(facility, recipe[1], recipe[2], recipe[3])


def evaluate_method(
    method: str,
    facility: FacilityConfig,
    policies: Mapping[int, PolicyParams],
    seeds: Sequence[int],
    n_rollouts: int,
    ensemble: Optional[BoostedEnsemble] = None,
    override_cfg: Optional[OverrideConfig] = None,
    eval_seed: int = 0,
    config_label: str = "",
    jobs: int = 1,
) -> AggregateReport:
    """Evaluate one method over a seed x rollout grid.

    ``method`` is one of ``naive`` or ``cl`` (plain policy) or ``cl_cm``
    (policy plus override, which requires the trained ensemble). Each seed
    must have a trained policy in ``policies``.
    """
    if method not in ("naive", "cl", "cl_cm"):
        raise ValueError(f"unknown method {method!r}")
    tasks = []
    reward_params = reward_params_for_phase(Phase.MULTIMODAL, facility.penalty)
    for s in seeds:
        if s not in policies:
            raise MissingArtifactError(f"no trained policy for seed {s} ({method})")
        if method == "cl_cm":
            if ensemble is None:
                raise MissingArtifactError("cl_cm evaluation needs a trained collision model")
            recipe = ("override", policies[s], ensemble, override_cfg or OverrideConfig())
        else:
            recipe = ("policy", policies[s])
        for r in range(n_rollouts):
            tasks.append((facility, recipe, s, r, eval_seed, reward_params))

    if jobs > 1 and len(tasks) > 1:
        with Pool(jobs) as pool:
            results = list(pool.imap(_episode_worker, tasks))
    else:
        results = [_episode_worker(t) for t in tasks]
    results.sort(key=lambda row: (row[0], row[1]))
    report = AggregateReport(method=method, config_label=config_label, rows=results)
    return report.finalize()


@dataclass
class SweepResult:
    rows: list[dict]
    best_theta: float


def threshold_sweep(
    facility: FacilityConfig,
    policy: PolicyParams,
    ensemble: BoostedEnsemble,
    theta_grid: Sequence[float],
    n_rollouts: int = 5,
    delta: float = 3.0,
    eval_seed: int = 0,
) -> SweepResult:
    """Collision-count stability across override thresholds.

    Every threshold sees the same rollout seeds. Returns per-theta CV%,
    mean, and std of collision timesteps, plus the CV%-minimizing theta
    (ties resolve to the smaller threshold).
    """
    if not len(theta_grid):
        raise ValueError("theta grid must be non-empty")
    reward_params = reward_params_for_phase(Phase.MULTIMODAL, facility.penalty)
    rows = []
    best_theta = None
    best_cv = math.inf
    for theta in theta_grid:
        cfg = OverrideConfig(theta=float(theta), delta=delta)
        decide_fn = override_decide_fn(facility, policy, ensemble, cfg)
        collisions = []
        for r in range(n_rollouts):
            metrics, _ = run_episode(
                facility, decide_fn, episode_seed(eval_seed, 0, r), reward_params
            )
            collisions.append(metrics.collision_timesteps)
        cv = cv_pct(collisions)
        rows.append({
            "theta": float(theta),
            "cv_pct": cv,
            "collisions_mean": float(np.mean(collisions)),
            "collisions_std": float(np.std(collisions)),
        })
        if cv < best_cv:
            best_cv = cv
            best_theta = float(theta)
    return SweepResult(rows=rows, best_theta=best_theta)
