"""Inference-time override of no-op actions under pairwise collision risk.

The trained policy acts first. Non-zero actions pass through untouched; on
a no-op, every near-peak container is scored by its worst pairwise collision
probability from the offline classifier, and the riskiest one is force-
emptied when its score clears the threshold. Overriding only no-ops leaves
the policy's learned emptying behavior intact, and classifier calls happen
at most once per no-op, n(n-1)/2 pair evaluations each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import FacilityConfig, FacilityState, observation
from .gbdt import BoostedEnsemble
from .pairsim import pair_features
from .ppo import PolicyParams, act


@dataclass(frozen=True)
class OverrideConfig:
    """``theta`` is the probability threshold an override must clear;
    ``delta`` is the volume margin below a container's higher peak at which
    it becomes an override candidate. ``require_pu_free`` additionally gates
    overrides on a free press, since a forced empty against a busy press
    would be lost and penalized."""

    theta: float = 0.5
    delta: float = 3.0
    require_pu_free: bool = True

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must be in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass
class RiskAssessment:
    """Pairwise probability matrix plus the candidate set and scores used by
    one override decision. ``candidates``/``chosen`` hold container ids
    (1-based, matching actions)."""

    pairwise: np.ndarray
    candidates: list[int]
    scores: dict[int, float]
    chosen: Optional[int] = None


def pairwise_risk(
    state: FacilityState,
    config: FacilityConfig,
    ensemble: BoostedEnsemble,
    prev_volumes: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Symmetric matrix of collision probabilities for all container pairs.

    Features mirror the offline pair dataset exactly: live volumes, distance
    to each container's higher peak, the configured fill parameters, and the
    previous step's volumes (backfilled with the current ones at episode
    start). One classifier call per unordered pair, mirrored into both
    triangle entries; the diagonal stays zero and is never read.
    """
    n = config.n
    v = state.volumes
    prev = v if prev_volumes is None else np.asarray(prev_volumes, dtype=float)
    matrix = np.zeros((n, n))
    if n < 2:
        return matrix
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    feats = np.empty((len(pairs), 10))
    for k, (i, j) in enumerate(pairs):
        ci, cj = config.containers[i], config.containers[j]
        feats[k] = pair_features(
            v[i], v[j], ci.peak_high, cj.peak_high,
            ci.alpha, ci.sigma, cj.alpha, cj.sigma,
            prev[i], prev[j],
        )
    probs = ensemble.predict_proba(feats)
    for k, (i, j) in enumerate(pairs):
        matrix[i, j] = matrix[j, i] = probs[k]
    return matrix


def risk_score(i: int, matrix: np.ndarray) -> float:
    """A container's risk is its worst pairing: max over j != i of P[i, j]."""
    n = matrix.shape[0]
    if n < 2:
        return 0.0
    row = np.delete(matrix[i], i)
    return float(row.max())


def assess(
    state: FacilityState,
    config: FacilityConfig,
    ensemble: BoostedEnsemble,
    delta: float,
    prev_volumes: Optional[np.ndarray] = None,
) -> RiskAssessment:
    """Candidate set (containers within ``delta`` of their higher peak) and
    per-candidate risk scores from the pairwise matrix."""
    candidates = [
        i + 1
        for i in range(config.n)
        if state.volumes[i] >= config.containers[i].peak_high - delta
    ]
    if not candidates:
        return RiskAssessment(pairwise=np.zeros((config.n, config.n)),
                              candidates=[], scores={})
    matrix = pairwise_risk(state, config, ensemble, prev_volumes)
    scores = {c: risk_score(c - 1, matrix) for c in candidates}
    return RiskAssessment(pairwise=matrix, candidates=candidates, scores=scores)


def decide(
    state: FacilityState,
    config: FacilityConfig,
    policy: PolicyParams,
    ensemble: BoostedEnsemble,
    override_cfg: OverrideConfig,
    rng: np.random.Generator,
    prev_volumes: Optional[np.ndarray] = None,
) -> int:
    """Final action for one timestep.

    Samples the policy; a non-zero proposal is accepted as-is. A no-op is
    overridden with the highest-risk near-peak container when that risk
    reaches ``theta`` (ties resolve to the lowest container id, and the
    press-free guard applies if configured); otherwise the no-op stands.
    """
    action, _ = act(policy, observation(state, config), rng)
    if action != 0:
        return action
    risk = assess(state, config, ensemble, override_cfg.delta, prev_volumes)
    if not risk.candidates:
        return 0
    best = max(risk.candidates, key=lambda c: (risk.scores[c], -c))
    risk.chosen = best
    if risk.scores[best] >= override_cfg.theta:
        if override_cfg.require_pu_free and state.pu_counter > 0:
            return 0
        return best
    return 0
