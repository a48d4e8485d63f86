"""Actor-critic policy gradient with clipped-surrogate updates and a
three-stage reward curriculum.

The agent is a pair of small tanh networks: an actor mapping the facility
observation to n+1 action logits and a critic estimating the value. Updates
use the clipped surrogate objective with generalized advantage estimation,
an entropy bonus, and an early stop when the mean KL divergence from the
collection policy exceeds a limit. Curriculum training runs three stages
with the reward regime swapped between them, freezing the actor for part of
the second stage and tightening the KL limit in the third.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .env import FacilityConfig, FacilityState, derive_rng, observation, reset, step
from .nn import MLP, Adam, log_softmax
from .rewards import Phase, RewardParams, reward_params_for_phase

POLICY_FILE_VERSION = 1
HIDDEN_SIZES = (64, 64)


@dataclass
class PolicyParams:
    """Actor and critic parameter sets."""

    actor: MLP
    critic: MLP

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, rng: np.random.Generator,
             hidden=HIDDEN_SIZES) -> "PolicyParams":
        actor = MLP.init((obs_dim, *hidden, n_actions), rng, out_gain=0.01)
        critic = MLP.init((obs_dim, *hidden, 1), rng, out_gain=1.0)
        return cls(actor=actor, critic=critic)

    @property
    def obs_dim(self) -> int:
        return self.actor.in_dim

    @property
    def n_actions(self) -> int:
        return self.actor.out_dim

    def copy(self) -> "PolicyParams":
        return PolicyParams(actor=self.actor.copy(), critic=self.critic.copy())


@dataclass(frozen=True)
class PPOConfig:
    """Update hyperparameters. The long credit horizon (gamma 0.995,
    lambda 0.98) lets the overflow penalty reach the no-op decisions that
    caused it, typically 80+ steps earlier."""

    gamma: float = 0.995
    gae_lambda: float = 0.98
    clip_eps: float = 0.2
    learning_rate: float = 1e-3
    epochs_per_update: int = 6
    minibatch_size: int = 256
    rollout_steps: int = 1024
    kl_limit: float = 0.05
    freeze_actor: bool = False
    entropy_coef: float = 0.02
    value_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.kl_limit <= 0:
            raise ValueError("kl_limit must be positive")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Step budgets for the three curriculum stages, the fraction of stage 2
    spent with the actor frozen, and the tightened stage-3 KL limit."""

    phase_budgets: tuple[int, int, int] = (180_000, 75_000, 45_000)
    phase2_freeze_fraction: float = 0.5
    phase3_kl_limit: float = 0.01

    def __post_init__(self):
        if any(b <= 0 for b in self.phase_budgets):
            raise ValueError("phase budgets must be positive")
        if not 0 <= self.phase2_freeze_fraction <= 1:
            raise ValueError("freeze fraction must be in [0, 1]")
        if self.phase3_kl_limit <= 0:
            raise ValueError("phase3_kl_limit must be positive")

    @classmethod
    def from_total(cls, total_steps: int, **kwargs) -> "CurriculumSchedule":
        """Split a total step budget 60/25/15 across the stages."""
        b1 = int(round(total_steps * 0.60))
        b2 = int(round(total_steps * 0.25))
        b3 = max(1, total_steps - b1 - b2)
        return cls(phase_budgets=(b1, b2, b3), **kwargs)

    @property
    def total_steps(self) -> int:
        return sum(self.phase_budgets)


@dataclass
class Trajectory:
    """One rollout batch; advantages/returns are filled in by ``compute_gae``."""

    obs: np.ndarray          # (T, obs_dim)
    actions: np.ndarray      # (T,) int
    rewards: np.ndarray      # (T,)
    dones: np.ndarray        # (T,) float 0/1
    values: np.ndarray       # (T + 1,) includes bootstrap value
    logp_full: np.ndarray    # (T, n_actions) log-probs under the collection policy
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    def compute_gae(self, gamma: float, lam: float) -> None:
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, gamma, lam)


def act(params: PolicyParams, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Sample an action from the categorical policy; returns (action, log-prob)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.obs_dim,):
        raise ValueError(f"observation must have shape ({params.obs_dim},), got {obs.shape}")
    logits = params.actor(obs[None, :])[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    u = rng.random()
    action = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    action = min(action, probs.size - 1)
    return action, float(logp[action])


def gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation.

    ``values`` carries one extra trailing entry (the bootstrap value of the
    state after the last step); ``dones[t] = 1`` marks a transition that
    ended its episode, which masks the bootstrap. Returns are advantages
    plus values.
    """
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    if dones.shape[0] != T or values.shape[0] != T + 1:
        raise ValueError("rewards/dones must have length T and values length T+1")
    adv = np.empty(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:T]


# --- losses and gradients ---------------------------------------------------

def actor_loss_and_grads(
    actor: MLP,
    obs: np.ndarray,
    actions: np.ndarray,
    old_logp_act: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
) -> tuple[float, float, float, list[np.ndarray]]:
    """Clipped-surrogate actor loss (to minimize) and its weight gradients.

    Returns (loss, mean surrogate, mean entropy, grads). The loss is
    -mean(min(ratio*A, clip(ratio)*A)) - entropy_coef * mean(entropy).
    """
    B = obs.shape[0]
    logits, cache = actor.forward(obs)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    idx = np.arange(B)
    logp_act = logp[idx, actions]
    ratio = np.exp(logp_act - old_logp_act)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    entropy = -(probs * logp).sum(axis=1)
    loss = -surrogate.mean() - entropy_coef * entropy.mean()

    # d(surrogate)/d(ratio) is the advantage wherever the unclipped branch is
    # active (ties included); the clipped branch is flat in ratio there.
    active = (unclipped <= clipped).astype(float)
    g_act = advantages * active * ratio                      # d surr / d logp_act
    d_logits = -(1.0 / B) * g_act[:, None] * (np.eye(probs.shape[1])[actions] - probs)
    d_logits += (entropy_coef / B) * probs * (logp + entropy[:, None])
    grads = actor.backward(d_logits, cache)
    return float(loss), float(surrogate.mean()), float(entropy.mean()), grads


def critic_loss_and_grads(
    critic: MLP,
    obs: np.ndarray,
    returns: np.ndarray,
    value_coef: float,
) -> tuple[float, list[np.ndarray]]:
    """Squared-error value loss ``value_coef * mean((v - ret)^2)`` and grads."""
    B = obs.shape[0]
    v, cache = critic.forward(obs)
    v = v[:, 0]
    err = v - returns
    loss = value_coef * float(np.mean(err**2))
    d_v = (2.0 * value_coef / B) * err
    grads = critic.backward(d_v[:, None], cache)
    return loss, grads


def mean_kl(old_logp_full: np.ndarray, new_logp_full: np.ndarray) -> float:
    """Mean KL(old || new) over the batch of categorical distributions."""
    p_old = np.exp(old_logp_full)
    return float((p_old * (old_logp_full - new_logp_full)).sum(axis=1).mean())


class PPOOptimizer:
    """Adam pair for the actor and critic weight lists."""

    def __init__(self, learning_rate: float):
        self.actor = Adam(learning_rate)
        self.critic = Adam(learning_rate)


@dataclass
class UpdateStats:
    mean_kl: float
    clip_fraction: float
    actor_loss: float
    value_loss: float
    entropy: float
    epochs_run: int


def ppo_update(
    params: PolicyParams,
    traj: Trajectory,
    config: PPOConfig,
    rng: Optional[np.random.Generator] = None,
    optimizer: Optional[PPOOptimizer] = None,
) -> tuple[PolicyParams, UpdateStats]:
    """One policy-gradient update over a rollout.

    Runs ``epochs_per_update`` shuffled minibatch passes, aborting remaining
    epochs once the mean KL from the collection policy exceeds the limit.
    With ``freeze_actor`` only the critic is touched; the returned actor
    weights are bitwise identical to the input.
    """
    if traj.advantages is None or traj.returns is None:
        raise ValueError("trajectory needs advantages; call compute_gae first")
    if not np.all(np.isfinite(traj.advantages)):
        raise ValueError("non-finite advantages in trajectory")
    T = len(traj)
    rng = rng if rng is not None else derive_rng(config.seed, 3)
    optimizer = optimizer if optimizer is not None else PPOOptimizer(config.learning_rate)

    new = params.copy()
    adv = traj.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    old_logp_act = traj.logp_full[np.arange(T), traj.actions]

    actor_loss = value_loss = entropy = 0.0
    epochs_run = 0
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(T)
        for lo in range(0, T, config.minibatch_size):
            mb = perm[lo : lo + config.minibatch_size]
            if not config.freeze_actor:
                actor_loss, _, entropy, a_grads = actor_loss_and_grads(
                    new.actor, traj.obs[mb], traj.actions[mb], old_logp_act[mb],
                    adv[mb], config.clip_eps, config.entropy_coef,
                )
                _check_finite(a_grads, "actor")
                optimizer.actor.step(new.actor.weights, a_grads)
            value_loss, c_grads = critic_loss_and_grads(
                new.critic, traj.obs[mb], traj.returns[mb], config.value_coef
            )
            _check_finite(c_grads, "critic")
            optimizer.critic.step(new.critic.weights, c_grads)
        epochs_run += 1
        if not config.freeze_actor:
            kl = mean_kl(traj.logp_full, log_softmax(new.actor(traj.obs)))
            if kl > config.kl_limit:
                break

    new_logp = log_softmax(new.actor(traj.obs))
    ratio = np.exp(new_logp[np.arange(T), traj.actions] - old_logp_act)
    stats = UpdateStats(
        mean_kl=mean_kl(traj.logp_full, new_logp),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)),
        actor_loss=actor_loss,
        value_loss=value_loss,
        entropy=entropy,
        epochs_run=epochs_run,
    )
    return new, stats


def _check_finite(grads: list[np.ndarray], which: str) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise RuntimeError(
                f"non-finite {which} gradient encountered "
                f"(max |g| = {np.nanmax(np.abs(g))}); check reward scales"
            )


# --- rollout collection and training loops ----------------------------------

def collect_rollout(
    facility: FacilityConfig,
    reward_params: RewardParams,
    params: PolicyParams,
    config: PPOConfig,
    state: Optional[FacilityState],
    env_rng: np.random.Generator,
    act_rng: np.random.Generator,
) -> tuple[Trajectory, Optional[FacilityState]]:
    """Collect ``rollout_steps`` transitions, resetting the facility whenever
    an episode ends. Returns the batch and the live state to continue from."""
    T = config.rollout_steps
    obs_dim = params.obs_dim
    obs_buf = np.empty((T, obs_dim))
    act_buf = np.empty(T, dtype=np.int64)
    rew_buf = np.empty(T)
    done_buf = np.empty(T)

    cur = state
    for t in range(T):
        if cur is None:
            cur = reset(facility, 0, init_volumes=_draw_init(facility, env_rng))
        o = observation(cur, facility)
        a, _ = act(params, o, act_rng)
        out = step(cur, a, facility, reward_params, env_rng)
        obs_buf[t] = o
        act_buf[t] = a
        rew_buf[t] = out.reward
        done_buf[t] = 1.0 if out.terminated else 0.0
        cur = None if out.terminated else out.next_state

    if cur is None:
        bootstrap_obs = np.zeros(obs_dim)  # masked out by the done flag
    else:
        bootstrap_obs = observation(cur, facility)
    values = params.critic(np.vstack([obs_buf, bootstrap_obs[None, :]]))[:, 0]
    logp_full = log_softmax(params.actor(obs_buf))
    traj = Trajectory(
        obs=obs_buf, actions=act_buf, rewards=rew_buf, dones=done_buf,
        values=values, logp_full=logp_full,
    )
    return traj, cur


def _draw_init(facility: FacilityConfig, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(0.0, c.peak_low) for c in facility.containers])


@dataclass
class TrainResult:
    params: PolicyParams
    log: list[dict] = field(default_factory=list)

    def phase_markers(self) -> list[dict]:
        return [row for row in self.log if row.get("event") == "phase_start"]


def _train_phases(
    config: PPOConfig,
    facility: FacilityConfig,
    phases: list[tuple[RewardParams, int, float, float]],
) -> TrainResult:
    """Shared training loop: a list of (reward regime, step budget,
    freeze fraction, KL limit) stages run back to back on one agent."""
    master = np.random.SeedSequence(config.seed)
    init_rng, env_rng, act_rng, update_rng = (np.random.default_rng(s) for s in master.spawn(4))
    obs_dim = 3 * facility.n + 1
    params = PolicyParams.init(obs_dim, facility.n + 1, init_rng)
    optimizer = PPOOptimizer(config.learning_rate)
    state: Optional[FacilityState] = None
    log: list[dict] = []
    global_step = 0

    for phase_idx, (reward_params, budget, freeze_fraction, kl_limit) in enumerate(phases, 1):
        log.append({"event": "phase_start", "step": global_step, "phase": int(reward_params.phase)})
        n_updates = max(1, math.ceil(budget / config.rollout_steps))
        freeze_until = freeze_fraction * n_updates
        for u in range(n_updates):
            traj, state = collect_rollout(
                facility, reward_params, params, config, state, env_rng, act_rng
            )
            traj.compute_gae(config.gamma, config.gae_lambda)
            update_cfg = replace(config, freeze_actor=u < freeze_until, kl_limit=kl_limit)
            params, stats = ppo_update(params, traj, update_cfg, rng=update_rng, optimizer=optimizer)
            global_step += config.rollout_steps
            log.append({
                "event": "update",
                "step": global_step,
                "phase": int(reward_params.phase),
                "mean_reward": float(traj.rewards.mean()),
                "mean_kl": stats.mean_kl,
                "clip_fraction": stats.clip_fraction,
            })
    return TrainResult(params=params, log=log)


def train_curriculum(
    config: PPOConfig,
    facility: FacilityConfig,
    schedule: CurriculumSchedule,
    reward_overrides: Optional[dict] = None,
) -> TrainResult:
    """Three-stage curriculum: unimodal, then multimodal with the actor
    frozen for the leading fraction of the stage, then the strict step
    reward under the tightened KL limit. ``reward_overrides`` (e.g. from a
    facility config file's reward block) adjust the regime parameters."""
    pen = facility.penalty
    ov = reward_overrides or {}
    phases = [
        (reward_params_for_phase(Phase.UNIMODAL, pen, **ov), schedule.phase_budgets[0],
         0.0, config.kl_limit),
        (reward_params_for_phase(Phase.MULTIMODAL, pen, **ov), schedule.phase_budgets[1],
         schedule.phase2_freeze_fraction, config.kl_limit),
        (reward_params_for_phase(Phase.STEP, pen, **ov), schedule.phase_budgets[2], 0.0,
         schedule.phase3_kl_limit),
    ]
    return _train_phases(config, facility, phases)


def train_naive(
    config: PPOConfig,
    facility: FacilityConfig,
    schedule: CurriculumSchedule,
    reward_overrides: Optional[dict] = None,
) -> TrainResult:
    """Single-stage baseline: the multimodal reward for the schedule's full
    combined budget, so both trainings consume the same number of steps."""
    ov = reward_overrides or {}
    phases = [
        (reward_params_for_phase(Phase.MULTIMODAL, facility.penalty, **ov),
         schedule.total_steps, 0.0, config.kl_limit),
    ]
    return _train_phases(config, facility, phases)


# --- persistence -------------------------------------------------------------

def save_policy(path, params: PolicyParams, extra: Optional[dict] = None) -> None:
    """Write weights as versioned JSON.

    Layout: per-network layer sizes, then one flat number list per network
    holding each layer's weight matrix in row-major order followed by its
    bias vector, in declaration order.
    """
    data = {
        "version": POLICY_FILE_VERSION,
        "kind": "policy",
        "actor_sizes": list(params.actor.sizes),
        "critic_sizes": list(params.critic.sizes),
        "actor": params.actor.flat().tolist(),
        "critic": params.critic.flat().tolist(),
    }
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
        f.write("\n")


def load_policy(path) -> PolicyParams:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or data.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy weight file")
    if data.get("version") != POLICY_FILE_VERSION:
        raise ValueError(f"{path}: unsupported policy file version {data.get('version')}")
    try:
        actor = MLP.init(data["actor_sizes"], derive_rng(0))
        actor.set_flat(np.asarray(data["actor"], dtype=float))
        critic = MLP.init(data["critic_sizes"], derive_rng(0))
        critic.set_flat(np.asarray(data["critic"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed policy file: {exc}") from exc
    return PolicyParams(actor=actor, critic=critic)


TRAIN_LOG_FIELDS = ["event", "step", "phase", "mean_reward", "mean_kl", "clip_fraction"]


def write_training_log(path, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_FIELDS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: _fmt(row.get(k, "")) for k in TRAIN_LOG_FIELDS})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
