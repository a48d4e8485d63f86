"""Discrete-time simulator of n containers filling stochastically and sharing one press.

Each container accumulates volume as a random walk with drift and must be
emptied onto a single shared processing unit (PU). Emptying a container of
volume v occupies the PU for a volume-proportional busy time plus a constant
conveyor offset; requests made while the PU is busy are lost and penalized.
A container breaching the overflow limit terminates the episode.

State transitions are pure functions: ``step`` returns a fresh state, so a
trajectory is fully determined by (config, seed, action sequence). All
randomness flows through numpy ``Generator`` objects (PCG64) derived from
integer seeds via ``derive_rng``, which keeps trajectories bitwise
reproducible for a fixed numpy version.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .rewards import compute_reward

DEFAULT_OVERFLOW_LIMIT = 40.0
DEFAULT_EPISODE_LENGTH = 600
DEFAULT_STEP_SECONDS = 60.0
DEFAULT_PENALTY = -1.0

# Reward for the step on which any container breaches the overflow limit.
# Dominates the best achievable single-empty reward (about 1) by an order
# of magnitude without destabilizing value scales.
OVERFLOW_PENALTY = -10.0

# An empty request on a container holding less than this counts as invalid,
# so the PU never runs a near-zero-volume job.
MIN_EMPTY_VOLUME = 1.0

# A container counts as "near its peak" for collision bookkeeping once its
# volume is within this margin of the higher ideal volume.
DEFAULT_PROXIMITY_MARGIN = 3.0

CONFIG_FILE_VERSION = 1


def derive_rng(*entropy: int) -> np.random.Generator:
    """PCG64 generator derived from a tuple of integers.

    Distinct tuples give independent streams; the same tuple always gives
    the same stream. Used everywhere a sub-stream is split off a master
    seed (per-repetition, per-episode, per-role).
    """
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass(frozen=True)
class ContainerSpec:
    """Static description of one container.

    ``alpha`` and ``sigma`` are the drift and noise of the fill process in
    volume units per timestep; ``peak_low``/``peak_high`` are the two ideal
    emptying volumes; ``busy_slope``/``busy_offset`` parameterize the PU
    busy time for a job from this container.
    """

    id: int
    alpha: float
    sigma: float
    peak_low: float
    peak_high: float
    busy_slope: float
    busy_offset: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"container {self.id}: alpha must be positive")
        if self.sigma < 0:
            raise ValueError(f"container {self.id}: sigma must be nonnegative")
        if not 0 < self.peak_low < self.peak_high:
            raise ValueError(
                f"container {self.id}: need 0 < peak_low < peak_high, "
                f"got {self.peak_low}, {self.peak_high}"
            )
        if self.busy_slope <= 0:
            raise ValueError(f"container {self.id}: busy_slope must be positive")
        if self.busy_offset < 0:
            raise ValueError(f"container {self.id}: busy_offset must be nonnegative")


@dataclass(frozen=True)
class FacilityConfig:
    """Immutable description of a facility instance."""

    containers: tuple[ContainerSpec, ...]
    overflow_limit: float = DEFAULT_OVERFLOW_LIMIT
    episode_length: int = DEFAULT_EPISODE_LENGTH
    step_seconds: float = DEFAULT_STEP_SECONDS
    penalty: float = DEFAULT_PENALTY

    def __post_init__(self):
        if not self.containers:
            raise ValueError("facility needs at least one container")
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        if self.penalty >= 0:
            raise ValueError("penalty must be negative")
        for spec in self.containers:
            if spec.peak_high >= self.overflow_limit:
                raise ValueError(
                    f"container {spec.id}: peak_high {spec.peak_high} must stay "
                    f"below the overflow limit {self.overflow_limit}"
                )

    @property
    def n(self) -> int:
        return len(self.containers)

    @cached_property
    def peak_lows(self) -> np.ndarray:
        return np.array([c.peak_low for c in self.containers])

    @cached_property
    def peak_highs(self) -> np.ndarray:
        return np.array([c.peak_high for c in self.containers])

    @cached_property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.containers])

    @cached_property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.containers])

    @cached_property
    def max_busy_time(self) -> int:
        """Longest possible job: a container emptied right at the overflow limit."""
        return max(busy_time(c, self.overflow_limit) for c in self.containers)


@dataclass(eq=False)
class FacilityState:
    """Mutable simulation state: per-container volumes, PU countdown, clock.

    ``pu_counter`` is the number of timesteps until the PU is free again;
    ``pu_job`` is the id of the container being processed, present exactly
    while ``pu_counter > 0``.
    """

    volumes: np.ndarray
    pu_counter: int = 0
    pu_job: Optional[int] = None
    t: int = 0


@dataclass(frozen=True)
class StepInfo:
    invalid_action: bool = False
    emptied_container: Optional[int] = None
    emptied_volume: Optional[float] = None
    overflowed_container: Optional[int] = None
    collision_now: bool = False


@dataclass(frozen=True)
class StepOutcome:
    next_state: FacilityState
    reward: float
    terminated: bool
    info: StepInfo


def fill_step(v: float, alpha: float, sigma: float, rng: np.random.Generator) -> float:
    """One fill update: random walk with drift, clipped at zero.

    Returns max(0, v + alpha + eps) with eps ~ Normal(0, sigma^2). Always
    consumes exactly one normal draw so stream alignment does not depend
    on sigma.
    """
    return max(0.0, v + alpha + rng.normal(0.0, sigma))


def busy_time(spec: ContainerSpec, v: float) -> int:
    """PU busy time for emptying volume ``v`` from this container.

    Volume-proportional processing plus the constant conveyor transport
    offset, rounded up to whole timesteps; always at least 1.
    """
    if v <= 0:
        raise ValueError(f"busy_time needs a positive volume, got {v}")
    return max(1, math.ceil(spec.busy_slope * v + spec.busy_offset))


def reset(
    config: FacilityConfig,
    seed: int,
    init_volumes: Optional[Sequence[float]] = None,
) -> FacilityState:
    """Fresh state at t = 0 with a free PU.

    Without explicit ``init_volumes``, each container starts uniformly in
    [0, peak_low) using a generator derived from ``seed``.
    """
    n = config.n
    if init_volumes is not None:
        vols = np.asarray(init_volumes, dtype=float)
        if vols.shape != (n,):
            raise ValueError(f"init_volumes must have length {n}, got shape {vols.shape}")
        if np.any(vols < 0) or np.any(vols >= config.overflow_limit):
            raise ValueError("init_volumes must lie in [0, overflow_limit)")
        vols = vols.copy()
    else:
        rng = derive_rng(seed)
        vols = np.array([rng.uniform(0.0, c.peak_low) for c in config.containers])
    return FacilityState(volumes=vols, pu_counter=0, pu_job=None, t=0)


def is_collision_state(
    state: FacilityState,
    config: FacilityConfig,
    proximity_margin: float = DEFAULT_PROXIMITY_MARGIN,
) -> bool:
    """True when the PU is busy while two or more containers sit near or
    above their higher ideal volumes."""
    if state.pu_counter <= 0:
        return False
    near = np.count_nonzero(state.volumes >= config.peak_highs - proximity_margin)
    return near >= 2


def observation(state: FacilityState, config: FacilityConfig) -> np.ndarray:
    """Fixed-length feature vector of length 3n + 1.

    Layout: n volumes normalized by the overflow limit, the PU countdown
    normalized by the facility's maximum busy time, then (peak_low,
    peak_high) per container normalized by the overflow limit.
    """
    limit = config.overflow_limit
    obs = np.empty(3 * config.n + 1)
    obs[: config.n] = state.volumes / limit
    obs[config.n] = state.pu_counter / config.max_busy_time
    obs[config.n + 1 :: 2] = config.peak_lows / limit
    obs[config.n + 2 :: 2] = config.peak_highs / limit
    return obs


def step(
    state: FacilityState,
    action: int,
    config: FacilityConfig,
    reward_params,
    rng: np.random.Generator,
) -> StepOutcome:
    """Advance the facility by one timestep.

    Processing order: the action is resolved first (an empty request on a
    busy PU or an under-filled container is invalid and earns the penalty;
    a valid empty zeroes the container and loads the PU), then every
    container fills, the PU countdown ticks, and the clock advances. If any
    volume then exceeds the overflow limit the episode terminates and the
    step's reward is replaced by the overflow penalty. Reaching the episode
    horizon also terminates, without a penalty.
    """
    n = config.n
    if not 0 <= action <= n:
        raise ValueError(f"action must be in 0..{n}, got {action}")
    if state.t >= config.episode_length:
        raise ValueError("episode already finished; reset before stepping")

    volumes = state.volumes.copy()
    pu_counter = state.pu_counter
    pu_job = state.pu_job
    reward = 0.0
    invalid = False
    emptied_container = None
    emptied_volume = None

    if action != 0:
        spec = config.containers[action - 1]
        v = float(volumes[action - 1])
        valid = pu_counter == 0 and v >= MIN_EMPTY_VOLUME
        reward = compute_reward(reward_params, v, action, valid, (spec.peak_low, spec.peak_high))
        if valid:
            emptied_container = action
            emptied_volume = v
            volumes[action - 1] = 0.0
            pu_counter = busy_time(spec, v)
            pu_job = action
        else:
            invalid = True

    for i, spec in enumerate(config.containers):
        volumes[i] = fill_step(volumes[i], spec.alpha, spec.sigma, rng)
    if pu_counter > 0:
        pu_counter -= 1
        if pu_counter == 0:
            pu_job = None
    t = state.t + 1

    overflowed = None
    for i in range(n):
        if volumes[i] > config.overflow_limit:
            overflowed = i + 1
            break
    if overflowed is not None:
        reward = OVERFLOW_PENALTY
    terminated = overflowed is not None or t >= config.episode_length

    next_state = FacilityState(volumes=volumes, pu_counter=pu_counter, pu_job=pu_job, t=t)
    info = StepInfo(
        invalid_action=invalid,
        emptied_container=emptied_container,
        emptied_volume=emptied_volume,
        overflowed_container=overflowed,
        collision_now=is_collision_state(next_state, config),
    )
    return StepOutcome(next_state=next_state, reward=float(reward), terminated=terminated, info=info)


def default_facility(n: int, seed: Optional[int] = None) -> FacilityConfig:
    """Standard n-container facility ("<n>b1p").

    Fill rates are spread log-uniformly over [0.13, 0.32] volume units per
    step with noise at 10% of the rate; higher peaks land in [24, 30]
    (60-75% of the 40-unit limit) and lower peaks in [12, 16]. The PU
    processes 0.5 steps per volume unit plus a 3-step conveyor offset, so
    one high-peak empty occupies roughly 15 steps.

    The rate band is deliberately narrow and hot: at n = 7 total inflow is
    about 90% of what the press can serve with high-peak empties, so
    several containers routinely converge on their peaks while the press
    is tied up. A peak-triggered greedy scheduler spends well over a
    quarter of the episode in collision states here, which is the
    contention regime this toolkit is about; wider, cooler rate spreads
    produce facilities that a trained scheduler can keep collision-free,
    leaving the collision machinery nothing to do. The draw is seeded by
    ``1000 + n`` unless overridden, so each size names a fixed facility.
    """
    if n < 1:
        raise ValueError("need at least one container")
    rng = derive_rng(1000 + n if seed is None else seed)
    containers = []
    for i in range(n):
        alpha = float(np.exp(rng.uniform(np.log(0.13), np.log(0.32))))
        peak_high = float(rng.uniform(24.0, 30.0))
        peak_low = float(rng.uniform(12.0, 16.0))
        containers.append(
            ContainerSpec(
                id=i + 1,
                alpha=alpha,
                sigma=0.1 * alpha,
                peak_low=peak_low,
                peak_high=peak_high,
                busy_slope=0.5,
                busy_offset=3.0,
            )
        )
    return FacilityConfig(containers=tuple(containers))


# --- config file I/O -------------------------------------------------------

def facility_to_dict(config: FacilityConfig) -> dict:
    return {
        "version": CONFIG_FILE_VERSION,
        "overflow_limit": config.overflow_limit,
        "episode_length": config.episode_length,
        "step_seconds": config.step_seconds,
        "penalty": config.penalty,
        "containers": [
            {
                "id": c.id,
                "alpha": c.alpha,
                "sigma": c.sigma,
                "peak_low": c.peak_low,
                "peak_high": c.peak_high,
                "busy_slope": c.busy_slope,
                "busy_offset": c.busy_offset,
            }
            for c in config.containers
        ],
    }


def facility_from_dict(data: dict) -> FacilityConfig:
    if not isinstance(data, dict) or "containers" not in data:
        raise ValueError("facility config must be an object with a 'containers' list")
    version = data.get("version", CONFIG_FILE_VERSION)
    if version != CONFIG_FILE_VERSION:
        raise ValueError(f"unsupported facility config version {version}")
    try:
        containers = tuple(
            ContainerSpec(
                id=int(c["id"]),
                alpha=float(c["alpha"]),
                sigma=float(c["sigma"]),
                peak_low=float(c["peak_low"]),
                peak_high=float(c["peak_high"]),
                busy_slope=float(c["busy_slope"]),
                busy_offset=float(c.get("busy_offset", 0.0)),
            )
            for c in data["containers"]
        )
        return FacilityConfig(
            containers=containers,
            overflow_limit=float(data.get("overflow_limit", DEFAULT_OVERFLOW_LIMIT)),
            episode_length=int(data.get("episode_length", DEFAULT_EPISODE_LENGTH)),
            step_seconds=float(data.get("step_seconds", DEFAULT_STEP_SECONDS)),
            penalty=float(data.get("penalty", DEFAULT_PENALTY)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed facility config: {exc}") from exc


def save_facility(path, config: FacilityConfig, reward_block: Optional[dict] = None) -> None:
    """Write the facility (and an optional reward-parameter block) as JSON."""
    data = facility_to_dict(config)
    if reward_block:
        data["reward"] = reward_block
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def load_facility(path) -> FacilityConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    return facility_from_dict(data)


def load_reward_block(path) -> dict:
    """Reward-parameter overrides stored alongside the facility, if any."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    block = data.get("reward", {})
    if not isinstance(block, dict):
        raise ValueError(f"{path}: 'reward' must be an object")
    return block


# --- trajectory dumps ------------------------------------------------------

def trajectory_record(action: int, outcome: StepOutcome) -> dict:
    """One JSONL record per timestep: the post-step state plus the action
    and reward that produced it."""
    s = outcome.next_state
    info = outcome.info
    return {
        "t": s.t,
        "volumes": [float(v) for v in s.volumes],
        "pu_counter": int(s.pu_counter),
        "action": int(action),
        "reward": outcome.reward,
        "flags": {
            "invalid_action": info.invalid_action,
            "emptied_container": info.emptied_container,
            "emptied_volume": info.emptied_volume,
            "overflowed_container": info.overflowed_container,
            "collision_now": info.collision_now,
            "terminated": outcome.terminated,
        },
    }


def write_trajectory(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_trajectory(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
