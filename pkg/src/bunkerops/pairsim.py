"""Offline Monte Carlo generator of labeled pairwise collision scenarios.

Two containers with randomly drawn fill parameters evolve side by side
while a scripted press empties whichever container first crosses its higher
peak. Every evolved timestep yields one supervised sample: ten features
describing the pair plus a binary label that is 1 exactly when both
containers sit within the proximity margin of (or above) their peaks while
the press is busy. The resulting dataset trains the collision classifier
used at inference time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from multiprocessing import Pool
from typing import NamedTuple

import numpy as np

from .env import DEFAULT_PROXIMITY_MARGIN, derive_rng

DATASET_VERSION = 1
N_FEATURES = 10


@dataclass(frozen=True)
class PairRolloutConfig:
    """Sampling ranges and simulation horizon for pair rollouts.

    ``pu_slope``/``pu_offset`` give the scripted press's busy time per
    emptied volume unit; ``peak_range`` is the interval the per-container
    peak volumes are drawn from (matching the default facility's higher
    peaks).

    ``ext_job_prob``/``ext_busy_range`` drive exogenous press jobs: while
    free, the press picks up an outside job with this per-step probability,
    staying busy for a uniformly drawn duration. An isolated pair whose
    press only ever serves the pair itself can never show both containers
    near their peaks while busy (whichever crossed first was just emptied),
    so the outside jobs stand in for the other containers that occupy the
    press in a full facility and create the collision states the labels
    record.
    """

    mu_range: tuple[float, float] = (0.1, 0.5)
    sigma_range: tuple[float, float] = (0.005, 0.05)
    horizon: int = 40
    repetitions: int = 100_000
    proximity_margin: float = DEFAULT_PROXIMITY_MARGIN
    pu_slope: float = 0.5
    pu_offset: float = 3.0
    peak_range: tuple[float, float] = (24.0, 30.0)
    ext_job_prob: float = 0.08
    ext_busy_range: tuple[int, int] = (8, 20)
    seed: int = 0

    def __post_init__(self):
        for name in ("mu_range", "sigma_range", "peak_range", "ext_busy_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be nondecreasing, got ({lo}, {hi})")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.repetitions < 0:
            raise ValueError("repetitions must be nonnegative")
        if not 0 <= self.ext_job_prob <= 1:
            raise ValueError("ext_job_prob must be a probability")


class PairParams(NamedTuple):
    mu_i: float
    sigma_i: float
    mu_j: float
    sigma_j: float
    peak_i: float
    peak_j: float


@dataclass
class PairTrace:
    """Snapshot trace of one rollout, one row per evolved timestep.

    ``vi``/``vj``/``pu`` are the values the label was computed from;
    ``prev_vi``/``prev_vj`` are the end-of-previous-step volumes used for
    the lag features (the end-of-step value reflects any press service, so
    it matches what a live observer would have seen).
    """

    params: PairParams
    tau: np.ndarray       # (H,) int, 1..horizon
    vi: np.ndarray        # (H,)
    vj: np.ndarray        # (H,)
    pu: np.ndarray        # (H,) int, countdown at label time
    label: np.ndarray     # (H,) int 0/1
    prev_vi: np.ndarray   # (H,)
    prev_vj: np.ndarray   # (H,)

    def __len__(self) -> int:
        return self.tau.shape[0]


def sample_pair_params(config: PairRolloutConfig, rng: np.random.Generator) -> PairParams:
    """Draw fill-rate parameters and peaks for one container pair."""
    mu_i, mu_j = rng.uniform(*config.mu_range, size=2)
    sigma_i, sigma_j = rng.uniform(*config.sigma_range, size=2)
    peak_i, peak_j = rng.uniform(*config.peak_range, size=2)
    return PairParams(float(mu_i), float(sigma_i), float(mu_j), float(sigma_j),
                      float(peak_i), float(peak_j))


def simulate_pair(params: PairParams, config: PairRolloutConfig,
                  rng: np.random.Generator) -> PairTrace:
    """Evolve one pair for ``horizon`` steps under the scripted press.

    Per step: both volumes fill (random walk with drift, clipped at zero),
    the press countdown ticks, the snapshot is recorded and labeled, and
    only then does a free press either accept the container with the
    largest peak overshoot (ties to the first container) or pick up an
    exogenous job. Initial volumes are uniform in [0, peak).
    """
    H = config.horizon
    margin = config.proximity_margin
    v = np.array([rng.uniform(0.0, params.peak_i), rng.uniform(0.0, params.peak_j)])
    peaks = np.array([params.peak_i, params.peak_j])
    mus = np.array([params.mu_i, params.mu_j])
    sigmas = np.array([params.sigma_i, params.sigma_j])
    noise = rng.normal(size=(H, 2))

    tau = np.arange(1, H + 1)
    vi = np.empty(H)
    vj = np.empty(H)
    pu_arr = np.empty(H, dtype=np.int64)
    label = np.empty(H, dtype=np.int64)
    prev_vi = np.empty(H)
    prev_vj = np.empty(H)
    prev = v.copy()
    pu = 0
    for k in range(H):
        v = np.maximum(0.0, v + mus + sigmas * noise[k])
        if pu > 0:
            pu -= 1
        near = v >= peaks - margin
        vi[k], vj[k] = v
        pu_arr[k] = pu
        label[k] = 1 if (pu > 0 and near[0] and near[1]) else 0
        prev_vi[k], prev_vj[k] = prev
        if pu == 0:
            over = v - peaks
            if over[0] >= 0 or over[1] >= 0:
                c = 0 if over[0] >= over[1] else 1
                pu = max(1, math.ceil(config.pu_slope * v[c] + config.pu_offset))
                v[c] = 0.0
            elif config.ext_job_prob and rng.random() < config.ext_job_prob:
                lo, hi = config.ext_busy_range
                pu = int(rng.integers(lo, hi + 1))
        prev = v.copy()
    return PairTrace(params=params, tau=tau, vi=vi, vj=vj, pu=pu_arr,
                     label=label, prev_vi=prev_vi, prev_vj=prev_vj)


def pair_features(vi, vj, peak_i, peak_j, mu_i, sigma_i, mu_j, sigma_j,
                  prev_vi, prev_vj) -> np.ndarray:
    """The shared 10-feature layout: volumes, distances to peak, fill
    parameters, and one-step volume history. Also used by the live
    inference pipeline, so offline and online features agree exactly."""
    return np.array([
        vi, vj,
        peak_i - vi, peak_j - vj,
        mu_i, sigma_i, mu_j, sigma_j,
        prev_vi, prev_vj,
    ])


def extract_features(trace: PairTrace, tau: int) -> np.ndarray:
    """Feature vector for the trace row at timestep ``tau`` (``tau >= 1``)."""
    if tau < 1:
        raise ValueError("no lag history before the first evolved step")
    k = int(np.searchsorted(trace.tau, tau))
    if k >= len(trace) or trace.tau[k] != tau:
        raise ValueError(f"timestep {tau} not in trace")
    p = trace.params
    return pair_features(trace.vi[k], trace.vj[k], p.peak_i, p.peak_j,
                         p.mu_i, p.sigma_i, p.mu_j, p.sigma_j,
                         trace.prev_vi[k], trace.prev_vj[k])


def trace_features(trace: PairTrace) -> np.ndarray:
    """All feature rows of a trace, shape (H, 10)."""
    p = trace.params
    H = len(trace)
    out = np.empty((H, N_FEATURES))
    out[:, 0] = trace.vi
    out[:, 1] = trace.vj
    out[:, 2] = p.peak_i - trace.vi
    out[:, 3] = p.peak_j - trace.vj
    out[:, 4] = p.mu_i
    out[:, 5] = p.sigma_i
    out[:, 6] = p.mu_j
    out[:, 7] = p.sigma_j
    out[:, 8] = trace.prev_vi
    out[:, 9] = trace.prev_vj
    return out


def run_repetition(config: PairRolloutConfig, rep: int) -> PairTrace:
    """One seeded rollout; the generator is derived from (seed, rep) so the
    sample multiset is independent of worker count and execution order."""
    rng = derive_rng(config.seed, rep)
    params = sample_pair_params(config, rng)
    return simulate_pair(params, config, rng)


def _repetition_lines(args: tuple[PairRolloutConfig, int, int]) -> tuple[list[str], int]:
    config, lo, hi = args
    lines = []
    positives = 0
    for rep in range(lo, hi):
        trace = run_repetition(config, rep)
        feats = trace_features(trace)
        positives += int(trace.label.sum())
        for k in range(len(trace)):
            rec = {"f": [float(x) for x in feats[k]], "y": int(trace.label[k]),
                   "rep": rep, "tau": int(trace.tau[k])}
            lines.append(json.dumps(rec))
    return lines, positives


def generate_dataset(config: PairRolloutConfig, path, jobs: int = 1) -> dict:
    """Stream all repetition samples to a JSONL file, one object per sample.

    The sidecar ``<path>.summary.json`` records the class balance and the
    generating configuration. Output bytes depend only on the config, not
    on ``jobs``: repetitions are seeded by index and written in order.
    """
    chunk = 2000
    tasks = [(config, lo, min(lo + chunk, config.repetitions))
             for lo in range(0, config.repetitions, chunk)]
    n_samples = 0
    positives = 0
    with open(path, "w", encoding="utf-8") as f:
        if jobs > 1 and len(tasks) > 1:
            with Pool(jobs) as pool:
                for lines, pos in pool.imap(_repetition_lines, tasks):
                    for line in lines:
                        f.write(line + "\n")
                    n_samples += len(lines)
                    positives += pos
        else:
            for task in tasks:
                lines, pos = _repetition_lines(task)
                for line in lines:
                    f.write(line + "\n")
                n_samples += len(lines)
                positives += pos
    summary = {
        "version": DATASET_VERSION,
        "n_samples": n_samples,
        "n_positive": positives,
        "positive_rate": positives / n_samples if n_samples else 0.0,
        "repetitions": config.repetitions,
        "horizon": config.horizon,
        "seed": config.seed,
    }
    with open(str(path) + ".summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def collect_samples(config: PairRolloutConfig) -> tuple[np.ndarray, np.ndarray]:
    """All samples as in-memory arrays (features (N, 10), labels (N,))."""
    feats = []
    labels = []
    for rep in range(config.repetitions):
        trace = run_repetition(config, rep)
        feats.append(trace_features(trace))
        labels.append(trace.label)
    if not feats:
        return np.empty((0, N_FEATURES)), np.empty(0, dtype=np.int64)
    return np.vstack(feats), np.concatenate(labels)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a JSONL dataset back into (features, labels) arrays."""
    feats = []
    labels = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "f" not in rec or "y" not in rec:
                raise ValueError(f"{path}: malformed dataset record")
            feats.append(rec["f"])
            labels.append(rec["y"])
    X = np.asarray(feats, dtype=float).reshape(len(feats), N_FEATURES)
    return X, np.asarray(labels, dtype=np.int64)
