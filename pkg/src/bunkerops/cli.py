"""Command-line entry point tying the toolkit into reproducible runs.

Subcommands: simulate | train | gen-data | train-cm | evaluate | sweep.
Every command derives all randomness from one master seed, writes a run
manifest next to its outputs, and stamps the manifest hash into every file
it produces. Exit codes: 0 success, 1 internal error, 2 usage/input error.

The default output directory is ``$BUNKEROPS_OUT`` or ``./out``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .env import (
    default_facility,
    load_facility,
    load_reward_block,
    write_trajectory,
)
from .gbdt import CMTrainConfig, load_cm, save_cm, train_cm
from .harness import (
    MissingArtifactError,
    evaluate_method,
    run_episode,
    threshold_sweep,
)
from .manifest import RunManifest, file_sha256
from .override import OverrideConfig
from .pairsim import PairRolloutConfig, generate_dataset, load_dataset
from .ppo import (
    CurriculumSchedule,
    PPOConfig,
    act,
    load_policy,
    save_policy,
    train_curriculum,
    train_naive,
    write_training_log,
)
from .rewards import Phase, reward_params_for_phase
from . import report as report_mod


class CliError(Exception):
    """Bad input or unusable files; maps to exit code 2."""


def default_out_dir() -> Path:
    return Path(os.environ.get("BUNKEROPS_OUT", "out"))


def _load_facility_arg(args) -> tuple:
    """(facility, label, config_sha, reward_overrides) from --config or
    --containers. The reward block of a config file (Gaussian heights and
    widths, step window) adjusts every reward regime; the phase itself is
    always selected by the curriculum, never by the file."""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            facility = load_facility(path)
            overrides = load_reward_block(path)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        return facility, path.stem, file_sha256(path), overrides
    n = args.containers
    return default_facility(n), f"{n}b1p", None, {}


def _policy_weight_path(weights_dir: Path, mode: str, seed: int) -> Path:
    return weights_dir / f"policy_{mode}_seed{seed}.json"


def _load_policy_checked(path: Path, what: str):
    if not path.is_file():
        raise CliError(f"missing {what}: {path}")
    try:
        return load_policy(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


# --- subcommands ---------------------------------------------------------

def cmd_simulate(args) -> int:
    facility, label, config_sha, reward_ov = _load_facility_arg(args)
    out = Path(args.out) if args.out else default_out_dir() / f"trajectory_{label}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.policy == "random":
        def decide_fn(state, prev, rng):
            return int(rng.integers(0, facility.n + 1))
    elif args.policy == "scripted":
        def decide_fn(state, prev, rng):
            if state.pu_counter > 0:
                return 0
            over = state.volumes - facility.peak_highs
            c = int(np.argmax(over))
            return c + 1 if over[c] >= 0 else 0
    else:
        params = _load_policy_checked(Path(args.policy), "policy weights")

        def decide_fn(state, prev, rng):
            from .env import observation
            return act(params, observation(state, facility), rng)[0]

    reward_params = reward_params_for_phase(Phase.MULTIMODAL, facility.penalty, **reward_ov)
    metrics, records = run_episode(
        facility, decide_fn, args.seed, reward_params, collect_trajectory=True
    )
    write_trajectory(out, records)
    manifest = RunManifest(command="simulate", config_path=args.config,
                           config_sha256=config_sha, containers=facility.n,
                           seeds=[args.seed], extra={"policy": args.policy},
                           out_dir=str(out.parent))
    manifest.save(out.with_suffix(out.suffix + ".manifest.json"))
    print(f"wrote {len(records)} steps to {out} "
          f"(volume processed: {metrics.total_volume_processed:.1f}, "
          f"collisions: {metrics.collision_timesteps})")
    return 0


def cmd_train(args) -> int:
    facility, label, config_sha, reward_ov = _load_facility_arg(args)
    out_dir = Path(args.out) if args.out else default_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)

    config = PPOConfig(seed=args.seed, rollout_steps=args.rollout_steps,
                       learning_rate=args.lr)
    schedule = CurriculumSchedule.from_total(args.total_steps)
    if args.mode == "curriculum":
        result = train_curriculum(config, facility, schedule, reward_overrides=reward_ov)
    else:
        result = train_naive(config, facility, schedule, reward_overrides=reward_ov)

    manifest = RunManifest(
        command="train", config_path=args.config, config_sha256=config_sha,
        containers=facility.n, seeds=[args.seed], total_steps=args.total_steps,
        phase_budgets=list(schedule.phase_budgets), extra={"mode": args.mode},
        out_dir=str(out_dir),
    )
    weight_path = _policy_weight_path(out_dir, args.mode, args.seed)
    save_policy(weight_path, result.params,
                extra={"tool_version": __version__, "manifest": manifest.hash()})
    log_path = out_dir / f"train_log_{args.mode}_seed{args.seed}.csv"
    write_training_log(log_path, result.log)
    manifest.save(out_dir / f"train_{args.mode}_seed{args.seed}.manifest.json")
    n_updates = sum(1 for row in result.log if row.get("event") == "update")
    print(f"trained {args.mode} seed {args.seed} on {label}: "
          f"{n_updates} updates -> {weight_path}")
    return 0


def cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else default_out_dir() / "pairs.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    config = PairRolloutConfig(repetitions=args.reps, horizon=args.horizon, seed=args.seed)
    summary = generate_dataset(config, out, jobs=args.jobs)
    manifest = RunManifest(command="gen-data", seeds=[args.seed],
                           extra={"repetitions": args.reps, "horizon": args.horizon},
                           out_dir=str(out.parent))
    manifest.save(out.with_suffix(out.suffix + ".manifest.json"))
    print(f"wrote {summary['n_samples']} samples to {out} "
          f"(positive rate {summary['positive_rate']:.4f})")
    return 0


def cmd_train_cm(args) -> int:
    data_path = Path(args.data)
    if not data_path.is_file():
        raise CliError(f"dataset not found: {data_path}")
    out = Path(args.out) if args.out else default_out_dir() / "collision_model.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    X, y = load_dataset(data_path)
    config = CMTrainConfig(n_trees=args.trees, max_depth=args.depth, seed=args.seed)
    try:
        model, report = train_cm(X, y, config)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    manifest = RunManifest(command="train-cm", config_sha256=file_sha256(data_path),
                           seeds=[args.seed],
                           extra={"n_trees": args.trees, "max_depth": args.depth},
                           out_dir=str(out.parent))
    save_cm(out, model, extra={"tool_version": __version__, "manifest": manifest.hash()})
    manifest.save(out.with_suffix(out.suffix + ".manifest.json"))
    print(f"trained collision model on {report['n_train']} samples "
          f"(holdout AUC {report['auc']:.4f}) -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    facility, label, config_sha, _ = _load_facility_arg(args)
    out_dir = Path(args.out) if args.out else default_out_dir() / f"eval_{label}"
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_dir = Path(args.weights_dir) if args.weights_dir else default_out_dir()
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = list(range(args.seeds))

    ensemble = None
    if "cl_cm" in methods:
        if not args.model:
            raise CliError("cl_cm evaluation needs --model")
        model_path = Path(args.model)
        if not model_path.is_file():
            raise CliError(f"collision model not found: {model_path}")
        ensemble = load_cm(model_path)

    policies = {}
    for method in methods:
        mode = "naive" if method == "naive" else "curriculum"
        for s in seeds:
            path = _policy_weight_path(weights_dir, mode, s)
            policies[(method, s)] = _load_policy_checked(
                path, f"policy for seed {s} (method {method})"
            )

    override_cfg = OverrideConfig(theta=args.theta, delta=args.delta)
    manifest = RunManifest(
        command="evaluate", config_path=args.config, config_sha256=config_sha,
        containers=facility.n, seeds=seeds, rollouts=args.rollouts,
        theta=args.theta, delta=args.delta, extra={"methods": methods},
        out_dir=str(out_dir),
    )
    mhash = manifest.hash()

    reports = []
    for method in methods:
        per_seed = {s: policies[(method, s)] for s in seeds}
        try:
            report = evaluate_method(
                method, facility, per_seed, seeds, args.rollouts,
                ensemble=ensemble, override_cfg=override_cfg,
                eval_seed=args.eval_seed, config_label=label, jobs=args.jobs,
            )
        except MissingArtifactError as exc:
            raise CliError(str(exc)) from exc
        reports.append(report)

    report_mod.write_metrics_csv(out_dir / "metrics.csv", reports, mhash)
    report_mod.write_summary_json(out_dir / "summary.json", reports, mhash)
    report_mod.write_idle_volume_csv(out_dir / "idle_volume.csv", reports, mhash)
    report_mod.write_safety_csv(out_dir / "safety.csv", reports, mhash)
    report_mod.render_method_comparison(out_dir / "metrics_comparison.png", reports)
    report_mod.render_safety(out_dir / "safety_violations.png", reports)
    manifest.save(out_dir / "manifest.json")
    for r in reports:
        print(f"{r.method}: collisions {r.summary['collision_timesteps']['mean']:.1f} "
              f"+- {r.summary['collision_timesteps']['std']:.1f}, "
              f"volume {r.summary['total_volume_processed']['mean']:.1f}, "
              f"best seed {r.best_seed}, median seed {r.median_seed}")
    print(f"reports in {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    facility, label, config_sha, _ = _load_facility_arg(args)
    out_dir = Path(args.out) if args.out else default_out_dir() / f"sweep_{label}"
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _load_policy_checked(Path(args.weights), "policy weights")
    model_path = Path(args.model)
    if not model_path.is_file():
        raise CliError(f"collision model not found: {model_path}")
    ensemble = load_cm(model_path)
    try:
        thetas = [float(x) for x in args.thetas.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"bad --thetas list: {exc}") from exc
    if not thetas:
        raise CliError("--thetas must name at least one threshold")

    sweep = threshold_sweep(facility, params, ensemble, thetas,
                            n_rollouts=args.rollouts, delta=args.delta,
                            eval_seed=args.eval_seed)
    manifest = RunManifest(command="sweep", config_path=args.config,
                           config_sha256=config_sha, containers=facility.n,
                           rollouts=args.rollouts, delta=args.delta,
                           extra={"thetas": thetas}, out_dir=str(out_dir))
    report_mod.write_sweep_csv(out_dir / "sweep.csv", sweep, manifest.hash())
    report_mod.render_sweep(out_dir / "cv_by_theta.png", sweep, label)
    manifest.save(out_dir / "manifest.json")
    print(f"best theta {sweep.best_theta:g} (CV% "
          f"{min(r['cv_pct'] for r in sweep.rows):.2f}); reports in {out_dir}")
    return 0


# --- parser ----------------------------------------------------------------

def _add_facility_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="facility config JSON file")
    g.add_argument("--containers", type=int, default=7,
                   help="use the default facility with N containers (default 7)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bunkerops",
        description="Container-emptying scheduler toolkit: simulate, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"bunkerops {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one episode and dump the trajectory")
    _add_facility_args(p)
    p.add_argument("--policy", default="random",
                   help="'random', 'scripted', or a path to trained weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSONL path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a scheduler policy (always from scratch)")
    _add_facility_args(p)
    p.add_argument("--mode", choices=["naive", "curriculum"], default="curriculum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total-steps", type=int, default=300_000)
    p.add_argument("--rollout-steps", type=int, default=1024)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="generate the pairwise collision dataset")
    p.add_argument("--reps", type=int, default=100_000)
    p.add_argument("--horizon", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output JSONL path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cm", help="train the collision classifier")
    p.add_argument("--data", required=True, help="pairwise dataset JSONL")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output model JSON path")
    p.set_defaults(func=cmd_train_cm)

    p = sub.add_parser("evaluate", help="evaluate trained agents over seeds x rollouts")
    _add_facility_args(p)
    p.add_argument("--methods", default="cl,cl_cm",
                   help="comma list from naive,cl,cl_cm (default cl,cl_cm)")
    p.add_argument("--seeds", type=int, default=5, help="number of training seeds")
    p.add_argument("--rollouts", type=int, default=3)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--model", help="collision model JSON (needed for cl_cm)")
    p.add_argument("--weights-dir", help="directory holding policy_<mode>_seed<k>.json")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sweep the override threshold")
    _add_facility_args(p)
    p.add_argument("--weights", required=True, help="trained policy weights JSON")
    p.add_argument("--model", required=True, help="collision model JSON")
    p.add_argument("--thetas", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--rollouts", type=int, default=5)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
