import json

import pytest

from bunkerops.cli import main
from bunkerops.env import default_facility, save_facility


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end workspace: small facility, tiny budgets."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "facility.json"
    save_facility(cfg_path, default_facility(3))

    rc = run_cli("gen-data", "--reps", 400, "--horizon", 20, "--seed", 1,
                 "--out", root / "pairs.jsonl")
    assert rc == 0
    rc = run_cli("train-cm", "--data", root / "pairs.jsonl", "--trees", 20,
                 "--depth", 3, "--out", root / "model.json")
    assert rc == 0
    for mode in ("curriculum", "naive"):
        for seed in (0, 1):
            rc = run_cli("train", "--config", cfg_path, "--mode", mode,
                         "--seed", seed, "--total-steps", 3000,
                         "--rollout-steps", 512, "--out", root / "weights")
            assert rc == 0
    return root, cfg_path


class TestSimulate:
    def test_random_policy_runs_to_horizon_or_overflow(self, tmp_path):
        out = tmp_path / "traj.jsonl"
        cfg = tmp_path / "fac.json"
        save_facility(cfg, default_facility(2))
        assert run_cli("simulate", "--config", cfg, "--policy", "random",
                       "--seed", 3, "--out", out) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert records[-1]["flags"]["terminated"]
        assert records[0]["t"] == 1

    def test_deterministic_rerun_matches_bytes(self, tmp_path):
        cfg = tmp_path / "fac.json"
        save_facility(cfg, default_facility(2))
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run_cli("simulate", "--config", cfg, "--policy", "scripted", "--seed", 5, "--out", a)
        run_cli("simulate", "--config", cfg, "--policy", "scripted", "--seed", 5, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_weights_path_exits_2(self, tmp_path):
        assert run_cli("simulate", "--containers", 2,
                       "--policy", tmp_path / "missing.json",
                       "--out", tmp_path / "t.jsonl") == 2

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        assert run_cli("simulate", "--config", bad, "--out", tmp_path / "t.jsonl") == 2

    def test_containers_flag_builds_default_facility(self, tmp_path):
        out = tmp_path / "traj7.jsonl"
        assert run_cli("simulate", "--containers", 7, "--policy", "scripted",
                       "--seed", 1, "--out", out) == 0
        rec = json.loads(out.read_text().splitlines()[0])
        assert len(rec["volumes"]) == 7


class TestTrain:
    def test_curriculum_log_has_three_markers(self, workspace):
        root, _ = workspace
        log = (root / "weights" / "train_log_curriculum_seed0.csv").read_text()
        assert log.count("phase_start") == 3

    def test_naive_log_has_one_marker(self, workspace):
        root, _ = workspace
        log = (root / "weights" / "train_log_naive_seed0.csv").read_text()
        assert log.count("phase_start") == 1

    def test_weight_files_self_describing(self, workspace):
        root, _ = workspace
        data = json.loads((root / "weights" / "policy_curriculum_seed0.json").read_text())
        assert data["kind"] == "policy"
        assert "manifest" in data and "tool_version" in data


class TestGenData:
    def test_missing_dataset_exits_2(self, tmp_path):
        assert run_cli("train-cm", "--data", tmp_path / "nope.jsonl",
                       "--out", tmp_path / "m.json") == 2

    def test_summary_sidecar_written(self, workspace):
        root, _ = workspace
        sidecar = json.loads((root / "pairs.jsonl.summary.json").read_text())
        assert sidecar["n_samples"] == 400 * 20


class TestEvaluate:
    def test_reports_and_figures_written(self, workspace, tmp_path):
        root, cfg_path = workspace
        out = tmp_path / "eval"
        rc = run_cli("evaluate", "--config", cfg_path, "--methods", "naive,cl,cl_cm",
                     "--seeds", 2, "--rollouts", 2, "--theta", 0.5,
                     "--model", root / "model.json", "--weights-dir", root / "weights",
                     "--out", out)
        assert rc == 0
        for name in ("metrics.csv", "summary.json", "idle_volume.csv", "safety.csv",
                     "metrics_comparison.png", "safety_violations.png", "manifest.json"):
            assert (out / name).is_file(), name
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# bunkerops=")
        assert len(lines) == 2 + 3 * 2 * 2  # comment + header + methods*seeds*rollouts
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["methods"]) == {"naive", "cl", "cl_cm"}

    def test_missing_seed_weights_exit_2(self, workspace, tmp_path):
        root, cfg_path = workspace
        rc = run_cli("evaluate", "--config", cfg_path, "--methods", "cl",
                     "--seeds", 5, "--rollouts", 1,
                     "--weights-dir", root / "weights", "--out", tmp_path / "e")
        assert rc == 2

    def test_cl_cm_without_model_exits_2(self, workspace, tmp_path):
        root, cfg_path = workspace
        rc = run_cli("evaluate", "--config", cfg_path, "--methods", "cl_cm",
                     "--seeds", 1, "--rollouts", 1,
                     "--weights-dir", root / "weights", "--out", tmp_path / "e")
        assert rc == 2

    def test_byte_identical_reruns(self, workspace, tmp_path):
        root, cfg_path = workspace
        outs = []
        for name in ("run1", "run2"):
            out = tmp_path / name
            rc = run_cli("evaluate", "--config", cfg_path, "--methods", "cl,cl_cm",
                         "--seeds", 2, "--rollouts", 2, "--theta", 0.5,
                         "--model", root / "model.json",
                         "--weights-dir", root / "weights", "--out", out)
            assert rc == 0
            outs.append(out)
        for name in ("metrics.csv", "summary.json", "idle_volume.csv", "safety.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


class TestSweep:
    def test_sweep_outputs(self, workspace, tmp_path):
        root, cfg_path = workspace
        out = tmp_path / "sweep"
        rc = run_cli("sweep", "--config", cfg_path,
                     "--weights", root / "weights" / "policy_curriculum_seed0.json",
                     "--model", root / "model.json", "--thetas", "0.3,0.7",
                     "--rollouts", 2, "--out", out)
        assert rc == 0
        assert (out / "cv_by_theta.png").is_file()
        lines = [l for l in (out / "sweep.csv").read_text().splitlines()
                 if not l.startswith("#")]
        assert len(lines) == 3  # header + one row per theta

    def test_bad_theta_list_exits_2(self, workspace, tmp_path):
        root, cfg_path = workspace
        rc = run_cli("sweep", "--config", cfg_path,
                     "--weights", root / "weights" / "policy_curriculum_seed0.json",
                     "--model", root / "model.json", "--thetas", "abc",
                     "--out", tmp_path / "s")
        assert rc == 2


class TestManifest:
    def test_hash_ignores_out_dir_and_time(self):
        from bunkerops.manifest import RunManifest

        a = RunManifest(command="evaluate", seeds=[0, 1], theta=0.5, out_dir="/x")
        b = RunManifest(command="evaluate", seeds=[0, 1], theta=0.5, out_dir="/y")
        assert a.hash() == b.hash()
        c = RunManifest(command="evaluate", seeds=[0, 2], theta=0.5)
        assert a.hash() != c.hash()

    def test_manifest_file_contains_hash(self, tmp_path):
        from bunkerops.manifest import RunManifest

        m = RunManifest(command="train", seeds=[0])
        m.save(tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["manifest_hash"] == m.hash()
        assert "created_at" in data
