"""End-to-end CLI runs through subprocesses: exit codes and on-disk artifacts."""

import json
import subprocess
import sys

import pytest

from rankfuse.data import PairPolicy, load_corpus

from test_config import REFERENCE, SMOKE
from test_continual import RUN_LOG_KEYS

RESULT_KEYS = {"recall_matrix", "mean_recall_at_1", "forgetting", "per_step_details"}


def cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "rankfuse.cli", *map(str, argv)],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="module")
def smoke_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    proc = cli("run", "--config", SMOKE, "--out", out)
    assert proc.returncode == 0, proc.stderr
    return out, proc


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    proc = cli("gen-data", "--config", SMOKE, "--out", out)
    assert proc.returncode == 0, proc.stderr
    return out / "corpora", proc


# ---------------------------------------------------------------------------
# run


def test_run_reports_each_seed(smoke_out):
    _, proc = smoke_out
    assert "seed 0:" in proc.stdout
    assert "mean R@1" in proc.stdout


def test_run_writes_all_artifacts(smoke_out):
    out, _ = smoke_out
    seed_dir = out / "seed_0"
    for name in ("results.json", "recall_matrix.csv", "run_log.jsonl",
                 "step_0.snap", "step_1.snap"):
        assert (seed_dir / name).is_file(), name
    assert (out / "aggregate.json").is_file()
    assert (out / "manifest.json").is_file()


def test_results_json_wire_keys(smoke_out):
    out, _ = smoke_out
    results = json.loads((out / "seed_0" / "results.json").read_text())
    assert set(results) == RESULT_KEYS
    assert len(results["recall_matrix"]) == 2
    details = results["per_step_details"]
    assert details["seed"] == 0
    assert details["headline_mode"] == "fused"
    assert details["single"]["mean_recall_at_1"] > 0


def test_run_log_wire_keys(smoke_out):
    out, _ = smoke_out
    lines = (out / "seed_0" / "run_log.jsonl").read_text().strip().split("\n")
    assert len(lines) == 8  # 2 steps x 4 epochs
    for line in lines:
        assert set(json.loads(line)) == RUN_LOG_KEYS


def test_manifest_and_aggregate(smoke_out):
    out, _ = smoke_out
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest) == {"tool_version", "config_digest", "seeds", "results", "wall_clock"}
    assert manifest["seeds"] == [0]
    clock = manifest["wall_clock"]["0"]
    assert len(clock["per_step_seconds"]) == 2
    assert clock["train_seconds"] > 0

    aggregate = json.loads((out / "aggregate.json").read_text())
    assert aggregate["config_digest"] == manifest["config_digest"]
    assert aggregate["n_seeds"] == 1
    for key in ("single_mean_recall_at_1_mean", "fused_mean_recall_at_1_mean",
                "single_forgetting_std", "fused_forgetting_std"):
        assert key in aggregate


def test_rerun_results_are_byte_identical(smoke_out, tmp_path):
    out, _ = smoke_out
    proc = cli("run", "--config", SMOKE, "--out", tmp_path)
    assert proc.returncode == 0, proc.stderr
    first = (out / "seed_0" / "results.json").read_bytes()
    second = (tmp_path / "seed_0" / "results.json").read_bytes()
    assert first == second


def test_toggles_disable_distillation_and_buffer(tmp_path):
    proc = cli("run", "--config", SMOKE, "--out", tmp_path,
               "--toggle", "rkd=off", "dkd=off", "buffer=off")
    assert proc.returncode == 0, proc.stderr
    for line in (tmp_path / "seed_0" / "run_log.jsonl").read_text().strip().split("\n"):
        payload = json.loads(line)
        assert payload["loss_rkd"] == 0.0
        assert payload["loss_dkd"] == 0.0
        assert payload["lambda"] == 0.0


def test_missing_config_exits_2(tmp_path):
    proc = cli("run", "--config", tmp_path / "nope.yaml", "--out", tmp_path)
    assert proc.returncode == 2
    assert "error" in proc.stderr


def test_bad_toggle_exits_2(tmp_path):
    proc = cli("run", "--config", SMOKE, "--out", tmp_path, "--toggle", "rkd=maybe")
    assert proc.returncode == 2
    assert "on|off" in proc.stderr


def test_all_loss_terms_off_exits_2(tmp_path):
    proc = cli("run", "--config", SMOKE, "--out", tmp_path,
               "--toggle", "pr=off", "rkd=off", "dkd=off")
    assert proc.returncode == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_and_is_deterministic():
    a = cli("gradcheck", "--batch", 4, "--dim", 6, "--points", 16)
    b = cli("gradcheck", "--batch", 4, "--dim", 6, "--points", 16)
    assert a.returncode == 0, a.stderr
    lines = a.stdout.strip().split("\n")
    assert len(lines) == 9  # 2 encoder + triplet + batch-hard + rkd + 3 dkd + combined
    assert all(": ok " in line for line in lines)
    assert a.stdout == b.stdout


def test_gradcheck_corrupt_control_exits_5():
    proc = cli("gradcheck", "--batch", 4, "--dim", 6, "--points", 16,
               "--corrupt", "0.05")
    assert proc.returncode == 5
    assert "FAIL" in proc.stdout
    assert "gradient check failed" in proc.stderr


# ---------------------------------------------------------------------------
# gen-data + eval


def test_gen_data_writes_loadable_corpora(corpora):
    root, proc = corpora
    assert "plains" in proc.stdout and "depot" in proc.stdout
    policy = PairPolicy()
    for split, expect in (("train", 60), ("db", 30), ("query", 30)):
        samples = load_corpus(root / "plains" / split, policy)
        assert len(samples) == expect
        assert samples[0].scan.points.shape == (48, 3)


def test_eval_single_snapshot(smoke_out, corpora, tmp_path):
    out, _ = smoke_out
    root, _ = corpora
    proc = cli("eval", "--snapshot", out / "seed_0" / "step_1.snap",
               "--corpus", root / "plains" / "db",
               "--queries", root / "plains" / "query",
               "--out", tmp_path)
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["fusion"] is False
    assert report["embedding_dim"] == 16
    assert 0.0 <= report["recall_at_n"] <= 100.0
    assert json.loads((tmp_path / "eval.json").read_text()) == report


def test_eval_fused_pair(smoke_out, corpora):
    out, _ = smoke_out
    root, _ = corpora
    proc = cli("eval", "--fusion", "on",
               "--snapshot", out / "seed_0" / "step_0.snap",
               "--snapshot", out / "seed_0" / "step_1.snap",
               "--corpus", root / "plains" / "db",
               "--queries", root / "plains" / "query")
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["embedding_dim"] == 32


def test_eval_three_snapshots_is_usage_error(smoke_out, corpora):
    out, _ = smoke_out
    root, _ = corpora
    snap = out / "seed_0" / "step_0.snap"
    proc = cli("eval", "--fusion", "on",
               "--snapshot", snap, "--snapshot", snap, "--snapshot", snap,
               "--corpus", root / "plains" / "db",
               "--queries", root / "plains" / "query")
    assert proc.returncode == 2
    assert "two snapshots" in proc.stderr


def test_eval_digest_mismatch_exits_4(smoke_out, corpora):
    out, _ = smoke_out
    root, _ = corpora
    proc = cli("eval", "--snapshot", out / "seed_0" / "step_1.snap",
               "--config", REFERENCE,
               "--corpus", root / "plains" / "db",
               "--queries", root / "plains" / "query")
    assert proc.returncode == 4
    assert "digest" in proc.stderr


def test_eval_missing_snapshot_exits_2(corpora, tmp_path):
    root, _ = corpora
    proc = cli("eval", "--snapshot", tmp_path / "missing.snap",
               "--corpus", root / "plains" / "db",
               "--queries", root / "plains" / "query")
    assert proc.returncode == 2
    assert "not found" in proc.stderr
