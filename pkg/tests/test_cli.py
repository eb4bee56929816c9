"""End-to-end CLI runs through the public entry point."""
import json

import numpy as np
import pytest

from himpc.cli import main
from himpc.io import parse_sequences
from himpc.trainer import TrainConfig, tune_eps


def run(args):
    return main(args)


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "synthrun"
    code = run([
        "synth", "--ids", "6", "--seqs-per-id", "4", "--noise", "0.01",
        "--seed", "3", "--split", "--run-dir", str(out),
    ])
    assert code == 0
    return out


def tuned_eps(data_path, seed=3):
    seqs = parse_sequences(data_path, 20)
    coords = np.stack([s.frames for s in seqs])
    config = TrainConfig(f=6, h=16, m_heads=2, min_samples=2, seed=seed)
    return tune_eps(coords, config)


class TestSynth:
    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for target in (a, b):
            assert run([
                "synth", "--ids", "4", "--seqs-per-id", "3",
                "--seed", "7", "--run-dir", str(target),
            ]) == 0
        assert (a / "data.jsonl").read_bytes() == (b / "data.jsonl").read_bytes()

    def test_split_files_and_manifest(self, synth_dir):
        for name in ("data", "train", "probe", "gallery"):
            assert (synth_dir / f"{name}.jsonl").exists()
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3
        assert any(key.endswith("data.jsonl") for key in manifest["outputs"])

    def test_validation_failure_exit_code(self, tmp_path, capsys):
        code = run(["synth", "--ids", "1", "--run-dir", str(tmp_path / "x")])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestTrainEval:
    def test_train_then_eval_and_self_match(self, synth_dir, tmp_path, capsys):
        eps = tuned_eps(synth_dir / "train.jsonl")
        train_dir = tmp_path / "trainrun"
        code = run([
            "train", "--data", str(synth_dir / "train.jsonl"),
            "--f", "6", "--h", "16", "--m", "2", "--eps", f"{eps}",
            "--min-samples", "2", "--max-epoch", "8", "--seed", "3",
            "--run-dir", str(train_dir),
        ])
        assert code == 0
        ckpt = train_dir / "checkpoint.ckpt"
        assert ckpt.exists()
        log = json.loads((train_dir / "trainlog.json").read_text())
        assert len(log["epochs"]) == 8
        manifest = json.loads((train_dir / "manifest.json").read_text())
        assert manifest["config"]["h"] == 16

        capsys.readouterr()
        eval_dir = tmp_path / "evalrun"
        code = run([
            "eval", "--checkpoint", str(ckpt),
            "--probe", str(synth_dir / "probe.jsonl"),
            "--gallery", str(synth_dir / "probe.jsonl"),
            "--run-dir", str(eval_dir),
        ])
        assert code == 0
        report = json.loads((eval_dir / "report.json").read_text())
        # Probe matched against itself is a perfect retrieval.
        assert report["r1"] == 1.0
        assert (eval_dir / "cmc.csv").read_text().startswith("rank,rate")
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["r1"] == 1.0

    def test_train_determinism_across_run_dirs(self, synth_dir, tmp_path):
        eps = tuned_eps(synth_dir / "train.jsonl")
        digests = []
        for name in ("r1", "r2"):
            run_dir = tmp_path / name
            assert run([
                "train", "--data", str(synth_dir / "train.jsonl"),
                "--f", "6", "--h", "16", "--m", "2", "--eps", f"{eps}",
                "--max-epoch", "4", "--seed", "9", "--run-dir", str(run_dir),
            ]) == 0
            digests.append((
                (run_dir / "checkpoint.ckpt").read_bytes(),
                (run_dir / "trainlog.canonical.json").read_bytes(),
            ))
        assert digests[0] == digests[1]

    def test_missing_data_file_is_validation_error(self, tmp_path):
        assert run([
            "train", "--data", str(tmp_path / "nope.jsonl"),
            "--run-dir", str(tmp_path / "r"),
        ]) == 1


class TestDiagnostics:
    def test_gradcheck_passes_and_writes_report(self, tmp_path, capsys):
        run_dir = tmp_path / "gc"
        code = run(["gradcheck", "--seed", "0", "--probes", "40",
                    "--run-dir", str(run_dir)])
        assert code == 0
        payload = json.loads((run_dir / "gradcheck.json").read_text())
        assert payload["passed"] is True
        assert payload["max_rel_error"] < 1e-4
        assert set(payload["per_loss"]) == {"himpc", "himpc_h"}

    def test_cluster_stats_reports_levels_and_suggestions(self, synth_dir, tmp_path, capsys):
        eps = tuned_eps(synth_dir / "train.jsonl")
        run_dir = tmp_path / "cs"
        code = run([
            "cluster-stats", "--data", str(synth_dir / "train.jsonl"),
            "--f", "6", "--h", "16", "--m", "2", "--eps", f"{eps}",
            "--seed", "3", "--run-dir", str(run_dir),
        ])
        assert code == 0
        payload = json.loads((run_dir / "cluster_stats.json").read_text())
        assert len(payload["levels"]) == 3
        assert all("clusters" in level for level in payload["levels"])
        assert len(payload["eps_suggestions"]) == 3

    def test_cluster_stats_inherits_checkpoint_config(self, synth_dir, tmp_path):
        eps = tuned_eps(synth_dir / "train.jsonl")
        train_dir = tmp_path / "t"
        assert run([
            "train", "--data", str(synth_dir / "train.jsonl"),
            "--f", "6", "--h", "16", "--m", "2", "--eps", f"{eps}",
            "--max-epoch", "2", "--seed", "3", "--run-dir", str(train_dir),
        ]) == 0
        stats_dir = tmp_path / "cs2"
        assert run([
            "cluster-stats", "--data", str(synth_dir / "train.jsonl"),
            "--checkpoint", str(train_dir / "checkpoint.ckpt"),
            "--run-dir", str(stats_dir),
        ]) == 0
        payload = json.loads((stats_dir / "cluster_stats.json").read_text())
        assert payload["eps"] == pytest.approx(eps)

    def test_importance_dump_structure(self, synth_dir, tmp_path):
        eps = tuned_eps(synth_dir / "train.jsonl")
        run_dir = tmp_path / "imp"
        code = run([
            "importance-dump", "--data", str(synth_dir / "train.jsonl"),
            "--f", "6", "--h", "16", "--m", "2", "--eps", f"{eps}",
            "--seed", "3", "--run-dir", str(run_dir),
        ])
        assert code == 0
        records = json.loads((run_dir / "importance.json").read_text())
        assert records and len(records[0]["levels"]) == 3
        clustered = [
            head
            for record in records
            for level in record["levels"]
            for head in level["heads"]
        ]
        assert clustered, "at least one sequence should be in a cluster"
        for head in clustered:
            weights = np.array(head["importance"])
            assert weights.shape == (6,)
            assert abs(weights.sum() - 1.0) < 1e-9
            assert (weights > 0).all()
