"""Command-line contract: artifacts, determinism, error records, sweeps."""

import json
import os
from pathlib import Path

import pytest

from tsarank.cli import main
from tsarank.data import load_corpus, load_examples, load_weak_pairs, read_qrels
from tsarank.model import load_checkpoint
from tsarank.scoring import read_run_file

TINY = [
    "--set", "model.num_layers=1",
    "--set", "model.model_dim=32",
    "--set", "model.num_heads=2",
    "--set", "model.ffn_dim=64",
    "--set", "model.max_sequence_length=160",
    "--set", "synth.corpus_size=40",
    "--set", "synth.num_weak_pairs=30",
    "--set", "synth.num_train_queries=10",
    "--set", "synth.num_eval_queries=6",
    "--set", "mining.top_k=12",
    "--set", "cpt.batch_size=8",
    "--set", "sft.batch_size=2",
    "--set", "sft.hyperparams.m=3",
    "--set", "sft.hyperparams.tau=0.05",
    "--set", "eval.candidates=8",
    "--set", "eval.ppl_pairs=3",
    "--set", "eval.generate_queries=2",
    "--set", "eval.generate_len=6",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data), *TINY]) == 0
    assert main(["cpt", "--data", str(data), "--out", str(run), *TINY]) == 0
    assert main(["sft", "--data", str(data), "--checkpoint", str(run / "cpt.ckpt"), "--out", str(run), *TINY]) == 0
    assert main(["rank", "--data", str(data), "--checkpoint", str(run / "sft.ckpt"), "--out", str(run), *TINY]) == 0
    assert main([
        "eval", "--data", str(data), "--run", str(run / "run.tsv"),
        "--checkpoint", str(run / "sft.ckpt"), "--out", str(run), *TINY,
    ]) == 0
    return root


class TestSynth:
    def test_outputs_validate_under_loaders(self, workspace):
        data = workspace / "data"
        corpus = load_corpus(data / "corpus.jsonl")
        assert len(corpus) == 40
        pairs = load_weak_pairs(data / "weak_pairs.jsonl")
        assert len(pairs) == 30
        qrels = read_qrels(data / "eval_qrels.tsv")
        assert len(qrels) == 6
        examples = load_examples(data / "examples.jsonl", corpus)
        assert len(examples) == 10
        assert all(len(ex.negatives) == 3 for ex in examples)

    def test_fingerprint_reproducible(self, workspace, tmp_path, capsys):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), *TINY]) == 0
        manifest2 = json.loads((again / "manifest.json").read_text())
        assert manifest["fingerprint"] == manifest2["fingerprint"]

    def test_different_seed_changes_fingerprint(self, workspace, tmp_path):
        other = tmp_path / "other"
        assert main(["synth", "--out", str(other), "--seed", "7", *TINY]) == 0
        a = json.loads((workspace / "data" / "manifest.json").read_text())
        b = json.loads((other / "manifest.json").read_text())
        assert a["fingerprint"] != b["fingerprint"]


class TestPipelineArtifacts:
    def test_checkpoints_progress_through_stages(self, workspace):
        run = workspace / "run"
        assert load_checkpoint(run / "base.ckpt").stage == "base"
        assert load_checkpoint(run / "cpt.ckpt").stage == "cpt"
        assert load_checkpoint(run / "sft.ckpt").stage == "sft"

    def test_run_file_covers_eval_queries(self, workspace):
        run_lists = read_run_file(workspace / "run" / "run.tsv")
        assert len(run_lists) == 6
        assert all(len(r.docs) == 8 for r in run_lists)

    def test_metrics_embed_seed_and_config_hash(self, workspace):
        payload = json.loads((workspace / "run" / "metrics.json").read_text())
        assert payload["metadata"]["seed"] == 42
        assert payload["metadata"]["config_hash"]
        assert payload["metadata"]["model_stage"] == "sft"
        assert payload["ppl_pos"] is not None and payload["ppl_delta"] is not None

    def test_figures_written(self, workspace):
        run = workspace / "run"
        assert (run / "ndcg_per_query.png").stat().st_size > 0
        assert (run / "ppl_bars.png").stat().st_size > 0

    def test_logs_are_json_lines(self, workspace):
        for name in ("cpt_log.jsonl", "sft_log.jsonl", "rank_log.jsonl", "eval_log.jsonl"):
            lines = (workspace / "run" / name).read_text().splitlines()
            assert lines
            for line in lines:
                json.loads(line)


class TestDeterminism:
    def test_rerun_overwrites_bit_identically(self, workspace, tmp_path):
        data = workspace / "data"
        rerun = tmp_path / "rerun"
        for _ in range(2):
            assert main(["cpt", "--data", str(data), "--out", str(rerun), *TINY]) == 0
        first = (rerun / "cpt.ckpt").read_bytes()
        assert main(["cpt", "--data", str(data), "--out", str(rerun), *TINY]) == 0
        assert (rerun / "cpt.ckpt").read_bytes() == first
        assert (rerun / "cpt.ckpt").read_bytes() == (workspace / "run" / "cpt.ckpt").read_bytes()


class TestErrors:
    def test_eval_unknown_query_id_nonzero_exit(self, workspace, tmp_path, capsys):
        bad_run = tmp_path / "bad_run.tsv"
        bad_run.write_text("mystery_query\td00000\t1\t-4.5\n")
        code = main([
            "eval", "--data", str(workspace / "data"), "--run", str(bad_run),
            "--out", str(tmp_path / "out"), *TINY,
        ])
        captured = capsys.readouterr()
        assert code != 0
        record = json.loads(captured.err.strip().splitlines()[-1])
        assert "mystery_query" in record["message"]
        assert record["error"] == "UnknownQueryError"

    def test_missing_prerequisite_reports_record(self, workspace, tmp_path, capsys):
        code = main([
            "sft", "--data", str(workspace / "data"), "--checkpoint", str(tmp_path / "nope.ckpt"),
            "--out", str(tmp_path / "out"), *TINY,
        ])
        captured = capsys.readouterr()
        assert code != 0
        record = json.loads(captured.err.strip().splitlines()[-1])
        assert record["error"] == "MissingPrerequisiteError"

    def test_invalid_config_value_rejected_before_work(self, workspace, tmp_path, capsys):
        code = main([
            "cpt", "--data", str(workspace / "data"), "--out", str(tmp_path / "out"),
            *TINY, "--set", "sft.hyperparams.alpha=2.0",
        ])
        assert code != 0
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error"] == "ConfigError"


class TestSweep:
    def test_alpha_sweep_emits_reports_and_summary(self, workspace, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main([
            "sweep", "--param", "alpha", "--data", str(workspace / "data"),
            "--out", str(out), *TINY, "--set", "sweep.alpha=[0.5,1.0]",
        ])
        assert code == 0
        assert (out / "alpha_0.5" / "metrics.json").exists()
        assert (out / "alpha_1.0" / "metrics.json").exists()
        summary = (out / "summary.tsv").read_text().splitlines()
        assert summary[0] == "alpha\tmean_ndcg"
        assert len(summary) == 3
        assert (out / "sweep_alpha.png").stat().st_size > 0

    def test_m_sweep_resamples_examples(self, workspace, tmp_path):
        out = tmp_path / "sweep_m"
        code = main([
            "sweep", "--param", "m", "--data", str(workspace / "data"),
            "--out", str(out), *TINY, "--set", "sweep.m=[2,4]",
        ])
        assert code == 0
        assert (out / "m_2" / "metrics.json").exists()
        assert (out / "m_4" / "metrics.json").exists()

    def test_empty_sweep_list_rejected(self, workspace, tmp_path):
        code = main([
            "sweep", "--param", "alpha", "--data", str(workspace / "data"),
            "--out", str(tmp_path / "x"), *TINY, "--set", "sweep.alpha=[]",
        ])
        assert code != 0


class TestAblate:
    def test_emits_all_seven_configurations(self, workspace, tmp_path):
        out = tmp_path / "ablate"
        code = main(["ablate", "--data", str(workspace / "data"), "--out", str(out), *TINY])
        assert code == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert set(payload["configs"]) == {"full", "-cpt", "-sft", "-cpt_sft", "-ntp", "-dp", "-ntp_dp"}
        table = (out / "ablation.tsv").read_text().splitlines()
        assert len(table) == 8
        assert (out / "ablation.png").stat().st_size > 0
