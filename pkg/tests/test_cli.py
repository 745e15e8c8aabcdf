"""Command-line interface: pipeline smoke tests, prerequisite errors,
overwrite protection, config files, and reproducibility."""

import json

import numpy as np
import pytest

from vexplain.cli import run
from vexplain.data import load_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small end-to-end pipeline: corpus, classifier, description model."""
    d = tmp_path_factory.mktemp("cli")
    assert run(
        ["synth-data", "--out", str(d / "corpus.jsonl"), "--classes", "3",
         "--instances-per-class", "6", "--feature-noise", "1.0", "--seed", "0"]
    ) == 0
    assert run(
        ["train-classifier", "--corpus", str(d / "corpus.jsonl"),
         "--out", str(d / "clf.ckpt"), "--epochs", "6", "--seed", "0"]
    ) == 0
    assert run(
        ["train", "--corpus", str(d / "corpus.jsonl"), "--mode", "description",
         "--out", str(d / "desc.ckpt"), "--epochs", "2", "--hidden", "12",
         "--embed-dim", "8", "--seed", "0"]
    ) == 0
    return d


def test_synth_data_output_loadable(workdir):
    corpus = load_corpus(workdir / "corpus.jsonl")
    assert corpus.num_classes == 3
    assert len(corpus.instances) == 18


def test_synth_data_refuses_overwrite(workdir, capsys):
    rc = run(["synth-data", "--out", str(workdir / "corpus.jsonl")])
    assert rc == 1
    assert "overwrite" in capsys.readouterr().err
    assert run(
        ["synth-data", "--out", str(workdir / "corpus.jsonl"), "--classes", "3",
         "--instances-per-class", "6", "--feature-noise", "1.0", "--seed", "0",
         "--overwrite"]
    ) == 0


def test_train_without_classifier_names_prerequisite(workdir, capsys):
    rc = run(
        ["train", "--corpus", str(workdir / "corpus.jsonl"), "--mode", "explanation",
         "--lambda", "1.0", "--lm", str(workdir / "desc.ckpt"),
         "--out", str(workdir / "nope.ckpt")]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert "--classifier" in err and "frozen" in err


def test_train_class_mode_without_lm_names_prerequisite(workdir, capsys):
    rc = run(
        ["train", "--corpus", str(workdir / "corpus.jsonl"), "--mode", "definition",
         "--out", str(workdir / "nope.ckpt")]
    )
    assert rc == 1
    assert "--lm" in capsys.readouterr().err


def test_train_explanation_full_pipeline(workdir):
    rc = run(
        ["train", "--corpus", str(workdir / "corpus.jsonl"), "--mode", "explanation",
         "--lambda", "1.0", "--classifier", str(workdir / "clf.ckpt"),
         "--lm", str(workdir / "desc.ckpt"), "--out", str(workdir / "expl.ckpt"),
         "--epochs", "2", "--hidden", "12", "--embed-dim", "8", "--seed", "0"]
    )
    assert rc == 0
    assert (workdir / "expl.ckpt").exists()
    log_lines = (workdir / "expl.ckpt.log.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in log_lines]
    assert any(r["type"] == "update" for r in records)
    epochs = [r for r in records if r["type"] == "epoch"]
    assert len(epochs) == 2
    assert all(0.0 <= e["train_reward"] <= 1.0 for e in epochs)


def test_generate_greedy_and_sampled(workdir):
    out = workdir / "gen.jsonl"
    assert run(
        ["generate", "--model", str(workdir / "desc.ckpt"),
         "--corpus", str(workdir / "corpus.jsonl"), "--split", "test",
         "--out", str(out)]
    ) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    corpus = load_corpus(workdir / "corpus.jsonl")
    assert len(rows) == len(corpus.split_instances("test"))
    assert all("sentence" in r and "id" in r for r in rows)

    s1, s2 = workdir / "s1.jsonl", workdir / "s2.jsonl"
    for target in (s1, s2):
        assert run(
            ["generate", "--model", str(workdir / "desc.ckpt"),
             "--corpus", str(workdir / "corpus.jsonl"), "--split", "test",
             "--out", str(target), "--sample", "--seed", "7"]
        ) == 0
    assert s1.read_bytes() == s2.read_bytes()


def test_evaluate_writes_report_files(workdir, capsys):
    out = workdir / "eval"
    rc = run(
        ["evaluate", "--corpus", str(workdir / "corpus.jsonl"),
         "--classifier", str(workdir / "clf.ckpt"),
         "--model", "description=" + str(workdir / "desc.ckpt"),
         "--model", "explanation=" + str(workdir / "expl.ckpt"),
         "--out", str(out)]
    )
    assert rc == 0
    assert (out / "report.txt").exists()
    assert (out / "per_image.jsonl").exists()
    rows = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
    assert {r["model"] for r in rows} == {"description", "explanation"}
    assert "ClassRank" in capsys.readouterr().out


def test_training_runs_are_bit_reproducible(workdir):
    a, b = workdir / "rep_a.ckpt", workdir / "rep_b.ckpt"
    args = ["train", "--corpus", str(workdir / "corpus.jsonl"), "--mode", "description",
            "--epochs", "2", "--hidden", "12", "--embed-dim", "8", "--seed", "11"]
    assert run(args + ["--out", str(a)]) == 0
    assert run(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gradcheck_passes():
    assert run(["gradcheck", "--seed", "0"]) == 0


def test_oracle_check_passes():
    assert run(["oracle-check", "--seed", "0", "--samples", "50000"]) == 0


def test_config_file_sets_defaults_flags_override(workdir, capsys):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "hidden": 12, "embed_dim": 8}))
    rc = run(
        ["train", "--corpus", str(workdir / "corpus.jsonl"), "--mode", "description",
         "--out", str(workdir / "cfg_run.ckpt"), "--config", str(cfg), "--seed", "2"]
    )
    assert rc == 0
    echoed = capsys.readouterr().out
    assert '"epochs": 1' in echoed and '"seed": 2' in echoed


def test_config_file_rejects_unknown_keys(workdir, capsys):
    cfg = workdir / "bad.json"
    cfg.write_text(json.dumps({"learning_rat": 0.5}))
    rc = run(["gradcheck", "--config", str(cfg)])
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_unknown_subcommand_and_flag_fail():
    assert run(["defragment"]) != 0
    assert run(["gradcheck", "--frobnicate"]) != 0


def test_seed_echoed_in_resolved_config(workdir, capsys):
    run(["generate", "--model", str(workdir / "desc.ckpt"),
         "--corpus", str(workdir / "corpus.jsonl"), "--out", str(workdir / "echo.jsonl")])
    out = capsys.readouterr().out
    assert "resolved config" in out
    assert '"seed": 0' in out


def test_report_smoke_writes_verdict(tmp_path):
    out = tmp_path / "report"
    rc = run(
        ["report", "--out", str(out), "--seeds", "0", "--classes", "3",
         "--instances-per-class", "5", "--epochs", "2", "--classifier-epochs", "3",
         "--hidden", "12", "--embed-dim", "8"]
    )
    assert rc == 0
    verdict = json.loads((out / "verdict.json").read_text())
    assert set(verdict) == {"seeds", "medians", "orderings", "all_pass"}
    assert (out / "median_table.txt").exists()
    assert (out / "seed0" / "training_curves.jsonl").exists()
    assert (out / "corpus.jsonl").exists()
