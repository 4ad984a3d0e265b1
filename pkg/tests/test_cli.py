import json

import pytest

from gradmask.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from gradmask.curation import read_jsonl

from test_curation import FIXTURES


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    assert main(["gen-corpus", "--out", str(root), "--n", "32", "--n-test", "8", "--seed", "2"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({
        "encoder": {"depth": 2, "image_depth": 1, "width": 16, "heads": 2},
        "epochs": 1, "warmup_epochs": 1, "batch_size": 16, "lr": 1e-3,
    }))
    return path


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(capsys, "train", "--corpus", "x", "--out", "y", "--bogus")[0] == EXIT_USAGE

    def test_missing_subcommand(self, capsys):
        assert run(capsys, )[0] == EXIT_USAGE

    def test_version(self, capsys):
        assert run(capsys, "--version")[0] == EXIT_OK

    def test_bad_config(self, capsys, corpus_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 2, "warmup_epochs": 3}))
        assert run(capsys, "train", "--corpus", corpus_dir, "--out", tmp_path, "--config", cfg)[0] == EXIT_USAGE


class TestFilter:
    def test_outputs(self, capsys, tmp_path):
        code, out = run(capsys, "filter", "--detections", FIXTURES / "detections.jsonl",
                        "--accepted", tmp_path / "acc.jsonl", "--audit", tmp_path / "audit.jsonl")
        assert code == EXIT_OK
        assert (tmp_path / "audit.jsonl").read_bytes() == (FIXTURES / "audit.golden.jsonl").read_bytes()
        assert json.loads(out)["accepted"] == len(read_jsonl(tmp_path / "acc.jsonl"))

    def test_threshold_override(self, capsys, tmp_path):
        code, out = run(capsys, "filter", "--detections", FIXTURES / "detections.jsonl", "--min-short-side", "1",
                        "--min-confidence", "0.01", "--accepted", tmp_path / "a", "--audit", tmp_path / "b")
        assert code == EXIT_OK
        audit = read_jsonl(tmp_path / "b")
        assert not any("short-side" in r["reasons"] or "confidence" in r["reasons"] for r in audit)

    def test_malformed(self, capsys, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"image_id": "a", "bbox_width": -1, "bbox_height": 3, "confidence": 0.9}\n')
        assert run(capsys, "filter", "--detections", bad, "--accepted", tmp_path / "a",
                   "--audit", tmp_path / "b")[0] == EXIT_DATA

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "filter", "--detections", tmp_path / "none", "--accepted", tmp_path / "a",
                   "--audit", tmp_path / "b")[0] == EXIT_DATA


class TestCurate:
    def test_bank(self, capsys, tmp_path):
        code, _ = run(capsys, "curate-templates", "--templates", FIXTURES / "templates.jsonl", "--k", 8,
                      "--out", tmp_path / "bank.json")
        assert code == EXIT_OK
        bank = json.loads((tmp_path / "bank.json").read_text())
        assert bank["selected"] == json.loads((FIXTURES / "bank.golden.json").read_text())["selected"]

    def test_k_too_large(self, capsys, tmp_path):
        assert run(capsys, "curate-templates", "--templates", FIXTURES / "templates.jsonl", "--k", 101,
                   "--out", tmp_path / "bank.json")[0] == EXIT_USAGE


class TestTrainPipeline:
    def test_train_evaluate_dump_report(self, capsys, corpus_dir, tiny_config, tmp_path):
        out = tmp_path / "run"
        code, text = run(capsys, "train", "--corpus", corpus_dir, "--out", out, "--config", tiny_config,
                         "--eval-every-epoch", "--mask-audit", tmp_path / "masks.jsonl")
        assert code == EXIT_OK
        ckpt = json.loads(text)["checkpoint"]
        code, text = run(capsys, "evaluate", "--checkpoint", ckpt, "--corpus", corpus_dir, "--out", tmp_path / "m.json")
        assert code == EXIT_OK
        metrics = json.loads((tmp_path / "m.json").read_text())
        assert metrics["gallery_count"] == 8 and metrics["rank1"] <= metrics["rank5"] <= metrics["rank10"]
        code, _ = run(capsys, "dump-scores", "--checkpoint", ckpt, "--corpus", corpus_dir,
                      "--out", tmp_path / "s.jsonl", "--limit", 5)
        rows = read_jsonl(tmp_path / "s.jsonl")
        assert code == EXIT_OK and len(rows) == 5 and len(rows[0]["tokens"]) == len(rows[0]["scores"])
        code, text = run(capsys, "report", out / "metrics.jsonl")
        assert code == EXIT_OK and json.loads(text)["epochs"] == 1

    def test_baseline_flags(self, capsys, corpus_dir, tiny_config, tmp_path):
        code, _ = run(capsys, "train", "--corpus", corpus_dir, "--out", tmp_path, "--config", tiny_config,
                      "--alpha-n", 0, "--alpha-i", 0, "--beta", 0)
        assert code == EXIT_OK
        steps = [r for r in read_jsonl(tmp_path / "metrics.jsonl") if r["kind"] == "step"]
        assert all(r["l_mtp"] == 0 and r["beta"] == 0 and r["total"] == r["l_sdm"] for r in steps)

    def test_corrupt_corpus(self, capsys, tiny_config, tmp_path):
        main(["gen-corpus", "--out", str(tmp_path / "c"), "--n", "4", "--n-test", "0"])
        with open(tmp_path / "c" / "pairs.jsonl", "a") as f:
            f.write("\n")
        assert run(capsys, "train", "--corpus", tmp_path / "c", "--out", tmp_path / "r",
                   "--config", tiny_config)[0] == EXIT_DATA

    def test_numeric_abort_exit(self, capsys, tiny_config, tmp_path, monkeypatch):
        import gradmask.trainer as trainer
        from gradmask.errors import NumericAbort

        def boom(*a, **k):
            raise NumericAbort("non-finite loss at step 0", {"step": 0})

        monkeypatch.setattr(trainer, "train_step", boom)
        main(["gen-corpus", "--out", str(tmp_path / "c"), "--n", "4", "--n-test", "0"])
        assert run(capsys, "train", "--corpus", tmp_path / "c", "--out", tmp_path / "r",
                   "--config", tiny_config)[0] == EXIT_NUMERIC
        assert (tmp_path / "r" / "abort.json").exists()
