import json
import subprocess
import sys

import pytest

from unisem.cli import main

TINY_ROLE = {"num_layers": 1, "hidden_size": 8, "embed_size": 8,
             "train": {"lr": 0.01, "max_epochs": 1, "batch_size": 32}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"teacher": TINY_ROLE, "student": TINY_ROLE, "supervised": TINY_ROLE, "beam_width": 2, "workers": 1}
    (root / "tiny.json").write_text(json.dumps(cfg))
    assert main(["gen-data", "--spec", "default", "--per-domain", "30", "--seed", "4",
                 "--out", str(root / "corpus")]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_writes_corpus_and_stats(workdir):
    c = workdir / "corpus"
    for f in ("manifest.json", "stats.json", "resolved_config.json", "recipes/train.jsonl", "recipes/kb.json"):
        assert (c / f).exists(), f
    stats = json.loads((c / "stats.json").read_text())
    assert set(stats) == {"recipes", "publications", "housing"}


def test_gen_data_is_byte_identical(workdir, tmp_path):
    assert run("gen-data", "--per-domain", "30", "--seed", "4", "--out", tmp_path / "again") == 0
    for f in ("manifest.json", "recipes/train.jsonl", "housing/test.jsonl", "stats.json"):
        assert (workdir / "corpus" / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_snapshot_reproduces_run(workdir, tmp_path):
    snap = workdir / "corpus" / "resolved_config.json"
    doc = json.loads(snap.read_text())
    doc["args"]["out"] = str(tmp_path / "replay")
    (tmp_path / "snap.json").write_text(json.dumps(doc))
    assert run("gen-data", "--config", tmp_path / "snap.json") == 0
    assert (tmp_path / "replay" / "recipes" / "train.jsonl").read_bytes() == \
        (workdir / "corpus" / "recipes" / "train.jsonl").read_bytes()


def test_pipeline_teacher_distill_eval_report(workdir):
    cfg, corpus = workdir / "tiny.json", workdir / "corpus"
    assert run("train-teacher", "--config", cfg, "--corpus", corpus, "--seed", 0, "--out", workdir / "teachers") == 0
    for d in ("recipes", "publications", "housing"):
        assert (workdir / "teachers" / d / "seed0" / "model.json").exists()
    teachers = ",".join(str(workdir / "teachers" / d) for d in ("recipes", "publications", "housing"))
    assert run("distill", "--config", cfg, "--teachers", teachers, "--corpus", corpus, "--seed", 0,
               "--out", workdir / "student") == 0
    assert run("eval", "--model", workdir / "student", "--corpus", corpus) == 0
    result = json.loads((workdir / "student" / "eval.json").read_text())
    assert set(result["per_domain"]) == {"recipes", "publications", "housing"}
    assert all(0.0 <= v <= 100.0 for v in result["per_domain"].values())
    assert run("report", "--out", workdir / "report", workdir / "teachers", workdir / "student" / "result.json") == 0
    text = (workdir / "report" / "report.txt").read_text()
    assert "weak-independent" in text and "distill-combined" in text


def test_train_combined(workdir):
    assert run("train-combined", "--config", workdir / "tiny.json", "--corpus", workdir / "corpus",
               "--seed", 1, "--out", workdir / "combined") == 0
    assert (workdir / "combined" / "combined" / "seed1" / "model.json").exists()


def test_eval_rejects_wrong_corpus(workdir, tmp_path, capsys):
    run("train-teacher", "--config", workdir / "tiny.json", "--corpus", workdir / "corpus", "--domain", "recipes",
        "--seed", 0, "--out", tmp_path / "t")
    assert run("gen-data", "--spec", "blocks,calendar", "--per-domain", "20", "--out", tmp_path / "other") == 0
    code = run("eval", "--model", tmp_path / "t" / "recipes", "--corpus", tmp_path / "other")
    assert code == 3
    assert "error[checkpoint]" in capsys.readouterr().err


def test_distill_without_teachers_on_disk(workdir, tmp_path, capsys):
    code = run("distill", "--teachers", tmp_path / "nope", "--corpus", workdir / "corpus", "--out", tmp_path / "s")
    assert code == 3
    assert "error[missing-input]" in capsys.readouterr().err


def test_normalize_command(tmp_path):
    src = tmp_path / "parses.txt"
    src.write_text("(call SW.listValue (call SW.getProperty (call SW.singleton en.recipe) (string ! type)))\n")
    assert run("normalize", "--out", tmp_path / "n", src) == 0
    row = json.loads((tmp_path / "n" / "normalized.jsonl").read_text())
    assert row["tokens"] == ["en.recipe"]


def test_stats_command(workdir, tmp_path):
    assert run("stats", "--corpus", workdir / "corpus", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "stats.json").read_text()) == \
        json.loads((workdir / "corpus" / "stats.json").read_text())


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["gen-data", "--bogus-flag", "1"],
    ["train-teacher", "--reward-mode", "bleu"],
    ["train-teacher", "--out", "x"],
    ["gen-data", "--per-domain", "3", "--out", "x"],
])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert "error[config]" in err
    assert len([line for line in err.splitlines() if line.startswith("unisem: error")]) == 1


def test_bad_config_file_exit_2(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("stats", "--config", tmp_path / "bad.json", "--corpus", tmp_path) == 2
    (tmp_path / "unknown.json").write_text(json.dumps({"nonsense": 1}))
    assert run("stats", "--config", tmp_path / "unknown.json", "--corpus", tmp_path) == 2


def test_missing_corpus_exit_3(tmp_path, capsys):
    assert run("stats", "--corpus", tmp_path / "absent") == 3
    assert "error[missing-input]" in capsys.readouterr().err


def test_dotted_keys_and_flags_override(tmp_path):
    from unisem.cli import build_arg_parser, resolve
    (tmp_path / "c.json").write_text(json.dumps({"teacher.train.lr": 0.25, "beam_width": 7}))
    args = build_arg_parser().parse_args(["train-teacher", "--config", str(tmp_path / "c.json"),
                                          "--beam-width", "3", "--seed", "5"])
    cfg, plain = resolve(args)
    assert cfg.teacher.train.lr == 0.25
    assert cfg.beam_width == 3 and cfg.seeds == [5]
    assert cfg.workers >= 1


def test_usage_on_unknown_subcommand():
    proc = subprocess.run([sys.executable, "-m", "unisem", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage" in proc.stderr and proc.stdout == ""
