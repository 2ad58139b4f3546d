import hashlib
import json
from pathlib import Path

import pytest

from after.cli import build_parser, main

SMALL_SYNTH = ["--n-train", "40", "--n-val", "20", "--n-test", "20", "--n-aux", "80", "--n-pretrain", "200",
               "--len", "8"]
SMALL_MODEL = {"model": {"d_model": 8, "n_heads": 2, "d_ff": 16, "max_len": 16},
               "pretrain": {"steps": 5, "batch_size": 8, "log_every": 1, "max_len": 16}}
QUICK = ["--epochs", "1", "--evals-per-epoch", "2", "--batch-size", "8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-synth", "--out", d / "syn", *SMALL_SYNTH) == 0
    assert run("build-vocab", "--corpus", d / "syn" / "pretrain.txt", "--size", "1000", "--out", d / "vocab.txt") == 0
    (d / "cfg.json").write_text(json.dumps(SMALL_MODEL))
    assert run("pretrain", "--config", d / "cfg.json", "--corpus", d / "syn" / "pretrain.txt",
               "--vocab", d / "vocab.txt", "--out", d / "pre.ckpt") == 0
    return d


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- gen-synth

def test_gen_synth_files_and_determinism(pipeline, tmp_path):
    names = {"main_train.jsonl", "main_val.jsonl", "main_test.jsonl", "aux.jsonl", "pretrain.txt", "manifest.json"}
    assert {p.name for p in (pipeline / "syn").iterdir()} == names
    assert run("gen-synth", "--out", tmp_path / "again", *SMALL_SYNTH) == 0
    for n in names:
        assert (tmp_path / "again" / n).read_bytes() == (pipeline / "syn" / n).read_bytes()


def test_gen_synth_refuses_non_empty_dir(pipeline, capsys):
    assert run("gen-synth", "--out", pipeline / "syn", *SMALL_SYNTH) == 2
    assert "--force" in capsys.readouterr().err
    assert run("gen-synth", "--out", pipeline / "syn", "--force", *SMALL_SYNTH) == 0


@pytest.mark.parametrize("flag", [["--cue-frac", "1.5"], ["--rho", "-0.2"]])
def test_gen_synth_bad_fraction(tmp_path, capsys, flag):
    assert run("gen-synth", "--out", tmp_path / "x", *flag) == 2
    assert "must be in" in capsys.readouterr().err


# -------------------------------------------------------------- build-vocab

def test_build_vocab_known_file(tmp_path):
    (tmp_path / "c.txt").write_text("The cat, the hat!\nA cat\n")
    assert run("build-vocab", "--corpus", tmp_path / "c.txt", "--size", "8", "--out", tmp_path / "v.txt") == 0
    first = (tmp_path / "v.txt").read_bytes()
    assert first.decode().splitlines() == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "cat", "the", "a"]
    assert run("build-vocab", "--corpus", tmp_path / "c.txt", "--size", "8", "--out", tmp_path / "v.txt") == 0
    assert (tmp_path / "v.txt").read_bytes() == first


def test_build_vocab_empty_corpus(tmp_path):
    (tmp_path / "e.txt").write_text("\n\n")
    assert run("build-vocab", "--corpus", tmp_path / "e.txt", "--size", "8", "--out", tmp_path / "v.txt") == 2
    assert run("build-vocab", "--corpus", tmp_path / "nope.txt", "--size", "8", "--out", tmp_path / "v.txt") == 2


# ----------------------------------------------------------------- pretrain

def test_pretrain_outputs(pipeline):
    lines = (pipeline / "pre.ckpt.log.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["step"] for r in recs] == [0, 1, 2, 3, 4]
    manifest = json.loads((pipeline / "pre.ckpt.manifest.json").read_text())
    assert manifest["finished"] and manifest["config"]["pretrain"]["steps"] == 5
    for path, digest in manifest["inputs"].items():
        assert sha(Path(path)) == digest


def test_pretrain_missing_vocab(pipeline, tmp_path):
    assert run("pretrain", "--corpus", pipeline / "syn" / "pretrain.txt", "--vocab", tmp_path / "none.txt",
               "--out", tmp_path / "x.ckpt") == 2


def test_pretrain_bad_config_is_usage_error(pipeline, tmp_path):
    (tmp_path / "bad.json").write_text('{"pretrain": {"stepz": 3}}')
    assert run("pretrain", "--config", tmp_path / "bad.json", "--corpus", pipeline / "syn" / "pretrain.txt",
               "--vocab", pipeline / "vocab.txt", "--out", tmp_path / "x.ckpt") == 2


def test_pretrain_repeat_is_byte_identical(pipeline, tmp_path):
    assert run("pretrain", "--config", pipeline / "cfg.json", "--corpus", pipeline / "syn" / "pretrain.txt",
               "--vocab", pipeline / "vocab.txt", "--out", tmp_path / "again.ckpt") == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (pipeline / "pre.ckpt").read_bytes()
    assert (tmp_path / "again.ckpt.log.jsonl").read_bytes() == (pipeline / "pre.ckpt.log.jsonl").read_bytes()


# ----------------------------------------------------------------- finetune

def finetune(pipeline, out, *extra):
    return run("finetune", "--ckpt", pipeline / "pre.ckpt", "--main", pipeline / "syn", "--out", out,
               *QUICK, *extra)


def test_finetune_five_seeds(pipeline, tmp_path):
    out = tmp_path / "ft"
    assert finetune(pipeline, out, "--aux", pipeline / "syn" / "aux.jsonl", "--mode", "after",
                    "--lambda", "0.1", "--seeds", "1,2,3,4,5") == 0
    results = [json.loads((out / f"seed_{s}" / "result.json").read_text()) for s in range(1, 6)]
    assert all(r["lam"] == 0.1 and r["mode"] == "after" for r in results)
    agg = json.loads((out / "aggregate.json").read_text())
    accs = [r["selected_val_metrics"]["accuracy"] for r in results]
    assert agg["metrics"]["val_accuracy"]["mean"] == pytest.approx(sum(accs) / 5, abs=1e-12)
    for s in range(1, 6):
        for line in (out / f"seed_{s}" / "log.jsonl").read_text().splitlines():
            json.loads(line)
        assert (out / f"seed_{s}" / "model.ckpt").exists()


def test_finetune_usage_errors(pipeline, tmp_path, capsys):
    assert finetune(pipeline, tmp_path / "a", "--mode", "after") == 2
    assert not (tmp_path / "a").exists()
    assert finetune(pipeline, tmp_path / "b", "--mode", "after", "--aux", pipeline / "syn" / "aux.jsonl",
                    "--lambda", "0") == 2
    assert finetune(pipeline, tmp_path / "c", "--mode", "multitask", "--aux", pipeline / "syn" / "aux.jsonl",
                    "--lambda", "-1") == 2
    assert finetune(pipeline, tmp_path / "d", "--mode", "sft", "--aux", pipeline / "syn" / "aux.jsonl") == 2
    assert finetune(pipeline, tmp_path / "e", "--mode", "sft", "--seeds", "x") == 2
    with pytest.raises(SystemExit) as e:
        finetune(pipeline, tmp_path / "f", "--mode", "bogus")
    assert e.value.code == 2


def test_finetune_sft_lambda_warns(pipeline, tmp_path, caplog):
    assert finetune(pipeline, tmp_path / "sft", "--mode", "sft", "--lambda", "0.1", "--seeds", "1") == 0
    assert "ignored" in caplog.text
    r = json.loads((tmp_path / "sft" / "seed_1" / "result.json").read_text())
    assert r["lam"] is None


def test_finetune_config_file_merged_under_flags(pipeline, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"mode": "sft", "seeds": [7], "epochs": 3, "lr_peak": 0.5}))
    assert run("finetune", "--ckpt", pipeline / "pre.ckpt", "--main", pipeline / "syn", "--out", tmp_path / "o",
               "--config", tmp_path / "c.json", "--epochs", "1", "--batch-size", "8") == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["epochs"] == 1 and m["config"]["lr_peak"] == 0.5 and m["seeds"] == [7]


def test_finetune_runtime_failure_exit_1(pipeline, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run("finetune", "--ckpt", bad, "--main", pipeline / "syn", "--mode", "sft",
               "--out", tmp_path / "o") == 1


def test_finetune_repeat_byte_identical(pipeline, tmp_path):
    args = ("--aux", pipeline / "syn" / "aux.jsonl", "--mode", "multitask", "--lambda", "0.1", "--seeds", "2")
    assert finetune(pipeline, tmp_path / "a", *args) == 0
    assert finetune(pipeline, tmp_path / "b", *args) == 0
    for name in ("seed_2/result.json", "seed_2/log.jsonl", "aggregate.json", "seed_2/model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -------------------------------------------------------------------- sweep

def test_sweep_default_grid_serial_vs_parallel(pipeline, tmp_path, monkeypatch):
    common = ("sweep", "--ckpt", pipeline / "pre.ckpt", "--main", pipeline / "syn", "--aux",
              pipeline / "syn" / "aux.jsonl", "--seeds", "1", *QUICK)
    assert run(*common, "--out", tmp_path / "serial", "--jobs", "1") == 0
    monkeypatch.setenv("AFTER_JOBS", "2")
    assert run(*common, "--out", tmp_path / "parallel") == 0
    sweep = json.loads((tmp_path / "serial" / "sweep.json").read_text())
    assert sweep["grid"] == [0.1, 0.01, 0.001, 0.0001] and len(sweep["runs"]) == 4
    assert len(list((tmp_path / "serial" / "runs").iterdir())) == 4
    for name in ("sweep.json", "table.txt", "per_lambda.txt"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_sweep_rejects_bad_grid(pipeline, tmp_path):
    assert run("sweep", "--ckpt", pipeline / "pre.ckpt", "--main", pipeline / "syn", "--aux",
               pipeline / "syn" / "aux.jsonl", "--grid", "0.1,0", "--out", tmp_path / "s") == 2


# ------------------------------------------------------------------ analyze

def test_analyze_self_distances(pipeline, tmp_path):
    f = pipeline / "syn" / "main_train.jsonl"
    assert run("analyze", "jsd", "--corpus", f"a={f}", f"b={f}", "--out", tmp_path / "jsd") == 0
    m = json.loads((tmp_path / "jsd.json").read_text())
    assert m["values"] == [[0.0, 0.0], [0.0, 0.0]]
    assert run("analyze", "overlap", "--rows", f"a={f}", "--out", tmp_path / "ov") == 0
    assert (tmp_path / "ov.csv").read_text().splitlines() == [",a", "a,100.0"]


def test_analyze_mlm_and_probe(pipeline, tmp_path):
    syn = pipeline / "syn"
    assert run("analyze", "mlm", "--ckpt", pipeline / "pre.ckpt", "--data", f"main={syn / 'main_val.jsonl'}",
               f"aux={syn / 'aux.jsonl'}", "--passes", "2", "--out", tmp_path / "mlm") == 0
    rep = json.loads((tmp_path / "mlm.json").read_text())
    assert set(rep["mlm_loss"]) == {"main", "aux"}
    assert run("analyze", "probe", "--ckpt", f"x={pipeline / 'pre.ckpt'}", f"y={pipeline / 'pre.ckpt'}",
               "--main", syn / "main_test.jsonl", "--aux", syn / "aux.jsonl", "--out", tmp_path / "probe") == 0
    rep = json.loads((tmp_path / "probe.json").read_text())["probe_accuracy"]
    assert set(rep) == {"x", "y"} and rep["x"] == rep["y"]


def test_analyze_missing_input(tmp_path):
    assert run("analyze", "jsd", "--corpus", tmp_path / "missing.txt", "--out", tmp_path / "o") == 2


# --------------------------------------------------------------------- help

def test_help_lists_defaults(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[-1] in text
        if name == "analyze":
            continue
        assert "default" in text
