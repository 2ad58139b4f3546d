"""Run the synthetic end-to-end pipeline and record per-seed outcomes.

Writes a JSON summary (default tests/fixtures/synthetic_oracle.json) with the
observed SFT / AFTER validation accuracies, domain-probe accuracies, and the
training L_Domain traces of the multitask and adversarial contrast runs.

    python3 scripts/synthetic_oracle.py --work /tmp/oracle
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from after.cli import main as cli

SEEDS = [1, 2, 3, 4, 5]
EPOCHS = 2
AFTER_LAMBDA = 0.1
CONTRAST = {"multitask": 0.1, "after": 1.0}


def _run(argv: list[str]) -> None:
    code = cli(argv)
    if code != 0:
        raise RuntimeError(f"after {' '.join(argv)} exited with {code}")


def _domain_trace(run_dir: Path, seed: int) -> list[dict]:
    lines = (run_dir / f"seed_{seed}" / "log.jsonl").read_text().splitlines()
    return [{"epoch": r["epoch"], "step": r["step"], "domain_loss": r["train_domain_loss"]}
            for r in map(json.loads, lines)]


def run_pipeline(work, seeds=SEEDS, pretrain_steps: int = 2000, contrast: bool = True) -> dict:
    """Generate data, pretrain, fine-tune SFT and AFTER, probe; returns the summary dict."""
    work = Path(work)
    syn, ckpt = work / "synth", work / "pre.ckpt"
    seed_arg = ",".join(map(str, seeds))
    timings = {}

    t0 = time.perf_counter()
    _run(["gen-synth", "--out", str(syn), "--seed", "7", "--force"])
    _run(["build-vocab", "--corpus", str(syn / "pretrain.txt"), "--out", str(work / "vocab.txt")])
    _run(["pretrain", "--corpus", str(syn / "pretrain.txt"), "--vocab", str(work / "vocab.txt"),
          "--out", str(ckpt), "--steps", str(pretrain_steps), "--seed", "0"])
    timings["pretrain_s"] = time.perf_counter() - t0

    common = ["--ckpt", str(ckpt), "--main", str(syn), "--seeds", seed_arg, "--epochs", str(EPOCHS)]
    t1 = time.perf_counter()
    _run(["finetune", *common, "--mode", "sft", "--out", str(work / "sft")])
    _run(["finetune", *common, "--mode", "after", "--lambda", str(AFTER_LAMBDA),
          "--aux", str(syn / "aux.jsonl"), "--out", str(work / "after")])
    named = [f"{mode}_{s}={work / mode / f'seed_{s}' / 'model.ckpt'}" for mode in ("sft", "after") for s in seeds]
    _run(["analyze", "probe", "--ckpt", *named, "--main", str(syn / "main_test.jsonl"),
          "--aux", str(syn / "aux.jsonl"), "--seed", "0", "--out", str(work / "probe")])
    timings["finetune_probe_s"] = time.perf_counter() - t1

    probe = json.loads((work / "probe.json").read_text())["probe_accuracy"]
    pre_log = [json.loads(l) for l in (work / "pre.ckpt.log.jsonl").read_text().splitlines()]
    summary = {
        "seeds": list(seeds),
        "epochs": EPOCHS,
        "after_lambda": AFTER_LAMBDA,
        "pretrain": {"steps": pretrain_steps, "first_loss": pre_log[0]["loss"], "last_loss": pre_log[-1]["loss"]},
        "per_seed": {},
        "timings": timings,
    }
    for s in seeds:
        row = {}
        for mode in ("sft", "after"):
            res = json.loads((work / mode / f"seed_{s}" / "result.json").read_text())
            row[f"{mode}_val_accuracy"] = res["selected_val_metrics"]["accuracy"]
            row[f"{mode}_probe"] = probe[f"{mode}_{s}"]
        summary["per_seed"][str(s)] = row

    if contrast:
        t2 = time.perf_counter()
        summary["contrast"] = {}
        for mode, lam in CONTRAST.items():
            out = work / f"contrast_{mode}"
            _run(["finetune", *common, "--mode", mode, "--lambda", str(lam),
                  "--aux", str(syn / "aux.jsonl"), "--out", str(out)])
            summary["contrast"][mode] = {"lambda": lam,
                                         "traces": {str(s): _domain_trace(out, s) for s in seeds}}
        timings["contrast_s"] = time.perf_counter() - t2
    return summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", required=True, help="scratch directory for data, checkpoints, runs")
    p.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests/fixtures/synthetic_oracle.json"),
                   help="summary JSON path")
    p.add_argument("--steps", type=int, default=2000, help="pretraining steps")
    args = p.parse_args(argv)
    summary = run_pipeline(args.work, pretrain_steps=args.steps)
    summary.pop("timings")
    Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary["per_seed"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
