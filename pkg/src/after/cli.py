"""Command-line pipeline: synthetic data, vocab, pretraining, fine-tuning, sweeps, analysis.

Exit codes: 0 on success, 2 for usage errors (bad flags, inconsistent
options, missing inputs), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import domain_probe, jsd_matrix, matrix_csv, matrix_json, mlm_probe, overlap_matrix
from .data import (
    SynthSpec,
    Vocab,
    build_vocab,
    encode_text,
    gen_synthetic,
    load_jsonl,
    load_main_dir,
    read_corpus,
    write_synthetic,
)
from .model import EncoderConfig, init_model, load_checkpoint, save_checkpoint
from .training import (
    DEFAULT_GRID,
    MainData,
    PretrainConfig,
    TrainConfig,
    aggregate,
    best_lambda_table,
    finetune_model,
    lambda_sweep,
    per_lambda_table,
    pretrain_mlm,
    substream,
)

log = logging.getLogger("after")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Manifest:
    """Run manifest written before work starts and finalised when it ends."""

    def __init__(self, path, config: dict, seeds, inputs):
        self.path = Path(path)
        self.data = {
            "command": sys.argv[:],
            "config": config,
            "seeds": list(seeds),
            "version": version_string(),
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
        }
        write_atomic(self.path, dump_json(self.data))

    def finish(self) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_atomic(self.path, dump_json(self.data))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "config file")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _dataclass_from(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _named_paths(items) -> dict[str, Path]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).stem
        out[name] = _require_file(path, "input file")
    return out


# --------------------------------------------------------------- commands

def cmd_gen_synth(args) -> None:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    spec = SynthSpec(seed=args.seed)
    for flag, attr in (("rho", "rho"), ("len", "length"), ("cue_frac", "cue_frac"), ("zipf", "zipf"),
                       ("n_train", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"),
                       ("n_aux", "n_aux"), ("n_pretrain", "n_pretrain")):
        value = getattr(args, flag)
        if value is not None:
            setattr(spec, attr, value)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    corpus = gen_synthetic(spec, np.random.default_rng(spec.seed))
    for p in write_synthetic(corpus, out):
        log.info("wrote %s", p)


def cmd_build_vocab(args) -> None:
    lines = []
    for path in args.corpus:
        lines += read_corpus(_require_file(path, "corpus"))
    try:
        vocab = build_vocab(lines, args.size)
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_atomic(args.out, "\n".join(vocab.tokens) + "\n")
    log.info("vocabulary of %d tokens written to %s", len(vocab), args.out)


def cmd_pretrain(args) -> None:
    vocab_path = _require_file(args.vocab, "vocab file")
    corpus_path = _require_file(args.corpus, "corpus")
    raw = _load_config(args.config)
    model_cfg = dict(raw.get("model", {}))
    pre_cfg = dict(raw.get("pretrain", {}))
    if args.steps is not None:
        pre_cfg["steps"] = args.steps
    if args.seed is not None:
        pre_cfg["seed"] = args.seed
    vocab = Vocab.load(vocab_path)
    model_cfg["vocab_size"] = len(vocab)
    pcfg = _dataclass_from(PretrainConfig, pre_cfg)
    model_cfg.setdefault("seed", pcfg.seed)
    model_cfg.setdefault("max_len", pcfg.max_len)
    mcfg = _dataclass_from(EncoderConfig, model_cfg)
    try:
        mcfg.validate()
        pcfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None

    out = Path(args.out)
    manifest = Manifest(out.with_name(out.name + ".manifest.json"),
                        {"model": asdict(mcfg), "pretrain": asdict(pcfg)}, [pcfg.seed],
                        [corpus_path, vocab_path] + ([args.config] if args.config else []))
    corpus = [encode_text(vocab, s, mcfg.max_len) for s in read_corpus(corpus_path)]
    model = init_model(mcfg)
    log_lines = []

    def on_log(rec):
        log_lines.append(json.dumps(rec, sort_keys=True))
        log.info("step %d loss %.4f", rec["step"], rec["loss"])

    pretrain_mlm(model, corpus, pcfg, substream(pcfg.seed, "pretrain"), on_log)
    save_checkpoint(out, model, vocab.tokens)
    write_atomic(out.with_name(out.name + ".log.jsonl"), "\n".join(log_lines) + "\n")
    manifest.finish()


TRAIN_FLAGS = (("epochs", "epochs"), ("lr", "lr_peak"), ("batch_size", "batch_size"),
               ("evals_per_epoch", "evals_per_epoch"), ("warmup", "warmup_proportion"),
               ("weight_decay", "weight_decay"), ("metric", "selection_metric"))


def _train_config(args, base: dict) -> TrainConfig:
    values = dict(base)
    for flag, key in TRAIN_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    cfg = _dataclass_from(TrainConfig, values)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


def _load_inputs(args, vocab: Vocab, max_len: int):
    main_dir = Path(args.main)
    if not (main_dir / "main_train.jsonl").is_file() or not (main_dir / "main_val.jsonl").is_file():
        raise UsageError(f"{main_dir} must contain main_train.jsonl and main_val.jsonl")
    train, val, test = load_main_dir(main_dir, vocab, max_len)
    aux = None
    if getattr(args, "aux", None):
        aux = load_jsonl(_require_file(args.aux, "auxiliary file"), "auxiliary", vocab=vocab, max_len=max_len)
    inputs = [main_dir / "main_train.jsonl", main_dir / "main_val.jsonl"]
    if test is not None:
        inputs.append(main_dir / "main_test.jsonl")
    if aux is not None:
        inputs.append(Path(args.aux))
    return MainData(train, val, test), aux, inputs


def cmd_finetune(args) -> None:
    base = _load_config(args.config)
    mode = args.mode or base.get("mode", "after")
    if mode not in ("sft", "after", "multitask"):
        raise UsageError(f"unknown mode {mode!r}")
    base["mode"] = mode
    if args.lam is not None:
        if mode == "sft":
            log.warning("--lambda is ignored in sft mode")
        else:
            base["lam"] = args.lam
    if args.seeds is not None:
        base["seeds"] = _parse_seeds(args.seeds)
    if mode != "sft":
        if not args.aux:
            raise UsageError(f"--mode {mode} requires --aux")
        if base.get("lam", TrainConfig.lam) <= 0:
            raise UsageError("lambda must be > 0")
    elif args.aux:
        raise UsageError("--mode sft does not take --aux")
    cfg = _train_config(args, base)
    ckpt = _require_file(args.ckpt, "checkpoint")
    model, vocab_tokens = load_checkpoint(ckpt)
    vocab = Vocab(vocab_tokens)
    main, aux, inputs = _load_inputs(args, vocab, model.config.max_len)

    out = Path(args.out)
    manifest = Manifest(out / "manifest.json", asdict(cfg), cfg.seeds, [ckpt] + inputs)
    results = []
    for seed in cfg.seeds:
        lines = []
        result, tuned = finetune_model(model, main, aux, cfg, seed,
                                       on_eval=lambda rec: lines.append(json.dumps(rec, sort_keys=True)))
        seed_dir = out / f"seed_{seed}"
        write_atomic(seed_dir / "result.json", dump_json(result.to_dict()))
        write_atomic(seed_dir / "log.jsonl", "\n".join(lines) + "\n")
        save_checkpoint(seed_dir / "model.ckpt", tuned, vocab_tokens)
        results.append(result)
        log.info("seed %d: selected step %d, val %s", seed, result.selected_step, result.selected_val_metrics)
    summary = {"mode": cfg.mode, "lambda": None if cfg.mode == "sft" else cfg.lam,
               "seeds": cfg.seeds, "metrics": aggregate(results)}
    write_atomic(out / "aggregate.json", dump_json(summary))
    manifest.finish()


def cmd_sweep(args) -> None:
    base = _load_config(args.config)
    base["mode"] = args.mode or base.get("mode", "after")
    if base["mode"] == "sft":
        raise UsageError("sweep needs --mode after or multitask")
    if args.grid is not None:
        base["lambda_grid"] = _parse_floats(args.grid)
    if args.seeds is not None:
        base["seeds"] = _parse_seeds(args.seeds)
    if any(l <= 0 for l in base.get("lambda_grid", DEFAULT_GRID)):
        raise UsageError("every lambda in the grid must be > 0")
    cfg = _train_config(args, base)
    jobs = args.jobs
    if jobs is None:
        jobs = int(os.environ.get("AFTER_JOBS", 0)) or os.cpu_count() or 1
    ckpt = _require_file(args.ckpt, "checkpoint")
    model, vocab_tokens = load_checkpoint(ckpt)
    main, aux, inputs = _load_inputs(args, Vocab(vocab_tokens), model.config.max_len)
    if aux is None:
        raise UsageError("sweep requires --aux")

    out = Path(args.out)
    manifest = Manifest(out / "manifest.json", asdict(cfg), cfg.seeds, [ckpt] + inputs)
    main_name = args.main_name or Path(args.main).name
    aux_name = args.aux_name or Path(args.aux).stem
    sweep = lambda_sweep(model, main, aux, cfg, jobs=jobs, main_name=main_name, aux_name=aux_name)
    for cell in sweep.runs:
        write_atomic(out / "runs" / f"lambda_{cell['lambda']:g}_seed_{cell['seed']}.json", dump_json(cell))
    write_atomic(out / "sweep.json", dump_json(sweep.to_dict()))
    write_atomic(out / "table.txt", best_lambda_table([sweep]))
    write_atomic(out / "per_lambda.txt", per_lambda_table(sweep))
    manifest.finish()
    failed = [c for c in sweep.runs if c["error"]]
    if failed:
        log.error("%d of %d sweep cells failed", len(failed), len(sweep.runs))


def _write_matrix(prefix, mat) -> None:
    write_atomic(f"{prefix}.csv", matrix_csv(mat))
    write_atomic(f"{prefix}.json", matrix_json(mat))


def cmd_analyze(args) -> None:
    if args.analysis == "jsd":
        corpora = {n: read_corpus(p) for n, p in _named_paths(args.corpus).items()}
        _write_matrix(args.out, jsd_matrix(corpora, args.top_k))
    elif args.analysis == "overlap":
        rows = {n: read_corpus(p) for n, p in _named_paths(args.rows).items()}
        cols = {n: read_corpus(p) for n, p in _named_paths(args.cols or args.rows).items()}
        _write_matrix(args.out, overlap_matrix(rows, cols, args.top_k))
    elif args.analysis == "mlm":
        model, tokens = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
        vocab = Vocab(tokens)
        report = {}
        for name, path in _named_paths(args.data).items():
            report[name] = mlm_probe(model, vocab, read_corpus(path), substream(args.seed, f"mlm:{name}"),
                                     n_passes=args.passes)
        write_atomic(f"{args.out}.json", dump_json({"mlm_loss": report, "passes": args.passes, "seed": args.seed}))
    elif args.analysis == "probe":
        report = {}
        for name, path in _named_paths(args.ckpt).items():
            model, tokens = load_checkpoint(path)
            vocab = Vocab(tokens)
            main = load_jsonl(_require_file(args.main, "main file"), "main", vocab=vocab,
                              max_len=model.config.max_len)
            aux = load_jsonl(_require_file(args.aux, "auxiliary file"), "auxiliary", vocab=vocab,
                             max_len=model.config.max_len)
            report[name] = domain_probe(model, main, aux, substream(args.seed, "probe"))
        write_atomic(f"{args.out}.json", dump_json({"probe_accuracy": report, "seed": args.seed}))


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*a, **kw)


def _add_train_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--seeds", help=f"comma-separated seeds (config default {','.join(map(str, d.seeds))})")
    p.add_argument("--epochs", type=int, help=f"epochs (config default {d.epochs})")
    p.add_argument("--lr", type=float, help=f"peak learning rate (config default {d.lr_peak})")
    p.add_argument("--batch-size", type=int, help=f"even batch size (config default {d.batch_size})")
    p.add_argument("--evals-per-epoch", type=int, help=f"evaluations per epoch (config default {d.evals_per_epoch})")
    p.add_argument("--warmup", type=float, help=f"warmup proportion (config default {d.warmup_proportion})")
    p.add_argument("--weight-decay", type=float, help=f"decoupled weight decay (config default {d.weight_decay})")
    p.add_argument("--metric", choices=("accuracy", "f1", "mcc"),
                   help=f"validation metric used to pick lambda (config default {d.selection_metric})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="after", description="Domain-adversarial fine-tuning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write the synthetic two-domain benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--rho", type=float, help="shortcut rate for Main-train class A (default 0.9)")
    p.add_argument("--len", type=int, help="sentence length in words (default 20)")
    p.add_argument("--cue-frac", type=float, help="fraction of class cue words (default 0.3)")
    p.add_argument("--zipf", type=float, help="within-group Zipf exponent (default 1.5)")
    p.add_argument("--n-train", type=int, help="Main train size (default 2000)")
    p.add_argument("--n-val", type=int, help="Main validation size (default 500)")
    p.add_argument("--n-test", type=int, help="Main test size (default 500)")
    p.add_argument("--n-aux", type=int, help="Auxiliary size (default 10000)")
    p.add_argument("--n-pretrain", type=int, help="pretraining sentences (default 20000)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-vocab", help="build a word-level vocabulary")
    p.add_argument("--corpus", nargs="+", required=True, help="text or JSONL corpus files")
    p.add_argument("--size", type=int, default=30000, help="maximum vocabulary size incl. specials")
    p.add_argument("--out", required=True, help="vocab file, one token per line")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="masked-LM pretraining")
    p.add_argument("--config", help='JSON with optional "model" (EncoderConfig) and "pretrain" sections')
    p.add_argument("--corpus", required=True, help="pretraining corpus (text or JSONL)")
    p.add_argument("--vocab", required=True, help="vocab file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, help=f"training steps (config default {PretrainConfig.steps})")
    p.add_argument("--seed", type=int, help=f"run seed (config default {PretrainConfig.seed})")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with sft, after or multitask")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--main", required=True, help="directory with main_{train,val,test}.jsonl")
    p.add_argument("--aux", help="auxiliary JSONL (required for after/multitask)")
    p.add_argument("--mode", choices=("sft", "after", "multitask"), help="fine-tuning regime (default after)")
    p.add_argument("--lambda", dest="lam", type=float, help=f"domain loss weight (config default {TrainConfig.lam})")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="lambda grid x seeds sweep")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--main", required=True, help="directory with main_{train,val,test}.jsonl")
    p.add_argument("--aux", required=True, help="auxiliary JSONL")
    p.add_argument("--mode", choices=("after", "multitask"), help="regime (default after)")
    p.add_argument("--grid", help=f"comma-separated lambdas (default {','.join(map(str, DEFAULT_GRID))})")
    p.add_argument("--jobs", type=int, help="worker processes (default $AFTER_JOBS or all cores)")
    p.add_argument("--main-name", help="column label in the table (default: main dir name)")
    p.add_argument("--aux-name", help="row label in the table (default: aux file stem)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="corpus distances and model probes")
    asub = p.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    a = asub.add_parser("jsd", help="Jensen-Shannon divergence matrix")
    a.add_argument("--corpus", nargs="+", required=True, help="NAME=PATH or PATH entries")
    a.add_argument("--top-k", type=int, default=5000, help="per-corpus words in the joint vocabulary")
    a.add_argument("--out", required=True, help="output prefix (.csv and .json)")
    a = asub.add_parser("overlap", help="directional vocabulary overlap matrix (%%)")
    a.add_argument("--rows", nargs="+", required=True, help="NAME=PATH row corpora")
    a.add_argument("--cols", nargs="+", help="NAME=PATH column corpora (default: the rows)")
    a.add_argument("--top-k", type=int, default=10000, help="words per corpus vocabulary")
    a.add_argument("--out", required=True, help="output prefix (.csv and .json)")
    a = asub.add_parser("mlm", help="average masked-LM loss per dataset")
    a.add_argument("--ckpt", required=True, help="checkpoint")
    a.add_argument("--data", nargs="+", required=True, help="NAME=PATH datasets")
    a.add_argument("--passes", type=int, default=5, help="mask draws averaged")
    a.add_argument("--seed", type=int, default=0, help="masking seed")
    a.add_argument("--out", required=True, help="output prefix (.json)")
    a = asub.add_parser("probe", help="linear domain probe on frozen [CLS] states")
    a.add_argument("--ckpt", nargs="+", required=True, help="NAME=CKPT entries")
    a.add_argument("--main", required=True, help="Main JSONL (held-out split)")
    a.add_argument("--aux", required=True, help="Auxiliary JSONL")
    a.add_argument("--seed", type=int, default=0, help="sampling seed")
    a.add_argument("--out", required=True, help="output prefix (.json)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"after {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"after {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
