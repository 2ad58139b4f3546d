"""Optimisation, MLM pretraining, the three fine-tuning regimes and lambda sweeps."""

from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autodiff import Graph
from .data import Batch, Dataset, balanced_batches, main_batches, make_batch, mlm_batch, steps_per_epoch
from .metrics import classification_report
from .model import (
    ConfigError,
    EncoderModel,
    VocabMismatchError,
    after_losses,
    encode,
    is_decayed,
    mlm_logits,
    multitask_losses,
    sft_loss,
    task_logits,
)

log = logging.getLogger(__name__)

MODES = ("sft", "after", "multitask")
DEFAULT_GRID = (0.1, 0.01, 0.001, 0.0001)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of one seeded run."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class TrainingDivergedError(RuntimeError):
    pass


# ------------------------------------------------------------- optimisation

@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(params: dict, grads: dict, state: AdamState, lr_t: float, cfg: AdamWConfig,
               decay: Callable[[str], bool] = is_decayed) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    ``params`` maps names to arrays (updated in place); names missing from
    ``grads`` or mapped to None are left untouched.
    """
    if lr_t < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr_t}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and decay(name):
            p -= lr_t * cfg.weight_decay * p
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def lr_at(step: int, total_steps: int, warmup_proportion: float, lr_peak: float) -> float:
    """Linear warmup to ``lr_peak`` then linear decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_proportion * total_steps)
    if step < warm:
        return lr_peak * step / warm
    if total_steps == warm:
        return 0.0 if step == total_steps else lr_peak
    return lr_peak * (total_steps - step) / (total_steps - warm)


def _apply_update(model: EncoderModel, opt: AdamState, lr: float, cfg: AdamWConfig) -> None:
    params = {k: t.data for k, t in model.params.items()}
    grads = {k: t.grad for k, t in model.params.items()}
    adamw_step(params, grads, opt, lr, cfg)
    model.zero_grad()


# ------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 28
    lr_peak: float = 1e-3
    warmup_proportion: float = 0.1
    weight_decay: float = 0.01
    adam_eps: float = 1e-6
    mask_prob: float = 0.15
    max_len: int = 128
    log_every: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must be in (0, 1)")


def mlm_loss(model: EncoderModel, g: Graph, seqs, rng, mask_prob: float, train: bool):
    ids, pad, rows, targets = mlm_batch(seqs, rng, model.config.vocab_size, mask_prob)
    rep = encode(model, g, ids, pad, train, rng)
    return g.cross_entropy_logits(mlm_logits(model, g, rep, rows), targets), len(targets)


def pretrain_mlm(model: EncoderModel, corpus: Sequence[Sequence[int]], cfg: PretrainConfig,
                 rng: np.random.Generator, on_log: Callable[[dict], None] | None = None) -> list[dict]:
    """Masked-LM training on tokenized sentences; returns the logged loss curve."""
    cfg.validate()
    corpus = [s for s in corpus if len(s) > 1]
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    top = max(max(s) for s in corpus)
    if top >= model.config.vocab_size:
        raise VocabMismatchError(f"corpus uses token id {top}, model vocab has {model.config.vocab_size}")
    opt = AdamState()
    adam = AdamWConfig(eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    curve = []
    order = rng.permutation(len(corpus))
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(corpus))
            cursor = 0
        seqs = [corpus[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        g = Graph()
        loss, _ = mlm_loss(model, g, seqs, rng, cfg.mask_prob, True)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"pretraining loss became {value} at step {step}")
        g.backward(loss)
        lr = lr_at(step, cfg.steps, cfg.warmup_proportion, cfg.lr_peak)
        _apply_update(model, opt, lr, adam)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = {"step": step, "loss": value, "lr": lr}
            curve.append(rec)
            if on_log:
                on_log(rec)
    return curve


# ------------------------------------------------------------- fine-tuning

@dataclass
class TrainConfig:
    mode: str = "after"
    lam: float = 0.1
    lr_peak: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_proportion: float = 0.1
    epochs: int = 4
    batch_size: int = 28
    evals_per_epoch: int = 5
    eval_batch_size: int = 250
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    selection_metric: str = "accuracy"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "sft" and self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 1 or self.evals_per_epoch < 1:
            raise ConfigError("epochs and evals_per_epoch must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not self.lambda_grid:
            raise ConfigError("lambda grid is empty")
        if not self.seeds:
            raise ConfigError("no seeds given")
        if self.selection_metric not in ("accuracy", "f1", "mcc"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")

    def adam(self) -> AdamWConfig:
        return AdamWConfig(self.adam_beta1, self.adam_beta2, self.adam_eps, self.weight_decay)


class MainData(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset | None = None


@dataclass
class EvalRecord:
    step: int
    epoch: int
    train_main_loss: float
    train_domain_loss: float | None
    val_loss: float
    val_metrics: dict[str, float]


@dataclass
class RunResult:
    mode: str
    lam: float | None
    seed: int
    evals: list[EvalRecord]
    selected_step: int
    selected_val_loss: float
    selected_val_metrics: dict[str, float]
    test_metrics: dict[str, float] | None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["evals"] = [EvalRecord(**e) for e in d["evals"]]
        return cls(**d)


def evaluate(model: EncoderModel, data: Dataset, batch_size: int = 250) -> tuple[float, dict[str, float]]:
    """Mean task cross-entropy and metrics on a labeled split, eval mode."""
    total, preds, golds = 0.0, [], []
    for s in range(0, len(data), batch_size):
        batch = make_batch(data.examples[s:s + batch_size])
        g = Graph(grad_enabled=False)
        rep = encode(model, g, batch.ids, batch.pad_mask)
        logits = task_logits(model, g, rep)
        total += g.cross_entropy_logits(logits, batch.task_labels).item() * len(batch)
        preds.append(logits.data.argmax(axis=1))
        golds.append(batch.task_labels)
    return total / len(data), classification_report(np.concatenate(preds), np.concatenate(golds))


def eval_steps(steps: int, evals_per_epoch: int) -> list[int]:
    """Within-epoch step counts after which to evaluate: ceil(k*steps/E), k=1..E.

    Repeats (fewer steps than evaluations) collapse to one evaluation.
    """
    return sorted({math.ceil(k * steps / evals_per_epoch) for k in range(1, evals_per_epoch + 1)})


def _step_losses(model, g, batch: Batch, cfg: TrainConfig, rng):
    if cfg.mode in ("after", "multitask"):
        fn = after_losses if cfg.mode == "after" else multitask_losses
        losses = fn(model, g, batch, cfg.lam, True, rng)
        return losses.main, losses.domain, losses.total
    if (batch.task_labels < 0).any():
        # Injected mixed schedules: unlabeled rows are masked out of the task loss.
        losses = after_losses(model, g, batch, 0.0, True, rng)
        return losses.main, None, losses.main
    loss = sft_loss(model, g, batch, True, rng)
    return loss, None, loss


def finetune(model: EncoderModel, main: MainData, aux: Dataset | None, cfg: TrainConfig, seed: int,
             schedule: Callable[[int], list[Batch]] | None = None,
             on_eval: Callable[[dict], None] | None = None) -> RunResult:
    """Fine-tune a copy of ``model`` and return the validation-selected run.

    ``schedule(epoch)`` overrides the batcher; it exists so tests can feed two
    regimes an identical batch stream.
    """
    return _finetune_in_place(model.clone(), main, aux, cfg, seed, schedule, on_eval)


def _finetune_in_place(model, main, aux, cfg, seed, schedule=None, on_eval=None) -> RunResult:
    cfg.validate()
    if cfg.mode == "sft" and aux is not None:
        raise ConfigError("standard fine-tuning does not use auxiliary data")
    if cfg.mode != "sft" and aux is None and schedule is None:
        raise ConfigError(f"mode {cfg.mode!r} needs an auxiliary dataset")
    model.reinit_heads(substream(seed, "heads"))
    batch_rng = substream(seed, "batches")
    drop_rng = substream(seed, "dropout")
    balanced = cfg.mode != "sft"

    def epoch_batches(epoch: int) -> list[Batch]:
        if schedule is not None:
            return schedule(epoch)
        if balanced:
            return balanced_batches(main.train, aux, cfg.batch_size, batch_rng)
        return main_batches(main.train, cfg.batch_size, batch_rng)

    per_epoch = steps_per_epoch(len(main.train), cfg.batch_size, balanced)
    if schedule is not None:
        per_epoch = len(schedule(0))
    total = per_epoch * cfg.epochs
    opt = AdamState()
    adam = cfg.adam()
    evals: list[EvalRecord] = []
    best_loss, best_state, best_step, best_metrics = math.inf, None, -1, {}
    step = 0
    for epoch in range(cfg.epochs):
        batches = epoch_batches(epoch)
        if len(batches) != per_epoch:
            raise ValueError(f"epoch {epoch} has {len(batches)} batches, expected {per_epoch}")
        checkpoints = eval_steps(per_epoch, cfg.evals_per_epoch)
        window_main, window_dom = [], []
        k = 0
        for i, batch in enumerate(batches, 1):
            g = Graph()
            main_loss, dom_loss, total_loss = _step_losses(model, g, batch, cfg, drop_rng)
            value = total_loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: L_Main={main_loss.item()}, "
                    f"L_Domain={None if dom_loss is None else dom_loss.item()}")
            g.backward(total_loss)
            _apply_update(model, opt, lr_at(step, total, cfg.warmup_proportion, cfg.lr_peak), adam)
            step += 1
            window_main.append(main_loss.item())
            if dom_loss is not None:
                window_dom.append(dom_loss.item())
            if k < len(checkpoints) and checkpoints[k] == i:
                val_loss, val_metrics = evaluate(model, main.val, cfg.eval_batch_size)
                rec = EvalRecord(step, epoch + 1, float(np.mean(window_main)),
                                 float(np.mean(window_dom)) if window_dom else None,
                                 val_loss, val_metrics)
                evals.append(rec)
                if on_eval:
                    on_eval(asdict(rec))
                if val_loss < best_loss:
                    best_loss, best_state, best_step, best_metrics = val_loss, model.state(), step, val_metrics
                window_main, window_dom = [], []
                k += 1
    model.load_state(best_state)
    test_metrics = evaluate(model, main.test, cfg.eval_batch_size)[1] if main.test is not None else None
    return RunResult(cfg.mode, None if cfg.mode == "sft" else cfg.lam, seed, evals,
                     best_step, best_loss, best_metrics, test_metrics)


def finetune_model(model: EncoderModel, main: MainData, aux: Dataset | None, cfg: TrainConfig,
                   seed: int, **kw) -> tuple[RunResult, EncoderModel]:
    """Like :func:`finetune` but also returns the selected parameters as a model."""
    tuned = model.clone()
    return _finetune_in_place(tuned, main, aux, cfg, seed, **kw), tuned


# ------------------------------------------------------------- aggregation

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation; std is 0 for n == 1."""
    if len(values) == 0:
        raise ValueError("cannot aggregate an empty list")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    """Mean/std over runs for every validation and test metric of the selected snapshots."""
    if not results:
        raise ValueError("cannot aggregate an empty list")
    out = {}
    for key in results[0].selected_val_metrics:
        m, s = mean_std([r.selected_val_metrics[key] for r in results])
        out[f"val_{key}"] = {"mean": m, "std": s}
    if all(r.test_metrics is not None for r in results):
        for key in results[0].test_metrics:
            m, s = mean_std([r.test_metrics[key] for r in results])
            out[f"test_{key}"] = {"mean": m, "std": s}
    m, s = mean_std([r.selected_val_loss for r in results])
    out["val_loss"] = {"mean": m, "std": s}
    return out


@dataclass
class SweepResult:
    main_name: str
    aux_name: str
    mode: str
    grid: list[float]
    seeds: list[int]
    runs: list[dict]                     # one cell per (lambda, seed), in grid-major order
    per_lambda: dict[str, dict]          # str(lambda) -> aggregate()
    best_lambda: float | None
    selection_metric: str

    def to_dict(self) -> dict:
        return asdict(self)


def _run_cell(args):
    model, main, aux, cfg, lam, seed = args
    cell_cfg = TrainConfig(**{**asdict(cfg), "lam": lam})
    try:
        return {"lambda": lam, "seed": seed, "result": finetune(model, main, aux, cell_cfg, seed).to_dict(),
                "error": None}
    except Exception as e:  # recorded per cell, the sweep carries on
        return {"lambda": lam, "seed": seed, "result": None, "error": f"{type(e).__name__}: {e}"}


def lambda_sweep(model: EncoderModel, main: MainData, aux: Dataset, cfg: TrainConfig,
                 jobs: int = 1, main_name: str = "main", aux_name: str = "aux") -> SweepResult:
    """Fine-tune every (lambda, seed) cell and pick the lambda with best mean validation metric."""
    cfg.validate()
    if cfg.mode == "sft":
        raise ConfigError("a lambda sweep needs mode 'after' or 'multitask'")
    cells = [(model, main, aux, cfg, lam, seed) for lam in cfg.lambda_grid for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_cell, cells))
    else:
        runs = [_run_cell(c) for c in cells]
    per_lambda, best, best_score = {}, None, -math.inf
    for lam in cfg.lambda_grid:
        ok = [RunResult.from_dict(r["result"]) for r in runs if r["lambda"] == lam and r["result"]]
        if not ok:
            per_lambda[str(lam)] = {"n_runs": 0}
            continue
        agg = aggregate(ok)
        agg["n_runs"] = len(ok)
        per_lambda[str(lam)] = agg
        score = agg[f"val_{cfg.selection_metric}"]["mean"]
        if score > best_score:
            best, best_score = lam, score
    return SweepResult(main_name, aux_name, cfg.mode, list(cfg.lambda_grid), list(cfg.seeds),
                       runs, per_lambda, best, cfg.selection_metric)


def best_lambda_table(sweeps: Sequence[SweepResult]) -> str:
    """Best lambda per (Auxiliary row, Main column), as an aligned text grid."""
    mains = sorted({s.main_name for s in sweeps})
    auxes = sorted({s.aux_name for s in sweeps})
    cell = {(s.aux_name, s.main_name): ("-" if s.best_lambda is None else f"{s.best_lambda:g}") for s in sweeps}
    rows = [[""] + mains] + [[a] + [cell.get((a, m), "-") for m in mains] for a in auxes]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def per_lambda_table(sweep: SweepResult) -> str:
    metric = f"val_{sweep.selection_metric}"
    rows = [["lambda", "runs", f"{metric} mean", "std"]]
    for lam in sweep.grid:
        agg = sweep.per_lambda[str(lam)]
        if agg.get("n_runs", 0) == 0:
            rows.append([f"{lam:g}", "0", "-", "-"])
        else:
            rows.append([f"{lam:g}", str(agg["n_runs"]), f"{agg[metric]['mean']:.4f}", f"{agg[metric]['std']:.4f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
