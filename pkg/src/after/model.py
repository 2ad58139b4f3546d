"""Toy pretrained-LM analogue: one pre-norm transformer block with [CLS] pooling.

Three linear heads sit on top of the encoder: a task head and a domain head
(both reading the [CLS] state) and a masked-LM head over every token state.
The adversarial domain path puts a gradient-reversal op between [CLS] and
the domain head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import EmptyLossError, Graph, ShapeError, Tensor
from .data import CLS_ID, PAD_ID, Batch

CHECKPOINT_MAGIC = b"AFTRCKPT1\n"


class ConfigError(ValueError):
    pass


class VocabMismatchError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    n_task_classes: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    dropout_p: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 6:
            raise ConfigError(f"vocab_size must cover the 5 specials plus a word, got {self.vocab_size}")
        if self.n_task_classes < 2:
            raise ConfigError("need at least 2 task classes")
        if self.d_model < 2 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be positive")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for [CLS] plus one token")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, int]]:
    d, f, V, C = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_task_classes
    return {
        "tok_emb": (V, d),
        "pos_emb": (cfg.max_len, d),
        "ln1_g": (1, d), "ln1_b": (1, d),
        "Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
        "ln2_g": (1, d), "ln2_b": (1, d),
        "W1": (d, f), "b1": (1, f), "W2": (f, d), "b2": (1, d),
        "task_W": (d, C), "task_b": (1, C),
        "domain_W": (d, 2), "domain_b": (1, 2),
        "mlm_W": (d, V), "mlm_b": (1, V),
    }


HEAD_PARAMS = ("task_W", "task_b", "domain_W", "domain_b")
ENCODER_PARAMS = ("tok_emb", "pos_emb", "ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo",
                  "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name in ("ln1_g", "ln2_g"):
        return np.ones(shape)
    if name.endswith("_b") or name in ("b1", "b2"):
        return np.zeros(shape)
    w = rng.normal(0.0, 0.02, size=shape)
    if name == "tok_emb":
        w[PAD_ID] = 0.0
    return w


def is_decayed(name: str) -> bool:
    """Weight matrices and embeddings decay; biases and layer-norm params do not."""
    return not (name.endswith("_b") or name in ("b1", "b2", "ln1_g", "ln2_g"))


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "EncoderModel":
        return EncoderModel(
            EncoderConfig(**asdict(self.config)),
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            self.params[k].data[...] = arr

    def reinit_heads(self, rng: np.random.Generator) -> None:
        for name in HEAD_PARAMS:
            t = self.params[name]
            t.data = _init_value(name, t.shape, rng)
            t.grad = None


def expected_param_count(cfg: EncoderConfig) -> int:
    d, f, V, C, L = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_task_classes, cfg.max_len
    return V * d + L * d + 4 * d * d + 4 * d + 2 * d * f + f + d + (d * C + C) + (2 * d + 2) + (d * V + V)


def init_model(config: EncoderConfig) -> EncoderModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {name: Tensor(_init_value(name, shape, rng), requires_grad=True, name=name)
              for name, shape in param_shapes(config).items()}
    return EncoderModel(config, params)


class SequenceRepr(NamedTuple):
    cls: Tensor
    token_states: Tensor
    batch: int
    seq: int


def encode(model: EncoderModel, g: Graph, ids, pad_mask, train: bool = False,
           rng: np.random.Generator | None = None) -> SequenceRepr:
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != pad_mask.shape:
        raise ShapeError(f"ids {ids.shape} and mask {pad_mask.shape} must be matching 2-D arrays")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ShapeError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if not (ids[:, 0] == CLS_ID).all() or not pad_mask[:, 0].all():
        raise ValueError("every sequence must begin with [CLS]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    if train and cfg.dropout_p > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    p = model.params
    drop = cfg.dropout_p

    x = g.add(g.embedding_gather(p["tok_emb"], ids.reshape(-1)),
              g.embedding_gather(p["pos_emb"], np.tile(np.arange(T), B)))
    x = g.dropout(x, drop, rng, train)

    h = g.layer_norm(x, p["ln1_g"], p["ln1_b"])
    a = g.attention(g.matmul(h, p["Wq"]), g.matmul(h, p["Wk"]), g.matmul(h, p["Wv"]),
                    pad_mask, cfg.n_heads)
    x = g.add(x, g.dropout(g.matmul(a, p["Wo"]), drop, rng, train))

    h = g.layer_norm(x, p["ln2_g"], p["ln2_b"])
    ff = g.add_bias(g.matmul(g.gelu(g.add_bias(g.matmul(h, p["W1"]), p["b1"])), p["W2"]), p["b2"])
    x = g.add(x, g.dropout(ff, drop, rng, train))

    cls = g.take_rows(x, np.arange(B) * T)
    return SequenceRepr(cls, x, B, T)


def task_logits(model: EncoderModel, g: Graph, rep: SequenceRepr) -> Tensor:
    return g.add_bias(g.matmul(rep.cls, model["task_W"]), model["task_b"])


def domain_logits_plain(model: EncoderModel, g: Graph, rep: SequenceRepr) -> Tensor:
    return g.add_bias(g.matmul(rep.cls, model["domain_W"]), model["domain_b"])


def domain_logits_adversarial(model: EncoderModel, g: Graph, rep: SequenceRepr) -> Tensor:
    rev = g.grad_reverse(rep.cls)
    return g.add_bias(g.matmul(rev, model["domain_W"]), model["domain_b"])


def mlm_logits(model: EncoderModel, g: Graph, rep: SequenceRepr, rows=None) -> Tensor:
    """MLM logits for every token state, or only for ``rows`` when given."""
    states = rep.token_states if rows is None else g.take_rows(rep.token_states, rows)
    return g.add_bias(g.matmul(states, model["mlm_W"]), model["mlm_b"])


class Losses(NamedTuple):
    main: Tensor
    domain: Tensor | None
    total: Tensor
    # L_Main - lambda * L_Domain, the quantity the encoder effectively minimises.
    objective: float


def _task_loss(model, g, rep, batch: Batch) -> Tensor:
    mask = batch.task_labels >= 0
    if not mask.any():
        raise EmptyLossError("batch has no labeled Main rows")
    return g.cross_entropy_logits(task_logits(model, g, rep), np.where(mask, batch.task_labels, 0), mask)


def after_losses(model: EncoderModel, g: Graph, batch: Batch, lam: float, train: bool = False,
                 rng: np.random.Generator | None = None) -> Losses:
    """Adversarial losses: backprop of ``total`` gives the encoder grad(L_Main) - lam*grad(L_Domain).

    ``lam`` must be non-negative; zero is only meaningful as a degenerate check.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0 for adversarial training, got {lam}; use multitask_losses")
    rep = encode(model, g, batch.ids, batch.pad_mask, train, rng)
    main = _task_loss(model, g, rep, batch)
    domain = g.cross_entropy_logits(domain_logits_adversarial(model, g, rep), batch.domain_labels)
    total = g.add(main, g.scale(domain, lam))
    return Losses(main, domain, total, main.item() - lam * domain.item())


def multitask_losses(model: EncoderModel, g: Graph, batch: Batch, weight: float, train: bool = False,
                     rng: np.random.Generator | None = None) -> Losses:
    if weight < 0:
        raise ConfigError(f"multi-task weight must be >= 0, got {weight}")
    rep = encode(model, g, batch.ids, batch.pad_mask, train, rng)
    main = _task_loss(model, g, rep, batch)
    domain = g.cross_entropy_logits(domain_logits_plain(model, g, rep), batch.domain_labels)
    total = g.add(main, g.scale(domain, weight))
    return Losses(main, domain, total, main.item() + weight * domain.item())


def sft_loss(model: EncoderModel, g: Graph, batch: Batch, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    if (batch.task_labels < 0).any():
        raise ValueError("standard fine-tuning batch contains unlabeled rows")
    rep = encode(model, g, batch.ids, batch.pad_mask, train, rng)
    return _task_loss(model, g, rep, batch)


# ----------------------------------------------------------------- checkpoints

def vocab_hash(tokens: list[str]) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


def save_checkpoint(path, model: EncoderModel, vocab_tokens: list[str]) -> None:
    if len(vocab_tokens) != model.config.vocab_size:
        raise VocabMismatchError(
            f"vocab has {len(vocab_tokens)} tokens, model expects {model.config.vocab_size}")
    manifest, offset = [], 0
    for name, t in model.params.items():
        manifest.append({"name": name, "rows": t.rows, "cols": t.cols, "offset": offset})
        offset += t.data.size * 4
    header = {
        "config": asdict(model.config),
        "vocab_hash": vocab_hash(vocab_tokens),
        "vocab": vocab_tokens,
        "params": manifest,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in model.params.values():
            fh.write(t.data.astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[EncoderModel, list[str]]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an AFTER checkpoint (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    cfg = EncoderConfig(**header["config"])
    cfg.validate()
    vocab = header["vocab"]
    if vocab_hash(vocab) != header["vocab_hash"]:
        raise VocabMismatchError(f"{path}: vocab hash does not match stored vocabulary")
    expected = param_shapes(cfg)
    params = {}
    for entry in header["params"]:
        name, r, c, off = entry["name"], entry["rows"], entry["cols"], entry["offset"]
        if expected.get(name) != (r, c):
            raise ShapeError(f"{path}: parameter {name} has shape {(r, c)}, config implies {expected.get(name)}")
        arr = np.frombuffer(blob, dtype="<f4", count=r * c, offset=off).astype(np.float64)
        params[name] = Tensor(arr.reshape(r, c), requires_grad=True, name=name)
    if set(params) != set(expected):
        raise ValueError(f"{path}: missing parameters {sorted(set(expected) - set(params))}")
    return EncoderModel(cfg, {k: params[k] for k in expected}), vocab
