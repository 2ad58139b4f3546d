"""Corpus ingestion, word-level vocabulary, MLM masking and domain-balanced batching.

Also holds the synthetic two-domain benchmark generator used for desk-scale
experiments.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)

MAIN_DOMAIN, AUX_DOMAIN = 0, 1

# Stripped from both ends of every whitespace-separated token.
PUNCTUATION = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~" + "‘’“”–—…«»¿¡"


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(PUNCTUATION)
        if tok:
            out.append(tok)
    return out


def rank_words(counts: Counter) -> list[str]:
    """Most frequent first; ties broken lexicographically."""
    return sorted(counts, key=lambda w: (-counts[w], w))


def word_counts(lines: Iterable[str]) -> Counter:
    c: Counter = Counter()
    for line in lines:
        c.update(tokenize(line))
    return c


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise ValueError(f"vocab must start with the specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    if max_size <= N_SPECIAL:
        raise ValueError(f"max_size must exceed the {N_SPECIAL} special tokens, got {max_size}")
    counts = word_counts(corpus)
    for s in SPECIALS:
        counts.pop(s.lower(), None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(list(SPECIALS) + rank_words(counts)[: max_size - N_SPECIAL])


def encode_text(vocab: Vocab, text: str, max_len: int = 128) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [CLS_ID] + [vocab.id(t) for t in tokenize(text)]
    return ids[:max_len]


def mlm_mask(ids: Sequence[int], rng: np.random.Generator, mask_prob: float = 0.15,
             vocab_size: int | None = None, force_one: bool = True):
    """BERT-style corruption: of selected positions 80% [MASK], 10% random word, 10% kept.

    Returns (corrupted ids, target ids, loss mask) as numpy arrays.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0 or ids[0] != CLS_ID:
        raise ValueError("sequence must start with [CLS]")
    maskable = ids >= N_SPECIAL
    if not maskable.any():
        raise ValueError("sequence has no maskable positions")
    if vocab_size is None:
        vocab_size = int(ids.max()) + 1
    while True:
        selected = maskable & (rng.random(ids.size) < mask_prob)
        if selected.any() or not force_one:
            break
    corrupted = ids.copy()
    action = rng.random(ids.size)
    randoms = rng.integers(N_SPECIAL, max(vocab_size, N_SPECIAL + 1), size=ids.size)
    corrupted[selected & (action < 0.8)] = MASK_ID
    swap = selected & (action >= 0.8) & (action < 0.9)
    corrupted[swap] = randoms[swap]
    return corrupted, ids.copy(), selected


@dataclass
class Example:
    text: str
    task_label: int | None
    domain_label: int
    token_ids: list[int] | None = None


@dataclass
class Dataset:
    name: str
    domain: int
    examples: list[Example]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def texts(self) -> list[str]:
        return [e.text for e in self.examples]

    def tokenized(self, vocab: Vocab, max_len: int = 128) -> "Dataset":
        exs = [Example(e.text, e.task_label, e.domain_label, encode_text(vocab, e.text, max_len))
               for e in self.examples]
        return Dataset(self.name, self.domain, exs, self.split)


@dataclass
class Batch:
    ids: np.ndarray          # batch x seq token ids, [PAD]-filled
    pad_mask: np.ndarray     # batch x seq, True on real tokens
    task_labels: np.ndarray  # -1 where unlabeled
    domain_labels: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(examples: Sequence[Example]) -> Batch:
    if any(e.token_ids is None for e in examples):
        raise ValueError("examples must be tokenized before batching")
    ids, mask = pad_sequences([e.token_ids for e in examples])
    # auxiliary rows never carry a task label, whatever the example holds
    labels = np.array([-1 if e.task_label is None or e.domain_label == AUX_DOMAIN else e.task_label
                       for e in examples], dtype=np.int64)
    domains = np.array([e.domain_label for e in examples], dtype=np.int64)
    return Batch(ids, mask, labels, domains)


def main_batches(main: Dataset, batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """One shuffled pass over ``main`` (standard fine-tuning)."""
    if len(main) == 0:
        raise ValueError("empty dataset")
    order = rng.permutation(len(main))
    return [make_batch([main.examples[i] for i in order[s:s + batch_size]])
            for s in range(0, len(order), batch_size)]


def balanced_batches(main: Dataset, aux: Dataset, batch_size: int,
                     rng: np.random.Generator) -> list[Batch]:
    """One epoch of half-Main / half-Auxiliary batches.

    The epoch is a full shuffled pass over Main.  Auxiliary is under-sampled
    afresh each epoch to |Main| examples, so both domains appear equally.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    if len(main) == 0 or len(aux) == 0:
        raise ValueError("empty dataset")
    half = batch_size // 2
    n = len(main)
    main_order = rng.permutation(n)
    if len(aux) >= n:
        aux_order = rng.choice(len(aux), size=n, replace=False)
    else:
        log.warning("auxiliary set (%d) smaller than main (%d); sampling with replacement", len(aux), n)
        aux_order = rng.choice(len(aux), size=n, replace=True)
    batches = []
    for s in range(0, n, half):
        rows = [main.examples[i] for i in main_order[s:s + half]]
        rows += [aux.examples[i] for i in aux_order[s:s + half]]
        perm = rng.permutation(len(rows))
        batches.append(make_batch([rows[i] for i in perm]))
    return batches


def mlm_batch(seqs: Sequence[Sequence[int]], rng: np.random.Generator, vocab_size: int,
              mask_prob: float = 0.15):
    """Mask each sequence and pad; returns (Batch-like ids/mask, flat target rows, flat targets)."""
    corrupted, targets, selected = [], [], []
    for s in seqs:
        c, t, m = mlm_mask(s, rng, mask_prob, vocab_size)
        corrupted.append(c)
        targets.append(t)
        selected.append(m)
    ids, pad = pad_sequences(corrupted)
    T = ids.shape[1]
    rows, tgt = [], []
    for b, (t, m) in enumerate(zip(targets, selected)):
        pos = np.flatnonzero(m)
        rows.append(b * T + pos)
        tgt.append(t[pos])
    return ids, pad, np.concatenate(rows), np.concatenate(tgt)


class DataFormatError(ValueError):
    pass


def load_jsonl(path, kind: str, name: str | None = None, split: str = "train",
               vocab: Vocab | None = None, max_len: int = 128) -> Dataset:
    """Read a Main (``{"text", "label": int}``) or Auxiliary (``{"text"}``) JSONL file.

    Auxiliary labels, if present, are discarded.
    """
    if kind not in ("main", "auxiliary"):
        raise ValueError(f"kind must be 'main' or 'auxiliary', got {kind!r}")
    path = Path(path)
    domain = MAIN_DOMAIN if kind == "main" else AUX_DOMAIN
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise DataFormatError(f"{path}:{lineno}: missing string field 'text'")
            label = None
            if kind == "main":
                if "label" not in rec:
                    raise DataFormatError(f"{path}:{lineno}: missing field 'label'")
                label = rec["label"]
                if isinstance(label, bool) or not isinstance(label, int):
                    raise DataFormatError(f"{path}:{lineno}: label must be an integer, got {label!r}")
            ids = encode_text(vocab, rec["text"], max_len) if vocab is not None else None
            examples.append(Example(rec["text"], label, domain, ids))
    if not examples:
        raise DataFormatError(f"{path}: no examples")
    return Dataset(name or path.stem, domain, examples, split)


def read_corpus(path) -> list[str]:
    """Texts from a JSONL file (``text`` field) or a plain one-sentence-per-line file."""
    path = Path(path)
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if path.suffix == ".jsonl":
        return [json.loads(l)["text"] for l in lines]
    return lines


# ------------------------------------------------------------ synthetic data

@dataclass
class SynthSpec:
    n_cue: int = 100            # cue words per class, shared by both domains
    n_style: int = 200          # style words per domain
    n_shortcut: int = 20        # rarest domain-0 style words reused as a class-A shortcut
    length: int = 20
    cue_frac: float = 0.3
    rho: float = 0.9            # share of Main-train class-A sentences given shortcut tokens
    shortcut_tokens: int = 2
    zipf: float = 1.5           # within-group word frequency exponent
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    n_aux: int = 10000
    n_pretrain: int = 20000
    seed: int = 7

    def validate(self) -> None:
        if not 0.0 < self.cue_frac < 1.0:
            raise ValueError(f"cue_frac must be in (0, 1), got {self.cue_frac}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.length < 2:
            raise ValueError("length must be at least 2")
        if not 0 < self.n_shortcut <= self.n_style:
            raise ValueError("n_shortcut must be in (0, n_style]")
        if self.zipf < 0:
            raise ValueError("zipf exponent must be non-negative")
        if min(self.n_cue, self.n_style, self.n_train, self.n_val, self.n_test,
               self.n_aux, self.n_pretrain) <= 0:
            raise ValueError("all counts must be positive")
        if self.n_train % 2 or self.n_val % 2 or self.n_test % 2:
            raise ValueError("Main split sizes must be even for exact label balance")


@dataclass
class SyntheticCorpus:
    spec: SynthSpec
    main_train: Dataset
    main_val: Dataset
    main_test: Dataset
    aux: Dataset
    pretrain: list[str]
    cue_words: tuple[list[str], list[str]] = field(repr=False)
    style_words: tuple[list[str], list[str]] = field(repr=False)
    shortcut_words: list[str] = field(repr=False)


def _zipf_probs(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


def gen_synthetic(spec: SynthSpec, rng: np.random.Generator) -> SyntheticCorpus:
    spec.validate()
    cues = ([f"ca{i:03d}" for i in range(spec.n_cue)], [f"cb{i:03d}" for i in range(spec.n_cue)])
    styles = ([f"sx{i:03d}" for i in range(spec.n_style)], [f"sy{i:03d}" for i in range(spec.n_style)])
    shortcut = styles[0][-spec.n_shortcut:]
    cdf_cue = np.cumsum(_zipf_probs(spec.n_cue, spec.zipf))
    cdf_style = np.cumsum(_zipf_probs(spec.n_style, spec.zipf))
    n_cue = max(1, min(spec.length - 1, round(spec.cue_frac * spec.length)))
    n_style = spec.length - n_cue

    def _draw(cdf, n):
        return np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)

    def sentence(c: int, d: int, with_shortcut: bool) -> str:
        words = [cues[c][i] for i in _draw(cdf_cue, n_cue)]
        words += [styles[d][i] for i in _draw(cdf_style, n_style)]
        if with_shortcut:
            words += [shortcut[i] for i in rng.integers(0, spec.n_shortcut, spec.shortcut_tokens)]
        return " ".join(words[i] for i in rng.permutation(len(words)))

    def main_split(n: int, split: str) -> Dataset:
        labels = rng.permutation(np.repeat([0, 1], n // 2))
        exs = []
        for c in labels:
            short = split == "train" and c == 0 and rng.random() < spec.rho
            exs.append(Example(sentence(int(c), MAIN_DOMAIN, short), int(c), MAIN_DOMAIN))
        return Dataset(f"main_{split}", MAIN_DOMAIN, exs, split)

    train = main_split(spec.n_train, "train")
    val = main_split(spec.n_val, "validation")
    test = main_split(spec.n_test, "test")
    aux = Dataset("aux", AUX_DOMAIN,
                  [Example(sentence(int(rng.integers(2)), AUX_DOMAIN, False), None, AUX_DOMAIN)
                   for _ in range(spec.n_aux)])
    pretrain = [sentence(int(rng.integers(2)), int(rng.integers(2)), False)
                for _ in range(spec.n_pretrain)]
    return SyntheticCorpus(spec, train, val, test, aux, pretrain, cues, styles, shortcut)


def _jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


SYNTH_FILES = ("main_train.jsonl", "main_val.jsonl", "main_test.jsonl", "aux.jsonl", "pretrain.txt")


def write_synthetic(corpus: SyntheticCorpus, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    contents = {
        "main_train.jsonl": _jsonl({"text": e.text, "label": e.task_label} for e in corpus.main_train.examples),
        "main_val.jsonl": _jsonl({"text": e.text, "label": e.task_label} for e in corpus.main_val.examples),
        "main_test.jsonl": _jsonl({"text": e.text, "label": e.task_label} for e in corpus.main_test.examples),
        "aux.jsonl": _jsonl({"text": e.text} for e in corpus.aux.examples),
        "pretrain.txt": "".join(s + "\n" for s in corpus.pretrain),
        "manifest.json": json.dumps({"spec": asdict(corpus.spec), "seed": corpus.spec.seed,
                                     "files": list(SYNTH_FILES)}, indent=2, sort_keys=True) + "\n",
    }
    paths = []
    for name, text in contents.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def load_main_dir(path, vocab: Vocab, max_len: int = 128) -> tuple[Dataset, Dataset, Dataset | None]:
    """Load main_train/main_val[/main_test].jsonl from a directory."""
    d = Path(path)
    train = load_jsonl(d / "main_train.jsonl", "main", "main_train", "train", vocab, max_len)
    val = load_jsonl(d / "main_val.jsonl", "main", "main_val", "validation", vocab, max_len)
    test_path = d / "main_test.jsonl"
    test = load_jsonl(test_path, "main", "main_test", "test", vocab, max_len) if test_path.exists() else None
    return train, val, test


def chunked(seq: Sequence, size: int) -> Iterator[Sequence]:
    for s in range(0, len(seq), size):
        yield seq[s:s + size]


def steps_per_epoch(n_main: int, batch_size: int, balanced: bool) -> int:
    per_batch = batch_size // 2 if balanced else batch_size
    return math.ceil(n_main / per_batch)
