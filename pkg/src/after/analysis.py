"""Corpus-distance and representation probes.

Term distributions over a joint vocabulary, base-2 Jensen-Shannon
divergence, top-k vocabulary overlap, an average masked-LM loss probe, and
a linear domain probe on frozen [CLS] representations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph
from .data import Dataset, Vocab, encode_text, make_batch, rank_words, word_counts
from .model import EncoderModel, VocabMismatchError, encode
from .training import mlm_loss


@dataclass
class TermDistribution:
    vocab: list[str]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.vocab),):
            raise ValueError("probs length must equal the vocabulary size")


def top_k_words(corpus: Sequence[str], k: int) -> list[str]:
    counts = word_counts(corpus)
    if not counts:
        raise ValueError("empty corpus")
    return rank_words(counts)[:k]


def term_distributions(corpora: Sequence[Sequence[str]], top_k: int = 5000) -> list[TermDistribution]:
    """One distribution per corpus over the union of each corpus's top-k words."""
    counts = [word_counts(c) for c in corpora]
    if not counts or any(not c for c in counts):
        raise ValueError("empty corpus")
    joint = sorted(set().union(*(rank_words(c)[:top_k] for c in counts)))
    out = []
    for c in counts:
        v = np.array([c.get(w, 0) for w in joint], dtype=np.float64)
        out.append(TermDistribution(joint, v / v.sum()))
    return out


def js_divergence(p: TermDistribution, q: TermDistribution) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    if p.vocab != q.vocab:
        raise ValueError("distributions are over different vocabularies")
    return jsd_arrays(p.probs, q.probs)


def jsd_arrays(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if not np.any((p > 0) & (q > 0)):
        # disjoint supports; the sum below would only reach 1 up to rounding
        return 1.0
    both = p + q

    # a / m written as 2a / (p + q) so subnormal mass cannot underflow m to zero
    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(2.0 * a[nz] / both[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def vocab_overlap(a: Sequence[str], b: Sequence[str], top_k: int = 10000) -> float:
    """Percentage of a's top-k words that are also among b's top-k words."""
    va = set(top_k_words(a, top_k))
    vb = set(top_k_words(b, top_k))
    return 100.0 * len(va & vb) / len(va)


def jsd_matrix(corpora: Mapping[str, Sequence[str]], top_k: int = 5000) -> dict:
    names = list(corpora)
    dists = term_distributions([corpora[n] for n in names], top_k)
    values = [[js_divergence(p, q) for q in dists] for p in dists]
    return {"rows": names, "cols": names, "values": values}


def overlap_matrix(rows: Mapping[str, Sequence[str]], cols: Mapping[str, Sequence[str]],
                   top_k: int = 10000) -> dict:
    tops = {k: set(top_k_words(v, top_k)) for k, v in {**rows, **cols}.items()}
    values = [[100.0 * len(tops[r] & tops[c]) / len(tops[r]) for c in cols] for r in rows]
    return {"rows": list(rows), "cols": list(cols), "values": values}


def matrix_csv(mat: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + mat["cols"])
    for name, row in zip(mat["rows"], mat["values"]):
        w.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def matrix_json(mat: dict) -> str:
    return json.dumps(mat, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------ model probes

def _check_vocab(model: EncoderModel, vocab: Vocab, seqs) -> None:
    if len(vocab) != model.config.vocab_size:
        raise VocabMismatchError(f"vocab has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    if not any(t > 4 for s in seqs for t in s):
        raise VocabMismatchError("no token of the dataset is in the model vocabulary")


def mlm_probe(model: EncoderModel, vocab: Vocab, texts: Sequence[str], rng: np.random.Generator,
              n_passes: int = 5, mask_prob: float = 0.15, batch_size: int = 250) -> float:
    """Average masked-position cross-entropy (nats) over ``n_passes`` mask draws, eval mode."""
    seqs = [encode_text(vocab, t, model.config.max_len) for t in texts]
    _check_vocab(model, vocab, seqs)
    seqs = [s for s in seqs if any(t > 4 for t in s)]
    per_pass = []
    for _ in range(n_passes):
        total, count = 0.0, 0
        for s in range(0, len(seqs), batch_size):
            g = Graph(grad_enabled=False)
            loss, n = mlm_loss(model, g, seqs[s:s + batch_size], rng, mask_prob, False)
            total += loss.item() * n
            count += n
        per_pass.append(total / count)
    return float(np.mean(per_pass))


def cls_features(model: EncoderModel, data: Dataset, batch_size: int = 250) -> np.ndarray:
    feats = []
    for s in range(0, len(data), batch_size):
        batch = make_batch(data.examples[s:s + batch_size])
        rep = encode(model, Graph(grad_enabled=False), batch.ids, batch.pad_mask)
        feats.append(rep.cls.data)
    return np.concatenate(feats)


def probe_accuracy(features: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                   iters: int = 200, lr: float = 0.1) -> float:
    """Held-out accuracy of a logistic-regression probe on a stratified 50/50 split.

    Features are standardised with the training half's statistics; the probe
    is fitted by full-batch gradient descent on mean log-loss.
    """
    labels = np.asarray(labels)
    train_idx, test_idx = [], []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == c))
        half = len(idx) // 2
        train_idx.append(idx[:half])
        test_idx.append(idx[half:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    X = (features - mu) / sd
    y = labels.astype(np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(iters):
        z = X[tr] @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = p - y[tr]
        w -= lr * (X[tr].T @ err) / len(tr)
        b -= lr * err.mean()
    pred = (X[te] @ w + b) > 0
    return float((pred == (y[te] == 1)).mean())


def domain_probe(model: EncoderModel, main: Dataset, aux: Dataset, rng: np.random.Generator,
                 n_per_domain: int = 500, iters: int = 200, lr: float = 0.1) -> float:
    """Linear separability of Main vs Auxiliary [CLS] states; 0.5 means indistinguishable."""
    if len(main) < 20 or len(aux) < 20:
        raise ValueError("domain probe needs at least 20 examples per domain")
    pick_m = rng.permutation(len(main))[:n_per_domain]
    pick_a = rng.permutation(len(aux))[:n_per_domain]
    sample_m = Dataset(main.name, main.domain, [main.examples[i] for i in pick_m])
    sample_a = Dataset(aux.name, aux.domain, [aux.examples[i] for i in pick_a])
    feats = np.concatenate([cls_features(model, sample_m), cls_features(model, sample_a)])
    labels = np.concatenate([np.zeros(len(pick_m), dtype=int), np.ones(len(pick_a), dtype=int)])
    return probe_accuracy(feats, labels, rng, iters, lr)
