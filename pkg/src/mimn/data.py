"""Vocabulary, embeddings, corpus readers, batching and a synthetic toy task."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import NLI_LABELS, SCITAIL_LABELS

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
FORMATS = ("snli_jsonl", "scitail_tsv", "mpe_tsv", "unified_jsonl")
# Published split sizes (train, valid, test).
CORPUS_SIZES = {
    "snli": (549_367, 9_842, 9_824),
    "mpe": (8_000, 1_000, 1_000),
    "scitail": (23_596, 1_304, 2_126),
}
NEGATION = "not"


class DataFormatError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token <-> index map with PAD at 0 and UNK at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    @classmethod
    def build(cls, examples: Iterable["Example"], min_count: int = 1) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for ex in examples:
            counts.update(ex.premise)
            counts.update(ex.hypothesis)
        # sorted for a vocabulary independent of example order
        return cls(sorted(t for t, n in counts.items() if n >= min_count))

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if list(itos[:2]) != [PAD, UNK]:
            raise DataFormatError("vocabulary must start with PAD, UNK")
        return cls(itos[2:])


@dataclass
class Example:
    premise: list[str]
    hypothesis: list[str]
    label: int
    # MPE keeps its individual premises for round-tripping
    premises: list[str] | None = None


@dataclass
class Batch:
    premise: np.ndarray  # [B, Lp] int
    hypothesis: np.ndarray  # [B, Lq] int
    premise_mask: np.ndarray  # [B, Lp] bool
    hypothesis_mask: np.ndarray  # [B, Lq] bool
    labels: np.ndarray  # [B] int

    def __len__(self) -> int:
        return len(self.labels)


# -- embeddings ---------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # [V, r]; row 0 (PAD) is zero
    oov: int  # vocabulary entries (excluding PAD/UNK) with no pretrained vector
    trainable: bool = False


def random_embeddings(vocab: Vocabulary, dim: int, seed: int = 0, scale: float = 0.05,
                      dtype=np.float32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = rng.uniform(-scale, scale, size=(len(vocab), dim)).astype(dtype)
    table[0] = 0
    return table


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int, seed: int = 0,
                    dtype=np.float32) -> EmbeddingTable:
    """Read a word-per-line text embedding file (GloVe layout) for `vocab`.

    Lookup prefers the lowercased vocabulary entry and falls back to the raw
    token. Vocabulary entries absent from the file keep a uniform
    [-0.05, 0.05] random row.
    """
    table = random_embeddings(vocab, dim, seed, dtype=dtype)
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected a token and {dim} values, got {len(parts) - 1} values")
            tok = parts[0]
            idx = vocab.stoi.get(tok.lower(), vocab.stoi.get(tok))
            if idx is None or idx == 0:
                continue
            if found[idx] and tok != vocab.itos[idx]:
                continue  # an exact-case line already filled this row
            try:
                table[idx] = np.array(parts[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            found[idx] = True
    oov = int((~found[2:]).sum())
    return EmbeddingTable(table, oov)


# -- corpora ------------------------------------------------------------------------


def default_labels(fmt: str) -> tuple[str, ...]:
    return SCITAIL_LABELS if fmt == "scitail_tsv" else NLI_LABELS


def _label_index(raw: str, labels: Sequence[str]) -> int:
    try:
        return list(labels).index(raw.strip().lower())
    except ValueError:
        raise DataFormatError(f"unknown label {raw!r}; expected one of {list(labels)}") from None


def _make(premise: str, hypothesis: str, label: int, premises=None) -> Example | None:
    p, h = tokenize(premise), tokenize(hypothesis)
    if not p or not h:
        return None
    return Example(p, h, label, premises)


class LoadStats:
    def __init__(self):
        self.skipped_empty = 0
        self.dropped_unlabeled = 0


def load_dataset(path: str | Path, fmt: str, labels: Sequence[str] | None = None,
                 stats: LoadStats | None = None) -> list[Example]:
    """Parse one corpus split into Examples.

    snli_jsonl: ``sentence1``/``sentence2``/``gold_label``; ``-`` labels dropped.
    scitail_tsv: ``premise<TAB>hypothesis<TAB>label`` rows.
    mpe_tsv: header with ``premise1..4``, ``hypothesis``, ``gold_label``;
    premises are joined with single spaces.
    unified_jsonl: see `save_dataset`.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    stats = stats if stats is not None else LoadStats()
    labels = tuple(labels) if labels is not None else None
    out: list[Example] = []

    def push(ex):
        if ex is None:
            stats.skipped_empty += 1
        else:
            out.append(ex)

    with open(path, encoding="utf-8", newline="") as fh:
        if fmt in ("snli_jsonl", "unified_jsonl"):
            records = [json.loads(line) for line in fh if line.strip()]
            if fmt == "unified_jsonl" and labels is None:
                seen = {str(r.get("label", "")).lower() for r in records}
                labels = SCITAIL_LABELS if "entails" in seen else NLI_LABELS
            labels = labels or NLI_LABELS
            for n, rec in enumerate(records, 1):
                try:
                    if fmt == "snli_jsonl":
                        if rec["gold_label"] == "-":
                            stats.dropped_unlabeled += 1
                            continue
                        push(_make(rec["sentence1"], rec["sentence2"],
                                   _label_index(rec["gold_label"], labels)))
                    else:
                        premises = rec.get("premises")
                        premise = " ".join(premises) if premises is not None else rec["premise"]
                        push(_make(premise, rec["hypothesis"], _label_index(rec["label"], labels),
                                   list(premises) if premises is not None else None))
                except KeyError as exc:
                    raise DataFormatError(f"{path}:{n}: missing field {exc}") from None
        elif fmt == "scitail_tsv":
            labels = labels or SCITAIL_LABELS
            for n, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
                if not row:
                    continue
                if len(row) < 3:
                    raise DataFormatError(f"{path}:{n}: expected premise, hypothesis, label")
                push(_make(row[0], row[1], _label_index(row[2], labels)))
        else:
            labels = labels or NLI_LABELS
            reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
            needed = ["premise1", "premise2", "premise3", "premise4", "hypothesis", "gold_label"]
            missing = [c for c in needed if c not in (reader.fieldnames or [])]
            if missing:
                raise DataFormatError(f"{path}: missing columns {missing}")
            for row in reader:
                premises = [row[f"premise{i}"] for i in range(1, 5)]
                push(_make(" ".join(premises), row["hypothesis"],
                           _label_index(row["gold_label"], labels), premises))
    if stats.skipped_empty:
        log.warning("%s: skipped %d examples with an empty sentence", path, stats.skipped_empty)
    return out


def save_dataset(examples: Iterable[Example], path: str | Path, labels: Sequence[str]) -> None:
    """Write examples as unified JSONL (one record per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec: dict = {}
            if ex.premises is not None:
                rec["premises"] = ex.premises
            else:
                rec["premise"] = " ".join(ex.premise)
            rec["hypothesis"] = " ".join(ex.hypothesis)
            rec["label"] = labels[ex.label]
            fh.write(json.dumps(rec) + "\n")


# -- batching -----------------------------------------------------------------------


def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def make_batches(examples: Sequence[Example], batch_size: int, vocab: Vocabulary,
                 shuffle_seed: int | None = None) -> list[Batch]:
    """Split into padded batches; shuffled deterministically when a seed is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        p, pm = pad([vocab.encode(ex.premise) for ex in chunk])
        h, hm = pad([vocab.encode(ex.hypothesis) for ex in chunk])
        batches.append(Batch(p, h, pm, hm, np.array([ex.label for ex in chunk], dtype=np.int64)))
    return batches


# -- synthetic task -----------------------------------------------------------------

TOY_WORDS = (
    "dog cat bird horse child woman man girl boy runs sits jumps eats sleeps "
    "red blue green small big park beach street ball car"
).split()


def toy_label(premise: Sequence[str], hypothesis: Sequence[str]) -> int:
    """Ground-truth rule of the toy task (indices into NLI_LABELS).

    Let H be the hypothesis words other than the negation marker. If H is
    contained in the premise the pair is contradiction when the hypothesis
    carries the marker and entailment otherwise; any unseen word makes it
    neutral.
    """
    content = set(hypothesis) - {NEGATION}
    if not content <= set(premise):
        return NLI_LABELS.index("neutral")
    if NEGATION in hypothesis:
        return NLI_LABELS.index("contradiction")
    return NLI_LABELS.index("entailment")


def _toy_pair(rng: np.random.Generator, target: str) -> tuple[list[str], list[str]]:
    n_p = int(rng.integers(4, 8))
    premise = [str(w) for w in rng.choice(TOY_WORDS, size=n_p, replace=False)]
    n_h = int(rng.integers(1, 4))
    if target == "neutral":
        unseen = [w for w in TOY_WORDS if w not in premise]
        hyp = [str(w) for w in rng.choice(unseen, size=n_h, replace=False)]
        if rng.random() < 0.5:
            hyp.insert(int(rng.integers(0, len(hyp) + 1)), NEGATION)
    else:
        hyp = [str(w) for w in rng.choice(premise, size=n_h, replace=False)]
        if target == "contradiction":
            hyp.insert(int(rng.integers(0, len(hyp) + 1)), NEGATION)
    return premise, hyp


def generate_toy_corpus(seed: int = 0, size: int = 600) -> tuple[list[Example], list[Example], list[Example]]:
    """Synthetic 3-label corpus labelled by `toy_label`, split 80/10/10."""
    if size < 30:
        raise ValueError("toy corpus needs at least 30 examples")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(size):
        target = NLI_LABELS[i % 3]
        premise, hyp = _toy_pair(rng, target)
        examples.append(Example(premise, hyp, toy_label(premise, hyp)))
    examples = [examples[i] for i in rng.permutation(size)]
    n_train, n_valid = int(0.8 * size), int(0.1 * size)
    return (examples[:n_train], examples[n_train:n_train + n_valid], examples[n_train + n_valid:])
