"""Desk-scale experiment protocol on the synthetic toy corpus.

One fixed corpus, one set of optimiser settings, and a training seed per run.
The acceptance tests and the scripts in ``scripts/`` both go through here so
they measure the same thing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Vocabulary, generate_toy_corpus, random_embeddings
from .model import ModelConfig
from .train import Checkpoint, TrainConfig, TrainResult, new_model, train


@dataclass(frozen=True)
class ToyProtocol:
    corpus_seed: int = 0
    corpus_size: int = 600
    dim: int = 32
    embed_scale: float = 1.0
    lr: float = 3e-3
    max_epochs: int = 30
    patience: int = 10
    dropout: float = 0.2

    def model_config(self, variant: str) -> ModelConfig:
        return ModelConfig(embed_dim=self.dim, hidden=self.dim, mlp_hidden=self.dim,
                           variant=variant, dropout=self.dropout)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, max_epochs=self.max_epochs, patience=self.patience, seed=seed)


@dataclass
class ToyRun:
    variant: str
    seed: int
    result: TrainResult
    initial: Checkpoint
    seconds: float
    splits: tuple = field(repr=False, default=())

    @property
    def best_valid(self) -> float:
        return max(h["valid_accuracy"] for h in self.result.history)

    @property
    def best_train(self) -> float:
        return max(h["train_accuracy"] for h in self.result.history)


def toy_corpus(protocol: ToyProtocol = ToyProtocol()):
    splits = generate_toy_corpus(protocol.corpus_seed, protocol.corpus_size)
    vocab = Vocabulary.build(ex for split in splits for ex in split)
    return splits, vocab


def toy_run(variant: str = "full", seed: int = 0, protocol: ToyProtocol = ToyProtocol(),
            progress=None) -> ToyRun:
    (tr, va, te), vocab = toy_corpus(protocol)
    table = random_embeddings(vocab, protocol.dim, seed=protocol.corpus_seed, scale=protocol.embed_scale)
    model = new_model(protocol.model_config(variant), vocab, table, seed=seed)
    initial = model.copy()
    start = time.perf_counter()
    result = train(model, tr, va, protocol.train_config(seed), progress=progress)
    return ToyRun(variant, seed, result, initial, time.perf_counter() - start, (tr, va, te))


def ablation(variants=("full", "no_memory", "mixed_single_turn"), seeds=(0, 1, 2),
             protocol: ToyProtocol = ToyProtocol(), runs: dict | None = None) -> dict[str, dict]:
    """Best validation accuracy per (variant, seed) and the mean per variant.

    `runs` caches ToyRun objects by (variant, seed) and is filled in place.
    """
    runs = {} if runs is None else runs
    table = {}
    for variant in variants:
        accs = []
        for seed in seeds:
            if (variant, seed) not in runs:
                runs[variant, seed] = toy_run(variant, seed, protocol)
            accs.append(runs[variant, seed].best_valid)
        table[variant] = {"per_seed": accs, "mean": float(np.mean(accs))}
    return table
