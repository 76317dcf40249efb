"""Deterministic synthetic classification tasks and accuracy evaluation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import stream

TASKS = ("parity", "majority", "copy_first")
SPLITS = ("train", "valid", "test")


class TaskError(ValueError):
    """Task parameters are inconsistent with the labelling rule."""


@dataclass
class SyntheticTask:
    name: str = "parity"
    vocab_size: int = 4
    seq_len: int = 16
    n_classes: int = 2
    n_train: int = 4000
    n_valid: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.name not in TASKS:
            raise TaskError(f"unknown task {self.name!r}; expected one of {TASKS}")
        for f in ("vocab_size", "seq_len", "n_classes", "n_train", "n_valid", "n_test"):
            v = getattr(self, f)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise TaskError(f"{f} must be a positive int, got {v!r}")
        if self.name == "parity":
            if self.n_classes != 2 or self.vocab_size < 2:
                raise TaskError("parity needs n_classes == 2 and vocab_size >= 2")
        elif self.name == "majority":
            if self.n_classes != self.vocab_size:
                raise TaskError("majority needs n_classes == vocab_size (one class per token)")
        elif self.n_classes > self.vocab_size:
            raise TaskError("copy_first needs n_classes <= vocab_size")

    def sizes(self) -> dict:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TaskError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Split:
    tokens: np.ndarray  # [n, seq_len] int64
    labels: np.ndarray  # [n] int64

    def __len__(self):
        return len(self.labels)


def parity_label(seq) -> int:
    return int(np.count_nonzero(np.asarray(seq) == 1) % 2)


def majority_label(seq, vocab_size: int):
    """Most frequent token, or None when the top count is tied."""
    counts = np.bincount(np.asarray(seq), minlength=vocab_size)
    top = counts.max()
    winners = np.flatnonzero(counts == top)
    return int(winners[0]) if len(winners) == 1 else None


def copy_first_label(seq, vocab_size: int, n_classes: int) -> int:
    return int(seq[0]) * n_classes // vocab_size


def label_of(task: SyntheticTask, seq):
    if task.name == "parity":
        return parity_label(seq)
    if task.name == "majority":
        return majority_label(seq, task.vocab_size)
    return copy_first_label(seq, task.vocab_size, task.n_classes)


def _class_quotas(n: int, c: int) -> np.ndarray:
    q = np.full(c, n // c)
    q[: n % c] += 1
    return q


def _draw_split(task, rng, n, seen):
    quotas = _class_quotas(n, task.n_classes)
    toks, labels = [], []
    budget = 2000 * n + 10000
    while len(labels) < n:
        block = rng.integers(0, task.vocab_size, size=(256, task.seq_len))
        for seq in block:
            budget -= 1
            if budget < 0:
                raise TaskError(f"{task.name}: cannot draw {n} distinct balanced examples; sequence space too small")
            y = label_of(task, seq)
            if y is None or quotas[y] == 0:
                continue
            key = seq.tobytes()
            if key in seen:
                continue
            seen.add(key)
            quotas[y] -= 1
            toks.append(seq)
            labels.append(y)
            if len(labels) == n:
                break
    return Split(np.stack(toks).astype(np.int64), np.asarray(labels, dtype=np.int64))


def generate(task: SyntheticTask) -> tuple:
    """``(train, valid, test)`` splits.

    Each split comes from its own seed stream, holds exactly balanced class
    counts (up to one example), and never repeats a sequence from an earlier
    split.  Tied majority sequences are skipped.
    """
    task.validate()
    seen: set = set()
    out = []
    for i, name in enumerate(SPLITS):
        rng = stream(task.seed, "data", i)
        out.append(_draw_split(task, rng, task.sizes()[name], seen))
    return tuple(out)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predictions == labels))


def predict_logits(model, tokens, hooks=None, batch_size: int = 512) -> np.ndarray:
    """Logits for every row of ``tokens``.  ``model`` may be any callable ``tokens -> logits``."""
    outs = []
    with T.no_grad():
        for start in range(0, len(tokens), batch_size):
            chunk = tokens[start:start + batch_size]
            if hooks is not None:
                out = model(chunk, hooks=hooks)
            else:
                out = model(chunk)
            outs.append(out.data if isinstance(out, T.Tensor) else np.asarray(out))
    return np.concatenate(outs, axis=0)


def evaluate(model, split: Split, hooks=None, batch_size: int = 512) -> float:
    """Exact-match accuracy of argmax predictions on ``split``."""
    if len(split) == 0:
        return 0.0
    logits = predict_logits(model, split.tokens, hooks=hooks, batch_size=batch_size)
    return accuracy(logits.argmax(axis=1), split.labels)


def dump_csv(split: Split, path) -> None:
    """One row per example: label, then one column per token position."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"t{i}" for i in range(split.tokens.shape[1])])
        for y, seq in zip(split.labels, split.tokens):
            w.writerow([int(y)] + [int(t) for t in seq])
