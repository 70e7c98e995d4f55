"""TSV ingestion, K-shot splits and seeded batching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, ContractError, DataError, LoadError

SINGLE = "single_sentence"
PAIR = "sentence_pair"
_N_FIELDS = {SINGLE: 1, PAIR: 2}

DEFAULT_SEEDS = (13, 21, 42, 87, 100)


@dataclass(frozen=True)
class Example:
    fields: tuple[str, ...]
    label: str
    index: int  # row position in the source file


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    label_set: tuple[str, ...]
    task_kind: str = SINGLE

    def __post_init__(self):
        if len(self.label_set) < 2:
            raise DataError(f"need at least two labels, found {list(self.label_set)}")
        known = set(self.label_set)
        for ex in self.examples:
            if ex.label not in known:
                raise DataError(f"example {ex.index} has unknown label {ex.label!r}")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def label_id(self, label: str) -> int:
        return self.label_set.index(label)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        by_index = {ex.index: ex for ex in self.examples}
        return Dataset(tuple(by_index[i] for i in indices), self.label_set, self.task_kind)


def load_tsv(path, task_kind: str = SINGLE, label_set: Optional[Sequence[str]] = None) -> Dataset:
    """Rows are ``text<TAB>label`` or ``text_a<TAB>text_b<TAB>label``."""
    if task_kind not in _N_FIELDS:
        raise ConfigError(f"unknown task kind {task_kind!r} (use {SINGLE} or {PAIR})")
    want = _N_FIELDS[task_kind] + 1
    examples = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            bits = line.split("\t")
            if len(bits) != want:
                raise LoadError(f"expected {want} tab-separated fields, got {len(bits)}", line=lineno)
            if any(not b.strip() for b in bits):
                raise LoadError("empty field", line=lineno)
            examples.append(Example(tuple(bits[:-1]), bits[-1], len(examples)))
    if not examples:
        raise LoadError(f"{path}: no rows")
    labels = tuple(sorted(label_set)) if label_set else tuple(sorted({e.label for e in examples}))
    return Dataset(tuple(examples), labels, task_kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class KShotSplit:
    seed: int
    k: int
    train: Dataset
    dev: Dataset
    test: Optional[Dataset] = None

    @property
    def train_indices(self) -> list[int]:
        return [e.index for e in self.train]

    @property
    def dev_indices(self) -> list[int]:
        return [e.index for e in self.dev]

    def manifest(self, source: str = "", digest: str = "") -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "source": source,
            "source_sha256": digest,
            "labels": list(self.train.label_set),
            "train": self.train_indices,
            "dev": self.dev_indices,
        }


def make_kshot(dataset: Dataset, k: int, seed: int, test: Optional[Dataset] = None) -> KShotSplit:
    """k train + k dev examples per label, drawn without replacement."""
    if k < 1:
        raise ConfigError("k must be positive")
    rng = np.random.default_rng(seed)
    train, dev = [], []
    for label in dataset.label_set:
        bucket = [e.index for e in dataset.examples if e.label == label]
        if len(bucket) < 2 * k:
            raise CapacityError(label, len(bucket), 2 * k)
        order = rng.permutation(len(bucket))
        train.extend(bucket[i] for i in order[:k])
        dev.extend(bucket[i] for i in order[k : 2 * k])
    return KShotSplit(seed, k, dataset.subset(sorted(train)), dataset.subset(sorted(dev)), test)


def split_from_manifest(dataset: Dataset, manifest: dict, test: Optional[Dataset] = None) -> KShotSplit:
    return KShotSplit(
        manifest["seed"],
        manifest["k"],
        dataset.subset(manifest["train"]),
        dataset.subset(manifest["dev"]),
        test,
    )


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode("utf-8")


def epoch_batches(examples: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    if batch_size < 2:
        raise ConfigError(
            f"batch_size {batch_size} < 2: batch-level contrastive sampling needs two examples"
        )
    if not examples:
        raise ContractError("cannot batch an empty example list")
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    items = [examples[i] for i in order]
    return [items[i : i + batch_size] for i in range(0, len(items), batch_size)]


def batches(split, batch_size: int, seed: int) -> Iterator[list]:
    """Endless stream of batches over ``split.train``, reshuffled every epoch."""
    examples = list(split.train if isinstance(split, KShotSplit) else split)
    epoch = 0
    while True:
        yield from epoch_batches(examples, batch_size, seed, epoch)
        epoch += 1
