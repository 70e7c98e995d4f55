"""Label words and the prompt-based classification head.

Class scores are the mask-position vocabulary logits gathered at the label
words, normalised with a softmax over those |Y| words only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .backend import DTYPE, MaskedLMBackend, TokenSequence
from .errors import ContractError, LoadError, VocabularyError

LOG_EPS = 1e-12


@dataclass(frozen=True)
class Verbalizer:
    labels: tuple[str, ...]  # label strings in label-id order (sorted)
    words: tuple[str, ...]
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ContractError("a verbalizer needs at least two labels")
        if not len(self.labels) == len(self.words) == len(self.token_ids):
            raise ContractError("labels, words and token ids must align")
        if len(set(self.token_ids)) != len(self.token_ids):
            raise ContractError("verbalizer is not injective: two labels share a token")

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def label_id(self, label: str) -> int:
        return self.labels.index(label)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str], backend: MaskedLMBackend) -> "Verbalizer":
        labels = tuple(sorted(mapping))
        words = tuple(mapping[lab] for lab in labels)
        ids = []
        for lab, word in zip(labels, words):
            seq = backend.tokenize(word)
            if len(seq) != 1:
                raise VocabularyError(
                    f"label word {word!r} for {lab!r} is {len(seq)} tokens; one is required"
                )
            ids.append(backend.token_id(word))
        return cls(labels, words, tuple(ids))


def read_verbalizer(path) -> dict[str, str]:
    """Parse ``<label><TAB><token>`` lines into a mapping."""
    mapping: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            bits = line.split("\t")
            if len(bits) != 2 or not bits[0] or not bits[1].strip():
                raise LoadError("expected '<label><TAB><token>'", line=lineno)
            label, word = bits[0], bits[1].strip()
            if len(word.split()) != 1:
                raise LoadError(f"label word {word!r} must be a single token", line=lineno)
            if label in mapping:
                raise LoadError(f"duplicate label {label!r}", line=lineno)
            if word in mapping.values():
                raise LoadError(f"label word {word!r} used twice", line=lineno)
            mapping[label] = word
    if len(mapping) < 2:
        raise LoadError(f"{path}: a verbalizer needs at least two labels")
    return mapping


def gather_label_logits(vocab_logits: torch.Tensor, verbalizer: Verbalizer) -> torch.Tensor:
    return vocab_logits[..., list(verbalizer.token_ids)]


def class_logits(
    backend: MaskedLMBackend, prompted: TokenSequence, verbalizer: Verbalizer
) -> torch.Tensor:
    hidden = backend.encode(prompted).vectors[prompted.mask_position]
    return gather_label_logits(backend.vocab_logits(hidden), verbalizer)


def batch_class_logits(
    backend: MaskedLMBackend, prompted: Sequence[TokenSequence], verbalizer: Verbalizer
) -> torch.Tensor:
    """(B, |Y|) class logits; also usable when the mask states are needed elsewhere."""
    return gather_label_logits(backend.vocab_logits(backend.mask_hidden(prompted)), verbalizer)


def class_probs(logits) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=DTYPE)
    if not bool(torch.isfinite(logits).all()):
        raise ContractError("class_probs received non-finite logits")
    return torch.softmax(logits, dim=-1)


def ce_loss(batch_probs, labels) -> torch.Tensor:
    """Mean negative log-probability of the gold labels (log clamped at 1e-12)."""
    probs = batch_probs if isinstance(batch_probs, torch.Tensor) else torch.stack(
        [torch.as_tensor(p, dtype=DTYPE) for p in batch_probs]
    )
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ContractError(
            f"{probs.shape[0] if probs.ndim else 0} probability rows for {labels.shape[0]} labels"
        )
    if probs.shape[0] == 0:
        raise ContractError("ce_loss on an empty batch")
    if bool(((labels < 0) | (labels >= probs.shape[1])).any()):
        raise ContractError("label id out of range")
    gold = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(gold.clamp_min(LOG_EPS)).mean()
