"""Masked-LM and sentence-encoder abstractions plus the reference stack.

The reference masked LM is deliberately tiny so every property of the
method (gradients, determinism, shapes) can be checked on a laptop:

    e_i    = E[token_i]                          token-embedding table, V x d
    c      = mean_i e_i                          parameter-free context pooling
    h_i    = tanh((e_i + c) @ A^T + b)           one dense layer, d x d
    logits = h @ W^T + w0                        vocabulary projector, V x d

Weights come from ``numpy.random.default_rng(seed)`` drawn in this order:
E ~ N(0, 1), A ~ N(0, 1/sqrt(d)), W ~ N(0, 1/sqrt(d)); both biases start at
zero.  All tensors are float64.

The reference sentence encoder gives every token a frozen vector drawn
from a generator seeded with the SHA-256 of ``"<seed>\\0<token>"``; a
sentence embedding is the mean of its token vectors.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, VocabularyError

MASK_TOKEN = "[MASK]"
UNK_TOKEN = "[UNK]"
DTYPE = torch.float64

_MASK_SPLIT = re.compile(r"(\[MASK\])")


def whitespace_tokenize(text: str) -> list[str]:
    """Split on whitespace, always isolating the literal mask token."""
    out = []
    for piece in _MASK_SPLIT.split(text):
        if piece == MASK_TOKEN:
            out.append(piece)
        else:
            out.extend(piece.split())
    return out


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    mask_positions: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(
            self, "mask_positions", tuple(int(p) for p in self.mask_positions)
        )
        if not self.tokens:
            raise ContractError("token sequence is empty")
        n = len(self.tokens)
        for p in self.mask_positions:
            if not 0 <= p < n:
                raise ContractError(f"mask position {p} out of bounds for length {n}")

    def __len__(self):
        return len(self.tokens)

    @property
    def mask_position(self) -> int:
        if len(self.mask_positions) != 1:
            raise ContractError(
                f"expected exactly one mask position, got {len(self.mask_positions)}"
            )
        return self.mask_positions[0]


@dataclass(frozen=True)
class HiddenStates:
    vectors: torch.Tensor  # (n, d)

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ContractError(f"hidden states must be (n>0, d>0), got {tuple(v.shape)}")
        if not bool(torch.isfinite(v).all()):
            raise ContractError("hidden states contain non-finite values")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class Vocabulary:
    """Token <-> id table. Ids 0 and 1 are reserved for [UNK] and [MASK]."""

    def __init__(self, tokens: Iterable[str]):
        words = [UNK_TOKEN, MASK_TOKEN]
        seen = set(words)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                words.append(tok)
        self.tokens = words
        self._index = {tok: i for i, tok in enumerate(words)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra: Iterable[str] = ()):
        found = set(extra)
        for text in texts:
            found.update(whitespace_tokenize(text))
        found.discard(UNK_TOKEN)
        found.discard(MASK_TOKEN)
        return cls(sorted(found))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def unk_id(self):
        return 0

    @property
    def mask_id(self):
        return 1

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def strict_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} is not in the vocabulary") from None


class MaskedLMBackend:
    """Interface every masked-LM backend implements.

    Subclasses own their tokenizer, parameters and optimizer choice.
    ``mask_hidden`` has a looping default; backends should batch it.
    """

    hidden_size: int
    vocab_size: int
    name: str = "abstract"

    def tokenize(self, text: str) -> TokenSequence:
        raise NotImplementedError

    def token_id(self, word: str) -> int:
        raise NotImplementedError

    def encode(self, seq: TokenSequence) -> HiddenStates:
        raise NotImplementedError

    def vocab_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def parameters(self) -> list[torch.Tensor]:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError

    def mask_hidden(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        return torch.stack([self.encode(s).vectors[s.mask_position] for s in seqs])

    def make_optimizer(self, learning_rate: float) -> torch.optim.Optimizer:
        return torch.optim.SGD(self.parameters(), lr=learning_rate)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ReferenceMaskedLM(MaskedLMBackend):
    name = "reference"

    def __init__(self, vocab: Vocabulary, hidden_size: int = 16, seed: int = 0):
        if hidden_size <= 0:
            raise ConfigError("hidden_size must be positive")
        self.vocab = vocab
        self.hidden_size = hidden_size
        self.vocab_size = len(vocab)
        self.seed = seed
        d, V = hidden_size, len(vocab)
        rng = np.random.default_rng(seed)
        embed = rng.normal(0.0, 1.0, size=(V, d))
        dense_w = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        proj_w = rng.normal(0.0, 1.0 / math.sqrt(d), size=(V, d))
        self.params = {
            "embed": torch.tensor(embed, dtype=DTYPE, requires_grad=True),
            "dense_w": torch.tensor(dense_w, dtype=DTYPE, requires_grad=True),
            "dense_b": torch.zeros(d, dtype=DTYPE, requires_grad=True),
            "proj_w": torch.tensor(proj_w, dtype=DTYPE, requires_grad=True),
            "proj_b": torch.zeros(V, dtype=DTYPE, requires_grad=True),
        }

    def tokenize(self, text: str) -> TokenSequence:
        words = whitespace_tokenize(text)
        ids = [self.vocab.id(w) for w in words]
        masks = [i for i, w in enumerate(words) if w == MASK_TOKEN]
        return TokenSequence(ids, masks)

    def token_id(self, word: str) -> int:
        return self.vocab.strict_id(word)

    def _check_ids(self, seq: TokenSequence):
        for t in seq.tokens:
            if not 0 <= t < self.vocab_size:
                raise VocabularyError(
                    f"token id {t} outside vocabulary of size {self.vocab_size}"
                )

    def encode(self, seq: TokenSequence) -> HiddenStates:
        self._check_ids(seq)
        p = self.params
        e = p["embed"][torch.tensor(seq.tokens)]
        ctx = e.mean(dim=0, keepdim=True)
        h = torch.tanh((e + ctx) @ p["dense_w"].T + p["dense_b"])
        return HiddenStates(h)

    def mask_hidden(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        if not seqs:
            return torch.zeros(0, self.hidden_size, dtype=DTYPE)
        for s in seqs:
            self._check_ids(s)
        p = self.params
        width = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), width, dtype=torch.long)
        valid = torch.zeros(len(seqs), width, dtype=DTYPE)
        for row, s in enumerate(seqs):
            ids[row, : len(s)] = torch.tensor(s.tokens)
            valid[row, : len(s)] = 1.0
        mask_ids = torch.tensor([s.tokens[s.mask_position] for s in seqs])
        e = p["embed"][ids] * valid.unsqueeze(-1)
        ctx = e.sum(dim=1) / valid.sum(dim=1, keepdim=True)
        h = torch.tanh((p["embed"][mask_ids] + ctx) @ p["dense_w"].T + p["dense_b"])
        return h

    def vocab_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.hidden_size:
            raise ContractError(
                f"hidden dimension {hidden.shape[-1]} != backend hidden_size {self.hidden_size}"
            )
        return hidden @ self.params["proj_w"].T + self.params["proj_b"]

    def parameters(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def state_dict(self) -> dict:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        with torch.no_grad():
            for k, v in self.params.items():
                v.copy_(state[k])

    def save(self, path) -> None:
        torch.save(
            {
                "backend": self.name,
                "vocab": self.vocab.tokens,
                "hidden_size": self.hidden_size,
                "seed": self.seed,
                "state": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ReferenceMaskedLM":
        blob = torch.load(path, weights_only=True)
        vocab = Vocabulary(t for t in blob["vocab"] if t not in (UNK_TOKEN, MASK_TOKEN))
        model = cls(vocab, hidden_size=blob["hidden_size"], seed=blob["seed"])
        model.load_state_dict(blob["state"])
        return model


class SentenceEncoder:
    embed_dim: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashSentenceEncoder(SentenceEncoder):
    """Frozen bag-of-token-vectors encoder, see module docstring."""

    def __init__(self, embed_dim: int = 32, seed: int = 0):
        self.embed_dim = embed_dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}
        self._text_cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}\0{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.embed_dim)
            vec.flags.writeable = False
            self._cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = self._text_cache.get(text)
        if vec is None:
            tokens = whitespace_tokenize(text)
            if not tokens:
                raise ContractError("cannot embed empty text")
            vec = np.mean([self.token_vector(t) for t in tokens], axis=0)
            vec.flags.writeable = False
            if len(self._text_cache) < 200_000:
                self._text_cache[text] = vec
        return vec


def encode(backend: MaskedLMBackend, seq: TokenSequence) -> HiddenStates:
    return backend.encode(seq)


def vocab_logits(backend: MaskedLMBackend, hidden: torch.Tensor) -> torch.Tensor:
    return backend.vocab_logits(hidden)


def sentence_embed(encoder: SentenceEncoder, text: str) -> np.ndarray:
    if not text or not text.strip():
        raise ContractError("sentence_embed requires non-empty text")
    return encoder.embed(text)


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


BackendFactory = Callable[..., MaskedLMBackend]
_BACKENDS: dict[str, BackendFactory] = {"reference": ReferenceMaskedLM}


def register_backend(name: str, factory: BackendFactory) -> None:
    """Register an adapter for an external pre-trained model."""
    _BACKENDS[name] = factory


def make_backend(name: str, vocab: Vocabulary, seed: int = 0, **kwargs) -> MaskedLMBackend:
    try:
        factory = _BACKENDS[name]
    except KeyError:
        known = ", ".join(sorted(_BACKENDS))
        raise ConfigError(f"unknown backend {name!r} (available: {known})") from None
    return factory(vocab, seed=seed, **kwargs)
