"""InfoNCE scoring over support sets and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .backend import DTYPE, MaskedLMBackend, TokenSequence
from .errors import ConfigError, ContractError

WITH_POSITIVE = "with_positive"
NEGATIVES_ONLY = "negatives_only"


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    t: float = 0.5  # batch-level weight
    a: float = 0.5  # prompt-level weight
    denominator: str = WITH_POSITIVE
    # "symmetric": L_PC = mean[S_PC(i,j) + S_PC(j,i)]
    # "literal":   L_PC = mean[S_BC(i,j) + S_PC(j,i)], the mixed-level pairing
    pc_pairing: str = "symmetric"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.t < 0 or self.a < 0:
            raise ConfigError("loss weights t and a must be non-negative")
        if self.denominator not in (WITH_POSITIVE, NEGATIVES_ONLY):
            raise ConfigError(f"unknown denominator mode {self.denominator!r}")
        if self.pc_pairing not in ("symmetric", "literal"):
            raise ConfigError(f"unknown pc_pairing {self.pc_pairing!r}")


@dataclass(frozen=True)
class AnchorGroup:
    anchor: torch.Tensor  # (d,)
    positive: torch.Tensor  # (d,)
    negatives: torch.Tensor  # (m, d), m >= 1

    def __post_init__(self):
        a = torch.as_tensor(self.anchor, dtype=DTYPE)
        p = torch.as_tensor(self.positive, dtype=DTYPE)
        n = torch.as_tensor(self.negatives, dtype=DTYPE)
        if n.ndim == 1:
            n = n.unsqueeze(0)
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "positive", p)
        object.__setattr__(self, "negatives", n)
        if a.ndim != 1 or p.shape != a.shape or n.ndim != 2 or n.shape[1] != a.shape[0]:
            raise ContractError("anchor, positive and negatives must share dimension d")
        if n.shape[0] < 1:
            raise ContractError("an anchor group needs at least one negative")
        for v in (a, p, n):
            if not bool(torch.isfinite(v).all()):
                raise ContractError("anchor group contains non-finite values")

    def swapped(self) -> "AnchorGroup":
        return AnchorGroup(self.positive, self.anchor, self.negatives)


@dataclass(frozen=True)
class ContrastiveTerm:
    value: torch.Tensor
    count: int

    @property
    def skipped(self) -> bool:
        return self.count == 0


def represent(backend: MaskedLMBackend, prompted: TokenSequence) -> torch.Tensor:
    return backend.encode(prompted).vectors[prompted.mask_position]


def _cosines(anchor: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    na = anchor.norm()
    no = others.norm(dim=-1)
    if bool(na == 0) or bool((no == 0).any()):
        raise ContractError("zero-norm representation in contrastive score")
    return (others @ anchor) / (no * na)


def info_nce(group: AnchorGroup, temperature: float, denominator: str = WITH_POSITIVE) -> torch.Tensor:
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    s_pos = _cosines(group.anchor, group.positive.unsqueeze(0))[0]
    s_neg = _cosines(group.anchor, group.negatives)
    if denominator == WITH_POSITIVE:
        terms = torch.cat([s_pos.unsqueeze(0), s_neg]) / temperature
    elif denominator == NEGATIVES_ONLY:
        terms = s_neg / temperature
    else:
        raise ContractError(f"unknown denominator mode {denominator!r}")
    return torch.logsumexp(terms, dim=0) - s_pos / temperature


def directional_terms(
    groups: Sequence[AnchorGroup], temperature: float, denominator: str = WITH_POSITIVE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-group anchor-centred and positive-centred scores, each (N,)."""
    fwd = [info_nce(g, temperature, denominator) for g in groups]
    inv = [info_nce(g.swapped(), temperature, denominator) for g in groups]
    return torch.stack(fwd), torch.stack(inv)


def symmetric_loss(
    groups: Sequence[AnchorGroup], temperature: float, denominator: str = WITH_POSITIVE
) -> ContrastiveTerm:
    if not groups:
        return ContrastiveTerm(torch.zeros((), dtype=DTYPE), 0)
    fwd, inv = directional_terms(groups, temperature, denominator)
    return ContrastiveTerm((fwd + inv).mean(), len(groups))


def joint_loss(l_ce, l_bc, l_pc, config: ContrastiveConfig):
    return l_ce + config.t * l_bc + config.a * l_pc
