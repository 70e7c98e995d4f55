"""Support-set construction and positive/negative selection.

Two candidate pools per anchor: batch level (the other batch members under
the main template) and prompt level (batch members re-rendered under the
alternate templates). Pools are ranked by sentence-encoder cosine on the
raw input text, truncated by the filtering ratio, and then split into one
positive and a set of different-label negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .backend import SentenceEncoder, cosine, sentence_embed
from .errors import ConfigError, ContractError
from .templates import PromptedExample, Template, apply

PROMPT_LEVEL = "prompt_level"
BATCH_LEVEL = "batch_level"

SIM_BASED = "sim_based"
LABEL_BASED = "label_based"
_STRATEGY_ALIASES = {"sim": SIM_BASED, "label": LABEL_BASED, SIM_BASED: SIM_BASED, LABEL_BASED: LABEL_BASED}


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = SIM_BASED
    filtering_ratio: float = 0.5
    max_negatives: Optional[int] = None
    # None means the strategy default: False for sim_based, True for label_based
    require_same_label_positive: Optional[bool] = None
    prompt_level_scope: str = "batch"

    def __post_init__(self):
        if self.strategy not in _STRATEGY_ALIASES:
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")
        object.__setattr__(self, "strategy", _STRATEGY_ALIASES[self.strategy])
        if not 0.0 < self.filtering_ratio <= 1.0:
            raise ConfigError(f"filtering_ratio must be in (0, 1], got {self.filtering_ratio}")
        if self.max_negatives is not None and self.max_negatives < 1:
            raise ConfigError("max_negatives must be positive or None (unbounded)")
        if self.prompt_level_scope not in ("batch", "query_only"):
            raise ConfigError(f"unknown prompt_level_scope {self.prompt_level_scope!r}")

    @property
    def same_label_positive(self) -> bool:
        if self.strategy == LABEL_BASED:
            return True
        return bool(self.require_same_label_positive)


@dataclass(frozen=True)
class SupportCandidate:
    prompted: PromptedExample
    label: Optional[int]
    similarity: float = 0.0
    source: str = BATCH_LEVEL

    @property
    def raw_text(self) -> str:
        return self.prompted.raw_text


@dataclass(frozen=True)
class SupportSet:
    query: PromptedExample
    candidates: tuple[SupportCandidate, ...]
    positive: Optional[SupportCandidate]
    negatives: tuple[SupportCandidate, ...]
    level: str
    fell_back: bool = field(default=False, compare=False)

    @property
    def usable(self) -> bool:
        return self.positive is not None and len(self.negatives) >= 1


def same_example(a: PromptedExample, b: PromptedExample) -> bool:
    if a.example_id is not None and b.example_id is not None:
        return a.example_id == b.example_id
    return a is b


def build_batch_support(
    query: PromptedExample, batch: Sequence[PromptedExample]
) -> list[SupportCandidate]:
    if not any(same_example(query, b) for b in batch):
        raise ContractError("query is not a member of the batch")
    return [
        SupportCandidate(b, b.label, source=BATCH_LEVEL)
        for b in batch
        if not same_example(query, b)
    ]


def build_prompt_support(
    query: PromptedExample,
    batch: Sequence[PromptedExample],
    templates: Sequence[Template],
    scope: str = "batch",
) -> list[SupportCandidate]:
    """Render batch members under every alternate (non-main) template.

    ``templates[0]`` is the main template and is skipped.
    """
    alternates = templates[1:]
    members = list(batch) if scope == "batch" else [query]
    out = []
    for member in members:
        for tpl in alternates:
            rendered = apply(tpl, member.fields or member.raw_text, member.label, member.example_id)
            out.append(SupportCandidate(rendered, member.label, source=PROMPT_LEVEL))
    return out


def _order_key(c: SupportCandidate):
    ex = c.prompted.example_id
    return (-c.similarity, c.prompted.raw_text, c.prompted.template_id, -1 if ex is None else ex)


def kept_count(n: int, filtering_ratio: float) -> int:
    # round first so that e.g. 0.1 * 30 does not ceil to 4
    return min(n, max(1, math.ceil(round(filtering_ratio * n, 9))))


def rank(
    query: PromptedExample, candidates: Sequence[SupportCandidate], encoder: SentenceEncoder
) -> list[SupportCandidate]:
    q = sentence_embed(encoder, query.raw_text)
    scored = [
        replace(c, similarity=cosine(q, sentence_embed(encoder, c.raw_text))) for c in candidates
    ]
    scored.sort(key=_order_key)
    return scored


def rank_and_filter(
    query: PromptedExample,
    candidates: Sequence[SupportCandidate],
    encoder: SentenceEncoder,
    config: SamplingConfig,
) -> list[SupportCandidate]:
    if not candidates:
        raise ContractError("rank_and_filter needs at least one candidate")
    ranked = rank(query, candidates, encoder)
    return ranked[: kept_count(len(ranked), config.filtering_ratio)]


def select_pos_neg(
    query: PromptedExample,
    filtered: Sequence[SupportCandidate],
    config: SamplingConfig,
    level: str = BATCH_LEVEL,
) -> SupportSet:
    if query.label is None:
        raise ContractError("positive/negative selection needs a labelled query")
    positive = None
    for c in filtered:
        if not config.same_label_positive or c.label == query.label:
            positive = c
            break
    negatives = [c for c in filtered if c.label != query.label and c is not positive]
    if config.max_negatives is not None:
        negatives = negatives[-config.max_negatives :]  # lowest-similarity end
    return SupportSet(query, tuple(filtered), positive, tuple(negatives), level)


def sample_support(
    query: PromptedExample,
    candidates: Sequence[SupportCandidate],
    encoder: SentenceEncoder,
    config: SamplingConfig,
    level: str = BATCH_LEVEL,
) -> SupportSet:
    """Rank, filter and select; retry on the unfiltered pool if unusable."""
    if not candidates:
        return SupportSet(query, (), None, (), level)
    ranked = rank(query, candidates, encoder)
    filtered = ranked[: kept_count(len(ranked), config.filtering_ratio)]
    chosen = select_pos_neg(query, filtered, config, level)
    if chosen.usable or len(filtered) == len(ranked):
        return chosen
    retry = select_pos_neg(query, ranked, config, level)
    return replace(retry, fell_back=True)
