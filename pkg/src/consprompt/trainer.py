"""Joint prompt + contrastive fine-tuning, evaluation and K-shot experiments."""

from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch

from .backend import MaskedLMBackend, SentenceEncoder
from .contrastive import (
    AnchorGroup,
    ContrastiveConfig,
    directional_terms,
    joint_loss,
    symmetric_loss,
)
from .data import Dataset, Example, KShotSplit, batches, make_kshot
from .errors import ConfigError, NumericError
from .sampling import (
    BATCH_LEVEL,
    PROMPT_LEVEL,
    SamplingConfig,
    SupportSet,
    build_batch_support,
    build_prompt_support,
    sample_support,
)
from .templates import PromptedExample, Template, apply
from .verbalizer import Verbalizer, ce_loss, class_probs, gather_label_logits

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 8
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 42
    loss: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    # False gives plain prompt-based fine-tuning: no support sets are built
    contrastive: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size {self.batch_size} < 2: batch-level contrastive sampling needs two examples"
            )
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")


@dataclass
class StepLosses:
    step: int
    l_ce: float
    l_bc: float
    l_pc: float
    total: float
    skipped_bc: int = 0
    skipped_pc: int = 0
    fallbacks: int = 0


@dataclass
class RunMetrics:
    steps: list[StepLosses] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int = 0
    dev_accuracy: float = 0.0
    test_accuracy: Optional[float] = None

    @property
    def skipped_bc(self) -> int:
        return sum(s.skipped_bc for s in self.steps)

    @property
    def skipped_pc(self) -> int:
        return sum(s.skipped_pc for s in self.steps)


def prompt_examples(
    examples: Sequence[Example], template: Template, verbalizer: Verbalizer
) -> list[PromptedExample]:
    return [
        apply(template, ex.fields, verbalizer.label_id(ex.label), ex.index) for ex in examples
    ]


def _groups(sets: Sequence[SupportSet], rows: dict, reps: torch.Tensor, anchors: torch.Tensor):
    out = []
    for ss in sets:
        q = ss.query
        pos = reps[rows[(ss.positive.prompted.example_id, ss.positive.prompted.template_id)]]
        neg = reps[[rows[(c.prompted.example_id, c.prompted.template_id)] for c in ss.negatives]]
        out.append(AnchorGroup(anchors[rows[(q.example_id, q.template_id)]], pos, neg))
    return out


@dataclass
class Objective:
    total: torch.Tensor
    l_ce: torch.Tensor
    l_bc: torch.Tensor
    l_pc: torch.Tensor
    skipped_bc: int = 0
    skipped_pc: int = 0
    fallbacks: int = 0
    texts: list = field(default_factory=list, repr=False)
    labels: list = field(default_factory=list, repr=False)


def joint_objective(
    backend: MaskedLMBackend,
    batch: Sequence[Example],
    templates: Sequence[Template],
    verbalizer: Verbalizer,
    config: TrainConfig,
    encoder: Optional[SentenceEncoder] = None,
) -> Objective:
    """Differentiable L_CE + t*L_BC + a*L_PC for one batch.

    Every batch member is an anchor once per level. Anchors whose support
    set has no positive or no negative (even after the unfiltered retry)
    are left out of that level's mean.
    """
    main = templates[0]
    prompted = prompt_examples(batch, main, verbalizer)
    labels = [p.label for p in prompted]
    seqs = [backend.tokenize(p.text) for p in prompted]
    mask_h = backend.mask_hidden(seqs)
    logits = gather_label_logits(backend.vocab_logits(mask_h), verbalizer)
    if not bool(torch.isfinite(logits).all()):
        raise NumericError(
            "non-finite label logits",
            diagnostics={"texts": [p.text for p in prompted], "labels": labels},
        )
    l_ce = ce_loss(class_probs(logits), labels)

    zero = torch.zeros((), dtype=l_ce.dtype)
    l_bc = l_pc = zero
    skipped_bc = skipped_pc = fallbacks = 0
    if config.contrastive:
        if encoder is None:
            raise ConfigError("contrastive training needs a sentence encoder")
        sc = config.sampling
        rows = {(p.example_id, main.id): i for i, p in enumerate(prompted)}

        bc_sets = []
        for q in prompted:
            ss = sample_support(q, build_batch_support(q, prompted), encoder, sc, BATCH_LEVEL)
            fallbacks += ss.fell_back
            if ss.usable:
                bc_sets.append(ss)
        skipped_bc = len(prompted) - len(bc_sets)

        pc_sets = []
        if len(templates) > 1:
            for q in prompted:
                cands = build_prompt_support(q, prompted, templates, sc.prompt_level_scope)
                ss = sample_support(q, cands, encoder, sc, PROMPT_LEVEL)
                fallbacks += ss.fell_back
                if ss.usable:
                    pc_sets.append(ss)
        skipped_pc = len(prompted) - len(pc_sets)

        # encode only the alternate renderings that some usable set refers to
        needed = {}
        for ss in pc_sets:
            for c in (ss.positive, *ss.negatives):
                key = (c.prompted.example_id, c.prompted.template_id)
                if key not in rows and key not in needed:
                    needed[key] = c.prompted
        if needed:
            alt_h = backend.mask_hidden([backend.tokenize(p.text) for p in needed.values()])
            reps = torch.cat([mask_h, alt_h])
            for j, key in enumerate(needed):
                rows[key] = len(prompted) + j
        else:
            reps = mask_h

        bc_groups = _groups(bc_sets, rows, reps, mask_h)
        pc_groups = _groups(pc_sets, rows, reps, mask_h)
        tau, mode = config.loss.temperature, config.loss.denominator
        l_bc = symmetric_loss(bc_groups, tau, mode).value
        if config.loss.pc_pairing == "literal":
            l_pc = _literal_pc(bc_sets, bc_groups, pc_sets, pc_groups, tau, mode)
        else:
            l_pc = symmetric_loss(pc_groups, tau, mode).value

    total = joint_loss(l_ce, l_bc, l_pc, config.loss)
    return Objective(
        total, l_ce, l_bc, l_pc, skipped_bc, skipped_pc, fallbacks, [p.text for p in prompted], labels
    )


def train_step(
    backend: MaskedLMBackend,
    batch: Sequence[Example],
    templates: Sequence[Template],
    verbalizer: Verbalizer,
    config: TrainConfig,
    encoder: Optional[SentenceEncoder] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
) -> StepLosses:
    """One optimizer update on the joint loss; returns the pre-update losses."""
    try:
        obj = joint_objective(backend, batch, templates, verbalizer, config, encoder)
    except NumericError as err:
        err.diagnostics = {"step": step, **err.diagnostics}
        raise
    if not bool(torch.isfinite(obj.total)):
        raise NumericError(
            f"non-finite loss at step {step}",
            diagnostics={
                "step": step,
                "texts": obj.texts,
                "labels": obj.labels,
                "l_ce": obj.l_ce.item(),
                "l_bc": obj.l_bc.item(),
                "l_pc": obj.l_pc.item(),
            },
        )
    if optimizer is not None:
        optimizer.zero_grad()
        obj.total.backward()
        optimizer.step()
    return StepLosses(
        step,
        obj.l_ce.item(),
        obj.l_bc.item(),
        obj.l_pc.item(),
        obj.total.item(),
        obj.skipped_bc,
        obj.skipped_pc,
        obj.fallbacks,
    )


def _literal_pc(bc_sets, bc_groups, pc_sets, pc_groups, tau, mode):
    # mean over anchors usable at both levels of S_BC(i,j) + S_PC(j,i)
    if not bc_groups or not pc_groups:
        return torch.zeros((), dtype=torch.float64)
    bc_fwd, _ = directional_terms(bc_groups, tau, mode)
    _, pc_inv = directional_terms(pc_groups, tau, mode)
    bc_at = {ss.query.example_id: i for i, ss in enumerate(bc_sets)}
    terms = [
        bc_fwd[bc_at[ss.query.example_id]] + pc_inv[j]
        for j, ss in enumerate(pc_sets)
        if ss.query.example_id in bc_at
    ]
    return torch.stack(terms).mean() if terms else torch.zeros((), dtype=torch.float64)


@torch.no_grad()
def predict(
    backend: MaskedLMBackend,
    examples: Sequence[Example],
    template: Template,
    verbalizer: Verbalizer,
) -> list[int]:
    preds = []
    for start in range(0, len(examples), EVAL_CHUNK):
        chunk = examples[start : start + EVAL_CHUNK]
        seqs = [backend.tokenize(apply(template, ex.fields).text) for ex in chunk]
        logits = gather_label_logits(backend.vocab_logits(backend.mask_hidden(seqs)), verbalizer)
        preds.extend(class_probs(logits).argmax(dim=-1).tolist())
    return preds


def evaluate(
    backend: MaskedLMBackend, dataset, template: Template, verbalizer: Verbalizer
) -> float:
    examples = list(dataset)
    if not examples:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds = predict(backend, examples, template, verbalizer)
    gold = [verbalizer.label_id(ex.label) for ex in examples]
    return sum(p == g for p, g in zip(preds, gold)) / len(gold)


def train(
    backend: MaskedLMBackend,
    split: KShotSplit,
    templates: Sequence[Template],
    verbalizer: Verbalizer,
    config: TrainConfig,
    encoder: Optional[SentenceEncoder] = None,
    on_step: Optional[Callable[[StepLosses], None]] = None,
) -> RunMetrics:
    """Train for ``max_steps``; keep the best-dev checkpoint and score test on it."""
    metrics = RunMetrics()
    optimizer = backend.make_optimizer(config.learning_rate)
    stream = batches(split, config.batch_size, config.seed)
    best_state = None
    best_dev = -1.0
    for step in range(1, config.max_steps + 1):
        losses = train_step(
            backend, next(stream), templates, verbalizer, config, encoder, optimizer, step
        )
        metrics.steps.append(losses)
        if on_step is not None:
            on_step(losses)
        if step % config.eval_every == 0 or step == config.max_steps:
            dev_acc = evaluate(backend, split.dev, templates[0], verbalizer)
            metrics.evals.append({"step": step, "dev_accuracy": dev_acc})
            if dev_acc > best_dev:
                best_dev, best_state, metrics.best_step = dev_acc, backend.state_dict(), step
    backend.load_state_dict(best_state)
    metrics.dev_accuracy = best_dev
    if split.test is not None:
        metrics.test_accuracy = evaluate(backend, split.test, templates[0], verbalizer)
    log.info(
        "trained %d steps: best dev %.4f at step %d, test %s, skipped anchors bc=%d pc=%d",
        config.max_steps,
        best_dev,
        metrics.best_step,
        metrics.test_accuracy,
        metrics.skipped_bc,
        metrics.skipped_pc,
    )
    return metrics


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    median: float
    values: tuple[float, ...]

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        values = tuple(float(v) for v in values)
        if not values:
            raise ValueError("cannot summarise an empty list")
        return cls(
            statistics.fmean(values),
            statistics.pstdev(values),
            statistics.median(values),
            values,
        )

    def cell(self) -> str:
        """Percent ``mean (std)``, e.g. ``77.3 (3.6)``."""
        return f"{100 * self.mean:.1f} ({100 * self.std:.1f})"


@dataclass
class SeedResult:
    seed: int
    learning_rate: float
    batch_size: int
    dev_accuracy: float
    test_accuracy: Optional[float]
    grid: list[dict] = field(repr=False, default_factory=list)
    runs: list[RunMetrics] = field(repr=False, default_factory=list)
    state: Optional[dict] = field(repr=False, default=None)  # best grid point's weights


@dataclass
class ExperimentReport:
    k: int
    seeds: list[SeedResult]

    @property
    def summary(self) -> Summary:
        return Summary.of([s.test_accuracy for s in self.seeds])

    def to_dict(self) -> dict:
        s = self.summary
        return {
            "k": self.k,
            "mean": s.mean,
            "std": s.std,
            "median": s.median,
            "cell": s.cell(),
            "seeds": [
                {
                    "seed": r.seed,
                    "learning_rate": r.learning_rate,
                    "batch_size": r.batch_size,
                    "dev_accuracy": r.dev_accuracy,
                    "test_accuracy": r.test_accuracy,
                    "grid": r.grid,
                }
                for r in self.seeds
            ],
        }


def run_seed(
    full_dataset: Dataset,
    k: int,
    seed: int,
    grid: Sequence[TrainConfig],
    templates: Sequence[Template],
    verbalizer: Verbalizer,
    encoder: Optional[SentenceEncoder],
    backend_factory: Callable[[], MaskedLMBackend],
    test: Optional[Dataset] = None,
    split: Optional[KShotSplit] = None,
) -> SeedResult:
    """Pick the grid point with the best dev accuracy (first wins ties)."""
    split = split or make_kshot(full_dataset, k, seed, test)
    best = None
    rows, runs = [], []
    for cfg in grid:
        backend = backend_factory()
        metrics = train(backend, split, templates, verbalizer, cfg, encoder)
        runs.append(metrics)
        rows.append(
            {
                "learning_rate": cfg.learning_rate,
                "batch_size": cfg.batch_size,
                "dev_accuracy": metrics.dev_accuracy,
                "test_accuracy": metrics.test_accuracy,
                "best_step": metrics.best_step,
                "skipped_bc": metrics.skipped_bc,
                "skipped_pc": metrics.skipped_pc,
            }
        )
        if best is None or metrics.dev_accuracy > best[1].dev_accuracy:
            best = (cfg, metrics, backend.state_dict())
    cfg, metrics, state = best
    return SeedResult(
        seed,
        cfg.learning_rate,
        cfg.batch_size,
        metrics.dev_accuracy,
        metrics.test_accuracy,
        rows,
        runs,
        state,
    )


def run_experiment(
    full_dataset: Dataset,
    k: int,
    seeds: Sequence[int],
    grid: Sequence[TrainConfig],
    templates: Sequence[Template],
    verbalizer: Verbalizer,
    encoder: Optional[SentenceEncoder],
    backend_factory: Callable[[], MaskedLMBackend],
    test: Optional[Dataset] = None,
    jobs: int = 1,
    splits: Optional[dict] = None,
) -> ExperimentReport:
    """Per seed: K-shot split, grid search on dev, test accuracy of the winner.

    ``splits`` maps seed -> KShotSplit to replay persisted manifests.
    """
    if not seeds:
        raise ConfigError("run_experiment needs at least one seed")
    if not grid:
        raise ConfigError("empty hyper-parameter grid")
    args = (grid, templates, verbalizer, encoder, backend_factory, test)
    splits = splits or {}
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            futures = [
                pool.submit(run_seed, full_dataset, k, s, *args, splits.get(s)) for s in seeds
            ]
            results = [f.result() for f in futures]
    else:
        results = [run_seed(full_dataset, k, s, *args, splits.get(s)) for s in seeds]
    return ExperimentReport(k, results)


def expand_grid(base: TrainConfig, learning_rates: Sequence[float], batch_sizes: Sequence[int]) -> list[TrainConfig]:
    """lr-major grid of configs, in the order results are compared."""
    return [replace(base, learning_rate=lr, batch_size=bs) for lr in learning_rates for bs in batch_sizes]


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
