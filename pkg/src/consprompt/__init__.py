"""Prompt-based masked-LM fine-tuning with prompt-level and batch-level
contrastive learning over similarity-ranked support sets."""

from .backend import (
    HashSentenceEncoder,
    HiddenStates,
    MaskedLMBackend,
    ReferenceMaskedLM,
    SentenceEncoder,
    TokenSequence,
    Vocabulary,
    make_backend,
    register_backend,
)
from .contrastive import AnchorGroup, ContrastiveConfig, info_nce, joint_loss, symmetric_loss
from .data import Dataset, KShotSplit, load_tsv, make_kshot
from .sampling import SamplingConfig, SupportCandidate, SupportSet
from .templates import PromptedExample, Template, apply, load_template_set, parse_template
from .trainer import TrainConfig, evaluate, run_experiment, train, train_step
from .verbalizer import Verbalizer, ce_loss, class_logits, class_probs

__version__ = "0.1.0"
