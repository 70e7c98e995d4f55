import pytest

from consprompt import toy
from consprompt.backend import HashSentenceEncoder, ReferenceMaskedLM, Vocabulary
from consprompt.data import Dataset, Example
from consprompt.templates import parse_template
from consprompt.verbalizer import Verbalizer

TINY_WORDS = ["a", "b", "c", "good", "fine", "bad", "poor", "It", "is", "was", "so", "yes", "no"]


@pytest.fixture
def tiny_vocab():
    return Vocabulary(TINY_WORDS)


@pytest.fixture
def tiny_backend(tiny_vocab):
    return ReferenceMaskedLM(tiny_vocab, hidden_size=16, seed=7)


@pytest.fixture
def encoder():
    return HashSentenceEncoder(embed_dim=32, seed=0)


@pytest.fixture
def tiny_templates():
    return [
        parse_template("{input} It is {mask}", "t0"),
        parse_template("{input} so {mask}", "t1"),
        parse_template("It was {input} {mask}", "t2"),
    ]


@pytest.fixture
def tiny_verbalizer(tiny_backend):
    return Verbalizer.from_mapping({"neg": "no", "pos": "yes"}, tiny_backend)


@pytest.fixture
def tiny_batch():
    rows = [
        ("a good b", "pos"),
        ("c fine a", "pos"),
        ("good fine", "pos"),
        ("a bad c", "neg"),
        ("poor b b", "neg"),
        ("bad poor a", "neg"),
    ]
    return [Example((text,), label, i) for i, (text, label) in enumerate(rows)]


def toy_dataset(kind="separable", n_per_label=200, seed=0, label_set=None):
    rows = toy.make_task(kind, n_per_label, seed)
    labels = label_set or tuple(sorted({y for _, y in rows}))
    return Dataset(tuple(Example((x,), y, i) for i, (x, y) in enumerate(rows)), labels)


def toy_stack(train, test, hidden_size=16, backend_seed=0):
    """Templates, vocabulary and verbalizer for the toy task."""
    templates = [parse_template(p, i) for i, p in toy.TEMPLATES]
    texts = [ex.fields[0] for ex in (*train, *test)]
    texts += [p.replace("{input}", " ").replace("{mask}", " ") for _, p in toy.TEMPLATES]
    vocab = Vocabulary.from_texts(texts, toy.LABEL_WORDS.values())
    backend = ReferenceMaskedLM(vocab, hidden_size=hidden_size, seed=backend_seed)
    verbalizer = Verbalizer.from_mapping(toy.LABEL_WORDS, backend)
    return templates, vocab, verbalizer


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
