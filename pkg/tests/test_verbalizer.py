import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from consprompt.backend import ReferenceMaskedLM, Vocabulary
from consprompt.errors import ContractError, LoadError, VocabularyError
from consprompt.verbalizer import (
    Verbalizer,
    batch_class_logits,
    ce_loss,
    class_logits,
    class_probs,
    read_verbalizer,
)

SST5 = {"0": "terrible", "1": "bad", "2": "okay", "3": "good", "4": "great"}


@pytest.fixture
def sst5_backend():
    return ReferenceMaskedLM(Vocabulary(["it", "was", *SST5.values()]), seed=2)


def test_five_way_output_and_gather_oracle(sst5_backend):
    verb = Verbalizer.from_mapping(SST5, sst5_backend)
    seq = sst5_backend.tokenize("it was [MASK]")
    got = class_logits(sst5_backend, seq, verb)
    assert got.shape == (5,)
    hidden = sst5_backend.encode(seq).vectors[seq.mask_position]
    full = sst5_backend.vocab_logits(hidden).tolist()
    expected = []
    for label in sorted(SST5):
        expected.append(full[sst5_backend.vocab.tokens.index(SST5[label])])
    assert got.tolist() == expected


def test_batched_class_logits_match_single(sst5_backend):
    verb = Verbalizer.from_mapping(SST5, sst5_backend)
    seqs = [sst5_backend.tokenize(t) for t in ("it was [MASK]", "[MASK] good bad")]
    batched = batch_class_logits(sst5_backend, seqs, verb)
    for row, s in zip(batched, seqs):
        torch.testing.assert_close(row, class_logits(sst5_backend, s, verb), rtol=0, atol=1e-12)


def test_equal_token_logits_give_equal_class_logits(sst5_backend):
    with torch.no_grad():
        sst5_backend.params["proj_w"][sst5_backend.token_id("good")] = sst5_backend.params["proj_w"][
            sst5_backend.token_id("great")
        ]
    verb = Verbalizer.from_mapping(SST5, sst5_backend)
    out = class_logits(sst5_backend, sst5_backend.tokenize("it [MASK]"), verb)
    assert out[3] == out[4]


def test_class_logits_needs_one_mask(sst5_backend):
    verb = Verbalizer.from_mapping(SST5, sst5_backend)
    with pytest.raises(ContractError):
        class_logits(sst5_backend, sst5_backend.tokenize("it was"), verb)
    with pytest.raises(ContractError):
        class_logits(sst5_backend, sst5_backend.tokenize("[MASK] [MASK]"), verb)


def test_verbalizer_validation(sst5_backend):
    with pytest.raises(ContractError):
        Verbalizer.from_mapping({"a": "good", "b": "good"}, sst5_backend)
    with pytest.raises(ContractError):
        Verbalizer.from_mapping({"a": "good"}, sst5_backend)
    with pytest.raises(VocabularyError):
        Verbalizer.from_mapping({"a": "good", "b": "missing"}, sst5_backend)
    with pytest.raises(VocabularyError):
        Verbalizer.from_mapping({"a": "good", "b": "very bad"}, sst5_backend)


def test_read_verbalizer(tmp_path):
    path = tmp_path / "v.tsv"
    path.write_text("neg\tterrible\npos\tgreat\n")
    assert read_verbalizer(path) == {"neg": "terrible", "pos": "great"}
    path.write_text("neg\tterrible\npos\tvery great\n")
    with pytest.raises(LoadError) as err:
        read_verbalizer(path)
    assert err.value.line == 2
    path.write_text("neg\tterrible\npos\tterrible\n")
    with pytest.raises(LoadError):
        read_verbalizer(path)


def test_uniform_logits():
    np.testing.assert_allclose(class_probs([0.3] * 4).numpy(), [0.25] * 4, atol=1e-15)


def test_closed_form_softmax():
    e = math.e
    expected = [e**2 / (e**2 + e), e / (e**2 + e)]
    np.testing.assert_allclose(class_probs([2.0, 1.0]).numpy(), expected, atol=1e-15)
    assert abs(expected[0] - 0.7311) < 1e-4 and abs(expected[1] - 0.2689) < 1e-4


def test_shift_invariance():
    x = torch.tensor([0.1, -2.0, 3.5], dtype=torch.float64)
    np.testing.assert_allclose(class_probs(x + 17.0).numpy(), class_probs(x).numpy(), atol=1e-9)


def test_class_probs_rejects_non_finite():
    with pytest.raises(ContractError):
        class_probs([1.0, float("inf")])
    with pytest.raises(ContractError):
        class_probs([float("nan"), 0.0])


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)))
def test_softmax_normalisation_and_argmax(logits):
    p = class_probs(logits)
    assert abs(p.sum().item() - 1.0) < 1e-6
    assert p[int(np.argmax(logits))] == p.max()


def test_ce_perfect_and_uniform():
    assert ce_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0]).item() == 0.0
    uniform = torch.full((3, 5), 0.2, dtype=torch.float64)
    assert abs(ce_loss(uniform, [0, 3, 4]).item() - math.log(5)) < 1e-12


def test_ce_two_item_batch():
    got = ce_loss([[0.7311, 0.2689], [0.5, 0.5]], [0, 1]).item()
    expected = (-math.log(0.7311) - math.log(0.5)) / 2
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.5031) < 1e-3


def test_ce_zero_probability_is_clamped():
    loss = ce_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [1])
    assert math.isfinite(loss.item())
    assert abs(loss.item() + math.log(1e-12)) < 1e-9


def test_ce_contract_errors():
    with pytest.raises(ContractError):
        ce_loss([[0.5, 0.5]], [0, 1])
    with pytest.raises(ContractError):
        ce_loss([[0.5, 0.5]], [2])


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(4, 3)), dtype=torch.float64, requires_grad=True)
    labels = [0, 2, 1, 1]
    (grad,) = torch.autograd.grad(ce_loss(class_probs(logits), labels), logits)
    h = 1e-4
    base = logits.detach().clone()
    for idx in np.ndindex(4, 3):
        up, down = base.clone(), base.clone()
        up[idx] += h
        down[idx] -= h
        fd = (ce_loss(class_probs(up), labels) - ce_loss(class_probs(down), labels)).item() / (2 * h)
        g = grad[idx].item()
        assert abs(fd - g) / max(abs(fd), abs(g), 1e-8) < 1e-4
