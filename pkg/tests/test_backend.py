import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from consprompt.backend import (
    HashSentenceEncoder,
    HiddenStates,
    ReferenceMaskedLM,
    TokenSequence,
    Vocabulary,
    cosine,
    encode,
    make_backend,
    sentence_embed,
    vocab_logits,
    whitespace_tokenize,
)
from consprompt.errors import ConfigError, ContractError, VocabularyError


def numpy_forward(vocab_size, d, seed, tokens):
    """Independent re-implementation of the documented reference forward rule."""
    rng = np.random.default_rng(seed)
    E = rng.normal(0.0, 1.0, size=(vocab_size, d))
    A = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    W = rng.normal(0.0, 1.0 / math.sqrt(d), size=(vocab_size, d))
    e = E[tokens]
    ctx = e.sum(axis=0) / len(tokens)
    h = np.tanh((e + ctx) @ A.T)
    return h, W


def test_encode_matches_numpy_oracle(tiny_vocab):
    backend = ReferenceMaskedLM(tiny_vocab, hidden_size=16, seed=7)
    out = encode(backend, TokenSequence([3, 1, 4], [1]))
    expected, _ = numpy_forward(len(tiny_vocab), 16, 7, [3, 1, 4])
    np.testing.assert_allclose(out.vectors.detach().numpy(), expected, rtol=0, atol=1e-12)


def test_vocab_logits_match_naive_matmul(tiny_backend):
    h = encode(tiny_backend, TokenSequence([2, 5, 1], [2])).vectors[2].detach()
    W = tiny_backend.params["proj_w"].detach().numpy()
    b = tiny_backend.params["proj_b"].detach().numpy()
    naive = [sum(h[j].item() * W[v, j] for j in range(W.shape[1])) + b[v] for v in range(W.shape[0])]
    got = vocab_logits(tiny_backend, h).detach().numpy()
    assert got.shape == (tiny_backend.vocab_size,)
    np.testing.assert_allclose(got, naive, atol=1e-12)


def test_zero_hidden_gives_zero_logits(tiny_backend):
    logits = vocab_logits(tiny_backend, torch.zeros(16, dtype=torch.float64))
    assert torch.count_nonzero(logits) == 0


def test_vocab_logits_dimension_mismatch(tiny_backend):
    with pytest.raises(ContractError):
        vocab_logits(tiny_backend, torch.zeros(15, dtype=torch.float64))


def test_encode_is_deterministic(tiny_backend):
    seq = TokenSequence([4, 1, 9, 9], [1])
    a = encode(tiny_backend, seq).vectors
    b = encode(tiny_backend, seq).vectors
    assert torch.equal(a, b)


def test_same_seed_same_weights(tiny_vocab):
    a = ReferenceMaskedLM(tiny_vocab, seed=3).state_dict()
    b = ReferenceMaskedLM(tiny_vocab, seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_out_of_vocabulary_id_rejected(tiny_backend):
    with pytest.raises(VocabularyError):
        encode(tiny_backend, TokenSequence([1, tiny_backend.vocab_size], [0]))


@pytest.mark.parametrize(
    "tokens, masks",
    [((), ()), ((1, 2), (2,)), ((1, 2), (-1,))],
)
def test_token_sequence_invariants(tokens, masks):
    with pytest.raises(ContractError):
        TokenSequence(tokens, masks)


def test_hidden_states_reject_non_finite():
    with pytest.raises(ContractError):
        HiddenStates(torch.tensor([[0.0, float("nan")]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 14), min_size=1, max_size=64))
def test_encode_shape_invariance(tokens):
    backend = ReferenceMaskedLM(Vocabulary([f"w{i}" for i in range(13)]), seed=1)
    out = encode(backend, TokenSequence(tokens, [0]))
    assert out.vectors.shape == (len(tokens), backend.hidden_size)


def test_batched_mask_hidden_matches_single_encode(tiny_backend):
    seqs = [tiny_backend.tokenize(t) for t in ("a b [MASK]", "[MASK] good", "c c c fine [MASK] no")]
    batched = tiny_backend.mask_hidden(seqs)
    for row, s in zip(batched, seqs):
        single = encode(tiny_backend, s).vectors[s.mask_position]
        torch.testing.assert_close(row, single, rtol=0, atol=1e-12)


def test_tokenizer_isolates_mask_and_maps_unknowns(tiny_backend):
    assert whitespace_tokenize("great movie It is [MASK].") == ["great", "movie", "It", "is", "[MASK]", "."]
    seq = tiny_backend.tokenize("a zzz [MASK]")
    assert seq.tokens == (tiny_backend.vocab.id("a"), 0, 1)
    assert seq.mask_positions == (2,)


def test_gradients_match_finite_differences(tiny_backend):
    seqs = [tiny_backend.tokenize(t) for t in ("a good [MASK]", "bad [MASK] c b")]
    weights = torch.linspace(-1, 1, tiny_backend.vocab_size, dtype=torch.float64)

    def scalar():
        logits = tiny_backend.vocab_logits(tiny_backend.mask_hidden(seqs))
        return (torch.sin(logits) * weights).sum()

    loss = scalar()
    grads = torch.autograd.grad(loss, tiny_backend.parameters())
    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(tiny_backend.parameters(), grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = scalar().item()
                flat[i] = old - h
                down = scalar().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                rel = abs(fd - gflat[i].item()) / max(abs(fd), abs(gflat[i].item()), 1e-8)
                worst = max(worst, rel)
    assert worst < 1e-4


def test_checkpoint_roundtrip(tmp_path, tiny_backend):
    with torch.no_grad():
        tiny_backend.params["dense_b"].add_(0.5)
    tiny_backend.save(tmp_path / "m.pt")
    loaded = ReferenceMaskedLM.load(tmp_path / "m.pt")
    assert loaded.vocab.tokens == tiny_backend.vocab.tokens
    for k, v in tiny_backend.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)


def test_make_backend_rejects_unknown_name(tiny_vocab):
    assert make_backend("reference", tiny_vocab, 0).vocab_size == len(tiny_vocab)
    with pytest.raises(ConfigError):
        make_backend("roberta-large", tiny_vocab, 0)


def _hash_vector(token, dim, seed):
    digest = hashlib.sha256(f"{seed}\0{token}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(dim)


def test_sentence_embed_is_mean_of_token_vectors():
    enc = HashSentenceEncoder(embed_dim=8, seed=5)
    expected = (_hash_vector("a", 8, 5) + _hash_vector("b", 8, 5)) / 2
    np.testing.assert_allclose(sentence_embed(enc, "a b"), expected, atol=1e-15)


def test_sentence_embed_determinism_and_self_cosine(encoder):
    a = sentence_embed(encoder, "the film was fine")
    b = HashSentenceEncoder(32, 0).embed("the film was fine")
    assert np.array_equal(a, b)
    assert np.isfinite(a).all()
    assert abs(cosine(a, a) - 1.0) < 1e-9


def test_sentence_embed_rejects_empty(encoder):
    with pytest.raises(ContractError):
        sentence_embed(encoder, "")
    with pytest.raises(ContractError):
        sentence_embed(encoder, "   ")


def test_cosine_zero_norm_is_zero():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


@given(
    st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    st.lists(st.floats(-10, 10), min_size=4, max_size=4),
)
def test_cosine_symmetry(a, b):
    assert cosine(a, b) == cosine(b, a)
