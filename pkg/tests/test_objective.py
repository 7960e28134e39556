import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_adapters, random_model
from scalpel import tensor as T
from scalpel.errors import ConfigError, InputError
from scalpel.gradcheck import check_gradients
from scalpel.lora import init_adapters
from scalpel.model import ModelConfig, TransformerModel, token_logprob
from scalpel.objective import (
    LossWeights, SentenceBatch, TokenBatch, normreg_loss, sentence_equalization_loss, sparsityreg_loss,
    textreg_loss, token_equalization_loss, total_loss,
)


def _token_batch(rng, vocab, n=3, length=5):
    prompts = [[1] + list(rng.integers(3, vocab, size=length - 1)) for _ in range(n)]
    correct = rng.integers(3, vocab, size=n)
    wrong = (correct - 3 + 1 + rng.integers(0, vocab - 4, size=n)) % (vocab - 3) + 3
    return TokenBatch(prompts, correct, wrong)


def _sentence_batch(rng, vocab, n=2):
    good = [[1] + list(rng.integers(3, vocab, size=rng.integers(3, 7))) for _ in range(n)]
    bad = [[1] + list(rng.integers(3, vocab, size=rng.integers(3, 7))) for _ in range(n)]
    return SentenceBatch(good, bad)


def _zero_layer_model(tokenizer, unembed):
    cfg = ModelConfig(vocab_size=len(tokenizer), d_model=4, n_layers=0, n_heads=1, d_ff=4, max_seq_len=8)
    rng = np.random.default_rng(0)
    params = {"tok_emb": rng.normal(size=(cfg.vocab_size, 4)), "pos_emb": rng.normal(size=(8, 4)),
              "final_norm": np.ones(4), "unembed": unembed(cfg, rng)}
    return TransformerModel(cfg, params, tokenizer, dtype=np.float64).freeze(), params


# -- target terms -----------------------------------------------------------------------

def test_equal_answer_probabilities_give_zero_loss(tokenizer):
    model, _ = _zero_layer_model(tokenizer, lambda cfg, rng: np.zeros((cfg.vocab_size, 4)))
    batch = TokenBatch([[1, 5, 6]], np.array([7]), np.array([8]))
    assert float(token_equalization_loss(model, None, batch).data) == 0.0


def test_hand_set_logits_with_gap_ln2(tokenizer):
    # unembed rows chosen so that logit(y+) - logit(y-) = ln 2 at every position
    def unembed(cfg, rng):
        w = np.zeros((cfg.vocab_size, 4))
        w[7] = math.log(2.0) / 4.0
        return w

    model, params = _zero_layer_model(tokenizer, unembed)
    x = params["tok_emb"][6] + params["pos_emb"][2]
    x = x / math.sqrt(np.mean(x * x) + 1e-6)
    # rescale so the dot product with the row is exactly ln 2
    params["unembed"][7] = math.log(2.0) * x / float(x @ x)
    model = TransformerModel(model.config, params, tokenizer, dtype=np.float64).freeze()
    batch = TokenBatch([[1, 5, 6]], np.array([7]), np.array([8]))
    assert float(token_equalization_loss(model, None, batch).data) == pytest.approx(math.log(2.0) ** 2, abs=1e-9)


def test_identical_sentences_give_zero_loss(small_model):
    batch = SentenceBatch([[1, 4, 5, 6]], [[1, 4, 5, 6]])
    assert float(sentence_equalization_loss(small_model, None, batch).data) == 0.0


def test_sentence_loss_matches_hand_computed_zero_layer_model(tokenizer):
    model, params = _zero_layer_model(tokenizer, lambda cfg, rng: rng.normal(size=(cfg.vocab_size, 4)))

    def mean_logprob(seq):
        vals = []
        for t in range(len(seq) - 1):
            x = params["tok_emb"][seq[t]] + params["pos_emb"][t]
            x = x / math.sqrt(np.mean(x * x) + 1e-6)
            logits = params["unembed"] @ x
            vals.append(logits[seq[t + 1]] - math.log(np.sum(np.exp(logits))))
        return float(np.mean(vals))

    good, bad = [1, 5, 9, 4], [1, 9, 5, 4, 7]
    expected = (mean_logprob(good) - mean_logprob(bad)) ** 2
    with T.precision(np.float64):
        got = float(sentence_equalization_loss(model, None, SentenceBatch([good], [bad])).data)
    assert abs(got - expected) < 1e-6


def test_swapping_sentence_labels_keeps_loss(small_model):
    rng = np.random.default_rng(3)
    b = _sentence_batch(rng, small_model.config.vocab_size, n=4)
    a = float(sentence_equalization_loss(small_model, None, b).data)
    swapped = float(sentence_equalization_loss(small_model, None, SentenceBatch(b.bad, b.good)).data)
    assert a == pytest.approx(swapped, rel=1e-6)


def test_token_loss_equals_mean_squared_gap(small_model):
    rng = np.random.default_rng(4)
    b = _token_batch(rng, small_model.config.vocab_size, n=4)
    gaps = [token_logprob(small_model, None, p, int(c)) - token_logprob(small_model, None, p, int(w))
            for p, c, w in zip(b.prompts, b.correct, b.wrong)]
    assert float(token_equalization_loss(small_model, None, b).data) == pytest.approx(np.mean(np.square(gaps)),
                                                                                       rel=1e-5)


def test_same_answer_twice_is_an_input_error(small_model):
    with pytest.raises(InputError):
        token_equalization_loss(small_model, None, TokenBatch([[1, 4]], np.array([5]), np.array([5])))


def test_short_sentence_is_an_input_error(small_model):
    with pytest.raises(InputError):
        sentence_equalization_loss(small_model, None, SentenceBatch([[1]], [[1, 4]]))


def test_target_loss_is_non_negative(small_model):
    rng = np.random.default_rng(5)
    for _ in range(5):
        b = _token_batch(rng, small_model.config.vocab_size)
        assert float(token_equalization_loss(small_model, None, b).data) >= 0.0


# -- regularizers ------------------------------------------------------------------------

def test_textreg_zero_for_zero_b(small_model):
    adapters = init_adapters(small_model.config, 2, 16.0, seed=0)
    general = np.random.default_rng(0).integers(3, small_model.config.vocab_size, size=(3, 6))
    assert float(textreg_loss(small_model, adapters, general).data) == 0.0


def test_textreg_single_site_hand_arithmetic(tokenizer):
    # one layer, adapter only on the q site, rank 1; the site input h is the normed residual
    model = random_model(tokenizer, seed=2, n_layers=1, dtype=np.float64).freeze()
    cfg = model.config
    with T.precision(np.float64):
        adapters = init_adapters(cfg, 1, 3.0, seed=0)
    for p in adapters.parameters():
        p.data[...] = 0.0
    site = adapters.site(0, "q")
    site.A.data[...] = np.arange(1, cfg.d_model + 1) / 10.0
    site.B.data[...] = np.linspace(-1, 1, cfg.d_model)[:, None]
    seq = np.array([[1, 5, 9]])
    P = model.state()
    x = P["tok_emb"][seq[0]] + P["pos_emb"][:3]
    h = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6) * P["layers.0.attn_norm"]
    delta = 3.0 * (h @ site.A.data.T) @ site.B.data.T
    per_position = np.sum(delta ** 2, axis=-1)
    expected = per_position.mean() / (7 * cfg.n_layers)  # the other six sites contribute zero
    got = float(textreg_loss(model, adapters, seq).data)
    assert got == pytest.approx(expected, rel=1e-10)


def _layer0_attention_only(adapters):
    # q, k and v in layer 0 all read the normed embedding, which no adapter can change
    return adapters.masked({(0, "q"), (0, "k"), (0, "v")})


def test_textreg_doubling_alpha_quadruples(small_model):
    a = _layer0_attention_only(random_adapters(small_model.config, seed=1, alpha=2.0))
    b = _layer0_attention_only(random_adapters(small_model.config, seed=1, alpha=4.0))
    general = np.random.default_rng(1).integers(3, small_model.config.vocab_size, size=(2, 6))
    la = float(textreg_loss(small_model, a, general).data)
    lb = float(textreg_loss(small_model, b, general).data)
    assert lb == pytest.approx(4.0 * la, rel=1e-5)


def test_textreg_needs_general_text(small_model):
    with pytest.raises(InputError):
        textreg_loss(small_model, random_adapters(small_model.config), [])


def test_normreg_examples():
    cfg = ModelConfig(vocab_size=10, d_model=2, n_layers=1, n_heads=1, d_ff=2)
    ad = init_adapters(cfg, 1, 1.0, seed=0)
    for p in ad.parameters():
        p.data[...] = 0.0
    assert float(normreg_loss(ad).data) == 0.0
    # a mean over matrix count: two 2x2 all-ones blocks would need rank 2; use one rank-1 pair
    ad.site(0, "q").A.data[...] = 1.0
    ad.site(0, "q").B.data[...] = 1.0
    n = len(list(ad.parameters()))
    assert float(normreg_loss(ad).data) == pytest.approx(4.0 / n)


def test_normreg_four_matrix_example():
    # the direct arithmetic example: [[1,1],[1,1]] among four matrices gives 1
    from scalpel.tensor import sq_norm
    mats = [T.Tensor(np.ones((2, 2))), T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 2))),
            T.Tensor(np.zeros((2, 2)))]
    assert sum(float(sq_norm(m).data) for m in mats) / 4 == 1.0


def test_sparsityreg_examples():
    cfg = ModelConfig(vocab_size=10, d_model=2, n_layers=1, n_heads=1, d_ff=2)
    ad = init_adapters(cfg, 1, 1.0, seed=0)
    for p in ad.parameters():
        p.data[...] = 0.0
    assert float(sparsityreg_loss(ad).data) == 0.0
    ad.site(0, "q").A.data[...] = [[-1.0, 2.0]]
    n = len(list(ad.parameters()))
    assert float(sparsityreg_loss(ad).data) == pytest.approx(3.0 / n)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sparsityreg_ignores_signs(seed):
    cfg = ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=4)
    ad = random_adapters(cfg, seed=seed)
    before = float(sparsityreg_loss(ad).data)
    rng = np.random.default_rng(seed)
    for p in ad.parameters():
        p.data *= rng.choice([-1.0, 1.0], size=p.shape).astype(p.data.dtype)
    assert float(sparsityreg_loss(ad).data) == pytest.approx(before, rel=1e-6)


def test_sparsityreg_subgradient_is_zero_at_zero():
    cfg = ModelConfig(vocab_size=10, d_model=2, n_layers=1, n_heads=1, d_ff=2)
    ad = init_adapters(cfg, 1, 1.0, seed=0)
    for p in ad.parameters():
        p.data[...] = 0.0
    sparsityreg_loss(ad).backward()
    assert all(not p.grad.any() for p in ad.parameters())


@pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
def test_regularizers_scale_quadratically(small_model, c):
    general = np.random.default_rng(2).integers(3, small_model.config.vocab_size, size=(2, 5))
    a = _layer0_attention_only(random_adapters(small_model.config, seed=3))
    b = _layer0_attention_only(random_adapters(small_model.config, seed=3))
    for p in b.parameters():
        p.data *= c
    # scaling every entry by c scales B A by c^2; with fixed site inputs textreg goes as c^4
    assert float(normreg_loss(b).data) == pytest.approx(c * c * float(normreg_loss(a).data), rel=1e-5)
    assert float(sparsityreg_loss(b).data) == pytest.approx(abs(c) * float(sparsityreg_loss(a).data), rel=1e-5)
    assert float(textreg_loss(small_model, b, general).data) == pytest.approx(
        c ** 4 * float(textreg_loss(small_model, a, general).data), rel=1e-4)


def test_normreg_gradient_matches_finite_differences():
    cfg = ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=4)
    ad = random_adapters(cfg, seed=9)
    params = list(ad.parameters())
    assert check_gradients(lambda: normreg_loss(ad), params, step=1e-5) < 1e-4


# -- total --------------------------------------------------------------------------------

def test_negative_weight_is_a_config_error():
    with pytest.raises(ConfigError):
        LossWeights(textreg=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(normreg=float("nan"))


def test_zero_weights_total_is_target(small_model):
    rng = np.random.default_rng(6)
    b = _token_batch(rng, small_model.config.vocab_size)
    ad = random_adapters(small_model.config, seed=2)
    general = rng.integers(3, small_model.config.vocab_size, size=(3, 6))
    bd = total_loss(small_model, ad, b, general, LossWeights(0.0, 0.0, 0.0))
    assert bd.total == bd.target


def test_zero_adapters_give_base_gaps_and_no_regularization(small_model):
    rng = np.random.default_rng(7)
    b = _token_batch(rng, small_model.config.vocab_size)
    ad = init_adapters(small_model.config, 2, 16.0, seed=0)
    for p in ad.parameters():
        p.data[...] = 0.0
    general = rng.integers(3, small_model.config.vocab_size, size=(3, 6))
    bd = total_loss(small_model, ad, b, general, LossWeights())
    assert bd.target == pytest.approx(float(token_equalization_loss(small_model, None, b).data), rel=1e-6)
    assert bd.textreg == bd.normreg == bd.sparsityreg == 0.0


def test_total_recomposes_from_independent_terms(small_model):
    rng = np.random.default_rng(8)
    b = _token_batch(rng, small_model.config.vocab_size)
    ad = random_adapters(small_model.config, seed=5, std=0.1)
    general = rng.integers(3, small_model.config.vocab_size, size=(3, 6))
    w = LossWeights(0.7, 0.3, 0.2)
    bd = total_loss(small_model, ad, b, general, w)
    parts = [float(token_equalization_loss(small_model, ad, b).data), float(textreg_loss(small_model, ad, general).data),
             float(normreg_loss(ad).data), float(sparsityreg_loss(ad).data)]
    recomposed = parts[0] + 0.7 * parts[1] + 0.3 * parts[2] + 0.2 * parts[3]
    assert abs(bd.total - recomposed) < 1e-6 * max(1.0, abs(recomposed))
    assert abs(bd.total - (bd.target + 0.7 * bd.textreg + 0.3 * bd.normreg + 0.2 * bd.sparsityreg)) < 1e-6 * max(
        1.0, abs(bd.total))


def test_general_batch_must_pair_with_target(small_model):
    rng = np.random.default_rng(9)
    b = _token_batch(rng, small_model.config.vocab_size, n=3)
    ad = random_adapters(small_model.config, seed=5)
    with pytest.raises(InputError):
        total_loss(small_model, ad, b, rng.integers(3, 20, size=(2, 6)), LossWeights())
    with pytest.raises(InputError):
        total_loss(small_model, ad, b, None, LossWeights(textreg=1.0))


# -- full-model gradient check --------------------------------------------------------------

def _random_configuration(tokenizer, seed, dtype):
    rng = np.random.default_rng(seed)
    n_layers = int(rng.integers(1, 3))
    rank = int(rng.integers(1, 3))
    model = random_model(tokenizer, seed=seed, n_layers=n_layers, std=0.4, dtype=dtype).freeze()
    with T.precision(dtype):
        ad = random_adapters(model.config, seed=seed, rank=rank, alpha=float(rng.uniform(1, 4)), std=0.3)
    vocab = model.config.vocab_size
    batch = _token_batch(rng, vocab, n=2) if seed % 2 == 0 else _sentence_batch(rng, vocab, n=2)
    general = rng.integers(3, vocab, size=(2, 5))
    weights = LossWeights(*rng.uniform(0.1, 1.0, size=3))
    return model, ad, batch, general, weights


def test_total_loss_gradient_over_random_configurations(tokenizer):
    start = time.time()
    worst32 = worst64 = 0.0
    for seed in range(20):
        for dtype, step in ((np.float32, 1e-5), (np.float64, 1e-6)):
            with T.precision(dtype):
                model, ad, batch, general, weights = _random_configuration(tokenizer, seed, dtype)
                err = check_gradients(lambda: total_loss(model, ad, batch, general, weights).loss,
                                      list(ad.parameters()), step=step, max_entries=3,
                                      rng=np.random.default_rng(seed))
            if dtype is np.float32:
                worst32 = max(worst32, err)
            else:
                worst64 = max(worst64, err)
    assert worst32 < 1e-2, worst32
    assert worst64 < 1e-5, worst64
    assert time.time() - start < 120
