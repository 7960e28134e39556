import csv
import io
import math

import numpy as np
import pytest

from conftest import random_adapters, random_model
from scalpel import tensor as T
from scalpel.baselines import (
    COMPARE_COLUMNS, ComponentId, ImportanceScores, ProbeConfig, all_components, compare, corrupt, gap_at,
    lens_gaps, probe_accuracy, scalpel_budget, score_diffmean, score_integrated_gradients, score_logit_lens,
    score_probing,
)
from scalpel.data import TokenTriplet, generate_task
from scalpel.errors import ConfigError, InputError
from scalpel.metrics import overall_capability
from scalpel.model import SITES, ModelConfig, TransformerModel, forward


@pytest.fixture(scope="module")
def parity():
    return generate_task("parity", 100, 0)


@pytest.fixture(scope="module")
def model():
    from conftest import ALPHABET
    from scalpel.model import Tokenizer

    return random_model(Tokenizer(ALPHABET), seed=21, std=0.4).freeze()


@pytest.fixture(scope="module")
def model64():
    from conftest import ALPHABET
    from scalpel.model import Tokenizer

    return random_model(Tokenizer(ALPHABET), seed=21, std=0.4, dtype=np.float64).freeze()


# -- DiffMean -----------------------------------------------------------------------------

def test_diffmean_zero_for_identical_continuation_sets(model):
    split = [TokenTriplet("1+2", "3", "4"), TokenTriplet("1+2", "4", "3")]
    scores = score_diffmean(model, split)
    assert len(scores.scores) == 7 * model.config.n_layers
    assert all(v == 0.0 for v in scores.scores.values())


def test_diffmean_scores_are_non_negative(model, parity):
    assert all(v >= 0.0 for v in score_diffmean(model, parity.train).scores.values())


def test_diffmean_matches_hand_computed_first_layer_inputs(model64):
    # in layer 0, q/k/v read rmsnorm(embedding + position) at the last position
    split = [TokenTriplet("12", "3", "4"), TokenTriplet("5", "6", "7")]
    tok = model64.tokenizer
    P = model64.state()

    def q_input(text):
        ids = tok.encode(text, bos=True)
        x = P["tok_emb"][ids[-1]] + P["pos_emb"][len(ids) - 1]
        return x / math.sqrt(np.mean(x * x) + 1e-6) * P["layers.0.attn_norm"]

    pos = np.mean([q_input(ex.prompt + ex.correct) for ex in split], axis=0)
    neg = np.mean([q_input(ex.prompt + ex.wrong) for ex in split], axis=0)
    with T.precision(np.float64):
        got = score_diffmean(model64, split).scores[ComponentId(0, "q")]
    assert abs(got - np.linalg.norm(pos - neg)) < 1e-6


def test_diffmean_rejects_empty_split(model):
    with pytest.raises(InputError):
        score_diffmean(model, [])


# -- Logit lens ----------------------------------------------------------------------------

def test_lens_on_zero_layer_model_is_empty(tokenizer):
    cfg = ModelConfig(vocab_size=len(tokenizer), d_model=4, n_layers=0, n_heads=1, d_ff=4)
    m = TransformerModel.initialize(cfg, tokenizer).freeze()
    assert score_logit_lens(m, [TokenTriplet("1", "2", "3")]).scores == {}


def test_lens_deltas_telescope_to_final_gap(model, parity):
    split = parity.train[:30]
    scores = score_logit_lens(model, split)
    gaps = lens_gaps(model, split)
    per_layer = [scores.signed[ComponentId(l, "q")] for l in range(model.config.n_layers)]
    assert abs(sum(per_layer) - (gaps[-1] - gaps[0])) < 1e-5
    # the last lens readout is the model's own output
    tok = model.tokenizer
    direct = []
    for ex in split:
        ids = tok.encode(ex.prompt, bos=True)
        logits = forward(model, None, np.array([ids])).data[0, -1]
        direct.append(logits[tok.token(ex.correct)] - logits[tok.token(ex.wrong)])
    assert abs(gaps[-1] - np.mean(direct)) < 1e-4


def test_lens_sites_inherit_layer_score(model, parity):
    scores = score_logit_lens(model, parity.train[:20])
    for l in range(model.config.n_layers):
        assert len({scores.scores[ComponentId(l, s)] for s in SITES}) == 1


def test_zeroed_block_contributes_nothing(model, parity):
    params = model.state()
    params["layers.1.o"] = np.zeros_like(params["layers.1.o"])
    params["layers.1.down"] = np.zeros_like(params["layers.1.down"])
    m = TransformerModel(model.config, params, model.tokenizer).freeze()
    scores = score_logit_lens(m, parity.train[:20])
    assert scores.scores[ComponentId(1, "q")] == 0.0


def test_lens_sentence_mode_telescopes(model):
    split = generate_task("agreement", 40, 0).train
    scores = score_logit_lens(model, split)
    gaps = lens_gaps(model, split)
    assert abs(sum(scores.signed[ComponentId(l, "k")] for l in range(2)) - (gaps[-1] - gaps[0])) < 1e-5


# -- Integrated gradients ---------------------------------------------------------------------

def test_ig_completeness_at_64_steps(model64, parity):
    split = parity.train[:20]
    with T.precision(np.float64):
        ig = score_integrated_gradients(model64, split, steps=64)
        target = gap_at(model64, split, 1.0) - gap_at(model64, split, 0.0)
    total = sum(ig.signed.values())
    assert abs(total - target) < 0.05 * abs(target)


def test_ig_completeness_in_32_bit(model, parity):
    split = parity.train[:20]
    ig = score_integrated_gradients(model, split, steps=64)
    target = gap_at(model, split, 1.0) - gap_at(model, split, 0.0)
    assert abs(sum(ig.signed.values()) - target) < 0.05 * abs(target)


def test_ig_refinement_changes_scores_little(model, parity):
    split = parity.train[:20]
    a = score_integrated_gradients(model, split, steps=32)
    b = score_integrated_gradients(model, split, steps=64)
    va = np.array([a.signed[c] for c in all_components(model)])
    vb = np.array([b.signed[c] for c in all_components(model)])
    assert np.linalg.norm(va - vb) < 0.05 * np.linalg.norm(vb)


def test_ig_needs_eight_steps(model, parity):
    with pytest.raises(ConfigError):
        score_integrated_gradients(model, parity.train[:5], steps=7)


# -- Probing -----------------------------------------------------------------------------------

def test_shuffled_labels_give_near_zero_scores(model, parity):
    scores = score_probing(model, parity.train, ProbeConfig(shuffle_labels=True))
    assert max(scores.scores.values()) < 0.1


def test_separable_features_reach_perfect_probe():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 5))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    x[:, 0] += np.where(y > 0, 1.0, -1.0)  # widen the margin
    acc = probe_accuracy(x[:100], y[:100], x[100:], y[100:], ProbeConfig(iterations=2000))
    assert acc - 0.5 == pytest.approx(0.5)


def test_probing_is_deterministic_and_checks_size(model, parity):
    a = score_probing(model, parity.train, ProbeConfig(seed=3))
    b = score_probing(model, parity.train, ProbeConfig(seed=3))
    assert a.scores == b.scores
    with pytest.raises(InputError):
        score_probing(model, parity.train[:39])


# -- corruption ----------------------------------------------------------------------------------

def _scores(model, seed=0):
    rng = np.random.default_rng(seed)
    return ImportanceScores("rand", {c: float(rng.uniform(0.1, 1.0)) for c in all_components(model)})


def test_zero_noise_and_zero_k_are_identities(model):
    s = _scores(model)
    assert corrupt(model, s, 10, 0.0, seed=1).checksum() == model.checksum()
    assert corrupt(model, s, 0, 1.0, seed=1).checksum() == model.checksum()


def test_corruption_leaves_base_untouched(model):
    before = model.checksum()
    out = corrupt(model, _scores(model), 5, 1.0, seed=2)
    assert model.checksum() == before and out.checksum() != before and out.frozen


def test_corruption_errors(model):
    with pytest.raises(ConfigError):
        corrupt(model, _scores(model), 3, -0.1, seed=0)
    with pytest.raises(ConfigError):
        corrupt(model, _scores(model), 15, 0.1, seed=0)


def test_noise_magnitude_matches_expectation(model):
    s = _scores(model, seed=4)
    chosen = s.top(3)
    peak = s.scores[chosen[0]]
    eps = 0.5
    norms = {c: [] for c in chosen}
    for seed in range(100):
        out = corrupt(model, s, 3, eps, seed)
        for c in chosen:
            delta = out.weight(c.layer, c.site).data.astype(np.float64) - model.weight(c.layer, c.site).data
            norms[c].append(np.linalg.norm(delta))
    for c in chosen:
        w = model.weight(c.layer, c.site).data
        expected = eps * s.scores[c] / peak * float(w.std()) * math.sqrt(w.size)
        assert abs(np.mean(norms[c]) - expected) < 0.1 * expected


def test_top_k_is_a_total_order_under_ties(model):
    tied = ImportanceScores("tie", {c: 1.0 for c in reversed(all_components(model))})
    assert tied.top(3) == [ComponentId(0, "q"), ComponentId(0, "k"), ComponentId(0, "v")]


# -- comparison table --------------------------------------------------------------------------------

def test_compare_table_structure(model, parity):
    held = [generate_task("mapping", 60, 0)]
    adapters = random_adapters(model.config, seed=3, std=0.2)
    rows = compare(model, adapters, parity, held, ["abc def ghi"], methods=("diffmean", "logit_lens"),
                   eps_grid=(0.0, 1.0), k=4)
    assert [r.method for r in rows] == ["baseline", "scalpel", "diffmean", "logit_lens"]
    base = rows[0]
    assert base.accuracy_drop == 0.0
    assert base.capability == overall_capability(model, None, held, "test")
    from scalpel.baselines import compare_csv

    table = list(csv.DictReader(io.StringIO(compare_csv(rows))))
    assert tuple(table[0]) == COMPARE_COLUMNS
    for r in table:
        assert abs(float(r["product"]) - float(r["AccD"]) * float(r["Cap"])) < 1e-9


def test_compare_marks_failed_methods(model, parity):
    rows = compare(model, random_adapters(model.config, seed=3), parity, [generate_task("mapping", 60, 0)],
                   ["abc def"], methods=("probing",), eps_grid=(0.5,), k=4)
    # 80 training examples is enough for probing, so it must succeed here
    assert rows[-1].status == "ok"
    small = generate_task("parity", 30, 1)
    rows = compare(model, random_adapters(model.config, seed=3), small, [generate_task("mapping", 60, 0)],
                   ["abc def"], methods=("probing",), eps_grid=(0.5,), k=4)
    assert rows[-1].status.startswith("failed: InputError")


def test_scalpel_budget_keeps_top_sites(model):
    ad = random_adapters(model.config, seed=5)
    kept = scalpel_budget(ad, 3)
    assert sum(bool(s.B.data.any()) for s in kept.sites) == 3
