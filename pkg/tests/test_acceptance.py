"""End-to-end acceptance criteria on the default 4-layer toy model.

Each test appends one PASS/FAIL line, printed in the terminal summary.
The pretrained checkpoint is cached in ``.acceptance_cache/`` keyed by the
package sources and pretraining settings.
"""
import hashlib
import json
import math
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from scalpel import tensor as T
from scalpel.analysis import cluster_summary, jacobi_eigh, layer_importance, mds_embed, pearson, task_similarity
from scalpel.baselines import compare, gap_at, score_integrated_gradients
from scalpel.data import KINDS, generate_general_corpus, generate_task, read_dataset, write_dataset
from scalpel.gradcheck import check_gradients
from scalpel.lora import effective_update, flatten, init_adapters, load_adapters, save_adapters
from scalpel.metrics import overall_capability, perplexity, prob_gaps, task_accuracy
from scalpel.model import ModelConfig, forward, load_model, pad_batch, save_model
from scalpel.objective import LossWeights, total_loss
from scalpel.train import PretrainConfig, TrainConfig, ablate, build_tokenizer, pretrain, sweep

pytestmark = pytest.mark.slow

SIZE = 800
CORPUS = 40000
PRETRAIN = PretrainConfig()
CONFIG = TrainConfig()
CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"
SRC = Path(__file__).resolve().parent.parent / "src" / "scalpel"


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- shared fixtures ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def world():
    datasets = {k: generate_task(k, SIZE, 0) for k in KINDS}
    corpus = generate_general_corpus(CORPUS, 0)
    tok = build_tokenizer(list(datasets.values()), corpus)
    model_cfg = ModelConfig(vocab_size=len(tok))
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.read_bytes())
    h.update(json.dumps([asdict(PRETRAIN), model_cfg.to_dict(), SIZE, CORPUS], sort_keys=True).encode())
    path = CACHE / f"model_{h.hexdigest()[:16]}.sclp"
    if path.exists():
        model = load_model(path).freeze()
    else:
        model, _ = pretrain(model_cfg, tok, list(datasets.values()), corpus, PRETRAIN)
        CACHE.mkdir(exist_ok=True)
        save_model(model, path)
    return {"datasets": datasets, "corpus": corpus, "model": model, "ppl": perplexity(model, None, corpus.eval)}


def held_out(world, name):
    return [d for k, d in world["datasets"].items() if k != name]


@pytest.fixture(scope="session")
def ablations(world):
    model, corpus = world["model"], world["corpus"]
    out = {}
    for name, task in world["datasets"].items():
        start = time.perf_counter()
        adapters, log = ablate(model, task, corpus.textreg, CONFIG, held_out(world, name))
        out[name] = {"adapters": adapters, "log": log, "seconds": time.perf_counter() - start}
    return out


# -- 1: gradients ------------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(tokenizer):
    from test_objective import _random_configuration
    from test_tensor import _primitive_cases

    start = time.perf_counter()
    worst32 = worst64 = 0.0
    for seed in range(20):
        for name in _primitive_cases(np.random.default_rng(seed)):
            fn, params = _primitive_cases(np.random.default_rng(seed))[name]
            worst32 = max(worst32, check_gradients(fn, params, step=1e-5))
            with T.precision(np.float64):
                fn, params = _primitive_cases(np.random.default_rng(seed))[name]
                worst64 = max(worst64, check_gradients(fn, params, step=1e-6))
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
    seconds = time.perf_counter() - start
    record(1, worst32 < 1e-2 and worst64 < 1e-5 and seconds < 120,
           f"max rel err f32 {worst32:.2e} (< 1e-2), f64 {worst64:.2e} (< 1e-5), 20 configurations, {seconds:.0f}s")


# -- 2: zero-init identity ----------------------------------------------------------------------

def test_criterion_2_zero_init_identity(world):
    model = world["model"]
    probe = [ex for d in world["datasets"].values() for ex in d.test][::4][:100]
    texts = [ex.prompt + ex.correct if hasattr(ex, "prompt") else ex.good for ex in probe]
    tokens, _ = pad_batch([model.tokenizer.encode(t, bos=True) for t in texts], model.tokenizer.pad_id)
    ad = init_adapters(model.config, CONFIG.rank, CONFIG.alpha, seed=123)
    same = np.array_equal(forward(model, ad, tokens).data, forward(model, None, tokens).data)
    record(2, same and len(probe) == 100, f"logits bit-identical on {len(probe)} probe examples: {same}")


# -- 3 and 4: equalization and selectivity ------------------------------------------------------

def test_criterion_3_equalization(world, ablations):
    model = world["model"]
    parts, ok = [], True
    for name, task in world["datasets"].items():
        ad = ablations[name]["adapters"]
        before = float(np.mean(np.abs(prob_gaps(model, None, task.test))))
        after = float(np.mean(np.abs(prob_gaps(model, ad, task.test))))
        acc = task_accuracy(model, ad, task.test)
        minutes = ablations[name]["seconds"] / 60
        good = after <= 0.1 * before and 0.35 <= acc <= 0.65 and minutes < 10
        ok &= good
        parts.append(f"{name} gap {after / before:.3f}x acc {acc:.3f} {minutes:.1f}min")
    record(3, ok, "; ".join(parts) + "  (gap <= 0.1x, acc in [0.35, 0.65], < 10 min)")


def test_criterion_4_selectivity(world, ablations):
    model, ppl0 = world["model"], world["ppl"]
    parts, ok = [], True
    for name in world["datasets"]:
        ad = ablations[name]["adapters"]
        held = held_out(world, name)
        drop = overall_capability(model, None, held) - overall_capability(model, ad, held)
        rise = perplexity(model, ad, world["corpus"].eval) / ppl0 - 1
        ok &= drop <= 0.05 and rise <= 0.10
        parts.append(f"{name} cap -{drop:.3f} ppl {rise:+.1%}")
    record(4, ok, "; ".join(parts) + "  (cap drop <= 0.05, ppl rise <= 10%)")


# -- 5: regularizer leave-one-out ---------------------------------------------------------------

def test_criterion_5_regularizer_ablation(world):
    model, corpus, ppl0 = world["model"], world["corpus"], world["ppl"]
    name = "mapping"
    task, held = world["datasets"][name], held_out(world, name)
    w = CONFIG.weights
    variants = {
        "full": w,
        "no_textreg": replace(w, textreg=0.0),
        "no_normreg": replace(w, normreg=0.0),
        "no_sparsityreg": replace(w, sparsityreg=0.0),
    }
    cap, rise = {}, {}
    for label, weights in variants.items():
        caps, rises = [], []
        for seed in range(3):
            cfg = replace(CONFIG, weights=weights, seed=seed, init_seed=seed)
            ad, _ = ablate(model, task, corpus.textreg, cfg, held)
            caps.append(overall_capability(model, ad, held))
            rises.append(perplexity(model, ad, corpus.eval) / ppl0 - 1)
        cap[label], rise[label] = float(np.mean(caps)), float(np.mean(rises))
    loo = [k for k in variants if k != "full"]
    ok = all(cap[k] <= cap["full"] for k in loo) and max(loo, key=rise.get) == "no_textreg"
    detail = ", ".join(f"{k} cap {cap[k]:.4f} ppl {rise[k]:+.2%}" for k in variants)
    record(5, ok, f"{name}, 3 seeds: {detail}")


# -- 6: rank sweep --------------------------------------------------------------------------------

def test_criterion_6_rank_sweep(world, ablations):
    model, corpus = world["model"], world["corpus"]
    name = "parity"
    rows = sweep(model, world["datasets"][name], corpus.textreg, corpus.eval, CONFIG, {"rank": [1, 2, 4, 8]},
                 held_out(world, name))
    ranks = sorted(r.settings["rank"] for r in rows if r.status == "ok")
    sufficient = []
    for task_name, task in world["datasets"].items():
        ad = ablations[task_name]["adapters"]
        before = float(np.mean(np.abs(prob_gaps(model, None, task.test))))
        after = float(np.mean(np.abs(prob_gaps(model, ad, task.test))))
        sufficient.append(ad.rank == 2 and after <= 0.1 * before)
    record(6, ranks == [1, 2, 4, 8] and all(sufficient),
           f"sweep on {name} ran ranks {ranks}; rank 2 meets the gap criterion on {sum(sufficient)}/5 tasks")


# -- 7: analysis oracles -----------------------------------------------------------------------

def test_criterion_7_analysis_oracles(ablations):
    sets = [ablations[k]["adapters"] for k in KINDS]
    worst_fro = 0.0
    for ad in sets:
        rep = layer_importance(ad)
        for s in ad.sites:
            worst_fro = max(worst_fro, abs(rep.scores[s.key] - math.sqrt(float(np.sum(
                effective_update(s, ad.alpha, ad.rank) ** 2)))))
    worst_rho = 0.0
    vecs = [flatten(ad) for ad in sets]
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            x, y = vecs[i], vecs[j]
            mx, my = math.fsum(x) / len(x), math.fsum(y) / len(y)
            num = math.fsum((x - mx) * (y - my))
            den = math.sqrt(math.fsum((x - mx) ** 2) * math.fsum((y - my) ** 2))
            worst_rho = max(worst_rho, abs(pearson(x, y) - num / den))
    triangle = mds_embed(np.array([[0.0, 3.0, 4.0], [3.0, 0.0, 5.0], [4.0, 5.0, 0.0]]))
    worst_eig = 0.0
    for seed in range(20):
        m = np.random.default_rng(seed).normal(size=(10, 10))
        m = m + m.T
        values, vectors = jacobi_eigh(m)
        worst_eig = max(worst_eig, float(np.max(np.abs(vectors @ np.diag(values) @ vectors.T - m))))
    ok = worst_fro < 1e-6 and worst_rho < 1e-10 and triangle.stress < 1e-6 and worst_eig < 1e-8
    record(7, ok, f"frobenius {worst_fro:.1e}, pearson {worst_rho:.1e}, MDS stress {triangle.stress:.1e}, "
                  f"jacobi {worst_eig:.1e}")


# -- 8: similarity clustering ---------------------------------------------------------------------

def test_criterion_8_similarity_clustering(world, ablations):
    model, corpus = world["model"], world["corpus"]
    sets, labels = [], []
    for name, task in world["datasets"].items():
        second, _ = ablate(model, task, corpus.textreg, replace(CONFIG, seed=1), held_out(world, name))
        sets += [ablations[name]["adapters"], second]
        labels += [name, name]
    sim = task_similarity(sets, [f"{k}{i % 2}" for i, k in enumerate(labels)])
    summary = cluster_summary(sim.distances, labels)
    record(8, summary.intra < summary.inter,
           f"mean intra-kind distance {summary.intra:.4f} vs inter-kind {summary.inter:.4f}")


# -- 9: baseline dominance -------------------------------------------------------------------------

def test_criterion_9_baseline_dominance(world, ablations):
    model, corpus = world["model"], world["corpus"]
    wins, parts = 0, []
    for name, task in world["datasets"].items():
        rows = compare(model, ablations[name]["adapters"], task, held_out(world, name), corpus.eval)
        ours = next(r for r in rows if r.method == "scalpel")
        rivals = [r for r in rows if r.method not in ("baseline", "scalpel") and r.status == "ok"]
        best = max(rivals, key=lambda r: r.product, default=None)
        win = best is None or ours.product > best.product
        wins += win
        rival = f"{best.method} {best.product:.3f}" if best else "none"
        parts.append(f"{name} {ours.product:.3f} vs {rival}")
    record(9, wins >= 4, f"SCALPEL best on {wins}/5: " + "; ".join(parts))


# -- 10: integrated gradients completeness ---------------------------------------------------------

def test_criterion_10_integrated_gradients_completeness(world):
    model = world["model"]
    parts, ok = [], True
    for name, task in world["datasets"].items():
        split = task.dev
        ig = score_integrated_gradients(model, split, steps=64)
        target = gap_at(model, split, 1.0) - gap_at(model, split, 0.0)
        err = abs(sum(ig.signed.values()) - target) / abs(target)
        ok &= err < 0.05
        parts.append(f"{name} {err:.2%}")
    record(10, ok, "relative completeness error at 64 steps: " + ", ".join(parts) + "  (< 5%)")


# -- 11: determinism and persistence ---------------------------------------------------------------

def test_criterion_11_determinism_and_persistence(world, ablations, tmp_path):
    model, corpus = world["model"], world["corpus"]
    name = "parity"
    again, log = ablate(model, world["datasets"][name], corpus.textreg, CONFIG, held_out(world, name))
    first = ablations[name]
    save_adapters(first["adapters"], tmp_path / "a.sclp")
    save_adapters(again, tmp_path / "b.sclp")
    adapters_same = (tmp_path / "a.sclp").read_bytes() == (tmp_path / "b.sclp").read_bytes()
    logs_same = first["log"].to_csv() == log.to_csv()
    reloaded = load_adapters(tmp_path / "a.sclp", model.config)
    adapter_trip = np.array_equal(flatten(reloaded), flatten(first["adapters"]))
    save_model(model, tmp_path / "m.sclp")
    model_trip = load_model(tmp_path / "m.sclp").checksum() == model.checksum()
    jsonl_trip = True
    for ds in world["datasets"].values():
        write_dataset(tmp_path / "data", ds)
        back = read_dataset(tmp_path / "data", ds.name)
        jsonl_trip &= (back.train, back.dev, back.test) == (ds.train, ds.dev, ds.test)
    ok = adapters_same and logs_same and adapter_trip and model_trip and jsonl_trip
    record(11, ok, f"adapters identical {adapters_same}, logs identical {logs_same}, adapter round trip "
                   f"{adapter_trip}, checkpoint round trip {model_trip}, JSONL round trip {jsonl_trip}")
