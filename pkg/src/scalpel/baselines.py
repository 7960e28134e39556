"""Component-importance baselines and the noise-corruption comparison protocol.

A component is one projection matrix ``(layer, site)``, the same unit the
adapters attach to, so every method competes under the same top-k budget.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .analysis import layer_importance
from .data import TaskDataset, TokenTriplet
from .errors import ConfigError, InputError, ScalpelError
from .lora import LoraAdapterSet
from .metrics import overall_capability, perplexity, task_accuracy
from .model import (SITES, Trace, TransformerModel, final_logprobs, hidden_states, lens_logits, pad_batch,
                    sentence_logprobs, site_key)
from .objective import TokenBatch, encode_batch
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS_GRID = (0.1, 0.2, 0.5, 1.0, 2.0)
TOP_K = 10
METHODS = ("diffmean", "logit_lens", "integrated_gradients", "probing")


@dataclass(frozen=True, order=True)
class ComponentId:
    layer: int
    site: str

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigError(f"unknown projection site {self.site!r}")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.layer, SITES.index(self.site))


def all_components(model: TransformerModel) -> list[ComponentId]:
    return [ComponentId(l, s) for l in range(model.config.n_layers) for s in SITES]


@dataclass
class ImportanceScores:
    method: str
    scores: dict[ComponentId, float]
    # signed per-component values before taking magnitudes, where meaningful
    signed: dict[ComponentId, float] = field(default_factory=dict, repr=False)

    def top(self, k: int) -> list[ComponentId]:
        """Highest scores first; ties resolved by layer, then site order."""
        return sorted(self.scores, key=lambda c: (-self.scores[c], c.sort_key))[:k]


def _examples(split: Sequence) -> tuple[list, bool]:
    if not split:
        raise InputError("empty split")
    token_mode = isinstance(split[0], TokenTriplet)
    if any(isinstance(ex, TokenTriplet) != token_mode for ex in split):
        raise InputError("split mixes token and sentence examples")
    return list(split), token_mode


def _contrast_sequences(model, split) -> tuple[list[list[int]], list[list[int]]]:
    """Full sequences for the correct and the wrong continuation of each example."""
    examples, token_mode = _examples(split)
    tok = model.tokenizer
    if token_mode:
        pos = [tok.encode(ex.prompt + ex.correct, bos=True) for ex in examples]
        neg = [tok.encode(ex.prompt + ex.wrong, bos=True) for ex in examples]
    else:
        pos = [tok.encode(ex.good, bos=True) for ex in examples]
        neg = [tok.encode(ex.bad, bos=True) for ex in examples]
    return pos, neg


def _final_rows(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return x[np.arange(len(lengths)), lengths - 1]


# -- DiffMean ----------------------------------------------------------------------------

def site_activations(model, seqs: Sequence[Sequence[int]]) -> dict[tuple[int, str], np.ndarray]:
    """Final-position input to every projection site, (n, d_in) per site."""
    tokens, lengths = pad_batch(seqs, model.tokenizer.pad_id)
    trace = Trace(keep_inputs=True)
    with T.no_grad():
        hidden_states(model, None, tokens, trace)
    return {key: _final_rows(x.data.astype(np.float64), lengths) for key, x in trace.site_inputs.items()}


def score_diffmean(model: TransformerModel, split: Sequence) -> ImportanceScores:
    """L2 norm of the difference of mean site inputs, correct vs wrong continuation."""
    pos, neg = _contrast_sequences(model, split)
    a, b = site_activations(model, pos), site_activations(model, neg)
    scores = {}
    for c in all_components(model):
        key = (c.layer, c.site)
        scores[c] = float(np.linalg.norm(a[key].mean(axis=0) - b[key].mean(axis=0)))
    return ImportanceScores("diffmean", scores)


# -- Logit lens ----------------------------------------------------------------------------

def lens_gaps(model: TransformerModel, split: Sequence) -> np.ndarray:
    """Mean lens-readout preference after the embeddings and after each layer, (n_layers + 1,).

    Token mode reads logit(y+) - logit(y-) at the prompt's last position.
    Sentence mode reads, at every predicted position, the logit of the next
    token and averages over the sentence, then takes good minus bad.
    """
    examples, token_mode = _examples(split)
    tok = model.tokenizer
    if token_mode:
        batch = encode_batch(examples, tok)
        return _lens_readout(model, batch.prompts, batch.correct, batch.wrong)
    batch = encode_batch(examples, tok)
    return _lens_sentence(model, batch.good) - _lens_sentence(model, batch.bad)


def _residual_stack(model, seqs):
    tokens, lengths = pad_batch(seqs, model.tokenizer.pad_id)
    trace = Trace(keep_residuals=True)
    with T.no_grad():
        hidden_states(model, None, tokens, trace)
        logits = [lens_logits(model, r).data.astype(np.float64) for r in trace.residuals]
    return tokens, lengths, logits


def _lens_readout(model, prompts, correct, wrong) -> np.ndarray:
    _, lengths, logits = _residual_stack(model, prompts)
    rows = np.arange(len(prompts))
    out = []
    for lg in logits:
        last = _final_rows(lg, lengths)
        out.append(float(np.mean(last[rows, correct] - last[rows, wrong])))
    return np.array(out)


def _lens_sentence(model, seqs) -> np.ndarray:
    tokens, lengths, logits = _residual_stack(model, [s[:-1] for s in seqs])
    full, _ = pad_batch(seqs, model.tokenizer.pad_id)
    nxt = full[:, 1:]
    mask = np.arange(nxt.shape[1])[None, :] < (lengths[:, None])
    out = []
    for lg in logits:
        picked = np.take_along_axis(lg, nxt[:, :, None], axis=-1)[..., 0]
        per_seq = (picked * mask).sum(axis=1) / lengths
        out.append(float(per_seq.mean()))
    return np.array(out)


def score_logit_lens(model: TransformerModel, split: Sequence) -> ImportanceScores:
    """Magnitude of the lens-gap increase each layer contributes; sites share their layer's score."""
    if model.config.n_layers == 0:
        return ImportanceScores("logit_lens", {})
    deltas = np.diff(lens_gaps(model, split))
    scores, signed = {}, {}
    for c in all_components(model):
        signed[c] = float(deltas[c.layer])
        scores[c] = abs(signed[c])
    return ImportanceScores("logit_lens", scores, signed)


# -- Integrated gradients -------------------------------------------------------------------

def _gap_fn(model: TransformerModel, split: Sequence) -> Callable[[dict], Tensor]:
    """Mean correct-minus-wrong gap as a differentiable function of weight overrides.

    For tokens this is logit(y+) - logit(y-), which equals the log-probability
    gap; for sentences it is the mean-log-probability gap.
    """
    examples, _ = _examples(split)
    batch = encode_batch(examples, model.tokenizer)

    def fn(overrides: dict) -> Tensor:
        return T.mean(_override_gaps(model, batch, overrides))

    return fn


def _override_gaps(model, batch, overrides) -> Tensor:
    if isinstance(batch, TokenBatch):
        logp = final_logprobs(model, None, batch.prompts, overrides)
        return T.gather(logp, batch.correct) - T.gather(logp, batch.wrong)
    n = len(batch)
    s = sentence_logprobs(model, None, batch.good + batch.bad, overrides)
    return s[:n] - s[n:]


def gap_at(model: TransformerModel, split: Sequence, scale: float = 1.0) -> float:
    """Mean gap with every component matrix multiplied by ``scale``."""
    fn = _gap_fn(model, split)
    with T.no_grad():
        overrides = {site_key(c.layer, c.site): Tensor(model.weight(c.layer, c.site).data * scale)
                     for c in all_components(model)}
        return float(fn(overrides).data)


def score_integrated_gradients(model: TransformerModel, split: Sequence, steps: int = 64) -> ImportanceScores:
    """Attribute the gap to components along the joint path ``t * W0``, t from 0 to 1.

    Midpoint Riemann sum: attribution_c = sum_k <d gap / d W_c (t_k), W0_c> / steps.
    Because all components move together, the attributions add up to
    ``gap(W0) - gap(0)`` (completeness).
    """
    if steps < 8:
        raise ConfigError(f"integrated gradients needs steps >= 8, got {steps}")
    comps = all_components(model)
    if not comps:
        return ImportanceScores("integrated_gradients", {})
    fn = _gap_fn(model, split)
    w0 = {c: model.weight(c.layer, c.site).data for c in comps}
    dtype = next(iter(w0.values())).dtype
    totals = {c: 0.0 for c in comps}
    for k in range(steps):
        t = (k + 0.5) / steps
        overrides = {c: Tensor(w0[c] * dtype.type(t), requires_grad=True) for c in comps}
        out = fn({site_key(c.layer, c.site): p for c, p in overrides.items()})
        out.backward()
        for c, p in overrides.items():
            totals[c] += float(np.sum(p.grad.astype(np.float64) * w0[c].astype(np.float64)))
    signed = {c: v / steps for c, v in totals.items()}
    return ImportanceScores("integrated_gradients", {c: abs(v) for c, v in signed.items()}, signed)


# -- Probing -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    seed: int = 0
    l2: float = 1e-2
    iterations: int = 300
    learning_rate: float = 0.5
    dev_fraction: float = 0.5
    shuffle_labels: bool = False


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float, iterations: int, lr: float) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on the L2-regularized logistic loss."""
    n, d = x.shape
    w, b = np.zeros(d), 0.0
    for _ in range(iterations):
        z = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free sigmoid
        g = p - y
        w -= lr * (x.T @ g / n + l2 * w)
        b -= lr * float(g.mean())
    return w, b


def probe_accuracy(x_train, y_train, x_dev, y_dev, config: ProbeConfig) -> float:
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-8
    w, b = fit_logistic((x_train - mu) / sd, y_train, config.l2, config.iterations, config.learning_rate)
    pred = ((x_dev - mu) / sd) @ w + b > 0
    return float(np.mean(pred == (y_dev > 0.5)))


def score_probing(model: TransformerModel, split: Sequence, config: ProbeConfig = ProbeConfig()) -> ImportanceScores:
    """Per-layer linear probe separating correct from wrong continuations.

    Features are the residual stream at the final position after each layer.
    Both continuations of one example always land in the same fold. The
    score is ``max(dev accuracy - 0.5, 0)``; sites inherit their layer's score.
    """
    examples, _ = _examples(split)
    if len(examples) < 40:
        raise InputError(f"probing needs at least 40 examples, got {len(examples)}")
    pos, neg = _contrast_sequences(model, examples)
    n = len(examples)
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    rng = np.random.default_rng(config.seed)
    if config.shuffle_labels:
        labels = rng.permutation(labels)
    if len(set(labels.tolist())) < 2:
        raise InputError("probing needs both classes")
    order = rng.permutation(n)
    n_dev = max(1, int(round(n * config.dev_fraction)))
    dev_ex, train_ex = order[:n_dev], order[n_dev:]
    train_idx = np.concatenate([train_ex, train_ex + n])
    dev_idx = np.concatenate([dev_ex, dev_ex + n])

    tokens, lengths = pad_batch(pos + neg, model.tokenizer.pad_id)
    trace = Trace(keep_residuals=True)
    with T.no_grad():
        hidden_states(model, None, tokens, trace)
    scores, signed = {}, {}
    for l in range(model.config.n_layers):
        feats = _final_rows(trace.residuals[l + 1].data.astype(np.float64), lengths)
        acc = probe_accuracy(feats[train_idx], labels[train_idx], feats[dev_idx], labels[dev_idx], config)
        for s in SITES:
            signed[ComponentId(l, s)] = acc - 0.5
            scores[ComponentId(l, s)] = max(acc - 0.5, 0.0)
    return ImportanceScores("probing", scores, signed)


# -- Intervention ---------------------------------------------------------------------------

@dataclass
class CorruptionPlan:
    components: list[ComponentId]
    multipliers: list[float]
    epsilon: float
    seed: int


def plan_corruption(scores: ImportanceScores, k: int, epsilon: float, seed: int) -> CorruptionPlan:
    if epsilon < 0 or not math.isfinite(epsilon):
        raise ConfigError(f"noise level must be finite and >= 0, got {epsilon}")
    if k < 0 or k > len(scores.scores):
        raise ConfigError(f"k={k} outside [0, {len(scores.scores)}]")
    chosen = scores.top(k)
    peak = max((scores.scores[c] for c in chosen), default=0.0)
    mult = [scores.scores[c] / peak if peak > 0 else 1.0 for c in chosen]
    return CorruptionPlan(chosen, mult, float(epsilon), seed)


def corrupt(model: TransformerModel, scores: ImportanceScores, k: int, epsilon: float, seed: int) -> TransformerModel:
    """Frozen copy with noise ``eps * (score / max score) * std(W) * G`` added to the top-k weights."""
    plan = plan_corruption(scores, k, epsilon, seed)
    out = model.copy()
    rng = np.random.default_rng(seed)
    for c, m in zip(plan.components, plan.multipliers):
        w = out.weight(c.layer, c.site)
        noise = rng.standard_normal(w.shape) * (plan.epsilon * m * float(w.data.std()))
        w.data = (w.data.astype(np.float64) + noise).astype(w.data.dtype)
    return out.freeze()


# -- Comparison table ---------------------------------------------------------------------

COMPARE_COLUMNS = ("method", "AccD", "PPL", "Cap", "product", "eps", "status")


@dataclass
class CompareRow:
    method: str
    accuracy_drop: float = float("nan")
    perplexity: float = float("nan")
    capability: float = float("nan")
    epsilon: float | None = None
    status: str = "ok"

    @property
    def product(self) -> float:
        return self.accuracy_drop * self.capability

    def cells(self) -> list:
        eps = "" if self.epsilon is None else repr(self.epsilon)
        return [self.method, repr(self.accuracy_drop), repr(self.perplexity), repr(self.capability),
                repr(self.product), eps, self.status]


def compare_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def score_method(method: str, model: TransformerModel, split: Sequence, seed: int = 0, ig_steps: int = 64) -> ImportanceScores:
    if method == "diffmean":
        return score_diffmean(model, split)
    if method == "logit_lens":
        return score_logit_lens(model, split)
    if method == "integrated_gradients":
        return score_integrated_gradients(model, split, ig_steps)
    if method == "probing":
        return score_probing(model, split, ProbeConfig(seed=seed))
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def scalpel_budget(adapters: LoraAdapterSet, k: int = TOP_K) -> LoraAdapterSet:
    """Adapters restricted to their ``k`` most important sites; the rest are zeroed."""
    return adapters.masked(set(layer_importance(adapters).top(k)))


def compare(
    model: TransformerModel,
    adapters: LoraAdapterSet,
    task: TaskDataset,
    held_out: Sequence[TaskDataset],
    general_eval: Sequence[str],
    methods: Sequence[str] = METHODS,
    eps_grid: Sequence[float] = EPS_GRID,
    k: int = TOP_K,
    seed: int = 0,
    ig_steps: int = 64,
) -> list[CompareRow]:
    """Baseline row, SCALPEL row under the top-k budget, then one row per noise method.

    Each noise method scores components on the train split, picks the noise
    level maximizing dev accuracy-drop x capability, and reports on test.
    """
    if not held_out:
        raise InputError("comparison needs held-out tasks")
    base_dev = task_accuracy(model, None, task.dev)
    base_test = task_accuracy(model, None, task.test)

    def test_row(name, m, a, eps=None) -> CompareRow:
        return CompareRow(
            method=name,
            accuracy_drop=base_test - task_accuracy(m, a, task.test),
            perplexity=perplexity(m, a, general_eval),
            capability=overall_capability(m, a, held_out, "test", target=task.name),
            epsilon=eps,
        )

    rows = [test_row("baseline", model, None), test_row("scalpel", model, scalpel_budget(adapters, k))]
    for method in methods:
        try:
            scores = score_method(method, model, task.train, seed, ig_steps)
            best_eps, best_val = None, -math.inf
            for eps in eps_grid:
                m = corrupt(model, scores, k, eps, seed)
                val = (base_dev - task_accuracy(m, None, task.dev)) * overall_capability(
                    m, None, held_out, "dev", target=task.name)
                log.info("%s %s eps=%g dev product %.4f", task.name, method, eps, val)
                if val > best_val:
                    best_eps, best_val = eps, val
            rows.append(test_row(method, corrupt(model, scores, k, best_eps, seed), None, best_eps))
        except ScalpelError as exc:
            rows.append(CompareRow(method, status=f"failed: {type(exc).__name__}: {exc}"))
    return rows
