"""Training objective: equalization loss plus the three regularizers.

    total = target + w_text * textreg + w_norm * normreg + w_sparse * sparsityreg

The target term is the mean squared log-probability gap between the correct and
the wrong answer, so its unique minimum sits at indifference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .lora import LoraAdapterSet
from .model import Trace, TransformerModel, final_logprobs, hidden_states, sentence_logprobs
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    textreg: float = 1.0
    normreg: float = 1e-3
    sparsityreg: float = 1e-4

    def __post_init__(self):
        for name in ("textreg", "normreg", "sparsityreg"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    target: float
    textreg: float
    normreg: float
    sparsityreg: float
    total: float
    mean_abs_gap: float
    loss: Tensor | None = field(default=None, repr=False, compare=False)


# -- batches ------------------------------------------------------------------

@dataclass
class TokenBatch:
    """Encoded prompts (each starting with BOS) with correct / wrong answer ids."""

    prompts: list[list[int]]
    correct: np.ndarray
    wrong: np.ndarray

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass
class SentenceBatch:
    """Encoded sentence pairs, each starting with BOS."""

    good: list[list[int]]
    bad: list[list[int]]

    def __len__(self) -> int:
        return len(self.good)


def token_gaps(model: TransformerModel, adapters, batch: TokenBatch) -> Tensor:
    """log p(y+|x) - log p(y-|x) per example."""
    if np.any(batch.correct == batch.wrong):
        raise InputError("correct and wrong answers must differ")
    logp = final_logprobs(model, adapters, batch.prompts)
    return T.gather(logp, batch.correct) - T.gather(logp, batch.wrong)


def sentence_gaps(model: TransformerModel, adapters, batch: SentenceBatch) -> Tensor:
    """Difference of mean per-token log-probabilities, good minus bad."""
    n = len(batch)
    scores = sentence_logprobs(model, adapters, list(batch.good) + list(batch.bad))
    return scores[:n] - scores[n:]


def gaps(model, adapters, batch) -> Tensor:
    if isinstance(batch, TokenBatch):
        return token_gaps(model, adapters, batch)
    return sentence_gaps(model, adapters, batch)


def token_equalization_loss(model, adapters, batch: TokenBatch) -> Tensor:
    return T.mean(T.square(token_gaps(model, adapters, batch)))


def sentence_equalization_loss(model, adapters, batch: SentenceBatch) -> Tensor:
    return T.mean(T.square(sentence_gaps(model, adapters, batch)))


# -- regularizers --------------------------------------------------------------

def textreg_loss(model: TransformerModel, adapters: LoraAdapterSet, general: Sequence[Sequence[int]]) -> Tensor:
    """Mean squared L2 norm of the adapter outputs on general text.

    Averaged over samples, sequence positions and all adapted sites. Sequences
    in ``general`` must share one length (no padding).
    """
    if len(general) == 0:
        raise InputError("textreg needs a non-empty general batch")
    tokens = np.asarray(general, dtype=np.int64)
    trace = Trace(keep_lora=True)
    hidden_states(model, adapters, tokens, trace, final_norm=False)
    per_site = [T.mean(T.sum_(T.square(d), axis=-1)) for d in trace.lora_outputs]
    return _mean_of(per_site)


def _mean_of(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return T.scale(acc, 1.0 / len(terms))


def normreg_loss(adapters: LoraAdapterSet) -> Tensor:
    """Mean over all A and B matrices of their squared Frobenius norms."""
    return _mean_of([T.sq_norm(p) for p in adapters.parameters()])


def sparsityreg_loss(adapters: LoraAdapterSet) -> Tensor:
    """Mean over all A and B matrices of their entrywise L1 norms."""
    return _mean_of([T.l1_norm(p) for p in adapters.parameters()])


def total_loss(
    model: TransformerModel,
    adapters: LoraAdapterSet,
    target_batch,
    general_batch: Sequence[Sequence[int]] | None,
    weights: LossWeights,
) -> LossBreakdown:
    """Evaluate every term; ``.loss`` carries the differentiable total.

    The textreg term is computed whenever a general batch is supplied, even
    with zero weight, so the breakdown stays informative.
    """
    if len(target_batch) == 0:
        raise InputError("empty target batch")
    has_general = general_batch is not None and len(general_batch) > 0
    if weights.textreg > 0 and not has_general:
        raise InputError("textreg weight is positive but no general batch was given")
    if has_general and len(general_batch) != len(target_batch):
        raise InputError(
            f"general batch ({len(general_batch)}) must pair 1:1 with the target batch ({len(target_batch)})"
        )
    g = gaps(model, adapters, target_batch)
    target = T.mean(T.square(g))
    total = target
    parts = {"textreg": textreg_loss(model, adapters, general_batch) if has_general else None}
    parts["normreg"] = normreg_loss(adapters)
    parts["sparsityreg"] = sparsityreg_loss(adapters)
    values = {}
    for name, term in parts.items():
        w = getattr(weights, name)
        values[name] = 0.0 if term is None else float(term.data)
        if term is not None and w > 0:
            total = total + T.scale(term, w)
    return LossBreakdown(
        target=float(target.data),
        textreg=values["textreg"],
        normreg=values["normreg"],
        sparsityreg=values["sparsityreg"],
        total=float(total.data),
        mean_abs_gap=float(np.abs(g.data).mean()),
        loss=total,
    )


# -- encoding ---------------------------------------------------------------------

def encode_batch(examples: Sequence, tokenizer):
    """Turn task records into a :class:`TokenBatch` or :class:`SentenceBatch`.

    Token-mode answers must be single tokens; this is checked, not assumed.
    """
    from .data import TokenTriplet

    if not examples:
        raise InputError("empty example list")
    if isinstance(examples[0], TokenTriplet):
        prompts = [tokenizer.encode(ex.prompt, bos=True) for ex in examples]
        correct = np.array([tokenizer.token(ex.correct) for ex in examples], dtype=np.int64)
        wrong = np.array([tokenizer.token(ex.wrong) for ex in examples], dtype=np.int64)
        return TokenBatch(prompts, correct, wrong)
    good = [tokenizer.encode(ex.good, bos=True) for ex in examples]
    bad = [tokenizer.encode(ex.bad, bos=True) for ex in examples]
    return SentenceBatch(good, bad)


def encode_general(texts: Sequence[str], tokenizer) -> np.ndarray:
    """Fixed-width general windows as a (n, window + 1) id array with leading BOS."""
    rows = [tokenizer.encode(t, bos=True) for t in texts]
    if len({len(r) for r in rows}) > 1:
        raise InputError("general text windows must share one length")
    return np.asarray(rows, dtype=np.int64)
