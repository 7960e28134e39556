"""Evaluation: preference accuracy, accuracy drop, perplexity, overall capability,
and per-example probability gaps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TaskDataset, TokenTriplet
from .errors import ContractError, InputError
from .model import final_logprobs, forward, sentence_logprobs
from .objective import TokenBatch, encode_batch, encode_general

EVAL_CHUNK = 128


def _logprob_pairs(model, adapters, examples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """(score of correct, score of wrong) per example, in log space.

    Token mode scores are answer log-probabilities; sentence mode scores are
    mean per-token log-probabilities.
    """
    if not examples:
        raise InputError("empty example list")
    tok = model.tokenizer
    pos, neg = [], []
    with T.no_grad():
        for i in range(0, len(examples), EVAL_CHUNK):
            batch = encode_batch(examples[i:i + EVAL_CHUNK], tok)
            if isinstance(batch, TokenBatch):
                logp = final_logprobs(model, adapters, batch.prompts).data.astype(np.float64)
                rows = np.arange(len(batch))
                pos.append(logp[rows, batch.correct])
                neg.append(logp[rows, batch.wrong])
            else:
                s = sentence_logprobs(model, adapters, batch.good + batch.bad).data.astype(np.float64)
                pos.append(s[: len(batch)])
                neg.append(s[len(batch):])
    return np.concatenate(pos), np.concatenate(neg)


def log_gaps(model, adapters, examples: Sequence) -> np.ndarray:
    a, b = _logprob_pairs(model, adapters, examples)
    return a - b


def prob_gaps(model, adapters, examples: Sequence) -> np.ndarray:
    """p_correct - p_wrong; for sentences p is the geometric-mean token probability."""
    a, b = _logprob_pairs(model, adapters, examples)
    return np.exp(a) - np.exp(b)


def task_accuracy(model, adapters, examples: Sequence) -> float:
    """Fraction of examples where the correct answer scores strictly higher (ties lose)."""
    a, b = _logprob_pairs(model, adapters, examples)
    return float(np.mean(a > b))


def perplexity(model, adapters, texts: Sequence[str]) -> float:
    """exp(total NLL / predicted-token count) over general-text windows, natural base."""
    if len(texts) == 0:
        raise InputError("perplexity needs at least one sequence")
    ids = encode_general(texts, model.tokenizer)
    nll, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(ids), EVAL_CHUNK):
            chunk = ids[i:i + EVAL_CHUNK]
            logp = T.log_softmax(forward(model, adapters, chunk[:, :-1])).data.astype(np.float64)
            picked = np.take_along_axis(logp, chunk[:, 1:, None], axis=-1)
            nll -= picked.sum()
            count += picked.size
    return math.exp(nll / count)


def overall_capability(model, adapters, held_out: Sequence[TaskDataset], split: str = "test",
                       target: str | None = None) -> float:
    """Unweighted mean preference accuracy over held-out tasks."""
    if not held_out:
        raise InputError("overall capability needs at least one held-out task")
    if target is not None and any(ds.name == target for ds in held_out):
        raise ContractError(f"target task {target!r} may not be part of the held-out set")
    return float(np.mean([task_accuracy(model, adapters, ds.split(split)) for ds in held_out]))


@dataclass
class MetricReport:
    task: str
    accuracy: float
    accuracy_drop: float
    perplexity: float
    overall_capability: float
    per_example_gaps: list = field(default_factory=list, repr=False)

    COLUMNS = ("task", "acc", "accd", "ppl", "cap")

    def row(self) -> list:
        return [self.task, self.accuracy, self.accuracy_drop, self.perplexity, self.overall_capability]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({"task": d["task"], "acc": d["accuracy"], "accd": d["accuracy_drop"],
                           "ppl": d["perplexity"], "cap": d["overall_capability"],
                           "gaps": d["per_example_gaps"]})

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.row())
        return buf.getvalue()


def evaluate(model, adapters, task: TaskDataset, held_out: Sequence[TaskDataset], general_eval: Sequence[str],
             base_accuracy: float | None = None, split: str = "test") -> MetricReport:
    """Full metric report for one target task. ``base_accuracy`` defaults to the
    adapter-free accuracy on the same split."""
    examples = task.split(split)
    acc = task_accuracy(model, adapters, examples)
    if base_accuracy is None:
        base_accuracy = task_accuracy(model, None, examples) if adapters is not None else acc
    cap = overall_capability(model, adapters, held_out, split, target=task.name) if held_out else float("nan")
    return MetricReport(
        task=task.name,
        accuracy=acc,
        accuracy_drop=base_accuracy - acc,
        perplexity=perplexity(model, adapters, general_eval),
        overall_capability=cap,
        per_example_gaps=prob_gaps(model, adapters, examples).tolist(),
    )


@dataclass
class GapRow:
    example: object
    base_gap: float
    ablated_gap: float


def gap_report(model, adapters, examples: Sequence) -> list[GapRow]:
    """Probability-space gaps before (no adapters) and after (with adapters)."""
    if len({isinstance(ex, TokenTriplet) for ex in examples}) > 1:
        raise InputError("gap report examples mix token and sentence modes")
    base = prob_gaps(model, None, examples)
    ablated = prob_gaps(model, adapters, examples)
    return [GapRow(ex, float(b), float(a)) for ex, b, a in zip(examples, base, ablated)]
