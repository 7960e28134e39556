"""Pretraining of the toy base model and adapter ablation training."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import GeneralCorpus, TaskDataset, TokenTriplet
from .errors import ConfigError, ContractError, InputError, InvariantError, TrainingError
from .lora import LoraAdapterSet, init_adapters
from .metrics import overall_capability, task_accuracy, perplexity, log_gaps
from .model import ModelConfig, Tokenizer, TransformerModel, forward, pad_batch
from .objective import LossBreakdown, LossWeights, encode_batch, encode_general, total_loss
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)


# -- pretraining ----------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 48
    general_batch_size: int = 16
    learning_rate: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    mastery: float = 0.9
    seed: int = 0


@dataclass
class PretrainReport:
    dev_accuracy: dict[str, float]
    perplexity: float
    losses: list[float] = field(default_factory=list, repr=False)


def build_tokenizer(datasets: Sequence[TaskDataset], corpus: GeneralCorpus) -> Tokenizer:
    texts: list[str] = []
    for ds in datasets:
        texts.extend(ds.texts())
    texts.extend(corpus.textreg)
    texts.extend(corpus.eval)
    return Tokenizer.from_corpus(texts)


def _lm_sequences(ds: TaskDataset, tok: Tokenizer) -> list[tuple[list[int], str]]:
    """Training sequences for one task: (ids, loss scope)."""
    out = []
    for ex in ds.train:
        if isinstance(ex, TokenTriplet):
            out.append((tok.encode(ex.prompt + ex.correct, bos=True), "answer"))
        else:
            out.append((tok.encode(ex.good, bos=True), "all"))
    return out


def _lm_loss(model: TransformerModel, seqs: list[tuple[list[int], str]]) -> T.Tensor:
    """Mean over sequences of their per-sequence NLL (answer token only, or mean over all tokens)."""
    tokens, lengths = pad_batch([s for s, _ in seqs], model.tokenizer.pad_id if model.tokenizer else 0)
    n_pred = tokens.shape[1] - 1
    weights = np.zeros((len(seqs), n_pred))
    for i, ((_, scope), length) in enumerate(zip(seqs, lengths)):
        if scope == "answer":
            weights[i, length - 2] = 1.0
        else:
            weights[i, : length - 1] = 1.0 / (length - 1)
    weights /= len(seqs)
    logp = T.log_softmax(forward(model, None, tokens[:, :-1]))
    picked = T.gather(logp, tokens[:, 1:])
    return -T.sum_(picked * weights.astype(picked.dtype))


def pretrain(
    model_config: ModelConfig,
    tokenizer: Tokenizer,
    datasets: Sequence[TaskDataset],
    corpus: GeneralCorpus,
    config: PretrainConfig = PretrainConfig(),
) -> tuple[TransformerModel, PretrainReport]:
    """Train the base model on every task's train split plus general text, then freeze it.

    Raises :class:`TrainingError` if any task's dev accuracy ends below the
    mastery threshold.
    """
    if not datasets:
        raise InputError("pretraining needs at least one task")
    if model_config.vocab_size != len(tokenizer):
        raise ConfigError(f"vocab_size {model_config.vocab_size} != tokenizer size {len(tokenizer)}")
    model = TransformerModel.initialize(model_config, tokenizer)
    model.set_trainable(True)
    params = list(model.params.values())
    decay = [p for name, p in model.params.items() if not name.endswith("norm")]
    opt = AdamW(params, config.learning_rate, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)

    pools = [_lm_sequences(ds, tokenizer) for ds in datasets]
    general = [(row.tolist(), "all") for row in encode_general(corpus.textreg, tokenizer)]
    losses = []
    for step in range(config.steps):
        lr = config.learning_rate * min(1.0, (step + 1) / config.warmup)
        lr *= 0.5 * (1 + math.cos(math.pi * step / config.steps)) * 0.9 + 0.1
        opt.lr = lr
        task_ids = rng.integers(len(pools), size=config.batch_size)
        batch = [pools[t][rng.integers(len(pools[t]))] for t in task_ids]
        batch += [general[i] for i in rng.integers(len(general), size=config.general_batch_size)]
        opt.zero_grad()
        loss = _lm_loss(model, batch)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
        loss.backward()
        clip_grad_norm(params, config.grad_clip_norm)
        for p in decay:
            p.data *= p.data.dtype.type(1.0 - lr * config.weight_decay)
        opt.step()
        losses.append(float(loss.data))
        if step % 250 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])

    model.freeze()
    dev = {ds.name: task_accuracy(model, None, ds.dev) for ds in datasets}
    report = PretrainReport(dev, perplexity(model, None, corpus.eval), losses)
    weak = {k: v for k, v in dev.items() if v < config.mastery}
    if weak:
        raise TrainingError(
            "mastery not reached: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(dev.items()))
            + f" (threshold {config.mastery})"
        )
    return model, report


# -- ablation ---------------------------------------------------------------------------

# How the returned adapters are picked among epochs, by dev metrics:
#   balanced: (base - max(acc, 1 - acc)) * cap; a flipped preference still
#             carries the capability, so it does not count as removal
#   product:  (base - acc) * cap
#   final:    no selection, last epoch
SELECTIONS = ("balanced", "product", "final")

@dataclass(frozen=True)
class TrainConfig:
    """Adapter training settings. Defaults are sized for the toy model; see :meth:`paper`."""

    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 20
    weight_decay: float = 1e-3
    grad_clip_norm: float = 1.0
    seed: int = 0
    init_seed: int = 0
    mode: str | None = None
    weights: LossWeights = LossWeights()
    rank: int = 2
    alpha: float = 16.0
    selection: str = "balanced"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ConfigError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.mode not in (None, "token", "sentence"):
            raise ConfigError(f"mode must be 'token' or 'sentence', got {self.mode!r}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Hyperparameters reported for the 1B-parameter setting."""
        base = dict(learning_rate=1e-5, batch_size=40, epochs=20, weight_decay=1e-3, rank=2, alpha=16.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", None) or {}
        for k in ("textreg", "normreg", "sparsityreg"):
            if k in d:
                w[k] = d.pop(k)
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(weights=LossWeights(**{k: float(v) for k, v in w.items()}), **d)


LOG_COLUMNS = ("step", "target", "textreg", "normreg", "sparsityreg", "total", "mean_abs_gap")


@dataclass
class EpochRecord:
    epoch: int
    dev_accuracy: float
    accuracy_drop: float
    capability: float
    product: float
    seconds: float
    base_accuracy: float = float("nan")

    def score(self, selection: str) -> float:
        if selection == "product":
            return self.product
        if selection == "balanced":
            residual = max(self.dev_accuracy, 1.0 - self.dev_accuracy)
            return (self.base_accuracy - residual) * self.capability
        return float(self.epoch)


@dataclass
class TrainLog:
    steps: list[LossBreakdown] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for i, b in enumerate(self.steps):
            w.writerow([i, *(repr(getattr(b, c)) for c in LOG_COLUMNS[1:])])
        return buf.getvalue()


def _cycle(n: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless shuffled pass over range(n), reshuffled every cycle."""
    while True:
        yield from rng.permutation(n).tolist()


def ablate(
    model: TransformerModel,
    task: TaskDataset,
    general_pool: Sequence[str],
    config: TrainConfig = TrainConfig(),
    held_out: Sequence[TaskDataset] = (),
) -> tuple[LoraAdapterSet, TrainLog]:
    """Train adapters that equalize correct/wrong preferences on ``task``.

    Each step pairs the target batch with an equally sized batch of general
    windows for the text regularizer. Dev metrics are computed after every
    epoch, and the adapters from the epoch maximizing ``config.selection``
    are returned (see ``SELECTIONS``).
    """
    if not model.frozen:
        raise ContractError("ablation requires a frozen base model")
    if config.mode is not None and config.mode != task.mode:
        raise ConfigError(f"config mode {config.mode!r} does not match task mode {task.mode!r}")
    if not task.train:
        raise InputError(f"task {task.name!r} has no training examples")
    tok = model.tokenizer
    checksum = model.checksum()

    adapters = init_adapters(model.config, config.rank, config.alpha, config.init_seed, task_label=task.name)
    params = list(adapters.parameters())
    opt = AdamW(params, config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    general_ids = encode_general(general_pool, tok) if len(general_pool) else None
    general_order = _cycle(len(general_ids), rng) if general_ids is not None else None
    use_text = config.weights.textreg > 0
    if use_text and general_ids is None:
        raise InputError("textreg is enabled but the general pool is empty")

    base_dev = task_accuracy(model, None, task.dev) if task.dev else 0.0
    log_ = TrainLog()
    best_score, best = -math.inf, None
    n = len(task.train)
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch_ex = [task.train[i] for i in perm[start:start + config.batch_size]]
            target = encode_batch(batch_ex, tok)
            general = None
            if general_order is not None:
                rows = [next(general_order) for _ in batch_ex]
                general = general_ids[rows] if use_text else None
            bd = total_loss(model, adapters, target, general, config.weights)
            if not math.isfinite(bd.total):
                raise TrainingError(f"non-finite loss at step {step}: {bd}")
            opt.zero_grad()
            bd.loss.backward()
            bd.loss = None
            clip_grad_norm(params, config.grad_clip_norm)
            opt.step()
            log_.steps.append(bd)
            step += 1
        rec = _epoch_record(model, adapters, task, held_out, base_dev, epoch, time.perf_counter() - t0)
        log_.epochs.append(rec)
        log.info("%s epoch %d: dev acc %.3f cap %.3f gap %.4f", task.name, epoch, rec.dev_accuracy,
                 rec.capability, log_.steps[-1].mean_abs_gap)
        score = rec.score(config.selection)
        if score > best_score:
            best_score, best = score, adapters.clone()
            log_.best_epoch = epoch

    if model.checksum() != checksum:
        raise InvariantError("base parameters changed during ablation")
    if config.selection == "final" or best is None:
        log_.best_epoch = config.epochs - 1
        return adapters, log_
    return best, log_


def _epoch_record(model, adapters, task, held_out, base_dev, epoch, seconds) -> EpochRecord:
    if not task.dev:
        return EpochRecord(epoch, float("nan"), 0.0, 1.0, 0.0, seconds, base_dev)
    acc = task_accuracy(model, adapters, task.dev)
    cap = overall_capability(model, adapters, held_out, "dev", target=task.name) if held_out else 1.0
    return EpochRecord(epoch, acc, base_dev - acc, cap, (base_dev - acc) * cap, seconds, base_dev)


# -- hyperparameter sweep ---------------------------------------------------------------

SWEEP_AXES = ("textreg", "normreg", "sparsityreg", "rank", "alpha", "learning_rate", "seed")
SWEEP_COLUMNS = ("rank_order", *SWEEP_AXES, "accd", "cap", "ppl", "product", "status")


@dataclass
class SweepRow:
    settings: dict
    accuracy_drop: float = float("nan")
    capability: float = float("nan")
    perplexity: float = float("nan")
    status: str = "ok"

    @property
    def product(self) -> float:
        return self.accuracy_drop * self.capability


def sweep_grid(axes: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of the given axes, in a stable order."""
    unknown = set(axes) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes: {sorted(unknown)}")
    names = [a for a in SWEEP_AXES if a in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[a] for a in names))]


def _cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    w = {k: float(cell[k]) for k in ("textreg", "normreg", "sparsityreg") if k in cell}
    rest = {k: v for k, v in cell.items() if k not in w}
    return replace(base, weights=replace(base.weights, **w), **rest)


def run_cell(model, task, general_pool, general_eval, held_out, base: TrainConfig, cell: dict) -> SweepRow:
    """Train and score one grid cell on the dev split; failures are recorded, not raised."""
    row = SweepRow(settings=dict(cell))
    try:
        config = _cell_config(base, cell)
        adapters, _ = ablate(model, task, general_pool, config, held_out)
        base_acc = task_accuracy(model, None, task.dev)
        row.accuracy_drop = base_acc - task_accuracy(model, adapters, task.dev)
        row.capability = overall_capability(model, adapters, held_out, "dev", target=task.name) if held_out else 1.0
        row.perplexity = perplexity(model, adapters, general_eval) if len(general_eval) else float("nan")
    except (ConfigError, InputError, TrainingError) as exc:
        row.status = f"failed: {type(exc).__name__}: {exc}"
    return row


def sweep(
    model: TransformerModel,
    task: TaskDataset,
    general_pool: Sequence[str],
    general_eval: Sequence[str],
    base: TrainConfig,
    axes: dict[str, Sequence],
    held_out: Sequence[TaskDataset] = (),
    workers: int = 1,
) -> list[SweepRow]:
    """Train every grid cell and rank them by dev accuracy-drop x capability.

    With ``workers > 1`` cells run in separate processes, so a crash in one
    cannot take the others down. Failed cells sort last.
    """
    cells = sweep_grid(axes)
    args = (model, task, general_pool, general_eval, held_out, base)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, *args, cell) for cell in cells]
            rows = []
            for cell, fut in zip(cells, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # worker died
                    rows.append(SweepRow(settings=dict(cell), status=f"failed: {type(exc).__name__}: {exc}"))
    else:
        rows = [run_cell(*args, cell) for cell in cells]

    def key(r: SweepRow):
        ok = r.status == "ok" and math.isfinite(r.product)
        return (not ok, -r.product if ok else 0.0)

    return sorted(rows, key=key)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for i, r in enumerate(rows):
        w.writerow([i, *(r.settings.get(a, "") for a in SWEEP_AXES),
                    repr(r.accuracy_drop), repr(r.capability), repr(r.perplexity), repr(r.product), r.status])
    return buf.getvalue()
