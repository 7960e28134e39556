"""Toy decoder-only transformer and its character tokenizer.

Blocks follow the Llama layout: pre-RMSNorm attention, pre-RMSNorm SiLU-gated
MLP, learned absolute position embeddings, untied unembedding. Each layer has
seven projection matrices, the sites that adapters attach to::

    q, k, v, o       attention
    gate, up, down   MLP

All weights are stored as (d_out, d_in).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, CorruptionError, FormatError, InputError
from .tensor import Tensor

if TYPE_CHECKING:
    from .lora import LoraAdapterSet

SITES = ("q", "k", "v", "o", "gate", "up", "down")
RMS_EPS = 1e-6

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)


class Tokenizer:
    """Character-level tokenizer over a corpus-derived symbol set.

    Ids 0..2 are PAD, BOS, EOS; plain text never encodes to them.
    """

    def __init__(self, symbols: Iterable[str]):
        symbols = list(symbols)
        for s in symbols:
            if len(s) != 1:
                raise ConfigError(f"tokenizer symbols must be single characters, got {s!r}")
        if len(set(symbols)) != len(symbols):
            raise ConfigError("duplicate tokenizer symbols")
        self.vocab: list[str] = list(SPECIALS) + symbols
        self._index = {s: i for i, s in enumerate(self.vocab) if s not in SPECIALS}

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Tokenizer":
        chars: set[str] = set()
        for t in texts:
            chars.update(t)
        return cls(sorted(chars))

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and other.vocab == self.vocab

    def encode(self, text: str, bos: bool = False) -> list[int]:
        try:
            ids = [self._index[c] for c in text]
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} is not in the vocabulary") from None
        return [self.bos_id] + ids if bos else ids

    def token(self, text: str) -> int:
        """Id of a single-token string; anything else is an input error."""
        ids = self.encode(text)
        if len(ids) != 1:
            raise InputError(f"{text!r} encodes to {len(ids)} tokens, expected exactly one")
        return ids[0]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.vocab[i] for i in ids if i >= len(SPECIALS))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        # zero layers is allowed: it gives the bigram-like model used by hand-computed checks
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def site_shape(self, site: str) -> tuple[int, int]:
        """(d_out, d_in) of a projection site."""
        d, f = self.d_model, self.d_ff
        shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "gate": (f, d), "up": (f, d), "down": (d, f)}
        try:
            return shapes[site]
        except KeyError:
            raise ConfigError(f"unknown site {site!r}; expected one of {SITES}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def site_key(layer: int, site: str) -> str:
    return f"layers.{layer}.{site}"


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, config.d_model),
        "pos_emb": (config.max_seq_len, config.d_model),
    }
    for l in range(config.n_layers):
        shapes[f"layers.{l}.attn_norm"] = (config.d_model,)
        for site in SITES[:4]:
            shapes[site_key(l, site)] = config.site_shape(site)
        shapes[f"layers.{l}.mlp_norm"] = (config.d_model,)
        for site in SITES[4:]:
            shapes[site_key(l, site)] = config.site_shape(site)
    shapes["final_norm"] = (config.d_model,)
    shapes["unembed"] = (config.vocab_size, config.d_model)
    return shapes


class TransformerModel:
    """Parameter container. The math lives in module-level functions."""

    def __init__(
        self,
        config: ModelConfig,
        params: Mapping[str, np.ndarray],
        tokenizer: Tokenizer | None = None,
        dtype=None,
    ):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch; missing={missing} extra={extra}")
        self.config = config
        self.tokenizer = tokenizer
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ConfigError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, dtype=dtype)
        self.frozen = False

    @classmethod
    def initialize(cls, config: ModelConfig, tokenizer: Tokenizer | None = None) -> "TransformerModel":
        rng = np.random.default_rng(config.seed)
        std = 0.02
        resid_std = std / math.sqrt(2 * max(config.n_layers, 1))
        params: dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("norm"):
                params[name] = np.ones(shape)
            elif name.endswith((".o", ".down")):
                params[name] = rng.normal(0.0, resid_std, shape)
            else:
                params[name] = rng.normal(0.0, std, shape)
        return cls(config, params, tokenizer)

    # -- parameter access --------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def weight(self, layer: int, site: str) -> Tensor:
        return self.params[site_key(layer, site)]

    def set_trainable(self, flag: bool) -> None:
        if flag and self.frozen:
            raise ConfigError("cannot train a frozen model")
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def freeze(self) -> "TransformerModel":
        """Make base parameters read-only; later in-place writes raise."""
        self.set_trainable(False)
        for p in self.params.values():
            p.data.flags.writeable = False
        self.frozen = True
        return self

    def copy(self, dtype=None) -> "TransformerModel":
        """Independent, unfrozen deep copy (optionally cast to ``dtype``)."""
        dtype = dtype or next(iter(self.params.values())).data.dtype
        return TransformerModel(self.config, self.state(), self.tokenizer, dtype=dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


# -- forward pass -------------------------------------------------------------

@dataclass
class Trace:
    """Optional recorder for intermediate values of a forward pass.

    ``site_inputs`` maps (layer, site) to the activation entering that
    projection; ``lora_outputs`` holds each adapter's scaled output in site
    order; ``residuals`` holds the residual stream after the embeddings and
    after every layer.
    """

    keep_inputs: bool = False
    keep_lora: bool = False
    keep_residuals: bool = False
    site_inputs: dict = field(default_factory=dict)
    lora_outputs: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise InputError(f"token batch must be a non-empty (batch, seq) array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    if tokens.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    return tokens


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    inv = T.rsqrt(T.mean(T.square(x), axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * gain


class _Params:
    def __init__(self, model: TransformerModel, overrides: Mapping[str, Tensor] | None):
        self.model = model
        self.overrides = overrides or {}

    def __call__(self, name: str) -> Tensor:
        o = self.overrides.get(name)
        return o if o is not None else self.model.params[name]


def _project(P: _Params, adapters, x: Tensor, layer: int, site: str, trace: Trace | None) -> Tensor:
    y = T.linear(x, P(site_key(layer, site)))
    if trace is not None and trace.keep_inputs:
        trace.site_inputs[(layer, site)] = x
    if adapters is not None:
        s = adapters.site(layer, site)
        delta = T.scale(T.linear(T.linear(x, s.A), s.B), adapters.scale)
        if trace is not None and trace.keep_lora:
            trace.lora_outputs.append(delta)
        y = y + delta
    return y


def hidden_states(
    model: TransformerModel,
    adapters: "LoraAdapterSet | None",
    tokens,
    trace: Trace | None = None,
    overrides: Mapping[str, Tensor] | None = None,
    final_norm: bool = True,
) -> Tensor:
    """Residual stream after the last block, (batch, seq, d_model)."""
    cfg = model.config
    tokens = _check_tokens(cfg, tokens)
    P = _Params(model, overrides)
    b, t = tokens.shape
    h_dim, n_h = cfg.head_dim, cfg.n_heads

    x = T.embedding(P("tok_emb"), tokens) + T.embedding(P("pos_emb"), np.arange(t))
    if trace is not None and trace.keep_residuals:
        trace.residuals.append(x)
    for l in range(cfg.n_layers):
        h = rmsnorm(x, P(f"layers.{l}.attn_norm"))
        q, k, v = (
            _project(P, adapters, h, l, s, trace).reshape(b, t, n_h, h_dim).transpose(0, 2, 1, 3)
            for s in ("q", "k", "v")
        )
        scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(h_dim))
        att = T.matmul(T.causal_softmax(scores), v).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        x = x + _project(P, adapters, att, l, "o", trace)

        h = rmsnorm(x, P(f"layers.{l}.mlp_norm"))
        gate = _project(P, adapters, h, l, "gate", trace)
        up = _project(P, adapters, h, l, "up", trace)
        x = x + _project(P, adapters, T.silu(gate) * up, l, "down", trace)
        if trace is not None and trace.keep_residuals:
            trace.residuals.append(x)
    if not final_norm:
        return x
    return rmsnorm(x, P("final_norm"))


def unembed(model: TransformerModel, h: Tensor, overrides: Mapping[str, Tensor] | None = None) -> Tensor:
    return T.linear(h, _Params(model, overrides)("unembed"))


def lens_logits(model: TransformerModel, residual: Tensor) -> Tensor:
    """Read a residual-stream state through the final norm and unembedding."""
    return unembed(model, rmsnorm(residual, model["final_norm"]))


def forward(
    model: TransformerModel,
    adapters: "LoraAdapterSet | None",
    tokens,
    trace: Trace | None = None,
    overrides: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Logits of shape (batch, seq, vocab)."""
    return unembed(model, hidden_states(model, adapters, tokens, trace, overrides), overrides)


# -- batched scoring ------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad; causal masking keeps padding from influencing real positions."""
    if not seqs:
        raise InputError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() == 0:
        raise InputError("empty sequence in batch")
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def final_logits(model, adapters, prompts: Sequence[Sequence[int]], overrides=None, trace=None) -> Tensor:
    """Next-token logits after each prompt, (batch, vocab)."""
    tokens, lengths = pad_batch(prompts)
    # unembed every position and then select, so results agree bit-for-bit with forward()
    logits = unembed(model, hidden_states(model, adapters, tokens, trace, overrides), overrides)
    return logits[np.arange(len(prompts)), lengths - 1]


def final_logprobs(model, adapters, prompts: Sequence[Sequence[int]], overrides=None) -> Tensor:
    return T.log_softmax(final_logits(model, adapters, prompts, overrides), axis=-1)


def token_logprob(model, adapters, prompt: Sequence[int], target: int) -> float:
    """log p(target | prompt) under the (optionally adapted) model."""
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    if not 0 <= target < model.config.vocab_size:
        raise InputError(f"target id {target} out of range")
    with T.no_grad():
        return float(final_logprobs(model, adapters, [prompt]).data[0, target])


def sentence_logprobs(model, adapters, sentences: Sequence[Sequence[int]], overrides=None) -> Tensor:
    """Mean per-token log-probability of each sentence, (batch,).

    Each sentence starts with its conditioning token (BOS); every later token
    is predicted and counted.
    """
    for s in sentences:
        if len(s) < 2:
            raise InputError("a sentence needs at least one predicted token after BOS")
    tokens, lengths = pad_batch(sentences)
    h = hidden_states(model, adapters, tokens[:, :-1], None, overrides)
    logp = T.log_softmax(unembed(model, h, overrides), axis=-1)
    picked = T.gather(logp, tokens[:, 1:])
    n_pred = lengths - 1
    mask = (np.arange(tokens.shape[1] - 1)[None, :] < n_pred[:, None]).astype(picked.dtype)
    total = T.sum_(picked * mask, axis=1)
    return total * (1.0 / n_pred).astype(picked.dtype)


def sentence_logprob(model, adapters, sentence: Sequence[int]) -> float:
    if len(sentence) < 2:
        raise InputError("a sentence needs at least one predicted token after BOS")
    with T.no_grad():
        return float(sentence_logprobs(model, adapters, [sentence]).data[0])


# -- persistence -----------------------------------------------------------------

def save_model(model: TransformerModel, path) -> None:
    meta = {"kind": "model", "config": model.config.to_dict()}
    if model.tokenizer is not None:
        meta["vocab"] = model.tokenizer.vocab[len(SPECIALS):]
    checkpoint.save(path, {k: model.params[k].data for k in parameter_shapes(model.config)}, meta)


def load_model(path) -> TransformerModel:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise FormatError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    config = ModelConfig.from_dict(meta["config"])
    tok = Tokenizer(meta["vocab"]) if "vocab" in meta else None
    try:
        model = TransformerModel(config, tensors, tok)
    except ConfigError as exc:
        raise CorruptionError(f"checkpoint tensors disagree with its config: {exc}") from exc
    return model.freeze()
