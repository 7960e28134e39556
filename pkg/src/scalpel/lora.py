"""Low-rank adapters attached to every projection site of the frozen model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import checkpoint
from .errors import ConfigError, CorruptionError, FormatError
from .model import SITES, ModelConfig
from .tensor import Tensor, get_dtype

INIT_STD = 0.02


@dataclass
class LoraSite:
    layer: int
    site: str
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.site)


class LoraAdapterSet:
    """The trainable pairs ``{A_l, B_l}``; each site contributes ``(alpha/r) B A x``."""

    def __init__(self, config: ModelConfig, rank: int, alpha: float, sites: list[LoraSite], task_label: str = ""):
        self.config = config
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.task_label = task_label
        self.sites = sites
        self._by_key = {s.key: s for s in sites}
        expected = [(l, s) for l in range(config.n_layers) for s in SITES]
        if [s.key for s in sites] != expected:
            raise ConfigError("adapter sites must cover every (layer, site) exactly once, in canonical order")
        for s in sites:
            d_out, d_in = config.site_shape(s.site)
            if s.A.shape != (self.rank, d_in) or s.B.shape != (d_out, self.rank):
                raise ConfigError(
                    f"site {s.key}: A{s.A.shape}/B{s.B.shape} inconsistent with W {(d_out, d_in)} at rank {self.rank}"
                )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def site(self, layer: int, site: str) -> LoraSite:
        return self._by_key[(layer, site)]

    def parameters(self) -> Iterator[Tensor]:
        for s in self.sites:
            yield s.A
            yield s.B

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for s in self.sites:
            yield f"lora.{s.layer}.{s.site}.A", s.A
            yield f"lora.{s.layer}.{s.site}.B", s.B

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "LoraAdapterSet":
        sites = [
            LoraSite(s.layer, s.site, Tensor(s.A.data, requires_grad=True, dtype=s.A.dtype),
                     Tensor(s.B.data, requires_grad=True, dtype=s.B.dtype))
            for s in self.sites
        ]
        return LoraAdapterSet(self.config, self.rank, self.alpha, sites, self.task_label)

    def masked(self, keep: set[tuple[int, str]]) -> "LoraAdapterSet":
        """Copy with every site outside ``keep`` zeroed."""
        out = self.clone()
        for s in out.sites:
            if s.key not in keep:
                s.A.data[...] = 0
                s.B.data[...] = 0
        return out


def _check_rank(config: ModelConfig, r: int) -> None:
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    for site in SITES:
        d_out, d_in = config.site_shape(site)
        if r > min(d_in, d_out):
            raise ConfigError(f"rank {r} exceeds min(d_in, d_out)={min(d_in, d_out)} at site {site!r}")


def init_adapters(config: ModelConfig, r: int, alpha: float, seed: int, task_label: str = "") -> LoraAdapterSet:
    """A ~ N(0, 0.02^2), B = 0, so the adapted model starts out identical to the base."""
    _check_rank(config, r)
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    sites = []
    for l in range(config.n_layers):
        for site in SITES:
            d_out, d_in = config.site_shape(site)
            a = rng.normal(0.0, INIT_STD, (r, d_in))
            sites.append(LoraSite(l, site, Tensor(a, True, dtype), Tensor(np.zeros((d_out, r)), True, dtype)))
    return LoraAdapterSet(config, r, alpha, sites, task_label)


def effective_update(site: LoraSite, alpha: float, r: int) -> np.ndarray:
    """Materialized ``(alpha/r) B A``, shape (d_out, d_in)."""
    return (alpha / r) * (site.B.data.astype(np.float64) @ site.A.data.astype(np.float64))


def flatten(adapters: LoraAdapterSet) -> np.ndarray:
    """Layer-major, site order q,k,v,o,gate,up,down, A before B, row-major."""
    return np.concatenate([p.data.reshape(-1).astype(np.float64) for p in adapters.parameters()])


def flat_length(config: ModelConfig, r: int) -> int:
    return config.n_layers * sum(r * (d_in + d_out) for d_out, d_in in map(config.site_shape, SITES))


def unflatten(vector: np.ndarray, config: ModelConfig, r: int, alpha: float, task_label: str = "") -> LoraAdapterSet:
    vector = np.asarray(vector)
    if vector.size != flat_length(config, r):
        raise ConfigError(f"vector of length {vector.size} does not fit rank-{r} adapters ({flat_length(config, r)})")
    dtype = get_dtype()
    sites, pos = [], 0
    for l in range(config.n_layers):
        for site in SITES:
            d_out, d_in = config.site_shape(site)
            a = vector[pos:pos + r * d_in].reshape(r, d_in)
            pos += r * d_in
            b = vector[pos:pos + d_out * r].reshape(d_out, r)
            pos += d_out * r
            sites.append(LoraSite(l, site, Tensor(a, True, dtype), Tensor(b, True, dtype)))
    return LoraAdapterSet(config, r, alpha, sites, task_label)


def save_adapters(adapters: LoraAdapterSet, path) -> None:
    meta = {
        "kind": "lora",
        "rank": adapters.rank,
        "alpha": adapters.alpha,
        "task_label": adapters.task_label,
        "config": adapters.config.to_dict(),
    }
    checkpoint.save(path, {name: p.data for name, p in adapters.named_parameters()}, meta)


def load_adapters(path, config: ModelConfig | None = None) -> LoraAdapterSet:
    """Read adapters; if ``config`` is given it must match the stored one."""
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "lora":
        raise FormatError(f"{path} is not an adapter checkpoint (kind={meta.get('kind')!r})")
    try:
        stored = ModelConfig.from_dict(meta["config"])
        rank, alpha = int(meta["rank"]), float(meta["alpha"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"adapter manifest incomplete: {exc}") from exc
    if config is not None and config != stored:
        raise ConfigError(f"adapters were trained for {stored}, not {config}")
    sites = []
    try:
        for l in range(stored.n_layers):
            for site in SITES:
                a = tensors[f"lora.{l}.{site}.A"]
                b = tensors[f"lora.{l}.{site}.B"]
                sites.append(LoraSite(l, site, Tensor(a, True, np.float32), Tensor(b, True, np.float32)))
        return LoraAdapterSet(stored, rank, alpha, sites, meta.get("task_label", ""))
    except (KeyError, ConfigError) as exc:
        raise CorruptionError(f"adapter tensors disagree with manifest: {exc}") from exc
