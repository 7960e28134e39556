"""Synthetic capability tasks, a template-grammar general corpus, and JSONL I/O.

Token tasks are (prompt, correct, wrong) triplets with single-character
answers; the sentence task is (good, bad) pairs. Fixed lookup tables (the
mapping dictionary, analogy relations) come from a constant world seed so that
every sampling seed draws from the same "world".
"""

from __future__ import annotations

import json
import os
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, InputError, ParseError

WORLD_SEED = 20240917
KINDS = ("mapping", "ioi", "analogy", "parity", "agreement")
CATEGORIES = {
    "mapping": "knowledge",
    "analogy": "reasoning",
    "parity": "reasoning",
    "ioi": "language",
    "agreement": "language",
}
MIN_TASK_SIZE = 20


@dataclass(frozen=True)
class TokenTriplet:
    prompt: str
    correct: str
    wrong: str

    def __post_init__(self):
        if self.correct == self.wrong:
            raise InputError(f"correct and wrong answers coincide for prompt {self.prompt!r}")

    @property
    def key(self) -> str:
        return self.prompt

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "correct": self.correct, "wrong": self.wrong}


@dataclass(frozen=True)
class SentencePair:
    good: str
    bad: str

    def __post_init__(self):
        if self.good == self.bad:
            raise InputError(f"good and bad sentences coincide: {self.good!r}")

    @property
    def key(self) -> str:
        return self.good

    def to_json(self) -> dict:
        return {"good": self.good, "bad": self.bad}


Example = TokenTriplet | SentencePair


@dataclass
class TaskDataset:
    name: str
    mode: str
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def examples(self) -> list:
        return self.train + self.dev + self.test

    def texts(self) -> Iterable[str]:
        for ex in self.examples:
            yield from ex.to_json().values()


# -- world tables ----------------------------------------------------------------

LETTERS = "abcdefghijklmnopqrstuvwxyz"
NAMES = "ABDEFGHJKLMNPRST"
IOI_VERBS = ("gave", "sent", "threw")


def mapping_tables(n_pairs: int = 20) -> tuple[dict[str, str], dict[str, str]]:
    """(dictionary, distractor): src letter -> correct letter / fixed wrong letter."""
    rng = random.Random(WORLD_SEED)
    src = rng.sample(LETTERS, n_pairs)
    dst = [rng.choice(LETTERS) for _ in src]
    wrong = []
    for d in dst:
        w = rng.choice(LETTERS)
        while w == d:
            w = rng.choice(LETTERS)
        wrong.append(w)
    return dict(zip(src, dst)), dict(zip(src, wrong))


def analogy_relations(n_relations: int = 4, domain_size: int = 16) -> tuple[str, list[dict[str, str]]]:
    """A letter domain and relations over it; for every letter, the images under
    different relations are distinct, so a pair (a, R(a)) identifies R."""
    rng = random.Random(WORLD_SEED + 1)
    domain = "".join(rng.sample(LETTERS, domain_size))
    relations: list[dict[str, str]] = [{} for _ in range(n_relations)]
    for a in domain:
        images = rng.sample([c for c in LETTERS if c != a], n_relations)
        for rel, img in zip(relations, images):
            rel[a] = img
    return domain, relations


_AGREE_ADJ = ("big", "small", "red", "old", "young", "shy", "tall", "calm")
_AGREE_NOUN = ("dog", "cat", "bird", "fox", "cow", "pig", "hen", "owl", "bee", "ant")
_AGREE_VERB = ("run", "sleep", "jump", "eat", "sing", "swim", "walk", "hide")
_AGREE_ADV = ("fast", "well", "now", "here", "often")


# -- per-kind samplers ---------------------------------------------------------------

def _sample_mapping(rng: random.Random) -> TokenTriplet:
    table, distractor = mapping_tables()
    src = rng.choice(sorted(table))
    tag = "".join(rng.choice(LETTERS) for _ in range(2))
    return TokenTriplet(f"{tag} {src}>", table[src], distractor[src])


def _sample_ioi(rng: random.Random) -> TokenTriplet:
    x, y = rng.sample(NAMES, 2)
    giver = rng.choice((x, y))
    receiver = y if giver == x else x
    verb = rng.choice(IOI_VERBS)
    return TokenTriplet(f"{x} and {y} met; {giver} {verb} it to ", receiver, giver)


def _sample_analogy(rng: random.Random) -> TokenTriplet:
    domain, relations = analogy_relations()
    r = rng.randrange(len(relations))
    a, c = rng.sample(domain, 2)
    rel, other = relations[r], relations[(r + 1) % len(relations)]
    return TokenTriplet(f"{a}:{rel[a]}::{c}:", rel[c], other[c])


def _sample_parity(rng: random.Random) -> TokenTriplet:
    d = [rng.randrange(10) for _ in range(3)]
    p = sum(d) % 2
    return TokenTriplet(f"{d[0]}+{d[1]}+{d[2]}%2=", str(p), str(1 - p))


def _sample_agreement(rng: random.Random) -> SentencePair:
    adj, noun = rng.choice(_AGREE_ADJ), rng.choice(_AGREE_NOUN)
    verb, adv = rng.choice(_AGREE_VERB), rng.choice(_AGREE_ADV)
    if rng.random() < 0.5:
        subj, good_v, bad_v = noun + "s", verb, verb + "s"
    else:
        subj, good_v, bad_v = noun, verb + "s", verb
    return SentencePair(f"the {adj} {subj} {good_v} {adv}.", f"the {adj} {subj} {bad_v} {adv}.")


_SAMPLERS = {
    "mapping": (_sample_mapping, "token"),
    "ioi": (_sample_ioi, "token"),
    "analogy": (_sample_analogy, "token"),
    "parity": (_sample_parity, "token"),
    "agreement": (_sample_agreement, "sentence"),
}


def task_mode(kind: str) -> str:
    try:
        return _SAMPLERS[kind][1]
    except KeyError:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {KINDS}") from None


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = round(0.8 * n)
    n_dev = round(0.1 * n)
    return n_train, n_dev, n - n_train - n_dev


def generate_task(kind: str, size: int, seed: int, exclude: Iterable[str] = ()) -> TaskDataset:
    """Draw ``size`` examples with distinct prompts and split them 80/10/10.

    ``exclude`` lists prompt keys that must not appear (used for held-out sets).
    """
    sampler, mode = _SAMPLERS.get(kind, (None, None))
    if sampler is None:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    if size < MIN_TASK_SIZE:
        raise ConfigError(f"task size must be >= {MIN_TASK_SIZE}, got {size}")
    rng = random.Random(f"{kind}:{seed}")
    seen = set(exclude)
    examples = []
    attempts = 0
    while len(examples) < size:
        attempts += 1
        if attempts > 200 * size:
            raise ConfigError(f"{kind}: only {len(examples)} distinct examples available, {size} requested")
        ex = sampler(rng)
        if ex.key in seen:
            continue
        seen.add(ex.key)
        examples.append(ex)
    n_train, n_dev, _ = split_sizes(size)
    return TaskDataset(kind, mode, examples[:n_train], examples[n_train:n_train + n_dev], examples[n_train + n_dev:])


# -- general corpus ------------------------------------------------------------------

_DIGITS = tuple((d, 0.1) for d in "0123456789")

# A sentence picks one template by weight; each slot is then filled
# independently: (probability the slot is present, [(word, weight), ...]).
# Besides plain scene descriptions the templates cover numerals and
# capitalized names, so the general text reaches the digit and name tokens
# the tasks use without reproducing any task format.
GENERAL_GRAMMAR: tuple[tuple[float, tuple[tuple[float, tuple[tuple[str, float], ...]], ...]], ...] = (
    (0.5, (
        (1.0, (("a", 0.4), ("my", 0.25), ("one", 0.2), ("your", 0.15))),
        (0.3, (("green", 0.5), ("quiet", 0.3), ("wide", 0.2))),
        (1.0, (("boat", 0.2), ("house", 0.2), ("tree", 0.15), ("lamp", 0.1), ("road", 0.1),
               ("hill", 0.1), ("book", 0.05), ("door", 0.05), ("river", 0.05))),
        (1.0, (("is near", 0.3), ("sits by", 0.25), ("was on", 0.2), ("lies under", 0.15), ("stood at", 0.1))),
        (1.0, (("a", 0.5), ("the", 0.5))),
        (1.0, (("stone", 0.3), ("wall", 0.3), ("gate", 0.2), ("field", 0.2))),
    )),
    (0.25, (
        (1.0, (("we", 0.4), ("they", 0.3), ("you", 0.3))),
        (1.0, (("saw", 0.3), ("have", 0.3), ("need", 0.2), ("sold", 0.2))),
        (1.0, _DIGITS),
        (0.5, _DIGITS),
        (1.0, (("boats", 0.3), ("lamps", 0.3), ("stones", 0.2), ("books", 0.2))),
    )),
    (0.25, (
        (1.0, tuple((n, 1.0 / len(NAMES)) for n in NAMES)),
        (1.0, (("waved at", 0.4), ("walked to", 0.3), ("spoke with", 0.3))),
        (1.0, tuple((n, 1.0 / len(NAMES)) for n in NAMES)),
        (0.5, (("today", 0.5), ("again", 0.5))),
    )),
)


def _pick(rng: random.Random, options) -> str:
    r = rng.random()
    acc = 0.0
    for value, w in options:
        acc += w
        if r < acc:
            return value
    return options[-1][0]


def _general_sentence(rng: random.Random) -> str:
    slots = _pick(rng, [(slots, w) for w, slots in GENERAL_GRAMMAR])
    words = []
    for p_present, options in slots:
        if p_present < 1.0 and rng.random() >= p_present:
            continue
        words.append(_pick(rng, options))
    return " ".join(words) + "."


def analytic_unigram() -> dict[str, float]:
    """Long-run character frequencies of the sentence stream ``s1 s2 s3 ...``.

    Renewal argument: frequency = E[count per sentence] / E[length per sentence],
    where each sentence is followed by one separator space and the expectation
    runs over the template mixture.
    """
    counts: Counter = Counter()
    total = 0.0
    for t_weight, slots in GENERAL_GRAMMAR:
        n_words = 0.0
        for p_present, options in slots:
            for word, w in options:
                for ch, k in Counter(word).items():
                    counts[ch] += t_weight * p_present * w * k
                total += t_weight * p_present * w * (len(word) + 1)
            n_words += p_present
        counts[" "] += t_weight * n_words  # gaps between words plus the separator
        counts["."] += t_weight
        total += t_weight  # the period
    return {ch: v / total for ch, v in counts.items()}


@dataclass
class GeneralCorpus:
    """Fixed-width general-text windows split into textreg and held-out eval pools."""

    textreg: list[str]
    eval: list[str]
    window: int


def general_stream(n_chars: int, seed: int) -> tuple[str, list[str]]:
    rng = random.Random(f"general:{seed}")
    sentences: list[str] = []
    length = 0
    while length < n_chars:
        s = _general_sentence(rng)
        sentences.append(s)
        length += len(s) + 1
    return " ".join(sentences) + " ", sentences


def generate_general_corpus(size: int, seed: int, window: int = 31, eval_fraction: float = 0.2) -> GeneralCorpus:
    """About ``size`` characters of general text cut into ``window``-character chunks."""
    if size < 1000:
        raise ConfigError(f"general corpus size must be >= 1000 tokens, got {size}")
    stream, _ = general_stream(size, seed)
    chunks = [stream[i:i + window] for i in range(0, len(stream) - window + 1, window)]
    order = list(range(len(chunks)))
    random.Random(f"general-split:{seed}").shuffle(order)
    n_eval = max(1, round(eval_fraction * len(chunks)))
    eval_idx = set(order[:n_eval])
    return GeneralCorpus(
        textreg=[c for i, c in enumerate(chunks) if i not in eval_idx],
        eval=[c for i, c in enumerate(chunks) if i in eval_idx],
        window=window,
    )


# -- JSONL ------------------------------------------------------------------------------

_KEYS = {"token": ("prompt", "correct", "wrong"), "sentence": ("good", "bad")}


def write_jsonl(path: str | os.PathLike, records: Sequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = r.to_json() if hasattr(r, "to_json") else r
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_jsonl(path: str | os.PathLike, mode: str | None = None) -> list:
    """Parse task records. ``mode`` is inferred from the first record when omitted."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            if mode is None:
                mode = "token" if "prompt" in obj else "sentence"
            for key in _KEYS[mode]:
                if key not in obj:
                    raise ParseError(f"{path}:{lineno}: missing key {key!r}")
                if not isinstance(obj[key], str):
                    raise ParseError(f"{path}:{lineno}: key {key!r} must be a string")
            try:
                rec = TokenTriplet(**{k: obj[k] for k in _KEYS[mode]}) if mode == "token" else \
                    SentencePair(**{k: obj[k] for k in _KEYS[mode]})
            except InputError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            out.append(rec)
    return out


def write_dataset(root: str | os.PathLike, ds: TaskDataset) -> None:
    """``root/<name>/{train,dev,test}.jsonl``."""
    for split in ("train", "dev", "test"):
        write_jsonl(Path(root) / ds.name / f"{split}.jsonl", ds.split(split))


def read_dataset(root: str | os.PathLike, name: str) -> TaskDataset:
    base = Path(root) / name
    if not base.is_dir():
        raise InputError(f"no dataset directory {base}")
    mode = task_mode(name) if name in _SAMPLERS else None
    splits = {s: read_jsonl(base / f"{s}.jsonl", mode) for s in ("train", "dev", "test")}
    if mode is None:
        first = next((r for rs in splits.values() for r in rs), None)
        mode = "token" if isinstance(first, TokenTriplet) else "sentence"
    return TaskDataset(name, mode, **splits)


def write_general(root: str | os.PathLike, corpus: GeneralCorpus) -> None:
    """``root/general/{textreg,eval}.jsonl`` with one ``{"text": ...}`` per line."""
    for name in ("textreg", "eval"):
        write_jsonl(Path(root) / "general" / f"{name}.jsonl", [{"text": t} for t in getattr(corpus, name)])


def read_general(root: str | os.PathLike) -> GeneralCorpus:
    pools = {}
    for name in ("textreg", "eval"):
        path = Path(root) / "general" / f"{name}.jsonl"
        texts = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    texts.append(json.loads(line)["text"])
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise ParseError(f"{path}:{lineno}: expected an object with a 'text' key") from None
        pools[name] = texts
    widths = {len(t) for t in pools["textreg"] + pools["eval"]}
    if len(widths) != 1:
        raise ParseError(f"general text windows must share one width, found {sorted(widths)}")
    return GeneralCorpus(pools["textreg"], pools["eval"], widths.pop())
