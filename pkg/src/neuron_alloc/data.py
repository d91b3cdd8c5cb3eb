"""Corpora, shared vocabulary and synthetic multilingual tasks."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from neuron_alloc.errors import ConfigError, DataError
from neuron_alloc.model import EOS_ID, PAD_ID, UNK_ID

SPLITS = ("train", "dev", "test")
SPECIALS = ("<pad>", "<eos>", "<unk>")


def parse_pair(pair: str) -> tuple[str, str]:
    """Split a pair id of the form ``src2tgt``."""
    parts = pair.split("2")
    if len(parts) != 2 or not all(p.isalpha() for p in parts):
        raise DataError(f"cannot parse language pair id '{pair}' (expected e.g. 'en2it')")
    return parts[0], parts[1]


def lang_token(target_lang: str) -> str:
    return f"<2{target_lang}>"


class Vocabulary:
    """Shared source/target vocabulary.

    Ids: ``<pad>``=0, ``<eos>``=1, ``<unk>``=2, then one language token per
    target language (sorted), then ordinary tokens in lexicographic order.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with <pad>, <eos>, <unk>")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i != PAD_ID:
                out.append(self.tokens[i])
        return out

    def lang_id(self, target_lang: str) -> int:
        tok = lang_token(target_lang)
        if tok not in self._ids:
            raise DataError(f"no language token {tok} in vocabulary")
        return self._ids[tok]


def build_vocab(sentences: Iterable[Sequence[str]], target_langs: Iterable[str],
                max_size: int | None = None) -> Vocabulary:
    words = sorted({w for s in sentences for w in s})
    langs = sorted(set(target_langs))
    tokens = list(SPECIALS) + [lang_token(l) for l in langs] + words
    if max_size is not None and len(tokens) > max_size:
        dropped = tokens[max_size:]
        raise DataError(
            f"vocabulary of {len(tokens)} entries exceeds limit {max_size}; tokens over the limit: "
            + " ".join(dropped[:20]) + (" ..." if len(dropped) > 20 else "")
        )
    return Vocabulary(tokens)


@dataclass
class Corpus:
    """Aligned token-id sentences for one pair and split.

    ``sources`` carry the target-language token at position 0.
    """

    pair: str
    split: str
    sources: list[list[int]]
    targets: list[list[int]]

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise DataError(f"{self.pair}/{self.split}: {len(self.sources)} sources vs {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.sources)

    def validate(self, vocab_size: int) -> None:
        for s, t in zip(self.sources, self.targets):
            if len(s) < 2 or not t:
                raise DataError(f"{self.pair}/{self.split}: empty sentence")
            if max(s) >= vocab_size or max(t) >= vocab_size:
                raise DataError(f"{self.pair}/{self.split}: token id outside vocabulary of {vocab_size}")


# -- plain-text corpus layout ------------------------------------------------
#   <dir>/<split>.<pair>.<src-lang>   and   <dir>/<split>.<pair>.<tgt-lang>
# one whitespace-tokenised sentence per line.

def corpus_paths(root: str | os.PathLike, pair: str, split: str) -> tuple[Path, Path]:
    src, tgt = parse_pair(pair)
    root = Path(root)
    return root / f"{split}.{pair}.{src}", root / f"{split}.{pair}.{tgt}"


def read_lines(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DataError(f"missing corpus file {path}")
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def read_parallel(root, pair: str, split: str) -> tuple[list[list[str]], list[list[str]]]:
    sp, tp = corpus_paths(root, pair, split)
    src, tgt = read_lines(sp), read_lines(tp)
    if len(src) != len(tgt):
        raise DataError(f"line-count mismatch for {pair}/{split}: {sp.name} has {len(src)}, {tp.name} has {len(tgt)}")
    return src, tgt


def discover_pairs(root) -> list[str]:
    pairs = set()
    for p in Path(root).glob("train.*.*"):
        parts = p.name.split(".")
        if len(parts) == 3:
            pairs.add(parts[1])
    if not pairs:
        raise DataError(f"no training corpora found under {root}")
    return sorted(pairs)


def build_vocab_from_dir(root, pairs: Sequence[str], max_size: int | None = None) -> Vocabulary:
    sentences: list[list[str]] = []
    for pair in pairs:
        for split in SPLITS:
            sp, _ = corpus_paths(root, pair, split)
            if sp.exists() or split == "train":
                src, tgt = read_parallel(root, pair, split)
                sentences.extend(src)
                sentences.extend(tgt)
    return build_vocab(sentences, [parse_pair(p)[1] for p in pairs], max_size)


def load_corpus(root, pair: str, split: str, vocab: Vocabulary) -> Corpus:
    """Read one split of one pair, prepending the target-language token."""
    src, tgt = read_parallel(root, pair, split)
    tok = vocab.lang_id(parse_pair(pair)[1])
    for i, (s, t) in enumerate(zip(src, tgt)):
        if not s or not t:
            raise DataError(f"{pair}/{split}: empty sentence on line {i + 1}")
    return Corpus(pair, split, [[tok] + vocab.encode(s) for s in src], [vocab.encode(t) for t in tgt])


def load_corpora(root, pairs: Sequence[str], vocab: Vocabulary,
                 splits: Sequence[str] = SPLITS) -> dict[str, dict[str, Corpus]]:
    out: dict[str, dict[str, Corpus]] = {}
    for pair in pairs:
        out[pair] = {}
        for split in splits:
            sp, _ = corpus_paths(root, pair, split)
            if split != "train" and not sp.exists():
                continue
            out[pair][split] = load_corpus(root, pair, split, vocab)
    return out


def write_parallel(root, pair: str, split: str, src: Sequence[Sequence[str]], tgt: Sequence[Sequence[str]]) -> None:
    sp, tp = corpus_paths(root, pair, split)
    sp.parent.mkdir(parents=True, exist_ok=True)
    sp.write_text("".join(" ".join(s) + "\n" for s in src), encoding="utf-8")
    tp.write_text("".join(" ".join(t) + "\n" for t in tgt), encoding="utf-8")


# -- synthetic tasks ----------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    kind: str  # identity_copy | reversal | vocab_shift
    offset: int = 0

    @classmethod
    def parse(cls, text: str) -> "Transform":
        if text in ("identity_copy", "reversal"):
            return cls(text)
        if text.startswith("vocab_shift"):
            try:
                return cls("vocab_shift", int(text.split(":", 1)[1]))
            except (IndexError, ValueError):
                raise ConfigError("transforms", f"bad vocab_shift spec '{text}' (use vocab_shift:<offset>)") from None
        raise ConfigError("transforms", f"unknown transform '{text}'")

    def __str__(self) -> str:
        return f"vocab_shift:{self.offset}" if self.kind == "vocab_shift" else self.kind

    def apply(self, ids: Sequence[int], base_vocab: int) -> list[int]:
        if self.kind == "identity_copy":
            return list(ids)
        if self.kind == "reversal":
            return list(reversed(ids))
        return [(i + self.offset) % base_vocab for i in ids]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Desk-scale stand-in for real multilingual corpora.

    Each language is a bijective transform of a base sentence drawn uniformly
    from ``base_vocab`` symbols. one_to_many pairs the ``source_language``
    with every other language; many_to_many uses all ordered pairs.
    """

    scenario: str = "one_to_many"
    base_vocab: int = 16
    min_len: int = 4
    max_len: int = 10
    languages: tuple[tuple[str, str], ...] = (
        ("src", "identity_copy"),
        ("cp", "identity_copy"),
        ("rv", "reversal"),
        ("sh", "vocab_shift:3"),
    )
    source_language: str = "src"
    sizes: tuple[tuple[str, int], ...] = (("train", 5000), ("dev", 200), ("test", 500))
    seed: int = 0

    def transforms(self) -> dict[str, Transform]:
        return {name: Transform.parse(t) for name, t in self.languages}

    def validate(self) -> None:
        if self.scenario not in ("one_to_many", "many_to_many"):
            raise ConfigError("scenario", f"unknown scenario '{self.scenario}'")
        if self.base_vocab < 2:
            raise ConfigError("base_vocab", "needs at least 2 symbols")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("min_len", f"bad length range {self.min_len}..{self.max_len}")
        transforms = self.transforms()
        for name, tr in transforms.items():
            if not name.isalpha():
                raise ConfigError("languages", f"language name '{name}' must be alphabetic")
            if tr.kind == "vocab_shift" and not 0 < tr.offset < self.base_vocab:
                raise ConfigError(
                    "transforms", f"vocab_shift offset {tr.offset} needs a base vocabulary larger than it "
                    f"(base_vocab={self.base_vocab})"
                )
        if self.scenario == "one_to_many" and self.source_language not in transforms:
            raise ConfigError("source_language", f"'{self.source_language}' is not a declared language")
        targets = [n for n in transforms if n != self.source_language] \
            if self.scenario == "one_to_many" else list(transforms)
        seen = {}
        for name in targets:
            key = str(transforms[name])
            if key in seen:
                raise ConfigError("languages", f"languages '{seen[key]}' and '{name}' share transform {key}")
            seen[key] = name

    def pairs(self) -> list[str]:
        names = [n for n, _ in self.languages]
        if self.scenario == "one_to_many":
            return [f"{self.source_language}2{t}" for t in names if t != self.source_language]
        return [f"{a}2{b}" for a in names for b in names if a != b]

    def word(self, i: int) -> str:
        width = len(str(self.base_vocab - 1))
        return f"w{i:0{width}d}"


def _split_of(sentence: Sequence[int], fractions: Sequence[tuple[str, float]]) -> str:
    digest = hashlib.sha256(",".join(map(str, sentence)).encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    acc = 0.0
    for name, frac in fractions:
        acc += frac
        if u < acc:
            return name
    return fractions[-1][0]


def generate_synthetic(spec: SyntheticTaskSpec) -> dict[str, dict[str, tuple[list[list[str]], list[list[str]]]]]:
    """Token-string corpora per pair and split: ``{pair: {split: (src, tgt)}}``.

    Base sentences are hash-partitioned into splits, so a sentence can never
    land in two splits; generation is deterministic per seed.
    """
    spec.validate()
    transforms = spec.transforms()
    sizes = dict(spec.sizes)
    total = sum(sizes.values())
    fractions = [(name, n / total) for name, n in spec.sizes]
    out = {}
    for idx, pair in enumerate(spec.pairs()):
        src_lang, tgt_lang = parse_pair(pair)
        rng = np.random.default_rng([spec.seed, idx])
        buckets: dict[str, list[list[int]]] = {name: [] for name in sizes}
        seen: set[tuple[int, ...]] = set()
        attempts = 0
        while any(len(buckets[n]) < sizes[n] for n in sizes):
            attempts += 1
            if attempts > 50 * total + 10000:
                raise ConfigError("sizes", "not enough distinct sentences for the requested split sizes")
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            base = [int(x) for x in rng.integers(0, spec.base_vocab, size=length)]
            key = tuple(base)
            if key in seen:
                continue
            seen.add(key)
            split = _split_of(base, fractions)
            if len(buckets[split]) < sizes[split]:
                buckets[split].append(base)
        out[pair] = {}
        for split, bases in buckets.items():
            srcs = [[spec.word(i) for i in transforms[src_lang].apply(b, spec.base_vocab)] for b in bases]
            tgts = [[spec.word(i) for i in transforms[tgt_lang].apply(b, spec.base_vocab)] for b in bases]
            out[pair][split] = (srcs, tgts)
    return out


def write_synthetic(spec: SyntheticTaskSpec, root) -> list[str]:
    data = generate_synthetic(spec)
    for pair, splits in data.items():
        for split, (src, tgt) in splits.items():
            write_parallel(root, pair, split, src, tgt)
    return list(data)


def synthetic_corpora(spec: SyntheticTaskSpec) -> tuple[Vocabulary, dict[str, dict[str, Corpus]]]:
    """In-memory equivalent of write_synthetic + build_vocab + load_corpora."""
    data = generate_synthetic(spec)
    sentences = [s for splits in data.values() for src, tgt in splits.values() for s in (*src, *tgt)]
    vocab = build_vocab(sentences, [parse_pair(p)[1] for p in data])
    corpora: dict[str, dict[str, Corpus]] = {}
    for pair, splits in data.items():
        tok = vocab.lang_id(parse_pair(pair)[1])
        corpora[pair] = {
            split: Corpus(pair, split, [[tok] + vocab.encode(s) for s in src], [vocab.encode(t) for t in tgt])
            for split, (src, tgt) in splits.items()
        }
    return vocab, corpora
