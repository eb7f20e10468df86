"""Word-level tokenizer shared by the model and the metrics.

Normalisation lowercases, splits on whitespace and breaks the characters
``; , : ( ) % .`` out as tokens of their own.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PUNCTUATION = frozenset(";,:()%.")

_TOKEN_RE = re.compile(r"[;,:()%.]|[^\s;,:()%.]+")


def normalize_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def join_tokens(tokens: Iterable[str]) -> str:
    out: list[str] = []
    for tok in tokens:
        if out and tok not in PUNCTUATION:
            out.append(" ")
        out.append(tok)
    return "".join(out)


def normalize(text: str) -> str:
    """Canonical text form, i.e. ``decode(encode(text))`` without UNK loss."""
    return join_tokens(normalize_tokens(text))


@dataclass
class Vocab:
    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "min_count": self.min_count}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        return cls(list(obj["tokens"]), int(obj.get("min_count", 1)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Specials first, then tokens with ``count >= min_count`` by (count desc, token asc)."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for text in corpus for tok in normalize_tokens(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    kept = [t for t in kept if t not in SPECIAL_TOKENS]
    return Vocab(list(SPECIAL_TOKENS) + kept, min_count)


def encode(text: str, vocab: Vocab, add_specials: bool = True) -> list[int]:
    ids = [vocab.id_of(tok) for tok in normalize_tokens(text)]
    if add_specials:
        ids = [BOS, *ids, EOS]
    return ids


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Drop PAD/BOS/EOS.  UNK is kept as ``<unk>`` so re-encoding is stable."""
    toks = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i < UNK:
            continue
        toks.append(vocab.tokens[i])
    return join_tokens(toks)
