"""Composite report score: BLEU-4, ROUGE-L F1, keyword Jaccard and embedding similarity.

All text is compared after the tokenizer's normalisation (lowercase, punctuation
split) without UNK mapping, so the metrics do not depend on any vocabulary.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from mpath import kernels
from mpath.tokenizer import normalize_tokens

ROUGE_BLEU_WEIGHT = 0.15
KEY_WEIGHT = 0.4
EMB_WEIGHT = 0.3

STOPWORDS = frozenset(
    """a an and are as at be by for from in includes into is it no of on or the this
    to type was were which with without""".split()
)


@dataclass(frozen=True)
class ScoreBreakdown:
    bleu4: float
    rouge_l_f1: float
    key: float
    emb: float
    composite: float

    def as_dict(self) -> dict:
        return asdict(self)


def composite_score(rouge_l_f1: float, bleu4: float, key: float, emb: float) -> float:
    for name, v in (("rouge_l_f1", rouge_l_f1), ("bleu4", bleu4), ("key", key), ("emb", emb)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v!r} outside [0, 1]")
    return ROUGE_BLEU_WEIGHT * (rouge_l_f1 + bleu4) + KEY_WEIGHT * key + EMB_WEIGHT * emb


def _intern(*seqs: Sequence[str]) -> list[list[int]]:
    table: dict[str, int] = {}
    return [[table.setdefault(t, len(table)) for t in s] for s in seqs]


# -- BLEU / ROUGE -----------------------------------------------------------


def bleu4(candidate: str, reference: str) -> float:
    """Sentence BLEU-4 with brevity penalty.

    An order with zero clipped matches has its match count replaced by
    ``1 / (2 * total)`` where ``total`` is the number of candidate n-grams of
    that order (at least 1), so short reports do not collapse to zero.
    """
    c_tok, r_tok = normalize_tokens(candidate), normalize_tokens(reference)
    if not c_tok:
        return 0.0
    c, r = _intern(c_tok, r_tok)
    log_p = 0.0
    for n in range(1, 5):
        matches, total = kernels.ngram_matches(c, r, n)
        total = max(total, 1)
        m = matches if matches > 0 else 1.0 / (2 * total)
        log_p += math.log(m / total)
    bp = math.exp(min(0.0, 1.0 - len(r) / len(c)))
    return min(1.0, bp * math.exp(log_p / 4))


def rouge_l_f1(candidate: str, reference: str) -> float:
    c_tok, r_tok = normalize_tokens(candidate), normalize_tokens(reference)
    if not c_tok and not r_tok:
        return 1.0
    if not c_tok or not r_tok:
        return 0.0
    c, r = _intern(c_tok, r_tok)
    lcs = kernels.lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


# -- keywords ---------------------------------------------------------------


@dataclass(frozen=True)
class KeywordLexicon:
    terms: frozenset[str]
    stopwords: frozenset[str] = STOPWORDS
    sha256: str = ""

    def __post_init__(self):
        if not self.terms:
            raise ValueError("keyword lexicon is empty")
        clash = self.terms & self.stopwords
        if clash:
            raise ValueError(f"lexicon terms overlap stopwords: {sorted(clash)}")

    @classmethod
    def parse(cls, text: str) -> "KeywordLexicon":
        terms = set()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                terms.add(" ".join(normalize_tokens(line)))
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return cls(frozenset(terms), STOPWORDS, digest)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "KeywordLexicon":
        if path is None:
            text = resources.files("mpath.data").joinpath("lexicon.txt").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text)


_default_lexicon: KeywordLexicon | None = None


def default_lexicon() -> KeywordLexicon:
    global _default_lexicon
    if _default_lexicon is None:
        _default_lexicon = KeywordLexicon.load()
    return _default_lexicon


def extract_keywords(text: str, lex: KeywordLexicon | None = None) -> set[str]:
    lex = lex or default_lexicon()
    toks = normalize_tokens(text)
    found = {t for t in toks if t in lex.terms and t not in lex.stopwords}
    for a, b in zip(toks, toks[1:]):
        gram = f"{a} {b}"
        if gram in lex.terms:
            found.add(gram)
    return found


def key_jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


# -- embedding similarity ---------------------------------------------------


def _trigrams(text: str) -> Counter:
    s = f" {' '.join(normalize_tokens(text))} "
    return Counter(s[i : i + 3] for i in range(len(s) - 2))


def trigram_similarity(candidate: str, reference: str) -> float:
    a, b = _trigrams(candidate), _trigrams(reference)
    if a == b:
        return 1.0
    dot = sum(v * b[k] for k, v in a.items())
    if dot == 0:
        return 0.0
    na = sum(v * v for v in a.values())
    nb = sum(v * v for v in b.values())
    # integer norms keep identical inputs at exactly 1.0
    return max(0.0, min(1.0, dot / math.sqrt(na * nb)))


class TokenEmbeddingBackend:
    """Cosine of mean-pooled token embeddings taken from a model checkpoint."""

    name = "model"

    def __init__(self, embeddings: np.ndarray, vocab):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.vocab = vocab

    def vector(self, text: str) -> np.ndarray:
        from mpath.tokenizer import encode

        ids = encode(text, self.vocab, add_specials=False)
        if not ids:
            return np.zeros(self.embeddings.shape[1])
        return self.embeddings[ids].mean(axis=0)

    def __call__(self, candidate: str, reference: str) -> float:
        if normalize_tokens(candidate) == normalize_tokens(reference):
            return 1.0
        a, b = self.vector(candidate), self.vector(reference)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0
        return float(np.clip(a @ b / (na * nb), 0.0, 1.0))

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "TokenEmbeddingBackend":
        from mpath.checkpoint import load_checkpoint

        state = load_checkpoint(path)
        return cls(state.params["tok_emb"].data, state.vocab)


EMB_BACKENDS = ("trigram", "model")


def emb_similarity(candidate: str, reference: str, backend: str | Callable = "trigram") -> float:
    if callable(backend):
        return backend(candidate, reference)
    if backend == "trigram":
        return trigram_similarity(candidate, reference)
    if backend == "model":
        raise ValueError("the 'model' backend needs a checkpoint; build a TokenEmbeddingBackend")
    raise ValueError(f"unknown embedding backend {backend!r}; choose from {EMB_BACKENDS}")


# -- scoring ----------------------------------------------------------------


@dataclass
class CorpusScore:
    mean: ScoreBreakdown
    pairs: list[tuple[str, ScoreBreakdown]]
    backend: dict

    def to_json(self) -> str:
        obj = {
            "mean": self.mean.as_dict(),
            "pairs": [{"id": pid, **b.as_dict()} for pid, b in self.pairs],
            "backend": self.backend,
        }
        return json.dumps(obj, indent=2, sort_keys=True)


class Scorer:
    def __init__(self, lexicon: KeywordLexicon | None = None, emb_backend: str | Callable = "trigram"):
        self.lexicon = lexicon or default_lexicon()
        if not callable(emb_backend) and emb_backend != "trigram":
            emb_similarity("", "", emb_backend)  # raises with a helpful message
        self.emb_backend = emb_backend

    @property
    def emb_id(self) -> str:
        return getattr(self.emb_backend, "name", None) or str(self.emb_backend)

    def score(self, candidate: str, reference: str) -> ScoreBreakdown:
        b = bleu4(candidate, reference)
        r = rouge_l_f1(candidate, reference)
        k = key_jaccard(extract_keywords(candidate, self.lexicon), extract_keywords(reference, self.lexicon))
        e = emb_similarity(candidate, reference, self.emb_backend)
        return ScoreBreakdown(b, r, k, e, composite_score(r, b, k, e))

    def score_corpus(self, pairs: Iterable[tuple[str, str, str]], threads: int | None = None) -> CorpusScore:
        """Score ``(id, generated, reference)`` triples; output keeps input order."""
        pairs = list(pairs)
        if threads is None:
            threads = int(os.environ.get("MPATH_THREADS", "1") or 1)
        work = lambda p: self.score(p[1], p[2])  # noqa: E731
        if threads > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, pairs))
        else:
            results = [work(p) for p in pairs]
        if results:
            cols = np.array([[s.bleu4, s.rouge_l_f1, s.key, s.emb, s.composite] for s in results])
            mean = ScoreBreakdown(*(float(x) for x in cols.mean(axis=0)))
        else:
            mean = ScoreBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
        backend = {"emb": self.emb_id, "lexicon": self.lexicon.sha256, "kernels": kernels.BACKEND}
        return CorpusScore(mean, [(p[0], s) for p, s in zip(pairs, results)], backend)


def read_pairs(path: str | Path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                out.append((str(obj["id"]), obj["generated"], obj["reference"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{n}: missing field {exc}") from None
    return out
