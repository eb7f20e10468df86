"""Pathology report grammar and the synthetic paired corpus.

Reports follow ``<Organ>, <sample type>; <findings>[ Note) <note>]`` where the
findings are either a single clause or a numbered list ``1. ... 2. ...``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ORGANS = ("breast", "bladder", "cervix", "colon", "lung", "prostate", "stomach")
DEFAULT_DV = 768

_WS = re.compile(r"\s+")
_NOTE = re.compile(r"(?:^|\s)Note\)\s*", re.IGNORECASE)
_ITEM = re.compile(r"(?:^|(?<=\s))(\d+)\.\s+")


class MalformedReport(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _squash(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class StructuredReport:
    organ: str
    sample_type: str
    findings: tuple[str, ...]
    note: str | None = None

    def __post_init__(self):
        if self.organ not in ORGANS:
            raise ValueError(f"unknown organ {self.organ!r}")
        if not self.findings:
            raise ValueError("a report needs at least one finding")
        object.__setattr__(self, "findings", tuple(self.findings))


# ---------------------------------------------------------------------------
# taxonomy


@dataclass
class Taxonomy:
    """Organ-compatible sample types and findings, plus label index spaces."""

    organs: list[dict]
    sample_types: list[str] = field(init=False)
    findings: list[str] = field(init=False)
    display: dict[str, str] = field(init=False)
    aliases: dict[str, str] = field(init=False)

    def __post_init__(self):
        by_name = {o["name"]: o for o in self.organs}
        missing = [o for o in ORGANS if o not in by_name]
        if missing:
            raise ValueError(f"taxonomy has no entry for organ(s): {', '.join(missing)}")
        self.organs = [by_name[o] for o in ORGANS]
        for o in self.organs:
            if not o.get("sample_types") or not o.get("findings"):
                raise ValueError(f"taxonomy entry for {o['name']} lacks sample types or findings")
        self.sample_types = _unique(s["name"] for o in self.organs for s in o["sample_types"])
        self.findings = _unique(f for o in self.organs for f in o["findings"])
        self.display = {o["name"]: o.get("display", o["name"].capitalize()) for o in self.organs}
        self.aliases = {}
        for o in self.organs:
            for alias in [o["name"], o.get("display", o["name"]), *o.get("aliases", [])]:
                self.aliases[alias.lower()] = o["name"]

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Taxonomy":
        if path is None:
            text = resources.files("mpath.data").joinpath("taxonomy.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(json.loads(text)["organs"])

    def organ_entry(self, organ: str) -> dict:
        return self.organs[ORGANS.index(organ)]

    def note_for(self, organ: str, sample_type: str) -> str | None:
        for s in self.organ_entry(organ)["sample_types"]:
            if s["name"] == sample_type:
                return s.get("note")
        return None

    def labels_of(self, report: StructuredReport) -> "Labels":
        return Labels(
            ORGANS.index(report.organ),
            self.sample_types.index(report.sample_type),
            tuple(sorted(self.findings.index(f) for f in report.findings)),
        )

    @property
    def n_label_dims(self) -> int:
        return len(ORGANS) + len(self.sample_types) + len(self.findings)


def _unique(items: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(items))


@lru_cache(maxsize=4)
def default_taxonomy() -> Taxonomy:
    return Taxonomy.load()


# ---------------------------------------------------------------------------
# grammar


def parse_report(text: str, taxonomy: Taxonomy | None = None) -> StructuredReport:
    aliases = (taxonomy or default_taxonomy()).aliases
    semi = text.find(";")
    if semi < 0:
        raise MalformedReport("missing ';' between header and findings", len(text.encode()))
    header, body = text[:semi], text[semi + 1 :]
    comma = header.find(",")
    if comma < 0:
        raise MalformedReport("header lacks ', ' between organ and sample type", _boff(text, semi))
    organ_text = _squash(header[:comma]).lower()
    organ = aliases.get(organ_text)
    if organ is None:
        raise MalformedReport(f"unrecognized organ {organ_text!r}", _boff(text, len(text) - len(text.lstrip())))
    sample_type = _squash(header[comma + 1 :])

    note = None
    m = _NOTE.search(body)
    if m:
        note = _squash(body[m.end() :]) or None
        body = body[: m.start()]
    body = _squash(body)
    findings = _split_numbered(body)
    if not findings:
        raise MalformedReport("no findings after ';'", _boff(text, semi + 1))
    return StructuredReport(organ, sample_type, tuple(findings), note)


def _boff(text: str, char_index: int) -> int:
    return len(text[:char_index].encode())


def _split_numbered(body: str) -> list[str]:
    if not body:
        return []
    if not re.match(r"1\.\s", body):
        return [body]
    cuts = []
    expected = 1
    for m in _ITEM.finditer(body):
        if int(m.group(1)) == expected:
            cuts.append((m.start(), m.end()))
            expected += 1
    items = []
    for i, (_, end) in enumerate(cuts):
        stop = cuts[i + 1][0] if i + 1 < len(cuts) else len(body)
        item = body[end:stop].strip()
        if item:
            items.append(item)
    return items


def render_report(r: StructuredReport, taxonomy: Taxonomy | None = None) -> str:
    display = (taxonomy or default_taxonomy()).display[r.organ]
    if len(r.findings) == 1:
        body = r.findings[0]
    else:
        body = " ".join(f"{i}. {f}" for i, f in enumerate(r.findings, 1))
    text = f"{display}, {r.sample_type}; {body}"
    if r.note:
        text += f" Note) {r.note}"
    return text


def canonicalize(text: str, taxonomy: Taxonomy | None = None) -> str:
    return render_report(parse_report(text, taxonomy), taxonomy)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class Labels:
    organ: int
    sample_type: int
    findings: tuple[int, ...]


@dataclass
class PairedSample:
    id: str
    features: np.ndarray
    report_text: str
    labels: Labels
    report: StructuredReport

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "features": [float(x) for x in self.features.astype(np.float32)],
            "report": self.report_text,
            "organ": self.report.organ,
            "sample_type": self.report.sample_type,
            "findings": list(self.report.findings),
        }
        if self.report.note is not None:
            obj["note"] = self.report.note
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str, taxonomy: Taxonomy | None = None) -> "PairedSample":
        taxonomy = taxonomy or default_taxonomy()
        obj = json.loads(line)
        report = StructuredReport(obj["organ"], obj["sample_type"], tuple(obj["findings"]), obj.get("note"))
        return cls(
            obj["id"],
            np.asarray(obj["features"], dtype=np.float32),
            obj["report"],
            taxonomy.labels_of(report),
            report,
        )


@dataclass
class CorpusConfig:
    n_samples: int = 1000
    d_v: int = DEFAULT_DV
    noise_sigma: float = 0.1
    seed: int = 7
    taxonomy_path: str | None = None

    def __post_init__(self):
        if self.n_samples < 10:
            raise ValueError("n_samples must be >= 10")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.d_v < 1:
            raise ValueError("d_v must be positive")

    def taxonomy(self) -> Taxonomy:
        return Taxonomy.load(self.taxonomy_path) if self.taxonomy_path else default_taxonomy()


_PROJECTION_STREAM = 0x5EED_F00D


@lru_cache(maxsize=8)
def _projection(seed: int, n_in: int, d_v: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _PROJECTION_STREAM])
    return rng.standard_normal((n_in, d_v))


def label_vector(labels: Labels, taxonomy: Taxonomy) -> np.ndarray:
    """organ one-hot | sample-type one-hot | findings multi-hot."""
    n_o, n_s = len(ORGANS), len(taxonomy.sample_types)
    v = np.zeros(taxonomy.n_label_dims)
    v[labels.organ] = 1.0
    v[n_o + labels.sample_type] = 1.0
    v[[n_o + n_s + f for f in labels.findings]] = 1.0
    return v


def make_feature_vector(
    labels: Labels,
    cfg: CorpusConfig,
    rng: np.random.Generator | None = None,
    taxonomy: Taxonomy | None = None,
) -> np.ndarray:
    """Seeded random projection of the label blocks, plus noise, L2-normalised."""
    taxonomy = taxonomy or cfg.taxonomy()
    proj = _projection(cfg.seed, taxonomy.n_label_dims, cfg.d_v)
    v = label_vector(labels, taxonomy) @ proj
    if cfg.noise_sigma > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_sigma > 0")
        v = v + rng.normal(0.0, cfg.noise_sigma, size=cfg.d_v)
    return (v / np.linalg.norm(v)).astype(np.float32)


def draw_report(rng: np.random.Generator, taxonomy: Taxonomy) -> StructuredReport:
    organ = ORGANS[int(rng.integers(len(ORGANS)))]
    entry = taxonomy.organ_entry(organ)
    sample = entry["sample_types"][int(rng.integers(len(entry["sample_types"])))]["name"]
    pool = entry["findings"]
    k = int(rng.integers(1, min(3, len(pool)) + 1))
    picked = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
    return StructuredReport(organ, sample, tuple(pool[i] for i in picked), taxonomy.note_for(organ, sample))


def synthesize_corpus(cfg: CorpusConfig) -> list[PairedSample]:
    taxonomy = cfg.taxonomy()
    samples = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, i])
        report = draw_report(rng, taxonomy)
        labels = taxonomy.labels_of(report)
        feats = make_feature_vector(labels, cfg, rng, taxonomy)
        samples.append(PairedSample(f"syn-{cfg.seed}-{i:06d}", feats, render_report(report, taxonomy), labels, report))
    return samples


def write_corpus(samples: Sequence[PairedSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_corpus(path: str | Path, taxonomy: Taxonomy | None = None) -> list[PairedSample]:
    with open(path, encoding="utf-8") as fh:
        return [PairedSample.from_json(line, taxonomy) for line in fh if line.strip()]
