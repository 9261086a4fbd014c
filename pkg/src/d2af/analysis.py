"""Caption taxonomy, quantity reports, and feature exports.

Captions are labeled along two axes: what they describe (intrinsic
attributes, relations to other things, absolute or relative position)
and what they refer to (a person, some other object, or nothing
nameable).  The default tagger is a deterministic lexicon classifier
whose keyword lists ship as editable data files; any model-backed tagger
implementing the same protocol can be plugged in at runtime, with the
lexicon tagger as the failure fallback.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

from .clients.contracts import TextEmbedder
from .core import RegionTextPair, Strategy, length_band, word_count
from .errors import DataError, PipelineError, StorageError

REFERENTS = ("person", "object", "no_object")
LENGTH_CLASSES = ("short", "mid", "long")
FLAG_NAMES = ("intrinsic", "relative", "absolute_position", "relative_position")

LEXICON_FILES = {
    "absolute_position": "absolute_position.txt",
    "relative_position": "relative_position.txt",
    "comparative": "comparative.txt",
    "attributes": "attributes.txt",
    "person_nouns": "person_nouns.txt",
    "stopwords": "stopwords.txt",
}


@dataclass(frozen=True)
class SubsetLabels:
    """Per-caption taxonomy labels; flags may overlap, referent is unique."""

    intrinsic: bool
    relative: bool
    absolute_position: bool
    relative_position: bool
    referent: str
    length_class: str

    def __post_init__(self) -> None:
        if self.referent not in REFERENTS:
            raise DataError(f"unknown referent {self.referent!r}")
        if self.length_class not in LENGTH_CLASSES:
            raise DataError(f"unknown length class {self.length_class!r}")


@runtime_checkable
class Tagger(Protocol):
    name: str

    def labels(self, text: str) -> SubsetLabels: ...

    def nouns(self, text: str) -> list[str]: ...


def _tokenize(text: str) -> list[str]:
    return [t.strip(".,!?;:'\"()[]") for t in text.lower().split() if t.strip(".,!?;:'\"()[]")]


class RuleTagger:
    """Deterministic keyword-list classifier.

    Lexicons come from the packaged data files by default, or from a
    directory holding files with the same names.  A token counts as a
    noun when it belongs to no closed-class list and does not look like a
    comparative form; person nouns are nouns too.
    """

    name = "rule-lexicon-v1"

    def __init__(self, lexicon_dir: Path | str | None = None):
        self._lex: dict[str, frozenset[str]] = {}
        for key, filename in LEXICON_FILES.items():
            if lexicon_dir is None:
                text = (
                    resources.files("d2af").joinpath(f"data/lexicons/{filename}").read_text("utf-8")
                )
            else:
                path = Path(lexicon_dir) / filename
                if not path.is_file():
                    raise DataError(f"lexicon file missing: {path}")
                text = path.read_text("utf-8")
            words = frozenset(w.strip().lower() for w in text.splitlines() if w.strip())
            if not words:
                raise DataError(f"lexicon {filename!r} is empty")
            self._lex[key] = words
        self._closed_class = (
            self._lex["stopwords"]
            | self._lex["absolute_position"]
            | self._lex["relative_position"]
            | self._lex["comparative"]
            | self._lex["attributes"]
        )

    def _looks_comparative(self, token: str) -> bool:
        if token in self._closed_class or token in self._lex["person_nouns"]:
            return False
        return len(token) >= 5 and (token.endswith("er") or token.endswith("est"))

    def nouns(self, text: str) -> list[str]:
        return [
            t
            for t in _tokenize(text)
            if t not in self._closed_class and not self._looks_comparative(t)
        ]

    def labels(self, text: str) -> SubsetLabels:
        tokens = _tokenize(text)
        token_set = set(tokens)
        nouns = self.nouns(text)
        if token_set & self._lex["person_nouns"]:
            referent = "person"
        elif nouns:
            referent = "object"
        else:
            referent = "no_object"
        return SubsetLabels(
            intrinsic=bool(token_set & self._lex["attributes"]),
            relative=bool(
                token_set & self._lex["comparative"]
                or any(self._looks_comparative(t) for t in tokens)
            ),
            absolute_position=bool(token_set & self._lex["absolute_position"]),
            relative_position=bool(token_set & self._lex["relative_position"]),
            referent=referent,
            length_class=length_band(word_count(text)),
        )


class FallbackTagger:
    """Wraps a primary tagger; on failure falls back to a backup and counts it."""

    def __init__(self, primary: Tagger, fallback: Tagger):
        self.primary = primary
        self.fallback = fallback
        self.fallback_count = 0

    @property
    def name(self) -> str:
        return f"{self.primary.name}+fallback:{self.fallback.name}"

    def labels(self, text: str) -> SubsetLabels:
        try:
            return self.primary.labels(text)
        except PipelineError:
            self.fallback_count += 1
            return self.fallback.labels(text)

    def nouns(self, text: str) -> list[str]:
        try:
            return self.primary.nouns(text)
        except PipelineError:
            self.fallback_count += 1
            return self.fallback.nouns(text)


def classify_length(text: str) -> str:
    """Length band of a caption text; empty text lands in ``short``."""
    return length_band(word_count(text))


@dataclass(frozen=True)
class NounVocabulary:
    nouns: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.nouns)


def noun_vocabulary(pairs: Iterable[RegionTextPair], tagger: Tagger) -> NounVocabulary:
    """Distinct nouns across all captions, sorted."""
    seen: set[str] = set()
    for pair in pairs:
        seen.update(tagger.nouns(pair.caption.text))
    return NounVocabulary(nouns=tuple(sorted(seen)))


@dataclass
class ManifestStats:
    """Subset counts for one named manifest."""

    name: str
    total: int
    by_length: dict[str, int]
    by_flag: dict[str, int]
    by_referent: dict[str, int]
    by_strategy: dict[str, int]
    noun_vocabulary_size: int
    empty_captions: int

    def __post_init__(self) -> None:
        if sum(self.by_length.values()) != self.total:
            raise DataError(
                f"length classes must partition manifest {self.name!r}: "
                f"{self.by_length} vs total {self.total}"
            )

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "total": self.total,
            "by_length": dict(self.by_length),
            "by_flag": dict(self.by_flag),
            "by_referent": dict(self.by_referent),
            "by_strategy": dict(self.by_strategy),
            "noun_vocabulary_size": self.noun_vocabulary_size,
            "empty_captions": self.empty_captions,
        }


@dataclass
class QuantityReport:
    tagger_name: str
    manifests: list[ManifestStats]
    deltas: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "tagger": self.tagger_name,
            "manifests": [m.as_dict() for m in self.manifests],
            "deltas": dict(self.deltas),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def render_table(self) -> str:
        """Aligned plain-text table, one manifest per column."""
        rows = [("subset", *[m.name for m in self.manifests])]
        rows.append(("total", *[str(m.total) for m in self.manifests]))
        for band in LENGTH_CLASSES:
            rows.append((band, *[str(m.by_length[band]) for m in self.manifests]))
        for flag in FLAG_NAMES:
            rows.append((flag, *[str(m.by_flag[flag]) for m in self.manifests]))
        for ref in REFERENTS:
            rows.append((ref, *[str(m.by_referent[ref]) for m in self.manifests]))
        for strat in (Strategy.CLOSED_SET.value, Strategy.OPEN_SET.value):
            rows.append((strat, *[str(m.by_strategy[strat]) for m in self.manifests]))
        rows.append(("noun_vocab", *[str(m.noun_vocabulary_size) for m in self.manifests]))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def manifest_stats(name: str, pairs: list[RegionTextPair], tagger: Tagger) -> ManifestStats:
    by_length = Counter({band: 0 for band in LENGTH_CLASSES})
    by_flag = Counter({flag: 0 for flag in FLAG_NAMES})
    by_referent = Counter({ref: 0 for ref in REFERENTS})
    by_strategy = Counter({Strategy.CLOSED_SET.value: 0, Strategy.OPEN_SET.value: 0})
    empty = 0
    for pair in pairs:
        labels = tagger.labels(pair.caption.text)
        by_length[labels.length_class] += 1
        for flag in FLAG_NAMES:
            if getattr(labels, flag):
                by_flag[flag] += 1
        by_referent[labels.referent] += 1
        by_strategy[pair.strategy.value] += 1
        if word_count(pair.caption.text) == 0:
            empty += 1
    return ManifestStats(
        name=name,
        total=len(pairs),
        by_length=dict(by_length),
        by_flag=dict(by_flag),
        by_referent=dict(by_referent),
        by_strategy=dict(by_strategy),
        noun_vocabulary_size=noun_vocabulary(pairs, tagger).size,
        empty_captions=empty,
    )


def quantity_report(
    manifests: list[tuple[str, list[RegionTextPair]]], tagger: Tagger | None = None
) -> QuantityReport:
    """Subset counts for each named manifest, plus last-vs-first deltas."""
    tagger = tagger or RuleTagger()
    stats = [manifest_stats(name, pairs, tagger) for name, pairs in manifests]
    deltas: dict[str, int] = {}
    if len(stats) >= 2:
        first, last = stats[0], stats[-1]
        deltas["total"] = last.total - first.total
        for band in LENGTH_CLASSES:
            deltas[f"length.{band}"] = last.by_length[band] - first.by_length[band]
        for flag in FLAG_NAMES:
            deltas[f"flag.{flag}"] = last.by_flag[flag] - first.by_flag[flag]
        for ref in REFERENTS:
            deltas[f"referent.{ref}"] = last.by_referent[ref] - first.by_referent[ref]
        deltas["noun_vocabulary_size"] = (
            last.noun_vocabulary_size - first.noun_vocabulary_size
        )
    return QuantityReport(tagger_name=tagger.name, manifests=stats, deltas=deltas)


def export_features(
    pairs: list[RegionTextPair],
    embedder: TextEmbedder,
    out_path: Path | str,
    tagger: Tagger | None = None,
) -> int:
    """Write one CSV row per pair: id, taxonomy labels, embedding components.

    Deterministic: the same pairs and embedder produce a byte-identical
    file.  Returns the number of data rows written.
    """
    tagger = tagger or RuleTagger()
    if pairs:
        dim = embedder.embed(pairs[0].caption.text).dimension
    else:
        dim = embedder.embed("feature dimension probe").dimension
    header = (
        ["pair_id", *FLAG_NAMES, "referent", "length_class"]
        + [f"v{i}" for i in range(dim)]
    )
    lines = [",".join(header)]
    for pair in pairs:
        labels = tagger.labels(pair.caption.text)
        vector = embedder.embed(pair.caption.text).vector
        row = [pair.pair_id]
        row += [str(int(getattr(labels, flag))) for flag in FLAG_NAMES]
        row += [labels.referent, labels.length_class]
        row += [repr(float(v)) for v in vector]
        lines.append(",".join(row))
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write feature export to {out_path}: {exc}") from exc
    return len(pairs)
