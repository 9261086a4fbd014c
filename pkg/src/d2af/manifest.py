"""Manifest persistence: region-text pairs as line-delimited JSON.

One pair per line, UTF-8, LF terminated, keys in a fixed order so equal
inputs always serialize to byte-identical files.  Every record carries a
schema version field so readers can reject files they do not understand.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Iterable

from .core import (
    BoundingBox,
    Caption,
    RegionTextPair,
    ScoreRecord,
    Status,
    Strategy,
)
from .errors import DataError, StorageError

MANIFEST_SCHEMA = "d2af_manifest_v1"

_SCORE_FIELDS = ("iou_lmm", "iou_det", "s_intr", "s_rela", "s_final", "log_density")


def pair_to_dict(pair: RegionTextPair) -> dict:
    """Serialize one pair with a fixed key order (insertion order below)."""
    return {
        "schema": MANIFEST_SCHEMA,
        "pair_id": pair.pair_id,
        "image_id": pair.image_id,
        "strategy": pair.strategy.value,
        "status": pair.status.value,
        "category": pair.category,
        "box": pair.box.as_list(),
        "caption": {
            "text": pair.caption.text,
            "n_words": pair.caption.n_words,
            "band": pair.caption.band,
        },
        "scores": {name: getattr(pair.scores, name) for name in _SCORE_FIELDS},
    }


def pair_from_dict(row: dict) -> RegionTextPair:
    """Parse one serialized pair, revalidating every invariant."""
    if not isinstance(row, dict):
        raise DataError(f"manifest row is not an object: {type(row).__name__}")
    schema = row.get("schema")
    if schema != MANIFEST_SCHEMA:
        raise DataError(f"unsupported manifest schema: {schema!r}")
    try:
        strategy = Strategy(row["strategy"])
        status = Status(row["status"])
        caption_row = row["caption"]
        caption = Caption(
            text=caption_row["text"],
            n_words=caption_row["n_words"],
            band=caption_row["band"],
        )
        scores_row = row["scores"]
        scores = ScoreRecord(**{name: scores_row[name] for name in _SCORE_FIELDS})
        return RegionTextPair(
            pair_id=row["pair_id"],
            image_id=row["image_id"],
            caption=caption,
            box=BoundingBox.from_list(row["box"]),
            strategy=strategy,
            status=status,
            scores=scores,
            category=row["category"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad manifest row: {exc}") from exc


def dumps_pair(pair: RegionTextPair) -> str:
    """One pair as a compact single-line JSON string (no newline)."""
    try:
        return json.dumps(
            pair_to_dict(pair), separators=(",", ":"), ensure_ascii=False,
            allow_nan=False,
        )
    except ValueError as exc:
        raise DataError(f"pair {pair.pair_id}: not JSON-serializable: {exc}") from exc


def write_manifest(pairs: Iterable[RegionTextPair], path: Path | str) -> int:
    """Write pairs to ``path`` (LF line endings); returns the row count."""
    path = Path(path)
    lines = [dumps_pair(p) for p in pairs]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
    except OSError as exc:
        raise StorageError(f"could not write manifest {path}: {exc}") from exc
    return len(lines)


def read_manifest(path: Path | str) -> list[RegionTextPair]:
    """Read a manifest back; parse errors name the file and line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"could not read manifest {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            pairs.append(pair_from_dict(row))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def status_counts(pairs: Iterable[RegionTextPair]) -> dict[str, int]:
    """Pair count per lifecycle status, every status always present."""
    counter = Counter(p.status.value for p in pairs)
    return {status.value: counter.get(status.value, 0) for status in Status}
