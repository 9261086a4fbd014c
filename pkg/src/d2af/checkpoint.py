"""Stage checkpoints: crash-safe progress records for resumable runs.

A checkpoint remembers which work units a stage already finished, under
which configuration.  Writes go through a temp file plus atomic rename,
so a killed process leaves either the old checkpoint or the new one,
never a torn file.  Resuming under a different configuration hash is
refused outright — silently mixing outputs of two configs would corrupt
the run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CheckpointError

CHECKPOINT_SCHEMA = "d2af_checkpoint_v1"


@dataclass
class StageCheckpoint:
    """Progress of one pipeline stage: finished unit ids plus counters."""

    stage: str
    config_hash: str
    processed: list[str] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)
    complete: bool = False

    def __post_init__(self) -> None:
        self._seen = set(self.processed)

    def is_processed(self, unit_id: str) -> bool:
        return unit_id in self._seen

    def mark(self, unit_id: str) -> None:
        if unit_id not in self._seen:
            self._seen.add(unit_id)
            self.processed.append(unit_id)

    def bump(self, counter: str, amount: int = 1) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + amount


def save_checkpoint(cp: StageCheckpoint, path: Path | str) -> None:
    """Persist atomically: write a sibling temp file, then rename over."""
    path = Path(path)
    body = json.dumps(
        {
            "schema": CHECKPOINT_SCHEMA,
            "stage": cp.stage,
            "config_hash": cp.config_hash,
            "processed": cp.processed,
            "counters": dict(sorted(cp.counters.items())),
            "complete": cp.complete,
        },
        separators=(",", ":"),
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(body + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Path | str) -> StageCheckpoint:
    path = Path(path)
    try:
        row = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(row, dict) or row.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema in {path}")
    try:
        return StageCheckpoint(
            stage=row["stage"],
            config_hash=row["config_hash"],
            processed=list(row["processed"]),
            counters=dict(row["counters"]),
            complete=bool(row["complete"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc


def resume_stage(path: Path | str, stage: str, config_hash: str) -> StageCheckpoint:
    """Load a checkpoint to continue a stage, or start a fresh one.

    A checkpoint for a different stage or configuration hash is refused
    rather than reused.
    """
    path = Path(path)
    if not path.exists():
        return StageCheckpoint(stage=stage, config_hash=config_hash)
    cp = load_checkpoint(path)
    if cp.stage != stage:
        raise CheckpointError(
            f"checkpoint {path} belongs to stage {cp.stage!r}, not {stage!r}"
        )
    if cp.config_hash != config_hash:
        raise CheckpointError(
            f"refusing to resume {stage!r}: configuration changed "
            f"(checkpoint hash {cp.config_hash}, current {config_hash}); "
            "delete the checkpoint to start over"
        )
    return cp
