"""Task-format conversion: kept region-text pairs to masks and sample sets.

``rec_to_res`` turns each kept pair into a segmentation mask via the
segmenter client.  ``make_multi_target`` merges low-overlap pairs of one
image into multi-target samples; ``make_no_target`` moves captions to
images whose detected categories are disjoint from the caption's, so the
moved caption provably refers to nothing there.  The combined sample set
serializes to a JSONL manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .clients.contracts import RleMask, Segmenter
from .core import RegionTextPair, Status, iou
from .errors import BackendError, ConfigError, DataError, StorageError

log = logging.getLogger(__name__)

GRES_SCHEMA = "d2af_gres_v1"
RES_SCHEMA = "d2af_res_v1"
SAMPLE_KINDS = ("single", "multi", "no_target")


def encode_mask(grid: np.ndarray) -> RleMask:
    """Row-major run-length encoding, alternating runs starting background."""
    if grid.ndim != 2:
        raise DataError(f"mask grid must be 2-d, got shape {grid.shape}")
    height, width = grid.shape
    flat = np.asarray(grid, dtype=bool).reshape(-1)
    counts: list[int] = []
    if flat.size:
        changes = np.flatnonzero(np.diff(flat)) + 1
        boundaries = np.concatenate([[0], changes, [flat.size]])
        runs = np.diff(boundaries)
        if flat[0]:  # first run is foreground: prepend an empty background run
            counts.append(0)
        counts.extend(int(r) for r in runs)
    return RleMask(counts=tuple(counts), width=width, height=height)


def decode_mask(mask: RleMask) -> np.ndarray:
    """Inverse of encode_mask: boolean HxW grid."""
    flat = np.zeros(mask.width * mask.height, dtype=bool)
    pos = 0
    value = False
    for run in mask.counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(mask.height, mask.width)


def mask_area(mask: RleMask) -> int:
    """Foreground pixel count, straight from the run lengths."""
    return int(sum(mask.counts[1::2]))


@dataclass(frozen=True)
class MaskRecord:
    """Segmentation result for one kept pair."""

    pair_id: str
    rle: RleMask
    area: int

    def __post_init__(self) -> None:
        if self.area != mask_area(self.rle):
            raise DataError(
                f"mask {self.pair_id}: area {self.area} != foreground count "
                f"{mask_area(self.rle)}"
            )


@dataclass(frozen=True)
class GresSample:
    """One generalized-grounding sample: a caption and zero or more targets."""

    sample_id: str
    image_id: str
    caption: str
    targets: tuple[MaskRecord, ...]
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in SAMPLE_KINDS:
            raise DataError(f"unknown sample kind {self.kind!r}")
        if (self.kind == "no_target") != (len(self.targets) == 0):
            raise DataError(
                f"sample {self.sample_id}: kind {self.kind} with "
                f"{len(self.targets)} targets"
            )
        if (self.kind == "multi") != (len(self.targets) >= 2):
            raise DataError(
                f"sample {self.sample_id}: kind {self.kind} with "
                f"{len(self.targets)} targets"
            )


@dataclass(frozen=True)
class ConvertConfig:
    max_merge: int = 3
    max_samples_per_image: int = 20
    merge_iou_max: float = 0.5
    no_target_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_merge < 2:
            raise ConfigError("max_merge must be >= 2")
        if self.max_samples_per_image < 1:
            raise ConfigError("max_samples_per_image must be >= 1")
        if not (0.0 < self.merge_iou_max <= 1.0):
            raise ConfigError("merge_iou_max must be in (0, 1]")
        if self.no_target_ratio < 0.0:
            raise ConfigError("no_target_ratio must be >= 0")


@dataclass
class ConvertMetrics:
    pairs_in: int = 0
    masks: int = 0
    segmenter_failures: int = 0
    single_samples: int = 0
    multi_samples: int = 0
    no_target_samples: int = 0
    no_target_shortfall: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(vars(self))


def _require_kept(pairs: Iterable[RegionTextPair]) -> list[RegionTextPair]:
    pairs = list(pairs)
    bad = [p.pair_id for p in pairs if p.status is not Status.KEPT]
    if bad:
        raise DataError(f"conversion needs kept pairs; got {bad[:5]}")
    return pairs


def rec_to_res(
    pairs: list[RegionTextPair],
    segmenter: Segmenter,
    metrics: ConvertMetrics | None = None,
) -> list[MaskRecord]:
    """One mask per kept pair; segmenter failures skip the pair and count."""
    pairs = _require_kept(pairs)
    metrics = metrics if metrics is not None else ConvertMetrics()
    masks = []
    for pair in pairs:
        try:
            rle = segmenter.segment(pair.image_id, pair.box, pair.caption.text)
        except BackendError as exc:
            log.warning("pair %s: segmenter failed: %s", pair.pair_id, exc)
            metrics.segmenter_failures += 1
            continue
        masks.append(MaskRecord(pair_id=pair.pair_id, rle=rle, area=mask_area(rle)))
        metrics.masks += 1
    return masks


def default_join(texts: list[str]) -> str:
    """Comma join with "and" before the last item."""
    if not texts:
        raise DataError("cannot join an empty caption list")
    if len(texts) == 1:
        return texts[0]
    return ", ".join(texts[:-1]) + " and " + texts[-1]


def make_multi_target(
    pairs: list[RegionTextPair],
    masks: dict[str, MaskRecord],
    cfg: ConvertConfig,
    join_policy: Callable[[list[str]], str] = default_join,
) -> list[GresSample]:
    """Merge 2..max_merge low-overlap kept pairs per image into one sample.

    Eligible combinations have every member pair of boxes below
    ``merge_iou_max`` IoU; per image, at most ``max_samples_per_image``
    combinations survive, chosen by seeded sampling over the deterministic
    enumeration order.
    """
    pairs = _require_kept(pairs)
    by_image: dict[str, list[RegionTextPair]] = {}
    for pair in pairs:
        if pair.pair_id in masks:
            by_image.setdefault(pair.image_id, []).append(pair)
    samples = []
    for image_id in sorted(by_image):
        members = sorted(by_image[image_id], key=lambda p: p.pair_id)
        combos = []
        for size in range(2, cfg.max_merge + 1):
            for combo in combinations(members, size):
                if all(
                    iou(a.box, b.box) < cfg.merge_iou_max
                    for a, b in combinations(combo, 2)
                ):
                    combos.append(combo)
        if len(combos) > cfg.max_samples_per_image:
            rng = np.random.default_rng((cfg.seed, hash_image_seed(image_id)))
            chosen = sorted(
                rng.choice(len(combos), size=cfg.max_samples_per_image, replace=False)
            )
            combos = [combos[i] for i in chosen]
        for index, combo in enumerate(combos):
            samples.append(
                GresSample(
                    sample_id=f"{image_id}-m{index:04d}",
                    image_id=image_id,
                    caption=join_policy([p.caption.text for p in combo]),
                    targets=tuple(masks[p.pair_id] for p in combo),
                    kind="multi",
                )
            )
    return samples


def hash_image_seed(image_id: str) -> int:
    """Stable seed component from an image id (never Python's hash())."""
    return int.from_bytes(hashlib.blake2b(image_id.encode(), digest_size=8).digest(), "big")


def category_index_from(pairs: Iterable[RegionTextPair]) -> dict[str, set[str]]:
    """Detected-category set per image, from the pairs' annotation tags."""
    index: dict[str, set[str]] = {}
    for pair in pairs:
        index.setdefault(pair.image_id, set())
        if pair.category is not None:
            index[pair.image_id].add(pair.category)
    return index


def make_no_target(
    pairs: list[RegionTextPair],
    cfg: ConvertConfig,
    count: int,
    category_index: dict[str, set[str]] | None = None,
    image_ids: list[str] | None = None,
    metrics: ConvertMetrics | None = None,
) -> list[GresSample]:
    """Move category-tagged captions to images lacking that category.

    A donor caption lands on a receiver image only when the receiver's
    detected-category set is disjoint from the donor's category tag, so
    the caption refers to nothing in its new image.  Pairings are sampled
    without replacement with the configured seed; if fewer than ``count``
    valid pairings exist, the shortfall is counted and all are used.
    """
    pairs = _require_kept(pairs)
    metrics = metrics if metrics is not None else ConvertMetrics()
    if category_index is None:
        category_index = category_index_from(pairs)
    if image_ids is None:
        image_ids = sorted(category_index)
    donors = [p for p in sorted(pairs, key=lambda p: p.pair_id) if p.category is not None]
    pairings = [
        (donor, receiver)
        for donor in donors
        for receiver in image_ids
        if receiver != donor.image_id
        and not ({donor.category} & category_index.get(receiver, set()))
    ]
    if count > len(pairings):
        metrics.no_target_shortfall += count - len(pairings)
        count = len(pairings)
    if not pairings or count == 0:
        if count > 0 or not pairings:
            log.warning("no-target generation found %d valid pairings", len(pairings))
        return []
    rng = np.random.default_rng((cfg.seed, 0x6E74))  # fixed salt for this pass
    chosen = sorted(rng.choice(len(pairings), size=count, replace=False))
    samples = []
    per_receiver: dict[str, int] = {}
    for i in chosen:
        donor, receiver = pairings[i]
        serial = per_receiver.get(receiver, 0)
        per_receiver[receiver] = serial + 1
        samples.append(
            GresSample(
                sample_id=f"{receiver}-n{serial:04d}",
                image_id=receiver,
                caption=donor.caption.text,
                targets=(),
                kind="no_target",
            )
        )
    return samples


def run_conversion(
    pairs: list[RegionTextPair],
    segmenter: Segmenter,
    cfg: ConvertConfig,
    image_ids: list[str] | None = None,
) -> tuple[list[MaskRecord], list[GresSample], ConvertMetrics]:
    """Full conversion: masks, then single/multi/no-target samples.

    Caption swaps judge category absence against every input pair, not
    just the kept ones: a pair dropped by a filter still proves its
    category was detected on its image, so that image must not receive
    swapped captions of the same category.
    """
    kept = [p for p in pairs if p.status is Status.KEPT]
    category_index = category_index_from(pairs)
    metrics = ConvertMetrics(pairs_in=len(pairs))
    masks = rec_to_res(kept, segmenter, metrics)
    mask_by_id = {m.pair_id: m for m in masks}
    singles = [
        GresSample(
            sample_id=f"s-{p.pair_id}",
            image_id=p.image_id,
            caption=p.caption.text,
            targets=(mask_by_id[p.pair_id],),
            kind="single",
        )
        for p in kept
        if p.pair_id in mask_by_id
    ]
    multis = make_multi_target(kept, mask_by_id, cfg)
    no_target_count = int(round(cfg.no_target_ratio * len(multis)))
    no_targets = make_no_target(
        kept,
        cfg,
        no_target_count,
        category_index=category_index,
        image_ids=image_ids,
        metrics=metrics,
    )
    metrics.single_samples = len(singles)
    metrics.multi_samples = len(multis)
    metrics.no_target_samples = len(no_targets)
    return masks, singles + multis + no_targets, metrics


# -- serialization -----------------------------------------------------


def sample_to_dict(sample: GresSample) -> dict:
    return {
        "schema": GRES_SCHEMA,
        "sample_id": sample.sample_id,
        "image_id": sample.image_id,
        "caption": sample.caption,
        "kind": sample.kind,
        "targets": [
            {
                "pair_id": t.pair_id,
                "width": t.rle.width,
                "height": t.rle.height,
                "area": t.area,
                "counts": list(t.rle.counts),
            }
            for t in sample.targets
        ],
    }


def sample_from_dict(data: dict) -> GresSample:
    if data.get("schema") != GRES_SCHEMA:
        raise DataError(f"expected schema {GRES_SCHEMA!r}, got {data.get('schema')!r}")
    targets = tuple(
        MaskRecord(
            pair_id=t["pair_id"],
            rle=RleMask(
                counts=tuple(t["counts"]), width=t["width"], height=t["height"]
            ),
            area=t["area"],
        )
        for t in data["targets"]
    )
    return GresSample(
        sample_id=data["sample_id"],
        image_id=data["image_id"],
        caption=data["caption"],
        targets=targets,
        kind=data["kind"],
    )


def write_gres_jsonl(samples: list[GresSample], path: Path | str) -> None:
    """One sample per line, LF endings, fixed key order."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for sample in samples:
                fh.write(json.dumps(sample_to_dict(sample), separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write samples to {path}: {exc}") from exc


def read_gres_jsonl(path: Path | str) -> list[GresSample]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read samples from {path}: {exc}") from exc
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            samples.append(sample_from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad sample line: {exc}") from exc
    return samples


def mask_to_dict(record: MaskRecord) -> dict:
    return {
        "schema": RES_SCHEMA,
        "pair_id": record.pair_id,
        "width": record.rle.width,
        "height": record.rle.height,
        "area": record.area,
        "counts": list(record.rle.counts),
    }


def mask_from_dict(data: dict) -> MaskRecord:
    if data.get("schema") != RES_SCHEMA:
        raise DataError(f"expected schema {RES_SCHEMA!r}, got {data.get('schema')!r}")
    return MaskRecord(
        pair_id=data["pair_id"],
        rle=RleMask(
            counts=tuple(data["counts"]), width=data["width"], height=data["height"]
        ),
        area=data["area"],
    )


def write_res_jsonl(masks: list[MaskRecord], path: Path | str) -> None:
    """One mask record per line, LF endings, fixed key order."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for record in masks:
                fh.write(json.dumps(mask_to_dict(record), separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write masks to {path}: {exc}") from exc


def read_res_jsonl(path: Path | str) -> list[MaskRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read masks from {path}: {exc}") from exc
    masks = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            masks.append(mask_from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad mask line: {exc}") from exc
    return masks
