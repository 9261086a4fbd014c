"""Dual annotation strategies producing raw region-text pairs.

The closed-set path detects instances of known categories and captions
each box at three target lengths; the open-set path asks for free-form
object descriptions and localizes each one.  Both emit raw pairs that the
filter stages later judge; nothing here is filtered beyond confidence
floors and duplicate removal.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .clients.contracts import (
    REQUIRED_SLOTS,
    CaptionRequest,
    ClientBundle,
    GroundingRequest,
)
from .core import (
    BoundingBox,
    Caption,
    ImageRecord,
    RegionTextPair,
    Status,
    Strategy,
    clamp_to_image,
)
from .errors import BackendError, ConfigError, DataError
from .imageio import ImageSource

log = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class CategoryList:
    """Ordered, duplicate-free list of closed-vocabulary category names."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.names:
            raise ConfigError("category list is empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("category list has duplicate names")
        if any(not n.strip() for n in self.names):
            raise ConfigError("category list has blank names")

    @classmethod
    def from_file(cls, path: Path) -> "CategoryList":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read category file {path}: {exc}") from exc
        return cls(tuple(line.strip() for line in lines if line.strip()))

    @classmethod
    def default(cls) -> "CategoryList":
        text = resources.files("d2af").joinpath("data/categories.txt").read_text("utf-8")
        return cls(tuple(line.strip() for line in text.splitlines() if line.strip()))

    def joined(self) -> str:
        return ", ".join(self.names)


class TemplateStore:
    """Prompt templates loaded from plain-text files, one per template name.

    Every template must use exactly the placeholders its role requires;
    that is checked at load time so a bad template fails fast rather than
    mid-run.
    """

    def __init__(self, directory: Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._texts: dict[str, str] = {}
        for name, required in REQUIRED_SLOTS.items():
            if self.directory is not None:
                path = self.directory / f"{name}.txt"
                try:
                    text = path.read_text(encoding="utf-8")
                except OSError as exc:
                    raise ConfigError(f"cannot read template {path}: {exc}") from exc
            else:
                text = resources.files("d2af").joinpath(f"templates/{name}.txt").read_text("utf-8")
            text = text.strip()
            if not text:
                raise ConfigError(f"template {name!r} is empty")
            found = set(_PLACEHOLDER_RE.findall(text))
            if found != set(required):
                raise ConfigError(
                    f"template {name!r} uses placeholders {sorted(found)}, "
                    f"needs exactly {sorted(required)}"
                )
            self._texts[name] = text

    def text(self, name: str) -> str:
        try:
            return self._texts[name]
        except KeyError:
            raise ConfigError(f"unknown template {name!r}") from None

    def render(self, name: str, slots: dict[str, str]) -> str:
        text = self.text(name)
        if set(slots) != set(REQUIRED_SLOTS[name]):
            raise ConfigError(
                f"template {name!r} needs slots {sorted(REQUIRED_SLOTS[name])}, got {sorted(slots)}"
            )
        return text.format(**slots)


@dataclass(frozen=True)
class AnnotationConfig:
    """Knobs for both annotation strategies."""

    category_list: CategoryList
    captions_per_box_per_length: int = 1
    max_open_set_items: int = 5
    min_box_confidence: float = 0.35
    open_set_rounds: int = 1

    def __post_init__(self) -> None:
        if self.captions_per_box_per_length < 1:
            raise ConfigError("captions_per_box_per_length must be >= 1")
        if self.max_open_set_items < 1:
            raise ConfigError("max_open_set_items must be >= 1")
        if not (0.0 <= self.min_box_confidence <= 1.0):
            raise ConfigError("min_box_confidence must be in [0, 1]")
        if self.open_set_rounds < 1:
            raise ConfigError("open_set_rounds must be >= 1")


@dataclass
class AnnotateMetrics:
    """Counters aggregated across images; merging is plain addition."""

    images: int = 0
    closed_pairs: int = 0
    open_pairs: int = 0
    merged_pairs: int = 0
    instances: int = 0
    descriptions_requested: int = 0
    ungrounded_descriptions: int = 0
    unknown_categories: int = 0
    merge_collisions: int = 0

    def merge(self, other: "AnnotateMetrics") -> "AnnotateMetrics":
        merged = AnnotateMetrics()
        for name in vars(merged):
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        return merged

    def as_dict(self) -> dict[str, int]:
        return dict(vars(self))


def _slot_box(box: BoundingBox) -> str:
    return "[" + ",".join(str(int(round(v))) for v in box.as_list()) + "]"


def closed_set_annotate(
    img: ImageRecord,
    cfg: AnnotationConfig,
    bundle: ClientBundle,
    metrics: AnnotateMetrics | None = None,
) -> list[RegionTextPair]:
    """Detect closed-vocabulary instances and caption each at 3 lengths."""
    metrics = metrics if metrics is not None else AnnotateMetrics()
    detect_req = CaptionRequest(
        image_id=img.image_id,
        prompt_template="category_detect",
        slots={"cls_list": cfg.category_list.joined()},
    )
    present: list[str] = []
    for name in bundle.captioner.generate(detect_req):
        name = name.strip()
        if name not in cfg.category_list.names:
            metrics.unknown_categories += 1
            log.warning("%s: captioner named unknown category %r", img.image_id, name)
            continue
        if name not in present:
            present.append(name)

    pairs: list[RegionTextPair] = []
    seen: set[tuple[tuple[float, float, float, float], str]] = set()
    for category in present:
        result = bundle.grounder.ground(GroundingRequest(img.image_id, category))
        for scored in result.boxes:
            if not (scored.confidence > cfg.min_box_confidence):
                continue
            box = clamp_to_image(scored.box, img.width, img.height)
            metrics.instances += 1
            for template in ("closed_short", "closed_mid", "closed_long"):
                req = CaptionRequest(
                    image_id=img.image_id,
                    prompt_template=template,
                    slots={"box": _slot_box(box), "cls": category},
                    box=box,
                )
                texts = bundle.captioner.generate(req)[: cfg.captions_per_box_per_length]
                for text in texts:
                    text = text.strip()
                    if not text:
                        continue
                    key = (tuple(box.as_list()), text)
                    if key in seen:
                        continue
                    seen.add(key)
                    pairs.append(
                        RegionTextPair(
                            pair_id=f"{img.image_id}-c{len(pairs):04d}",
                            image_id=img.image_id,
                            caption=Caption.from_text(text),
                            box=box,
                            strategy=Strategy.CLOSED_SET,
                            status=Status.RAW,
                            category=category,
                        )
                    )
    metrics.closed_pairs += len(pairs)
    return pairs


def open_set_annotate(
    img: ImageRecord,
    cfg: AnnotationConfig,
    bundle: ClientBundle,
    metrics: AnnotateMetrics | None = None,
) -> list[RegionTextPair]:
    """Ask for free-form descriptions and keep the best box for each."""
    metrics = metrics if metrics is not None else AnnotateMetrics()
    descriptions: list[str] = []
    for _ in range(cfg.open_set_rounds):
        items = bundle.captioner.generate(
            CaptionRequest(image_id=img.image_id, prompt_template="open_set")
        )
        for text in items[: cfg.max_open_set_items]:
            text = text.strip()
            if text and text not in descriptions:
                descriptions.append(text)

    pairs: list[RegionTextPair] = []
    for text in descriptions:
        metrics.descriptions_requested += 1
        result = bundle.grounder.ground(GroundingRequest(img.image_id, text))
        candidates = [sb for sb in result.boxes if sb.confidence > cfg.min_box_confidence]
        if not candidates:
            metrics.ungrounded_descriptions += 1
            continue
        best = max(candidates, key=lambda sb: sb.confidence)
        box = clamp_to_image(best.box, img.width, img.height)
        pairs.append(
            RegionTextPair(
                pair_id=f"{img.image_id}-o{len(pairs):04d}",
                image_id=img.image_id,
                caption=Caption.from_text(text),
                box=box,
                strategy=Strategy.OPEN_SET,
                status=Status.RAW,
            )
        )
    metrics.open_pairs += len(pairs)
    return pairs


def _merge_key(pair: RegionTextPair) -> tuple[tuple[int, int, int, int], str]:
    # boxes compared at 0.1px resolution
    box = tuple(int(round(v * 10.0)) for v in pair.box.as_list())
    return box, pair.caption.text


def merge_strategies(
    closed: list[RegionTextPair],
    open_pairs: list[RegionTextPair],
    metrics: AnnotateMetrics | None = None,
) -> list[RegionTextPair]:
    """Concatenate both strategies, dropping open duplicates of closed pairs.

    Two pairs collide when their captions match and their boxes agree to
    0.1px; the closed-set pair wins.  Order is closed pairs first, then
    surviving open pairs, both in input order.
    """
    metrics = metrics if metrics is not None else AnnotateMetrics()
    image_ids = {p.image_id for p in closed} | {p.image_id for p in open_pairs}
    if len(image_ids) > 1:
        raise DataError(f"merge_strategies got pairs from multiple images: {sorted(image_ids)}")
    merged: list[RegionTextPair] = []
    seen = set()
    for pair in list(closed) + list(open_pairs):
        key = _merge_key(pair)
        if key in seen:
            metrics.merge_collisions += 1
            continue
        seen.add(key)
        merged.append(pair)
    metrics.merged_pairs += len(merged)
    return merged


def annotate_image(
    img: ImageRecord,
    cfg: AnnotationConfig,
    bundle: ClientBundle,
    metrics: AnnotateMetrics | None = None,
) -> list[RegionTextPair]:
    """Run both strategies on one image and merge the results."""
    metrics = metrics if metrics is not None else AnnotateMetrics()
    try:
        closed = closed_set_annotate(img, cfg, bundle, metrics)
        open_pairs = open_set_annotate(img, cfg, bundle, metrics)
        merged = merge_strategies(closed, open_pairs, metrics)
    except BackendError as exc:
        raise BackendError(f"image {img.image_id}: {exc}") from exc
    metrics.images += 1
    return merged


def run_annotation(
    source: ImageSource,
    cfg: AnnotationConfig,
    bundle: ClientBundle,
    image_ids: list[str] | None = None,
    parallelism: int = 1,
) -> tuple[list[RegionTextPair], AnnotateMetrics]:
    """Annotate every image of a source, in deterministic id order.

    Images are processed with up to ``parallelism`` workers; results are
    collected in submission order so the output manifest is identical for
    any worker count.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    ids = sorted(image_ids) if image_ids is not None else source.ids()
    records = []
    for image_id in ids:
        record = source.record(image_id)
        source.load(image_id)  # fail fast on undecodable images
        records.append(record)

    def work(record: ImageRecord) -> tuple[list[RegionTextPair], AnnotateMetrics]:
        m = AnnotateMetrics()
        pairs = annotate_image(record, cfg, bundle, m)
        return pairs, m

    all_pairs: list[RegionTextPair] = []
    total = AnnotateMetrics()
    if parallelism == 1:
        outcomes = [work(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(work, records))
    for pairs, m in outcomes:
        all_pairs.extend(pairs)
        total = total.merge(m)
    return all_pairs, total
