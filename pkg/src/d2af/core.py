"""Core data model for region-text pairs.

A region-text pair couples one axis-aligned image box with one natural
language caption, plus the bookkeeping the downstream filter stages need
(scores, lifecycle status, originating strategy).  Everything here is a
small frozen dataclass so records can be hashed, compared, and serialized
without surprises.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .errors import DataError, PipelineError

# Caption length bands, in whole words.
SHORT_MAX_WORDS = 3
MID_MAX_WORDS = 6


class Strategy(str, enum.Enum):
    """How a pair was produced: category-driven or free-form description."""

    CLOSED_SET = "closed_set"
    OPEN_SET = "open_set"


class Status(str, enum.Enum):
    """Lifecycle of a pair as it moves through the filter stages."""

    RAW = "raw"
    KEPT = "kept"
    DROPPED_SPATIAL = "dropped_spatial"
    DROPPED_SEMANTIC = "dropped_semantic"
    DROPPED_OUTLIER = "dropped_outlier"
    DROPPED_REDUNDANT = "dropped_redundant"


TERMINAL_STATUSES = frozenset(
    {
        Status.KEPT,
        Status.DROPPED_SPATIAL,
        Status.DROPPED_SEMANTIC,
        Status.DROPPED_OUTLIER,
        Status.DROPPED_REDUNDANT,
    }
)


def word_count(text: str) -> int:
    """Number of whitespace-delimited tokens in ``text``."""
    return len(text.split())


def length_band(n_words: int) -> str:
    """Map a word count to its length band: ``short``, ``mid`` or ``long``."""
    if n_words < 0:
        raise DataError(f"negative word count: {n_words}")
    if n_words <= SHORT_MAX_WORDS:
        return "short"
    if n_words <= MID_MAX_WORDS:
        return "mid"
    return "long"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corners ``(x_min, y_min, x_max, y_max)``.

    Coordinates are floats; the box must have strictly positive area.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise DataError(f"box coordinate {name} is not a number: {value!r}")
            if not math.isfinite(value):
                raise DataError(f"box coordinate {name} is not finite: {value!r}")
            object.__setattr__(self, name, float(value))
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DataError(
                "box has no area: "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values: list[float] | tuple[float, ...]) -> "BoundingBox":
        if len(values) != 4:
            raise DataError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*values)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes.

    Returns a value in [0, 1]; 0 when the boxes do not overlap.
    """
    ix_min = max(a.x_min, b.x_min)
    iy_min = max(a.y_min, b.y_min)
    ix_max = min(a.x_max, b.x_max)
    iy_max = min(a.y_max, b.y_max)
    iw = ix_max - ix_min
    ih = iy_max - iy_min
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def clamp_to_image(box: BoundingBox, width: int, height: int) -> BoundingBox:
    """Intersect ``box`` with the image rectangle ``[0, width] x [0, height]``.

    Raises DataError if the box lies entirely outside the image (the
    clamped result would have zero area).
    """
    if width <= 0 or height <= 0:
        raise DataError(f"image has no area: {width}x{height}")
    x_min = min(max(box.x_min, 0.0), float(width))
    y_min = min(max(box.y_min, 0.0), float(height))
    x_max = min(max(box.x_max, 0.0), float(width))
    y_max = min(max(box.y_max, 0.0), float(height))
    if not (x_max > x_min and y_max > y_min):
        raise DataError(
            f"box ({box.x_min}, {box.y_min}, {box.x_max}, {box.y_max}) "
            f"does not intersect a {width}x{height} image"
        )
    return BoundingBox(x_min, y_min, x_max, y_max)


@dataclass(frozen=True)
class ImageRecord:
    """One source image: stable identifier plus pixel dimensions."""

    image_id: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if not self.image_id:
            raise DataError("image_id must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise DataError(
                f"image {self.image_id!r} has invalid size {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class Caption:
    """A caption plus its derived word count and length band.

    Use :meth:`from_text` so the derived fields stay consistent with the
    text; the constructor checks them.
    """

    text: str
    n_words: int
    band: str

    def __post_init__(self) -> None:
        if self.n_words != word_count(self.text):
            raise DataError(
                f"caption word count {self.n_words} does not match text {self.text!r}"
            )
        if self.band != length_band(self.n_words):
            raise DataError(
                f"caption band {self.band!r} does not match word count {self.n_words}"
            )

    @classmethod
    def from_text(cls, text: str) -> "Caption":
        n = word_count(text)
        return cls(text=text, n_words=n, band=length_band(n))


@dataclass(frozen=True)
class ScoreRecord:
    """Per-pair filter measurements; fields are None until computed.

    iou_lmm / iou_det come from the two independent re-grounding passes,
    s_intr / s_rela / s_final from the semantic check, log_density from the
    density stage.
    """

    iou_lmm: float | None = None
    iou_det: float | None = None
    s_intr: float | None = None
    s_rela: float | None = None
    s_final: float | None = None
    log_density: float | None = None


@dataclass(frozen=True)
class RegionTextPair:
    """One region-text pseudo label and its filter lifecycle state."""

    pair_id: str
    image_id: str
    caption: Caption
    box: BoundingBox
    strategy: Strategy
    status: Status = Status.RAW
    scores: ScoreRecord = field(default_factory=ScoreRecord)
    category: str | None = None

    def __post_init__(self) -> None:
        if not self.pair_id:
            raise DataError("pair_id must be non-empty")
        if not self.image_id:
            raise DataError("image_id must be non-empty")

    def with_status(self, status: Status) -> "RegionTextPair":
        """Return a copy with ``status`` applied.

        Raw pairs may move to any terminal status; terminal statuses never
        change again (re-applying the same one is a no-op).
        """
        if status == self.status:
            return self
        if self.status in TERMINAL_STATUSES:
            raise PipelineError(
                f"pair {self.pair_id}: illegal status change "
                f"{self.status.value} -> {status.value}"
            )
        return replace(self, status=status)

    def with_scores(self, **updates: float) -> "RegionTextPair":
        """Return a copy with the given ScoreRecord fields filled in."""
        return replace(self, scores=replace(self.scores, **updates))
