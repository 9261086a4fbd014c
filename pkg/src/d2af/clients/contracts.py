"""Request/response types and protocols for the five model backends.

The pipeline talks to every model, local or remote, through these small
typed messages.  Mock backends and HTTP backends implement the same
protocols, so pipeline code never knows which one it got.

Two grounding backends exist on purpose: ``grounder`` is the detection
specialist used for localization, ``grounder_lmm`` is the general
multimodal model; the spatial consistency check needs their answers to be
independent, so they are never interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from ..core import BoundingBox
from ..errors import DataError

PROMPT_TEMPLATES = (
    "category_detect",
    "closed_short",
    "closed_mid",
    "closed_long",
    "open_set",
)

# placeholders each prompt template must be given, no more and no less
REQUIRED_SLOTS: dict[str, frozenset[str]] = {
    "category_detect": frozenset({"cls_list"}),
    "closed_short": frozenset({"box", "cls"}),
    "closed_mid": frozenset({"box", "cls"}),
    "closed_long": frozenset({"box", "cls"}),
    "open_set": frozenset(),
}


@dataclass(frozen=True)
class CaptionRequest:
    """Ask a captioner to fill one prompt template for one image.

    ``slots`` holds the placeholder values the template text needs;
    ``box`` additionally carries the region of interest as a typed value
    for backends that take boxes out of band.
    """

    image_id: str
    prompt_template: str
    slots: dict[str, str] = field(default_factory=dict)
    box: BoundingBox | None = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise DataError("CaptionRequest.image_id must be non-empty")
        if self.prompt_template not in REQUIRED_SLOTS:
            raise DataError(f"unknown prompt template {self.prompt_template!r}")
        required = REQUIRED_SLOTS[self.prompt_template]
        provided = frozenset(self.slots)
        if provided != required:
            raise DataError(
                f"template {self.prompt_template!r} needs slots {sorted(required)}, "
                f"got {sorted(provided)}"
            )


@dataclass(frozen=True)
class GroundingRequest:
    """Ask a grounder to localize ``query_text`` in one image."""

    image_id: str
    query_text: str

    def __post_init__(self) -> None:
        if not self.image_id:
            raise DataError("GroundingRequest.image_id must be non-empty")
        if not self.query_text.strip():
            raise DataError("GroundingRequest.query_text must be non-empty")


@dataclass(frozen=True)
class ScoredBox:
    """A candidate box with the backend's confidence in [0, 1]."""

    box: BoundingBox
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise DataError(f"confidence out of range: {self.confidence}")


@dataclass(frozen=True)
class GroundingResult:
    """Candidate boxes sorted by confidence, best first."""

    boxes: tuple[ScoredBox, ...]

    def __post_init__(self) -> None:
        confs = [b.confidence for b in self.boxes]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise DataError("GroundingResult boxes must be sorted by confidence")

    @property
    def top(self) -> ScoredBox | None:
        return self.boxes[0] if self.boxes else None


@dataclass(frozen=True, eq=False)
class SimilarityRequest:
    """Score how well ``text`` describes ``image_variant``.

    The variant is passed by value (HxWx3 uint8 array) because similarity
    runs on derived images, crops and blur composites, that exist nowhere
    else.
    """

    image_variant: np.ndarray
    text: str

    def __post_init__(self) -> None:
        shape = self.image_variant.shape
        if self.image_variant.ndim != 3 or shape[2] != 3 or 0 in shape:
            raise DataError(f"similarity variant must be non-empty HxWx3, got {shape}")
        if self.image_variant.dtype != np.uint8:
            raise DataError(f"similarity variant must be uint8, got {self.image_variant.dtype}")
        if not self.text.strip():
            raise DataError("SimilarityRequest.text must be non-empty")


@dataclass(frozen=True, eq=False)
class EmbeddingResult:
    """A fixed-dimension embedding of one text."""

    vector: np.ndarray
    dimension: int

    def __post_init__(self) -> None:
        if self.vector.ndim != 1:
            raise DataError(f"embedding vector must be 1-d, got shape {self.vector.shape}")
        if self.vector.shape[0] != self.dimension:
            raise DataError(
                f"embedding dimension field {self.dimension} does not match "
                f"vector length {self.vector.shape[0]}"
            )
        if not np.all(np.isfinite(self.vector)):
            raise DataError("embedding vector has non-finite components")


@dataclass(frozen=True)
class RleMask:
    """Binary mask as run-length counts over a width x height grid.

    Counts follow row-major order and alternate background/foreground,
    starting with background.
    """

    counts: tuple[int, ...]
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"mask has invalid size {self.width}x{self.height}")
        if any(c < 0 for c in self.counts):
            raise DataError("mask counts must be non-negative")
        if sum(self.counts) != self.width * self.height:
            raise DataError("mask counts do not cover the image grid")


@runtime_checkable
class Captioner(Protocol):
    def generate(self, request: CaptionRequest) -> list[str]: ...


@runtime_checkable
class Grounder(Protocol):
    def ground(self, request: GroundingRequest) -> GroundingResult: ...


@runtime_checkable
class SimilarityScorer(Protocol):
    def similarity(self, request: SimilarityRequest) -> float: ...


@runtime_checkable
class TextEmbedder(Protocol):
    def embed(self, text: str) -> EmbeddingResult: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image_id: str, box: BoundingBox, text: str = "") -> RleMask: ...


@dataclass
class ClientBundle:
    """Everything the pipeline stages need to talk to models.

    ``grounder`` is the detection specialist (used for annotation-time
    localization and the second re-grounding pass); ``grounder_lmm`` is
    the independent general model used for the first re-grounding pass.
    """

    captioner: Captioner
    grounder: Grounder
    grounder_lmm: Grounder
    scorer: SimilarityScorer
    embedder: TextEmbedder
    segmenter: Segmenter | None = None
