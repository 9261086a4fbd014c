"""Model backend contracts plus the mock and HTTP implementations."""

from .contracts import (
    PROMPT_TEMPLATES,
    REQUIRED_SLOTS,
    CaptionRequest,
    Captioner,
    ClientBundle,
    EmbeddingResult,
    Grounder,
    GroundingRequest,
    GroundingResult,
    RleMask,
    ScoredBox,
    Segmenter,
    SimilarityRequest,
    SimilarityScorer,
    TextEmbedder,
)

__all__ = [
    "PROMPT_TEMPLATES",
    "REQUIRED_SLOTS",
    "CaptionRequest",
    "Captioner",
    "ClientBundle",
    "EmbeddingResult",
    "Grounder",
    "GroundingRequest",
    "GroundingResult",
    "RleMask",
    "ScoredBox",
    "Segmenter",
    "SimilarityRequest",
    "SimilarityScorer",
    "TextEmbedder",
]
