"""Deterministic mock corpus and mock model backends.

The mock world is a set of synthetic scenes with rectangle "objects" plus
ground-truth captions, built entirely from a seed.  Scenes can carry
planted defects with known counts:

* ``spatial_bad``   - a caption that both grounders resolve to a decoy
                      twin object, so re-grounding disagrees with the box;
* ``semantic_bad``  - a caption whose content does not match the region,
                      so the similarity scorer returns the mismatch level;
* ``outlier``       - a well-grounded caption whose wording sits far from
                      the reference text distribution;
* ``redundant``     - a bare one-word caption that sits at the very top of
                      the reference density;
* ``ungroundable``  - a free-form description neither grounder can place.

Because every defect is planted at a known slot, tests can compute the
exact expected output of every pipeline stage from the corpus spec alone.

All randomness is derived from the corpus seed through blake2 digests, so
two corpora built from equal specs are identical on any platform.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from ..core import BoundingBox, ImageRecord, iou
from ..errors import ConfigError, DataError
from .contracts import (
    CaptionRequest,
    ClientBundle,
    EmbeddingResult,
    GroundingRequest,
    GroundingResult,
    RleMask,
    ScoredBox,
    SimilarityRequest,
)

CLOSED_CATEGORIES = (
    "person",
    "car",
    "dog",
    "chair",
    "table",
    "bird",
    "cup",
    "tree",
)
NOVEL_CATEGORIES = (
    "unicycle",
    "gargoyle",
    "teapot",
    "banjo",
    "lantern",
    "kite",
    "scooter",
    "vase",
)
ATTRS = ("red", "blue", "green", "small", "large", "shiny", "dark", "pale", "tall", "round")
# attribute words reserved for content-mismatch captions, disjoint from ATTRS
# so a mismatched caption can never collide with a good caption's text
MISMATCH_ATTRS = ("crooked", "faded", "blurred", "jagged", "murky", "scuffed")
FILLERS = ("worn", "metal", "wooden", "striped", "plain", "bright", "dusty", "clean", "old", "new")
POSITIONS = ("left", "right", "middle", "top", "bottom")
GIBBERISH_HEADS = (
    "zyxqueg",
    "vroblix",
    "quenzap",
    "drovekk",
    "xuplor",
    "grimvok",
    "plizzen",
    "krandol",
)
# tail vocabulary for reference-corpus captions
REFERENCE_TAIL_VOCAB = ATTRS + FILLERS + POSITIONS + ("near", "the", "with", "on", "by", "edge", "side", "wall")

HEAD_SCALE = 10.0
TAIL_SCALE = 0.05


def _digest(*parts: object) -> int:
    """Stable 64-bit integer digest of the given parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def _rng(*parts: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_digest(*parts)))


def _uniform01(*parts: object) -> float:
    return _digest(*parts) / 2.0**64


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of a mock corpus: scene count, seed, planted defect counts.

    Every populated image holds one object from the closed category
    vocabulary and one from the novel vocabulary, and yields five raw
    pairs: three closed-set captions (short/mid/long) for the closed
    object, one free-form description of the closed object, and one of
    the novel object.  Planted defects replace pairs in place and never
    change the raw pair count.  ``empty_images`` appends scenes with no
    objects at all; ``duplicate_instances`` adds a second near-identical
    detection of the closed object (which adds three more closed pairs
    for that image); ``low_conf_instances`` adds a detection below any
    sane confidence floor (which adds none).
    """

    images: int = 10
    seed: int = 0
    width: int = 160
    height: int = 120
    spatial_bad: int = 0
    semantic_bad: int = 0
    outlier: int = 0
    redundant: int = 0
    ungroundable: int = 0
    empty_images: int = 0
    duplicate_instances: int = 0
    low_conf_instances: int = 0
    embed_dim: int = 16

    PAIRS_PER_IMAGE = 5

    def __post_init__(self) -> None:
        if self.images <= 0:
            raise ConfigError("corpus needs at least one image")
        if self.width < 64 or self.height < 64:
            raise ConfigError("mock images must be at least 64x64")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise ConfigError("embed_dim must be an even number >= 4")
        for name in (
            "spatial_bad",
            "semantic_bad",
            "outlier",
            "redundant",
            "ungroundable",
            "empty_images",
            "duplicate_instances",
            "low_conf_instances",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.empty_images >= self.images:
            raise ConfigError("at least one image must have objects")
        populated = self.populated_images
        if self.spatial_bad + self.semantic_bad > 3 * populated:
            raise ConfigError("not enough closed caption slots for spatial+semantic plants")
        for name in ("outlier", "redundant", "ungroundable", "duplicate_instances", "low_conf_instances"):
            if getattr(self, name) > populated:
                raise ConfigError(f"{name} cannot exceed the populated image count")

    @property
    def populated_images(self) -> int:
        return self.images - self.empty_images

    @property
    def n_raw_pairs(self) -> int:
        """Raw pairs annotation should yield (duplicate instances add 3 each)."""
        return self.populated_images * self.PAIRS_PER_IMAGE + 3 * self.duplicate_instances

    @property
    def n_good_pairs(self) -> int:
        return (
            self.populated_images * self.PAIRS_PER_IMAGE
            - self.spatial_bad
            - self.semantic_bad
            - self.outlier
            - self.redundant
        )

    @property
    def n_consistency_survivors(self) -> int:
        return self.populated_images * self.PAIRS_PER_IMAGE - self.spatial_bad - self.semantic_bad


@dataclass(frozen=True)
class MockObject:
    object_id: str
    category: str
    box: BoundingBox
    color: tuple[int, int, int]


@dataclass(frozen=True)
class CaptionTruth:
    """Ground truth for one caption text within one scene."""

    text: str
    source_box: BoundingBox
    grounded_boxes: tuple[ScoredBox, ...]
    mismatch: bool


@dataclass(frozen=True)
class ExpectedPair:
    """One raw pair the annotation stage is expected to emit.

    Covers the five canonical per-image slots only; the extra pairs from
    ``duplicate_instances`` are asserted in focused tests instead.
    """

    image_id: str
    text: str
    box: BoundingBox
    strategy: str  # "closed_set" | "open_set"
    category: str | None
    slot: str  # closed_short | closed_mid | closed_long | open_closed | open_novel
    plant: str  # good | spatial | semantic | outlier | redundant


@dataclass
class MockScene:
    image_id: str
    width: int
    height: int
    closed_object: MockObject | None
    novel_object: MockObject | None
    decoy: MockObject | None
    captions: dict[str, CaptionTruth]
    closed_captions: dict[str, str]  # band -> caption text for the closed object
    open_descriptions: list[str]
    extra_instance_boxes: list[ScoredBox]  # planted near-duplicates / low-conf noise

    @property
    def present_categories(self) -> list[str]:
        return [] if self.closed_object is None else [self.closed_object.category]


def _cell_box(rng: np.random.Generator, cell: tuple[int, int, int, int]) -> BoundingBox:
    """A seeded box inside a grid cell, with a safety margin."""
    cx0, cy0, cx1, cy1 = cell
    max_w = cx1 - cx0 - 8
    max_h = cy1 - cy0 - 8
    w = int(rng.integers(max(16, max_w // 2), max_w + 1))
    h = int(rng.integers(max(14, max_h // 2), max_h + 1))
    x0 = cx0 + 4 + int(rng.integers(0, max_w - w + 1))
    y0 = cy0 + 4 + int(rng.integers(0, max_h - h + 1))
    return BoundingBox(float(x0), float(y0), float(x0 + w), float(y0 + h))


def _color(*parts: object) -> tuple[int, int, int]:
    rng = _rng(*parts)
    return tuple(int(v) for v in rng.integers(110, 246, size=3))


class MockCorpus:
    """Builds scenes plus exact bookkeeping from a CorpusSpec."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.scenes: dict[str, MockScene] = {}
        self.expected_pairs: list[ExpectedPair] = []
        self.caption_flags: dict[str, bool] = {}
        self._build()

    # -- construction -------------------------------------------------

    def _build(self) -> None:
        spec = self.spec
        populated = spec.populated_images
        closed_slots = [
            (idx, band) for idx in range(populated) for band in ("short", "mid", "long")
        ]
        spatial_slots = set(closed_slots[: spec.spatial_bad])
        semantic_slots = set(closed_slots[len(closed_slots) - spec.semantic_bad :])
        if spatial_slots & semantic_slots:
            raise ConfigError("spatial and semantic plants overlap")

        for idx in range(spec.images):
            image_id = f"img{idx:05d}"
            if idx >= populated:
                self.scenes[image_id] = MockScene(
                    image_id=image_id,
                    width=spec.width,
                    height=spec.height,
                    closed_object=None,
                    novel_object=None,
                    decoy=None,
                    captions={},
                    closed_captions={},
                    open_descriptions=[],
                    extra_instance_boxes=[],
                )
                continue
            self.scenes[image_id] = self._build_scene(
                idx,
                image_id,
                spatial_bands={band for (i, band) in spatial_slots if i == idx},
                semantic_bands={band for (i, band) in semantic_slots if i == idx},
                redundant=idx < spec.redundant,
                outlier=idx >= populated - spec.outlier,
                ungroundable=idx < spec.ungroundable,
                duplicate_instance=idx < spec.duplicate_instances,
                low_conf_instance=idx < spec.low_conf_instances,
            )

        # sanity: bookkeeping must agree with the CorpusSpec field arithmetic
        assert len(self.expected_pairs) == populated * spec.PAIRS_PER_IMAGE
        by_plant = self.count_by_plant()
        assert by_plant["spatial"] == spec.spatial_bad
        assert by_plant["semantic"] == spec.semantic_bad
        assert by_plant["outlier"] == spec.outlier
        assert by_plant["redundant"] == spec.redundant

    def _register_caption(
        self,
        scene: MockScene,
        text: str,
        source_box: BoundingBox,
        grounded: list[ScoredBox],
        mismatch: bool,
    ) -> None:
        if text in scene.captions:
            raise DataError(f"scene {scene.image_id}: duplicate caption text {text!r}")
        if self.caption_flags.get(text, mismatch) != mismatch:
            raise DataError(f"caption text {text!r} registered with conflicting flags")
        scene.captions[text] = CaptionTruth(
            text=text, source_box=source_box, grounded_boxes=tuple(grounded), mismatch=mismatch
        )
        self.caption_flags[text] = mismatch

    def _build_scene(
        self,
        idx: int,
        image_id: str,
        spatial_bands: set[str],
        semantic_bands: set[str],
        redundant: bool,
        outlier: bool,
        ungroundable: bool,
        duplicate_instance: bool,
        low_conf_instance: bool,
    ) -> MockScene:
        spec = self.spec
        seed = spec.seed
        w, h = spec.width, spec.height
        half_w, half_h = w // 2, h // 2
        category = CLOSED_CATEGORIES[idx % len(CLOSED_CATEGORIES)]
        novel_cat = NOVEL_CATEGORIES[_digest(seed, "novel", image_id) % len(NOVEL_CATEGORIES)]

        closed_obj = MockObject(
            object_id=f"{image_id}-obj0",
            category=category,
            box=_cell_box(_rng(seed, "box", image_id, "closed"), (0, 0, half_w, half_h)),
            color=_color(seed, "color", image_id, "closed"),
        )
        novel_obj = MockObject(
            object_id=f"{image_id}-nov0",
            category=novel_cat,
            box=_cell_box(_rng(seed, "box", image_id, "novel"), (half_w, half_h, w, h)),
            color=_color(seed, "color", image_id, "novel"),
        )
        decoy = None
        if spatial_bands:
            decoy = MockObject(
                object_id=f"{image_id}-dec0",
                category=category,
                box=_cell_box(_rng(seed, "box", image_id, "decoy"), (half_w, 0, w, half_h)),
                color=_color(seed, "color", image_id, "decoy"),
            )

        scene = MockScene(
            image_id=image_id,
            width=w,
            height=h,
            closed_object=closed_obj,
            novel_object=novel_obj,
            decoy=decoy,
            captions={},
            closed_captions={},
            open_descriptions=[],
            extra_instance_boxes=[],
        )

        def pick(kind: str, options: tuple[str, ...]) -> str:
            return options[_digest(seed, "word", image_id, kind) % len(options)]

        attr = pick("attr", ATTRS)
        filler = pick("filler", FILLERS)
        pos = pick("pos", POSITIONS)
        pos2 = pick("pos2", POSITIONS)
        box = closed_obj.box
        true_ground = [ScoredBox(box, 0.9)]

        # closed-set caption slots: short / mid / long
        band_texts = {
            "short": f"{category} {attr} {pos}",
            "mid": f"{category} {attr} {filler} near {pos} edge",
            "long": f"{category} {attr} {filler} standing quietly near the {pos} corner region",
        }
        for band in ("short", "mid", "long"):
            text = band_texts[band]
            plant = "good"
            grounded = true_ground
            mismatch = False
            if band in spatial_bands:
                plant = "spatial"
                assert decoy is not None
                grounded = [ScoredBox(decoy.box, 0.95), ScoredBox(box, 0.9)]
            elif band in semantic_bands:
                plant = "semantic"
                other = CLOSED_CATEGORIES[(idx + 1 + _digest(seed, "other", image_id, band) % (len(CLOSED_CATEGORIES) - 1)) % len(CLOSED_CATEGORIES)]
                bad_attr = MISMATCH_ATTRS[_digest(seed, "battr", image_id, band) % len(MISMATCH_ATTRS)]
                if band == "short":
                    text = f"{other} {bad_attr} {pos}"
                elif band == "mid":
                    text = f"{other} {bad_attr} {filler} near {pos} edge"
                else:
                    text = f"{other} {bad_attr} {filler} standing quietly near the {pos} corner region"
                mismatch = True
            self._register_caption(scene, text, box, grounded, mismatch)
            scene.closed_captions[band] = text
            self.expected_pairs.append(
                ExpectedPair(
                    image_id=image_id,
                    text=text,
                    box=box,
                    strategy="closed_set",
                    category=category,
                    slot=f"closed_{band}",
                    plant=plant,
                )
            )

        # free-form description of the closed object (or a redundant bare word)
        if redundant:
            open_closed_text = category
            plant = "redundant"
            # grounding goes through the category branch; register the flag only
            if self.caption_flags.get(open_closed_text, False):
                raise DataError(f"bare category {open_closed_text!r} already flagged")
            self.caption_flags[open_closed_text] = False
        else:
            open_closed_text = f"{category} with {filler} look toward {pos2} side"
            plant = "good"
            self._register_caption(scene, open_closed_text, box, true_ground, mismatch=False)
        scene.open_descriptions.append(open_closed_text)
        self.expected_pairs.append(
            ExpectedPair(
                image_id=image_id,
                text=open_closed_text,
                box=box,
                strategy="open_set",
                category=None,
                slot="open_closed",
                plant=plant,
            )
        )

        # free-form description of the novel object (or an off-distribution one)
        novel_ground = [ScoredBox(novel_obj.box, 0.9)]
        if outlier:
            ghead = GIBBERISH_HEADS[_digest(seed, "ghead", image_id) % len(GIBBERISH_HEADS)]
            open_novel_text = f"{ghead} {attr} {filler} near {pos}"
            plant = "outlier"
        else:
            open_novel_text = f"{novel_cat} {attr} resting near {pos2} wall"
            plant = "good"
        self._register_caption(scene, open_novel_text, novel_obj.box, novel_ground, mismatch=False)
        scene.open_descriptions.append(open_novel_text)
        self.expected_pairs.append(
            ExpectedPair(
                image_id=image_id,
                text=open_novel_text,
                box=novel_obj.box,
                strategy="open_set",
                category=None,
                slot="open_novel",
                plant=plant,
            )
        )

        if ungroundable:
            hidden_cat = NOVEL_CATEGORIES[_digest(seed, "hidden", image_id) % len(NOVEL_CATEGORIES)]
            scene.open_descriptions.append(f"{hidden_cat} hidden beyond the {pos} horizon")

        if duplicate_instance:
            # a second detection of the same object, shifted a little: IoU > 0.5
            b = closed_obj.box
            dup = BoundingBox(b.x_min + 3, b.y_min + 2, b.x_max + 3, b.y_max + 2)
            scene.extra_instance_boxes.append(ScoredBox(dup, 0.85))
        if low_conf_instance:
            noise = _cell_box(_rng(seed, "box", image_id, "noise"), (0, half_h, half_w, h))
            scene.extra_instance_boxes.append(ScoredBox(noise, 0.2))

        return scene

    # -- bookkeeping oracles ------------------------------------------

    def image_ids(self) -> list[str]:
        return sorted(self.scenes)

    def scene(self, image_id: str) -> MockScene:
        try:
            return self.scenes[image_id]
        except KeyError:
            raise DataError(f"unknown image_id {image_id!r}") from None

    def category_list(self) -> list[str]:
        return list(CLOSED_CATEGORIES)

    def count_by_plant(self) -> dict[str, int]:
        counts = {"good": 0, "spatial": 0, "semantic": 0, "outlier": 0, "redundant": 0}
        for pair in self.expected_pairs:
            counts[pair.plant] += 1
        return counts

    def expected_index(self) -> dict[tuple[str, str], ExpectedPair]:
        return {(p.image_id, p.text): p for p in self.expected_pairs}

    def reference_captions(self, per_head: int = 64) -> list[str]:
        """Reference corpus: equal caption counts for every known head word.

        Heads cover both category vocabularies; tail lengths cycle 1..9 so
        every head sees the same length profile.
        """
        captions = []
        heads = CLOSED_CATEGORIES + NOVEL_CATEGORIES
        for head in heads:
            for j in range(per_head):
                tail_len = (j % 9) + 1
                rng = _rng(self.spec.seed, "reference", head, j)
                tail = [
                    REFERENCE_TAIL_VOCAB[int(rng.integers(0, len(REFERENCE_TAIL_VOCAB)))]
                    for _ in range(tail_len)
                ]
                captions.append(" ".join([head] + tail))
        return captions

    # -- clients ------------------------------------------------------

    def image_source(self) -> "MockImageSource":
        return MockImageSource(self)

    def embedder(self) -> "MockEmbedder":
        return MockEmbedder(seed=_digest(self.spec.seed, "embedder"), dim=self.spec.embed_dim)

    def clients(self, jitter_px: float = 0.0) -> ClientBundle:
        seed = self.spec.seed
        return ClientBundle(
            captioner=MockCaptioner(self),
            grounder=MockGrounder(
                self, name="mock-grounder-detector", seed=_digest(seed, "ground-detector"), jitter_px=jitter_px
            ),
            grounder_lmm=MockGrounder(
                self, name="mock-grounder-lmm", seed=_digest(seed, "ground-lmm"), jitter_px=jitter_px
            ),
            scorer=MockScorer(self, seed=_digest(seed, "scorer")),
            embedder=self.embedder(),
            segmenter=MockSegmenter(self),
        )


class MockCaptioner:
    """Returns the scene's planned captions for each known template."""

    def __init__(self, corpus: MockCorpus):
        self.corpus = corpus

    def generate(self, request: CaptionRequest) -> list[str]:
        scene = self.corpus.scene(request.image_id)
        name = request.prompt_template
        if name == "category_detect":
            offered = [c.strip() for c in request.slots["cls_list"].split(",") if c.strip()]
            return [c for c in offered if c in scene.present_categories]
        if name in ("closed_short", "closed_mid", "closed_long"):
            band = name.removeprefix("closed_")
            if request.box is None:
                raise DataError(f"{name} request needs a typed box")
            obj = scene.closed_object
            if obj is None or iou(request.box, obj.box) <= 0.5:
                raise DataError(
                    f"caption request box {request.box.as_list()} matches no object "
                    f"in {scene.image_id}"
                )
            return [scene.closed_captions[band]]
        if name == "open_set":
            return list(scene.open_descriptions[:5])
        raise DataError(f"unknown caption template {name!r}")


class MockGrounder:
    """Resolves category names and known caption texts to scene boxes."""

    def __init__(self, corpus: MockCorpus, name: str, seed: int, jitter_px: float = 0.0):
        self.corpus = corpus
        self.name = name
        self.seed = seed
        self.jitter_px = float(jitter_px)

    def _jitter(self, scene: MockScene, query: str, rank: int, box: BoundingBox) -> BoundingBox:
        if self.jitter_px <= 0.0:
            return box
        rng = _rng(self.seed, "jitter", scene.image_id, query, rank)
        d = rng.uniform(-self.jitter_px, self.jitter_px, size=4)
        x0 = min(max(box.x_min + d[0], 0.0), scene.width - 1.0)
        y0 = min(max(box.y_min + d[1], 0.0), scene.height - 1.0)
        x1 = max(min(box.x_max + d[2], float(scene.width)), x0 + 1.0)
        y1 = max(min(box.y_max + d[3], float(scene.height)), y0 + 1.0)
        return BoundingBox(x0, y0, x1, y1)

    def ground(self, request: GroundingRequest) -> GroundingResult:
        scene = self.corpus.scene(request.image_id)
        query = request.query_text.strip()
        found: list[ScoredBox] = []
        if query in CLOSED_CATEGORIES:
            if scene.closed_object is not None and scene.closed_object.category == query:
                found.append(ScoredBox(scene.closed_object.box, 1.0))
                found.extend(scene.extra_instance_boxes)
        elif query in scene.captions:
            found.extend(scene.captions[query].grounded_boxes)
        boxes = tuple(
            ScoredBox(self._jitter(scene, query, rank, sb.box), sb.confidence)
            for rank, sb in enumerate(sorted(found, key=lambda sb: -sb.confidence))
        )
        return GroundingResult(boxes=boxes)


class MockScorer:
    """Similarity levels driven by the corpus caption flags.

    Known accurate captions score near ``matched_level``, mismatched or
    unknown ones near ``mismatched_level``; a small jitter derived from
    the exact image bytes and text keeps repeated calls deterministic but
    distinct across different inputs.
    """

    def __init__(
        self,
        corpus: MockCorpus,
        seed: int,
        matched_level: float = 0.9,
        mismatched_level: float = 0.3,
        jitter: float = 0.05,
    ):
        self.corpus = corpus
        self.seed = seed
        self.matched_level = matched_level
        self.mismatched_level = mismatched_level
        self.jitter = jitter

    def similarity(self, request: SimilarityRequest) -> float:
        mismatch = self.corpus.caption_flags.get(request.text, True)
        level = self.mismatched_level if mismatch else self.matched_level
        image_digest = hashlib.blake2b(
            request.image_variant.tobytes() + repr(request.image_variant.shape).encode(),
            digest_size=8,
        ).hexdigest()
        noise = (_uniform01(self.seed, "noise", image_digest, request.text) * 2.0 - 1.0) * self.jitter
        return min(1.0, max(-1.0, level + noise))


class MockEmbedder:
    """Text embeddings with a planted cluster structure.

    The first token of a caption selects a far-out cluster center (one
    fixed direction per distinct head word, scaled by HEAD_SCALE); every
    later token adds a small displacement confined to a 2-coordinate block
    chosen by token position.  Captions that share a head therefore form a
    tight cluster whose radius grows with caption length, which gives
    density-based filtering something real to measure.
    """

    def __init__(self, seed: int, dim: int = 16):
        if dim < 4 or dim % 2:
            raise ConfigError("embedding dim must be an even number >= 4")
        self.seed = seed
        self.dim = dim

    def head_center(self, head: str) -> np.ndarray:
        g = _rng(self.seed, "head", head).standard_normal(self.dim)
        return HEAD_SCALE * g / float(np.linalg.norm(g))

    def embed_one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        tokens = text.split()
        if not tokens:
            return v
        v += self.head_center(tokens[0])
        n_blocks = self.dim // 2
        for pos, token in enumerate(tokens[1:], start=1):
            block = (pos - 1) % n_blocks
            theta = _uniform01(self.seed, "tail", token, pos) * 2.0 * math.pi
            v[2 * block] += TAIL_SCALE * math.cos(theta)
            v[2 * block + 1] += TAIL_SCALE * math.sin(theta)
        return v

    def embed(self, text: str) -> EmbeddingResult:
        if not text.strip():
            raise DataError("cannot embed empty text")
        return EmbeddingResult(vector=self.embed_one(text), dimension=self.dim)


class MockSegmenter:
    """Masks are the filled integer rectangle of the requested box."""

    def __init__(self, corpus: MockCorpus):
        self.corpus = corpus

    def segment(self, image_id: str, box: BoundingBox, text: str = "") -> RleMask:
        scene = self.corpus.scene(image_id)
        w, h = scene.width, scene.height
        grid = np.zeros((h, w), dtype=bool)
        x0 = max(0, int(round(box.x_min)))
        y0 = max(0, int(round(box.y_min)))
        x1 = min(w, int(round(box.x_max)))
        y1 = min(h, int(round(box.y_max)))
        grid[y0:y1, x0:x1] = True
        flat = grid.reshape(-1)
        counts: list[int] = []
        value = False
        run = 0
        for cell in flat:
            if bool(cell) == value:
                run += 1
            else:
                counts.append(run)
                value = not value
                run = 1
        counts.append(run)
        return RleMask(counts=tuple(counts), width=w, height=h)


class MockImageSource:
    """Renders each scene as flat-color rectangles on a dark background."""

    def __init__(self, corpus: MockCorpus):
        self.corpus = corpus

    def ids(self) -> list[str]:
        return self.corpus.image_ids()

    def record(self, image_id: str) -> ImageRecord:
        scene = self.corpus.scene(image_id)
        return ImageRecord(image_id, scene.width, scene.height)

    def load(self, image_id: str) -> np.ndarray:
        scene = self.corpus.scene(image_id)
        rng = _rng(self.corpus.spec.seed, "background", image_id)
        background = rng.integers(25, 81, size=3)
        image = np.ones((scene.height, scene.width, 3), dtype=np.uint8) * background.astype(np.uint8)
        objects = [scene.closed_object, scene.novel_object, scene.decoy]
        for obj in objects:
            if obj is None:
                continue
            x0, y0 = int(obj.box.x_min), int(obj.box.y_min)
            x1, y1 = int(obj.box.x_max), int(obj.box.y_max)
            image[y0:y1, x0:x1] = np.array(obj.color, dtype=np.uint8)
        return image
