"""Consistency-aware filtering: spatial re-grounding plus semantic fusion.

A raw pair survives this stage only if (a) two independent grounders both
re-localize its caption to essentially the same box (strict IoU beyond
``tau_spatial``) and (b) a similarity scorer judges the caption to match
both the cropped region and the region-in-context composite (strict
fusion beyond ``tau_semantic``).  Failures record which check rejected
them; survivors keep status raw for the next stage.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .clients.contracts import ClientBundle, GroundingRequest, SimilarityRequest
from .core import BoundingBox, RegionTextPair, Status, iou
from .errors import BackendError, ConfigError, DataError
from .imageio import ImageSource, encode_png

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConsistencyConfig:
    """Thresholds and blur geometry for the consistency stage."""

    tau_spatial: float = 0.5
    tau_semantic: float = 0.62
    alpha: float = 0.5
    blur_sigma_fraction: float = 0.02
    scorer_retries: int = 2
    dump_variants_dir: Path | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau_spatial < 1.0):
            raise ConfigError("tau_spatial must be in [0, 1); 0 disables the check")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")
        if self.blur_sigma_fraction <= 0.0:
            raise ConfigError("blur_sigma_fraction must be > 0")
        if self.scorer_retries < 0:
            raise ConfigError("scorer_retries must be >= 0")


@dataclass(frozen=True, eq=False)
class ImageVariant:
    """A derived view of one image region: tight crop or blur composite."""

    kind: str  # "crop" | "background_blur"
    payload: np.ndarray
    source_box: BoundingBox

    def __post_init__(self) -> None:
        if self.kind not in ("crop", "background_blur"):
            raise DataError(f"unknown variant kind {self.kind!r}")


def _rounded(box: BoundingBox) -> tuple[int, int, int, int]:
    return (
        int(round(box.x_min)),
        int(round(box.y_min)),
        int(round(box.x_max)),
        int(round(box.y_max)),
    )


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur of a float HxWxC image.

    Kernel truncated at radius ceil(3*sigma), reflective borders; channels
    are blurred independently.  Input must be float64; output is float64.
    """
    if sigma <= 0.0:
        raise DataError(f"blur sigma must be > 0, got {sigma}")
    if image.dtype != np.float64:
        raise DataError(f"gaussian_blur expects float64, got {image.dtype}")
    radius = int(math.ceil(3.0 * sigma))
    return ndimage.gaussian_filter(
        image, sigma=(sigma, sigma, 0.0), mode="reflect", radius=(radius, radius, 0)
    )


def make_crop(image: np.ndarray, box: BoundingBox) -> ImageVariant:
    """Pixel-exact sub-image at the integer-rounded box."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _rounded(box)
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise DataError(
            f"box {box.as_list()} rounds to a degenerate {x1 - x0}x{y1 - y0} crop"
        )
    return ImageVariant(
        kind="crop",
        payload=np.ascontiguousarray(image[y0:y1, x0:x1]),
        source_box=box,
    )


def make_background_blur(image: np.ndarray, box: BoundingBox, sigma: float) -> ImageVariant:
    """Blur the whole image, then restore the original pixels inside the box.

    The interior is copied back bit-exactly from the source; only the
    exterior shows the blur.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _rounded(box)
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x0 >= x1 or y0 >= y1:
        raise DataError(f"box {box.as_list()} lies outside the {w}x{h} image")
    blurred = gaussian_blur(image.astype(np.float64), sigma)
    composite = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    composite[y0:y1, x0:x1] = image[y0:y1, x0:x1]
    return ImageVariant(kind="background_blur", payload=composite, source_box=box)


def blur_sigma_for(width: int, height: int, cfg: ConsistencyConfig) -> float:
    return cfg.blur_sigma_fraction * math.hypot(width, height)


def spatial_check(
    pair: RegionTextPair, cfg: ConsistencyConfig, bundle: ClientBundle
) -> tuple[bool, float, float]:
    """Re-ground the caption with both grounders and compare boxes.

    Returns (passed, iou_lmm, iou_det).  A grounder returning no boxes
    contributes IoU 0, which fails the strict threshold.
    """
    request = GroundingRequest(pair.image_id, pair.caption.text)
    ious = []
    for grounder in (bundle.grounder_lmm, bundle.grounder):
        top = grounder.ground(request).top
        ious.append(0.0 if top is None else iou(pair.box, top.box))
    iou_lmm, iou_det = ious
    passed = iou_lmm > cfg.tau_spatial and iou_det > cfg.tau_spatial
    return passed, iou_lmm, iou_det


def _score_with_retry(
    bundle: ClientBundle, variant: ImageVariant, text: str, retries: int
) -> float:
    last: BackendError | None = None
    for _ in range(retries + 1):
        try:
            return bundle.scorer.similarity(SimilarityRequest(variant.payload, text))
        except BackendError as exc:
            last = exc
    raise last  # type: ignore[misc]


def semantic_check(
    pair: RegionTextPair,
    cfg: ConsistencyConfig,
    bundle: ClientBundle,
    image: np.ndarray,
) -> tuple[bool, float, float, float]:
    """Score the caption against crop and blur-composite variants.

    Returns (passed, s_intr, s_rela, s_final) with
    s_final = alpha * s_intr + (1 - alpha) * s_rela, strict threshold.
    """
    h, w = image.shape[:2]
    crop = make_crop(image, pair.box)
    blur = make_background_blur(image, pair.box, blur_sigma_for(w, h, cfg))
    if cfg.dump_variants_dir is not None:
        dump = Path(cfg.dump_variants_dir)
        dump.mkdir(parents=True, exist_ok=True)
        for variant in (crop, blur):
            (dump / f"{pair.pair_id}.{variant.kind}.png").write_bytes(
                encode_png(variant.payload)
            )
    s_intr = _score_with_retry(bundle, crop, pair.caption.text, cfg.scorer_retries)
    s_rela = _score_with_retry(bundle, blur, pair.caption.text, cfg.scorer_retries)
    s_final = cfg.alpha * s_intr + (1.0 - cfg.alpha) * s_rela
    return s_final > cfg.tau_semantic, s_intr, s_rela, s_final


@dataclass
class ConsistencyMetrics:
    pairs_in: int = 0
    dropped_spatial: int = 0
    dropped_semantic: int = 0
    survivors: int = 0
    retry_pending: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(vars(self))


def run_consistency_stage(
    pairs: list[RegionTextPair],
    cfg: ConsistencyConfig,
    bundle: ClientBundle,
    source: ImageSource,
    parallelism: int = 1,
) -> tuple[list[RegionTextPair], ConsistencyMetrics]:
    """Apply spatial then semantic checks to every raw pair.

    Survivors stay raw (ready for the next stage); failures become
    dropped_spatial or dropped_semantic.  Pairs whose scorer calls keep
    failing after retries stay raw without semantic scores and are counted
    as retry_pending.  Output order equals input order; each decision
    depends only on the pair itself, so permuting the input permutes the
    output without changing any decision.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    not_raw = [p.pair_id for p in pairs if p.status is not Status.RAW]
    if not_raw:
        raise DataError(f"consistency stage needs raw pairs; got terminal: {not_raw[:5]}")

    images: dict[str, np.ndarray] = {}
    for image_id in sorted({p.image_id for p in pairs}):
        images[image_id] = source.load(image_id)

    metrics = ConsistencyMetrics(pairs_in=len(pairs))

    def work(pair: RegionTextPair) -> tuple[RegionTextPair, str]:
        passed, iou_lmm, iou_det = spatial_check(pair, cfg, bundle)
        pair = pair.with_scores(iou_lmm=iou_lmm, iou_det=iou_det)
        if not passed:
            return pair.with_status(Status.DROPPED_SPATIAL), "spatial"
        try:
            ok, s_intr, s_rela, s_final = semantic_check(
                pair, cfg, bundle, images[pair.image_id]
            )
        except BackendError as exc:
            log.warning("pair %s: scorer failed after retries: %s", pair.pair_id, exc)
            return pair, "retry_pending"
        pair = pair.with_scores(s_intr=s_intr, s_rela=s_rela, s_final=s_final)
        if not ok:
            return pair.with_status(Status.DROPPED_SEMANTIC), "semantic"
        return pair, "survivor"

    if parallelism == 1:
        outcomes = [work(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(work, pairs))

    result = []
    for pair, outcome in outcomes:
        result.append(pair)
        if outcome == "spatial":
            metrics.dropped_spatial += 1
        elif outcome == "semantic":
            metrics.dropped_semantic += 1
        elif outcome == "retry_pending":
            metrics.retry_pending += 1
        else:
            metrics.survivors += 1
    return result, metrics
