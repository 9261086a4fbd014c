"""Density-band filtering against a reference caption distribution.

Reference captions are embedded, optionally linearly reduced, and modeled
with a diagonal-covariance Gaussian mixture fitted by EM.  Candidate
captions are scored by mixture log-density; the stage keeps only the
mid-density band: everything at or below ``log_density_floor`` is an
outlier, everything at or above the ceiling-percentile threshold of the
candidate scores is redundant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .clients.contracts import TextEmbedder
from .core import RegionTextPair, Status
from .errors import ConfigError, DataError, PipelineError

MODEL_SCHEMA = "d2af_gmm_v1"


@dataclass(frozen=True)
class DistributionConfig:
    k: int = 16
    reduce_dim: int | None = 64
    variance_floor: float = 1e-6
    em_tol: float = 1e-6  # relative log-likelihood change
    em_max_iters: int = 200
    seed: int = 0
    log_density_floor: float = 0.0
    ceiling_percentile: float = 80.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.reduce_dim is not None and self.reduce_dim < 1:
            raise ConfigError("reduce_dim must be >= 1 or None")
        if self.variance_floor <= 0.0:
            raise ConfigError("variance_floor must be > 0")
        if self.em_tol <= 0.0:
            raise ConfigError("em_tol must be > 0")
        if self.em_max_iters < 1:
            raise ConfigError("em_max_iters must be >= 1")
        if not (0.0 < self.ceiling_percentile <= 100.0):
            raise ConfigError("ceiling_percentile must be in (0, 100]")


@dataclass(frozen=True, eq=False)
class Reducer:
    """Fitted affine projection: x -> components @ (x - mean)."""

    mean: np.ndarray  # (raw_dim,)
    components: np.ndarray  # (dim, raw_dim), orthonormal rows

    @property
    def raw_dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def dim(self) -> int:
        return int(self.components.shape[0])

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        if matrix.ndim != 2 or matrix.shape[1] != self.raw_dim:
            raise ConfigError(
                f"reducer fitted for dimension {self.raw_dim}, got matrix {matrix.shape}"
            )
        return (matrix - self.mean[None, :]) @ self.components.T


def fit_reducer(matrix: np.ndarray, reduce_dim: int | None) -> Reducer:
    """Principal-axis projection fitted on the reference embeddings.

    When ``reduce_dim`` is absent or at least the embedding dimension the
    reducer is the exact identity (zero mean, identity components), so
    transformed rows equal the input bit for bit.
    """
    n, d = matrix.shape
    if reduce_dim is None or reduce_dim >= d:
        return Reducer(mean=np.zeros(d), components=np.eye(d))
    if n < 2:
        raise DataError("need at least 2 reference rows to fit a reduction")
    if reduce_dim > min(n - 1, d):
        raise DataError(
            f"cannot extract {reduce_dim} components from {n} rows of dimension {d}"
        )
    mean = matrix.mean(axis=0)
    _, _, vt = np.linalg.svd(matrix - mean[None, :], full_matrices=False)
    components = vt[:reduce_dim].copy()
    # deterministic sign convention: largest-magnitude entry positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return Reducer(mean=mean, components=components)


def embed_corpus(
    captions: list[str], embedder: TextEmbedder, reducer: Reducer | None = None
) -> np.ndarray:
    """Stack embeddings of all captions, applying a fitted reduction if given."""
    if not captions:
        raise DataError("cannot embed an empty caption list")
    rows = []
    dim = None
    for text in captions:
        result = embedder.embed(text)
        if dim is None:
            dim = result.dimension
        elif result.dimension != dim:
            raise DataError(
                f"embedder returned mixed dimensions {dim} and {result.dimension}"
            )
        rows.append(np.asarray(result.vector, dtype=np.float64))
    matrix = np.stack(rows)
    if reducer is not None:
        if reducer.raw_dim != dim:
            raise ConfigError(
                f"embedder dimension {dim} does not match reducer input {reducer.raw_dim}"
            )
        matrix = reducer.transform(matrix)
    return matrix


@dataclass(frozen=True)
class FitStats:
    n_iters: int
    converged: bool
    log_likelihood_history: tuple[float, ...]

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihood_history[-1]


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Diagonal-covariance Gaussian mixture."""

    k: int
    dim: int
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    covariances: np.ndarray  # (K, dim), diagonal entries
    variance_floor: float
    stats: FitStats | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise DataError("mixture needs at least one component")
        if self.weights.shape != (self.k,):
            raise DataError(f"weights shape {self.weights.shape} != ({self.k},)")
        if self.means.shape != (self.k, self.dim):
            raise DataError(f"means shape {self.means.shape} != ({self.k}, {self.dim})")
        if self.covariances.shape != (self.k, self.dim):
            raise DataError(
                f"covariances shape {self.covariances.shape} != ({self.k}, {self.dim})"
            )
        if np.any(self.weights < 0.0):
            raise DataError("mixture weights must be non-negative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise DataError(f"mixture weights sum to {self.weights.sum()}, not 1")
        if self.variance_floor <= 0.0:
            raise DataError("variance_floor must be > 0")
        if np.any(self.covariances < self.variance_floor):
            raise DataError("covariance entries below the variance floor")


def _log_component_densities(
    matrix: np.ndarray, means: np.ndarray, covariances: np.ndarray
) -> np.ndarray:
    """Per-row, per-component log N(x | mu_k, diag sigma_k), shape (n, K)."""
    d = matrix.shape[1]
    log_norm = -0.5 * (d * math.log(2.0 * math.pi) + np.sum(np.log(covariances), axis=1))
    diff = matrix[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / covariances[None, :, :], axis=2)
    return log_norm[None, :] - 0.5 * quad


def _kmeanspp_centers(matrix: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = matrix.shape[0]
    centers = [matrix[int(rng.integers(n))]]
    d2 = np.sum((matrix - centers[0][None, :]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(matrix[idx])
        d2 = np.minimum(d2, np.sum((matrix - matrix[idx][None, :]) ** 2, axis=1))
    return np.stack(centers)


def fit_gmm(reference: np.ndarray, cfg: DistributionConfig) -> MixtureModel:
    """EM fit of a diagonal-covariance mixture, seeded k-means++ init.

    The training log-likelihood is checked to be non-decreasing every
    iteration (tiny slack for floating point); termination is by relative
    log-likelihood change or the iteration cap.
    """
    matrix = np.asarray(reference, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError(f"reference must be a 2-d matrix, got shape {matrix.shape}")
    n, d = matrix.shape
    if n < cfg.k:
        raise DataError(f"cannot fit {cfg.k} components on {n} rows")
    if not np.all(np.isfinite(matrix)):
        raise DataError("reference matrix has non-finite entries")

    rng = np.random.default_rng(cfg.seed)
    means = _kmeanspp_centers(matrix, cfg.k, rng)
    global_var = np.maximum(matrix.var(axis=0), cfg.variance_floor)
    covariances = np.tile(global_var, (cfg.k, 1))
    weights = np.full(cfg.k, 1.0 / cfg.k)

    history: list[float] = []
    converged = False
    for _ in range(cfg.em_max_iters):
        with np.errstate(divide="ignore"):
            log_joint = np.log(weights)[None, :] + _log_component_densities(
                matrix, means, covariances
            )
        log_evidence = logsumexp(log_joint, axis=1)
        ll = float(log_evidence.sum())
        if history:
            slack = 1e-10 * max(1.0, abs(history[-1]))
            if ll < history[-1] - slack:
                raise PipelineError(
                    f"EM log-likelihood decreased: {history[-1]} -> {ll}"
                )
        history.append(ll)
        if len(history) >= 2:
            rel = abs(history[-1] - history[-2]) / max(1.0, abs(history[-2]))
            if rel <= cfg.em_tol:
                converged = True
                break

        resp = np.exp(log_joint - log_evidence[:, None])
        bulk = resp.sum(axis=0)
        weights = bulk / n
        for comp in range(cfg.k):
            if bulk[comp] < 1e-12:
                covariances[comp] = np.maximum(covariances[comp], cfg.variance_floor)
                continue
            means[comp] = resp[:, comp] @ matrix / bulk[comp]
            diff = matrix - means[comp][None, :]
            covariances[comp] = np.maximum(
                resp[:, comp] @ (diff * diff) / bulk[comp], cfg.variance_floor
            )

    stats = FitStats(
        n_iters=len(history), converged=converged, log_likelihood_history=tuple(history)
    )
    return MixtureModel(
        k=cfg.k,
        dim=d,
        weights=weights,
        means=means,
        covariances=covariances,
        variance_floor=cfg.variance_floor,
        stats=stats,
    )


def log_density_batch(model: MixtureModel, matrix: np.ndarray) -> np.ndarray:
    """Mixture log-density of every row, via log-sum-exp."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != model.dim:
        raise DataError(
            f"matrix shape {matrix.shape} does not match model dimension {model.dim}"
        )
    with np.errstate(divide="ignore"):
        log_joint = np.log(model.weights)[None, :] + _log_component_densities(
            matrix, model.means, model.covariances
        )
    return np.asarray(logsumexp(log_joint, axis=1), dtype=np.float64)


def log_density(model: MixtureModel, vector: np.ndarray) -> float:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != model.dim:
        raise DataError(
            f"vector shape {vector.shape} does not match model dimension {model.dim}"
        )
    return float(log_density_batch(model, vector[None, :])[0])


def ceiling_threshold(scores: np.ndarray, percentile: float) -> float:
    """Smallest score NOT kept by the ceiling rule: ascending nearest-rank.

    With m = ceil(percentile * n / 100), the threshold is the (m+1)-th
    smallest score; the m lowest-ranked scores fall strictly below it.
    When m == n there is nothing to shave off and the threshold is +inf.
    Rank arithmetic is exact rational, immune to float wobble.
    """
    n = len(scores)
    if n == 0:
        raise DataError("cannot take a percentile of an empty score set")
    m = math.ceil(Fraction(percentile) * n / 100)
    if m >= n:
        return math.inf
    return float(np.sort(scores)[m])


@dataclass(frozen=True)
class BandResult:
    decisions: dict[str, Status]
    log_densities: dict[str, float]
    tau_high: float


def band_filter(
    model: MixtureModel,
    candidates: list[tuple[str, np.ndarray]],
    cfg: DistributionConfig,
) -> BandResult:
    """Classify each candidate as kept, outlier (floor) or redundant (ceiling).

    The ceiling is the nearest-rank percentile of the candidate score set
    itself; the floor rule wins when both could apply.  Decisions depend
    only on the score multiset, never on candidate order.
    """
    if not candidates:
        return BandResult(decisions={}, log_densities={}, tau_high=math.inf)
    ids = [pair_id for pair_id, _ in candidates]
    if len(set(ids)) != len(ids):
        raise DataError("candidate pair_ids must be unique")
    matrix = np.stack([np.asarray(vec, dtype=np.float64) for _, vec in candidates])
    scores = log_density_batch(model, matrix)
    tau_high = ceiling_threshold(scores, cfg.ceiling_percentile)
    decisions = {}
    for pair_id, score in zip(ids, scores):
        if score <= cfg.log_density_floor:
            decisions[pair_id] = Status.DROPPED_OUTLIER
        elif score >= tau_high:
            decisions[pair_id] = Status.DROPPED_REDUNDANT
        else:
            decisions[pair_id] = Status.KEPT
    return BandResult(
        decisions=decisions,
        log_densities={pid: float(s) for pid, s in zip(ids, scores)},
        tau_high=tau_high,
    )


# -- fitted bundle and model file -------------------------------------


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Everything needed to score candidates: reducer, mixture, config echo."""

    mixture: MixtureModel
    reducer: Reducer
    config: DistributionConfig

    @property
    def raw_dim(self) -> int:
        return self.reducer.raw_dim


def fit_reference_model(
    captions: list[str], embedder: TextEmbedder, cfg: DistributionConfig
) -> FittedModel:
    raw = embed_corpus(captions, embedder)
    reducer = fit_reducer(raw, cfg.reduce_dim)
    mixture = fit_gmm(reducer.transform(raw), cfg)
    return FittedModel(mixture=mixture, reducer=reducer, config=cfg)


def _hex_array(array: np.ndarray) -> list:
    if array.ndim == 1:
        return [float(v).hex() for v in array]
    return [_hex_array(row) for row in array]


def _unhex_array(data: list) -> np.ndarray:
    if data and isinstance(data[0], list):
        return np.array([[float.fromhex(v) for v in row] for row in data])
    return np.array([float.fromhex(v) for v in data])


def save_model(model: FittedModel, path: Path | str) -> None:
    """Write the fitted model as versioned JSON with bit-exact hex floats."""
    payload = {
        "schema": MODEL_SCHEMA,
        "k": model.mixture.k,
        "dim": model.mixture.dim,
        "raw_dim": model.raw_dim,
        "seed": model.config.seed,
        "config": {
            "k": model.config.k,
            "reduce_dim": model.config.reduce_dim,
            "variance_floor": model.config.variance_floor,
            "em_tol": model.config.em_tol,
            "em_max_iters": model.config.em_max_iters,
            "seed": model.config.seed,
            "log_density_floor": model.config.log_density_floor,
            "ceiling_percentile": model.config.ceiling_percentile,
        },
        "reducer": {
            "mean": _hex_array(model.reducer.mean),
            "components": _hex_array(model.reducer.components),
        },
        "weights": _hex_array(model.mixture.weights),
        "means": _hex_array(model.mixture.means),
        "covariances": _hex_array(model.mixture.covariances),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_model(path: Path | str) -> FittedModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if payload.get("schema") != MODEL_SCHEMA:
        raise DataError(
            f"model file {path} has schema {payload.get('schema')!r}, "
            f"expected {MODEL_SCHEMA!r}"
        )
    cfg = DistributionConfig(**payload["config"])
    reducer = Reducer(
        mean=_unhex_array(payload["reducer"]["mean"]),
        components=_unhex_array(payload["reducer"]["components"]),
    )
    mixture = MixtureModel(
        k=payload["k"],
        dim=payload["dim"],
        weights=_unhex_array(payload["weights"]),
        means=_unhex_array(payload["means"]),
        covariances=_unhex_array(payload["covariances"]),
        variance_floor=cfg.variance_floor,
    )
    return FittedModel(mixture=mixture, reducer=reducer, config=cfg)


# -- pipeline stage ----------------------------------------------------


@dataclass
class DistributionMetrics:
    pairs_in: int = 0
    kept: int = 0
    dropped_outlier: int = 0
    dropped_redundant: int = 0
    tau_high: float = math.inf

    def as_dict(self) -> dict:
        return dict(vars(self))


def run_distribution_stage(
    pairs: list[RegionTextPair],
    model: FittedModel,
    embedder: TextEmbedder,
    cfg: DistributionConfig | None = None,
) -> tuple[list[RegionTextPair], DistributionMetrics]:
    """Score every raw pair's caption and keep the mid-density band.

    Survivors become kept (terminal); the rest become dropped_outlier or
    dropped_redundant.  Output order equals input order.  The floor and
    ceiling are selection knobs evaluated against this candidate set, so
    they come from ``cfg`` (the filter invocation) when given; the
    model's own config echo is only the fallback.
    """
    not_raw = [p.pair_id for p in pairs if p.status is not Status.RAW]
    if not_raw:
        raise DataError(f"distribution stage needs raw pairs; got terminal: {not_raw[:5]}")
    metrics = DistributionMetrics(pairs_in=len(pairs))
    if not pairs:
        return [], metrics

    matrix = embed_corpus(
        [p.caption.text for p in pairs], embedder, reducer=model.reducer
    )
    result = band_filter(
        model.mixture,
        [(p.pair_id, matrix[i]) for i, p in enumerate(pairs)],
        cfg if cfg is not None else model.config,
    )
    metrics.tau_high = result.tau_high

    out = []
    for pair in pairs:
        decision = result.decisions[pair.pair_id]
        pair = pair.with_scores(log_density=result.log_densities[pair.pair_id])
        out.append(pair.with_status(decision))
        if decision is Status.KEPT:
            metrics.kept += 1
        elif decision is Status.DROPPED_OUTLIER:
            metrics.dropped_outlier += 1
        else:
            metrics.dropped_redundant += 1
    return out, metrics
