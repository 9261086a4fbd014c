"""Pipeline configuration: one bundle of per-stage configs plus backends.

Configuration comes from a plain text file of ``dotted.key = value``
lines; command-line flags override file values.  Every key mirrors a
dataclass field of the stage configs, so this module is mostly a typed
parser plus a canonical snapshot used to hash a run's configuration.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .annotate import AnnotationConfig, CategoryList
from .consistency import ConsistencyConfig
from .convert import ConvertConfig
from .distribution import DistributionConfig
from .errors import ConfigError

CLIENT_NAMES = (
    "captioner",
    "grounder",
    "grounder_lmm",
    "scorer",
    "embedder",
    "segmenter",
)

_NONE_WORDS = {"none", "null", ""}


@dataclass(frozen=True)
class BackendConfig:
    """Where the five model clients come from: seeded mock or HTTP.

    A client with an entry in ``endpoints`` goes over HTTP; every other
    client uses the seeded mock backend.  ``force_mock`` (the --mock
    flag) asserts no endpoint is configured at all, so a client is never
    ambiguously both.
    """

    mock_seed: int = 0
    mock_images: int = 20
    mock_spatial_bad: int = 0
    mock_semantic_bad: int = 0
    mock_outlier: int = 0
    mock_redundant: int = 0
    mock_reference_per_head: int = 64
    endpoints: tuple[tuple[str, str], ...] = ()
    force_mock: bool = False

    def __post_init__(self) -> None:
        if self.mock_images < 1:
            raise ConfigError("backend.mock_images must be >= 1")
        if self.mock_reference_per_head < 1:
            raise ConfigError("backend.mock_reference_per_head must be >= 1")
        seen = set()
        for name, url in self.endpoints:
            if name not in CLIENT_NAMES:
                raise ConfigError(
                    f"unknown backend client {name!r}; expected one of {CLIENT_NAMES}"
                )
            if name in seen:
                raise ConfigError(f"duplicate endpoint for client {name!r}")
            seen.add(name)
            if not (url.startswith("http://") or url.startswith("https://")):
                raise ConfigError(f"endpoint for {name!r} is not an http(s) URL: {url!r}")
        if self.force_mock and self.endpoints:
            names = ", ".join(sorted(seen))
            raise ConfigError(
                f"--mock conflicts with configured endpoints for: {names}; "
                "each client must be exactly one of mock or HTTP"
            )

    def endpoint_for(self, name: str) -> str | None:
        for client, url in self.endpoints:
            if client == name:
                return url
        return None


@dataclass(frozen=True)
class RunConfig:
    """Execution-level knobs shared by all subcommands."""

    parallelism: int = 0  # 0 means "use the logical core count"
    max_item_failure_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.parallelism < 0:
            raise ConfigError("run.parallelism must be >= 0 (0 = logical cores)")
        if not (0.0 <= self.max_item_failure_rate <= 1.0):
            raise ConfigError("run.max_item_failure_rate must be in [0, 1]")

    @property
    def resolved_parallelism(self) -> int:
        return self.parallelism if self.parallelism > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs, as one immutable value.

    ``categories_explicit`` records whether the category vocabulary was
    configured by the user; when it was not, an all-mock run substitutes
    the mock backend's own vocabulary (the packaged default describes
    real detectors, not synthetic scenes).
    """

    annotate: AnnotationConfig
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    distribution: DistributionConfig = field(default_factory=DistributionConfig)
    convert: ConvertConfig = field(default_factory=ConvertConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    run: RunConfig = field(default_factory=RunConfig)
    categories_explicit: bool = False

    @classmethod
    def default(cls) -> "PipelineConfig":
        return cls(annotate=AnnotationConfig(category_list=CategoryList.default()))


def _parse_int(raw: str) -> int:
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _parse_float(raw: str) -> float:
    lowered = raw.strip().lower()
    if lowered in ("inf", "+inf", "-inf"):
        return float(lowered)
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None
    if math.isnan(value):
        raise ConfigError("NaN is not a valid config value")
    return value


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_opt_int(raw: str) -> int | None:
    return None if raw.strip().lower() in _NONE_WORDS else _parse_int(raw)


def _parse_opt_path(raw: str) -> Path | None:
    return None if raw.strip().lower() in _NONE_WORDS else Path(raw)


# dotted key -> (section attribute, field name, parser)
_KEYS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "annotate.captions_per_box_per_length": ("annotate", "captions_per_box_per_length", _parse_int),
    "annotate.max_open_set_items": ("annotate", "max_open_set_items", _parse_int),
    "annotate.min_box_confidence": ("annotate", "min_box_confidence", _parse_float),
    "annotate.open_set_rounds": ("annotate", "open_set_rounds", _parse_int),
    "consistency.tau_spatial": ("consistency", "tau_spatial", _parse_float),
    "consistency.tau_semantic": ("consistency", "tau_semantic", _parse_float),
    "consistency.alpha": ("consistency", "alpha", _parse_float),
    "consistency.blur_sigma_fraction": ("consistency", "blur_sigma_fraction", _parse_float),
    "consistency.scorer_retries": ("consistency", "scorer_retries", _parse_int),
    "consistency.dump_variants_dir": ("consistency", "dump_variants_dir", _parse_opt_path),
    "distribution.k": ("distribution", "k", _parse_int),
    "distribution.reduce_dim": ("distribution", "reduce_dim", _parse_opt_int),
    "distribution.variance_floor": ("distribution", "variance_floor", _parse_float),
    "distribution.em_tol": ("distribution", "em_tol", _parse_float),
    "distribution.em_max_iters": ("distribution", "em_max_iters", _parse_int),
    "distribution.seed": ("distribution", "seed", _parse_int),
    "distribution.log_density_floor": ("distribution", "log_density_floor", _parse_float),
    "distribution.ceiling_percentile": ("distribution", "ceiling_percentile", _parse_float),
    "convert.max_merge": ("convert", "max_merge", _parse_int),
    "convert.max_samples_per_image": ("convert", "max_samples_per_image", _parse_int),
    "convert.merge_iou_max": ("convert", "merge_iou_max", _parse_float),
    "convert.no_target_ratio": ("convert", "no_target_ratio", _parse_float),
    "convert.seed": ("convert", "seed", _parse_int),
    "backend.mock_seed": ("backend", "mock_seed", _parse_int),
    "backend.mock_images": ("backend", "mock_images", _parse_int),
    "backend.mock_spatial_bad": ("backend", "mock_spatial_bad", _parse_int),
    "backend.mock_semantic_bad": ("backend", "mock_semantic_bad", _parse_int),
    "backend.mock_outlier": ("backend", "mock_outlier", _parse_int),
    "backend.mock_redundant": ("backend", "mock_redundant", _parse_int),
    "backend.mock_reference_per_head": ("backend", "mock_reference_per_head", _parse_int),
    "backend.force_mock": ("backend", "force_mock", _parse_bool),
    "run.parallelism": ("run", "parallelism", _parse_int),
    "run.max_item_failure_rate": ("run", "max_item_failure_rate", _parse_float),
}

# Keys handled specially rather than through the table above.
_CATEGORIES_KEY = "annotate.categories_file"
_ENDPOINT_PREFIX = "backend.endpoint."


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment; blanks ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = raw.strip()
    return values


def read_config_file(path: Path | str) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, origin=str(path))


def build_config(values: Mapping[str, str]) -> PipelineConfig:
    """Turn a flat dotted-key mapping into a validated PipelineConfig."""
    sections: dict[str, dict[str, object]] = {
        "annotate": {},
        "consistency": {},
        "distribution": {},
        "convert": {},
        "backend": {},
        "run": {},
    }
    endpoints: list[tuple[str, str]] = []
    category_list = CategoryList.default()
    categories_explicit = False
    for key, raw in values.items():
        if key == _CATEGORIES_KEY:
            path = _parse_opt_path(raw)
            if path is not None:
                if not path.is_file():
                    raise ConfigError(f"{key}: category file does not exist: {path}")
                category_list = CategoryList.from_file(path)
                categories_explicit = True
            continue
        if key.startswith(_ENDPOINT_PREFIX):
            endpoints.append((key[len(_ENDPOINT_PREFIX):], raw))
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parser = _KEYS[key]
        try:
            sections[section][name] = parser(raw)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    dump_dir = sections["consistency"].get("dump_variants_dir")
    if dump_dir is not None and not Path(dump_dir).parent.is_dir():
        raise ConfigError(
            f"consistency.dump_variants_dir: parent directory does not exist: {dump_dir}"
        )
    return PipelineConfig(
        annotate=AnnotationConfig(category_list=category_list, **sections["annotate"]),
        consistency=ConsistencyConfig(**sections["consistency"]),
        distribution=DistributionConfig(**sections["distribution"]),
        convert=ConvertConfig(**sections["convert"]),
        backend=BackendConfig(endpoints=tuple(sorted(endpoints)), **sections["backend"]),
        run=RunConfig(**sections["run"]),
        categories_explicit=categories_explicit,
    )


def load_config(
    path: Path | str | None,
    overrides: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Read a config file (optional) and apply override values on top."""
    values = read_config_file(path) if path is not None else {}
    for key, raw in (overrides or {}).items():
        values[key] = raw
    return build_config(values)


def config_snapshot(cfg: PipelineConfig) -> dict[str, str]:
    """Canonical flat view of a config, one string value per key.

    Two configs produce identical snapshots exactly when every knob that
    can change pipeline output is identical, so the snapshot is what run
    hashes and checkpoints compare.
    """
    snap: dict[str, str] = {}
    for key, (section, name, _parser) in _KEYS.items():
        value = getattr(getattr(cfg, section), name)
        if isinstance(value, bool):
            snap[key] = "true" if value else "false"
        elif value is None:
            snap[key] = "none"
        elif isinstance(value, float):
            snap[key] = repr(value)
        else:
            snap[key] = str(value)
    joined = "\n".join(cfg.annotate.category_list.names)
    digest = hashlib.blake2b(joined.encode("utf-8"), digest_size=8).hexdigest()
    snap["annotate.categories_digest"] = digest
    for name, url in cfg.backend.endpoints:
        snap[f"{_ENDPOINT_PREFIX}{name}"] = url
    return dict(sorted(snap.items()))


def config_hash(cfg: PipelineConfig) -> str:
    """Stable short hash of the canonical snapshot."""
    body = "\n".join(f"{k}={v}" for k, v in config_snapshot(cfg).items())
    return hashlib.blake2b(body.encode("utf-8"), digest_size=16).hexdigest()
