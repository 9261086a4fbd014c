"""Command-line pipeline driver.

Subcommands: annotate, filter, fit-gmm, analyze, convert, stats.  Exit
codes: 0 success, 1 usage or configuration problem, 2 data problem,
3 backend problem.  ``--config`` names a dotted-key config file (the
``D2AF_CONFIG`` environment variable is the fallback); individual flags
and ``--set key=value`` override file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from . import wire
from .analysis import export_features, quantity_report
from .annotate import AnnotateMetrics, AnnotationConfig, CategoryList, annotate_image
from .checkpoint import StageCheckpoint, resume_stage, save_checkpoint
from .clients.contracts import ClientBundle
from .clients.mock import CorpusSpec, MockCorpus
from .config import (
    CLIENT_NAMES,
    PipelineConfig,
    config_hash,
    load_config,
)
from .consistency import run_consistency_stage
from .convert import run_conversion, write_gres_jsonl, write_res_jsonl
from .core import Status, TERMINAL_STATUSES
from .distribution import (
    fit_reference_model,
    load_model,
    run_distribution_stage,
    save_model,
)
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    DataError,
    PipelineError,
    StorageError,
)
from .imageio import DirectoryImageSource, ImageSource
from .manifest import read_manifest, status_counts, write_manifest

log = logging.getLogger("d2af")


# --------------------------------------------------------------------------
# runtime assembly


@dataclass
class Runtime:
    """Resolved clients and image source for one command invocation."""

    bundle: ClientBundle
    source: ImageSource | None
    corpus: MockCorpus | None


def mock_corpus_for(cfg: PipelineConfig) -> MockCorpus:
    backend = cfg.backend
    return MockCorpus(
        CorpusSpec(
            images=backend.mock_images,
            seed=backend.mock_seed,
            spatial_bad=backend.mock_spatial_bad,
            semantic_bad=backend.mock_semantic_bad,
            outlier=backend.mock_outlier,
            redundant=backend.mock_redundant,
        )
    )


def make_runtime(
    cfg: PipelineConfig, images_dir: str | None, need_images: bool
) -> Runtime:
    backend = cfg.backend
    corpus = None
    mock_bundle = None
    if len(backend.endpoints) < len(CLIENT_NAMES):
        corpus = mock_corpus_for(cfg)
        mock_bundle = corpus.clients()
    clients = {}
    for name in CLIENT_NAMES:
        url = backend.endpoint_for(name)
        if url is not None:
            clients[name] = wire.http_client(name, url)
        else:
            clients[name] = getattr(mock_bundle, name)
    source: ImageSource | None = None
    if need_images:
        if images_dir is not None:
            source = DirectoryImageSource(Path(images_dir))
        elif backend.endpoints:
            raise ConfigError(
                "--images is required when HTTP endpoints are configured; "
                "only the all-mock backend synthesizes its own images"
            )
        else:
            source = corpus.image_source()
    return Runtime(bundle=ClientBundle(**clients), source=source, corpus=corpus)


def effective_annotate_config(cfg: PipelineConfig, runtime: Runtime) -> AnnotationConfig:
    """The annotate config actually used, with the vocabulary resolved.

    An all-mock run whose user never configured a category file gets the
    mock backend's own vocabulary; the packaged default names real
    detector classes that synthetic scenes do not contain.
    """
    if (
        runtime.corpus is not None
        and not cfg.backend.endpoints
        and not cfg.categories_explicit
    ):
        return replace(
            cfg.annotate,
            category_list=CategoryList(tuple(runtime.corpus.category_list())),
        )
    return cfg.annotate


def _ordered_map(work, items, parallelism: int):
    """Lazily map ``work`` over ``items`` preserving submission order.

    Results are yielded as they become consumable so the caller can
    persist progress after every item; a crash mid-run therefore loses
    at most the in-flight items.
    """
    if parallelism <= 1:
        for item in items:
            yield work(item)
        return
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        yield from pool.map(work, items)


def _json_safe(value):
    """Replace non-finite floats so printed reports stay strict JSON."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def print_report(report: dict) -> None:
    print(json.dumps(_json_safe(report), indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# config/flag plumbing


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for item in args.endpoint or []:
        if "=" not in item:
            raise ConfigError(f"--endpoint needs NAME=URL, got {item!r}")
        name, url = item.split("=", 1)
        overrides[f"backend.endpoint.{name.strip()}"] = url.strip()
    if args.mock:
        overrides["backend.force_mock"] = "true"
    if args.seed is not None:
        overrides["backend.mock_seed"] = str(args.seed)
    if args.parallelism is not None:
        overrides["run.parallelism"] = str(args.parallelism)
    path = args.config or os.environ.get("D2AF_CONFIG") or None
    return load_config(path, overrides)


def checkpoint_path(out: Path) -> Path:
    return out.with_name(out.name + ".checkpoint.json")


def _part_name(image_id: str) -> str:
    digest = hashlib.blake2b(image_id.encode("utf-8"), digest_size=8).hexdigest()
    return f"{digest}.jsonl"


# --------------------------------------------------------------------------
# subcommands


def cmd_annotate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    runtime = make_runtime(cfg, args.images, need_images=True)
    annotate_cfg = effective_annotate_config(cfg, runtime)
    source = runtime.source
    out = Path(args.out)
    chash = config_hash(cfg)
    cp_path = checkpoint_path(out)
    parts_dir = out.with_name(out.name + ".parts")

    if args.resume:
        cp = resume_stage(cp_path, "annotate", chash)
    else:
        cp = StageCheckpoint(stage="annotate", config_hash=chash)
        shutil.rmtree(parts_dir, ignore_errors=True)
        cp_path.unlink(missing_ok=True)
    if cp.complete and out.exists():
        log.info("annotate: already complete, nothing to do")
        return 0

    ids = source.ids()
    pending = [i for i in ids if not cp.is_processed(i)]
    parts_dir.mkdir(parents=True, exist_ok=True)
    log.info("annotate: %d images (%d already done)", len(ids), len(ids) - len(pending))

    def work(image_id: str):
        try:
            record = source.record(image_id)
            source.load(image_id)
        except (DataError, StorageError) as exc:
            return image_id, None, None, str(exc)
        metrics = AnnotateMetrics()
        pairs = annotate_image(record, annotate_cfg, runtime.bundle, metrics)
        return image_id, pairs, metrics, None

    for image_id, pairs, metrics, error in _ordered_map(
        work, pending, cfg.run.resolved_parallelism
    ):
        if error is not None:
            log.warning("annotate: skipping unreadable image %s: %s", image_id, error)
            cp.bump("failed_items")
        else:
            part = parts_dir / _part_name(image_id)
            tmp = part.with_name(part.name + ".tmp")
            write_manifest(pairs, tmp)
            os.replace(tmp, part)
            for name, value in metrics.as_dict().items():
                cp.bump(f"annotate.{name}", value)
        cp.mark(image_id)
        save_checkpoint(cp, cp_path)

    all_pairs = []
    for image_id in ids:
        part = parts_dir / _part_name(image_id)
        if part.exists():
            all_pairs.extend(read_manifest(part))
    count = write_manifest(all_pairs, out)
    cp.complete = True
    save_checkpoint(cp, cp_path)
    shutil.rmtree(parts_dir, ignore_errors=True)

    failures = cp.counters.get("failed_items", 0)
    rate = failures / len(ids) if ids else 0.0
    log.info(
        "annotate: wrote %d pairs for %d images to %s (%d unreadable)",
        count, len(ids) - failures, out, failures,
    )
    if failures and rate >= cfg.run.max_item_failure_rate:
        log.error(
            "annotate: item failure rate %.3f is not under the bound %.3f",
            rate, cfg.run.max_item_failure_rate,
        )
        return 2
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    chash = config_hash(cfg)
    cp_path = checkpoint_path(out)
    if args.resume:
        cp = resume_stage(cp_path, "filter", chash)
        if cp.complete and out.exists():
            log.info("filter: already complete, nothing to do")
            return 0
    else:
        cp_path.unlink(missing_ok=True)

    pairs = read_manifest(args.input)
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise DataError("input manifest has duplicate pair_ids")
    model = load_model(args.model)
    runtime = make_runtime(cfg, args.images, need_images=True)

    raw = [p for p in pairs if p.status is Status.RAW]
    log.info("filter: %d pairs in, %d raw", len(pairs), len(raw))
    staged, cons_metrics = run_consistency_stage(
        raw, cfg.consistency, runtime.bundle, runtime.source,
        parallelism=cfg.run.resolved_parallelism,
    )
    if cons_metrics.retry_pending:
        raise BackendError(
            f"{cons_metrics.retry_pending} pairs could not be scored after retries; "
            "stage aborted, rerun when the scorer backend is healthy"
        )
    survivors = [p for p in staged if p.status is Status.RAW]
    banded, dist_metrics = run_distribution_stage(
        survivors, model, runtime.bundle.embedder, cfg.distribution
    )

    processed = {p.pair_id: p for p in staged}
    processed.update({p.pair_id: p for p in banded})
    result = [processed.get(p.pair_id, p) for p in pairs]
    non_terminal = [p.pair_id for p in result if p.status not in TERMINAL_STATUSES]
    if non_terminal:
        raise PipelineError(f"pairs left without terminal status: {non_terminal[:5]}")
    write_manifest(result, out)

    report = {
        "pairs_in": len(pairs),
        "consistency": cons_metrics.as_dict(),
        "distribution": dist_metrics.as_dict(),
        "status_counts": status_counts(result),
    }
    print_report(report)
    cp = StageCheckpoint(stage="filter", config_hash=chash, complete=True)
    save_checkpoint(cp, cp_path)
    return 0


def cmd_fit_gmm(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    runtime = make_runtime(cfg, None, need_images=False)
    if args.captions is not None:
        path = Path(args.captions)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read caption file {path}: {exc}") from exc
        captions = [line.strip() for line in text.splitlines() if line.strip()]
    elif runtime.corpus is not None and not cfg.backend.endpoints:
        captions = runtime.corpus.reference_captions(
            per_head=cfg.backend.mock_reference_per_head
        )
        log.info("fit-gmm: using %d mock reference captions", len(captions))
    else:
        raise ConfigError("--captions is required unless running fully mock")
    fitted = fit_reference_model(captions, runtime.bundle.embedder, cfg.distribution)
    save_model(fitted, args.out)
    stats = fitted.mixture.stats
    print_report(
        {
            "captions": len(captions),
            "k": fitted.mixture.k,
            "dim": fitted.mixture.dim,
            "converged": stats.converged,
            "iterations": stats.n_iters,
            "final_log_likelihood": stats.log_likelihood_history[-1],
        }
    )
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    manifests = [(Path(p).stem, read_manifest(p)) for p in args.inputs]
    report = quantity_report(manifests)
    if args.report:
        report_path = Path(args.report)
        try:
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(report.to_json() + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write report {report_path}: {exc}") from exc
        log.info("analyze: wrote report to %s", report_path)
    if args.table or not args.report:
        print(report.render_table())
    if args.features:
        runtime = make_runtime(cfg, None, need_images=False)
        name, last = manifests[-1]
        rows = export_features(last, runtime.bundle.embedder, Path(args.features))
        log.info(
            "analyze: wrote %d feature rows for manifest %s to %s",
            rows, name, args.features,
        )
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    pairs = read_manifest(args.input)
    runtime = make_runtime(cfg, None, need_images=False)
    masks, samples, metrics = run_conversion(
        pairs, runtime.bundle.segmenter, cfg.convert
    )
    write_gres_jsonl(samples, args.out)
    if args.res:
        write_res_jsonl(masks, args.res)
    print_report(metrics.as_dict())
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    resolve_config(args)  # validate config/flags even though stats needs none of it
    pairs = read_manifest(args.input)
    by_strategy: dict[str, int] = {}
    by_band: dict[str, int] = {}
    for p in pairs:
        by_strategy[p.strategy.value] = by_strategy.get(p.strategy.value, 0) + 1
        by_band[p.caption.band] = by_band.get(p.caption.band, 0) + 1
    counts = status_counts(pairs)
    terminal = sum(v for k, v in counts.items() if k != Status.RAW.value)
    print_report(
        {
            "total": len(pairs),
            "by_status": counts,
            "by_strategy": dict(sorted(by_strategy.items())),
            "by_band": dict(sorted(by_band.items())),
            "terminal": terminal,
        }
    )
    return 0


# --------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of dotted key = value lines")
    common.add_argument("--seed", type=int, help="override backend.mock_seed")
    common.add_argument("--mock", action="store_true", help="force all-mock backends")
    common.add_argument(
        "--endpoint", action="append", metavar="NAME=URL",
        help="route one client over HTTP (repeatable)",
    )
    common.add_argument("--parallelism", type=int, help="worker pool size (0 = cores)")
    common.add_argument("--resume", action="store_true", help="continue a killed run")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override any dotted config key (repeatable)",
    )

    parser = argparse.ArgumentParser(
        prog="d2af",
        description="Generate, filter, analyze, and convert region-text pseudo labels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", parents=[common], help="produce raw pairs")
    p.add_argument("--images", help="image directory with index.jsonl")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("filter", parents=[common], help="run both filter stages")
    p.add_argument("--in", dest="input", required=True, help="input manifest")
    p.add_argument("--model", required=True, help="fitted density model file")
    p.add_argument("--images", help="image directory with index.jsonl")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("fit-gmm", parents=[common], help="fit the reference density model")
    p.add_argument("--captions", help="text file, one reference caption per line")
    p.add_argument("--out", required=True, help="model file path")
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("analyze", parents=[common], help="subset/quantity reports")
    p.add_argument("inputs", nargs="+", help="manifests to compare in order")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--table", action="store_true", help="print the aligned table")
    p.add_argument("--features", help="write feature CSV for the last manifest")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("convert", parents=[common], help="masks and referring samples")
    p.add_argument("--in", dest="input", required=True, help="filtered manifest")
    p.add_argument("--out", required=True, help="output samples JSONL")
    p.add_argument("--res", help="also write the per-pair mask manifest here")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("stats", parents=[common], help="manifest summary counts")
    p.add_argument("--in", dest="input", required=True, help="manifest to summarize")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        log.error("%s", exc)
        return 1
    except BackendError as exc:
        log.error("backend failure: %s", exc)
        return 3
    except (DataError, StorageError) as exc:
        log.error("%s", exc)
        return 2
    except PipelineError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
