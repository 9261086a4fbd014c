"""End-to-end command-line driver tests over the seeded mock backend."""

from __future__ import annotations

import json
import logging
import subprocess
import sys

import pytest

from d2af import cli
from d2af.checkpoint import load_checkpoint
from d2af.clients.mock import CorpusSpec, MockCorpus
from d2af.core import Status
from d2af.imageio import materialize
from d2af.manifest import read_manifest

CONF = """\
backend.mock_images = 8
backend.mock_seed = 7
backend.force_mock = true
distribution.ceiling_percentile = 97.5
run.parallelism = 1
"""

N_PAIRS = CorpusSpec(images=8, seed=7).n_raw_pairs  # the corpus the config describes


@pytest.fixture()
def conf(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(CONF)
    return path


@pytest.fixture()
def quiet_logs(caplog):
    caplog.set_level(logging.INFO, logger="d2af")
    return caplog


def run(argv, capsys) -> tuple[int, str]:
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().out


# --------------------------------------------------------------------------
# annotate


class TestAnnotate:
    def test_mock_end_to_end(self, conf, tmp_path, capsys):
        out = tmp_path / "raw.jsonl"
        code, _ = run(["annotate", "--config", conf, "--out", out], capsys)
        assert code == 0
        pairs = read_manifest(out)
        assert len(pairs) == N_PAIRS
        assert all(p.status is Status.RAW for p in pairs)
        cp = load_checkpoint(cli.checkpoint_path(out))
        assert cp.complete and len(cp.processed) == 8
        assert not (tmp_path / "raw.jsonl.parts").exists()

    def test_two_runs_byte_identical(self, conf, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run(["annotate", "--config", conf, "--out", a], capsys)[0] == 0
        assert run(["annotate", "--config", conf, "--out", b], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_parallelism_does_not_change_output(self, conf, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run(["annotate", "--config", conf, "--out", a, "--parallelism", 1], capsys)
        run(["annotate", "--config", conf, "--out", b, "--parallelism", 4], capsys)
        assert a.read_bytes() == b.read_bytes()

    def test_seed_flag_overrides_config(self, conf, tmp_path, capsys):
        a, b, c = (tmp_path / n for n in ("a.jsonl", "b.jsonl", "c.jsonl"))
        run(["annotate", "--config", conf, "--out", a], capsys)
        run(["annotate", "--config", conf, "--seed", 9, "--out", b], capsys)
        run(["annotate", "--config", conf, "--seed", 7, "--out", c], capsys)
        assert a.read_bytes() != b.read_bytes()
        assert a.read_bytes() == c.read_bytes()

    def test_resume_after_kill_matches_uninterrupted(
        self, conf, tmp_path, capsys, monkeypatch, quiet_logs
    ):
        reference = tmp_path / "ref.jsonl"
        run(["annotate", "--config", conf, "--out", reference], capsys)

        out = tmp_path / "killed.jsonl"
        real = cli.annotate_image
        calls = {"n": 0}

        def dying(record, cfg, bundle, metrics):
            calls["n"] += 1
            if calls["n"] > 3:
                raise RuntimeError("simulated kill")
            return real(record, cfg, bundle, metrics)

        with monkeypatch.context() as m:
            m.setattr(cli, "annotate_image", dying)
            with pytest.raises(RuntimeError, match="simulated kill"):
                cli.main(["annotate", "--config", str(conf), "--out", str(out)])
        capsys.readouterr()

        # three images persisted, run not complete, no final manifest
        cp = load_checkpoint(cli.checkpoint_path(out))
        assert cp.processed == ["img00000", "img00001", "img00002"]
        assert not cp.complete
        assert not out.exists()
        parts = out.with_name(out.name + ".parts")
        assert len(list(parts.glob("*.jsonl"))) == 3

        code, _ = run(["annotate", "--config", conf, "--out", out, "--resume"], capsys)
        assert code == 0
        assert "3 already done" in quiet_logs.text
        assert out.read_bytes() == reference.read_bytes()
        assert load_checkpoint(cli.checkpoint_path(out)).complete
        assert not parts.exists()

    def test_fresh_run_after_kill_also_matches(
        self, conf, tmp_path, capsys, monkeypatch
    ):
        reference = tmp_path / "ref.jsonl"
        run(["annotate", "--config", conf, "--out", reference], capsys)
        out = tmp_path / "killed.jsonl"
        real = cli.annotate_image
        calls = {"n": 0}

        def dying(record, cfg, bundle, metrics):
            calls["n"] += 1
            if calls["n"] > 2:
                raise RuntimeError("boom")
            return real(record, cfg, bundle, metrics)

        with monkeypatch.context() as m:
            m.setattr(cli, "annotate_image", dying)
            with pytest.raises(RuntimeError):
                cli.main(["annotate", "--config", str(conf), "--out", str(out)])
        capsys.readouterr()
        code, _ = run(["annotate", "--config", conf, "--out", out], capsys)
        assert code == 0
        assert out.read_bytes() == reference.read_bytes()

    def test_resume_with_changed_config_refused(
        self, conf, tmp_path, capsys, monkeypatch, quiet_logs
    ):
        out = tmp_path / "killed.jsonl"
        real = cli.annotate_image
        calls = {"n": 0}

        def dying(record, cfg, bundle, metrics):
            calls["n"] += 1
            if calls["n"] > 3:
                raise RuntimeError("boom")
            return real(record, cfg, bundle, metrics)

        with monkeypatch.context() as m:
            m.setattr(cli, "annotate_image", dying)
            with pytest.raises(RuntimeError):
                cli.main(["annotate", "--config", str(conf), "--out", str(out)])
        capsys.readouterr()
        code, _ = run(
            [
                "annotate", "--config", conf, "--out", out, "--resume",
                "--set", "consistency.alpha=0.4",
            ],
            capsys,
        )
        assert code == 1
        assert "refusing to resume" in quiet_logs.text
        assert "configuration changed" in quiet_logs.text

    def test_resume_when_complete_is_noop(self, conf, tmp_path, capsys, quiet_logs):
        out = tmp_path / "raw.jsonl"
        run(["annotate", "--config", conf, "--out", out], capsys)
        before = out.read_bytes()
        code, _ = run(["annotate", "--config", conf, "--out", out, "--resume"], capsys)
        assert code == 0
        assert "already complete" in quiet_logs.text
        assert out.read_bytes() == before

    def test_directory_source_matches_synthesized(self, conf, tmp_path, capsys):
        # materialized PNG dir and the in-memory mock source give equal manifests
        corpus = MockCorpus(CorpusSpec(images=8, seed=7))
        images = tmp_path / "images"
        materialize(corpus.image_source(), images)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run(["annotate", "--config", conf, "--out", a], capsys)
        code, _ = run(
            ["annotate", "--config", conf, "--images", images, "--out", b], capsys
        )
        assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unreadable_image_fails_run_at_default_bound(
        self, conf, tmp_path, capsys, quiet_logs
    ):
        corpus = MockCorpus(CorpusSpec(images=8, seed=7))
        images = tmp_path / "images"
        materialize(corpus.image_source(), images)
        victim = json.loads((images / "index.jsonl").read_text().splitlines()[0])
        (images / victim["path"]).write_bytes(b"this is no longer a PNG")
        out = tmp_path / "raw.jsonl"
        code, _ = run(
            ["annotate", "--config", conf, "--images", images, "--out", out], capsys
        )
        assert code == 2
        assert "skipping unreadable image" in quiet_logs.text
        assert "not under the bound" in quiet_logs.text
        # the other seven images still made it into the manifest
        pairs = read_manifest(out)
        assert {p.image_id for p in pairs} == {f"img{i:05d}" for i in range(1, 8)}

    def test_failure_rate_bound_tolerates_one_bad_image(
        self, conf, tmp_path, capsys, quiet_logs
    ):
        corpus = MockCorpus(CorpusSpec(images=8, seed=7))
        images = tmp_path / "images"
        materialize(corpus.image_source(), images)
        victim = json.loads((images / "index.jsonl").read_text().splitlines()[0])
        (images / victim["path"]).write_bytes(b"garbage")
        out = tmp_path / "raw.jsonl"
        code, _ = run(
            [
                "annotate", "--config", conf, "--images", images, "--out", out,
                "--set", "run.max_item_failure_rate=0.2",
            ],
            capsys,
        )
        assert code == 0  # 1/8 = 0.125 < 0.2
        assert "skipping unreadable image" in quiet_logs.text

    def test_explicit_category_file_is_honored_in_mock_mode(
        self, conf, tmp_path, capsys
    ):
        cats = tmp_path / "cats.txt"
        cats.write_text("person\n")  # only one of the mock categories
        out = tmp_path / "raw.jsonl"
        code, _ = run(
            [
                "annotate", "--config", conf, "--out", out,
                "--set", f"annotate.categories_file={cats}",
            ],
            capsys,
        )
        assert code == 0
        pairs = read_manifest(out)
        closed = [p for p in pairs if p.strategy.value == "closed_set"]
        assert {p.category for p in closed} == {"person"}
        assert len(closed) == 3  # one mock scene holds a person


# --------------------------------------------------------------------------
# fit-gmm


class TestFitGmm:
    def test_mock_reference_fit_and_bit_identical_reruns(self, conf, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        code, out_text = run(["fit-gmm", "--config", conf, "--out", a], capsys)
        assert code == 0
        report = json.loads(out_text)
        assert report["converged"] is True
        assert report["k"] == 16
        code, _ = run(["fit-gmm", "--config", conf, "--out", b], capsys)
        assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_caption_file_input(self, conf, tmp_path, capsys):
        corpus = MockCorpus(CorpusSpec(images=8, seed=7))
        captions = tmp_path / "caps.txt"
        captions.write_text("\n".join(corpus.reference_captions(per_head=16)) + "\n")
        model = tmp_path / "model.json"
        code, out_text = run(
            ["fit-gmm", "--config", conf, "--captions", captions, "--out", model],
            capsys,
        )
        assert code == 0
        assert json.loads(out_text)["captions"] == len(
            corpus.reference_captions(per_head=16)
        )

    def test_too_few_captions_names_both_numbers(
        self, conf, tmp_path, capsys, quiet_logs
    ):
        captions = tmp_path / "caps.txt"
        captions.write_text("one caption\nanother caption\na third\n")
        code, _ = run(
            [
                "fit-gmm", "--config", conf, "--captions", captions,
                "--out", tmp_path / "m.json",
            ],
            capsys,
        )
        assert code == 2
        assert "16" in quiet_logs.text and "3" in quiet_logs.text

    def test_endpoints_require_caption_file(self, tmp_path, capsys, quiet_logs):
        conf = tmp_path / "run.conf"
        conf.write_text("backend.endpoint.embedder = http://127.0.0.1:1\n")
        code, _ = run(["fit-gmm", "--config", conf, "--out", tmp_path / "m.json"], capsys)
        assert code == 1
        assert "--captions is required" in quiet_logs.text


# --------------------------------------------------------------------------
# filter


@pytest.fixture()
def annotated(conf, tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    model = tmp_path / "model.json"
    assert cli.main(["annotate", "--config", str(conf), "--out", str(raw)]) == 0
    assert cli.main(["fit-gmm", "--config", str(conf), "--out", str(model)]) == 0
    capsys.readouterr()
    return raw, model


class TestFilter:
    def test_end_to_end(self, conf, tmp_path, capsys, annotated):
        raw, model = annotated
        out = tmp_path / "filtered.jsonl"
        code, out_text = run(
            ["filter", "--config", conf, "--in", raw, "--model", model, "--out", out],
            capsys,
        )
        assert code == 0
        report = json.loads(out_text)
        assert report["pairs_in"] == N_PAIRS
        inputs = read_manifest(raw)
        outputs = read_manifest(out)
        # conservation: same pairs, same order, all terminal
        assert [p.pair_id for p in outputs] == [p.pair_id for p in inputs]
        assert all(p.status is not Status.RAW for p in outputs)
        counted = sum(report["status_counts"].values())
        assert counted == N_PAIRS
        assert report["status_counts"]["raw"] == 0

    def test_filter_is_idempotent(self, conf, tmp_path, capsys, annotated):
        raw, model = annotated
        once = tmp_path / "once.jsonl"
        twice = tmp_path / "twice.jsonl"
        run(["filter", "--config", conf, "--in", raw, "--model", model, "--out", once], capsys)
        code, out_text = run(
            ["filter", "--config", conf, "--in", once, "--model", model, "--out", twice],
            capsys,
        )
        assert code == 0
        assert twice.read_bytes() == once.read_bytes()
        report = json.loads(out_text)
        assert report["consistency"]["pairs_in"] == 0  # nothing raw remained

    def test_pass_through_thresholds_keep_every_pair(
        self, conf, tmp_path, capsys, annotated
    ):
        raw, model = annotated
        out = tmp_path / "kept.jsonl"
        code, out_text = run(
            [
                "filter", "--config", conf, "--in", raw, "--model", model, "--out", out,
                "--set", "consistency.tau_spatial=0",
                "--set", "consistency.tau_semantic=-inf",
                "--set", "distribution.log_density_floor=-inf",
                "--set", "distribution.ceiling_percentile=100",
            ],
            capsys,
        )
        assert code == 0
        report = json.loads(out_text)
        assert report["status_counts"]["kept"] == N_PAIRS
        assert report["distribution"]["tau_high"] == "inf"
        assert all(p.status is Status.KEPT for p in read_manifest(out))

    def test_corrupt_line_fails_fast_with_line_number(
        self, conf, tmp_path, capsys, annotated, quiet_logs
    ):
        raw, model = annotated
        broken = tmp_path / "broken.jsonl"
        broken.write_bytes(raw.read_bytes() + b'{"schema": oops\n')
        code, _ = run(
            [
                "filter", "--config", conf, "--in", broken, "--model", model,
                "--out", tmp_path / "out.jsonl",
            ],
            capsys,
        )
        assert code == 2
        assert f"broken.jsonl:{N_PAIRS + 1}:" in quiet_logs.text

    def test_duplicate_pair_ids_rejected(
        self, conf, tmp_path, capsys, annotated, quiet_logs
    ):
        raw, model = annotated
        lines = raw.read_text().splitlines(keepends=True)
        doubled = tmp_path / "doubled.jsonl"
        doubled.write_text("".join(lines + [lines[0]]))
        code, _ = run(
            [
                "filter", "--config", conf, "--in", doubled, "--model", model,
                "--out", tmp_path / "out.jsonl",
            ],
            capsys,
        )
        assert code == 2
        assert "duplicate pair_id" in quiet_logs.text

    def test_missing_model_file(self, conf, tmp_path, capsys, annotated):
        raw, _ = annotated
        code, _ = run(
            [
                "filter", "--config", conf, "--in", raw,
                "--model", tmp_path / "ghost.json", "--out", tmp_path / "out.jsonl",
            ],
            capsys,
        )
        assert code == 2


# --------------------------------------------------------------------------
# analyze / convert / stats


@pytest.fixture()
def filtered(conf, tmp_path, capsys, annotated):
    raw, model = annotated
    out = tmp_path / "filtered.jsonl"
    assert (
        cli.main(
            [
                "filter", "--config", str(conf), "--in", str(raw),
                "--model", str(model), "--out", str(out),
            ]
        )
        == 0
    )
    capsys.readouterr()
    return out


class TestAnalyze:
    def test_table_output(self, conf, capsys, filtered):
        code, out_text = run(["analyze", "--config", conf, filtered], capsys)
        assert code == 0
        assert "total" in out_text and "filtered" in out_text

    def test_report_file(self, conf, tmp_path, capsys, filtered):
        report_path = tmp_path / "report.json"
        code, _ = run(
            ["analyze", "--config", conf, filtered, "--report", report_path], capsys
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        (manifest,) = report["manifests"]
        assert manifest["name"] == "filtered"
        assert manifest["total"] == len(read_manifest(filtered))

    def test_multiple_manifests_compared(self, conf, tmp_path, capsys, annotated, filtered):
        raw, _ = annotated
        code, out_text = run(["analyze", "--config", conf, raw, filtered, "--table"], capsys)
        assert code == 0
        assert "raw" in out_text and "filtered" in out_text

    def test_feature_export(self, conf, tmp_path, capsys, filtered):
        features = tmp_path / "features.csv"
        code, _ = run(
            ["analyze", "--config", conf, filtered, "--features", features], capsys
        )
        assert code == 0
        lines = features.read_text().splitlines()
        assert len(lines) == len(read_manifest(filtered)) + 1  # header + rows


class TestConvert:
    def test_outputs_and_determinism(self, conf, tmp_path, capsys, filtered):
        gres_a, res_a = tmp_path / "ga.jsonl", tmp_path / "ra.jsonl"
        gres_b, res_b = tmp_path / "gb.jsonl", tmp_path / "rb.jsonl"
        code, out_text = run(
            ["convert", "--config", conf, "--in", filtered, "--out", gres_a, "--res", res_a],
            capsys,
        )
        assert code == 0
        metrics = json.loads(out_text)
        pairs = read_manifest(filtered)
        kept = sum(1 for p in pairs if p.status is Status.KEPT)
        assert metrics["pairs_in"] == len(pairs)
        assert metrics["masks"] == kept
        assert len(res_a.read_text().splitlines()) == metrics["masks"]
        gres_lines = gres_a.read_text().splitlines()
        assert (
            len(gres_lines)
            == metrics["single_samples"]
            + metrics["multi_samples"]
            + metrics["no_target_samples"]
        )
        assert all(json.loads(l)["schema"] == "d2af_gres_v1" for l in gres_lines)
        run(
            ["convert", "--config", conf, "--in", filtered, "--out", gres_b, "--res", res_b],
            capsys,
        )
        assert gres_a.read_bytes() == gres_b.read_bytes()
        assert res_a.read_bytes() == res_b.read_bytes()


class TestStats:
    def test_summary(self, conf, capsys, filtered):
        code, out_text = run(["stats", "--config", conf, "--in", filtered], capsys)
        assert code == 0
        stats = json.loads(out_text)
        assert stats["total"] == N_PAIRS
        assert stats["terminal"] == N_PAIRS
        assert sum(stats["by_strategy"].values()) == N_PAIRS
        assert sum(stats["by_band"].values()) == N_PAIRS

    def test_missing_manifest_is_data_error(self, conf, tmp_path, capsys):
        code, _ = run(["stats", "--config", conf, "--in", tmp_path / "ghost.jsonl"], capsys)
        assert code == 2


# --------------------------------------------------------------------------
# flags, env, exit codes


class TestInvocation:
    def test_no_arguments_is_usage_error(self, capsys):
        assert cli.main([]) == 1
        capsys.readouterr()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli.main(["transmogrify"]) == 1
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        capsys.readouterr()

    def test_env_config_fallback(self, tmp_path, capsys, monkeypatch):
        conf = tmp_path / "env.conf"
        conf.write_text("backend.mock_images = 4\nbackend.mock_seed = 3\n")
        monkeypatch.setenv("D2AF_CONFIG", str(conf))
        out = tmp_path / "raw.jsonl"
        code, _ = run(["annotate", "--out", out], capsys)
        assert code == 0
        expected = CorpusSpec(images=4, seed=3).n_raw_pairs
        assert len(read_manifest(out)) == expected

    def test_config_flag_beats_env(self, tmp_path, capsys, monkeypatch):
        env_conf = tmp_path / "env.conf"
        env_conf.write_text("backend.mock_images = 4\n")
        monkeypatch.setenv("D2AF_CONFIG", str(env_conf))
        flag_conf = tmp_path / "flag.conf"
        flag_conf.write_text("backend.mock_images = 2\nbackend.mock_seed = 1\n")
        out = tmp_path / "raw.jsonl"
        code, _ = run(["annotate", "--config", flag_conf, "--out", out], capsys)
        assert code == 0
        assert len(read_manifest(out)) == CorpusSpec(images=2, seed=1).n_raw_pairs

    def test_bad_set_syntax(self, conf, tmp_path, capsys):
        code, _ = run(
            ["annotate", "--config", conf, "--out", tmp_path / "x.jsonl",
             "--set", "no_equals_here"],
            capsys,
        )
        assert code == 1

    def test_unknown_set_key(self, conf, tmp_path, capsys, quiet_logs):
        code, _ = run(
            ["annotate", "--config", conf, "--out", tmp_path / "x.jsonl",
             "--set", "nope.nothing=1"],
            capsys,
        )
        assert code == 1
        assert "unknown config key" in quiet_logs.text

    def test_missing_config_file(self, tmp_path, capsys):
        code, _ = run(
            ["annotate", "--config", tmp_path / "ghost.conf", "--out", tmp_path / "x"],
            capsys,
        )
        assert code == 1

    def test_mock_flag_conflicts_with_endpoint(self, tmp_path, capsys, quiet_logs):
        code, _ = run(
            [
                "annotate", "--mock", "--endpoint", "scorer=http://127.0.0.1:1",
                "--out", tmp_path / "x.jsonl",
            ],
            capsys,
        )
        assert code == 1
        assert "conflicts" in quiet_logs.text

    def test_endpoints_require_images_dir(self, tmp_path, capsys, quiet_logs):
        code, _ = run(
            [
                "annotate", "--endpoint", "captioner=http://127.0.0.1:1",
                "--out", tmp_path / "x.jsonl",
            ],
            capsys,
        )
        assert code == 1
        assert "--images is required" in quiet_logs.text

    def test_unreachable_endpoint_is_backend_failure(self, tmp_path, capsys, quiet_logs):
        corpus = MockCorpus(CorpusSpec(images=2, seed=1))
        images = tmp_path / "images"
        materialize(corpus.image_source(), images)
        code, _ = run(
            [
                "annotate", "--seed", 1,
                "--set", "backend.mock_images=2",
                "--endpoint", "captioner=http://127.0.0.1:1",
                "--images", images, "--out", tmp_path / "x.jsonl",
            ],
            capsys,
        )
        assert code == 3
        assert "backend failure" in quiet_logs.text

    def test_console_script_installed(self):
        out = subprocess.run(
            [sys.executable, "-c", "from d2af.cli import main; raise SystemExit(main(['--help']))"],
            capture_output=True,
            text=True,
        )
        assert out.returncode == 0
        assert "annotate" in out.stdout
