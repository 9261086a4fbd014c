"""Tests for embedding reduction, EM mixture fitting, and band filtering."""

import math
import random

import numpy as np
import pytest
from mpmath import mp

from d2af.annotate import AnnotationConfig, CategoryList, run_annotation
from d2af.clients.mock import CorpusSpec, MockCorpus
from d2af.core import Status
from d2af.distribution import (
    BandResult,
    DistributionConfig,
    FittedModel,
    MixtureModel,
    Reducer,
    band_filter,
    ceiling_threshold,
    embed_corpus,
    fit_gmm,
    fit_reducer,
    fit_reference_model,
    load_model,
    log_density,
    log_density_batch,
    run_distribution_stage,
    save_model,
)
from d2af.errors import ConfigError, DataError


def single_gaussian(mean, var, floor=1e-6) -> MixtureModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_1d(np.asarray(var, dtype=np.float64))
    return MixtureModel(
        k=1,
        dim=mean.shape[0],
        weights=np.array([1.0]),
        means=mean[None, :],
        covariances=var[None, :],
        variance_floor=floor,
    )


def mixture(weights, means, covs, floor=1e-6) -> MixtureModel:
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    return MixtureModel(
        k=weights.shape[0],
        dim=means.shape[1],
        weights=weights,
        means=means,
        covariances=covs,
        variance_floor=floor,
    )


class TestConfig:
    def test_defaults(self):
        cfg = DistributionConfig()
        assert cfg.k == 16
        assert cfg.reduce_dim == 64
        assert cfg.variance_floor == 1e-6
        assert cfg.log_density_floor == 0.0
        assert cfg.ceiling_percentile == 80.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"k": 0},
            {"reduce_dim": 0},
            {"variance_floor": 0.0},
            {"em_tol": 0.0},
            {"em_max_iters": 0},
            {"ceiling_percentile": 0.0},
            {"ceiling_percentile": 100.5},
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            DistributionConfig(**kwargs)

    def test_full_percentile_allowed(self):
        # percentile 100 makes the ceiling vacuous (threshold = +inf),
        # the pass-through setting for the redundancy rule.
        assert DistributionConfig(ceiling_percentile=100.0).ceiling_percentile == 100.0


class TestReducer:
    def test_no_reduction_is_exact_identity(self):
        rng = np.random.default_rng(1)
        matrix = rng.normal(size=(30, 8))
        for reduce_dim in (None, 8, 64):
            reducer = fit_reducer(matrix, reduce_dim)
            assert reducer.dim == 8
            np.testing.assert_array_equal(reducer.transform(matrix), matrix)

    def test_rank_two_corpus_reconstructs_exactly(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=6)
        u /= np.linalg.norm(u)
        v = rng.normal(size=6)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        coeffs = rng.normal(size=(200, 2)) * [3.0, 1.5]
        center = rng.normal(size=6)
        matrix = center + coeffs[:, :1] * u + coeffs[:, 1:] * v
        reducer = fit_reducer(matrix, 2)
        reduced = reducer.transform(matrix)
        assert reduced.shape == (200, 2)
        reconstructed = reduced @ reducer.components + reducer.mean
        np.testing.assert_allclose(reconstructed, matrix, atol=1e-9)
        want = np.linalg.norm(matrix[:50, None] - matrix[None, :50], axis=2)
        got = np.linalg.norm(reduced[:50, None] - reduced[None, :50], axis=2)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_fit_is_deterministic(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(40, 5))
        a = fit_reducer(matrix, 3)
        b = fit_reducer(matrix, 3)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.components, b.components)

    def test_components_are_orthonormal(self):
        rng = np.random.default_rng(4)
        reducer = fit_reducer(rng.normal(size=(50, 7)), 4)
        np.testing.assert_allclose(
            reducer.components @ reducer.components.T, np.eye(4), atol=1e-9
        )

    def test_too_few_rows_rejected(self):
        with pytest.raises(DataError):
            fit_reducer(np.zeros((3, 10)), 5)

    def test_transform_dimension_mismatch(self):
        reducer = fit_reducer(np.random.default_rng(0).normal(size=(20, 6)), 2)
        with pytest.raises(ConfigError):
            reducer.transform(np.zeros((4, 7)))


class TestEmbedCorpus:
    def test_identical_captions_identical_rows(self):
        corpus = MockCorpus(CorpusSpec(images=2, seed=0))
        matrix = embed_corpus(["dog by tree", "dog by tree"], corpus.embedder())
        np.testing.assert_array_equal(matrix[0], matrix[1])
        assert matrix.shape == (2, 16)

    def test_reducer_dimension_mismatch_is_config_error(self):
        corpus = MockCorpus(CorpusSpec(images=2, seed=0))
        reducer = fit_reducer(np.random.default_rng(0).normal(size=(20, 6)), 2)
        with pytest.raises(ConfigError):
            embed_corpus(["dog"], corpus.embedder(), reducer=reducer)

    def test_empty_caption_list_rejected(self):
        corpus = MockCorpus(CorpusSpec(images=2, seed=0))
        with pytest.raises(DataError):
            embed_corpus([], corpus.embedder())


class TestFitGmm:
    def test_single_component_equals_sample_moments(self):
        rng = np.random.default_rng(7)
        matrix = rng.normal(size=(50, 3)) * [1.0, 2.0, 0.5] + [4.0, -1.0, 0.0]
        model = fit_gmm(matrix, DistributionConfig(k=1, reduce_dim=None, seed=0))
        np.testing.assert_allclose(model.weights, [1.0], atol=1e-12)
        np.testing.assert_allclose(model.means[0], matrix.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(model.covariances[0], matrix.var(axis=0), atol=1e-9)

    def test_two_component_synthetic_recovery(self):
        rng = np.random.default_rng(0)
        a = rng.normal(loc=(-5.0, 0.0), scale=1.0, size=(5000, 2))
        b = rng.normal(loc=(5.0, 0.0), scale=1.0, size=(5000, 2))
        matrix = np.concatenate([a, b])
        model = fit_gmm(matrix, DistributionConfig(k=2, seed=1))
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order][0], (-5.0, 0.0), atol=0.1)
        np.testing.assert_allclose(model.means[order][1], (5.0, 0.0), atol=0.1)
        np.testing.assert_allclose(model.weights, [0.5, 0.5], atol=0.02)
        np.testing.assert_allclose(model.covariances, 1.0, atol=0.1)

    def test_log_likelihood_history_non_decreasing(self):
        corpus = MockCorpus(CorpusSpec(images=2, seed=0))
        matrix = embed_corpus(corpus.reference_captions(per_head=16), corpus.embedder())
        model = fit_gmm(matrix, DistributionConfig(k=16, seed=0))
        history = model.stats.log_likelihood_history
        assert len(history) >= 2
        for prev, curr in zip(history, history[1:]):
            assert curr >= prev - 1e-10 * max(1.0, abs(prev))
        assert model.stats.converged

    def test_all_identical_points_floor_variance(self):
        matrix = np.tile([2.0, -3.0], (12, 1))
        model = fit_gmm(matrix, DistributionConfig(k=3, seed=0))
        assert np.all(model.covariances == model.variance_floor)
        assert math.isfinite(log_density(model, np.array([2.0, -3.0])))

    def test_fewer_rows_than_components_rejected(self):
        with pytest.raises(DataError):
            fit_gmm(np.zeros((3, 2)), DistributionConfig(k=4))

    def test_non_finite_rows_rejected(self):
        matrix = np.zeros((5, 2))
        matrix[1, 0] = np.nan
        with pytest.raises(DataError):
            fit_gmm(matrix, DistributionConfig(k=1))

    def test_fit_is_deterministic(self):
        rng = np.random.default_rng(11)
        matrix = rng.normal(size=(200, 4))
        a = fit_gmm(matrix, DistributionConfig(k=3, seed=5))
        b = fit_gmm(matrix, DistributionConfig(k=3, seed=5))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.covariances, b.covariances)


def mp_log_density(model: MixtureModel, vector: np.ndarray) -> float:
    """Extended-precision oracle for the mixture log-density."""
    with mp.workdps(60):
        total = mp.mpf(0)
        for comp in range(model.k):
            weight = mp.mpf(float(model.weights[comp]))
            if weight == 0:
                continue
            exponent = mp.mpf(0)
            log_norm = mp.mpf(0)
            for j in range(model.dim):
                var = mp.mpf(float(model.covariances[comp, j]))
                diff = mp.mpf(float(vector[j])) - mp.mpf(float(model.means[comp, j]))
                exponent += diff * diff / var
                log_norm += mp.log(2 * mp.pi * var)
            total += weight * mp.exp(-(log_norm + exponent) / 2)
        return float(mp.log(total))


class TestLogDensity:
    def test_standard_normal_at_mean(self):
        model = single_gaussian([0.0], [1.0])
        assert log_density(model, np.array([0.0])) == pytest.approx(
            -0.9189385332046727, abs=1e-12
        )

    def test_mean_beats_ten_sigma(self):
        model = mixture(
            [0.7, 0.3], [[0.0, 0.0], [8.0, 8.0]], [[1.0, 1.0], [1.0, 1.0]]
        )
        at_mean = log_density(model, np.array([0.0, 0.0]))
        far = log_density(model, np.array([10.0, 0.0]))
        assert at_mean >= far

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(21)
        weights = rng.uniform(0.1, 1.0, size=4)
        weights /= weights.sum()
        model = mixture(
            weights,
            rng.uniform(-5.0, 5.0, size=(4, 64)),
            rng.uniform(0.5, 2.0, size=(4, 64)),
        )
        points = np.concatenate(
            [
                rng.normal(scale=3.0, size=(50, 64)),
                rng.uniform(-1000.0, 1000.0, size=(50, 64)),
            ]
        )
        got = log_density_batch(model, points)
        assert np.all(np.isfinite(got))
        for i in range(100):
            want = mp_log_density(model, points[i])
            assert got[i] == pytest.approx(want, rel=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(22)
        model = mixture(
            [0.5, 0.5], rng.normal(size=(2, 3)), rng.uniform(0.5, 1.5, size=(2, 3))
        )
        points = rng.normal(size=(10, 3))
        batch = log_density_batch(model, points)
        for i in range(10):
            assert batch[i] == log_density(model, points[i])

    def test_dimension_mismatch_rejected(self):
        model = single_gaussian([0.0, 0.0], [1.0, 1.0])
        with pytest.raises(DataError):
            log_density(model, np.array([1.0]))
        with pytest.raises(DataError):
            log_density_batch(model, np.zeros((3, 5)))

    def test_density_integrates_to_one_1d(self):
        model = mixture([0.3, 0.7], [[-2.0], [3.0]], [[0.5], [2.0]])
        lo = -2.0 - 12.0 * math.sqrt(0.5)
        hi = 3.0 + 12.0 * math.sqrt(2.0)
        grid = np.linspace(lo, hi, 40001)
        values = np.exp(log_density_batch(model, grid[:, None]))
        assert np.trapezoid(values, grid) == pytest.approx(1.0, abs=1e-3)

    def test_density_integrates_to_one_2d(self):
        model = mixture(
            [0.5, 0.5],
            [[-3.0, 0.0], [3.0, 1.0]],
            [[1.0, 0.5], [2.0, 1.0]],
        )
        span = 12.0 * math.sqrt(2.0)
        xs = np.linspace(-3.0 - span, 3.0 + span, 801)
        ys = np.linspace(0.0 - span, 1.0 + span, 801)
        grid_x, grid_y = np.meshgrid(xs, ys, indexing="ij")
        points = np.column_stack([grid_x.ravel(), grid_y.ravel()])
        values = np.exp(log_density_batch(model, points)).reshape(801, 801)
        integral = np.trapezoid(np.trapezoid(values, ys, axis=1), xs)
        assert integral == pytest.approx(1.0, abs=1e-3)


class TestCeilingThreshold:
    def test_exact_fraction_rank(self):
        scores = np.arange(100, dtype=np.float64)
        # m = ceil(80) = 80 -> threshold is the 81st smallest value
        assert ceiling_threshold(scores, 80.0) == 80.0

    def test_fractional_rank_rounds_up(self):
        scores = np.arange(7, dtype=np.float64)
        # m = ceil(80 * 7 / 100) = ceil(5.6) = 6 -> threshold scores[6]
        assert ceiling_threshold(scores, 80.0) == 6.0

    def test_rank_equal_to_n_means_no_ceiling(self):
        scores = np.arange(3, dtype=np.float64)
        # m = ceil(2.4) = 3 == n -> nothing above the ceiling
        assert ceiling_threshold(scores, 80.0) == math.inf

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ceiling_threshold(np.array([]), 50.0)


class TestBandFilter:
    def make_controlled(self, n=100):
        """1-D sharp Gaussian: density decreases with |f|, all above floor."""
        model = single_gaussian([0.0], [1e-4])
        candidates = [(f"c{i:03d}", np.array([i * 1e-4])) for i in range(n)]
        return model, candidates

    def test_hundred_distinct_eighty_kept(self):
        model, candidates = self.make_controlled()
        cfg = DistributionConfig(ceiling_percentile=80.0)
        result = band_filter(model, candidates, cfg)
        counts = {}
        for status in result.decisions.values():
            counts[status] = counts.get(status, 0) + 1
        assert counts == {Status.KEPT: 80, Status.DROPPED_REDUNDANT: 20}
        # counting oracle: the kept set is exactly the 80 lowest densities
        ranked = sorted(result.log_densities, key=result.log_densities.get)
        assert {pid for pid in ranked[:80]} == {
            pid for pid, s in result.decisions.items() if s is Status.KEPT
        }
        assert result.tau_high == sorted(result.log_densities.values())[80]

    def test_floor_rule_marks_outlier(self):
        model, candidates = self.make_controlled(10)
        candidates.append(("far", np.array([100.0])))  # density ~ exp(-5e7)
        cfg = DistributionConfig(ceiling_percentile=90.0)
        result = band_filter(model, candidates, cfg)
        assert result.decisions["far"] is Status.DROPPED_OUTLIER
        assert result.log_densities["far"] < -50.0

    def test_floor_takes_precedence_over_ceiling(self):
        model = single_gaussian([0.0], [1.0])  # peak density < 1, all below floor
        candidates = [(f"c{i}", np.array([float(i)])) for i in range(5)]
        result = band_filter(model, candidates, DistributionConfig(ceiling_percentile=50.0))
        assert all(s is Status.DROPPED_OUTLIER for s in result.decisions.values())

    def test_permutation_invariance(self):
        model, candidates = self.make_controlled(37)
        cfg = DistributionConfig(ceiling_percentile=72.0)
        baseline = band_filter(model, candidates, cfg)
        shuffled = list(candidates)
        random.Random(9).shuffle(shuffled)
        again = band_filter(model, shuffled, cfg)
        assert again.decisions == baseline.decisions
        assert again.tau_high == baseline.tau_high

    def test_log_space_equals_density_space(self):
        rng = np.random.default_rng(31)
        model = mixture(
            [0.4, 0.6],
            rng.normal(size=(2, 2)),
            rng.uniform(0.05, 0.2, size=(2, 2)),
        )
        candidates = [(f"c{i}", rng.normal(scale=1.5, size=2)) for i in range(50)]
        cfg = DistributionConfig(ceiling_percentile=80.0, log_density_floor=-3.0)
        result = band_filter(model, candidates, cfg)
        density_floor = math.exp(cfg.log_density_floor)
        density_tau = math.exp(result.tau_high)
        for pid, score in result.log_densities.items():
            density = math.exp(score)
            if density <= density_floor:
                want = Status.DROPPED_OUTLIER
            elif density >= density_tau:
                want = Status.DROPPED_REDUNDANT
            else:
                want = Status.KEPT
            assert result.decisions[pid] is want

    def test_empty_candidates(self):
        model = single_gaussian([0.0], [1.0])
        result = band_filter(model, [], DistributionConfig())
        assert result == BandResult(decisions={}, log_densities={}, tau_high=math.inf)

    def test_duplicate_ids_rejected(self):
        model = single_gaussian([0.0], [1.0])
        pairs = [("a", np.array([0.0])), ("a", np.array([1.0]))]
        with pytest.raises(DataError):
            band_filter(model, pairs, DistributionConfig())


class TestModelFile:
    def fitted(self) -> FittedModel:
        corpus = MockCorpus(CorpusSpec(images=2, seed=0))
        cfg = DistributionConfig(k=4, seed=3, ceiling_percentile=77.5)
        return fit_reference_model(
            corpus.reference_captions(per_head=8), corpus.embedder(), cfg
        )

    def test_round_trip_is_lossless(self, tmp_path):
        model = self.fitted()
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.mixture.weights, model.mixture.weights)
        np.testing.assert_array_equal(loaded.mixture.means, model.mixture.means)
        np.testing.assert_array_equal(
            loaded.mixture.covariances, model.mixture.covariances
        )
        np.testing.assert_array_equal(loaded.reducer.mean, model.reducer.mean)
        np.testing.assert_array_equal(loaded.reducer.components, model.reducer.components)
        assert loaded.config == model.config
        assert loaded.mixture.k == model.mixture.k
        assert loaded.mixture.dim == model.mixture.dim

    def test_loaded_model_scores_identically(self, tmp_path):
        model = self.fitted()
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        rng = np.random.default_rng(5)
        points = rng.normal(scale=5.0, size=(20, model.mixture.dim))
        np.testing.assert_array_equal(
            log_density_batch(loaded.mixture, points),
            log_density_batch(model.mixture, points),
        )

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"schema": "something_else"}')
        with pytest.raises(DataError):
            load_model(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_model(tmp_path / "absent.json")


@pytest.fixture(scope="module")
def planted_stage():
    spec = CorpusSpec(images=40, seed=5, outlier=10, redundant=10)
    corpus = MockCorpus(spec)
    cfg = AnnotationConfig(category_list=CategoryList(tuple(corpus.category_list())))
    pairs, _ = run_annotation(corpus.image_source(), cfg, corpus.clients())
    dist_cfg = DistributionConfig(k=16, seed=0, ceiling_percentile=95.0)
    model = fit_reference_model(corpus.reference_captions(), corpus.embedder(), dist_cfg)
    out, metrics = run_distribution_stage(pairs, model, corpus.embedder())
    return corpus, pairs, model, out, metrics


class TestDistributionStage:
    def test_planted_counts_exact(self, planted_stage):
        corpus, pairs, _, out, metrics = planted_stage
        assert metrics.pairs_in == len(pairs) == 200
        assert metrics.kept == 180
        assert metrics.dropped_outlier == 10
        assert metrics.dropped_redundant == 10
        assert math.isfinite(metrics.tau_high)

    def test_every_planted_pair_got_the_right_verdict(self, planted_stage):
        corpus, _, _, out, _ = planted_stage
        expected = corpus.expected_index()
        verdict = {
            "outlier": Status.DROPPED_OUTLIER,
            "redundant": Status.DROPPED_REDUNDANT,
        }
        for pair in out:
            plant = expected[(pair.image_id, pair.caption.text)].plant
            assert pair.status is verdict.get(plant, Status.KEPT), (
                f"{pair.pair_id} planted as {plant} ended as {pair.status}"
            )

    def test_log_density_recorded_on_every_pair(self, planted_stage):
        _, _, _, out, metrics = planted_stage
        for pair in out:
            assert pair.scores.log_density is not None
            if pair.status is Status.KEPT:
                assert 0.0 < pair.scores.log_density < metrics.tau_high

    def test_output_preserves_input_order(self, planted_stage):
        _, pairs, _, out, _ = planted_stage
        assert [p.pair_id for p in out] == [p.pair_id for p in pairs]

    def test_shuffled_input_same_decisions(self, planted_stage):
        corpus, pairs, model, out, _ = planted_stage
        shuffled = list(pairs)
        random.Random(17).shuffle(shuffled)
        out2, _ = run_distribution_stage(shuffled, model, corpus.embedder())
        want = {p.pair_id: (p.status, p.scores.log_density) for p in out}
        got = {p.pair_id: (p.status, p.scores.log_density) for p in out2}
        assert got == want

    def test_rejects_non_raw_input(self, planted_stage):
        corpus, pairs, model, _, _ = planted_stage
        poisoned = [pairs[0].with_status(Status.KEPT)] + list(pairs[1:])
        with pytest.raises(DataError):
            run_distribution_stage(poisoned, model, corpus.embedder())

    def test_empty_input(self, planted_stage):
        _, _, model, _, _ = planted_stage
        corpus = MockCorpus(CorpusSpec(images=2, seed=1))
        out, metrics = run_distribution_stage([], model, corpus.embedder())
        assert out == [] and metrics.pairs_in == 0

    def test_filter_time_config_overrides_model_echo(self, planted_stage):
        # floor and ceiling are selection knobs: the stage call decides them
        corpus, pairs, model, _, _ = planted_stage
        wide_open = DistributionConfig(
            k=model.config.k,
            seed=model.config.seed,
            log_density_floor=-math.inf,
            ceiling_percentile=100.0,
        )
        out, metrics = run_distribution_stage(
            pairs, model, corpus.embedder(), wide_open
        )
        assert metrics.kept == len(pairs)
        assert metrics.tau_high == math.inf
        assert all(p.status is Status.KEPT for p in out)
