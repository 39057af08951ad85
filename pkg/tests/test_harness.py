"""Experiment harness: metrics, sampling, search, baselines, sweeps."""

import csv
import dataclasses
import math

import numpy as np
import pytest

import dualmtl.harness as harness
from dualmtl.dgp import TaskDataset, TaskSplits, generate, make_setting
from dualmtl.errors import ShapeError
from dualmtl.harness import (
    DESK_HP,
    HyperParams,
    TABLE_GRIDS,
    TrialResult,
    aggregate_rows,
    export_latents,
    relative_center_distances,
    rmse,
    run_hpsearch,
    run_replications,
    sample_hyperparams,
    train_config_for,
    train_stl_baseline,
)
from dualmtl.model import Centers, MtlModel, TaskHead, predict
from dualmtl.nncore import identity_net
from dualmtl.trainer import build_model, train

SMALL_HP = HyperParams(
    depth_s=2, width_s=8, q=4, depth_c=2, width_c=8, p=4,
    lambda_s=0.1, lambda_c=0.1, lambda_o=0.0,
    batch_size=64, learning_rate=0.005, epochs=30,
)


class TestRmse:
    def test_zero_for_exact_match(self):
        y = np.array([1.0, 2.0, 3.0])
        assert rmse(y, y) == 0.0

    def test_constant_offset(self):
        y = np.zeros(5)
        assert rmse(y + 1.7, y) == pytest.approx(1.7, rel=1e-15)

    def test_hand_value(self):
        assert rmse(np.array([1.0, 2.0]), np.zeros(2)) == pytest.approx(
            math.sqrt(5.0 / 2.0), rel=1e-15
        )

    def test_errors(self):
        with pytest.raises(ValueError):
            rmse(np.zeros(0), np.zeros(0))
        with pytest.raises(ShapeError):
            rmse(np.zeros(2), np.zeros(3))


class TestSampleHyperparams:
    def test_membership_over_many_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            hp = sample_hyperparams(rng)
            for name, grid in TABLE_GRIDS.items():
                assert getattr(hp, name) in grid

    def test_fixed_seed_reproduces_sequence(self):
        a = [sample_hyperparams(np.random.default_rng(42)) for _ in range(1)]
        b = [sample_hyperparams(np.random.default_rng(42)) for _ in range(1)]
        assert a == b
        seq1 = [sample_hyperparams(np.random.default_rng(7)) for _ in range(20)]
        seq2 = [sample_hyperparams(np.random.default_rng(7)) for _ in range(20)]
        assert seq1 == seq2

    def test_frequencies_close_to_uniform(self):
        n = 10000
        rng = np.random.default_rng(1)
        draws = [sample_hyperparams(rng) for _ in range(n)]
        for name, grid in TABLE_GRIDS.items():
            counts = {g: 0 for g in grid}
            for hp in draws:
                counts[getattr(hp, name)] += 1
            p = 1.0 / len(grid)
            sigma = math.sqrt(n * p * (1 - p))
            for g, c in counts.items():
                assert abs(c - n * p) <= 3 * sigma, (name, g, c)


def small_study(seed=0, n_r=30):
    return generate(make_setting("1", n_r=n_r, seed=seed))


class TestHpSearch:
    def test_single_trial_returns_it(self):
        study = small_study()
        rng = np.random.default_rng(3)
        best, results = run_hpsearch(study.tasks, 1, rng, epochs=2)
        assert len(results) == 1
        assert best == results[0].hp

    def test_selection_matches_independent_rescan(self):
        study = small_study()
        rng = np.random.default_rng(4)
        best, results = run_hpsearch(study.tasks, 3, rng, epochs=2)
        scored = [(t.val_mse, t.trial) for t in results if t.val_mse is not None]
        want_trial = min(scored)[1]
        assert best == results[want_trial].hp

    def test_tie_breaks_to_earliest_trial(self, monkeypatch):
        def fake_trial(args):
            _, hp, trial, _, _, _ = args
            return TrialResult(trial, hp, 1.0)  # all equal losses

        monkeypatch.setattr(harness, "_run_trial", fake_trial)
        study = small_study()
        rng = np.random.default_rng(5)
        best, results = run_hpsearch(study.tasks, 4, rng, epochs=2)
        assert best == results[0].hp

    def test_all_failures_raise(self, monkeypatch):
        def failing_trial(args):
            _, hp, trial, _, _, _ = args
            return TrialResult(trial, hp, None, error="boom")

        monkeypatch.setattr(harness, "_run_trial", failing_trial)
        study = small_study()
        with pytest.raises(RuntimeError, match="boom"):
            run_hpsearch(study.tasks, 2, np.random.default_rng(0), epochs=2)

    def test_invalid_trial_count(self):
        with pytest.raises(ValueError):
            run_hpsearch(small_study().tasks, 0, np.random.default_rng(0))


class TestStlBaseline:
    def test_matches_manual_degenerate_training(self):
        study = small_study()
        task = study.tasks[0]
        model_a, report_a, rmse_a = train_stl_baseline(task, SMALL_HP, seed=11)

        d = task.train.X.shape[1]
        manual = build_model(
            d, 1, depth_s=SMALL_HP.depth_s, width_s=SMALL_HP.width_s, q=SMALL_HP.q,
            with_shared=False, seed=11,
        )
        config = train_config_for(SMALL_HP, 1, seed=11, penalties=False)
        model_b, report_b = train(manual, [task], config)
        assert report_a.history == report_b.history
        for net_a, net_b in zip(model_a.specifics, model_b.specifics):
            for a, b in zip(net_a.params(), net_b.params()):
                np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(model_a.heads[0].alpha, model_b.heads[0].alpha)
        assert rmse_a == rmse(predict(model_b, 0, task.test.X), task.test.y)

    def test_linear_toy_converges(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(-1.0, 1.0, size=(60, 1))
        y = 2.0 * X[:, 0]
        splits = TaskSplits(
            TaskDataset(X, y, "train", 0),
            TaskDataset(X.copy(), y.copy(), "val", 0),
            TaskDataset(X.copy(), y.copy(), "test", 0),
        )
        hp = dataclasses.replace(SMALL_HP, epochs=400, learning_rate=0.006)
        _, _, err = train_stl_baseline(splits, hp, seed=0)
        assert err < 0.05

    def test_deterministic(self):
        study = small_study()
        _, _, a = train_stl_baseline(study.tasks[0], SMALL_HP, seed=3)
        _, _, b = train_stl_baseline(study.tasks[0], SMALL_HP, seed=3)
        assert a == b


class TestReplications:
    def test_single_seed_aggregates(self):
        res = run_replications("1", [0], overrides={"n_r": 30}, hp=SMALL_HP)
        assert not res.failures
        for agg in res.aggregates:
            assert agg.n_seeds == 1
            assert agg.sd_rmse == 0.0
            match = [
                r.rmse
                for r in res.rows
                if (r.task, r.method) == (agg.task, agg.method) and r.split == "test"
            ]
            assert agg.mean_rmse == match[0]

    def test_aggregates_match_recomputation(self):
        res = run_replications("1", 3, overrides={"n_r": 30}, hp=SMALL_HP)
        for agg in res.aggregates:
            vals = [
                r.rmse
                for r in res.rows
                if r.task == agg.task and r.method == agg.method and r.split == "test"
            ]
            assert agg.mean_rmse == pytest.approx(np.mean(vals), abs=1e-12)
            assert agg.sd_rmse == pytest.approx(np.std(vals), abs=1e-12)
            assert agg.n_seeds == len(vals)

    def test_parallel_matches_serial(self):
        serial = run_replications("1", 2, overrides={"n_r": 30}, hp=SMALL_HP, jobs=1)
        parallel = run_replications("1", 2, overrides={"n_r": 30}, hp=SMALL_HP, jobs=2)
        assert serial.rows == parallel.rows
        assert serial.aggregates == parallel.aggregates

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failures_recorded_and_sweep_continues(self):
        bad = dataclasses.replace(SMALL_HP, learning_rate=1e15, epochs=5)
        res = run_replications("1", 2, overrides={"n_r": 30}, hp=bad)
        assert len(res.failures) == 2
        assert res.rows == []

    def test_no_seeds_rejected(self):
        with pytest.raises(ValueError):
            run_replications("1", [])

    def test_mean_rmse_unknown_method(self):
        res = run_replications("1", [0], overrides={"n_r": 30}, hp=SMALL_HP)
        with pytest.raises(ValueError):
            res.mean_rmse("nope")

    def test_aggregate_rows_ignores_non_test_splits(self):
        rows = [
            harness.MetricRow("1", 0, 1, "MTL", "train", 1.0),
            harness.MetricRow("1", 0, 1, "MTL", "test", 2.0),
        ]
        aggs = aggregate_rows(rows)
        assert len(aggs) == 1 and aggs[0].mean_rmse == 2.0


class TestExportLatents:
    def identity_case(self):
        model = MtlModel(
            identity_net(1),
            [identity_net(1)],
            [TaskHead(np.array([2.0]), np.array([-1.0]))],
            Centers(np.zeros(1), np.zeros(1)),
        )
        X = np.array([[1.5], [-2.5]])
        y = predict(model, 0, X)
        splits = TaskSplits(
            TaskDataset(X, y, "train", 0),
            TaskDataset(X, y, "val", 0),
            TaskDataset(X, y, "test", 0),
        )
        return model, splits

    def test_identity_encoder_writes_inputs(self, tmp_path):
        model, splits = self.identity_case()
        paths = export_latents(model, [splits], tmp_path)
        spec_path = tmp_path / "latents_task_1_specific.csv"
        assert spec_path in paths
        with open(spec_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["task", "s1"]
        assert [float(r[1]) for r in rows[1:]] == [1.5, -2.5]
        assert [r[0] for r in rows[1:]] == ["1", "1"]

    def test_row_counts_match_split(self, tmp_path):
        study = small_study()
        model, _ = harness.fit_mtl(study.tasks, SMALL_HP, seed=0)
        paths = export_latents(model, study.tasks, tmp_path, split="val")
        for path in paths:
            with open(path) as fh:
                assert sum(1 for _ in fh) == 30 + 1  # header + rows

    def test_roundtrip_reproduces_predictions(self, tmp_path):
        study = small_study()
        model, _ = harness.fit_mtl(study.tasks, SMALL_HP, seed=1)
        export_latents(model, study.tasks, tmp_path, split="test")
        for r, task in enumerate(study.tasks):
            spec = np.loadtxt(
                tmp_path / f"latents_task_{r + 1}_specific.csv", delimiter=",", skiprows=1
            )[:, 1:]
            shared = np.loadtxt(
                tmp_path / f"latents_task_{r + 1}_shared.csv", delimiter=",", skiprows=1
            )[:, 1:]
            rebuilt = spec @ model.heads[r].alpha + shared @ model.heads[r].beta
            np.testing.assert_allclose(rebuilt, predict(model, r, task.test.X), atol=1e-9)


class TestRelativeCenterDistances:
    def test_heads_at_centers(self):
        model = build_model(3, 2, depth_s=2, width_s=4, q=2, depth_c=2, width_c=4, p=2, seed=0)
        model.centers = Centers(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
        for head in model.heads:
            head.alpha = model.centers.alpha_bar.copy()
            head.beta = model.centers.beta_bar.copy()
        assert relative_center_distances(model) == [(0.0, 0.0), (0.0, 0.0)]

    def test_hand_ratio(self):
        model = MtlModel(
            identity_net(2),
            [identity_net(2)],
            [TaskHead(np.array([3.0, 9.0]), np.array([0.0, 5.0]))],
            Centers(np.array([0.0, 5.0]), np.array([0.0, 5.0])),
        )
        (alpha_ratio, beta_ratio), = relative_center_distances(model)
        assert alpha_ratio == pytest.approx(1.0, rel=1e-12)  # ||(3,4)|| / ||(0,5)||
        assert beta_ratio == 0.0

    def test_zero_center_gives_nan_sentinel(self):
        model = build_model(3, 1, depth_s=2, width_s=4, q=2, depth_c=2, width_c=4, p=2, seed=0)
        model.heads[0].alpha = np.array([1.0, 1.0])
        (alpha_ratio, beta_ratio), = relative_center_distances(model)
        assert math.isnan(alpha_ratio) and math.isnan(beta_ratio)


class TestGridMode:
    def test_grid_enumeration_prefix_is_deterministic(self):
        from dualmtl.harness import grid_hyperparams

        import itertools

        first = list(itertools.islice(grid_hyperparams(), 5))
        second = list(itertools.islice(grid_hyperparams(), 5))
        assert first == second
        for hp in first:
            for name, grid in TABLE_GRIDS.items():
                assert getattr(hp, name) in grid
        # row-major order: the last declared field varies fastest
        assert first[0].epochs == first[1].epochs
        assert first[0].learning_rate != first[1].learning_rate

    def test_grid_mode_search(self):
        study = small_study()
        best, results = run_hpsearch(
            study.tasks, 2, np.random.default_rng(0), epochs=2, mode="grid"
        )
        assert len(results) == 2
        scored = [(t.val_mse, t.trial) for t in results if t.val_mse is not None]
        assert best == results[min(scored)[1]].hp

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            run_hpsearch(small_study().tasks, 1, np.random.default_rng(0), mode="bayes")
