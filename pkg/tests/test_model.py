"""Prediction function and objective terms."""

import numpy as np
import pytest

from dualmtl.errors import ShapeError
from dualmtl.model import (
    Centers,
    LatentBatch,
    MtlModel,
    PenaltyWeights,
    TaskHead,
    latents,
    mse_term,
    objective,
    orthogonality_penalty,
    predict,
    similarity_penalty,
)
from dualmtl.nncore import forward, identity_net
from dualmtl.trainer import build_model


def random_model(rng, d=4, n_tasks=2, q=3, p=2):
    model = build_model(
        d, n_tasks, depth_s=2, width_s=5, q=q, depth_c=2, width_c=5, p=p,
        seed=int(rng.integers(1 << 30)),
    )
    for head in model.heads:
        head.alpha = rng.standard_normal(q)
        head.beta = rng.standard_normal(p)
    model.centers = Centers(rng.standard_normal(q), rng.standard_normal(p))
    return model


class TestPredict:
    def test_zero_heads_predict_zero(self):
        model = build_model(3, 2, depth_s=2, width_s=4, q=2, depth_c=2, width_c=4, p=2, seed=0)
        X = np.random.default_rng(0).standard_normal((6, 3))
        for r in range(2):
            np.testing.assert_array_equal(predict(model, r, X), np.zeros(6))

    def test_identity_encoders_linear_composition(self):
        # one-dimensional identity encoders, alpha=2, beta=3 -> yhat = 5x
        model = MtlModel(
            identity_net(1),
            [identity_net(1)],
            [TaskHead(np.array([2.0]), np.array([3.0]))],
            Centers(np.zeros(1), np.zeros(1)),
        )
        x = np.array([[0.5], [-1.0], [2.0]])
        np.testing.assert_allclose(predict(model, 0, x), 5.0 * x[:, 0], rtol=1e-15)

    def test_matches_independent_decomposition(self):
        rng = np.random.default_rng(42)
        model = random_model(rng)
        X = rng.standard_normal((7, 4))
        for r in range(model.n_tasks):
            expected = forward(model.specifics[r], X) @ model.heads[r].alpha
            expected = expected + forward(model.shared, X) @ model.heads[r].beta
            np.testing.assert_allclose(predict(model, r, X), expected, rtol=1e-12)

    def test_bad_task_index(self):
        model = random_model(np.random.default_rng(0))
        with pytest.raises(IndexError):
            predict(model, 5, np.zeros((1, 4)))

    def test_linear_in_heads(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        X = rng.standard_normal((5, 4))
        base = predict(model, 0, X)
        bumped = model.copy()
        extra = rng.standard_normal(model.q)
        bumped.heads[0].alpha = bumped.heads[0].alpha + extra
        delta_only = model.copy()
        delta_only.heads[0].alpha = extra
        delta_only.heads[0].beta = np.zeros(model.p)
        np.testing.assert_allclose(
            predict(bumped, 0, X), base + predict(delta_only, 0, X), rtol=1e-12, atol=1e-12
        )


class TestMse:
    def test_perfect_fit_is_zero(self):
        rng = np.random.default_rng(1)
        model = random_model(rng)
        X = rng.standard_normal((6, 4))
        y = predict(model, 0, X)
        assert mse_term(model, 0, X, y) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(2)
        model = random_model(rng)
        X = rng.standard_normal((6, 4))
        y = predict(model, 1, X) + 0.3
        assert mse_term(model, 1, X, y) == pytest.approx(0.09, rel=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        X = rng.standard_normal((9, 4))
        y = rng.standard_normal(9)
        yhat = predict(model, 0, X)
        manual = sum((float(y[i]) - float(yhat[i])) ** 2 for i in range(9)) / 9
        assert mse_term(model, 0, X, y) == pytest.approx(manual, abs=1e-12)

    def test_length_mismatch(self):
        model = random_model(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            mse_term(model, 0, np.zeros((3, 4)), np.zeros(4))


class TestSimilarityPenalty:
    def test_heads_at_centers(self):
        rng = np.random.default_rng(4)
        model = random_model(rng)
        for head in model.heads:
            head.alpha = model.centers.alpha_bar.copy()
            head.beta = model.centers.beta_bar.copy()
        w = PenaltyWeights.uniform(2, 3.0, 4.0)
        assert similarity_penalty(model.heads, model.centers, w) == 0.0

    def test_zero_weights(self):
        model = random_model(np.random.default_rng(5))
        w = PenaltyWeights.uniform(2, 0.0, 0.0)
        assert similarity_penalty(model.heads, model.centers, w) == 0.0

    def test_hand_value_three_four_five(self):
        # single task, alpha deviation (3, 4), lambda_s = 2 -> 2 * 5 = 10
        heads = [TaskHead(np.array([3.0, 4.0]), np.array([1.0]))]
        centers = Centers(np.zeros(2), np.array([1.0]))
        w = PenaltyWeights(np.array([2.0]), np.array([7.0]))
        assert similarity_penalty(heads, centers, w) == pytest.approx(10.0, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        model = random_model(rng)
        w = PenaltyWeights.uniform(2, 1.3, 0.7)
        base = similarity_penalty(model.heads, model.centers, w)
        shift = rng.standard_normal(model.q)
        shifted_heads = [TaskHead(h.alpha + shift, h.beta.copy()) for h in model.heads]
        shifted_centers = Centers(model.centers.alpha_bar + shift, model.centers.beta_bar.copy())
        assert similarity_penalty(shifted_heads, shifted_centers, w) == pytest.approx(
            base, rel=1e-12
        )

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            PenaltyWeights(np.array([-1.0]), np.array([0.0]))


class TestOrthogonalityPenalty:
    def test_orthogonal_latents(self):
        lat = LatentBatch(np.array([[1.0], [-1.0]]), np.array([[1.0], [1.0]]))
        assert orthogonality_penalty([lat], 0.5) == 0.0

    def test_zero_weight(self):
        lat = LatentBatch(np.ones((3, 2)), np.ones((3, 2)))
        assert orthogonality_penalty([lat], 0.0) == 0.0

    def test_all_ones_gives_lambda_n_squared(self):
        n = 5
        lat = LatentBatch(np.ones((n, 1)), np.ones((n, 1)))
        assert orthogonality_penalty([lat], 0.01) == pytest.approx(0.01 * n**2, abs=1e-12)

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            LatentBatch(np.ones((3, 1)), np.ones((4, 1)))


class TestObjective:
    def batches_for(self, model, rng, n=6):
        out = []
        for r in range(model.n_tasks):
            X = rng.standard_normal((n, model.in_dim))
            out.append((X, rng.standard_normal(n)))
        return out

    def test_perfect_fit_heads_at_centers(self):
        rng = np.random.default_rng(7)
        model = random_model(rng)
        for head in model.heads:
            head.alpha = model.centers.alpha_bar.copy()
            head.beta = model.centers.beta_bar.copy()
        batches = [
            (X, predict(model, r, X))
            for r, (X, _) in enumerate(self.batches_for(model, rng))
        ]
        total, _ = objective(model, batches, PenaltyWeights.uniform(2, 1.0, 1.0, 0.0))
        assert total == 0.0

    def test_penalty_free_reduction(self):
        rng = np.random.default_rng(8)
        model = random_model(rng)
        batches = self.batches_for(model, rng)
        total, parts = objective(model, batches, PenaltyWeights.uniform(2, 0.0, 0.0, 0.0))
        mean_mse = np.mean([mse_term(model, r, X, y) for r, (X, y) in enumerate(batches)])
        assert total == pytest.approx(mean_mse, rel=1e-15)
        assert parts["similarity"] == 0.0 and parts["orthogonality"] == 0.0

    def test_compositional_oracle(self):
        rng = np.random.default_rng(9)
        model = random_model(rng)
        batches = self.batches_for(model, rng)
        w = PenaltyWeights.uniform(2, 0.4, 0.8, 0.02)
        total, parts = objective(model, batches, w)
        mse = np.mean([mse_term(model, r, X, y) for r, (X, y) in enumerate(batches)])
        sim = similarity_penalty(model.heads, model.centers, w)
        orth = orthogonality_penalty(
            [latents(model, r, X) for r, (X, _) in enumerate(batches)], w.lambda_o
        )
        assert total == pytest.approx(mse + sim + orth, rel=1e-12)

    def test_breakdown_additive(self):
        rng = np.random.default_rng(10)
        model = random_model(rng)
        batches = self.batches_for(model, rng)
        total, parts = objective(model, batches, PenaltyWeights.uniform(2, 0.2, 0.1, 0.01))
        resid = total - (parts["mse"] + parts["similarity"] + parts["orthogonality"])
        assert abs(resid) <= 1e-12
        assert total >= 0.0
