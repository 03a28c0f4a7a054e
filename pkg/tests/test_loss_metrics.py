import math

import numpy as np
import pytest

from dualmod import numerics as nx
from dualmod.errors import ConfigError
from dualmod.loss_metrics import (
    DensityMap,
    PointAnnotations,
    aggregate,
    bayesian_loss,
    cell_centers,
    evaluate_image,
    game_image,
    mae,
    parse_report_csv,
    posterior_weights,
    report_to_csv,
    rmse,
)
from dualmod.numerics import Parameter, finite_diff_check


def dmap(values, f=8):
    v = np.asarray(values, dtype=float)
    return DensityMap(nx.constant(v.reshape(1, *v.shape)), f)


def game_oracle(density, f, points, height, width, level):
    """Enumerate every region and test membership of every cell and point."""
    k = 2 ** level
    h, w = density.shape
    total = 0.0
    for ry in range(k):
        for rx in range(k):
            x_lo, x_hi = rx * width / k, (rx + 1) * width / k
            y_lo, y_hi = ry * height / k, (ry + 1) * height / k
            pred = 0.0
            for i in range(h):
                for j in range(w):
                    cx, cy = (j + 0.5) * f, (i + 0.5) * f
                    if x_lo <= cx < x_hi and y_lo <= cy < y_hi:
                        pred += density[i, j]
            gt = sum(1 for x, y in points if x_lo <= x < x_hi and y_lo <= y < y_hi)
            total += abs(pred - gt)
    return total


def random_instance(rng):
    f = int(rng.choice([4, 8]))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    density = rng.exponential(0.3, size=(h, w)) * (rng.random((h, w)) < 0.7)
    n = int(rng.integers(0, 12))
    pts = np.stack([rng.uniform(0, w * f, n), rng.uniform(0, h * f, n)], axis=1)
    return density, f, pts, h * f, w * f


class TestGame:
    def test_perfect_prediction(self):
        pts = np.array([[4.0, 4.0], [20.0, 12.0], [60.0, 60.0]])
        d = np.zeros((8, 8))
        for x, y in pts:
            d[int(y // 8), int(x // 8)] += 1
        for L in range(4):
            assert game_image(d, 8, pts, 64, 64, L) == 0.0

    def test_hand_quadrants(self):
        # 2x2 density on a 16x16 image, one cell per quadrant
        d = np.array([[2.0, 0.0], [1.0, 1.0]])
        pts = np.array([[4.0, 4.0], [12.0, 4.0], [4.0, 12.0], [12.0, 12.0]])
        assert game_image(d, 8, pts, 16, 16, 1) == 2.0
        assert game_image(d, 8, pts, 16, 16, 0) == 0.0

    def test_boundary_point_goes_to_higher_region(self):
        d = np.zeros((2, 2))
        pts = np.array([[8.0, 3.0]])  # exactly on the vertical split of a 16-wide image
        assert game_image(d, 8, pts, 16, 16, 1) == 1.0
        from dualmod.loss_metrics import region_counts

        counts = region_counts(pts, np.ones(1), 16, 16, 1)
        assert counts[0, 1] == 1.0

    def test_negative_level(self):
        with pytest.raises(ConfigError):
            game_image(np.zeros((2, 2)), 8, np.zeros((0, 2)), 16, 16, -1)

    def test_matches_oracle_and_is_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            density, f, pts, H, W = random_instance(rng)
            vals = [game_image(density, f, pts, H, W, L) for L in range(4)]
            for L in range(4):
                assert vals[L] == pytest.approx(game_oracle(density, f, pts, H, W, L), abs=1e-9)
            assert all(vals[L + 1] >= vals[L] - 1e-12 for L in range(3))
            assert vals[0] == pytest.approx(abs(density.sum() - len(pts)), abs=1e-9)

    def test_non_divisible_image(self):
        rng = np.random.default_rng(1)
        density = rng.random((3, 5))
        pts = np.array([[1.0, 2.0], [37.5, 20.0], [13.0, 23.9]])
        for L in range(4):
            assert game_image(density, 8, pts, 24, 39, L) == pytest.approx(
                game_oracle(density, 8, pts, 24, 39, L), abs=1e-12
            )


class TestCountMetrics:
    def test_rmse_single(self):
        assert rmse([5.0], [2.0]) == 3.0

    def test_rmse_zero(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_rmse_hand(self):
        assert rmse([3.0, 0.0], [0.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
        assert rmse([3.0, 0.0], [0.0, 4.0]) == pytest.approx(3.535534, abs=1e-6)

    def test_rmse_empty(self):
        with pytest.raises(ConfigError):
            rmse([], [])

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a, b = rng.normal(size=7) * 5, rng.normal(size=7) * 5
            assert rmse(a, b) >= mae(a, b) - 1e-12 >= -1e-12

    def test_report(self):
        rng = np.random.default_rng(3)
        results = []
        for i in range(6):
            density, f, pts, H, W = random_instance(rng)
            results.append(evaluate_image(f"im{5 - i}", density, f, pts, H, W, 0.25 * (i % 3)))
        rep = aggregate(results)
        assert rep.n_images == 6
        assert [r.image_id for r in rep.images] == sorted(r.image_id for r in results)
        assert rep.game[0] == pytest.approx(rep.mae, abs=1e-9)
        assert all(rep.game[L + 1] >= rep.game[L] for L in range(3))
        rows, agg = parse_report_csv(report_to_csv(rep))
        assert len(rows) == 6
        for row in rows:
            assert row["game0"] == pytest.approx(abs(row["count_pred"] - row["count_gt"]), abs=1e-9)
        assert agg["game0"] == rep.game[0]
        assert agg["fusion_w"] == pytest.approx(0.25, abs=1e-15)

    def test_empty_report(self):
        with pytest.raises(ConfigError):
            aggregate([])


class TestBayesianLoss:
    def test_single_annotation(self):
        rng = np.random.default_rng(0)
        d = rng.random((4, 4))
        ann = PointAnnotations([[10.0, 20.0]])
        loss = bayesian_loss(dmap(d), ann, 8.0).item()
        assert loss == pytest.approx(abs(1 - d.sum()), abs=1e-12)
        d_unit = d / d.sum()
        assert bayesian_loss(dmap(d_unit), ann, 8.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_empty_scene(self):
        d = np.random.default_rng(1).random((4, 4))
        assert bayesian_loss(dmap(d), PointAnnotations(), 8.0).item() == 0.0
        pen = bayesian_loss(dmap(d), PointAnnotations(), 8.0, empty_penalty=0.5).item()
        assert pen == pytest.approx(0.5 * d.sum(), abs=1e-12)

    def test_far_separated_pair(self):
        sigma = 2.0
        # annotations at the centres of cells (0,0) and (3,3); 24*sqrt(2) px apart >> 6 sigma
        d = np.zeros((4, 4))
        d[0, 0] = d[3, 3] = 1.0
        ann = PointAnnotations([[4.0, 4.0], [28.0, 28.0]])
        assert bayesian_loss(dmap(d), ann, sigma).item() < 1e-6

    def test_far_pair_direct_evaluation(self):
        # loss from first principles with explicit Gaussian densities
        sigma = 2.0
        d = np.zeros((4, 4))
        d[0, 0] = d[3, 3] = 1.0
        z = np.array([[4.0, 4.0], [28.0, 28.0]])
        total = 0.0
        for i in range(2):
            expected = 0.0
            for r in range(4):
                for c in range(4):
                    x = np.array([(c + 0.5) * 8, (r + 0.5) * 8])
                    g = [math.exp(-np.sum((x - zn) ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
                         for zn in z]
                    expected += g[i] / sum(g) * d[r, c]
            total += abs(1 - expected)
        loss = bayesian_loss(dmap(d), PointAnnotations(z), sigma).item()
        assert loss == pytest.approx(total, abs=1e-12)

    def test_posterior_partition_of_unity(self):
        rng = np.random.default_rng(2)
        centers = cell_centers(8, 8, 8)
        pts = rng.uniform(0, 64, size=(13, 2))
        P = posterior_weights(centers, pts, 8.0)
        np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-9)

    def test_posterior_stable_for_far_points(self):
        P = posterior_weights(cell_centers(4, 4, 8), np.array([[1000.0, 1000.0], [2000.0, 0.0]]), 1.0)
        assert np.all(np.isfinite(P))

    def test_nonnegative_and_zero_iff_unit_expectations(self):
        rng = np.random.default_rng(3)
        ann = PointAnnotations(rng.uniform(0, 32, size=(3, 2)))
        for _ in range(50):
            assert bayesian_loss(dmap(rng.random((4, 4))), ann, 8.0).item() >= 0.0

    def test_sigma_must_be_positive(self):
        with pytest.raises(ConfigError):
            bayesian_loss(dmap(np.ones((2, 2))), PointAnnotations([[1.0, 1.0]]), 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        p = Parameter(rng.random((1, 6, 6)) * 0.1, "density")
        ann = PointAnnotations(rng.uniform(0, 48, size=(5, 2)))
        rep = finite_diff_check(
            lambda: bayesian_loss(DensityMap(p, 8), ann, 8.0), [p], rel_tol=1e-6
        )
        assert rep.passed, str(rep)


class TestAnnotations:
    def test_bounds(self):
        PointAnnotations([[0.0, 0.0], [63.9, 10.0]]).check_bounds(64, 64)
        with pytest.raises(ConfigError):
            PointAnnotations([[64.0, 0.0]]).check_bounds(64, 64)

    def test_bad_shape(self):
        with pytest.raises(ConfigError):
            PointAnnotations([1.0, 2.0, 3.0])


def test_game0_is_exactly_mae():
    rng = np.random.default_rng(3)
    results = [
        evaluate_image(f"s{k}", rng.random((8, 8)), 8, rng.uniform(0, 63, (int(rng.integers(0, 20)), 2)), 64, 64)
        for k in range(50)
    ]
    for r in results:
        assert r.game[0] == abs(r.count_pred - r.count_gt)
    assert aggregate(results).game[0] == aggregate(results).mae
