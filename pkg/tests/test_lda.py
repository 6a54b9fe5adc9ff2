import csv

import numpy as np
import pytest
from scipy.stats import ortho_group

from breakmove.errors import EmptyInput, SingleClass
from breakmove.lda import (
    SeparabilityScores,
    lda_directions,
    project2d,
    rayleigh_quotient,
    scatter_matrices,
    separability_scores,
    write_projection_csv,
)

X1D = np.array([[0.0], [2.0], [10.0], [12.0]])
Y1D = np.array([0, 0, 1, 1])


def gaussian_classes(rng, n_per, d, num_classes, sep=3.0):
    means = rng.normal(size=(num_classes, d)) * sep
    X = np.concatenate([m + rng.normal(size=(n_per, d)) for m in means])
    return X, np.repeat(np.arange(num_classes), n_per)


class TestScatter:
    def test_one_dimensional_hand_values(self):
        s = scatter_matrices(X1D, Y1D)
        assert s.between[0, 0] == 100.0 and s.within[0, 0] == 4.0

    def test_identical_samples(self):
        s = scatter_matrices(np.ones((6, 3)), [0, 0, 1, 1, 2, 2])
        assert not s.between.any() and not s.within.any()

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        X, y = gaussian_classes(rng, 20, 5, 3)
        a = scatter_matrices(X, y)
        b = scatter_matrices(X + rng.normal(size=5) * 10, y)
        np.testing.assert_allclose(a.between, b.between, atol=1e-8)
        np.testing.assert_allclose(a.within, b.within, atol=1e-8)

    def test_symmetric_psd_and_rank(self):
        rng = np.random.default_rng(1)
        X, y = gaussian_classes(rng, 30, 6, 3)
        s = scatter_matrices(X, y)
        for M in (s.between, s.within):
            assert np.array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() > -1e-9 * np.abs(M).max()
        assert np.linalg.matrix_rank(s.between, tol=1e-8 * np.abs(s.between).max()) <= 2

    def test_errors(self):
        with pytest.raises(SingleClass):
            scatter_matrices(np.ones((3, 2)), [1, 1, 1])
        with pytest.raises(EmptyInput):
            scatter_matrices(np.zeros((0, 2)), [])


class TestDirections:
    def test_one_dimensional(self):
        rho, W = lda_directions(scatter_matrices(X1D, Y1D), 1, 0.0)
        assert rho[0] == pytest.approx(25.0, rel=1e-14)
        assert abs(W[0, 0]) == 1.0

    def test_fisher_direction_two_gaussians(self):
        rng = np.random.default_rng(2)
        d, n = 5, 10000
        X = rng.normal(size=(n, d))
        y = np.arange(n) % 2
        X[y == 1, 0] += 3.0
        _, W = lda_directions(scatter_matrices(X, y), 1)
        assert abs(W[:, 0] @ np.eye(d)[0]) > 0.99

    def test_zero_between_scatter(self):
        # both classes share the mean 0 and have full-rank spread
        cloud = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        X = np.concatenate([cloud, 2.0 * cloud])
        y = [0] * 4 + [1] * 4
        rho, _ = lda_directions(scatter_matrices(X, y), 2)
        assert np.all(rho == 0)

    def test_rank_deficiency(self):
        rng = np.random.default_rng(3)
        X, y = gaussian_classes(rng, 40, 6, 3)
        s = scatter_matrices(X, y)
        rho, _ = lda_directions(s, 3)
        assert rho[2] <= 1e-9 * rho[0]
        assert list(rho) == sorted(rho, reverse=True)


class TestScores:
    def test_one_dimensional(self):
        sc = separability_scores(X1D, Y1D, ridge=0.0)
        assert sc.J1 == 25.0
        assert not sc.j2_defined and sc.J2 == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        X, y = gaussian_classes(rng, 50, 4, 4)
        a = separability_scores(X, y, ridge=0.0)
        b = separability_scores(7.5 * X, y, ridge=0.0)
        assert b.J1 == pytest.approx(a.J1, rel=1e-8) and b.J2 == pytest.approx(a.J2, rel=1e-8)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(5)
        X, y = gaussian_classes(rng, 50, 4, 4)
        Q = ortho_group.rvs(4, random_state=6)
        a = separability_scores(X, y, ridge=0.0)
        b = separability_scores(X @ Q, y, ridge=0.0)
        assert b.J1 == pytest.approx(a.J1, rel=1e-8) and b.J2 == pytest.approx(a.J2, rel=1e-8)
        for wa, wb in ((a.w1, b.w1), (a.w2, b.w2)):
            assert abs(abs((Q.T @ wa) @ wb) - 1.0) < 1e-8

    def test_ordering_and_orthogonality(self):
        rng = np.random.default_rng(7)
        X, y = gaussian_classes(rng, 60, 6, 4)
        sc = separability_scores(X, y, ridge=0.0)
        s = scatter_matrices(X, y)
        assert sc.J1 >= sc.J2 >= 0
        scale = np.sqrt((sc.w1 @ s.within @ sc.w1) * (sc.w2 @ s.within @ sc.w2))
        assert abs(sc.w1 @ s.within @ sc.w2) / scale < 1e-8
        assert np.linalg.norm(sc.w1) == pytest.approx(1.0, abs=1e-12)

    def test_j1_is_maximal(self):
        rng = np.random.default_rng(8)
        X, y = gaussian_classes(rng, 40, 5, 3)
        s = scatter_matrices(X, y)
        sc = separability_scores(X, y, ridge=0.0)
        for _ in range(1000):
            w = rng.normal(size=5)
            assert rayleigh_quotient(w / np.linalg.norm(w), s) <= sc.J1 * (1 + 1e-10)

    def test_quotient_scale_free(self):
        s = scatter_matrices(*gaussian_classes(np.random.default_rng(9), 20, 3, 3))
        w = np.array([0.3, -1.0, 2.0])
        assert rayleigh_quotient(-4.0 * w, s) == pytest.approx(rayleigh_quotient(w, s), rel=1e-12)

    def test_default_ridge_handles_fewer_samples_than_dims(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(9, 40))
        sc = separability_scores(X, np.arange(9) % 3)
        assert np.isfinite(sc.J1) and sc.ridge > 0


class TestProjection:
    def _scores(self, d):
        return SeparabilityScores(1.0, 0.5, np.eye(d)[0], np.eye(d)[1], 0.0, True, {})

    def test_identity_rows(self):
        np.testing.assert_array_equal(project2d(np.eye(4), self._scores(4)), np.eye(4)[:, :2])

    def test_identical_points_coincide(self):
        rng = np.random.default_rng(0)
        sc = SeparabilityScores(1.0, 0.5, rng.normal(size=3), rng.normal(size=3), 0.0, True, {})
        coords = project2d(np.tile([1.0, 2.0, 3.0], (5, 1)), sc)
        assert np.all(coords == coords[0])

    def test_first_axis_reproduces_j1(self):
        rng = np.random.default_rng(11)
        X, y = gaussian_classes(rng, 30, 5, 3)
        sc = separability_scores(X, y, ridge=0.0)
        axis = project2d(X, sc)[:, 0]
        assert separability_scores(axis[:, None], y, ridge=0.0).J1 == pytest.approx(sc.J1, rel=1e-9)

    def test_csv(self, tmp_path):
        write_projection_csv(tmp_path / "p.csv", np.array([[1.0, 2.0]]), ["toprock"], ["v1"])
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows == [["x", "y", "label", "video_id"], ["1.0", "2.0", "toprock", "v1"]]
