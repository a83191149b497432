import numpy as np
import pytest

from matamp.errors import InvalidInput
from matamp.shrinkers import ShrinkerSpec, alpha_constant, scaled_family
from matamp.spectral import (
    apply_shrinker,
    divergence,
    hard_rank_projection,
    numerical_divergence_oracle,
    thin_svd,
)


class TestThinSvd:
    def test_diagonal_matrix(self):
        d = thin_svd(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(d.values, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(d.left_basis), np.eye(2), atol=1e-12)

    def test_zero_matrix(self):
        d = thin_svd(np.zeros((3, 4)))
        np.testing.assert_allclose(d.values, np.zeros(3))

    def test_reconstruction_and_invariants(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((8, 12))
        d = thin_svd(W)
        np.testing.assert_allclose(
            d.left_basis.T @ d.left_basis, np.eye(8), atol=1e-10
        )
        np.testing.assert_allclose(
            d.right_basis.T @ d.right_basis, np.eye(8), atol=1e-10
        )
        assert np.all(np.diff(d.values) <= 0) and np.all(d.values >= 0)
        rebuilt = (d.left_basis * d.values) @ d.right_basis.T
        assert np.linalg.norm(rebuilt - W) / np.linalg.norm(W) < 1e-10

    def test_nonfinite_rejected(self):
        W = np.ones((2, 2))
        W[0, 0] = np.nan
        with pytest.raises(InvalidInput):
            thin_svd(W)


class TestApplyShrinker:
    def test_soft_on_diagonal(self):
        out = apply_shrinker(np.diag([3.0, 1.0]), ShrinkerSpec.soft(2.0))
        np.testing.assert_allclose(out, np.diag([1.0, 0.0]), atol=1e-12)

    def test_zero_matrix_fixed_point(self):
        for eta in (ShrinkerSpec.soft(1.0), ShrinkerSpec.spiked(1.0), ShrinkerSpec.identity()):
            out = apply_shrinker(np.zeros((3, 5)), eta)
            np.testing.assert_array_equal(out, np.zeros((3, 5)))

    def test_identity_map_returns_input(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((6, 6))
        np.testing.assert_allclose(
            apply_shrinker(W, ShrinkerSpec.identity()), W, atol=1e-10
        )

    def test_positive_homogeneity_of_identity(self):
        rng = np.random.default_rng(2)
        W = rng.standard_normal((5, 7))
        for c in (0.3, 2.0, 11.0):
            np.testing.assert_allclose(
                apply_shrinker(c * W, ShrinkerSpec.identity()),
                c * apply_shrinker(W, ShrinkerSpec.identity()),
                rtol=1e-10,
            )

    def test_singular_subspaces_preserved(self):
        rng = np.random.default_rng(3)
        W = rng.standard_normal((6, 9)) * 4
        eta = ShrinkerSpec.soft(1.0)
        out = apply_shrinker(W, eta)
        dw, do = thin_svd(W), thin_svd(out)
        kept = do.values > 1e-10
        # sine of the largest principal angle between retained subspaces
        # (well conditioned near zero, unlike arccos of the overlap)
        U_out = do.left_basis[:, kept]
        resid = U_out - dw.left_basis @ (dw.left_basis.T @ U_out)
        assert np.linalg.norm(resid, 2) < 1e-8


class TestHardRankProjection:
    def test_keeps_top_values(self):
        np.testing.assert_allclose(
            hard_rank_projection(np.diag([3.0, 1.0]), 1), np.diag([3.0, 0.0]), atol=1e-12
        )

    def test_full_rank_is_identity(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((5, 8))
        np.testing.assert_allclose(hard_rank_projection(W, 5), W, atol=1e-10)

    def test_recovers_rank_two_part(self):
        rng = np.random.default_rng(5)
        u1, u2 = rng.standard_normal((2, 7))
        v1, v2 = rng.standard_normal((2, 9))
        low = 5.0 * np.outer(u1, v1) + 3.0 * np.outer(u2, v2)
        noise = 1e-6 * rng.standard_normal((7, 9))
        out = hard_rank_projection(low + noise, 2)
        assert np.linalg.norm(out - low) < 10 * np.linalg.norm(noise)

    def test_rank_out_of_range(self):
        with pytest.raises(InvalidInput):
            hard_rank_projection(np.ones((3, 4)), 4)
        with pytest.raises(InvalidInput):
            hard_rank_projection(np.ones((3, 4)), -1)


class TestDivergence:
    def test_soft_on_diagonal_by_hand(self):
        # derivative terms 1 + 0, cross term 2*(3 - 0)/(9 - 1), square matrix
        val = divergence(np.diag([3.0, 1.0]), ShrinkerSpec.soft(2.0))
        assert val == pytest.approx(1.75, abs=1e-12)

    def test_identity_gives_full_dimension(self):
        val = divergence(np.diag([3.0, 1.0]), ShrinkerSpec.identity())
        assert val == pytest.approx(4.0, abs=1e-10)
        rng = np.random.default_rng(6)
        W = rng.standard_normal((5, 9))
        assert divergence(W, ShrinkerSpec.identity()) == pytest.approx(45.0, rel=1e-10)

    def test_requires_wide_orientation(self):
        with pytest.raises(InvalidInput):
            divergence(np.ones((4, 2)), ShrinkerSpec.identity())

    def test_transpose_convention_matches_oracle(self):
        rng = np.random.default_rng(7)
        W = rng.standard_normal((10, 4)) * 2  # tall: caller transposes
        eta = ShrinkerSpec.soft(1.0)
        assert divergence(W.T, eta) == pytest.approx(
            numerical_divergence_oracle(W, eta), rel=1e-6
        )

    @pytest.mark.parametrize(
        "make_eta",
        [
            lambda beta: ShrinkerSpec.soft(1.0),
            lambda beta: ShrinkerSpec.spiked(beta),
            lambda beta: ShrinkerSpec.opt(12, alpha_constant(0.2, beta), beta),
        ],
        ids=["soft", "spiked", "opt"],
    )
    def test_matches_finite_difference_oracle(self, make_eta):
        rng = np.random.default_rng(8)
        beta = 8 / 12
        eta = make_eta(beta)
        for _ in range(20):
            W = rng.standard_normal((8, 12)) * 3.0
            exact = numerical_divergence_oracle(W, eta)
            assert divergence(W, eta) == pytest.approx(exact, rel=1e-5)

    def test_degenerate_spectrum_limit_rule(self):
        # soft(1): derivatives 1 + 1, pair limit (eta'(2)*2 + eta(2))/(2*2)
        val = divergence(np.diag([2.0, 2.0]), ShrinkerSpec.soft(1.0))
        assert val == pytest.approx(2.0 + 2.0 * 0.75, abs=1e-12)
        # identity on a degenerate spectrum still counts every dimension
        assert divergence(np.diag([2.0, 2.0]), ShrinkerSpec.identity()) == pytest.approx(4.0)

    def test_degenerate_limit_is_continuous(self):
        eta = ShrinkerSpec.spiked(1.0)
        exact = divergence(np.diag([3.0, 3.0]), eta)
        nearby = divergence(np.diag([3.0, 3.0 - 1e-7]), eta)
        assert exact == pytest.approx(nearby, rel=1e-5)

    def test_zero_matrix(self):
        assert divergence(np.zeros((3, 5)), ShrinkerSpec.soft(1.0)) == 0.0
        assert divergence(np.zeros((3, 5)), ShrinkerSpec.identity()) == 15.0

    @pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
    def test_scale_identity_for_noise_scaled_family(self, sigma):
        # divergence of W -> sigma*eta(W/sigma) at W equals divergence(W/sigma, eta)
        rng = np.random.default_rng(9)
        W = rng.standard_normal((6, 8)) * 2.0
        eta = ShrinkerSpec.soft(1.0)
        scaled = scaled_family(eta, sigma)
        lhs = numerical_divergence_oracle(W, scaled, h=1e-6 * sigma)
        rhs = divergence(W / sigma, eta)
        assert lhs == pytest.approx(rhs, rel=1e-4)


class TestNumericalDivergenceOracle:
    def test_exact_mode_on_closed_forms(self):
        assert numerical_divergence_oracle(
            np.diag([3.0, 1.0]), ShrinkerSpec.soft(2.0)
        ) == pytest.approx(1.75, abs=1e-6)
        rng = np.random.default_rng(10)
        W = rng.standard_normal((4, 6))
        assert numerical_divergence_oracle(W, ShrinkerSpec.identity()) == pytest.approx(
            24.0, abs=1e-6
        )

    def test_randomized_probes_approximate_exact(self):
        rng = np.random.default_rng(11)
        W = rng.standard_normal((5, 7)) * 2
        eta = ShrinkerSpec.soft(0.5)
        exact = numerical_divergence_oracle(W, eta)
        noisy = numerical_divergence_oracle(W, eta, probes=500, seed=3)
        assert noisy == pytest.approx(exact, rel=0.15)
