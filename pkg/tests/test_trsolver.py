import numpy as np
import pytest

from _oracles import exact_tr_solution, model_reduction, random_psd
from trunlearn.spectral import NumericError
from trunlearn.trsolver import (
    PATH_BOUNDARY,
    PATH_CAUCHY,
    PATH_INTERIOR,
    DegenerateModel,
    QuadModel,
    StationaryPoint,
    TRConfig,
    agreement_ratio,
    cauchy_point,
    clipped_radius,
    solve_subproblem,
    steihaug_cg,
    update_radius,
)


def _model(H, g):
    return QuadModel(0.0, g, lambda v: H @ v)


class TestClippedRadius:
    def test_gradient_limited(self):
        assert clipped_radius(1.0, 0.5, 1.0, 1.0) == 0.5

    def test_radius_limited(self):
        assert clipped_radius(0.2, 10, 1, 1) == 0.2

    def test_clipping_factor(self):
        assert clipped_radius(1.0, 1.0, 2.0, 0.8) == pytest.approx(0.4)

    def test_stationary(self):
        with pytest.raises(StationaryPoint):
            clipped_radius(1.0, 0.0, 1.0, 1.0)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            clipped_radius(1.0, 1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            clipped_radius(1.0, 1.0, 1.0, 1.5)


class TestSubproblem:
    def test_identity_interior(self):
        g = np.array([0.3, -0.4])
        p, path = solve_subproblem(_model(np.eye(2), g), 1.0)
        np.testing.assert_allclose(p, -g, atol=1e-15)
        assert path == PATH_INTERIOR

    def test_identity_boundary(self):
        g = np.array([3.0, 4.0])
        p, path = solve_subproblem(_model(np.eye(2), g), 2.0)
        np.testing.assert_allclose(p, -2.0 * g / 5.0, atol=1e-14)
        assert path == PATH_BOUNDARY

    def test_negative_curvature_goes_to_boundary(self):
        H = np.diag([-1.0, 2.0])
        g = np.array([1.0, 1.0])
        p, path = solve_subproblem(_model(H, g), 0.7)
        assert np.linalg.norm(p) == pytest.approx(0.7)
        assert path in (PATH_BOUNDARY, PATH_CAUCHY)

    def test_matches_exact_oracle_on_psd(self, rng):
        cfg = TRConfig(cg_tol=1e-12, cg_max_iter=200)
        for _ in range(30):
            d = 30
            H = random_psd(rng, d)
            g = rng.standard_normal(d)
            radius = rng.uniform(0.01, 3.0)
            p, _ = solve_subproblem(_model(H, g), radius, cfg)
            p_star = exact_tr_solution(H, g, radius)
            assert np.linalg.norm(p) <= radius * (1 + 1e-10)
            assert model_reduction(H, g, p) >= cfg.kappa * model_reduction(H, g, p_star)
            pc = cauchy_point(g, H @ g, radius)
            assert model_reduction(H, g, p) >= model_reduction(H, g, pc) - 1e-12

    def test_interior_is_newton_step(self, rng):
        H = random_psd(rng, 10)
        g = 1e-3 * rng.standard_normal(10)
        p, path = solve_subproblem(_model(H, g), 1e6, TRConfig(cg_tol=1e-14, cg_max_iter=100))
        np.testing.assert_allclose(p, -np.linalg.solve(H, g), rtol=1e-8)
        assert path == PATH_INTERIOR

    def test_non_finite_oracle(self):
        model = QuadModel(0.0, np.ones(3), lambda v: v * np.inf)
        with pytest.raises(NumericError):
            solve_subproblem(model, 1.0)

    def test_cauchy_fallback_when_cg_truncated_badly(self):
        # a single CG step from a poor direction cannot happen (first step is -g),
        # so force the fallback with an oracle that lies about curvature after one call
        calls = {"n": 0}
        H = np.diag([1.0, 100.0])

        def lying(v):
            calls["n"] += 1
            return H @ v if calls["n"] != 2 else -1e-9 * v

        g = np.array([1.0, 1.0])
        p, path = solve_subproblem(QuadModel(0.0, g, lying), 10.0, TRConfig(kappa=1.0))
        # whatever the path, the result is never worse than κ × Cauchy on the true model
        pc = cauchy_point(g, H @ g, 10.0)
        if path == PATH_CAUCHY:
            np.testing.assert_allclose(p, pc)

    def test_steihaug_returns_hp(self, rng):
        H = random_psd(rng, 6)
        g = rng.standard_normal(6)
        p, _, Hp = steihaug_cg(_model(H, g), 0.5, 1e-10, 50)
        np.testing.assert_allclose(Hp, H @ p, atol=1e-10)


class TestCauchy:
    def test_nonpositive_curvature(self):
        g = np.array([3.0, 4.0])
        H = -np.eye(2)
        np.testing.assert_allclose(cauchy_point(g, H @ g, 2.0), -2.0 * g / 5.0)

    def test_unconstrained(self):
        g = np.array([0.1, -0.2])
        np.testing.assert_allclose(cauchy_point(g, g, 100.0), -g)

    def test_zero_gradient(self):
        with pytest.raises(StationaryPoint):
            cauchy_point(np.zeros(2), np.zeros(2), 1.0)

    def test_decrease_lower_bound(self, rng):
        for _ in range(2000):
            d = rng.integers(1, 8)
            B = rng.standard_normal((d, d))
            H = B @ B.T * rng.uniform(0.01, 10)
            g = rng.standard_normal(d) * rng.uniform(1e-3, 10)
            gn = np.linalg.norm(g)
            L = max(g @ H @ g / gn ** 2, 1e-12) * rng.uniform(1.0, 5.0)
            tau = rng.uniform(0.1, 1.0)
            pc = cauchy_point(g, H @ g, tau * gn / L)
            assert model_reduction(H, g, pc) >= tau / (2 * L) * gn ** 2 - 1e-10


class TestAgreementAndRadius:
    def test_ratio_arithmetic(self):
        assert agreement_ratio(1.0, 0.7, 1.0, 0.6) == pytest.approx(0.75)

    def test_no_progress(self):
        assert agreement_ratio(1.0, 1.0, 1.0, 0.5) == 0.0

    def test_exact_quadratic(self, rng):
        H = random_psd(rng, 5)
        g = rng.standard_normal(5)
        f = lambda p: 2.0 + g @ p + 0.5 * p @ H @ p
        p, _ = solve_subproblem(_model(H, g), 0.3)
        m = QuadModel(2.0, g, lambda v: H @ v)
        assert agreement_ratio(f(0 * p), f(p), 2.0, 2.0 - m.reduction(p)) == pytest.approx(1.0, abs=1e-10)

    def test_degenerate(self):
        with pytest.raises(DegenerateModel):
            agreement_ratio(1.0, 0.9, 1.0, 1.0)

    @pytest.mark.parametrize("rho,expect", [(0.95, 2.0), (0.9, 2.0), (0.5, 1.0), (0.1, 1.0), (0.05, 0.5)])
    def test_radius_update(self, rho, expect):
        assert update_radius(1.0, rho) == expect

    @pytest.mark.parametrize("kwargs", [dict(eta1=0.9, eta2=0.1), dict(gamma_dec=1.2), dict(gamma_inc=0.5),
                                        dict(tau=0.0), dict(kappa=1.5), dict(delta0=0.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TRConfig(**kwargs)
