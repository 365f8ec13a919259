import math
from fractions import Fraction

import numpy as np
import pytest
from conftest import draw_instance
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_jacobian, naive_abar, naive_derivative_block, naive_gmse, naive_middle, relative_error

from gmse.linear import (
    CVUndefinedError,
    NegativeGMSEError,
    build_plugin_cache,
    build_report,
    cumulated_gmse,
    cv,
    f_matrix_row,
    gmse_draw_variant,
    gmse_lin,
    gmse_lin_many,
    gradient_sums,
    invert_information,
)
from gmse.multinomial import Coefficients, FittedModel, fit, hessian, probabilities
from gmse.register import DomainSpec


def model_from(X, beta):
    return FittedModel.from_coefficients(X, Coefficients(beta))


class TestFBlock:
    def test_uniform_three_categories(self):
        F = f_matrix_row(np.array([1.0]), np.full(3, 1 / 3))
        np.testing.assert_allclose(F, [[2 / 9, -1 / 9], [-1 / 9, 2 / 9], [-1 / 9, -1 / 9]], rtol=1e-15)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=4)
        p = probabilities(x[None], rng.normal(size=(4, 4)))[0]
        np.testing.assert_allclose(f_matrix_row(x, p), naive_derivative_block(x, p), rtol=1e-14, atol=1e-16)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x = np.append(1.0, r.normal(size=2))
        beta = r.normal(size=(3, 3))
        fd = central_jacobian(lambda b: probabilities(x[None], b.reshape(3, 3))[0], beta.ravel())
        F = f_matrix_row(x, probabilities(x[None], beta)[0])
        assert relative_error(F, fd) <= 1e-6

    def test_rows_sum_to_zero(self, rng):
        x = rng.normal(size=3)
        p = probabilities(x[None], rng.normal(size=(4, 3)))[0]
        np.testing.assert_allclose(f_matrix_row(x, p).sum(axis=0), 0.0, atol=1e-15)


class TestCache:
    def test_middle_matches_brute_force(self, rng):
        X, _, _, _, beta = draw_instance(rng, 25, 3, 3)
        pi = rng.uniform(0.1, 0.9, 25)
        cache = build_plugin_cache(model_from(X, beta), X, pi)
        ref = naive_middle(X, pi, cache.P)
        np.testing.assert_allclose(cache.middle, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())
        np.testing.assert_allclose(cache.abar, naive_abar(X, pi, cache.P), rtol=1e-12, atol=1e-14)

    def test_gmse_matches_brute_force(self, rng):
        X, _, _, _, beta = draw_instance(rng, 25, 4, 2)
        pi = rng.uniform(0.1, 0.9, 25)
        gamma = (rng.random(25) < 0.5).astype(float)
        cache = build_plugin_cache(model_from(X, beta), X, pi)
        np.testing.assert_allclose(gmse_lin(cache, gamma), naive_gmse(X, pi, cache.P, gamma), rtol=1e-9)

    def test_meat_is_negative_abar(self, rng):
        # for the multinomial covariance the meat and the information coincide
        X, _, _, _, beta = draw_instance(rng, 80, 4, 3)
        pi = rng.uniform(0.05, 1.0, 80)
        cache = build_plugin_cache(model_from(X, beta), X, pi)
        np.testing.assert_allclose(cache.meat, -cache.abar, rtol=1e-12, atol=1e-14 * np.abs(cache.meat).max())

    def test_middle_symmetric_psd(self, rng):
        X, Y, _, lam, _ = draw_instance(rng, 500, 4, 3)
        cache = build_plugin_cache(fit(X, Y, lam), X, np.full(500, 0.3))
        M = cache.middle
        np.testing.assert_array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-10 * cache.middle_norm
        assert not cache.fallback

    def test_lemma_identity_case_is_bitwise(self, rng):
        X, Y, _, lam, _ = draw_instance(rng, 300, 3, 3, pi=0.4)
        m = fit(X, Y, lam)
        # pi equal to the realised indicators (values in {0,1})
        cache = build_plugin_cache(m, X, lam)
        np.testing.assert_array_equal(cache.abar, hessian(X, lam, m.coefficients))

    def test_census_case(self, rng):
        X, Y, _, _, _ = draw_instance(rng, 200, 3, 3)
        ones = np.ones(200)
        m = fit(X, Y, ones)
        cache = build_plugin_cache(m, X, ones)
        np.testing.assert_array_equal(cache.abar, hessian(X, ones, m.coefficients))

    def test_nonconverged_model_rejected(self, rng):
        X, Y, _, lam, _ = draw_instance(rng, 200, 3, 3)
        with pytest.warns(RuntimeWarning):
            m = fit(X, Y, lam, tol=0.0, max_iter=1)
        with pytest.raises(ValueError, match="did not converge"):
            build_plugin_cache(m, X, lam)
        assert build_plugin_cache(m, X, lam, allow_nonconverged=True).K == 3

    def test_covariance_hook(self, rng):
        X, _, _, _, beta = draw_instance(rng, 60, 3, 2)
        m = model_from(X, beta)
        base = build_plugin_cache(m, X, np.full(60, 0.5))
        doubled = build_plugin_cache(
            m, X, np.full(60, 0.5), covariance=lambda P: 2 * (np.einsum("ik,kl->ikl", P[:, :-1], np.eye(2))
                                                               - P[:, :-1, None] * P[:, None, :-1])
        )
        np.testing.assert_allclose(doubled.middle, 2 * base.middle, rtol=1e-12)


class TestInversion:
    def test_well_conditioned_is_exact_solve(self, rng):
        A = rng.normal(size=(5, 5))
        S = A @ A.T + 5 * np.eye(5)
        inv = invert_information(S)
        assert not inv.pseudo_inverse and inv.ridge_used == 0
        np.testing.assert_allclose(S @ inv.solve(np.eye(5)), np.eye(5), atol=1e-12)

    def test_singular_uses_pseudo_inverse(self, rng):
        A = rng.normal(size=(5, 3))
        S = A @ A.T
        inv = invert_information(S)
        assert inv.pseudo_inverse and inv.truncated == 2 and inv.notes
        np.testing.assert_allclose(inv.solve(np.eye(5)), np.linalg.pinv(S, hermitian=True), atol=1e-10)

    def test_duplicated_column_flags_cache(self, rng):
        X, _, _, _, beta = draw_instance(rng, 100, 3, 2)
        X = np.column_stack([X, X[:, 1]])
        m = model_from(X, np.column_stack([beta, np.zeros(2)]))
        cache = build_plugin_cache(m, X, np.full(100, 0.5))
        assert cache.pseudo_inverse and cache.fallback
        assert np.all(gmse_lin(cache, np.ones(100)) >= 0)


class TestQueries:
    def test_empty_domain(self, rng):
        X, _, _, _, beta = draw_instance(rng, 50, 3, 2)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(50, 0.2))
        np.testing.assert_array_equal(gmse_lin(cache, np.zeros(50)), 0.0)

    def test_requery_is_bit_identical(self, rng):
        X, _, _, _, beta = draw_instance(rng, 400, 4, 3)
        G = (rng.random((400, 5)) < 0.4).astype(float)
        a = gmse_lin_many(build_plugin_cache(model_from(X, beta), X, np.full(400, 0.1)), G)
        b = gmse_lin_many(build_plugin_cache(model_from(X, beta), X, np.full(400, 0.1)), G)
        np.testing.assert_array_equal(a, b)

    def test_many_equals_single(self, rng):
        X, _, _, _, beta = draw_instance(rng, 200, 3, 3)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(200, 0.2))
        G = (rng.random((200, 3)) < 0.5).astype(float)
        many = gmse_lin_many(cache, G)
        for d in range(3):
            np.testing.assert_allclose(gmse_lin(cache, G[:, d]), many[d], rtol=1e-13)

    def test_gradient_sums_against_f_blocks(self, rng):
        X, _, _, _, beta = draw_instance(rng, 40, 4, 3)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(40, 0.5))
        gamma = rng.random(40)
        ref = sum(gamma[i] * f_matrix_row(X[i], cache.P[i]) for i in range(40))
        np.testing.assert_allclose(gradient_sums(cache, gamma)[0], ref, rtol=1e-12, atol=1e-14)

    def test_negative_beyond_rounding_raises(self, rng):
        X, _, _, _, beta = draw_instance(rng, 40, 3, 2)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(40, 0.5))
        object.__setattr__(cache, "middle", -np.eye(cache.H))
        with pytest.raises(NegativeGMSEError):
            gmse_lin(cache, np.ones(40))

    def test_tiny_negative_is_clamped(self, rng, caplog):
        X, _, _, _, beta = draw_instance(rng, 40, 3, 2)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(40, 0.5))
        object.__setattr__(cache, "middle", -1e-15 * np.eye(cache.H))
        object.__setattr__(cache, "middle_norm", 1.0)
        np.testing.assert_array_equal(gmse_lin(cache, np.ones(40)), 0.0)
        assert "clamped" in caplog.text

    def test_monotone_information(self):
        # more sampling, same population: median GMSE does not grow
        r = np.random.default_rng(11)
        X, _, _, _, beta = draw_instance(r, 10000, 3, 3, scale=0.4)
        P = probabilities(X, beta)
        meds = []
        for rate in (0.05, 0.20):
            vals = []
            for s in range(20):
                rs = np.random.default_rng([s, int(rate * 100)])
                labels = (rs.random(10000)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
                Y = np.eye(3)[np.minimum(labels, 2)]
                lam = (rs.random(10000) < rate).astype(float)
                cache = build_plugin_cache(fit(X, Y, lam), X, np.full(10000, rate))
                vals.append(gmse_lin(cache, np.ones(10000)))
            meds.append(np.median(vals, axis=0))
        assert np.all(P.sum(axis=0) * 0.05 >= 100)
        assert np.all(meds[1] <= meds[0])


class TestDrawVariant:
    def test_identity_is_one_addition(self, rng):
        X, _, _, _, beta = draw_instance(rng, 100, 4, 3)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(100, 0.3))
        gamma = (rng.random(100) < 0.5).astype(float)
        extra = gamma @ (cache.P * (1 - cache.P))
        np.testing.assert_array_equal(gmse_draw_variant(cache, gamma), gmse_lin(cache, gamma) + extra)
        assert np.all(gmse_draw_variant(cache, gamma) >= gmse_lin(cache, gamma))

    def test_single_coin_unit(self):
        X = np.ones((1, 1))
        m = model_from(X, [[0.0]])
        cache = build_plugin_cache(m, X, np.ones(1))
        diff = gmse_draw_variant(cache, np.ones(1)) - gmse_lin(cache, np.ones(1))
        np.testing.assert_allclose(diff, [0.25, 0.25], rtol=1e-12)

    def test_extra_term_additive_over_partition(self, rng):
        X, _, _, _, beta = draw_instance(rng, 90, 3, 2)
        P = probabilities(X, beta)
        groups = rng.integers(0, 3, 90)
        parts = sum((groups == g).astype(float) @ (P * (1 - P)) for g in range(3))
        np.testing.assert_allclose(parts, np.ones(90) @ (P * (1 - P)), rtol=1e-13)


class TestCvAndCumulation:
    @pytest.mark.parametrize("theta, gmse, expected", [(113719, 497936, 0.0062), (1039, 15195, 0.1186)])
    def test_reference_spot_values(self, theta, gmse, expected):
        assert abs(100 * cv(theta, gmse) - 100 * expected) <= 0.01

    def test_zero_gmse(self):
        assert cv(10.0, 0.0) == 0.0

    def test_undefined_on_zero_total(self):
        with pytest.raises(CVUndefinedError, match="CV undefined"):
            cv(0.0, 1.0)

    def test_cumulated_simple(self):
        assert cumulated_gmse([1, 2, 3]) == 6

    @given(st.lists(st.floats(0, 1e9, allow_nan=False), min_size=1, max_size=12))
    def test_cumulated_is_correctly_rounded(self, xs):
        exact = sum(Fraction(x) for x in xs)
        assert cumulated_gmse(xs) == float(exact)

    def test_trace_identity(self, rng):
        X, _, _, _, beta = draw_instance(rng, 150, 4, 3)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(150, 0.3))
        gamma = rng.random(150)
        V = gradient_sums(cache, gamma)[0]
        trace = np.trace(V @ cache.middle @ V.T)
        assert cumulated_gmse(gmse_lin(cache, gamma)) == pytest.approx(trace, rel=1e-12)


class TestReport:
    def test_cv_column_and_flags(self, rng):
        X, Y, labels, lam, beta = draw_instance(rng, 300, 3, 3)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(300, 0.3))
        Ys = Y * lam[:, None]
        unsampled = DomainSpec("unsampled", lam == 0)
        rep = build_report(cache, [DomainSpec("full", np.ones(300, bool), "full_register"), unsampled,
                                   DomainSpec("empty", np.zeros(300, bool))], Ys, draw=True)
        for r in rep.lookup("full"):
            assert r.cv == math.sqrt(r.gmse_lin) / r.theta_hat
        assert all(r.flag == "no_sampled_support" for r in rep.lookup("unsampled"))
        assert all(r.flag == "cv_undefined" for r in rep.lookup("empty"))
        assert rep.cumulated["full"] == math.fsum(rep.column("gmse_lin", "full"))
        np.testing.assert_array_equal(rep.column("n_kd", "full"), Ys.sum(axis=0))

    def test_csv_percent(self, rng, tmp_path):
        X, Y, _, lam, beta = draw_instance(rng, 100, 3, 2)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(100, 0.3))
        rep = build_report(cache, [DomainSpec("full", np.ones(100, bool))], Y * lam[:, None], ["a", "b", "c"])
        rep.to_csv(tmp_path / "r.csv", percent=True)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "domain,category,theta_hat,n_kd,gmse_lin,cv,flag"
        assert lines[1].split(",")[5].endswith("%")
        rep.plot_data_csv(tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text().startswith("domain,category,n_kd,theta_hat,cv,log10_cv")


class TestExternalDomains:
    def test_equal_cv_when_covariates_identical_across_domains(self, rng):
        # each external domain holds an exact copy of the same covariate rows
        X0, _, _, _, beta = draw_instance(rng, 200, 4, 3)
        D = 3
        X = np.vstack([X0] * D)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(200 * D, 0.1))
        G = np.kron(np.eye(D), np.ones((200, 1)))
        g = gmse_lin_many(cache, G)
        theta = G.T @ cache.P
        cvs = np.sqrt(g) / theta
        np.testing.assert_allclose(cvs, np.broadcast_to(cvs[0], cvs.shape), rtol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_partition_additivity_of_gradients(self, seed, D):
        r = np.random.default_rng(seed)
        X, _, _, _, beta = draw_instance(r, 60, 3, 2)
        cache = build_plugin_cache(model_from(X, beta), X, np.full(60, 0.5))
        groups = r.integers(0, D, 60)
        G = np.column_stack([(groups == d).astype(float) for d in range(D)])
        V = gradient_sums(cache, G)
        np.testing.assert_allclose(V.sum(axis=0), gradient_sums(cache, np.ones(60))[0], rtol=1e-10, atol=1e-12)
