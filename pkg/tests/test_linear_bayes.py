import numpy as np
import pytest

from bpinn_ip.fields import (
    ForwardOperator,
    Down,
    Conv,
    EmissivityMap,
    LinearityError,
    PsfKernel,
    identity_operator,
    op_adjoint_linear,
    op_apply,
    restoration_operator,
)
from bpinn_ip.linear_bayes import (
    GaussParams,
    NumericalBreakdown,
    cg_solve,
    posterior_eq5,
    posterior_eq17,
    variance_diag,
)
from oracles import conv_matrix, down_matrix, three_term_dense, random_kernel, tikhonov_dense


class TestCG:
    def test_identity_one_iteration(self, rng):
        b = rng.standard_normal((3, 4))
        calls = []

        def ident(x):
            calls.append(1)
            return x

        x, res = cg_solve(ident, b, 1e-12)
        np.testing.assert_allclose(x, b, atol=1e-15)
        assert res == 0.0
        assert len(calls) == 2  # one iteration plus the final residual check

    def test_diagonal_2x2(self):
        d = np.array([[2.0, 3.0]])
        x, _ = cg_solve(lambda v: d * v, np.array([[2.0, 3.0]]))
        np.testing.assert_allclose(x, [[1.0, 1.0]], atol=1e-14)

    def test_random_spd_against_dense_solve(self, rng):
        B = rng.standard_normal((16, 16))
        M = B @ B.T + 0.5 * np.eye(16)
        b = rng.standard_normal(16)
        x, res = cg_solve(lambda v: (M @ v.ravel()).reshape(4, 4), b.reshape(4, 4), 1e-12)
        np.testing.assert_allclose(x.ravel(), np.linalg.solve(M, b), rtol=1e-8, atol=1e-10)
        assert res <= 1e-12

    def test_zero_rhs(self):
        x, res = cg_solve(lambda v: v, np.zeros((2, 2)))
        assert res == 0.0 and not x.any()

    def test_max_iter_returns_iterate_with_residual(self, rng):
        B = rng.standard_normal((30, 30))
        M = B @ B.T + 1e-3 * np.eye(30)
        x, res = cg_solve(lambda v: M @ v, rng.standard_normal(30), 1e-12, max_iter=2)
        assert res > 1e-12

    def test_breakdown_on_non_finite(self):
        with pytest.raises(NumericalBreakdown):
            cg_solve(lambda v: v * np.nan, np.ones((2, 2)))


def _blur(rng, n=4, k=3):
    w = random_kernel(rng, k)
    return ForwardOperator((Conv(PsfKernel(w)),), (n, n)), conv_matrix(n, n, w)


class TestPosteriorEq5:
    def test_scalar_hand_case(self):
        A = identity_operator((1, 1))
        post = posterior_eq5(A, np.array([[1.0]]), GaussParams(v_eps=0.3, v_f=0.3, f_bar=0.0))
        assert post.mean[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert post.var_diag[0, 0] == pytest.approx(0.15, abs=1e-12)

    def test_unregularized_identity(self, rng):
        g = rng.standard_normal((3, 3))
        post = posterior_eq5(identity_operator((3, 3)), g, GaussParams(1.0, 1e12))
        np.testing.assert_allclose(post.mean, g, atol=1e-8)

    def test_blur_against_dense(self, rng):
        A, M = _blur(rng)
        g = rng.standard_normal((4, 4))
        f_bar = rng.standard_normal((4, 4))
        p = GaussParams(0.05, 0.5, f_bar=f_bar)
        post = posterior_eq5(A, g, p)
        ref = tikhonov_dense(M, g, p.lam, f_bar)
        np.testing.assert_allclose(post.mean.ravel(), ref, rtol=1e-8, atol=1e-10)
        cov = p.v_eps * np.linalg.inv(M.T @ M + p.lam * np.eye(16))
        np.testing.assert_allclose(post.var_diag.ravel(), np.diag(cov), rtol=1e-7)
        assert post.solver_residual <= 1e-8

    def test_mean_minimizes_objective(self, rng):
        A, _ = _blur(rng, 6)
        g = rng.standard_normal((6, 6))
        p = GaussParams(0.1, 2.0, f_bar=0.3)
        f_hat = posterior_eq5(A, g, p, variance="none").mean

        def J(f):
            return np.sum((g - op_apply(A, f)) ** 2) / (2 * p.v_eps) + np.sum((f - 0.3) ** 2) / (2 * p.v_f)

        j0 = J(f_hat)
        for _ in range(50):
            d = rng.standard_normal((6, 6))
            d *= 1e-3 / np.linalg.norm(d)
            assert J(f_hat + d) >= j0 - 1e-9

    def test_normal_equation_residual(self, rng):
        A, _ = _blur(rng, 8, 5)
        g = rng.standard_normal((8, 8))
        p = GaussParams(0.01, 0.1)
        post = posterior_eq5(A, g, p, variance="none")
        lhs = op_adjoint_linear(A, op_apply(A, post.mean)) + p.lam * post.mean
        rhs = op_adjoint_linear(A, g)
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) <= 1e-8

    def test_rejects_nonlinear(self):
        A = restoration_operator((4, 4), PsfKernel.delta(1), EmissivityMap.smooth_saturate(1, 1))
        with pytest.raises(LinearityError):
            posterior_eq5(A, np.zeros((4, 4)), GaussParams(1.0, 1.0))

    def test_requires_v_f(self):
        with pytest.raises(ValueError):
            posterior_eq5(identity_operator((2, 2)), np.zeros((2, 2)), GaussParams(1.0))


class TestPosteriorEq17:
    def test_scalar_hand_case(self):
        A = identity_operator((1, 1))
        post = posterior_eq17(A, np.array([[2.0]]), np.array([[1.0]]), GaussParams(1.0, 1.0, 1.0, 0.0))
        assert post.mean[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert post.var_diag[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_dense_4x4_with_downsampling(self, rng):
        w = random_kernel(rng, 1)
        A = ForwardOperator((Down(2), Conv(PsfKernel(w))), (4, 4))
        M = conv_matrix(2, 2, w) @ down_matrix(4, 4, 2)
        g = rng.standard_normal((2, 2))
        f_T = rng.standard_normal((4, 4))
        p = GaussParams(0.2, 0.4, 0.8, f_bar=0.1)
        post = posterior_eq17(A, g, f_T, p)
        ref, lhs = three_term_dense(M, g, f_T, p.lam, p.mu, 0.1)
        np.testing.assert_allclose(post.mean.ravel(), ref, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(post.var_diag.ravel(), p.v_eps * np.diag(np.linalg.inv(lhs)), rtol=1e-7)

    def test_reduces_to_eq5_without_background_prior(self, rng):
        A, _ = _blur(rng)
        g, f_T = rng.standard_normal((2, 4, 4))
        a = posterior_eq17(A, g, f_T, GaussParams(0.1, 0.5, 1e14), variance="none").mean
        b = posterior_eq5(A, g, GaussParams(0.1, 0.5, f_bar=f_T), variance="none").mean
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)

    def test_large_lambda_pins_to_reference(self, rng):
        A, _ = _blur(rng)
        g, f_T = rng.standard_normal((2, 4, 4))
        post = posterior_eq17(A, g, f_T, GaussParams(1.0, 1e-8, 1.0), variance="none")
        assert np.linalg.norm(post.mean - f_T) / np.linalg.norm(f_T) <= 1e-3


class TestVarianceDiag:
    def test_identity_scale(self):
        v = variance_diag(lambda x: x, (2, 3), 2.0)
        np.testing.assert_array_equal(v, np.full((2, 3), 2.0))

    def test_diagonal_operator(self):
        d = np.array([[1.0, 2.0, 4.0]])
        v = variance_diag(lambda x: d * x, (1, 3), 1.0, mode="exact")
        np.testing.assert_allclose(v, [[1.0, 0.5, 0.25]], atol=1e-14)

    def test_probe_close_to_exact(self, rng):
        A = restoration_operator((8, 8), PsfKernel.gaussian(1.0, 3))
        lam = 1.0

        def normal(x):
            return op_adjoint_linear(A, op_apply(A, x)) + lam * x

        exact = variance_diag(normal, (8, 8), 1.0, mode="exact")
        probe = variance_diag(normal, (8, 8), 1.0, n_probe=64, seed=3, mode="probe")
        assert np.max(np.abs(probe - exact) / exact) <= 0.15

    def test_exact_mode_ignores_seed_and_is_positive(self):
        A = restoration_operator((4, 4), PsfKernel.gaussian(1.0, 3))

        def normal(x):
            return op_adjoint_linear(A, op_apply(A, x)) + 0.1 * x

        a = variance_diag(normal, (4, 4), 1.0, seed=1)
        b = variance_diag(normal, (4, 4), 1.0, seed=99)
        np.testing.assert_array_equal(a, b)
        assert np.all(a > 0)

    def test_auto_switches_to_probes_above_64_pixels(self):
        calls = []

        def ident(x):
            calls.append(1)
            return x

        variance_diag(ident, (9, 8), 1.0, n_probe=3)
        assert len(calls) == 3 * 2
