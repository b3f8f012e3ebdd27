import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safepc.errors import DegenerateConstraintsError, DivergedError, IntegrationBlowupError, InvalidInputError
from safepc.numerics import (
    BoxConstraint,
    minimize_box,
    numerical_rank,
    pseudo_inverse,
    rk4_step,
    solve_equality_qp,
    svd,
)


def _penrose(A, P, tol):
    assert np.allclose(A @ P @ A, A, atol=tol)
    assert np.allclose(P @ A @ P, P, atol=tol)
    assert np.allclose((A @ P).T, A @ P, atol=tol)
    assert np.allclose((P @ A).T, P @ A, atol=tol)


class TestPseudoInverse:
    def test_identity(self):
        assert np.allclose(pseudo_inverse(np.eye(3)), np.eye(3))

    def test_singular_diagonal(self):
        assert np.allclose(pseudo_inverse(np.diag([1.0, 0.0])), np.diag([1.0, 0.0]))

    def test_rank_one(self):
        A = np.array([[1.0, 2.0], [2.0, 4.0]])
        P = pseudo_inverse(A)
        assert np.allclose(P, A / 25.0, atol=1e-14)
        _penrose(A, P, 1e-12)

    def test_penrose_random(self, rng):
        for _ in range(20):
            U, _ = np.linalg.qr(rng.normal(size=(6, 6)))
            V, _ = np.linalg.qr(rng.normal(size=(4, 4)))
            s = np.logspace(0, -6, 4)
            A = U[:, :4] @ np.diag(s) @ V.T
            _penrose(A, pseudo_inverse(A), 1e-8)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            pseudo_inverse(np.array([[np.nan, 1.0]]))
        with pytest.raises(InvalidInputError):
            pseudo_inverse(np.eye(2), tol=0.0)

    def test_svd_sorted_orthonormal(self, rng):
        A = rng.normal(size=(5, 3))
        f = svd(A)
        assert np.all(np.diff(f.s) <= 0)
        assert np.allclose(f.u.T @ f.u, np.eye(3), atol=1e-10)
        assert np.allclose(f.vt @ f.vt.T, np.eye(3), atol=1e-10)


class TestRank:
    def test_zero(self):
        assert numerical_rank(np.zeros((2, 2))) == 0

    def test_identity(self):
        assert numerical_rank(np.eye(4)) == 4

    def test_constant_hankel(self):
        assert numerical_rank(np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])) == 1


class TestRk4:
    def test_zero_field(self):
        x = np.array([1.0, -2.0])
        assert np.array_equal(rk4_step(lambda t, z: np.zeros(2), 0.0, x, 0.3), x)

    def test_exponential_series(self):
        x1 = rk4_step(lambda t, z: z, 0.0, np.array([1.0]), 0.1)[0]
        assert x1 == pytest.approx(1 + 0.1 + 0.1**2 / 2 + 0.1**3 / 6 + 0.1**4 / 24, abs=1e-15)
        assert abs(x1 - math.exp(0.1)) < 1e-7

    def test_rotation_norm(self):
        x = np.array([1.0, 0.0])
        h = 0.01
        for _ in range(100):
            x = rk4_step(lambda t, z: np.array([z[1], -z[0]]), 0.0, x, h)
        assert abs(np.linalg.norm(x) - 1.0) < 100 * h**5
        assert np.allclose(x, [math.cos(1.0), -math.sin(1.0)], atol=1e-9)

    def test_fourth_order(self):
        def endpoint(h):
            x = np.array([1.0])
            for _ in range(int(round(1.0 / h))):
                x = rk4_step(lambda t, z: -2.0 * z, 0.0, x, h)
            return abs(x[0] - math.exp(-2.0))

        ratio = endpoint(0.1) / endpoint(0.05)
        assert 14 <= ratio <= 18

    def test_blowup(self):
        with pytest.raises(IntegrationBlowupError) as exc:
            rk4_step(lambda t, z: np.array([np.inf]), 2.5, np.array([1.0]), 0.1)
        assert exc.value.t == 2.5


class TestEqualityQp:
    def test_projection(self):
        x = solve_equality_qp(2 * np.eye(2), np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0]))
        assert np.allclose(x, [1.0, 0.0])

    def test_unconstrained(self):
        x = solve_equality_qp(2 * np.eye(2), np.array([-2.0, 0.0]))
        assert np.allclose(x, [1.0, 0.0])

    def test_random_kkt_residual(self, rng):
        for _ in range(10):
            M = rng.normal(size=(6, 6))
            H = M @ M.T + 0.1 * np.eye(6)
            g = rng.normal(size=6)
            A = rng.normal(size=(2, 6))
            b = rng.normal(size=2)
            x = solve_equality_qp(H, g, A, b)
            lam = np.linalg.lstsq(A.T, -(H @ x + g), rcond=None)[0]
            assert np.linalg.norm(H @ x + g + A.T @ lam) <= 1e-8 * (1 + np.linalg.norm(b))
            assert np.linalg.norm(A @ x - b) <= 1e-10 * (1 + np.linalg.norm(b))

    def test_degenerate(self):
        A = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DegenerateConstraintsError):
            solve_equality_qp(np.eye(2), np.zeros(2), A, np.array([1.0, 2.0]))


class TestMinimizeBox:
    def test_interior(self):
        res = minimize_box(lambda x: (x[0] - 1) ** 2, lambda x: 2 * (x - 1), BoxConstraint([0.0], [2.0]), [0.0])
        assert res.x[0] == pytest.approx(1.0, abs=1e-6)
        assert res.converged

    def test_active_bound(self):
        res = minimize_box(lambda x: (x[0] - 3) ** 2, lambda x: 2 * (x - 3), BoxConstraint([0.0], [2.0]), [0.0])
        assert res.x[0] == 2.0

    def test_unbounded_quadratic(self, rng):
        M = rng.normal(size=(4, 4))
        Q = M @ M.T + np.eye(4)
        res = minimize_box(lambda x: x @ Q @ x, lambda x: 2 * Q @ x, BoxConstraint.unbounded(4),
                           rng.normal(size=4), max_iters=2000, step_tol=1e-10)
        assert np.linalg.norm(res.x) < 1e-8

    def test_diverged(self):
        with pytest.raises(DivergedError):
            minimize_box(lambda x: np.nan, lambda x: x, BoxConstraint.unbounded(1), [0.0])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_monotone_and_feasible(self, center, start):
        c = np.array(center)
        box = BoxConstraint.symmetric(1.0, 3)
        seen = []

        def f(x):
            v = float(np.sum((x - c) ** 4) + np.sum((x - c) ** 2))
            return v

        def g(x):
            return 4 * (x - c) ** 3 + 2 * (x - c)

        x0 = box.project(np.array(start))
        res = minimize_box(f, g, box, x0, max_iters=50)
        assert box.contains(res.x)
        assert res.fun <= f(x0) + 1e-12
        seen.append(res.fun)

    def test_box_validation(self):
        with pytest.raises(InvalidInputError):
            BoxConstraint([1.0], [0.0])
