import numpy as np
import pytest

from safepc.errors import (
    ConditioningError,
    InfeasibleSplineError,
    InvalidInputError,
    RankDeficientInputsError,
    UnsupportedKernelError,
)
from safepc.kedmd import (
    Cluster,
    KernelSurrogate,
    VirtualObservationSet,
    WendlandKernel,
    cluster_regression,
    default_cluster_inputs,
    fill_distance,
    fit_kernel_surrogate,
    plan_reference,
    read_vos_csv,
    sample_virtual_observations,
    serpentine_grid,
    uniform_grid,
    wendland_eval,
    write_vos_csv,
)
from safepc.system import sampled_flow, van_der_pol


class TestWendland:
    def test_values(self):
        # exact rationals from symbolic expansion of the radial profiles
        assert wendland_eval(WendlandKernel(2, 1), 0.5) == pytest.approx(3 / 16, abs=1e-15)
        assert wendland_eval(WendlandKernel(2, 2), 0.5) == pytest.approx(83 / 768, abs=1e-15)

    @pytest.mark.parametrize("n,k", [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)])
    def test_shape(self, n, k):
        kern = WendlandKernel(n, k)
        assert wendland_eval(kern, 0.0) == 1.0
        assert wendland_eval(kern, 1.0) == 0.0
        assert wendland_eval(kern, 3.0) == 0.0
        r = np.linspace(0, 1, 101)
        assert np.all(np.diff(kern.profile(r)) <= 0)

    def test_positive_definite(self, rng):
        kern = WendlandKernel(2, 1, support=1.5)
        X = rng.uniform(-1, 1, size=(40, 2))
        assert np.linalg.eigvalsh(kern(X, X)).min() > 0

    def test_support_scaling(self):
        kern = WendlandKernel(2, 1, support=2.0)
        assert kern([[0.0, 0.0]], [[1.0, 0.0]])[0, 0] == pytest.approx(3 / 16)

    def test_unsupported(self):
        with pytest.raises(UnsupportedKernelError):
            WendlandKernel(4, 1)
        with pytest.raises(UnsupportedKernelError):
            WendlandKernel(2, 3)
        with pytest.raises(InvalidInputError):
            wendland_eval(WendlandKernel(2), -0.1)


class TestFillDistance:
    def test_corners(self):
        fd = fill_distance([[0.0, 0.0], [1.0, 1.0]], [0, 0], [1, 1], resolution=10)
        # the off-diagonal corners are distance 1 from both samples
        assert fd.value == pytest.approx(1.0)
        assert fd.bound == pytest.approx(0.5 * np.sqrt(2) / 10)

    def test_single_center_1d(self):
        fd = fill_distance([0.5], [0.0], [1.0], resolution=4)
        assert fd.value == pytest.approx(0.5)

    def test_brute_force(self, rng):
        X = rng.uniform(0, 1, size=(7, 2))
        fd = fill_distance(X, [0, 0], [1, 1], resolution=50)
        g = np.linspace(0, 1, 101)
        P = np.array([(a, b) for a in g for b in g])
        brute = np.min(np.linalg.norm(P[:, None] - X[None], axis=2), axis=1).max()
        assert abs(fd.value - brute) <= fd.bound + 1e-12

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            fill_distance(np.zeros((0, 2)), [0, 0], [1, 1])
        with pytest.raises(InvalidInputError):
            fill_distance([[0.0, 0.0]], [0, 0], [1, 1], resolution=0)


class TestClusterRegression:
    def test_exact_affine(self, rng):
        g0 = np.array([1.0, -2.0])
        G = np.array([[0.5], [3.0]])
        U = np.array([[0.0], [1.0], [0.0], [-1.0]])
        X = np.zeros((4, 2))
        Xp = g0 + U @ G.T
        a, B = cluster_regression(X, U, Xp)
        assert np.allclose(a, g0) and np.allclose(B, G)

    def test_rank_deficient(self):
        U = np.array([[0.5], [0.5], [0.5]])
        with pytest.raises(RankDeficientInputsError) as exc:
            cluster_regression(np.zeros((3, 2)), U, np.zeros((3, 2)), cluster=4)
        assert exc.value.cluster == 4

    def test_default_inputs(self):
        assert np.array_equal(default_cluster_inputs(2), [[0, 0], [1, 0], [0, 1], [0, 0]])


class TestSurrogate:
    def test_interpolates_estimates(self, rng):
        sys = van_der_pol()
        centers = uniform_grid([-1, -1], [1, 1], 4)
        vos = sample_virtual_observations(sys, centers, 1e-3, 0.05, rng=rng)
        sur = fit_kernel_surrogate(vos, WendlandKernel(2, 1, support=2.0))
        assert sur.interpolation_residual() <= 1e-8
        c = centers[5]
        assert np.linalg.norm(sur(c, [0.5]) - sampled_flow(sys, c, [0.5], 0.05)) < 1e-3

    def test_exact_on_centres_without_jitter(self):
        sys = van_der_pol()
        centers = uniform_grid([-1, -1], [1, 1], 3)
        vos = sample_virtual_observations(sys, centers, 1e-3, 0.05)
        sur = fit_kernel_surrogate(vos, WendlandKernel(2, 2, support=1.5))
        for c in centers:
            assert np.allclose(sur(c, [0.0]), sampled_flow(sys, c, [0.0], 0.05), atol=1e-8)

    def test_conditioning(self):
        centers = uniform_grid([-1, -1], [1, 1], 12)
        g0 = np.zeros((144, 2))
        G = np.zeros((144, 2, 1))
        with pytest.raises(ConditioningError):
            KernelSurrogate(centers, WendlandKernel(2, 1, support=1e4), g0, G)

    def test_vos_validation(self):
        cl = Cluster([[0.0, 0.0], [0.0, 0.0]], [[0.0], [1.0]], [[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(InvalidInputError):
            VirtualObservationSet([[0.0, 0.0], [0.0, 0.0]], 0.1, [cl, cl])
        with pytest.raises(InvalidInputError):
            VirtualObservationSet([[1.0, 0.0]], 0.1, [cl])

    def test_vos_csv_roundtrip(self, tmp_path, rng):
        vos = sample_virtual_observations(van_der_pol(), uniform_grid([-1, -1], [1, 1], 2), 0.01, 0.05, rng=rng)
        path = tmp_path / "vos.csv"
        write_vos_csv(path, vos)
        back = read_vos_csv(path)
        assert np.array_equal(back.centers, vos.centers) and back.eps_c == vos.eps_c
        for a, b in zip(vos.clusters, back.clusters):
            assert np.array_equal(a.X, b.X) and np.array_equal(a.U, b.U) and np.array_equal(a.X_plus, b.X_plus)


class TestPlan:
    def test_knots(self):
        pts = serpentine_grid([-1, -1], [1, 1], [3, 3])
        plan = plan_reference(pts, 2.0, 0.1)
        assert plan.sigma == pytest.approx(30.0)
        assert np.allclose(plan.knot_times, 2.0 * np.arange(9))
        for w in plan.windows:
            y, dy = plan.reference(w.t)
            assert np.allclose(np.concatenate([y, dy]), w.center)
            assert w.radius == pytest.approx(0.1)
        assert np.isfinite(plan.second_derivative_bound())

    def test_serpentine_order(self):
        pts = serpentine_grid([0, 0], [1, 1], [2, 2])
        assert np.array_equal(pts, [[0, 0], [0, 1], [1, 1], [1, 0]])

    def test_sigma_floor(self):
        assert plan_reference([[0.0, 0.0], [1.0, 0.0]], 1.0, 0.1, sigma_floor=50.0).sigma == 50.0

    def test_single_point_ramp(self):
        plan = plan_reference([[1.0, 0.5]], 1.0, 0.1)
        y, dy = plan.reference(2.0)
        assert y[0] == pytest.approx(2.0) and dy[0] == pytest.approx(0.5)

    def test_shared_knot_time(self):
        with pytest.raises(InfeasibleSplineError):
            plan_reference([[0.0, 0.0], [1.0, 0.0]], 1.0, 0.1, times=[0.0, 0.0])
        plan = plan_reference([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]], 1.0, 0.1, times=[0.0, 0.0, 1.0])
        assert len(plan.windows) == 2

    def test_csv(self, tmp_path):
        plan = plan_reference(serpentine_grid([-1, -1], [1, 1], [2, 2]), 1.0, 0.1)
        path = tmp_path / "plan.csv"
        plan.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "knot,t,y1,dy1,eps_c,sigma"
        assert len(lines) == 5

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            plan_reference([[0.0, 0.0, 0.0]], 1.0, 0.1)
        with pytest.raises(InvalidInputError):
            plan_reference([[0.0, 0.0]], 0.0, 0.1)
