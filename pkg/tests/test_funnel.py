import math

import numpy as np
import pytest

from safepc.errors import FunnelViolationError, InvalidInputError
from safepc.funnel import (
    ActivationWindow,
    FunnelFunction,
    TwoComponentController,
    activation,
    combine,
    error_vars,
    paper_sigma,
    u_fc,
)


class TestSigma:
    def test_benchmark_values(self):
        assert paper_sigma(0.0) == pytest.approx(1 / 2.3)
        assert paper_sigma(4.0) == pytest.approx(1 / 2.3)
        # continuous at the switch: 1 / (2 + 0.3)
        assert paper_sigma(4.0 + 1e-12) == pytest.approx(1 / 2.3, rel=1e-9)
        assert paper_sigma(100.0) == pytest.approx(1 / 0.3)

    def test_switch_shift(self):
        assert paper_sigma(12.0, switch=10.0) == pytest.approx(paper_sigma(6.0))
        assert FunnelFunction.benchmark(10.0).tag != FunnelFunction.benchmark().tag

    def test_radius_is_nonincreasing(self):
        tt = np.linspace(0, 20, 2001)
        radius = np.array([FunnelFunction.benchmark().radius(t) for t in tt])
        assert np.all(np.diff(radius) <= 1e-15)

    def test_constant_and_piecewise(self):
        assert FunnelFunction.constant(2.0)(123.0) == 2.0
        f = FunnelFunction.piecewise([1.0, 2.0], [1.0, 2.0, 3.0])
        assert [f(0.5), f(1.0), f(1.5), f(2.5)] == [1.0, 2.0, 2.0, 3.0]
        with pytest.raises(InvalidInputError):
            FunnelFunction.constant(0.0)
        assert FunnelFunction.constant(1.0).is_admissible(np.linspace(0, 1, 5))


class TestErrorVars:
    def test_zero_error(self):
        s = error_vars(0.0, [0.0], [0.0], [0.0], [0.0], 1.0)
        assert np.allclose(s.e1, 0) and np.allclose(s.e2, 0)

    def test_worked_example(self):
        # e = 0.5, de = 0 with sigma 1: e1 = 0.5, e2 = 0.5 / 0.75
        s = error_vars(0.0, [0.5], [0.0], [0.0], [0.0], 1.0)
        assert s.e1[0] == pytest.approx(0.5)
        assert s.e2[0] == pytest.approx(2.0 / 3.0)

    def test_sigma_scales(self):
        s = error_vars(0.0, [1.0], [0.2], [0.0], [0.0], 0.5)
        e1 = 0.5
        assert s.e2[0] == pytest.approx(0.1 + e1 / (1 - e1**2))

    def test_violation(self):
        with pytest.raises(FunnelViolationError) as exc:
            error_vars(1.5, [1.0], [0.0], [0.0], [0.0], 1.0)
        assert exc.value.which == "e1"

    def test_ufc(self):
        assert np.allclose(u_fc([0.0]), [0.0])
        assert u_fc([0.5])[0] == pytest.approx(-0.5 / 0.75)
        with pytest.raises(FunnelViolationError):
            u_fc([1.0])


class TestActivation:
    def test_threshold(self):
        w = ActivationWindow(0.5, 0.75)
        assert activation(w, 0.0, 0.5) == 0.0
        assert activation(w, 0.1, 0.9) == pytest.approx(0.15)

    def test_window_memory(self):
        w = ActivationWindow(0.5, 0.75)
        activation(w, 0.0, 0.95)
        assert activation(w, 0.5, 0.1) == pytest.approx(0.2)  # exactly tau old is kept
        assert activation(w, 0.51, 0.1) == 0.0

    def test_matches_brute_force(self, rng):
        tau, lam = 0.3, 0.6
        w = ActivationWindow(tau, lam)
        times = np.cumsum(rng.uniform(0.01, 0.1, size=300))
        vals = rng.uniform(0, 0.99, size=300)
        for i, (t, v) in enumerate(zip(times, vals)):
            a = activation(w, t, v)
            mask = (times[: i + 1] >= t - tau - 1e-12)
            assert a == pytest.approx(max(0.0, vals[: i + 1][mask].max() - lam))

    def test_range(self, rng):
        w = ActivationWindow(0.2, 0.75)
        for t in np.arange(0, 5, 0.01):
            a = activation(w, t, rng.uniform(0, 0.999))
            assert 0.0 <= a < 0.25

    def test_time_regression(self):
        w = ActivationWindow(0.2, 0.75)
        w.update(0.10000000000000003, 0.1)
        w.update(0.1, 0.1)  # rounding noise is tolerated
        with pytest.raises(InvalidInputError):
            w.update(0.05, 0.1)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            ActivationWindow(0.0, 0.5)
        with pytest.raises(InvalidInputError):
            ActivationWindow(0.1, 1.0)


class TestController:
    def test_combine(self):
        assert np.allclose(combine([1.0], 0.0, [5.0]), [1.0])
        assert np.allclose(combine([1.0], 0.5, [-2.0]), [0.0])

    def test_inactive_passes_mu(self):
        ctl = TwoComponentController(1, FunnelFunction.constant(1.0), lambda t: (np.zeros(1), np.zeros(1)))
        ctl.set_mu([0.7])
        assert np.allclose(ctl(0.0, [0.0, 0.0]), [0.7])
        assert ctl.diagnostics["a_tau"] == 0.0

    def test_active_pushes_back(self):
        ctl = TwoComponentController(1, FunnelFunction.constant(1.0), lambda t: (np.zeros(1), np.zeros(1)))
        u = ctl(0.0, [0.5, 0.1])
        assert ctl.diagnostics["a_tau"] > 0
        assert u[0] < 0

    def test_full_gain(self):
        ctl = TwoComponentController(1, FunnelFunction.constant(1.0), lambda t: (np.zeros(1), np.zeros(1)),
                                     full_gain=True)
        u = ctl(0.0, [0.5, 0.0])
        assert u[0] == pytest.approx(float(u_fc([2.0 / 3.0])[0]))

    def test_no_safeguard(self):
        ctl = TwoComponentController(1, FunnelFunction.constant(1.0), lambda t: (np.zeros(1), np.zeros(1)),
                                     safeguard=False)
        ctl.set_mu([0.3])
        assert np.allclose(ctl(0.0, [0.6, 0.3]), [0.3])
        assert math.isnan(ctl.diagnostics["u_fc"])
