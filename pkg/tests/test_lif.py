import math

import numpy as np
import pytest

from eventsnn.core import LifParams, NeuronState, UnsupportedTauRatio
from eventsnn.lif import (
    EPS_LAMBERT,
    NegativeDt,
    _lambertw0,
    bisect_crossing,
    next_crossing_double_tau,
    next_crossing_equal_tau,
    next_crossing_safe,
    propagate,
    voltage_at,
)

from conftest import euler_first_crossing

P2 = LifParams(tau_mem=2.0)
P1 = LifParams(tau_mem=1.0)


class TestPropagate:
    def test_dt_zero_is_identity(self):
        st = NeuronState(np.array([0.3, -0.1]), np.array([1.0, 0.0]), t=0.5)
        out = propagate(st, P2, 0.0)
        np.testing.assert_array_equal(out.v, st.v)
        np.testing.assert_array_equal(out.i, st.i)
        assert out.t == st.t

    def test_pure_exponential_decay(self):
        # V0=0.5, I0=0, tau_m=2: after dt = 2 ln 2 the voltage halves
        st = NeuronState(np.array([0.5]), np.array([0.0]))
        out = propagate(st, P2, 2.0 * math.log(2.0))
        assert out.v[0] == pytest.approx(0.25, abs=1e-12)
        assert out.i[0] == 0.0

    def test_crossing_value_against_euler(self):
        # V0=0, I0=4 reaches threshold near dt=0.3166 (Euler oracle, dt=1e-6)
        t_star = euler_first_crossing(0.0, 4.0, P2, dt=1e-6)
        st = NeuronState(np.array([0.0]), np.array([4.0]))
        out = propagate(st, P2, t_star)
        assert abs(out.v[0] - P2.v_th) < 1e-4

    def test_negative_dt_rejected(self):
        with pytest.raises(NegativeDt):
            propagate(NeuronState.zeros(1), P2, -0.1)

    @pytest.mark.parametrize("params", [P1, P2, LifParams(tau_mem=3.3)])
    def test_composition(self, params, rng):
        # propagate(dt1+dt2) == propagate(dt1) then propagate(dt2)
        for _ in range(50):
            st = NeuronState(rng.normal(size=3) * 0.5, rng.normal(size=3))
            dt1, dt2 = rng.uniform(0, 2, size=2)
            once = propagate(st, params, dt1 + dt2)
            twice = propagate(propagate(st, params, dt1), params, dt2)
            np.testing.assert_allclose(once.v, twice.v, atol=1e-12)
            np.testing.assert_allclose(once.i, twice.i, atol=1e-12)


class TestDoubleTauCrossing:
    def test_subthreshold_never_crosses(self):
        assert next_crossing_double_tau(-0.5, -1.0, P2).time is None
        assert next_crossing_double_tau(0.0, 0.0, P2).time is None

    def test_reference_case_matches_quadratic_root(self):
        # larger root of 8x^2 - 8x + 1 = 0, dt = -2 ln x
        x = (2.0 + math.sqrt(2.0)) / 4.0
        expected = -2.0 * math.log(x)
        got = next_crossing_double_tau(0.0, 4.0, P2).time
        assert got == pytest.approx(expected, abs=1e-12)
        t_euler = euler_first_crossing(0.0, 4.0, P2, dt=1e-6)
        assert got == pytest.approx(t_euler, abs=1e-4)

    def test_negative_discriminant_means_no_crossing(self):
        # weak positive current that peaks below threshold
        assert next_crossing_double_tau(0.0, 0.3, P2).time is None

    def test_wrong_ratio_rejected(self):
        with pytest.raises(UnsupportedTauRatio):
            next_crossing_double_tau(0.0, 4.0, P1)

    def test_residuals_and_agreement_with_bisection(self, rng):
        # |V(t*) - v_th| <= 1e-9 and bisection agreement to 1e-10
        n_checked = 0
        for _ in range(2000):
            v0 = float(rng.uniform(-2.0, 0.99))
            i0 = float(rng.uniform(-3.0, 5.0))
            t_a = next_crossing_double_tau(v0, i0, P2).time
            if t_a is None:
                assert bisect_crossing(v0, i0, P2, t_hi=12.0) is None
                continue
            resid = abs(float(voltage_at(v0, i0, t_a, P2)) - P2.v_th)
            assert resid <= 1e-9, (v0, i0, resid)
            t_b = bisect_crossing(v0, i0, P2, t_hi=max(2 * t_a, 1.0), tol=1e-13)
            assert t_b is not None and abs(t_a - t_b) <= 1e-10, (v0, i0, t_a, t_b)
            n_checked += 1
        assert n_checked > 500

    def test_minimality_no_earlier_crossing(self, rng):
        # Euler probe never exceeds v_th + 1e-4 before the reported time
        for _ in range(40):
            v0 = float(rng.uniform(-1.0, 0.9))
            i0 = float(rng.uniform(0.5, 5.0))
            t_a = next_crossing_double_tau(v0, i0, P2).time
            if t_a is None:
                continue
            grid = np.linspace(0.0, t_a * (1 - 1e-9), 2000)
            v = voltage_at(v0, i0, grid, P2)
            assert np.all(v <= P2.v_th + 1e-4)


class TestEqualTauCrossing:
    def test_monotone_decay_never_crosses(self):
        assert next_crossing_equal_tau(0.5, 0.0, P1).time is None

    def test_strong_drive_crossing_residual(self):
        t = next_crossing_equal_tau(0.0, 10.0, P1).time
        assert t is not None
        assert abs(float(voltage_at(0.0, 10.0, t, P1)) - P1.v_th) <= 1e-9
        t_euler = euler_first_crossing(0.0, 10.0, P1, dt=1e-6)
        assert t == pytest.approx(t_euler, abs=1e-4)

    def test_below_branch_point_is_none(self):
        # tiny current cannot lift the membrane to threshold
        assert next_crossing_equal_tau(0.0, 0.2, P1).time is None

    def test_wrong_ratio_rejected(self):
        with pytest.raises(UnsupportedTauRatio):
            next_crossing_equal_tau(0.0, 4.0, P2)

    def test_residuals_random_states(self, rng):
        hits = 0
        for _ in range(2000):
            v0 = float(rng.uniform(-2.0, 0.99))
            i0 = float(rng.uniform(-3.0, 8.0))
            t = next_crossing_equal_tau(v0, i0, P1).time
            t_b = bisect_crossing(v0, i0, P1, t_hi=12.0)
            if t is None:
                assert t_b is None
                continue
            assert abs(float(voltage_at(v0, i0, t, P1)) - P1.v_th) <= 1e-9
            assert t_b is not None and abs(t - t_b) <= 1e-9
            hits += 1
        assert hits > 400

    def test_lambert_convergence(self, rng):
        z = np.concatenate(
            [rng.uniform(-1 / math.e, 0.0, size=1000), np.array([-1 / math.e, -1e-300, -0.367879])]
        )
        w = _lambertw0(z)
        assert np.all(np.abs(w * np.exp(w) - z) <= EPS_LAMBERT)


class TestVectorizedSafety:
    def test_all_zero_states_give_inf(self):
        out = next_crossing_safe(np.zeros(5), np.zeros(5), P2)
        assert np.all(np.isinf(out))

    def test_scalar_vector_agreement_bitwise(self, rng):
        v0 = rng.uniform(-2, 0.99, size=200)
        i0 = rng.uniform(-3, 5, size=200)
        vec = next_crossing_safe(v0, i0, P2)
        for k in range(200):
            r = next_crossing_double_tau(float(v0[k]), float(i0[k]), P2)
            scalar = math.inf if r.time is None else r.time
            assert scalar == vec[k]

    def test_mixed_vector_one_spiking(self):
        out = next_crossing_safe(np.array([0.0, 0.0]), np.array([4.0, 0.0]), P2)
        assert np.isfinite(out[0]) and np.isinf(out[1])

    @pytest.mark.parametrize("params", [P1, P2])
    def test_fuzz_no_nan(self, params, rng):
        # 1e5 random + hostile states: outputs are finite-or-inf, never NaN
        n = 100_000
        v0 = rng.uniform(-1e3, 1e3, size=n) * 10.0 ** rng.integers(-12, 3, size=n)
        i0 = rng.uniform(-1e3, 1e3, size=n) * 10.0 ** rng.integers(-12, 3, size=n)
        hostile_v = np.array([0.0, -0.0, 1.0, 1.0 - 1e-16, -1e308, 1e-308, 0.999999, 0.5])
        hostile_i = np.array([0.0, -0.0, 0.0, 1e-300, 1e308, -1e308, 0.25, 0.5])
        v0 = np.concatenate([v0, hostile_v])
        i0 = np.concatenate([i0, hostile_i])
        out = next_crossing_safe(v0, i0, params)
        assert not np.any(np.isnan(out))
        assert np.all(out[np.isfinite(out)] > 0.0)

    def test_double_root_touch_is_finite_or_inf(self):
        # state whose peak exactly touches v_th: quadratic double root
        # peak of V = a x^2 + b x at x = -b/2a equals vth when b^2 = -4 a c
        i0 = 2.0
        a = -2.0 * i0
        # choose v0 so that b^2 - 4 a c = 0 with c = -1
        b = math.sqrt(-4.0 * a * 1.0)
        v0 = b - 2.0 * i0
        out = next_crossing_safe(np.array([v0]), np.array([i0]), P2)
        assert not np.isnan(out[0])
