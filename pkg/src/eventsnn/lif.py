"""Closed-form LIF dynamics and exact next-threshold-crossing solvers.

Between events the membrane obeys

    dV/dt = -V/tau_mem + I,      dI/dt = -I/tau_syn,

which integrates to a two-exponential flow.  Crossings of v_th have closed
forms for two tau ratios: tau_mem = 2*tau_syn reduces to a quadratic in
x = exp(-dt / (2 tau_syn)), and tau_mem = tau_syn to the principal branch of
the Lambert W function.  Branch choices (larger quadratic root in (0, 1),
principal W branch) were fixed against a forward-Euler oracle; the test suite
re-verifies both.

All solvers here are NaN-safe in the vectorized form: every lane is computed
speculatively with guarded divisions/logs and invalid lanes are masked to the
+inf "no crossing" sentinel, so degenerate inputs can never leak a NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LifParams, NeuronState, UnsupportedTauRatio

# residual tolerance for |V(t*) - v_th| at solver-reported crossings
EPS_ROOT = 1e-9
# convergence target |w e^w - z| for the Lambert W evaluation
EPS_LAMBERT = 1e-12

_INV_E = -math.exp(-1.0)


class NegativeDt(ValueError):
    """propagate() requires a non-negative time step."""


@dataclass(frozen=True)
class CrossingResult:
    """Relative time of the next upward threshold crossing, None if never."""

    time: float | None

    @property
    def found(self) -> bool:
        return self.time is not None


def propagate_arrays(v, i, dt, params: LifParams):
    """Advance (v, i) arrays by dt along the free flow; dt may broadcast."""
    v = np.asarray(v, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    tm, ts = params.tau_mem, params.tau_syn
    es = np.exp(-dt / ts)
    if params.is_equal_tau:
        drive = np.where(np.isfinite(dt), i * dt, 0.0)
        v_new = (v + drive) * es
    else:
        em = np.exp(-dt / tm)
        v_new = v * em + i * (es - em) / (1.0 / tm - 1.0 / ts)
    return v_new, i * es


def propagate(state: NeuronState, params: LifParams, dt: float) -> NeuronState:
    """Closed-form state propagation over a spike-free interval of length dt."""
    if not dt >= 0.0:
        raise NegativeDt(f"dt must be >= 0, got {dt}")
    v, i = propagate_arrays(state.v, state.i, dt, params)
    return NeuronState(v, i, state.t + dt)


def _safe_div(num, den):
    ok = den != 0.0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def _crossing_dt_double_tau(v0, i0, params: LifParams):
    """Vectorized crossing solver for tau_mem = 2 tau_syn.

    With x = exp(-dt/(2 ts)) the condition V(dt) = v_th becomes
    a x^2 + b x + c = 0, a = -2 ts i0, b = v0 + 2 ts i0, c = -v_th.
    The upward crossing is the larger root in (0, 1); dV/dt at a root is
    i0 x^2 - v_th/tau_mem, which filters downward crossings.
    """
    ts, tm, vth = params.tau_syn, params.tau_mem, params.v_th
    a = -2.0 * ts * i0
    b = v0 + 2.0 * ts * i0
    c = -vth
    disc = b * b - 4.0 * a * c
    real = disc >= 0.0
    sq = np.sqrt(np.where(real, disc, 0.0))
    # numerically stable pair of roots: q/a and c/q
    q = -0.5 * (b + np.where(b >= 0.0, sq, -sq))
    x1, ok1 = _safe_div(q, a)
    x2, ok2 = _safe_div(c, q)

    def pick(x, ok):
        valid = real & ok & (x > 0.0) & (x < 1.0)
        upward = (i0 * x * x - vth / tm) > 0.0
        return np.where(valid & upward, x, 0.0)

    # larger surviving x == earlier crossing time
    x_star = np.maximum(pick(x1, ok1), pick(x2, ok2))
    hit = x_star > 0.0
    dt = -2.0 * ts * np.log(np.where(hit, x_star, 0.5))
    return np.where(hit, dt, np.inf)


def _lambertw0(z):
    """Principal-branch Lambert W on z >= -1/e by Halley iteration."""
    z = np.asarray(z, dtype=np.float64)
    rho = np.sqrt(np.maximum(2.0 * (np.e * z + 1.0), 0.0))
    near = -1.0 + rho - rho * rho / 3.0 + (11.0 / 72.0) * rho**3
    w = np.where(z < -0.25, near, z * (1.0 - z))
    for _ in range(12):
        ew = np.exp(w)
        f = w * ew - z
        wp1 = w + 1.0
        den = ew * wp1 - (w + 2.0) * f / np.where(wp1 != 0.0, 2.0 * wp1, 1.0)
        step, ok = _safe_div(f, den)
        w = w - np.where(ok, step, 0.0)
    return w


def _crossing_dt_equal_tau(v0, i0, params: LifParams):
    """Vectorized crossing solver for tau_mem = tau_syn = tau.

    V(dt) = (v0 + i0 dt) e^{-dt/tau} = v_th is solved by the principal
    Lambert W branch; the argument is formed in log space so weak-current
    lanes underflow to "no crossing" instead of overflowing.
    """
    tau, vth, tm = params.tau_syn, params.v_th, params.tau_mem
    pos = (i0 > 0.0) & (vth > 0.0)
    i_safe = np.where(pos, i0, 1.0)
    log_mag = np.log(vth / (i_safe * tau)) - v0 / (i_safe * tau)
    # W argument -e^{log_mag} must lie in [-1/e, 0) => log_mag <= -1
    feasible = pos & (log_mag <= -1.0)
    z = -np.exp(np.where(feasible, log_mag, np.log(0.1)))
    z = np.maximum(z, _INV_E)
    w = _lambertw0(z)
    dt = -tau * w - v0 / i_safe
    dt_pos = np.where(feasible & (dt > 0.0), dt, np.inf)
    upward = i0 * np.exp(-np.where(np.isfinite(dt_pos), dt_pos, 0.0) / tau) - vth / tm > 0.0
    return np.where(np.isfinite(dt_pos) & upward, dt_pos, np.inf)


def next_crossing_safe(v0, i0, params: LifParams) -> np.ndarray:
    """Elementwise next-crossing times; +inf marks "no crossing", never NaN."""
    v0 = np.asarray(v0, dtype=np.float64)
    i0 = np.asarray(i0, dtype=np.float64)
    with np.errstate(all="ignore"):
        if params.is_double_tau:
            return _crossing_dt_double_tau(v0, i0, params)
        if params.is_equal_tau:
            return _crossing_dt_equal_tau(v0, i0, params)
    raise UnsupportedTauRatio(
        f"no analytic crossing solver for tau_mem/tau_syn = {params.tau_mem / params.tau_syn:g}"
    )


def _scalar_crossing(v0: float, i0: float, params: LifParams) -> CrossingResult:
    dt = next_crossing_safe(np.array([v0]), np.array([i0]), params)[0]
    return CrossingResult(None if math.isinf(dt) else float(dt))


def next_crossing_double_tau(v0: float, i0: float, params: LifParams) -> CrossingResult:
    if not params.is_double_tau:
        raise UnsupportedTauRatio("next_crossing_double_tau requires tau_mem = 2 tau_syn")
    return _scalar_crossing(v0, i0, params)


def next_crossing_equal_tau(v0: float, i0: float, params: LifParams) -> CrossingResult:
    if not params.is_equal_tau:
        raise UnsupportedTauRatio("next_crossing_equal_tau requires tau_mem = tau_syn")
    return _scalar_crossing(v0, i0, params)


def voltage_at(v0, i0, dt, params: LifParams):
    """V(dt) along the free flow; convenience for oracles and residual checks."""
    v, _ = propagate_arrays(v0, i0, dt, params)
    return v


def bisect_crossing(
    v0: float,
    i0: float,
    params: LifParams,
    t_hi: float = 40.0,
    scan_dt: float = 1e-3,
    tol: float = 1e-12,
) -> float | None:
    """Generic bracket-and-bisect crossing finder (test utility, any tau ratio).

    Scans for the first sign change of V - v_th on a uniform grid, then
    bisects.  Excluded from the differentiable path by design.
    """
    grid = np.arange(0.0, t_hi + scan_dt, scan_dt)
    vals = voltage_at(v0, i0, grid, params) - params.v_th
    below = vals[:-1] < 0.0
    above = vals[1:] >= 0.0
    hits = np.nonzero(below & above)[0]
    if len(hits) == 0:
        return None
    lo, hi = grid[hits[0]], grid[hits[0] + 1]
    f = lambda t: float(voltage_at(v0, i0, t, params) - params.v_th)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
