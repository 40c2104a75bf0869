"""Shared oracles and generators for the test suite.

The oracles are deliberately primitive: plain forward-Euler loops and
bracket-and-bisect root finding, independent of the closed-form solver path
they are used to check.
"""
import numpy as np
import pytest

from eventsnn.core import LifParams, Network, Spike, SpikeKind


def euler_first_crossing(v0, i0, params: LifParams, dt=1e-6, t_hi=20.0):
    """First upward threshold crossing of a single neuron, by Euler stepping."""
    v, i, t = float(v0), float(i0), 0.0
    inv_tm = 1.0 / params.tau_mem
    inv_ts = 1.0 / params.tau_syn
    vth = params.v_th
    while t < t_hi:
        v_new = v + dt * (-v * inv_tm + i)
        i_new = i * (1.0 - dt * inv_ts)
        t += dt
        if v < vth <= v_new:
            return t - dt + dt * (vth - v) / (v_new - v)
        v, i = v_new, i_new
    return None


def random_network(
    rng: np.random.Generator,
    n_max=8,
    n_in_max=4,
    w_scale=3.0,
    recurrent=True,
    params: LifParams | None = None,
) -> Network:
    n = int(rng.integers(1, n_max + 1))
    n_in = int(rng.integers(1, n_in_max + 1))
    w = rng.uniform(-w_scale, w_scale, size=(n, n))
    if not recurrent:
        w = np.triu(w, k=1)
    w *= rng.random(size=(n, n)) < 0.7
    w_in = rng.uniform(0.5, 2.0 * w_scale, size=(n_in, n))
    w_in *= rng.random(size=(n_in, n)) < 0.8
    return Network(
        n_total=n,
        weights=w,
        input_weights=w_in,
        params=params if params is not None else LifParams(),
        output_set=(n - 1,),
    )


def random_inputs(rng: np.random.Generator, net: Network, t_span=1.5, k_max=10):
    k = int(rng.integers(1, k_max + 1))
    times = np.sort(rng.uniform(0.0, t_span, size=k))
    neurons = rng.integers(0, net.n_in, size=k)
    return [
        Spike(int(nrn), float(t), SpikeKind.INPUT) for nrn, t in zip(neurons, times)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
