import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twcsim.kinetics import SpeciesFlows
from twcsim.thermal import (
    EngineInput, IntegrationError, TWCSystem, mix_intermonolith, power_ambient, power_axial, power_convection,
    power_radial, rk4_step, simulate_system, state_derivative, weight_exothermic,
)


@pytest.fixture(scope="module")
def twc1():
    from twcsim.core import reference_twc1
    return reference_twc1()


def test_axial_uniform_zero(twc1):
    assert np.all(power_axial([300, 300, 300, 20], twc1.geometry, twc1.thermal) == 0)


def test_axial_single_slice_zero(specs):
    assert np.all(power_axial([300.0, -10.0], specs[1].geometry, specs[1].thermal) == 0)


def test_axial_hand_computed(twc1):
    g, th = twc1.geometry, twc1.thermal
    P = power_axial([100.0, 200.0, 300.0, 0.0], g, th)
    area = (1 - g.ofa) * math.pi * g.radius_m**2
    L = g.slice_lengths_m
    q12 = 319.0 * 100.0 / ((L[0] + L[1]) / 2) * area
    q23 = 319.0 * 100.0 / ((L[1] + L[2]) / 2) * area
    assert P == pytest.approx([q12, q23 - q12, -q23], rel=1e-12)
    # insulated ends: interior fluxes telescope and nothing crosses the faces
    assert abs(P.sum()) <= 1e-12 * q12


def test_radial_terms(twc1):
    g, th = twc1.geometry, twc1.thermal
    assert np.all(power_radial([300, 300, 300, 0.0], g, th) == 0)
    neg = power_radial([300, 300, 300, -40.0], g, th)
    assert np.all(neg < 0) and np.ptp(neg) == 0
    big = replace(g, radius_m=2 * g.radius_m)
    assert power_radial([300, 300, 300, -40.0], big, th) == pytest.approx(neg, rel=1e-14)
    expect = th.k_rad_W_per_mK * -40.0 / (g.radius_m / 2) * math.pi * g.radius_m * g.length_total_m
    assert neg[0] == pytest.approx(expect, rel=1e-14)


def test_convection_equilibrium(twc1):
    ctr, per = power_convection([400, 400, 400, 0.0], 400.0, 0.02, twc1.thermal)
    assert np.all(ctr == 0) and np.all(per == 0)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 1000), min_size=3, max_size=3), st.floats(-300, 300), st.floats(-50, 1000),
       st.floats(0, 0.1))
def test_convection_telescoping(T, dT, T_exh, mdot):
    from twcsim.core import reference_twc1
    th = reference_twc1().thermal
    ctr, per = power_convection([*T, dT], T_exh, mdot, th)
    c = mdot * th.cp_exh_J_per_kgK
    assert ctr.sum() == pytest.approx(c * (T_exh - T[-1]), abs=1e-9 * max(1.0, c * 1000))
    assert np.all(ctr[1:] == per[1:])
    assert ctr[0] - per[0] == pytest.approx(c * dT, abs=1e-9 * max(1.0, c * 300))


def test_convection_negative_flow(twc1):
    with pytest.raises(ValueError):
        power_convection([1, 2, 3, 0], 10.0, -1.0, twc1.thermal)


@settings(max_examples=100)
@given(st.integers(1, 30), st.integers(1, 3), st.integers(0, 2**31))
def test_exothermic_split_conserves(M, N, seed):
    P = np.random.default_rng(seed).uniform(0, 100, (M, N))
    ctr, per = weight_exothermic(P)
    assert np.allclose(ctr + per, P.sum(axis=0), rtol=1e-12)
    if M == 1:
        assert np.all(per == 0)


def test_exothermic_edges():
    P = np.zeros((5, 2))
    P[0] = 3.0
    ctr, per = weight_exothermic(P)
    assert np.all(ctr == 3.0) and np.all(per == 0)
    P = np.zeros((5, 2))
    P[-1] = 3.0
    ctr, per = weight_exothermic(P)
    assert np.allclose(ctr, 0) and np.all(per == 3.0)


def test_ambient_published_values(twc1):
    g, th = twc1.geometry, twc1.thermal
    P = power_ambient([450.0, 450.0, 450.0, 50.0], g, th)  # periphery at 500 C
    q = 0.421 * 475.0 / 0.01
    assert q == pytest.approx(19997.5)
    assert P == pytest.approx([q * 2 * math.pi * g.radius_m * g.length_total_m] * 3, rel=1e-12)
    assert np.all(power_ambient([20.0, 20.0, 20.0, 5.0], g, th) == 0)
    assert power_ambient([925.0, 0, 0, 50.0], g, th)[0] == pytest.approx(2 * P[0], rel=1e-12)


def _idle(T_exh=25.0, mdot=0.0):
    return EngineInput(T_exh, mdot, SpeciesFlows())


def test_derivative_zero_at_rest(twc1):
    d = state_derivative([25.0, 25.0, 25.0, 0.0], _idle(), np.zeros((4, 3)), twc1.geometry, twc1.thermal)
    assert np.all(d == 0)


def test_derivative_symmetric_powers(twc1):
    th = replace(twc1.thermal, k_amb_W_per_mK=1e-300)
    P = np.zeros((3, 3))
    P[1] = 50.0  # middle channel splits evenly
    d = state_derivative([300.0, 300.0, 300.0, 0.0], _idle(300.0), P, twc1.geometry, th)
    assert abs(d[-1]) < 1e-12


def test_energy_bookkeeping(twc1):
    rng = np.random.default_rng(5)
    g, th = twc1.geometry, twc1.thermal
    W = np.asarray(g.slice_lengths_m) / g.length_total_m
    for _ in range(50):
        x = np.r_[rng.uniform(0, 900, 3), rng.uniform(-200, 100)]
        u = _idle(rng.uniform(0, 900), rng.uniform(0, 0.05))
        d, pw = state_derivative(x, u, rng.uniform(0, 500, (6, 3)), g, th, return_powers=True)
        lhs = g.mass_kg * th.cp_J_per_kgK * np.sum(W * d[:-1])
        assert lhs == pytest.approx(pw.P_ctr.sum(), rel=1e-10, abs=1e-9)


def test_derivative_linear_in_power(twc1):
    # the right-hand side is affine in state without kinetics: central differences are exact
    rng = np.random.default_rng(9)
    g, th = twc1.geometry, twc1.thermal
    u = _idle(500.0, 0.02)
    f = lambda x: state_derivative(x, u, np.zeros((4, 3)), g, th)  # noqa: E731
    for _ in range(100):
        x = np.r_[rng.uniform(0, 900, 3), rng.uniform(-200, 100)]
        h = 1e-3
        J = np.column_stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(4)])
        dx = rng.normal(size=4)
        assert f(x + dx) == pytest.approx(f(x) + J @ dx, rel=1e-8, abs=1e-9)


def test_rk4_zero_and_linear():
    x = np.array([1.0, -2.0])
    assert np.all(rk4_step(x, None, 0.1, lambda s, u: np.zeros(2)) == x)
    y = x
    for _ in range(100):
        y = rk4_step(y, None, 0.1, lambda s, u: np.array([3.0, -0.5]))
    assert y == pytest.approx(x + 10 * np.array([3.0, -0.5]), rel=1e-13)


def test_rk4_exponential_relaxation():
    tau, T_inf, T0, dt = 10.0, 500.0, 25.0, 0.1
    x = np.array([T0])
    err = 0.0
    for k in range(1, 1001):
        x = rk4_step(x, None, dt, lambda s, u: -(s - T_inf) / tau)
        err = max(err, abs(x[0] - (T_inf + (T0 - T_inf) * math.exp(-k * dt / tau))))
    assert err < 1e-6 * abs(T_inf - T0)


def test_rk4_reports_stage():
    with pytest.raises(IntegrationError) as exc:
        rk4_step(np.array([0.0]), None, 0.1, lambda s, u: np.array([np.nan]) if s[0] != 0 else np.ones(1))
    assert exc.value.stage == 2
    with pytest.raises(ValueError):
        rk4_step(np.array([0.0]), None, 0.0, lambda s, u: s)


def test_system_step_reports_stage(specs):
    sys_ = TWCSystem(*specs, n_channels=4)
    u = sys_.plant_input(_idle(400.0, 0.02))
    x1, x2 = sys_.initial_state()
    with pytest.raises(IntegrationError) as exc:
        sys_.step(np.r_[np.nan, x1[1:]], x2, u, 0.1)
    assert exc.value.stage == 1
    with pytest.raises(IntegrationError) as exc:
        sys_.step(x1, x2, u, 1e300)
    assert exc.value.stage > 1


def test_mixing():
    T, flows = mix_intermonolith([400.0, 500.0], np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]]), 3)
    assert T == pytest.approx(475.0)
    assert flows.sum(axis=0) == pytest.approx([6.0, 8, 10, 12], rel=1e-15)
    assert mix_intermonolith(np.full(9, 321.0), np.ones((9, 4)), 4)[0] == pytest.approx(321.0, rel=1e-15)


def test_engine_off_steady(specs):
    sys_ = TWCSystem(*specs, n_channels=10)
    x1, x2 = sys_.initial_state(25.0)
    tr = simulate_system(sys_, x1, x2, _idle(), 20.0)
    assert np.allclose(tr.x1, x1, atol=1e-12) and np.allclose(tr.final_x2, x2, atol=1e-12)


def test_hot_inlet_monotone_without_kinetics(specs, engine_map):
    th = [replace(s, thermal=replace(s.thermal, k_amb_W_per_mK=1e-9)) for s in specs]
    sys_ = TWCSystem(*th, n_channels=10, kinetics_enabled=False)
    u = engine_map[0].engine_input(0)
    x1, x2 = sys_.initial_state(25.0)
    tr = simulate_system(sys_, x1, x2, u, 3000.0, dt=1.0, record_channels=False)
    T = tr.x1[:, :3]
    assert np.all(np.diff(T, axis=0) >= -1e-9)
    assert np.all(T <= u.T_exh_C + 1e-9)
    assert T[-1].min() > u.T_exh_C - 1.0


def test_light_off_time_band(specs, engine_map):
    sys_ = TWCSystem(*specs, n_channels=20)
    i = engine_map.nearest_index(1000, 2, 24)
    x1, x2 = sys_.initial_state(25.0)
    tr = simulate_system(sys_, x1, x2, engine_map[i].engine_input(i), 150.0, record_channels=False)
    cross = tr.t[np.argmax(tr.x1[:, 0] > 300.0)]
    assert 20.0 <= cross <= 120.0


def test_ambient_only_relaxes_monotonically(specs):
    sys_ = TWCSystem(*specs, n_channels=4, kinetics_enabled=False)
    x1 = np.array([600.0, 600.0, 600.0, 0.0])
    x2 = np.array([350.0, 0.0])
    tr = simulate_system(sys_, x1, x2, _idle(), 3000.0, dt=2.0, record_channels=False)
    for x in (tr.x1, tr.x2):
        ctr = x[:, :-1]
        per = ctr + x[:, -1:]
        for T in (ctr, per):
            dist = T - 25.0
            assert np.all(dist >= -1e-9)
            assert np.all(np.diff(dist, axis=0) <= 1e-9)
            assert np.all(dist[-1] < 0.5 * dist[0])


def test_simulation_rejects_zero_duration(specs):
    sys_ = TWCSystem(*specs, n_channels=4)
    with pytest.raises(ValueError):
        simulate_system(sys_, *sys_.initial_state(), _idle(), 0.0)


def test_midbrick_recorded(specs, engine_map):
    sys_ = TWCSystem(*specs, n_channels=10)
    u = engine_map[3].engine_input(3)
    tr = simulate_system(sys_, *sys_.initial_state(300.0), u, 1.0)
    assert tr.midbrick.shape == (10, 4) and tr.tailpipe.shape == (10, 4)
    assert tr.channel_temps1.shape == (10, 10, 3)
    assert np.all(tr.eta >= 0)
