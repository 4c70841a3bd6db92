import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metassm import systems
from metassm.systems import (BOUCWEN_RANGES, BOUCWEN_TARGET, VEHICLE_RANGES, BoucWenParams, SimulationError,
                             Trajectory, VehicleParams)


# ---- Bouc-Wen


def test_boucwen_zero_input_stays_at_equilibrium():
    tr = systems.simulate_boucwen(BOUCWEN_TARGET, np.zeros(200), 200)
    assert np.all(tr.y == 0.0)
    assert np.all(tr.x == 0.0)


def test_boucwen_target_parameters_within_ranges():
    systems.check_boucwen_range(BOUCWEN_TARGET)
    assert (BOUCWEN_TARGET.m_L, BOUCWEN_TARGET.c_L, BOUCWEN_TARGET.k_L, BOUCWEN_TARGET.alpha,
            BOUCWEN_TARGET.beta, BOUCWEN_TARGET.gamma, BOUCWEN_TARGET.delta) == (2, 10, 5e4, 5e4, 1000, 0.8, -1.1)
    assert BOUCWEN_TARGET.nu == 1.0
    systems.simulate_boucwen(BOUCWEN_TARGET, systems.sine_excitation(), 50, check_range=True)


def test_boucwen_out_of_range_rejected():
    bad = BoucWenParams(10.0, 10.0, 5e4, 5e4, 1000.0, 0.8, -1.1)
    with pytest.raises(ValueError, match="m_L"):
        systems.simulate_boucwen(bad, systems.sine_excitation(), 10, check_range=True)


def test_boucwen_step_halving_converges():
    exc = systems.sine_excitation()
    coarse = systems.simulate_boucwen(BOUCWEN_TARGET, exc, 400, substeps=8).x
    fine = systems.simulate_boucwen(BOUCWEN_TARGET, exc, 400, substeps=16).x
    scale = np.abs(fine).max(axis=0)
    assert np.max(np.abs(coarse - fine) / scale) < 1e-6


def test_boucwen_hysteresis_loop_has_area():
    tr = systems.simulate_boucwen(BOUCWEN_TARGET, systems.sine_excitation(), 1500)
    # one full period of the 1 Hz input after the transient
    period = slice(750, 1500)
    assert systems.hysteresis_loop_area(tr.u[period, 0], tr.y[period, 0]) > 0.0


def test_boucwen_noise_statistics_and_determinism():
    a = systems.simulate_boucwen(BOUCWEN_TARGET, np.zeros(3000), 3000, noise_seed=4)
    b = systems.simulate_boucwen(BOUCWEN_TARGET, np.zeros(3000), 3000, noise_seed=4)
    assert np.array_equal(a.y, b.y)
    assert np.std(a.y) == pytest.approx(8e-6, rel=0.05)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_boucwen_blowup_reports_step():
    wild = BoucWenParams(1e-6, 0.0, 1.0, 5e4, 1000.0, 0.8, -1.1)
    with pytest.raises(SimulationError, match="step"):
        systems.simulate_boucwen(wild, np.full(500, 1e6), 500)


def test_boucwen_short_excitation_array():
    with pytest.raises(ValueError):
        systems.simulate_boucwen(BOUCWEN_TARGET, np.zeros(5), 10)


# ---- parameter families


def test_sample_family_within_table_bounds():
    draws = systems.sample_family(BOUCWEN_RANGES, 40, 0)
    assert len(draws) == 40
    for d in draws:
        systems.check_boucwen_range(BoucWenParams(**d))


def test_sample_family_reproducible():
    assert systems.sample_family(VEHICLE_RANGES, 5, 3) == systems.sample_family(VEHICLE_RANGES, 5, 3)
    assert systems.sample_family(VEHICLE_RANGES, 5, 3) != systems.sample_family(VEHICLE_RANGES, 5, 4)


def test_sample_family_marginal_means():
    N = 10_000
    draws = systems.sample_family(BOUCWEN_RANGES, N, 11)
    for name, (lo, hi) in BOUCWEN_RANGES.items():
        v = np.array([d[name] for d in draws])
        se = (hi - lo) / math.sqrt(12 * N)
        assert abs(v.mean() - 0.5 * (lo + hi)) < 3 * se, name


@pytest.mark.parametrize("ranges, N", [({"a": (1.0, 0.0)}, 3), ({}, 3), ({"a": (0.0, 1.0)}, 0)])
def test_sample_family_errors(ranges, N):
    with pytest.raises(ValueError):
        systems.sample_family(ranges, N, 0)


def test_sample_horizons():
    assert np.all(systems.sample_horizons(4, 0) == 20.0)
    h = systems.sample_horizons(500, 0, "uniform", low=10.0, high=40.0)
    assert h.min() >= 10.0 and h.max() <= 40.0
    with pytest.raises(ValueError):
        systems.sample_horizons(4, 0, "gamma")


# ---- van der Pol


def test_vdp_origin_is_equilibrium():
    tr = systems.simulate_vdp(1.3, (0.0, 0.0), 500)
    assert np.all(tr.y == 0.0)


def test_vdp_limit_cycle_amplitude():
    tr = systems.simulate_vdp(1.0, (0.5, 0.0), 6000)
    amp = np.abs(tr.y[3000:, 0]).max()
    assert abs(amp - 2.0) < 0.05


def test_vdp_target_and_euler_step():
    tr = systems.simulate_vdp(systems.VDP_TARGET_THETA, systems.VDP_TARGET_X0, 3)
    assert systems.VDP_TARGET_THETA == 1.572
    x1, x2 = systems.VDP_TARGET_X0
    assert tr.y[1, 0] == pytest.approx(x1 + 0.01 * x2)
    assert tr.y[1, 1] == pytest.approx(x2 + 0.01 * (1.572 * x2 * (1 - x1 ** 2) - x1))
    assert np.array_equal(tr.x, tr.y)


def test_vdp_family_shapes():
    fam = systems.vdp_family(5, 2)
    assert [len(t) for t in fam] == [2000] * 5
    thetas = [t.params["theta"] for t in fam]
    assert all(0.5 <= th <= 2.0 for th in thetas)
    assert all(np.all(np.abs(t.x[0]) <= 1.0) for t in fam)


def test_vdp_blowup():
    with pytest.raises(SimulationError):
        systems.simulate_vdp(1.0, (50.0, 50.0), 2000, dt=0.5)


# ---- dipole field


@pytest.mark.parametrize("p", [(0.0, 0.0), (0.3, -0.2), (1.0, 1.0)])
def test_dipole_interior_is_minus_m_over_3(p):
    assert np.allclose(systems.dipole_field(p, (1.0, 1.0), 2.0), [-1 / 3, -1 / 3], atol=0, rtol=0)


def test_dipole_interior_constant_at_random_points(rng):
    r0 = 2.5
    ang = rng.uniform(0, 2 * np.pi, 100)
    rad = r0 * np.sqrt(rng.uniform(0, 0.999, 100))
    P = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    F = systems.dipole_field(P, (0.7, -1.2), r0)
    assert np.all(F == F[0])
    assert np.array_equal(F[0], -np.array([0.7, -1.2]) / 3.0)


@pytest.mark.parametrize("r, m, r0", [(2.0, 1.0, 2.0), (3.5, -0.6, 1.5), (10.0, 1.5, 4.5)])
def test_dipole_on_axis_value(r, m, r0):
    m0 = 4.0 / 3.0 * math.pi * r0 ** 3
    want = m0 / (4 * math.pi) * np.array([4 * m / r ** 3, 0.0])
    got = systems.dipole_field((r, 0.0), (m, 0.0), r0, convention="as_printed")
    assert np.allclose(got, want, rtol=1e-14, atol=0)


def test_dipole_exterior_curl_free(rng):
    r0, M, h = 1.5, np.array([0.8, -1.1]), 1e-5
    ang = rng.uniform(0, 2 * np.pi, 50)
    rad = rng.uniform(r0 + 0.2, 6.0, 50)
    for a, rr in zip(ang, rad):
        p = np.array([rr * np.cos(a), rr * np.sin(a)])
        dFy_dx = (systems.dipole_field(p + [h, 0], M, r0)[1] - systems.dipole_field(p - [h, 0], M, r0)[1]) / (2 * h)
        dFx_dy = (systems.dipole_field(p + [0, h], M, r0)[0] - systems.dipole_field(p - [0, h], M, r0)[0]) / (2 * h)
        assert abs(dFy_dx - dFx_dy) < 1e-8


def test_dipole_printed_convention_is_not_curl_free():
    M, h, p = np.array([1.0, 0.5]), 1e-5, np.array([2.0, 1.5])
    f = lambda q: systems.dipole_field(q, M, 1.0, convention="as_printed")
    curl = (f(p + [h, 0])[1] - f(p - [h, 0])[1]) / (2 * h) - (f(p + [0, h])[0] - f(p - [0, h])[0]) / (2 * h)
    assert abs(curl) > 1e-3


def test_dipole_unknown_convention():
    with pytest.raises(ValueError):
        systems.dipole_field((5.0, 0.0), (1.0, 0.0), 1.0, convention="cgs")


# ---- vehicle


VP = VehicleParams(0.1, 0.12, 15.0, 0.5, -0.3, 2.0)


def test_vehicle_straight_line():
    path = np.column_stack([np.linspace(0, 100, 200), np.zeros(200)])
    tr = systems.simulate_vehicle(VP, path, T=100, speed_ripple=0.0, measurement_noise=None, x0=(0.0, 0.0, 0.0))
    assert np.all(tr.u[:, 0] == 0.0)
    assert np.all(tr.x[:, 1] == 0.0)
    assert np.allclose(np.diff(tr.x[:, 0]), 0.1)


def test_kinematic_zero_steer_has_no_slip():
    assert np.allclose(systems.kinematic_rhs(np.array([0.0, 0.0, 0.3]), 0.0, 2.0, 0.1, 0.1),
                       [2 * math.cos(0.3), 2 * math.sin(0.3), 0.0])


def test_vehicle_body_speed_matches_wheel_speeds():
    tr = systems.simulate_vehicle(VP, T=400, measurement_noise=None)
    step = np.diff(tr.x[:, :2], axis=0)
    psi = tr.x[:-1, 2]
    along = step[:, 0] * np.cos(psi) + step[:, 1] * np.sin(psi)
    v_x = (tr.u[:-1, 1] + tr.u[:-1, 2]) * VP.R_w / 2.0
    assert np.max(np.abs(along / tr.dt - v_x)) < 1e-12


def test_vehicle_run_length_and_context():
    tr = systems.simulate_vehicle(VP, T=400, seed=1)
    assert len(tr) == 400 and tr.dt == 0.1
    assert tr.t[-1] + tr.dt == pytest.approx(40.0)
    assert int(0.2 * len(tr)) * tr.dt == pytest.approx(8.0)
    assert np.max(np.abs(tr.u[:, 0])) <= math.radians(VP.delta_max) + 1e-15


def test_vehicle_measurement_is_field_plus_noise():
    a = systems.simulate_vehicle(VP, T=100, seed=3, measurement_noise=None)
    b = systems.simulate_vehicle(VP, T=100, seed=3)
    assert np.array_equal(a.y, systems.dipole_field(a.x[:, :2], (VP.m_X, VP.m_Y), VP.r0))
    assert 0 < np.std(b.y - a.y) < 0.02


def test_vehicle_empty_waypoints():
    with pytest.raises(ValueError, match="empty"):
        systems.simulate_vehicle(VP, np.zeros((0, 2)), T=10)


def test_vehicle_family_deterministic():
    a = systems.vehicle_family(3, 5, T=50)
    b = systems.vehicle_family(3, 5, T=50)
    assert all(np.array_equal(x.y, y.y) for x, y in zip(a, b))


# ---- cone system and trajectory IO


@given(st.integers(0, 10_000))
def test_cone_system_stays_in_cone(seed):
    sys_ = systems.ConeLinearSystem.random(seed)
    tr = sys_.simulate(60, seed)
    assert np.all(tr.x @ sys_.G.T <= 1e-9)


def test_trajectory_roundtrip(tmp_path):
    tr = systems.simulate_vehicle(VP, T=20, seed=2, name="veh")
    tr.save(tmp_path / "veh")
    back = Trajectory.load(tmp_path / "veh")
    assert back.name == "veh" and back.dt == tr.dt
    for k in ("t", "x", "u", "y"):
        assert np.array_equal(getattr(back, k), getattr(tr, k))
    assert back.params == tr.params


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(0.0, np.arange(3), np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        Trajectory(1.0, np.arange(3), np.zeros((2, 1)), np.zeros((3, 1)))
