"""Synthetic engine maps and model-generated cold-start measurements."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .calibration import ColdStartRun, apply_instrument
from .core import GasConstants, MonolithSpec
from .engine import AFR_STOICH, EngineMap, OperatingPoint, brake_power_kW, fuel_rate_g_per_s
from .radialprofile import fit_profile_time, get_library
from .thermal import TWCSystem, simulate_system

# (speed rpm, BMEP bar) -> tested spark angles (CA before TDC)
TEST_POINTS = {
    (1000, 2): (12, 14, 16, 18, 20, 22, 24),
    (1000, 5): (6, 8, 10, 12, 14, 16, 18),
    (1000, 8): (-2, 2, 4),
    (1500, 2): (12, 14, 16, 18, 20, 21, 22, 24),
    (1500, 5): (6, 8, 10, 12, 14, 16, 18),
    (1500, 8): (-2, 2, 4, 6, 8, 10),
    (2000, 2): (16, 18, 20, 22, 24, 26, 28),
    (2000, 5): (8, 10, 12, 14, 16, 18, 20),
    (2000, 8): (2, 4, 6, 8, 10, 12),
    (2000, 10): (-4, 4),
    (2000, 12): (-2, 2, 4),
    (2000, 14): (-2, 2),
    (2500, 2): (14, 16, 18, 20, 22, 24, 26),
    (2500, 5): (12, 14, 16, 18, 20, 22, 24),
    (2500, 8): (8, 10, 12, 14, 16),
    (2500, 13): (4, 6),
    (3000, 8): (8, 10, 12, 14, 16, 18),
}

# cold-start load points 1..10: (speed, BMEP, SA)
COLD_START_POINTS = (
    (1000, 2, 24), (1000, 5, 18), (1500, 5, 18), (1500, 2, 24), (2000, 2, 28),
    (2000, 5, 20), (3000, 8, 18), (1000, 8, 4), (1500, 8, 10), (2000, 8, 12),
)


def _profile_temps(T_centre: float, delta: float, t_index: int) -> tuple:
    lib = get_library()
    g = lib.shape_factors(t_index, [0.0, 1 / 3, 2 / 3, 1.0])
    return tuple(float(T_centre + delta * v) for v in g)


def synthetic_point(speed: float, bmep: float, sa: float, sa_max: float,
                    rng: np.random.Generator | None = None, noise: float = 0.0) -> OperatingPoint:
    """One operating point from smooth engine trends.

    Retarding the spark from the group's most advanced angle raises BSFC and
    exhaust temperature and lowers NOx.
    """
    jitter = (lambda: 1.0 + noise * rng.standard_normal()) if rng is not None and noise else (lambda: 1.0)
    retard = max(sa_max - sa, 0.0)
    bsfc = (225.0 + 320.0 / bmep**1.1 + (speed - 1000.0) / 1000.0) * (1 + 0.0006 * retard**2)
    bsfc *= jitter()
    power = float(brake_power_kW(speed, bmep))
    mdot = float(fuel_rate_g_per_s(bsfc, power)) * (1 + AFR_STOICH) * 1e-3
    T_exh = min(330.0 + 0.12 * speed + 15.0 * bmep + 8.0 * retard, 950.0) * jitter()
    co = (4500.0 + 1200.0 * speed / 1000.0 + 60.0 * sa) * jitter()
    nox = 2600.0 * (bmep / 8.0) ** 0.6 * np.exp(-0.06 * retard) * jitter()
    thc = 700.0 * (2.0 / bmep) ** 0.3 * (1000.0 / speed) ** 0.4 * jitter()
    y_co2 = 0.125 + 0.005 * bmep / 14.0
    t_index = int(40 + 20 * (speed - 1000.0) / 2000.0)
    delta = -(25.0 + 30.0 / (1.0 + mdot * 1e3 / 10.0))
    tt = _profile_temps(T_exh - 10.0, delta, t_index)
    return OperatingPoint(
        speed_rpm=float(speed), bmep_bar=float(bmep), spark_angle_CAbTDC=float(sa),
        mdot_exh_kg_per_s=mdot, bsfc_g_per_kWh=float(bsfc), T_exh_C=float(T_exh),
        engine_out_ppm=(float(co), float(nox), float(thc)), y_CO2=y_co2, radial_temps_C=tt,
        fitted_profile_time=fit_profile_time(get_library(), tt),
    )


def synthetic_map(seed: int = 0, noise: float = 0.0, points: dict | None = None) -> EngineMap:
    """Engine map over the tested speed/load/spark grid."""
    rng = np.random.default_rng(seed)
    pts = []
    for (speed, bmep), sas in (points or TEST_POINTS).items():
        for sa in sas:
            pts.append(synthetic_point(speed, bmep, sa, max(sas), rng, noise))
    return EngineMap(pts)


def cold_start_indices(engine_map: EngineMap) -> list[int]:
    """Map indices of the ten cold-start load points."""
    keys = {p.key: i for i, p in enumerate(engine_map.points)}
    return [keys[(float(s), float(b), float(a))] for s, b, a in COLD_START_POINTS]


def generate_runs(specs: Sequence[MonolithSpec], engine_map: EngineMap, op_indices: Sequence[int],
                  duration: float = 200.0, dt: float = 0.1, noise: float = 0.01, seed: int = 0,
                  delay: float = 0.0, tau: float = 0.0, n_channels: int = 20,
                  T_start: float | None = None, consts: GasConstants | None = None,
                  load_points: Sequence[int] | None = None) -> list[ColdStartRun]:
    """Simulate cold starts with the given model and add measurement noise.

    Noise is multiplicative Gaussian with relative standard deviation
    ``noise``. Gas analyser lag ``tau`` and transport delay ``delay`` are
    applied to the mid-brick and tailpipe flows.
    """
    rng = np.random.default_rng(seed)
    system = TWCSystem(specs[0], specs[1], n_channels=n_channels, consts=consts)
    runs = []
    for j, op in enumerate(op_indices):
        point = engine_map[op]
        u = point.engine_input(op, consts)
        x1, x2 = system.initial_state(T_start)
        tr = simulate_system(system, x1, x2, u, duration, dt, record_channels=False)
        K = len(tr.t)
        mult = lambda shape: 1.0 + noise * rng.standard_normal(shape)  # noqa: E731
        mid = apply_instrument(tr.midbrick[:, :3], dt, delay, tau)
        tp = apply_instrument(tr.tailpipe[:, :3], dt, delay, tau)
        runs.append(ColdStartRun(
            op_index=int(op), t=tr.t.copy(),
            twc1_state=tr.x1 * mult(tr.x1.shape), twc2_state=tr.x2 * mult(tr.x2.shape),
            engine_out=tr.engine_out * mult(tr.engine_out.shape),
            midbrick=mid * mult(mid.shape), tailpipe=tp * mult(tp.shape),
            T_exh=np.full(K, point.T_exh_C), mdot=np.full(K, point.mdot_exh_kg_per_s),
            load_point=int(load_points[j]) if load_points is not None else j + 1,
            profile_index=point.fitted_profile_time,
        ))
    return runs
