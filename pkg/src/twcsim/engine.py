"""Static engine map, setpoint interpolation and simple supervisory schedules."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import GasConstants
from .kinetics import SpeciesFlows, engine_out_flows
from .radialprofile import FLAT_PROFILE, DiscSolutionLibrary, fit_profile_time
from .thermal import EngineInput

DISPLACEMENT_L = 1.969
AFR_STOICH = 14.01

MAP_COLUMNS = (
    "speed_rpm", "bmep_bar", "sa_cabtdc", "mdot_exh_g_per_s", "bsfc_g_per_kwh", "co_ppm",
    "nox_ppm", "thc_ppm", "y_co2", "t_exh_c", "tt0_c", "tt_r3_c", "tt_2r3_c", "tt_r_c",
)


class MapError(ValueError):
    """Malformed engine map."""


def brake_power_kW(speed_rpm, bmep_bar, displacement_L: float = DISPLACEMENT_L):
    """Four-stroke brake power ``BMEP * V_d * n / 2`` in kW."""
    return np.asarray(bmep_bar) * 1e5 * displacement_L * 1e-3 * np.asarray(speed_rpm) / 60.0 / 2.0 / 1e3


def fuel_rate_g_per_s(bsfc_g_per_kWh, power_kW):
    return np.asarray(bsfc_g_per_kWh) * np.asarray(power_kW) / 3600.0


@dataclass(frozen=True)
class OperatingPoint:
    speed_rpm: float
    bmep_bar: float
    spark_angle_CAbTDC: float
    mdot_exh_kg_per_s: float
    bsfc_g_per_kWh: float
    T_exh_C: float
    engine_out_ppm: tuple
    y_CO2: float
    fitted_profile_time: int = FLAT_PROFILE
    radial_temps_C: tuple | None = None

    @property
    def power_kW(self) -> float:
        return float(brake_power_kW(self.speed_rpm, self.bmep_bar))

    @property
    def fuel_g_per_s(self) -> float:
        return float(fuel_rate_g_per_s(self.bsfc_g_per_kWh, self.power_kW))

    @property
    def key(self) -> tuple:
        return (self.speed_rpm, self.bmep_bar, self.spark_angle_CAbTDC)

    def violations(self) -> list[str]:
        out = []
        if not self.mdot_exh_kg_per_s > 0:
            out.append("exhaust massflow must be positive")
        if not self.bsfc_g_per_kWh > 0:
            out.append("BSFC must be positive")
        if min(self.engine_out_ppm) < 0:
            out.append("ppm values must be nonnegative")
        if not self.y_CO2 > 0:
            out.append("y_co2 must be positive")
        return out

    def engine_out(self, consts: GasConstants | None = None) -> np.ndarray:
        co, nox, thc = self.engine_out_ppm
        return engine_out_flows(co, nox, thc, self.y_CO2, self.mdot_exh_kg_per_s, consts)

    def engine_input(self, index: int = -1, consts: GasConstants | None = None) -> EngineInput:
        return EngineInput(
            self.T_exh_C, self.mdot_exh_kg_per_s, SpeciesFlows.from_array(self.engine_out(consts)),
            index, self.fitted_profile_time,
        )


class EngineMap:
    """Immutable collection of operating points with unique keys."""

    def __init__(self, points: Sequence[OperatingPoint]):
        points = tuple(points)
        if not points:
            raise MapError("engine map has no operating points")
        seen = {}
        for i, p in enumerate(points):
            errs = p.violations()
            if errs:
                raise MapError(f"operating point {i}: {'; '.join(errs)}")
            if p.key in seen:
                raise MapError(f"operating points {seen[p.key]} and {i} share key {p.key}")
            seen[p.key] = i
        self.points = points
        self._coords = np.array([_norm(*p.key) for p in points])
        self._tree = cKDTree(self._coords)
        self._fields = np.array(
            [[p.mdot_exh_kg_per_s, p.bsfc_g_per_kWh, p.T_exh_C, *p.engine_out_ppm, p.y_CO2]
             for p in points]
        )

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i) -> OperatingPoint:
        return self.points[i]

    @property
    def min_bsfc_index(self) -> int:
        """Lowest-BSFC point; ties resolved by the smallest (speed, bmep, sa) key."""
        bsfc = self._fields[:, 1]
        cand = np.flatnonzero(bsfc == bsfc.min())
        return int(min(cand, key=lambda i: self.points[i].key))

    @property
    def bsfc(self) -> np.ndarray:
        return self._fields[:, 1].copy()

    def engine_out_array(self, consts: GasConstants | None = None) -> np.ndarray:
        return np.stack([p.engine_out(consts) for p in self.points])

    def subset(self, indices) -> "EngineMap":
        return EngineMap([self.points[i] for i in indices])

    def nearest_index(self, speed, bmep, sa) -> int:
        return int(self._tree.query(_norm(speed, bmep, sa))[1])

    def with_profiles(self, library: DiscSolutionLibrary) -> "EngineMap":
        pts = []
        for p in self.points:
            t = p.fitted_profile_time
            if p.radial_temps_C is not None:
                t = fit_profile_time(library, p.radial_temps_C)
            pts.append(replace(p, fitted_profile_time=t))
        return EngineMap(pts)


def _norm(speed, bmep, sa):
    return np.array([speed / 1000.0, bmep / 10.0, sa / 10.0])


def interpolate_setpoint(engine_map: EngineMap, speed: float, bmep: float, sa: float,
                         k: int = 4) -> OperatingPoint:
    """Inverse-distance-weighted map lookup over the ``k`` nearest points.

    The profile time is taken from the nearest tabulated point.
    """
    q = _norm(speed, bmep, sa)
    k = min(k, len(engine_map))
    dist, idx = engine_map._tree.query(q, k=k)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    nearest = engine_map.points[int(idx[0])]
    if dist[0] == 0.0:
        vals = engine_map._fields[idx[0]]
    else:
        w = 1.0 / dist**2
        vals = w @ engine_map._fields[idx] / w.sum()
    return OperatingPoint(
        speed_rpm=float(speed), bmep_bar=float(bmep), spark_angle_CAbTDC=float(sa),
        mdot_exh_kg_per_s=float(vals[0]), bsfc_g_per_kWh=float(vals[1]), T_exh_C=float(vals[2]),
        engine_out_ppm=tuple(float(v) for v in vals[3:6]), y_CO2=float(vals[6]),
        fitted_profile_time=nearest.fitted_profile_time,
    )


def rolling_average(values, dt: float, window: float = 5.0) -> np.ndarray:
    """Causal boxcar mean over the trailing ``window`` seconds.

    The window is inclusive at both ends, so a full window holds
    ``round(window / dt) + 1`` samples. Early samples average what exists.
    """
    v = np.asarray(values, dtype=float)
    n = int(round(window / dt)) + 1
    c = np.cumsum(np.concatenate([np.zeros((1,) + v.shape[1:]), v]), axis=0)
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - n, 0)
    count = (idx - lo).reshape((-1,) + (1,) * (v.ndim - 1))
    return (c[idx] - c[lo]) / count


class RollingFilter:
    """Streaming form of :func:`rolling_average`."""

    def __init__(self, dt: float, window: float = 5.0):
        self.n = int(round(window / dt)) + 1
        self.buf: list = []

    def __call__(self, value):
        self.buf.append(np.asarray(value, dtype=float))
        if len(self.buf) > self.n:
            self.buf.pop(0)
        return np.mean(self.buf, axis=0)


class SuboptimalController:
    """Hold a heating point until ``t_prime``, then run at minimum BSFC."""

    def __init__(self, engine_map: EngineMap, heat_op_index: int, t_prime: float):
        if t_prime < 0:
            raise ValueError("switch time must be nonnegative")
        self.engine_map = engine_map
        self.heat_op_index = heat_op_index
        self.t_prime = t_prime

    def op_index(self, t: float) -> int:
        return self.heat_op_index if t < self.t_prime else self.engine_map.min_bsfc_index

    def schedule(self, duration: float, dt: float) -> np.ndarray:
        t = np.arange(int(round(duration / dt))) * dt
        return np.where(t < self.t_prime, self.heat_op_index, self.engine_map.min_bsfc_index)

    def __call__(self, k, t, x1=None, x2=None) -> EngineInput:
        i = self.op_index(t)
        return self.engine_map[i].engine_input(i)


def suboptimal_controller(engine_map: EngineMap, heat_op_index: int, t_prime: float = math.inf):
    return SuboptimalController(engine_map, heat_op_index, t_prime)


# -- CSV -------------------------------------------------------------------


def _parse_rows(text: str, source: str):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise MapError(f"{source}: empty engine map")
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    missing = [c for c in MAP_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise MapError(f"{source}: missing columns {missing}")
    rows = list(reader)
    if not rows:
        raise MapError(f"{source}: engine map has a header but no rows")
    return rows


def load_map(path, library: DiscSolutionLibrary | None = None) -> EngineMap:
    """Read an engine map CSV and fit radial profile times when a library is given."""
    source = str(path)
    text = Path(path).read_text()
    pts = []
    for r, row in enumerate(_parse_rows(text, source), start=1):
        vals = {}
        for c in MAP_COLUMNS:
            try:
                vals[c] = float(row[c])
            except (TypeError, ValueError):
                raise MapError(f"{source}: row {r}, column {c}: not a number ({row[c]!r})") from None
            if not math.isfinite(vals[c]):
                raise MapError(f"{source}: row {r}, column {c}: not finite")
        if vals["mdot_exh_g_per_s"] <= 0:
            raise MapError(f"{source}: row {r}, column mdot_exh_g_per_s: must be positive")
        tt = (vals["tt0_c"], vals["tt_r3_c"], vals["tt_2r3_c"], vals["tt_r_c"])
        p = OperatingPoint(
            speed_rpm=vals["speed_rpm"], bmep_bar=vals["bmep_bar"], spark_angle_CAbTDC=vals["sa_cabtdc"],
            mdot_exh_kg_per_s=vals["mdot_exh_g_per_s"] * 1e-3, bsfc_g_per_kWh=vals["bsfc_g_per_kwh"],
            T_exh_C=vals["t_exh_c"], engine_out_ppm=(vals["co_ppm"], vals["nox_ppm"], vals["thc_ppm"]),
            y_CO2=vals["y_co2"], radial_temps_C=tt,
            fitted_profile_time=fit_profile_time(library, tt) if library is not None else FLAT_PROFILE,
        )
        errs = p.violations()
        if errs:
            raise MapError(f"{source}: row {r}: {'; '.join(errs)}")
        pts.append(p)
    try:
        return EngineMap(pts)
    except MapError as exc:
        raise MapError(f"{source}: {exc}") from None


def map_rows(engine_map: EngineMap) -> list[dict]:
    rows = []
    for p in engine_map.points:
        tt = p.radial_temps_C or (p.T_exh_C,) * 4
        rows.append({
            "speed_rpm": p.speed_rpm, "bmep_bar": p.bmep_bar, "sa_cabtdc": p.spark_angle_CAbTDC,
            "mdot_exh_g_per_s": p.mdot_exh_kg_per_s * 1e3, "bsfc_g_per_kwh": p.bsfc_g_per_kWh,
            "co_ppm": p.engine_out_ppm[0], "nox_ppm": p.engine_out_ppm[1],
            "thc_ppm": p.engine_out_ppm[2], "y_co2": p.y_CO2, "t_exh_c": p.T_exh_C,
            "tt0_c": tt[0], "tt_r3_c": tt[1], "tt_2r3_c": tt[2], "tt_r_c": tt[3],
        })
    return rows


def save_map(path, engine_map: EngineMap, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.DictWriter(fh, fieldnames=MAP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in map_rows(engine_map):
            w.writerow({k: repr(float(v)) for k, v in row.items()})
