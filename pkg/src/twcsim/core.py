"""Domain types, geometry helpers and JSON I/O for catalyst monoliths.

Temperatures are in degrees Celsius everywhere outside the physics kernels.
All other quantities are SI.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPECIES = ("CO", "NOx", "THC", "H2")
KELVIN = 273.15
T_MIN_C = -100.0
T_MAX_C = 1200.0


class ConfigError(ValueError):
    """Invalid configuration or parameter set."""


def open_frontal_area(l_c: float, t_w: float) -> float:
    """Open frontal area of a square-channel monolith.

    Parameters
    ----------
    l_c : float
        Channel pitch (wall centre to wall centre) in m.
    t_w : float
        Wall thickness in m.

    Returns
    -------
    float
        ``(l_c - t_w)**2 / l_c**2``.
    """
    if not l_c > 0:
        raise ValueError(f"channel width must be positive, got {l_c}")
    if t_w < 0 or t_w >= l_c:
        raise ValueError(f"wall thickness must satisfy 0 <= t_w < l_c, got t_w={t_w}, l_c={l_c}")
    return (l_c - t_w) ** 2 / l_c**2


def wall_thickness_from_ofa(ofa: float, l_c: float) -> float:
    """Invert :func:`open_frontal_area` for the wall thickness."""
    if not 0 < ofa <= 1:
        raise ValueError(f"open frontal area must lie in (0, 1], got {ofa}")
    return l_c * (1.0 - math.sqrt(ofa))


@dataclass(frozen=True)
class MonolithGeometry:
    """Geometry of one monolith split into ``N`` axial slices.

    ``slice_center_distances_m`` is derived from the slice lengths when not
    supplied.
    """

    length_total_m: float
    radius_m: float
    slice_lengths_m: tuple
    wall_thickness_m: float
    channel_width_m: float
    mass_kg: float
    slice_center_distances_m: tuple | None = None

    def __post_init__(self):
        sl = tuple(float(v) for v in self.slice_lengths_m)
        object.__setattr__(self, "slice_lengths_m", sl)
        if self.slice_center_distances_m is None:
            d = tuple(0.5 * (a + b) for a, b in zip(sl[:-1], sl[1:]))
        else:
            d = tuple(float(v) for v in self.slice_center_distances_m)
        object.__setattr__(self, "slice_center_distances_m", d)

    @property
    def n_slices(self) -> int:
        return len(self.slice_lengths_m)

    @property
    def ofa(self) -> float:
        return open_frontal_area(self.channel_width_m, self.wall_thickness_m)

    @property
    def frontal_area_m2(self) -> float:
        return math.pi * self.radius_m**2

    @property
    def length_weights(self) -> np.ndarray:
        """Relative slice lengths ``W_L = L_n / L``."""
        return np.asarray(self.slice_lengths_m) / self.length_total_m

    def with_slices(self, slice_lengths) -> "MonolithGeometry":
        return MonolithGeometry(
            length_total_m=self.length_total_m,
            radius_m=self.radius_m,
            slice_lengths_m=tuple(slice_lengths),
            wall_thickness_m=self.wall_thickness_m,
            channel_width_m=self.channel_width_m,
            mass_kg=self.mass_kg,
        )

    def violations(self) -> list[str]:
        out = []
        L = self.length_total_m
        for name in ("length_total_m", "radius_m", "mass_kg", "channel_width_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                out.append(f"{name} must be positive and finite (got {v})")
        sl = self.slice_lengths_m
        if len(sl) == 0:
            out.append("at least one axial slice is required")
            return out
        if any(not (math.isfinite(v) and v > 0) for v in sl):
            out.append("slice lengths must be positive and finite")
        if L > 0 and abs(sum(sl) - L) > 1e-9 * L:
            out.append(f"slice lengths sum to {sum(sl):.6g} m, expected length_total_m = {L:.6g} m")
        if L > 0:
            for i, v in enumerate(sl):
                if v < L / 5 * (1 - 1e-12):
                    out.append(
                        f"slice {i + 1} length {v:.6g} m is shorter than L/5 = {L / 5:.6g} m"
                    )
        if not (0 < self.wall_thickness_m < self.channel_width_m):
            out.append("wall thickness must satisfy 0 < t_w < l_c")
        d = self.slice_center_distances_m
        if len(d) != len(sl) - 1:
            out.append("slice_center_distances_m must have N-1 entries")
        else:
            for i, v in enumerate(d):
                expect = 0.5 * (sl[i] + sl[i + 1])
                if abs(v - expect) > 1e-12 * max(expect, 1e-300):
                    out.append(f"slice centre distance {i + 1} is {v}, expected {expect}")
        return out


@dataclass(frozen=True)
class MonolithState:
    """Slice-centre temperatures and the shared centre-to-periphery offset."""

    slice_center_temps_C: tuple
    radial_delta_C: float

    def __post_init__(self):
        object.__setattr__(
            self, "slice_center_temps_C", tuple(float(v) for v in self.slice_center_temps_C)
        )
        object.__setattr__(self, "radial_delta_C", float(self.radial_delta_C))
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError("state contains non-finite values")
        temps = np.concatenate(
            [vals[:-1], vals[:-1] + vals[-1]]
        )
        if temps.min() < T_MIN_C or temps.max() > T_MAX_C:
            raise ValueError(
                f"state temperatures leave the [{T_MIN_C}, {T_MAX_C}] C envelope: {vals.tolist()}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(self.slice_center_temps_C + (self.radial_delta_C,))

    @classmethod
    def from_array(cls, x) -> "MonolithState":
        x = np.asarray(x, dtype=float)
        return cls(tuple(x[:-1]), x[-1])

    @classmethod
    def uniform(cls, n_slices: int, temp_C: float) -> "MonolithState":
        return cls((temp_C,) * n_slices, 0.0)


@dataclass(frozen=True)
class ThermalParams:
    k_ax_W_per_mK: float
    k_rad_W_per_mK: float
    k_amb_W_per_mK: float
    t_amb_m: float
    cp_J_per_kgK: float
    cp_exh_J_per_kgK: float
    T_amb_C: float

    def violations(self) -> list[str]:
        out = []
        for name in (
            "k_ax_W_per_mK",
            "k_rad_W_per_mK",
            "k_amb_W_per_mK",
            "t_amb_m",
            "cp_J_per_kgK",
            "cp_exh_J_per_kgK",
        ):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                out.append(f"{name} must be positive and finite (got {v})")
        if not math.isfinite(self.T_amb_C):
            out.append("T_amb_C must be finite")
        return out


@dataclass(frozen=True)
class KineticParams:
    """Arrhenius parameters per tracked species.

    The hydrogen entry always mirrors CO. Omit it to have it filled in.
    """

    pre_exponential_A: Mapping[str, float]
    activation_energy_J_per_mol: Mapping[str, float]

    def __post_init__(self):
        A = {s: float(v) for s, v in self.pre_exponential_A.items()}
        Ea = {s: float(v) for s, v in self.activation_energy_J_per_mol.items()}
        for d, label in ((A, "pre_exponential_A"), (Ea, "activation_energy_J_per_mol")):
            missing = [s for s in SPECIES[:3] if s not in d]
            if missing:
                raise ConfigError(f"{label} lacks species {missing}")
            unknown = set(d) - set(SPECIES)
            if unknown:
                raise ConfigError(f"{label} has unknown species {sorted(unknown)}")
            d.setdefault("H2", d["CO"])
            if d["H2"] != d["CO"]:
                raise ConfigError(f"{label}: H2 must equal CO ({d['H2']} != {d['CO']})")
        object.__setattr__(self, "pre_exponential_A", {s: A[s] for s in SPECIES})
        object.__setattr__(self, "activation_energy_J_per_mol", {s: Ea[s] for s in SPECIES})

    @classmethod
    def from_arrays(cls, A, Ea) -> "KineticParams":
        """Build from (CO, NOx, THC) sequences."""
        return cls(dict(zip(SPECIES[:3], A)), dict(zip(SPECIES[:3], Ea)))

    @property
    def A(self) -> np.ndarray:
        return np.array([self.pre_exponential_A[s] for s in SPECIES])

    @property
    def Ea(self) -> np.ndarray:
        return np.array([self.activation_energy_J_per_mol[s] for s in SPECIES])

    def replace(self, species: str, A: float | None = None, Ea: float | None = None):
        a = dict(self.pre_exponential_A)
        e = dict(self.activation_energy_J_per_mol)
        targets = ("CO", "H2") if species in ("CO", "H2") else (species,)
        for s in targets:
            if A is not None:
                a[s] = A
            if Ea is not None:
                e[s] = Ea
        return KineticParams(a, e)

    def violations(self) -> list[str]:
        out = []
        for s in SPECIES:
            if not self.pre_exponential_A[s] > 0:
                out.append(f"pre_exponential_A[{s}] must be positive")
            if not self.activation_energy_J_per_mol[s] > 0:
                out.append(f"activation_energy_J_per_mol[{s}] must be positive")
        return out


def _default_molar_masses():
    no, no2 = 30.006e-3, 46.0055e-3
    c3h6, c3h8 = 42.0797e-3, 44.0956e-3
    return {
        "CO": 28.0101e-3,
        "NOx": 0.99 * no + 0.01 * no2,
        "THC": 0.75 * c3h6 + 0.25 * c3h8,
        "H2": 2.01588e-3,
    }


@dataclass(frozen=True)
class GasConstants:
    """Gas-phase constants.

    ``NO_to_NO2_ratio`` is the NO mole fraction of lumped NOx (0.99 for
    99:1) and ``C3H6_to_C3H8_ratio`` the propene fraction of lumped THC.
    """

    R_universal_J_per_molK: float = 8.314462618
    R_specific_exh_J_per_kgK: float = 288.0
    watergas_K: float = 3.8
    fuel_HC_ratio_m_over_2n: float = 0.258
    NO_to_NO2_ratio: float = 0.99
    C3H6_to_C3H8_ratio: float = 0.75
    molar_masses_kg_per_mol: Mapping[str, float] = field(default_factory=_default_molar_masses)

    @property
    def M_exh(self) -> float:
        return self.R_universal_J_per_molK / self.R_specific_exh_J_per_kgK

    @property
    def molar_mass_array(self) -> np.ndarray:
        return np.array([self.molar_masses_kg_per_mol[s] for s in SPECIES])

    def violations(self) -> list[str]:
        out = []
        for name in (
            "R_universal_J_per_molK",
            "R_specific_exh_J_per_kgK",
            "watergas_K",
            "fuel_HC_ratio_m_over_2n",
        ):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        for name in ("NO_to_NO2_ratio", "C3H6_to_C3H8_ratio"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                out.append(f"{name} must be a fraction in (0, 1]")
        for s in SPECIES:
            if not self.molar_masses_kg_per_mol.get(s, 0) > 0:
                out.append(f"molar mass of {s} must be positive")
        return out


@dataclass(frozen=True)
class MonolithSpec:
    name: str
    geometry: MonolithGeometry
    thermal: ThermalParams
    kinetics: KineticParams

    def violations(self) -> list[str]:
        errs = self.geometry.violations() + self.thermal.violations() + self.kinetics.violations()
        return [f"{self.name}: {e}" for e in errs]


def validate_system(spec_pair: Sequence[MonolithSpec]) -> list[str]:
    """Return every violated invariant of a two-monolith system.

    An empty list means the system is valid.
    """
    report = []
    if len(spec_pair) != 2:
        report.append(f"expected two monoliths, got {len(spec_pair)}")
    for spec in spec_pair:
        report.extend(spec.violations())
    return report


# -- JSON ----------------------------------------------------------------


def geometry_to_dict(g: MonolithGeometry) -> dict:
    return {
        "length_total_m": g.length_total_m,
        "radius_m": g.radius_m,
        "slice_lengths_m": list(g.slice_lengths_m),
        "slice_center_distances_m": list(g.slice_center_distances_m),
        "wall_thickness_m": g.wall_thickness_m,
        "channel_width_m": g.channel_width_m,
        "mass_kg": g.mass_kg,
    }


def geometry_from_dict(d: Mapping) -> MonolithGeometry:
    d = dict(d)
    try:
        if "open_frontal_area" in d:
            l_c = float(d.get("channel_width_m", 1.0e-3))
            t_w = wall_thickness_from_ofa(float(d.pop("open_frontal_area")), l_c)
            if "wall_thickness_m" in d and d["wall_thickness_m"] != t_w:
                raise ConfigError("give either open_frontal_area or wall_thickness_m, not both")
            d["channel_width_m"], d["wall_thickness_m"] = l_c, t_w
        centres = d.get("slice_center_distances_m")
        return MonolithGeometry(
            length_total_m=float(d["length_total_m"]),
            radius_m=float(d["radius_m"]),
            slice_lengths_m=tuple(d["slice_lengths_m"]),
            wall_thickness_m=float(d["wall_thickness_m"]),
            channel_width_m=float(d["channel_width_m"]),
            mass_kg=float(d["mass_kg"]),
            slice_center_distances_m=None if centres is None else tuple(centres),
        )
    except KeyError as exc:
        raise ConfigError(f"geometry is missing field {exc}") from None


def spec_to_dict(spec: MonolithSpec) -> dict:
    return {
        "name": spec.name,
        "geometry": geometry_to_dict(spec.geometry),
        "thermal": dict(spec.thermal.__dict__),
        "kinetics": {
            "pre_exponential_A": dict(spec.kinetics.pre_exponential_A),
            "activation_energy_J_per_mol": dict(spec.kinetics.activation_energy_J_per_mol),
        },
    }


def spec_from_dict(d: Mapping) -> MonolithSpec:
    try:
        return MonolithSpec(
            name=str(d.get("name", "TWC")),
            geometry=geometry_from_dict(d["geometry"]),
            thermal=ThermalParams(**{k: float(v) for k, v in d["thermal"].items()}),
            kinetics=KineticParams(
                d["kinetics"]["pre_exponential_A"], d["kinetics"]["activation_energy_J_per_mol"]
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed monolith spec: {exc}") from None


def save_system(path, specs: Sequence[MonolithSpec], extra: Mapping | None = None) -> None:
    doc = {"twc1": spec_to_dict(specs[0]), "twc2": spec_to_dict(specs[1])}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def load_system(path) -> tuple[MonolithSpec, MonolithSpec]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        return spec_from_dict(doc["twc1"]), spec_from_dict(doc["twc2"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing monolith {exc}") from None


# -- reference system ------------------------------------------------------

DEFAULT_RADIUS_M = 0.059
DEFAULT_CHANNEL_WIDTH_M = 1.0e-3


def reference_twc1() -> MonolithSpec:
    """Close-coupled brick with the published tuned parameters."""
    slices = (0.0321, 0.0482, 0.0418)
    geom = MonolithGeometry(
        length_total_m=sum(slices),
        radius_m=DEFAULT_RADIUS_M,
        slice_lengths_m=slices,
        wall_thickness_m=wall_thickness_from_ofa(0.935, DEFAULT_CHANNEL_WIDTH_M),
        channel_width_m=DEFAULT_CHANNEL_WIDTH_M,
        mass_kg=0.418,
    )
    thermal = ThermalParams(319.0, 46.6, 0.421, 0.01, 2318.0, 1050.0, 25.0)
    kin = KineticParams.from_arrays((59.5e9, 27.6e6, 11.2e9), (84.0e3, 82.1e3, 51.0e3))
    return MonolithSpec("TWC1", geom, thermal, kin)


def reference_twc2() -> MonolithSpec:
    """Downstream brick: one slice, half the length of the first."""
    geom = MonolithGeometry(
        length_total_m=0.061,
        radius_m=DEFAULT_RADIUS_M,
        slice_lengths_m=(0.061,),
        wall_thickness_m=wall_thickness_from_ofa(0.846, DEFAULT_CHANNEL_WIDTH_M),
        channel_width_m=DEFAULT_CHANNEL_WIDTH_M,
        mass_kg=0.248,
    )
    # k_ax has no effect with a single slice
    thermal = ThermalParams(319.0, 4.53, 0.602, 0.01, 2360.0, 1050.0, 25.0)
    kin = KineticParams.from_arrays((23.8e9, 16.1e6, 5.63e9), (84.0e3, 82.1e3, 51.0e3))
    return MonolithSpec("TWC2", geom, thermal, kin)


def reference_system() -> tuple[MonolithSpec, MonolithSpec]:
    return reference_twc1(), reference_twc2()
