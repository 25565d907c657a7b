"""Arrhenius conversion in a grid of plug-flow cells and the heat it releases.

The array kernels accept arbitrary leading batch dimensions so that the same
code path serves single simulations, value-iteration sweeps over many grid
nodes and calibration polls over many candidate parameter sets.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

import numpy as np

from .core import KELVIN, SPECIES, GasConstants, KineticParams, MonolithGeometry

log = logging.getLogger(__name__)

P_AMBIENT_PA = 101325.0
_EXTRAPOLATION_FLOOR_K = 200.0


@dataclass(frozen=True)
class SpeciesFlows:
    """Mass flows in kg/s of the tracked species."""

    co: float = 0.0
    nox: float = 0.0
    thc: float = 0.0
    h2: float = 0.0

    def __post_init__(self):
        if min(self.co, self.nox, self.thc, self.h2) < 0:
            raise ValueError("species flows must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.co, self.nox, self.thc, self.h2])

    @classmethod
    def from_array(cls, a) -> "SpeciesFlows":
        a = np.asarray(a, dtype=float)
        return cls(*(float(v) for v in a[:4]))


@dataclass(frozen=True)
class CellResult:
    outflow: SpeciesFlows
    converted: SpeciesFlows
    exothermic_power_W: float = 0.0


# -- thermochemistry ------------------------------------------------------


class ThermoTable:
    """Piecewise Shomate enthalpies.

    Parameters
    ----------
    compounds : mapping
        ``{name: {"formation_enthalpy_kJ_per_mol": float, "ranges": [...]}}``
        where each range carries ``T_min_K``, ``T_max_K`` and the eight
        coefficients ``A..H``.
    """

    def __init__(self, compounds: Mapping):
        self.compounds = {}
        for name, entry in compounds.items():
            ranges = sorted(entry["ranges"], key=lambda r: r["T_min_K"])
            self.compounds[name] = {
                "Hf": float(entry["formation_enthalpy_kJ_per_mol"]),
                "ranges": [
                    (float(r["T_min_K"]), float(r["T_max_K"]), np.array(r["coefficients"], float))
                    for r in ranges
                ],
            }
        self._warned: set = set()

    @classmethod
    def load(cls, path=None) -> "ThermoTable":
        if path is None:
            text = resources.files("twcsim").joinpath("data/thermo.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls(json.loads(text)["compounds"])

    def valid_range(self, compound: str) -> tuple[float, float]:
        r = self.compounds[compound]["ranges"]
        return r[0][0], r[-1][1]

    @staticmethod
    def _poly(c, t):
        return c[0] * t + c[1] * t**2 / 2 + c[2] * t**3 / 3 + c[3] * t**4 / 4 - c[4] / t + c[5]

    def enthalpy(self, compound: str, T_K, warn: bool = True) -> np.ndarray:
        """Absolute molar enthalpy ``Hf + (H - H298)`` in kJ/mol."""
        if compound not in self.compounds:
            raise KeyError(f"no thermodynamic data for {compound}")
        entry = self.compounds[compound]
        T = np.asarray(T_K, dtype=float)
        lo, hi = self.valid_range(compound)
        if np.any(T < _EXTRAPOLATION_FLOOR_K) or np.any(T > hi):
            raise ValueError(
                f"temperature outside the data range of {compound}: "
                f"[{_EXTRAPOLATION_FLOOR_K:g}, {hi:g}] K (table starts at {lo:g} K)"
            )
        if warn and np.any(T < lo) and compound not in self._warned:
            self._warned.add(compound)
            log.warning("%s enthalpy extrapolated below %.0f K", compound, lo)
        t = T / 1000.0
        ranges = entry["ranges"]
        which = np.searchsorted([r[1] for r in ranges[:-1]], T, side="right")
        out = np.zeros_like(t)
        for i, (_, _, c) in enumerate(ranges):
            out = np.where(which == i, self._poly(c, t), out)
        return out

    def max_discontinuity(self) -> float:
        """Largest enthalpy jump (kJ/mol) at any piecewise range boundary."""
        worst = 0.0
        for entry in self.compounds.values():
            r = entry["ranges"]
            for (_, b, c1), (a, _, c2) in zip(r[:-1], r[1:]):
                t = b / 1000.0
                worst = max(worst, abs(self._poly(c1, t) - self._poly(c2, t)))
        return worst


@lru_cache(maxsize=None)
def default_thermo() -> ThermoTable:
    return ThermoTable.load()


def _reaction_enthalpies(thermo: ThermoTable, T_K, consts: GasConstants, warn=True) -> dict:
    H = {c: thermo.enthalpy(c, T_K, warn) for c in ("CO", "CO2", "O2", "N2", "H2", "H2O", "NO", "NO2", "C3H6", "C3H8")}
    dh = {}
    dh["CO"] = H["CO2"] - H["CO"] - 0.5 * H["O2"]
    dh["H2"] = H["H2O"] - H["H2"] - 0.5 * H["O2"]
    dh["NO"] = 0.5 * H["N2"] + H["CO2"] - H["NO"] - dh["CO"]
    dh["NO2"] = 0.5 * H["N2"] + H["O2"] - H["NO2"]
    dh["C3H6"] = 3 * H["CO2"] + 3 * H["H2O"] - H["C3H6"] - 4.5 * H["O2"]
    dh["C3H8"] = 3 * H["CO2"] + 4 * H["H2O"] - H["C3H8"] - 5 * H["O2"]
    f_no, f_c3h6 = consts.NO_to_NO2_ratio, consts.C3H6_to_C3H8_ratio
    dh["NOx"] = f_no * dh["NO"] + (1 - f_no) * dh["NO2"]
    dh["THC"] = f_c3h6 * dh["C3H6"] + (1 - f_c3h6) * dh["C3H8"]
    # kJ/mol of reaction enthalpy -> J/mol released
    return {k: -1000.0 * v for k, v in dh.items()}


def heat_of_reaction(species: str, T_C, thermo: ThermoTable | None = None,
                     consts: GasConstants | None = None):
    """Heat released per mole of ``species`` converted, in J/mol.

    ``species`` is one of the lumped species ``CO``, ``H2``, ``NOx``,
    ``THC`` or one of the components ``NO``, ``NO2``, ``C3H6``, ``C3H8``.
    """
    thermo = thermo or default_thermo()
    consts = consts or GasConstants()
    T_K = np.asarray(T_C, dtype=float) + KELVIN
    dh = _reaction_enthalpies(thermo, T_K, consts)
    if species not in dh:
        raise KeyError(f"unknown species {species}")
    out = dh[species]
    return float(out) if out.ndim == 0 else out


class HeatTable:
    """Tabulated heats of reaction on a 1 K grid for the hot loops."""

    def __init__(self, thermo: ThermoTable | None = None, consts: GasConstants | None = None,
                 T_min_C: float = _EXTRAPOLATION_FLOOR_K - KELVIN, T_max_C: float = 1226.0):
        thermo = thermo or default_thermo()
        consts = consts or GasConstants()
        self.T = np.arange(T_min_C, T_max_C + 0.5, 1.0)
        dh = _reaction_enthalpies(thermo, self.T + KELVIN, consts, warn=False)
        self.values = np.stack([dh[s] for s in SPECIES])

    def __call__(self, T_C) -> np.ndarray:
        """Return heats of reaction with a trailing species axis."""
        # uniform 1 K spacing: direct index arithmetic instead of a search
        T = np.asarray(T_C, dtype=float)
        bad = ~np.isfinite(T)
        u = np.clip(np.where(bad, 0.0, T) - self.T[0], 0.0, len(self.T) - 1.0)
        i = np.minimum(u.astype(np.intp), len(self.T) - 2)
        f = u - i
        out = np.empty(u.shape + (len(SPECIES),))
        for s, v in enumerate(self.values):
            lo = v.take(i)
            out[..., s] = lo + (v.take(i + 1) - lo) * f
        if bad.any():
            out[bad] = np.nan
        return out


@lru_cache(maxsize=None)
def default_heat_table() -> HeatTable:
    return HeatTable()


# -- rates and flows ---------------------------------------------------------


def arrhenius_rate(A, E_a, T_C, R: float = 8.314462618):
    """Arrhenius rate constant ``A exp(-E_a / (R T))`` in 1/s."""
    T_K = np.asarray(T_C, dtype=float) + KELVIN
    if np.any(T_K <= 0):
        raise ValueError("temperature at or below absolute zero")
    return A * np.exp(-np.asarray(E_a, dtype=float) / (R * T_K))


def residence_time(geometry: MonolithGeometry, slice_index: int, mdot_exh, T_cell_C,
                   p_twc: float = P_AMBIENT_PA, consts: GasConstants | None = None):
    """Plug-flow gas residence time of one slice in s."""
    consts = consts or GasConstants()
    mdot = np.asarray(mdot_exh, dtype=float)
    if np.any(mdot <= 0):
        raise ValueError("exhaust massflow must be positive")
    if p_twc <= 0:
        raise ValueError("pressure must be positive")
    T_K = np.asarray(T_cell_C, dtype=float) + KELVIN
    volume = geometry.ofa * geometry.slice_lengths_m[slice_index] * geometry.frontal_area_m2
    return volume * p_twc / (mdot * consts.R_specific_exh_J_per_kgK * T_K)


def estimate_h2(y_CO, y_CO2, consts: GasConstants | None = None):
    """Water-gas-shift equilibrium estimate of ``(y_H2, y_H2O)``."""
    consts = consts or GasConstants()
    y_CO = np.asarray(y_CO, dtype=float)
    y_CO2 = np.asarray(y_CO2, dtype=float)
    if np.any(y_CO < 0):
        raise ValueError("CO mole fraction must be nonnegative")
    if np.any((y_CO2 <= 0) & (y_CO > 0)):
        raise ValueError("CO2 mole fraction must be positive when CO is present")
    K, r = consts.watergas_K, consts.fuel_HC_ratio_m_over_2n
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(y_CO > 0, y_CO / (K * np.where(y_CO2 > 0, y_CO2, 1.0)), 0.0)
    y_H2O = r * (y_CO + y_CO2) / (1 + shift + r * (y_CO + y_CO2))
    y_H2 = y_H2O * shift
    if y_H2.ndim == 0:
        return float(y_H2), float(y_H2O)
    return y_H2, y_H2O


def ppm_to_massflow(ppm, mdot_exh, species: str, consts: GasConstants | None = None):
    """Convert a mole fraction in ppm to a species mass flow in kg/s."""
    consts = consts or GasConstants()
    return np.asarray(ppm) * 1e-6 * mdot_exh * consts.molar_masses_kg_per_mol[species] / consts.M_exh


def engine_out_flows(co_ppm, nox_ppm, thc_ppm, y_co2, mdot_exh,
                     consts: GasConstants | None = None) -> np.ndarray:
    """Engine-out flows ``[CO, NOx, THC, H2]`` in kg/s including the H2 estimate."""
    consts = consts or GasConstants()
    y_h2, _ = estimate_h2(np.asarray(co_ppm) * 1e-6, y_co2, consts)
    return np.stack(
        [
            ppm_to_massflow(co_ppm, mdot_exh, "CO", consts),
            ppm_to_massflow(nox_ppm, mdot_exh, "NOx", consts),
            ppm_to_massflow(thc_ppm, mdot_exh, "THC", consts),
            ppm_to_massflow(np.asarray(y_h2) * 1e6, mdot_exh, "H2", consts),
        ],
        axis=-1,
    )


def cell_convert(inflow: SpeciesFlows, k, t_r: float) -> CellResult:
    """Closed-form first-order conversion over one residence time."""
    if t_r < 0:
        raise ValueError("residence time must be nonnegative")
    fin = inflow.as_array()
    out = fin * np.exp(-np.asarray(k, dtype=float) * t_r)
    return CellResult(SpeciesFlows.from_array(out), SpeciesFlows.from_array(np.maximum(fin - out, 0.0)))


def cell_power(converted: SpeciesFlows, T_C: float, thermo: ThermoTable | None = None,
               consts: GasConstants | None = None) -> float:
    """Exothermic power in W released by the converted flows at ``T_C``."""
    consts = consts or GasConstants()
    conv = converted.as_array()
    dh = np.array([heat_of_reaction(s, T_C, thermo, consts) for s in SPECIES])
    return float(np.sum(conv / consts.molar_mass_array * dh))


def _expand(x, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[(...,) + (None,) * k]


@lru_cache(maxsize=256)
def _shared_pairs(a: bytes, ea: bytes):
    pairs, back = np.unique(np.stack([np.frombuffer(a), np.frombuffer(ea)], axis=1), axis=0,
                            return_inverse=True)
    return pairs[:, 0].copy(), pairs[:, 1].copy(), back.ravel()


def chain_cells(T_cells, inlet, weights, A, Ea, slice_lengths, flow_area, mdot,
                consts: GasConstants, p_twc: float = P_AMBIENT_PA):
    """Axially chained conversion over an ``(M, N)`` grid of cells.

    Parameters
    ----------
    T_cells : array, shape (..., M, N)
        Cell temperatures in C.
    inlet : array, shape (..., 4)
        Total inlet species flows in kg/s.
    weights : array, shape (M,) or (..., M)
        Channel massflow fractions.
    A, Ea : array, shape (..., 4)
    slice_lengths : array, shape (N,) or (..., N)
    flow_area : float or array (...)
        Open flow area ``OFA * pi R^2`` in m^2.
    mdot : float or array (...)
        Exhaust massflow in kg/s.

    Returns
    -------
    outflow : array, shape (..., M, 4)
        Outflow of the last slice of every channel.
    converted : array, shape (..., M, N, 4)
    """
    T_K = np.asarray(T_cells, dtype=float) + KELVIN
    n_slices = T_K.shape[-1]
    A = np.asarray(A, dtype=float)
    Ea = np.asarray(Ea, dtype=float)
    back = None
    if A.ndim == 1 and Ea.ndim == 1:
        # species sharing (A, Ea), e.g. CO and H2, need one evaluation
        A, Ea, back = _shared_pairs(A.tobytes(), Ea.tobytes())
    vol = _expand(flow_area, 2) * np.asarray(slice_lengths, dtype=float)[..., None, :]
    safe_mdot = np.where(np.asarray(mdot) > 0, mdot, np.inf)
    inv_T = 1.0 / T_K
    t_r = vol * p_twc / (_expand(safe_mdot, 2) * consts.R_specific_exh_J_per_kgK) * inv_T
    # k * t_r = exp(ln A - Ea / (R T) + ln t_r)
    with np.errstate(divide="ignore"):
        log_kt = (np.log(A)[..., None, None, :] + np.log(t_r)[..., None]
                  - (Ea / consts.R_universal_J_per_molK)[..., None, None, :] * inv_T[..., None])
    frac = np.exp(-np.exp(log_kt))
    if back is not None and len(A) < len(back):
        frac = frac[..., back.ravel()]
    flow = np.asarray(inlet, dtype=float)[..., None, :] * np.asarray(weights, dtype=float)[..., :, None]
    converted = np.empty(frac.shape)
    for n in range(n_slices):
        out = flow * frac[..., n, :]
        converted[..., n, :] = flow - out
        flow = out
    return flow, converted


def conversion_power(converted, T_cells, consts: GasConstants, heat: HeatTable | None = None):
    """Exothermic power per cell in W from converted flows ``(..., M, N, 4)``."""
    heat = heat or default_heat_table()
    return np.einsum("...s,...s->...", converted / consts.molar_mass_array, heat(T_cells))


def efficiency(inlet, tailpipe) -> np.ndarray:
    """Conversion efficiency ``1 - tailpipe/inlet`` with 0 for zero inlet."""
    inlet = np.asarray(inlet, dtype=float)
    tailpipe = np.asarray(tailpipe, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = 1.0 - tailpipe / inlet
    return np.where(inlet > 0, eta, 0.0)


def monolith_kinetics(channel_temps, inlet, weights, geometry: MonolithGeometry,
                      params: KineticParams, p_twc: float = P_AMBIENT_PA,
                      mdot_exh: float = 0.0, consts: GasConstants | None = None,
                      thermo: ThermoTable | None = None):
    """Run the cell chain of one monolith.

    Parameters
    ----------
    channel_temps : array, shape (M, N)
    inlet : SpeciesFlows or array of 4 flows
    weights : array, shape (M,)
    mdot_exh : float
        Total exhaust flow in kg/s (sets the residence time).

    Returns
    -------
    cells : list of list of CellResult
        Indexed ``[m][n]``.
    tailpipe : SpeciesFlows
    eta : ndarray, shape (4,)
    """
    consts = consts or GasConstants()
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("channel weights must sum to 1")
    inlet_arr = inlet.as_array() if isinstance(inlet, SpeciesFlows) else np.asarray(inlet, float)
    T = np.asarray(channel_temps, dtype=float)
    flow_area = geometry.ofa * geometry.frontal_area_m2
    out_last, conv = chain_cells(
        T, inlet_arr, w, params.A, params.Ea, geometry.slice_lengths_m, flow_area, mdot_exh,
        consts, p_twc,
    )
    thermo = thermo or default_thermo()
    dh = np.stack([heat_of_reaction(s, T, thermo, consts) for s in SPECIES], axis=-1)
    power = np.sum(conv / consts.molar_mass_array * dh, axis=-1)
    M, N = T.shape
    cells = []
    for m in range(M):
        row, flow = [], inlet_arr * w[m]
        for n in range(N):
            out = flow - conv[m, n]
            row.append(CellResult(SpeciesFlows.from_array(np.maximum(out, 0.0)),
                                  SpeciesFlows.from_array(conv[m, n]), float(power[m, n])))
            flow = out
        cells.append(row)
    tail = out_last.sum(axis=0)
    return cells, SpeciesFlows.from_array(tail), efficiency(inlet_arr, tail)
