"""Heat balance of the slice/periphery state and the two-brick plant.

Each monolith carries ``N`` slice-centre temperatures plus one shared
centre-to-periphery offset. The derivative kernels broadcast over leading
batch dimensions; :class:`TWCSystem` wires two monoliths in series.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import GasConstants, MonolithGeometry, MonolithSpec, ThermalParams
from .kinetics import (
    P_AMBIENT_PA,
    HeatTable,
    SpeciesFlows,
    chain_cells,
    conversion_power,
    default_heat_table,
    efficiency,
)
from .radialprofile import (
    FLAT_PROFILE,
    DiscSolutionLibrary,
    channel_massflow_weights,
    channel_radii,
    get_library,
)

POWER_TERMS = ("P_ax", "P_rad", "P_con_ctr", "P_con_per", "P_exo_ctr", "P_exo_per", "P_amb")


class IntegrationError(RuntimeError):
    """Non-finite derivative during a Runge-Kutta step."""

    def __init__(self, message: str, stage: int | None = None, run: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.run = run


@dataclass
class PowerBreakdown:
    P_ax: np.ndarray
    P_rad: np.ndarray
    P_con_ctr: np.ndarray
    P_con_per: np.ndarray
    P_exo_ctr: np.ndarray
    P_exo_per: np.ndarray
    P_amb: np.ndarray

    @property
    def P_ctr(self) -> np.ndarray:
        return self.P_ax + self.P_rad + self.P_con_ctr + self.P_exo_ctr

    @property
    def P_per(self) -> np.ndarray:
        return self.P_ax - self.P_rad + self.P_con_per + self.P_exo_per - self.P_amb


@dataclass(frozen=True)
class EngineInput:
    """Exhaust feed of the first brick.

    ``profile_index`` selects the radial profile shape of the operating point.
    """

    T_exh_C: float
    mdot_exh_kg_per_s: float
    engine_out: SpeciesFlows
    op_index: int = -1
    profile_index: int = FLAT_PROFILE


@dataclass
class MonolithArrays:
    """Numeric parameter pack of one monolith.

    Every scalar may carry leading batch dimensions; slice lengths and
    kinetic parameters add a trailing axis.
    """

    slice_lengths: np.ndarray
    length_total: np.ndarray
    radius: np.ndarray
    ofa: np.ndarray
    mass: np.ndarray
    k_ax: np.ndarray
    k_rad: np.ndarray
    k_amb: np.ndarray
    t_amb: np.ndarray
    cp: np.ndarray
    cp_exh: np.ndarray
    T_amb: np.ndarray
    A: np.ndarray
    Ea: np.ndarray

    @classmethod
    def from_spec(cls, spec: MonolithSpec) -> "MonolithArrays":
        g, th = spec.geometry, spec.thermal
        f = lambda v: np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            slice_lengths=f(g.slice_lengths_m), length_total=f(g.length_total_m),
            radius=f(g.radius_m), ofa=f(g.ofa), mass=f(g.mass_kg),
            k_ax=f(th.k_ax_W_per_mK), k_rad=f(th.k_rad_W_per_mK), k_amb=f(th.k_amb_W_per_mK),
            t_amb=f(th.t_amb_m), cp=f(th.cp_J_per_kgK), cp_exh=f(th.cp_exh_J_per_kgK),
            T_amb=f(th.T_amb_C), A=spec.kinetics.A, Ea=spec.kinetics.Ea,
        )

    @property
    def n_slices(self) -> int:
        return self.slice_lengths.shape[-1]

    @property
    def flow_area(self) -> np.ndarray:
        return self.ofa * np.pi * self.radius**2

    def replace(self, **kw) -> "MonolithArrays":
        d = dict(self.__dict__)
        d.update({k: np.asarray(v, dtype=float) for k, v in kw.items()})
        return MonolithArrays(**d)


def stack_packs(packs: Sequence[MonolithArrays]) -> MonolithArrays:
    """Stack packs along a new leading batch axis."""
    return MonolithArrays(
        **{k: np.stack([getattr(p, k) for p in packs]) for k in packs[0].__dict__}
    )


def _x(a):
    return np.asarray(a, dtype=float)[..., None]


# -- individual power terms (kernels) ---------------------------------------


def _p_axial(p: MonolithArrays, T):
    out = np.zeros(np.broadcast_shapes(T.shape, p.slice_lengths.shape))
    if T.shape[-1] > 1:
        L = p.slice_lengths
        centre = 0.5 * (L[..., 1:] + L[..., :-1])
        # flux from slice n+1 into slice n
        F = _x(p.k_ax) * (T[..., 1:] - T[..., :-1]) / centre * _x((1 - p.ofa) * np.pi * p.radius**2)
        out[..., :-1] += F
        out[..., 1:] -= F
    return out


def _p_radial(p: MonolithArrays, dT):
    q = p.k_rad * dT / (p.radius / 2)
    return q * np.pi * p.radius * p.length_total


def _p_convection(p: MonolithArrays, T, dT, T_exh, mdot):
    up = np.concatenate([np.broadcast_to(_x(T_exh), T.shape[:-1] + (1,)), T[..., :-1]], axis=-1)
    ctr = _x(mdot * p.cp_exh) * (up - T)
    per = ctr.copy()
    per[..., 0] -= mdot * p.cp_exh * dT
    return ctr, per


def _p_ambient(p: MonolithArrays, T, dT):
    q = _x(p.k_amb) * (T + _x(dT) - _x(p.T_amb)) / _x(p.t_amb)
    return q * _x(2 * np.pi * p.radius * p.length_total)


def split_exothermic(cell_powers):
    """Split ``(..., M, N)`` cell powers into centre and periphery shares."""
    P = np.asarray(cell_powers, dtype=float)
    M = P.shape[-2]
    if M == 1:
        ctr = P[..., 0, :]
        return ctr, np.zeros_like(ctr)
    w_per = np.arange(M) / (M - 1)
    per = np.einsum("...mn,m->...n", P, w_per)
    total = P.sum(axis=-2)
    return total - per, per


def _derivative(p: MonolithArrays, T, dT, T_exh, mdot, exo_ctr, exo_per, keep=False):
    P_ax = _p_axial(p, T)
    P_rad = _x(_p_radial(p, dT))
    con_ctr, con_per = _p_convection(p, T, dT, T_exh, mdot)
    P_amb = _p_ambient(p, T, dT)
    P_ctr = P_ax + P_rad + con_ctr + exo_ctr
    P_per = P_ax - P_rad + con_per + exo_per - P_amb
    W = p.slice_lengths / _x(p.length_total)
    C = _x(p.mass * p.cp) * W
    d_ctr = P_ctr / C
    d_per = P_per / C
    d_delta = np.sum(W * (d_per - d_ctr), axis=-1)
    dx = np.concatenate([d_ctr, d_delta[..., None]], axis=-1)
    if keep:
        shape = dx.shape[:-1] + (T.shape[-1],)
        bd = lambda a: np.broadcast_to(a, shape).copy()  # noqa: E731
        return dx, PowerBreakdown(bd(P_ax), bd(P_rad), bd(con_ctr), bd(con_per), bd(exo_ctr),
                                  bd(exo_per), bd(P_amb))
    return dx


# -- public single-state operations --------------------------------------------


def _pack(geometry: MonolithGeometry, params: ThermalParams) -> MonolithArrays:
    from .core import KineticParams

    kin = KineticParams.from_arrays((1, 1, 1), (1, 1, 1))
    return MonolithArrays.from_spec(MonolithSpec("tmp", geometry, params, kin))


def _split(state):
    x = np.asarray(state, dtype=float)
    return x[..., :-1], x[..., -1]


def power_axial(state, geometry: MonolithGeometry, params: ThermalParams) -> np.ndarray:
    """Axial conduction power per slice in W; ``state`` is ``[T_1..T_N, dT]``."""
    T, _ = _split(state)
    return _p_axial(_pack(geometry, params), T)


def power_radial(state, geometry: MonolithGeometry, params: ThermalParams) -> np.ndarray:
    """Centre-to-periphery conduction power (W), positive when the periphery is hotter."""
    T, dT = _split(state)
    return np.broadcast_to(_x(_p_radial(_pack(geometry, params), dT)), T.shape).copy()


def power_convection(state, T_exh, mdot_exh, params: ThermalParams):
    """Convective power per slice for the centre and periphery rows."""
    if np.any(np.asarray(mdot_exh) < 0):
        raise ValueError("massflow must be nonnegative")
    T, dT = _split(state)
    p = _pack(MonolithGeometry(1.0, 1.0, (1.0,), 0.1, 1.0, 1.0), params)
    return _p_convection(p, T, dT, np.asarray(T_exh, float), np.asarray(mdot_exh, float))


def weight_exothermic(cell_powers):
    """Centre/periphery split of an ``(M, N)`` cell power grid."""
    return split_exothermic(cell_powers)


def power_ambient(state, geometry: MonolithGeometry, params: ThermalParams) -> np.ndarray:
    T, dT = _split(state)
    return _p_ambient(_pack(geometry, params), T, dT)


def state_derivative(state, engine_input: EngineInput, cell_powers, geometry: MonolithGeometry,
                     params: ThermalParams, return_powers: bool = False):
    """Time derivative of ``[T_1..T_N, dT]`` for given cell heat release.

    Parameters
    ----------
    cell_powers : array, shape (M, N)
        Exothermic power of every cell in W.
    """
    T, dT = _split(state)
    ctr, per = split_exothermic(cell_powers)
    return _derivative(
        _pack(geometry, params), T, dT, engine_input.T_exh_C, engine_input.mdot_exh_kg_per_s,
        ctr, per, keep=return_powers,
    )


def rk4_step(state, inputs, dt: float, model: Callable):
    """One classical Runge-Kutta step of ``model(state, inputs)``."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    x = np.asarray(state, dtype=float)
    k = []
    for stage, (c, base) in enumerate(((0.0, None), (0.5, 0), (0.5, 1), (1.0, 2))):
        xs = x if base is None else x + c * dt * k[base]
        d = np.asarray(model(xs, inputs), dtype=float)
        if not np.all(np.isfinite(d)):
            raise IntegrationError(f"non-finite derivative in stage {stage + 1}", stage=stage + 1)
        k.append(d)
    return x + dt / 6.0 * (k[0] + 2 * k[1] + 2 * k[2] + k[3])


def mix_intermonolith(outlet_temps, outlet_flows, M2: int):
    """Flow-weighted mixing of the first brick's channels into the second.

    Returns
    -------
    T_mix : float
    inlet : ndarray, shape (M2, 4)
    """
    t = np.asarray(outlet_temps, dtype=float)
    w1 = channel_massflow_weights(t.shape[-1])
    T_mix = np.sum(w1 * t, axis=-1)
    total = np.asarray(outlet_flows, dtype=float).sum(axis=-2)
    return T_mix, total[..., None, :] * channel_massflow_weights(M2)[:, None]


# -- coupled plant -------------------------------------------------------------


@dataclass
class PlantInput:
    """Batched engine feed: temperatures, flows and radial shape factors."""

    T_exh: np.ndarray
    mdot: np.ndarray
    engine_out: np.ndarray
    shape: np.ndarray
    op_index: np.ndarray | int = -1


@dataclass
class PlantOutput:
    channel_temps1: np.ndarray
    channel_temps2: np.ndarray
    midbrick: np.ndarray
    twc1_out: np.ndarray
    tailpipe: np.ndarray
    T_mix: np.ndarray
    powers1: PowerBreakdown | None = None
    powers2: PowerBreakdown | None = None


class TWCSystem:
    """Two monoliths in series fed by one exhaust stream.

    Parameters
    ----------
    twc1, twc2 : MonolithSpec
    n_channels : int
        Radial channels per monolith.
    library : DiscSolutionLibrary, optional
    kinetics_enabled : bool
        When False the catalysts are inert (no conversion, no heat release).
    """

    def __init__(self, twc1: MonolithSpec, twc2: MonolithSpec, n_channels: int = 100,
                 library: DiscSolutionLibrary | None = None, consts: GasConstants | None = None,
                 p_twc: float = P_AMBIENT_PA, kinetics_enabled: bool = True,
                 heat: HeatTable | None = None):
        self.twc1, self.twc2 = twc1, twc2
        self.M = int(n_channels)
        self.library = library or get_library()
        self.consts = consts or GasConstants()
        self.p_twc = p_twc
        self.kinetics_enabled = kinetics_enabled
        self.heat = heat or default_heat_table()
        self.pack1 = MonolithArrays.from_spec(twc1)
        self.pack2 = MonolithArrays.from_spec(twc2)
        self.weights = channel_massflow_weights(self.M)
        self._radii = channel_radii(self.M)
        self._shape_cache: dict = {}

    @property
    def n1(self) -> int:
        return self.twc1.geometry.n_slices

    @property
    def n2(self) -> int:
        return self.twc2.geometry.n_slices

    def shape_factors(self, profile_index: int) -> np.ndarray:
        key = int(profile_index)
        if key not in self._shape_cache:
            self._shape_cache[key] = self.library.shape_factors(key, self._radii)
        return self._shape_cache[key]

    def plant_input(self, u: EngineInput) -> PlantInput:
        return PlantInput(
            np.asarray(u.T_exh_C, float), np.asarray(u.mdot_exh_kg_per_s, float),
            u.engine_out.as_array(), self.shape_factors(u.profile_index), u.op_index,
        )

    def _brick(self, p: MonolithArrays, x, T_in, mdot, inlet, g, keep):
        T, dT = x[..., :-1], x[..., -1]
        Tc = T[..., None, :] + dT[..., None, None] * g[..., :, None]
        if self.kinetics_enabled:
            out, conv = chain_cells(Tc, inlet, self.weights, p.A, p.Ea, p.slice_lengths,
                                    p.flow_area, mdot, self.consts, self.p_twc)
            ctr, per = split_exothermic(conversion_power(conv, Tc, self.consts, self.heat))
        else:
            out = np.asarray(inlet)[..., None, :] * self.weights[:, None]
            ctr = np.zeros(Tc.shape[:-2] + (Tc.shape[-1],))
            per = ctr
        res = _derivative(p, T, dT, T_in, mdot, ctr, per, keep=keep)
        return Tc, out, res

    def evaluate(self, x1, x2, u: PlantInput, outputs: bool = False):
        """Derivatives of both states, optionally with the measured outputs."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        Tc1, out1, r1 = self._brick(self.pack1, x1, u.T_exh, u.mdot, u.engine_out, u.shape, outputs)
        T_mix = np.einsum("...m,m->...", Tc1[..., :, -1], self.weights)
        inlet2 = out1.sum(axis=-2)
        Tc2, out2, r2 = self._brick(self.pack2, x2, T_mix, u.mdot, inlet2, u.shape, outputs)
        if not outputs:
            return r1, r2
        (d1, pw1), (d2, pw2) = r1, r2
        out = PlantOutput(
            channel_temps1=Tc1, channel_temps2=Tc2, midbrick=out1[..., 0, :] / self.weights[0],
            twc1_out=inlet2, tailpipe=out2.sum(axis=-2), T_mix=T_mix, powers1=pw1, powers2=pw2,
        )
        return d1, d2, out

    def step(self, x1, x2, u: PlantInput, dt: float, outputs: bool = False):
        """One RK4 step of the joint state; kinetics re-evaluated at every stage."""
        res = self.evaluate(x1, x2, u, outputs=outputs)
        stages = [(res[0], res[1])]
        for stage, c in enumerate((None, 0.5, 0.5, 1.0), start=1):
            if c is not None:
                pa, pb = stages[-1]
                stages.append(self.evaluate(x1 + c * dt * pa, x2 + c * dt * pb, u))
            ka, kb = stages[-1]
            if not (np.all(np.isfinite(ka)) and np.all(np.isfinite(kb))):
                raise IntegrationError(f"non-finite derivative in stage {stage}", stage=stage)
        (a1, b1), (a2, b2), (a3, b3), (a4, b4) = stages
        n1 = x1 + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        n2 = x2 + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        if outputs:
            return n1, n2, res[2]
        return n1, n2

    def initial_state(self, temp_C: float | None = None):
        if temp_C is None:
            temp_C = self.twc1.thermal.T_amb_C
        return np.r_[np.full(self.n1, temp_C), 0.0], np.r_[np.full(self.n2, temp_C), 0.0]


@dataclass
class Trajectory:
    """Per-sample simulation record; row ``k`` holds the state at ``t[k]``."""

    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    T_exh: np.ndarray
    mdot: np.ndarray
    op_index: np.ndarray
    engine_out: np.ndarray
    midbrick: np.ndarray
    twc1_out: np.ndarray
    tailpipe: np.ndarray
    eta: np.ndarray
    channel_temps1: np.ndarray
    channel_temps2: np.ndarray
    powers1: dict = field(default_factory=dict)
    powers2: dict = field(default_factory=dict)
    final_x1: np.ndarray | None = None
    final_x2: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0


EngineSchedule = EngineInput | Sequence[EngineInput] | Callable


def simulate_system(system: TWCSystem, x1_0, x2_0, engine: EngineSchedule, duration: float,
                    dt: float = 0.1, record_channels: bool = True) -> Trajectory:
    """Integrate the two-brick plant with fixed-step RK4.

    Parameters
    ----------
    engine : EngineInput, sequence or callable
        A constant feed, one feed per step, or ``engine(k, t, x1, x2)``
        returning the feed for step ``k``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    K = int(round(duration / dt))
    x1 = np.asarray(x1_0, dtype=float).copy()
    x2 = np.asarray(x2_0, dtype=float).copy()
    rec = {k: [] for k in ("x1", "x2", "T_exh", "mdot", "op", "eo", "mid", "o1", "tp", "c1", "c2")}
    p1 = {k: [] for k in POWER_TERMS}
    p2 = {k: [] for k in POWER_TERMS}
    cache: dict = {}
    for k in range(K):
        t = k * dt
        if callable(engine):
            u = engine(k, t, x1, x2)
        elif isinstance(engine, EngineInput):
            u = engine
        else:
            u = engine[k]
        key = id(u)
        if key not in cache:
            cache.clear()
            cache[key] = system.plant_input(u)
        pu = cache[key]
        try:
            nx1, nx2, out = system.step(x1, x2, pu, dt, outputs=True)
        except IntegrationError as exc:
            raise IntegrationError(f"step {k} (t = {t:.2f} s): {exc}", stage=exc.stage) from None
        rec["x1"].append(x1)
        rec["x2"].append(x2)
        rec["T_exh"].append(u.T_exh_C)
        rec["mdot"].append(u.mdot_exh_kg_per_s)
        rec["op"].append(u.op_index)
        rec["eo"].append(pu.engine_out)
        rec["mid"].append(out.midbrick)
        rec["o1"].append(out.twc1_out)
        rec["tp"].append(out.tailpipe)
        if record_channels:
            rec["c1"].append(out.channel_temps1)
            rec["c2"].append(out.channel_temps2)
        for name in POWER_TERMS:
            p1[name].append(getattr(out.powers1, name))
            p2[name].append(getattr(out.powers2, name))
        x1, x2 = nx1, nx2
    arr = lambda key, shape: np.array(rec[key]) if rec[key] else np.zeros((0,) + shape)  # noqa: E731
    eo = arr("eo", (4,))
    tp = arr("tp", (4,))
    M = system.M
    return Trajectory(
        t=np.arange(K) * dt,
        x1=arr("x1", (system.n1 + 1,)), x2=arr("x2", (system.n2 + 1,)),
        T_exh=arr("T_exh", ()), mdot=arr("mdot", ()), op_index=np.array(rec["op"], dtype=int),
        engine_out=eo, midbrick=arr("mid", (4,)), twc1_out=arr("o1", (4,)), tailpipe=tp,
        eta=efficiency(eo, tp),
        channel_temps1=arr("c1", (M, system.n1)), channel_temps2=arr("c2", (M, system.n2)),
        powers1={k: np.array(v) for k, v in p1.items()},
        powers2={k: np.array(v) for k, v in p2.items()},
        final_x1=x1, final_x2=x2,
    )
