"""Optimal engine operating-point policies for catalyst heating.

The joint state of both bricks is discretised on a six-dimensional grid
(TWC1 ``T1, T2, T3, dT`` and TWC2 ``T1, dT``). Backward value iteration
with multilinear interpolation of the value function gives a stationary
policy, which can be simulated in closed loop and exported as a compact
bit-packed table.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import reference_system
from .engine import EngineMap, RollingFilter, SuboptimalController, interpolate_setpoint
from .thermal import PlantInput, TWCSystem

log = logging.getLogger(__name__)

GRID_DIMS = ("twc1_t1_c", "twc1_t2_c", "twc1_t3_c", "twc1_dt_c", "twc2_t1_c", "twc2_dt_c")
REDUCED_T1 = tuple([0.0] + list(np.arange(100.0, 401.0, 25.0)) + list(np.arange(500.0, 901.0, 100.0)))
MAGIC = b"TWCP"
FORMAT_VERSION = 1
T_MAX_SAFE_C = 950.0
SAFETY_PENALTY = 1e6


class PolicyError(RuntimeError):
    """Value iteration failed to settle on a stationary policy."""


class PackingError(ValueError):
    """A policy cannot be represented in the packed format."""


# -- grid ------------------------------------------------------------------------


def default_breakpoints() -> tuple:
    coarse = np.arange(0.0, 901.0, 100.0)
    return (np.arange(0.0, 901.0, 25.0), coarse, coarse, np.array([-200.0, 100.0]),
            coarse, np.array([-200.0, 100.0]))


@dataclass(frozen=True)
class StateGrid:
    """Tensor grid of breakpoints in C, one sorted array per state dimension."""

    breakpoints: tuple

    def __post_init__(self):
        bps = tuple(np.asarray(b, dtype=float).ravel() for b in self.breakpoints)
        for name, b in zip(GRID_DIMS, bps):
            if b.size == 0 or not np.all(np.isfinite(b)):
                raise ValueError(f"{name}: breakpoints must be finite and nonempty")
            if np.any(np.diff(b) <= 0):
                raise ValueError(f"{name}: breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bps)

    @property
    def ndim(self) -> int:
        return len(self.breakpoints)

    @property
    def shape(self) -> tuple:
        return tuple(len(b) for b in self.breakpoints)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    def nodes(self) -> np.ndarray:
        """All node coordinates, row-major, shape ``(node_count, ndim)``."""
        mesh = np.meshgrid(*self.breakpoints, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def fractional_index(self, points) -> np.ndarray:
        """Continuous grid coordinates of ``points`` (..., ndim), clamped to the grid."""
        p = np.asarray(points, dtype=float)
        return np.stack([np.interp(p[..., d], b, np.arange(len(b)))
                         for d, b in enumerate(self.breakpoints)], axis=-1)

    def interpolate(self, values, points) -> np.ndarray:
        """Multilinear interpolation of node ``values`` at ``points``, clamped."""
        V = np.asarray(values, dtype=float).reshape(self.shape)
        idx = self.fractional_index(points)
        flat = idx.reshape(-1, self.ndim).T
        out = map_coordinates(V, flat, order=1, mode="nearest")
        return out.reshape(idx.shape[:-1])

    def nearest_node(self, points) -> np.ndarray:
        """Row-major index of the nearest node per point."""
        idx = np.rint(self.fractional_index(points)).astype(int)
        return np.ravel_multi_index(np.moveaxis(idx, -1, 0), self.shape)

    def to_dict(self) -> dict:
        return {name: b.tolist() for name, b in zip(GRID_DIMS, self.breakpoints)}


def build_grid(spec=None) -> StateGrid:
    """State grid from ``None`` (default), a sequence of six lists or a dict by dimension name."""
    if spec is None:
        return StateGrid(default_breakpoints())
    if isinstance(spec, StateGrid):
        return spec
    if isinstance(spec, dict):
        unknown = set(spec) - set(GRID_DIMS)
        if unknown:
            raise ValueError(f"unknown grid dimensions {sorted(unknown)}")
        base = default_breakpoints()
        return StateGrid(tuple(spec.get(n, b) for n, b in zip(GRID_DIMS, base)))
    bps = tuple(spec)
    if len(bps) != len(GRID_DIMS):
        raise ValueError(f"expected {len(GRID_DIMS)} breakpoint lists, got {len(bps)}")
    return StateGrid(bps)


def split_state(points):
    """Grid coordinates (..., 6) to TWC1 ``(..., 4)`` and TWC2 ``(..., 2)`` states."""
    p = np.asarray(points, dtype=float)
    return p[..., :4], p[..., 4:]


def join_state(x1, x2) -> np.ndarray:
    return np.concatenate([np.asarray(x1, float), np.asarray(x2, float)], axis=-1)


# -- cost ---------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaWeights:
    """Emission weights for CO, NOx and THC.

    ``values`` are in (g/kWh) per (g/s), the units in which they add to BSFC.
    ``normalized`` holds the dimensionless weights they were built from.
    """

    values: tuple
    normalized: tuple | None = None

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if len(v) != 3:
            raise ValueError("need one weight per species (CO, NOx, THC)")
        if any(not (x >= 0 and math.isfinite(x)) for x in v):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values)

    @staticmethod
    def scale(engine_map: EngineMap, consts=None) -> np.ndarray:
        """``min BSFC / min engine-out flow`` per species, flows in g/s."""
        eo = engine_map.engine_out_array(consts)[:, :3] * 1e3
        return engine_map.bsfc.min() / eo.min(axis=0)

    @classmethod
    def from_normalized(cls, lam_n, engine_map: EngineMap, consts=None) -> "LambdaWeights":
        lam_n = np.broadcast_to(np.asarray(lam_n, dtype=float), (3,))
        if np.any(lam_n < 0):
            raise ValueError("weights must be nonnegative")
        return cls(tuple(lam_n * cls.scale(engine_map, consts)), tuple(lam_n))


def stage_cost(bsfc, tailpipe, lam, dt: float):
    """``(BSFC + lam . tailpipe) * dt`` with tailpipe flows in kg/s (..., >=3)."""
    lam = lam.array if isinstance(lam, LambdaWeights) else np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("weights must be nonnegative")
    bsfc = getattr(bsfc, "bsfc_g_per_kWh", bsfc)
    tp = np.asarray(tailpipe, dtype=float)[..., :3] * 1e3
    return (np.asarray(bsfc, dtype=float) + tp @ lam) * dt


# -- control problem --------------------------------------------------------------


@dataclass
class Transitions:
    """One-step consequences of every (node, op) pair."""

    successors: np.ndarray
    bsfc: np.ndarray
    tailpipe: np.ndarray
    penalty: np.ndarray


def _peak_temperature(points) -> np.ndarray:
    """Hottest centre or periphery temperature of a joint state (..., 6)."""
    x1, x2 = split_state(points)
    return np.maximum.reduce([x1[..., :3].max(-1), (x1[..., :3] + x1[..., 3:]).max(-1),
                              x2[..., 0], x2[..., 0] + x2[..., 1]])


class TWCControlProblem:
    """Two-brick heating problem for :func:`solve_policy`.

    Parameters
    ----------
    system : TWCSystem
    engine_map : EngineMap
    lam : LambdaWeights or array
    dt : float
        Decision interval in s.
    substeps : int
        RK4 steps per decision interval.
    op_indices : sequence of int, optional
        Admissible map points; all by default.
    """

    def __init__(self, system: TWCSystem, engine_map: EngineMap, lam=(0.0, 0.0, 0.0), dt: float = 1.0,
                 substeps: int = 4, op_indices: Sequence[int] | None = None,
                 T_max: float = T_MAX_SAFE_C, penalty: float = SAFETY_PENALTY, chunk: int = 2048):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if system.n1 != 3 or system.n2 != 1:
            raise ValueError("the state grid expects three TWC1 slices and one TWC2 slice")
        self.system = system
        self.engine_map = engine_map
        self.lam = lam if isinstance(lam, LambdaWeights) else LambdaWeights(tuple(lam))
        self.dt = float(dt)
        self.substeps = int(substeps)
        self.ops = np.array(range(len(engine_map)) if op_indices is None else op_indices, dtype=int)
        self.T_max = T_max
        self.penalty = penalty
        self.chunk = chunk
        self._cache: dict = {}

    def with_weights(self, lam) -> "TWCControlProblem":
        """Same plant and cached transitions, different emission weights."""
        other = object.__new__(TWCControlProblem)
        other.__dict__.update(self.__dict__)
        other.lam = lam if isinstance(lam, LambdaWeights) else LambdaWeights(tuple(lam))
        return other

    def _feed(self) -> PlantInput:
        pts = [self.engine_map[i] for i in self.ops]
        shape = np.stack([self.system.shape_factors(p.fitted_profile_time) for p in pts])
        return PlantInput(
            np.array([p.T_exh_C for p in pts]), np.array([p.mdot_exh_kg_per_s for p in pts]),
            np.stack([p.engine_out() for p in pts]), shape, self.ops,
        )

    def propagate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Advance states (B, 6) one interval under every op.

        Returns successors ``(B, U, 6)`` and mean tailpipe flows ``(B, U, 4)``.
        """
        u = self._feed()
        x = np.asarray(points, dtype=float)[:, None, :]
        x1 = np.broadcast_to(x[..., :4], (len(x), len(self.ops), 4))
        x2 = np.broadcast_to(x[..., 4:], (len(x), len(self.ops), 2))
        h = self.dt / self.substeps
        tp = 0.0
        for _ in range(self.substeps):
            x1, x2, out = self.system.step(x1, x2, u, h, outputs=True)
            tp = tp + out.tailpipe
        return join_state(x1, x2), tp / self.substeps

    def raw_transitions(self, grid: StateGrid) -> Transitions:
        key = grid.shape, tuple(b.tobytes() for b in grid.breakpoints)
        if key not in self._cache:
            nodes = grid.nodes()
            succ, tp = [], []
            for s in range(0, len(nodes), self.chunk):
                a, b = self.propagate(nodes[s:s + self.chunk])
                succ.append(a)
                tp.append(b)
            succ = np.concatenate(succ)
            # grid corners may already sit above the limit; only penalise pushing further
            limit = np.maximum(_peak_temperature(nodes)[:, None], self.T_max)
            pen = self.penalty * np.maximum(_peak_temperature(succ) - limit, 0.0)
            bsfc = self.engine_map.bsfc[self.ops]
            self._cache[key] = Transitions(succ, bsfc, np.concatenate(tp), pen)
        return self._cache[key]

    def transitions(self, grid: StateGrid) -> tuple[np.ndarray, np.ndarray]:
        """Successor states ``(N, U, 6)`` and stage costs ``(N, U)``."""
        tr = self.raw_transitions(grid)
        cost = stage_cost(tr.bsfc, tr.tailpipe, self.lam, self.dt) + tr.penalty
        return tr.successors, cost

    @property
    def controls(self) -> np.ndarray:
        """(speed, bmep, sa) per admissible op."""
        return np.array([self.engine_map[i].key for i in self.ops])


# -- value iteration ---------------------------------------------------------------


@dataclass
class PolicyTable:
    """Stationary policy over a state grid.

    ``op_index`` holds engine-map indices per node (row-major).
    """

    grid: StateGrid
    op_index: np.ndarray
    detected_horizon_s: float
    controls: np.ndarray | None = None
    op_indices: np.ndarray | None = None
    value: np.ndarray | None = None
    iterations: int = 0
    lam: tuple | None = None
    _node_ctrl: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.op_index = np.asarray(self.op_index, dtype=int).ravel()
        if self.op_index.size != self.grid.node_count:
            raise ValueError("one op index per grid node is required")

    def validate(self, engine_map: EngineMap) -> None:
        if self.op_index.min() < 0 or self.op_index.max() >= len(engine_map):
            raise ValueError("policy references operating points outside the map")

    def _control_table(self, engine_map: EngineMap | None):
        if self.op_indices is None or self.controls is None:
            if engine_map is None:
                raise ValueError("an engine map is needed to query this policy")
            ops = np.unique(self.op_index)
            return ops, np.array([engine_map[i].key for i in ops])
        return self.op_indices, self.controls

    def query(self, x1, x2, engine_map: EngineMap | None = None) -> tuple[int, np.ndarray]:
        """Op index and interpolated (speed, bmep, sa) at a state.

        The setpoint is interpolated multilinearly from the surrounding nodes'
        controls and snapped to the nearest admissible op.
        """
        ops, ctrl = self._control_table(engine_map)
        if self._node_ctrl is None:
            pos = np.full(int(max(ops.max(), self.op_index.max())) + 1, -1)
            pos[ops] = np.arange(len(ops))
            self._node_ctrl = ctrl[pos[self.op_index]]
        p = join_state(x1, x2)
        setpoint = np.array([self.grid.interpolate(self._node_ctrl[:, c], p) for c in range(3)])
        norm = np.array([1000.0, 10.0, 10.0])
        j = int(np.argmin((((ctrl - setpoint) / norm) ** 2).sum(axis=1)))
        return int(ops[j]), setpoint

    def save(self, path) -> None:
        extra = {}
        for name in ("controls", "op_indices", "value"):
            if getattr(self, name) is not None:
                extra[name] = getattr(self, name)
        np.savez(path, op_index=self.op_index, horizon=self.detected_horizon_s,
                 iterations=self.iterations, lam=np.asarray(self.lam if self.lam else [np.nan] * 3),
                 **{f"bp{d}": b for d, b in enumerate(self.grid.breakpoints)}, **extra)

    @classmethod
    def load(cls, path) -> "PolicyTable":
        with np.load(path) as z:
            grid = StateGrid(tuple(z[f"bp{d}"] for d in range(len(GRID_DIMS))))
            lam = tuple(z["lam"].tolist())
            return cls(grid, z["op_index"], float(z["horizon"]),
                       controls=z["controls"] if "controls" in z else None,
                       op_indices=z["op_indices"] if "op_indices" in z else None,
                       value=z["value"] if "value" in z else None, iterations=int(z["iterations"]),
                       lam=None if any(math.isnan(v) for v in lam) else lam)

    def to_csv(self, path, engine_map: EngineMap, header: str = "") -> None:
        nodes = self.grid.nodes()
        with open(path, "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(GRID_DIMS) + ["op_index", "speed_rpm", "bmep_bar", "sa_cabtdc"])
            for x, op in zip(nodes, self.op_index):
                w.writerow([f"{v:g}" for v in x] + [int(op)] + [f"{v:g}" for v in engine_map[op].key])


def _stabilised_at(changes: list, window: int):
    """First iteration after which the policy stayed fixed for ``window`` iterations."""
    run = 0
    for k in range(len(changes) - 1, -1, -1):
        if changes[k]:
            break
        run += 1
    return len(changes) - run if run >= window else None


def solve_policy(model, grid: StateGrid, stabilization_window: int = 10, max_iter: int = 5000,
                 dt: float | None = None, callback=None) -> PolicyTable:
    """Undiscounted backward value iteration with policy-stabilisation stopping.

    ``model.transitions(grid)`` must return successor states ``(N, U, d)``
    and nonnegative stage costs ``(N, U)``. The value at successors is
    interpolated multilinearly with clamping, ties go to the lowest control
    index, and iteration stops once the greedy policy has been unchanged at
    every node for ``stabilization_window`` consecutive iterations.

    ``callback(k, V, policy)``, when given, sees every iterate.

    Raises
    ------
    PolicyError
        When no stabilisation happens within ``max_iter`` iterations.
    """
    if stabilization_window < 1:
        raise ValueError("stabilization_window must be at least 1")
    dt = float(dt if dt is not None else getattr(model, "dt", 1.0))
    if not dt > 0:
        raise ValueError("dt must be positive")
    succ, cost = model.transitions(grid)
    N, U = cost.shape
    if N != grid.node_count:
        raise ValueError("transition table does not match the grid")
    coords = grid.fractional_index(succ).reshape(N * U, grid.ndim).T.copy()
    V = np.zeros(grid.shape)
    policy = None
    changes: list = []
    unstable = N
    for k in range(1, max_iter + 1):
        cont = map_coordinates(V, coords, order=1, mode="nearest").reshape(N, U)
        Q = cost + cont
        new = np.argmin(Q, axis=1)
        V = Q[np.arange(N), new].reshape(grid.shape)
        if policy is not None:
            unstable = int(np.count_nonzero(new != policy))
            changes.append(unstable > 0)
        policy = new
        if callback is not None:
            callback(k, V, policy)
        at = _stabilised_at(changes, stabilization_window)
        if at is not None:
            # the final policy first appeared at iteration at + 1
            horizon = dt * (at + 1)
            log.info("policy stable after %d iterations (horizon %.1f s)", at, horizon)
            break
    else:
        raise PolicyError(f"policy not stable after {max_iter} iterations; "
                          f"{unstable} nodes changed in the last one")
    ops = getattr(model, "ops", np.arange(U))
    controls = model.controls if hasattr(model, "controls") else None
    lam = getattr(getattr(model, "lam", None), "values", None)
    return PolicyTable(grid, np.asarray(ops)[policy], horizon, controls=controls,
                       op_indices=np.asarray(ops), value=V.ravel(), iterations=k, lam=lam)


# -- closed loop -------------------------------------------------------------------


@dataclass
class PolicyRun:
    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    requested_op: np.ndarray
    setpoint: np.ndarray
    bsfc: np.ndarray
    fuel_rate: np.ndarray
    mdot: np.ndarray
    engine_out: np.ndarray
    midbrick: np.ndarray
    tailpipe: np.ndarray
    cumulative_mg: dict = field(default_factory=dict)
    mean_bsfc: float = float("nan")
    fuel_g: float = 0.0

    def weighted_emissions(self, weights) -> float:
        """``weights . cumulative tailpipe`` with masses in g."""
        m = np.array([self.cumulative_mg[s] for s in ("CO", "NOx", "THC")]) * 1e-3
        return float(np.asarray(weights, float) @ m)


def _summarise(t, x1, x2, req, sp, bsfc, fuel, mdot, eo, mid, tp, dt) -> PolicyRun:
    arr = lambda v, w: np.array(v) if len(v) else np.zeros((0,) + w)  # noqa: E731
    tp_a = arr(tp, (4,))
    cum = tp_a.sum(axis=0) * dt * 1e6 if len(tp) else np.zeros(4)
    bs = np.array(bsfc)
    return PolicyRun(
        t=np.array(t), x1=arr(x1, (4,)), x2=arr(x2, (2,)), requested_op=np.array(req, dtype=int),
        setpoint=arr(sp, (3,)), bsfc=bs, fuel_rate=np.array(fuel), mdot=np.array(mdot),
        engine_out=arr(eo, (4,)),
        midbrick=arr(mid, (4,)), tailpipe=tp_a,
        cumulative_mg={"CO": float(cum[0]), "NOx": float(cum[1]), "THC": float(cum[2])},
        mean_bsfc=float(bs.mean()) if bs.size else float("nan"),
        fuel_g=float(np.sum(fuel) * dt),
    )


def simulate_controller(system: TWCSystem, engine_map: EngineMap, choose, x1_0, x2_0,
                        duration: float = 145.0, dt: float = 0.1, filter_window: float | None = 5.0) -> PolicyRun:
    """Closed-loop simulation with ``choose(k, t, x1, x2) -> op index``.

    With a filter window the requested (speed, bmep, sa) is rolling-averaged
    and the plant is fed the interpolated map outputs at the filtered setpoint.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    K = int(round(duration / dt))
    x1 = np.asarray(x1_0, dtype=float).copy()
    x2 = np.asarray(x2_0, dtype=float).copy()
    filt = RollingFilter(dt, filter_window) if filter_window else None
    rec = [[] for _ in range(11)]
    cache: dict = {}
    for k in range(K):
        t = k * dt
        op = int(choose(k, t, x1, x2))
        key = np.array(engine_map[op].key, dtype=float)
        sp = filt(key) if filt is not None else key
        ck = tuple(sp)
        if ck not in cache:
            point = interpolate_setpoint(engine_map, *sp) if filt is not None else engine_map[op]
            cache.clear()
            cache[ck] = (point, system.plant_input(point.engine_input(op)))
        point, u = cache[ck]
        nx1, nx2, out = system.step(x1, x2, u, dt, outputs=True)
        for lst, v in zip(rec, (t, x1, x2, op, sp, point.bsfc_g_per_kWh, point.fuel_g_per_s,
                                point.mdot_exh_kg_per_s, u.engine_out, out.midbrick, out.tailpipe)):
            lst.append(v)
        x1, x2 = nx1, nx2
    return _summarise(*rec, dt)


def simulate_policy(policy: PolicyTable, system: TWCSystem, engine_map: EngineMap, x1_0=None, x2_0=None,
                    duration: float = 145.0, dt: float = 0.1, filter_window: float | None = 5.0) -> PolicyRun:
    """Run the plant under a policy table from the given (default ambient) state."""
    d1, d2 = system.initial_state()
    x1_0 = d1 if x1_0 is None else x1_0
    x2_0 = d2 if x2_0 is None else x2_0
    choose = lambda k, t, x1, x2: policy.query(x1, x2, engine_map)[0]  # noqa: E731
    return simulate_controller(system, engine_map, choose, x1_0, x2_0, duration, dt, filter_window)


def simulate_suboptimal(controller: SuboptimalController, system: TWCSystem, x1_0=None, x2_0=None,
                        duration: float = 145.0, dt: float = 0.1) -> PolicyRun:
    d1, d2 = system.initial_state()
    x1_0 = d1 if x1_0 is None else x1_0
    x2_0 = d2 if x2_0 is None else x2_0
    choose = lambda k, t, x1, x2: controller.op_index(t)  # noqa: E731
    return simulate_controller(system, controller.engine_map, choose, x1_0, x2_0, duration, dt, None)


def tune_switch_time(engine_map: EngineMap, heat_op_index: int, target_bsfc: float, duration: float,
                     dt: float = 0.1, tol: float = 0.5) -> float:
    """Bisect the suboptimal switch time so its mean BSFC matches ``target_bsfc``."""
    ctrl = SuboptimalController(engine_map, heat_op_index, 0.0)
    bsfc = engine_map.bsfc

    def mean_bsfc(tp):
        ctrl.t_prime = tp
        return float(bsfc[ctrl.schedule(duration, dt)].mean())

    lo, hi = 0.0, duration
    f_lo, f_hi = mean_bsfc(lo), mean_bsfc(hi)
    if not min(f_lo, f_hi) - tol <= target_bsfc <= max(f_lo, f_hi) + tol:
        raise ValueError(f"target BSFC {target_bsfc:.2f} outside [{f_lo:.2f}, {f_hi:.2f}]")
    rising = f_hi >= f_lo
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        f = mean_bsfc(mid)
        if abs(f - target_bsfc) <= tol:
            return mid
        if (f < target_bsfc) == rising:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- compression and packing -----------------------------------------------------------


def compressed_states(t1_grid, grid: StateGrid) -> np.ndarray:
    """Enumerate the stored states in ascending lexicographic order.

    TWC1's second and third temperatures may not exceed the first (rounded
    up to the second dimension's grid) and the second, respectively.
    """
    t1_grid = np.asarray(t1_grid, dtype=float)
    t2 = grid.breakpoints[1]
    rows = []
    rest = np.stack(np.meshgrid(*grid.breakpoints[3:], indexing="ij"), -1).reshape(-1, 3)
    for v in t1_grid:
        cap = t2[min(np.searchsorted(t2, v - 1e-9), len(t2) - 1)]
        for a in t2[t2 <= cap]:
            for b in grid.breakpoints[2][grid.breakpoints[2] <= a]:
                head = np.broadcast_to([v, a, b], (len(rest), 3))
                rows.append(np.hstack([head, rest]))
    return np.vstack(rows) if rows else np.zeros((0, 6))


@dataclass
class CompressedPolicy:
    """Monotone-constrained subset of a policy table."""

    t1_grid: np.ndarray
    grid: StateGrid
    states: np.ndarray
    op_index: np.ndarray

    @property
    def count(self) -> int:
        return len(self.op_index)

    @property
    def packed_payload_bytes(self) -> int:
        return payload_bytes(self.count)


def compress_table(policy: PolicyTable, reduced_t1_grid=REDUCED_T1) -> CompressedPolicy:
    states = compressed_states(reduced_t1_grid, policy.grid)
    ops = policy.op_index[policy.grid.nearest_node(states)]
    return CompressedPolicy(np.asarray(reduced_t1_grid, float), policy.grid, states, ops)


def payload_bytes(count: int) -> int:
    return (12 * int(count) + 7) // 8


def pack_codes(codes) -> bytes:
    """Pack 12-bit codes LSB-first into a little-endian byte stream."""
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < 0 or c.max() > 0xFFF):
        raise PackingError("codes must fit in 12 bits")
    n = c.size
    if n % 2:
        c = np.append(c, 0)
    pair = c[0::2] | (c[1::2] << 12)
    out = np.stack([pair & 0xFF, (pair >> 8) & 0xFF, (pair >> 16) & 0xFF], axis=1).astype(np.uint8)
    return out.tobytes()[: payload_bytes(n)]


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    if len(data) < payload_bytes(count):
        raise PackingError("payload too short")
    buf = np.frombuffer(bytes(data[: payload_bytes(count)]) + b"\x00", dtype=np.uint8).astype(np.int64)
    bit = 12 * np.arange(count)
    byte = bit // 8
    word = buf[byte] | (buf[byte + 1] << 8)
    return (word >> (bit % 8)) & 0xFFF


def _value_tables(engine_map: EngineMap, ops):
    keys = np.array([engine_map[int(i)].key for i in ops]).reshape(-1, 3)
    tables = [np.unique(keys[:, c]) for c in range(3)]
    for name, t in zip(("speed", "bmep", "spark angle"), tables):
        if len(t) > 16:
            raise PackingError(f"{len(t)} distinct {name} values exceed the 4-bit index")
    return keys, tables


def encode(keys, tables) -> np.ndarray:
    idx = [np.searchsorted(tables[c], keys[:, c]) for c in range(3)]
    return idx[0] | (idx[1] << 4) | (idx[2] << 8)


def pack_policy(compressed: CompressedPolicy, engine_map: EngineMap, provenance: str = "") -> bytes:
    """Binary export: header followed by one 12-bit code per stored state."""
    keys, tables = _value_tables(engine_map, compressed.op_index)
    head = [MAGIC, struct.pack("<HB", FORMAT_VERSION, len(GRID_DIMS))]
    dims = (compressed.t1_grid,) + compressed.grid.breakpoints[1:]
    for b in dims:
        head.append(struct.pack("<H", len(b)) + np.asarray(b, "<f4").tobytes())
    for t in tables:
        head.append(struct.pack("<B", len(t)) + np.asarray(t, "<f4").tobytes())
    prov = provenance.encode()
    head.append(struct.pack("<IH", compressed.count, len(prov)) + prov)
    return b"".join(head) + pack_codes(encode(keys, tables))


@dataclass
class PackedPolicy:
    dims: tuple
    tables: tuple
    count: int
    provenance: str
    payload: bytes
    header_bytes: int

    @classmethod
    def parse(cls, data: bytes) -> "PackedPolicy":
        if data[:4] != MAGIC:
            raise PackingError("not a packed policy (bad magic)")
        version, ndim = struct.unpack_from("<HB", data, 4)
        if version != FORMAT_VERSION:
            raise PackingError(f"unsupported format version {version}")
        pos = 7
        dims = []
        for _ in range(ndim):
            (n,) = struct.unpack_from("<H", data, pos)
            dims.append(np.frombuffer(data, "<f4", n, pos + 2).astype(float))
            pos += 2 + 4 * n
        tables = []
        for _ in range(3):
            (n,) = struct.unpack_from("<B", data, pos)
            tables.append(np.frombuffer(data, "<f4", n, pos + 1).astype(float))
            pos += 1 + 4 * n
        count, plen = struct.unpack_from("<IH", data, pos)
        pos += 6
        prov = data[pos:pos + plen].decode()
        pos += plen
        payload = data[pos:]
        if len(payload) != payload_bytes(count):
            raise PackingError(f"payload has {len(payload)} bytes, expected {payload_bytes(count)}")
        return cls(tuple(dims), tuple(tables), count, prov, payload, pos)

    def rank(self, state) -> int:
        """Position of the stored state nearest to ``state`` (6 values)."""
        t1, t2, t3, d1, t1b, d2 = self.dims
        near = lambda b, v: int(np.argmin(np.abs(b - v)))  # noqa: E731
        s = np.asarray(state, dtype=float)
        i1 = near(t1, s[0])
        cap = min(int(np.searchsorted(t2, t1[i1] - 1e-6)), len(t2) - 1)
        i2 = min(near(t2, s[1]), cap)
        i3 = min(near(t3, s[2]), i2)
        block = len(d1) * len(t1b) * len(d2)
        caps = [min(int(np.searchsorted(t2, v - 1e-6)), len(t2) - 1) for v in t1[:i1]]
        offset = sum((j + 1) * (j + 2) // 2 for j in caps) * block
        pair = i2 * (i2 + 1) // 2 + i3
        tail = (near(d1, s[3]) * len(t1b) + near(t1b, s[4])) * len(d2) + near(d2, s[5])
        return offset + pair * block + tail

    def code_at(self, rank: int) -> int:
        bit = 12 * rank
        b = bit // 8
        word = self.payload[b] | ((self.payload[b + 1] if b + 1 < len(self.payload) else 0) << 8)
        return (word >> (bit % 8)) & 0xFFF

    def query(self, state) -> tuple:
        code = self.code_at(self.rank(state))
        return tuple(float(self.tables[c][(code >> (4 * c)) & 0xF]) for c in range(3))


def unpack_policy(data: bytes) -> PackedPolicy:
    return PackedPolicy.parse(data)


def query_packed(data: bytes, state) -> tuple:
    """(speed, bmep, sa) stored for the state nearest to ``state``."""
    return PackedPolicy.parse(data).query(state)


# -- estimator wrapper ----------------------------------------------------------------


class ColdStartController(BaseEstimator):
    """Solve a heating policy for a two-brick system and engine map.

    Parameters
    ----------
    lam_n : sequence of float
        Normalised emission weights (CO, NOx, THC).
    grid : grid spec accepted by :func:`build_grid`
    dt : float
        Decision interval in s.
    n_channels : int
    op_indices : sequence of int, optional
    """

    def __init__(self, lam_n=(1.0, 1.0, 1.0), grid=None, dt=1.0, substeps=4, n_channels=10,
                 op_indices=None, stabilization_window=10, max_iter=5000, specs=None):
        self.lam_n = lam_n
        self.grid = grid
        self.dt = dt
        self.substeps = substeps
        self.n_channels = n_channels
        self.op_indices = op_indices
        self.stabilization_window = stabilization_window
        self.max_iter = max_iter
        self.specs = specs

    def fit(self, engine_map: EngineMap, y=None):
        specs = self.specs or reference_system()
        system = TWCSystem(specs[0], specs[1], n_channels=self.n_channels)
        lam = LambdaWeights.from_normalized(self.lam_n, engine_map)
        self.problem_ = TWCControlProblem(system, engine_map, lam, self.dt, self.substeps, self.op_indices)
        self.policy_ = solve_policy(self.problem_, build_grid(self.grid), self.stabilization_window,
                                    self.max_iter)
        self.engine_map_ = engine_map
        return self

    def predict(self, X) -> np.ndarray:
        """Op index for each joint state row ``(T1, T2, T3, dT, T1', dT')``."""
        check_is_fitted(self, "policy_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self.policy_.query(x[:4], x[4:], self.engine_map_)[0] for x in X])

    def simulate(self, x1_0=None, x2_0=None, duration: float = 145.0, dt: float = 0.1, **kw) -> PolicyRun:
        check_is_fitted(self, "policy_")
        return simulate_policy(self.policy_, self.problem_.system, self.engine_map_, x1_0, x2_0,
                               duration, dt, **kw)
