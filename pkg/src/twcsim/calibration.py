"""Parameter tuning against measured cold-start time series.

Reaction-rate parameters are fitted first, with the kinetics driven by the
measured brick temperatures. The thermal parameters are fitted afterwards by
full simulation with those kinetics in place.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import SPECIES, GasConstants, KineticParams, MonolithSpec
from .kinetics import P_AMBIENT_PA, chain_cells
from .radialprofile import FLAT_PROFILE, channel_massflow_weights, channel_radii, get_library
from .thermal import IntegrationError, PlantInput, TWCSystem

log = logging.getLogger(__name__)

MEASURED = ("CO", "NOx", "THC")
A_BOUNDS = (1e4, 1e13)
EA_BOUNDS = (20e3, 150e3)
K_BOUNDS = (0.01, 1000.0)
CP_BOUNDS = (500.0, 4000.0)
INITIAL_SLICES_MM = (20.0, 102.0, 20.0)

RUN_COLUMNS = (
    "t_s", "op_index", "t_exh_c", "mdot_exh_g_per_s",
    "twc1_t1_c", "twc1_t2_c", "twc1_t3_c", "twc1_dt_c", "twc2_t1_c", "twc2_dt_c",
    "eo_co_mg_per_s", "eo_nox_mg_per_s", "eo_thc_mg_per_s", "eo_h2_mg_per_s",
    "mid_co_mg_per_s", "mid_nox_mg_per_s", "mid_thc_mg_per_s",
    "tp_co_mg_per_s", "tp_nox_mg_per_s", "tp_thc_mg_per_s",
)


class DataError(ValueError):
    """Malformed or missing measurement data."""


@dataclass(frozen=True)
class DatasetSplit:
    train_indices: tuple = (1, 3, 5, 7, 9)
    valid_indices: tuple = (2, 4, 6, 8, 10)

    def __post_init__(self):
        if set(self.train_indices) & set(self.valid_indices):
            raise ValueError("train and validation indices overlap")


@dataclass
class ColdStartRun:
    """One measured cold start at a fixed load point.

    Flows are in kg/s; ``midbrick`` and ``tailpipe`` hold CO, NOx and THC.
    The mid-brick flow is the whole-stream equivalent of the probe reading
    on the radial centre line behind the first brick.
    """

    op_index: int
    t: np.ndarray
    twc1_state: np.ndarray
    twc2_state: np.ndarray
    engine_out: np.ndarray
    midbrick: np.ndarray
    tailpipe: np.ndarray
    T_exh: np.ndarray
    mdot: np.ndarray
    load_point: int = 0
    profile_index: int = FLAT_PROFILE

    def __post_init__(self):
        n = len(self.t)
        for name in ("twc1_state", "twc2_state", "engine_out", "midbrick", "tailpipe", "T_exh", "mdot"):
            if len(getattr(self, name)) != n:
                raise DataError(f"series {name} has length {len(getattr(self, name))}, expected {n}")
        if n > 1:
            steps = np.diff(self.t)
            if np.max(np.abs(steps - steps[0])) > 1e-6:
                raise DataError("time series is not uniformly sampled")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self):
        return len(self.t)


# -- run files -----------------------------------------------------------------


def save_run(path, run: ColdStartRun, header: str = "") -> None:
    mg = 1e6
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for k in range(len(run)):
            row = [run.t[k], run.op_index, run.T_exh[k], run.mdot[k] * 1e3]
            row += list(run.twc1_state[k]) + list(run.twc2_state[k])
            row += list(run.engine_out[k] * mg) + list(run.midbrick[k] * mg) + list(run.tailpipe[k] * mg)
            w.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in row])


def load_run(path, load_point: int = 0) -> ColdStartRun:
    source = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{source}: {exc}") from None
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{source}: empty run file")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader)
    missing = [c for c in RUN_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{source}: missing columns {missing}")
    try:
        data = np.array([[float(v) for v in row] for row in reader])
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None
    if data.size == 0:
        raise DataError(f"{source}: no samples")
    col = {c: data[:, header.index(c)] for c in RUN_COLUMNS}
    mg = 1e-6
    stack = lambda names, s=1.0: np.stack([col[c] * s for c in names], axis=1)  # noqa: E731
    ops = np.unique(col["op_index"])
    if len(ops) != 1:
        raise DataError(f"{source}: op_index must be constant within a run")
    return ColdStartRun(
        op_index=int(ops[0]), t=col["t_s"],
        twc1_state=stack(["twc1_t1_c", "twc1_t2_c", "twc1_t3_c", "twc1_dt_c"]),
        twc2_state=stack(["twc2_t1_c", "twc2_dt_c"]),
        engine_out=stack(["eo_co_mg_per_s", "eo_nox_mg_per_s", "eo_thc_mg_per_s", "eo_h2_mg_per_s"], mg),
        midbrick=stack(["mid_co_mg_per_s", "mid_nox_mg_per_s", "mid_thc_mg_per_s"], mg),
        tailpipe=stack(["tp_co_mg_per_s", "tp_nox_mg_per_s", "tp_thc_mg_per_s"], mg),
        T_exh=col["t_exh_c"], mdot=col["mdot_exh_g_per_s"] * 1e-3, load_point=load_point,
    )


# -- preprocessing -----------------------------------------------------------------


def preprocess_measurements(series, dt: float, delay: float = 0.0, hp_time_constant: float = 0.0):
    """Undo analyser transport delay and first-order dispersion.

    The series is shifted earlier by ``delay`` (nearest sample, last value
    held at the end), then sharpened with the lead correction
    ``y + tau dy/dt`` and clamped at zero.
    """
    y = np.asarray(series, dtype=float)
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    shift = int(round(delay / dt))
    if shift >= len(y):
        raise ValueError(f"delay of {delay} s exceeds the series length")
    if shift:
        y = np.concatenate([y[shift:], np.repeat(y[-1:], shift, axis=0)])
    if hp_time_constant > 0:
        y = y + hp_time_constant * np.gradient(y, dt, axis=0)
        y = np.maximum(y, 0.0)
    return y


def apply_instrument(series, dt: float, delay: float, tau: float):
    """Forward model of :func:`preprocess_measurements`: lag then delay."""
    y = np.asarray(series, dtype=float).copy()
    if tau > 0:
        a = dt / (tau + dt)
        for k in range(1, len(y)):
            y[k] = y[k - 1] + a * (y[k] - y[k - 1])
    shift = int(round(delay / dt))
    if shift:
        y = np.concatenate([np.repeat(y[:1], shift, axis=0), y[:-shift]])
    return y


def preprocess_run(run: ColdStartRun, delay: float, tau: float) -> ColdStartRun:
    dt = run.dt
    return replace(
        run,
        midbrick=preprocess_measurements(run.midbrick, dt, delay, tau),
        tailpipe=preprocess_measurements(run.tailpipe, dt, delay, tau),
    )


# -- pattern search -----------------------------------------------------------------


_EXTRAPOLATION = np.array([1.0, 2.0, 4.0, 8.0])


@dataclass
class SearchResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    mesh: float
    history: list = field(default_factory=list)


def pattern_search(objective: Callable | None, x0, lower, upper, log_scale=None, *,
                   batch_objective: Callable | None = None, poll: str = "mads",
                   initial_mesh: float = 0.1, mesh_tol: float = 1e-6, max_iter: int = 500,
                   max_evals: int = 20000, seed: int = 0, search_step: bool = True) -> SearchResult:
    """Derivative-free bounded minimisation by mesh-adaptive polling.

    Every iteration polls the ``2n`` points ``x +- mesh * d_i`` of a
    positive basis in bounds-normalised coordinates, moves to the best
    improving point and doubles the mesh, or halves it when nothing
    improved.

    Parameters
    ----------
    objective : callable
        ``f(x) -> float``. May be ``None`` when ``batch_objective`` is given.
    log_scale : sequence of bool, optional
        Coordinates searched in log space.
    batch_objective : callable, optional
        ``g(X) -> values`` for a stack of points; used for the polls.
    poll : {"mads", "gps"}
        Random orthonormal basis redrawn every iteration, or the fixed
        coordinate basis.
    search_step : bool
        After a successful poll, keep extrapolating along the accepted step
        (1, 2, 4 or 8 times its length) while that improves.
    """
    x0 = np.asarray(x0, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    n = x0.size
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("x0 must lie within the bounds")
    logs = np.zeros(n, bool) if log_scale is None else np.asarray(log_scale, bool)
    if np.any(logs & (lo <= 0)):
        raise ValueError("log-scaled coordinates need positive bounds")
    a = np.where(logs, np.log(np.where(logs, lo, 1.0)), lo)
    b = np.where(logs, np.log(np.where(logs, hi, 1.0)), hi)
    span = np.where(b > a, b - a, 1.0)

    def to_x(z):
        u = a + np.clip(z, 0.0, 1.0) * span
        u[logs] = np.exp(u[logs])
        return u

    if batch_objective is None:
        batch_objective = lambda X: np.array([objective(x) for x in X])  # noqa: E731

    def evaluate(Z):
        vals = np.asarray(batch_objective(np.array([to_x(z) for z in Z])), dtype=float)
        return np.where(np.isfinite(vals), vals, np.inf)

    z = (np.where(logs, np.log(np.where(logs, np.maximum(x0, 1e-300), 1.0)), x0) - a) / span
    z = np.clip(z, 0.0, 1.0)
    f0 = float(objective(x0) if objective is not None else batch_objective(x0[None])[0])
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    rng = np.random.default_rng(seed)
    fbest, mesh, evals, it = f0, float(initial_mesh), 1, 0
    history = [fbest]
    while it < max_iter and mesh >= mesh_tol and evals < max_evals:
        it += 1
        if poll == "gps":
            basis = np.eye(n)
        else:
            basis, _ = np.linalg.qr(rng.standard_normal((n, n)))
        dirs = np.vstack([basis.T, -basis.T])
        cand = np.clip(z + mesh * dirs, 0.0, 1.0)
        vals = evaluate(cand)
        evals += len(cand)
        j = int(np.argmin(vals))
        if vals[j] < fbest:
            step = cand[j] - z
            z, fbest = cand[j], float(vals[j])
            mesh = min(2.0 * mesh, 0.5)
            if search_step:
                # ride along the successful direction (narrow valleys)
                while evals < max_evals:
                    ext = np.clip(z + step[None] * _EXTRAPOLATION[:, None], 0.0, 1.0)
                    ev = evaluate(ext)
                    evals += len(ext)
                    i = int(np.argmin(ev))
                    if not ev[i] < fbest:
                        break
                    step = ext[i] - z
                    z, fbest = ext[i], float(ev[i])
        else:
            mesh *= 0.5
        history.append(fbest)
    return SearchResult(to_x(z) if fbest < f0 else x0.copy(), fbest, it, evals, mesh, history)


# -- kinetics stage -----------------------------------------------------------------


def _central_temps(state, profile_index: int, M: int) -> np.ndarray:
    """Temperatures of the centre channel for a measured state series."""
    g0 = get_library().shape_factors(profile_index, channel_radii(M)[:1])[0]
    return state[:, :-1] + state[:, -1:] * g0


def _midbrick_prediction(A, Ea, run: ColdStartRun, spec: MonolithSpec, M: int,
                         consts: GasConstants, p_twc: float):
    """Centre-channel outflow as whole-stream flow, shape ``(..., K, 4)``."""
    g = spec.geometry
    T = _central_temps(run.twc1_state, run.profile_index, M)[:, None, :]
    w0 = channel_massflow_weights(M)[:1]
    A = np.asarray(A, float)[..., None, :]
    Ea = np.asarray(Ea, float)[..., None, :]
    out, _ = chain_cells(T, run.engine_out, w0, A, Ea, g.slice_lengths_m, g.ofa * g.frontal_area_m2,
                         run.mdot, consts, p_twc)
    return out[..., 0, :] / w0[0]


def kinetics_objective(params: KineticParams, runs: Sequence[ColdStartRun], spec: MonolithSpec,
                       n_channels: int = 100, consts: GasConstants | None = None,
                       p_twc: float = P_AMBIENT_PA, species=MEASURED) -> float:
    """Sum of absolute mid-brick flow errors in mg/s over runs, samples and species.

    The kinetics are driven by the measured first-brick temperatures.
    """
    consts = consts or GasConstants()
    idx = [SPECIES.index(s) for s in species]
    total = 0.0
    for run in runs:
        pred = _midbrick_prediction(params.A, params.Ea, run, spec, n_channels, consts, p_twc)
        meas = run.midbrick[:, [MEASURED.index(s) for s in species]]
        total += float(np.abs(pred[:, idx] - meas).sum()) * 1e6
    return total


def scale_twc2_kinetics(params_twc1: KineticParams, washcoat_thickness_ratio: float,
                        loading_ratio: float) -> KineticParams:
    """Scale pre-exponential factors by the relative amount of active material."""
    if washcoat_thickness_ratio <= 0 or loading_ratio <= 0:
        raise ValueError("ratios must be positive")
    f = washcoat_thickness_ratio * loading_ratio
    A = {s: v * f for s, v in params_twc1.pre_exponential_A.items()}
    out = KineticParams(A, dict(params_twc1.activation_energy_J_per_mol))
    assert out.activation_energy_J_per_mol == params_twc1.activation_energy_J_per_mol
    return out


def _species_objective(s: str, runs, spec, M, consts, p_twc):
    i = SPECIES.index(s)
    j = MEASURED.index(s)

    def batch(X):
        X = np.atleast_2d(X)
        A = np.ones((len(X), 4))
        Ea = np.ones((len(X), 4))
        A[:, i], Ea[:, i] = X[:, 0], X[:, 1]
        total = np.zeros(len(X))
        for run in runs:
            pred = _midbrick_prediction(A, Ea, run, spec, M, consts, p_twc)[..., i]
            total += np.abs(pred - run.midbrick[:, j]).sum(axis=-1) * 1e6
        return total

    return batch


def calibrate_kinetics(spec: MonolithSpec, runs: Sequence[ColdStartRun], initial: KineticParams | None = None,
                       n_channels: int = 100, consts: GasConstants | None = None,
                       p_twc: float = P_AMBIENT_PA, fit_slices: bool = False, **search) -> tuple[KineticParams, dict]:
    """Fit ``(A, E_a)`` of CO, NOx and THC one species at a time.

    Each species' centre-channel outflow depends only on its own pair, so
    the summed objective separates into independent 2-D searches.

    With ``fit_slices`` the slice lengths, which set the residence time of
    every cell, are searched afterwards. Each candidate set is scored by
    refitting all pairs on every second sample. The fitted lengths are
    returned in ``report["slice_lengths_m"]``.
    """
    consts = consts or GasConstants()
    params = initial or spec.kinetics
    report = {}
    for s in MEASURED:
        f = _species_objective(s, runs, spec, n_channels, consts, p_twc)
        x0 = np.clip([params.pre_exponential_A[s], params.activation_energy_J_per_mol[s]],
                     [A_BOUNDS[0], EA_BOUNDS[0]], [A_BOUNDS[1], EA_BOUNDS[1]])
        res = pattern_search(None, x0, [A_BOUNDS[0], EA_BOUNDS[0]], [A_BOUNDS[1], EA_BOUNDS[1]],
                             log_scale=[True, False], batch_objective=f, **search)
        params = params.replace(s, A=float(res.x[0]), Ea=float(res.x[1]))
        report[s] = {"objective": res.fun, "iterations": res.iterations, "evaluations": res.evaluations}
    if fit_slices and spec.geometry.n_slices > 1:
        params, report["joint"] = _joint_slice_fit(params, spec, runs, n_channels, consts, p_twc, **search)
        report["slice_lengths_m"] = report["joint"].pop("slice_lengths_m")
    return params, report


def _thin(run: ColdStartRun, k: int) -> ColdStartRun:
    if k == 1:
        return run
    names = ("t", "twc1_state", "twc2_state", "engine_out", "midbrick", "tailpipe", "T_exh", "mdot")
    return replace(run, **{n: getattr(run, n)[::k] for n in names})


def _fit_pairs(params, spec, runs, M, consts, p_twc, scale=None, **search):
    lo, hi = [A_BOUNDS[0], EA_BOUNDS[0]], [A_BOUNDS[1], EA_BOUNDS[1]]
    total = 0.0
    for s in MEASURED:
        f = _species_objective(s, runs, spec, M, consts, p_twc)
        x0 = np.clip([params.pre_exponential_A[s], params.activation_energy_J_per_mol[s]], lo, hi)
        res = pattern_search(None, x0, lo, hi, log_scale=[True, False], batch_objective=f, **search)
        params = params.replace(s, A=float(res.x[0]), Ea=float(res.x[1]))
        total += res.fun / (scale[s] if scale else 1.0)
    return params, total


def _joint_slice_fit(params: KineticParams, spec: MonolithSpec, runs, M, consts, p_twc,
                     stride: int = 2, **search):
    """Outer search over slice lengths, each candidate scored by refitted per-species kinetics."""
    L = spec.geometry.length_total_m
    n_free = spec.geometry.n_slices - 1
    coarse = [_thin(r, stride) for r in runs]
    inner = {**search, "initial_mesh": 0.02, "mesh_tol": 1e-4}

    def with_head(head):
        return replace(spec, geometry=spec.geometry.with_slices(list(head) + [L - sum(head)]))

    head0 = np.asarray(spec.geometry.slice_lengths_m[:-1], float)
    scale = {s: max(_species_objective(s, coarse, spec, M, consts, p_twc)(
        [[params.pre_exponential_A[s], params.activation_energy_J_per_mol[s]]])[0], 1e-300) for s in MEASURED}
    best = {"params": params, "f": np.inf}

    def outer(head):
        if L - np.sum(head) < 0.1 * L:
            return np.inf
        p, f = _fit_pairs(best["params"], with_head(head), coarse, M, consts, p_twc, scale, **inner)
        if f < best["f"]:
            best.update(params=p, f=f)
        return f

    res = pattern_search(outer, head0, [0.1 * L] * n_free, [0.8 * L] * n_free,
                         **{"mesh_tol": 1e-3, **search})
    final = with_head(res.x)
    params, f = _fit_pairs(best["params"], final, runs, M, consts, p_twc, **search)
    return params, {"objective": res.fun, "iterations": res.iterations, "evaluations": res.evaluations,
                    "slice_lengths_m": final.geometry.slice_lengths_m}


def _tailpipe_prediction(ratio, s_index, twc1: MonolithSpec, twc2: MonolithSpec, run, M, consts, p_twc):
    """Total tailpipe flow for TWC2 activity ratios ``ratio`` (...,)."""
    lib = get_library()
    g = lib.shape_factors(run.profile_index, channel_radii(M))
    w = channel_massflow_weights(M)
    T1 = run.twc1_state[:, None, :-1] + run.twc1_state[:, -1, None, None] * g[:, None]
    g1 = twc1.geometry
    out1, _ = chain_cells(T1, run.engine_out, w, twc1.kinetics.A, twc1.kinetics.Ea, g1.slice_lengths_m,
                          g1.ofa * g1.frontal_area_m2, run.mdot, consts, p_twc)
    inlet2 = out1.sum(axis=-2)[:, s_index]
    T2 = run.twc2_state[:, None, :-1] + run.twc2_state[:, -1, None, None] * g[:, None]
    g2 = twc2.geometry
    A = twc1.kinetics.A[s_index] * np.asarray(ratio, float)[..., None, None, None]
    Ea = twc1.kinetics.Ea[s_index]
    t_r_num = g2.ofa * g2.frontal_area_m2 * np.asarray(g2.slice_lengths_m) * p_twc
    T_K = T2 + 273.15
    k = A * np.exp(-Ea / (consts.R_universal_J_per_molK * T_K))
    t_r = t_r_num / (run.mdot[:, None, None] * consts.R_specific_exh_J_per_kgK * T_K)
    frac = np.exp(-(k * t_r).sum(axis=-1))
    return (inlet2[:, None] * w * frac).sum(axis=-1)


def calibrate_twc2_ratio(twc1: MonolithSpec, twc2: MonolithSpec, runs, n_channels=100,
                         consts: GasConstants | None = None, p_twc: float = P_AMBIENT_PA,
                         **search) -> tuple[KineticParams, dict]:
    """Fit the second brick's activity relative to the first, per species."""
    consts = consts or GasConstants()
    A = dict(twc2.kinetics.pre_exponential_A)
    report = {}
    for s in MEASURED:
        i, j = SPECIES.index(s), MEASURED.index(s)

        def batch(X, i=i, j=j):
            tot = np.zeros(len(X))
            for run in runs:
                pred = _tailpipe_prediction(X[:, 0], i, twc1, twc2, run, n_channels, consts, p_twc)
                tot += np.abs(pred - run.tailpipe[:, j]).sum(axis=-1) * 1e6
            return tot

        r0 = np.clip(twc2.kinetics.pre_exponential_A[s] / twc1.kinetics.pre_exponential_A[s], 1e-4, 10.0)
        res = pattern_search(None, [r0], [1e-4], [10.0], log_scale=[True], batch_objective=batch, **search)
        A[s] = float(res.x[0]) * twc1.kinetics.pre_exponential_A[s]
        report[s] = {"ratio": float(res.x[0]), "objective": res.fun}
    A["H2"] = A["CO"]
    return KineticParams(A, dict(twc1.kinetics.activation_energy_J_per_mol)), report


# -- thermal stage ----------------------------------------------------------------


def initial_slice_guess(length_total: float, n_slices: int = 3) -> tuple:
    """Slice lengths proportional to the 20/102/20 mm thermocouple spacing."""
    base = np.array(INITIAL_SLICES_MM if n_slices == 3 else [1.0] * n_slices)
    return tuple(base / base.sum() * length_total)


def _simulate_runs(system: TWCSystem, runs: Sequence[ColdStartRun], pack1=None, pack2=None, stride: int = 1):
    """Simulate many runs (and optionally many candidate packs) in one batch.

    Candidate parameters in the packs must have shape ``(C, 1)``. Returns
    state series shaped ``(..., R, K, n+1)`` for each brick, sampled every
    ``stride`` measurement samples (the integration step is ``stride * dt``).
    """
    R = len(runs)
    K = max(len(r) for r in runs)
    dt = runs[0].dt * stride
    pad = lambda a: np.concatenate([a, np.repeat(a[-1:], K - len(a), axis=0)])  # noqa: E731
    eo = np.stack([pad(r.engine_out) for r in runs], axis=1)
    T_exh = np.stack([pad(r.T_exh) for r in runs], axis=1)
    mdot = np.stack([pad(r.mdot) for r in runs], axis=1)
    shape = np.stack([system.shape_factors(r.profile_index) for r in runs])
    saved = system.pack1, system.pack2
    if pack1 is not None:
        system.pack1 = pack1
    if pack2 is not None:
        system.pack2 = pack2
    try:
        # candidate packs carry shape (C, 1) so they broadcast against the run axis
        batch = np.broadcast_shapes(np.shape(system.pack1.k_rad), np.shape(system.pack2.k_rad), (R,))
        x1 = np.broadcast_to(np.stack([r.twc1_state[0] for r in runs]), batch + (system.n1 + 1,)).copy()
        x2 = np.broadcast_to(np.stack([r.twc2_state[0] for r in runs]), batch + (system.n2 + 1,)).copy()
        steps = range(0, K, stride)
        out1 = np.empty((len(steps),) + x1.shape)
        out2 = np.empty((len(steps),) + x2.shape)
        for j, k in enumerate(steps):
            out1[j], out2[j] = x1, x2
            u = PlantInput(T_exh[k], mdot[k], eo[k], shape)
            x1, x2 = system.step(x1, x2, u, dt)
    finally:
        system.pack1, system.pack2 = saved
    return np.moveaxis(out1, 0, -2), np.moveaxis(out2, 0, -2)


def _state_error(sim, runs, which: str, stride: int = 1):
    tot = 0.0
    for r_i, run in enumerate(runs):
        meas = getattr(run, which)[::stride]
        tot = tot + np.abs(sim[..., r_i, : len(meas), :] - meas).sum(axis=(-1, -2))
    return tot


def thermal_objective(specs: Sequence[MonolithSpec], runs: Sequence[ColdStartRun], n_channels: int = 10,
                      kinetics_set: bool = True, consts: GasConstants | None = None) -> float:
    """Absolute state deviation summed over components, samples and runs.

    Raises if the kinetic parameters have not been calibrated first.
    """
    if not kinetics_set:
        raise RuntimeError("calibrate the reaction kinetics before the thermal parameters")
    system = TWCSystem(specs[0], specs[1], n_channels=n_channels, consts=consts)
    try:
        s1, s2 = _simulate_runs(system, runs)
    except IntegrationError as exc:
        raise IntegrationError(f"thermal simulation failed: {exc}", stage=exc.stage) from None
    return float(_state_error(s1, runs, "twc1_state") + _state_error(s2, runs, "twc2_state"))


def _twc1_thermal_vector(spec: MonolithSpec):
    th, g = spec.thermal, spec.geometry
    x = [th.k_ax_W_per_mK, th.k_rad_W_per_mK, th.k_amb_W_per_mK, th.cp_J_per_kgK]
    return np.array(x + list(g.slice_lengths_m[:-1]))


def _apply_twc1(spec: MonolithSpec, x) -> MonolithSpec:
    L = spec.geometry.length_total_m
    head = list(x[4:])
    th = replace(spec.thermal, k_ax_W_per_mK=x[0], k_rad_W_per_mK=x[1], k_amb_W_per_mK=x[2], cp_J_per_kgK=x[3])
    geom = spec.geometry.with_slices(head + [L - sum(head)]) if head else spec.geometry
    return replace(spec, thermal=th, geometry=geom)


def _one_by_one(batch, X):
    # one diverging candidate must not discard the rest of the poll
    if len(X) == 1:
        return np.array([np.inf])
    return np.concatenate([batch(x[None]) for x in X])


def calibrate_thermal(specs: Sequence[MonolithSpec], runs, n_channels: int = 10,
                      consts: GasConstants | None = None, kinetics_set: bool = True,
                      sample_stride: int = 1, fit_slices: bool = True, **search) -> tuple[tuple, dict]:
    """Fit conduction, heat loss, heat capacity and slice lengths.

    The first brick does not depend on the second, so it is tuned on its
    own states first and the second brick afterwards. With
    ``sample_stride > 1`` candidates are integrated with a coarser step and
    compared on every ``sample_stride``-th sample only. ``fit_slices=False``
    keeps the first brick's slice lengths as given.
    """
    if sample_stride < 1:
        raise ValueError("sample_stride must be at least 1")
    if not kinetics_set:
        raise RuntimeError("calibrate the reaction kinetics before the thermal parameters")
    twc1, twc2 = specs
    system = TWCSystem(twc1, twc2, n_channels=n_channels, consts=consts)
    L = twc1.geometry.length_total_m
    n_free = twc1.geometry.n_slices - 1 if fit_slices else 0
    x0 = _twc1_thermal_vector(twc1)[:4 + n_free]
    lo = np.array([K_BOUNDS[0]] * 3 + [CP_BOUNDS[0]] + [0.1 * L] * n_free)
    hi = np.array([K_BOUNDS[1]] * 3 + [CP_BOUNDS[1]] + [0.8 * L] * n_free)
    x0 = np.clip(x0, lo, hi)
    base1 = system.pack1

    def batch1(X):
        X = np.atleast_2d(X)
        last = L - X[:, 4:].sum(axis=1)
        ok = last >= 0.1 * L
        Ls = np.column_stack([X[:, 4:], last]) if n_free else np.tile(base1.slice_lengths, (len(X), 1))
        pack = base1.replace(k_ax=X[:, 0, None], k_rad=X[:, 1, None], k_amb=X[:, 2, None],
                             cp=X[:, 3, None], slice_lengths=np.where(ok[:, None], Ls, base1.slice_lengths)[:, None, :])
        try:
            s1, _ = _simulate_runs(system, runs, pack1=pack, stride=sample_stride)
        except IntegrationError:
            return _one_by_one(batch1, X)
        err = _state_error(s1, runs, "twc1_state", sample_stride)
        return np.where(ok & np.isfinite(err), err, np.inf)

    res1 = pattern_search(None, x0, lo, hi, batch_objective=batch1, **search)
    twc1 = _apply_twc1(twc1, res1.x)
    system = TWCSystem(twc1, twc2, n_channels=n_channels, consts=consts)
    base2 = system.pack2
    th2 = twc2.thermal
    x0b = np.array([th2.k_rad_W_per_mK, th2.k_amb_W_per_mK, th2.cp_J_per_kgK])
    lo2 = np.array([K_BOUNDS[0], K_BOUNDS[0], CP_BOUNDS[0]])
    hi2 = np.array([K_BOUNDS[1], K_BOUNDS[1], CP_BOUNDS[1]])

    def batch2(X):
        X = np.atleast_2d(X)
        pack = base2.replace(k_rad=X[:, 0, None], k_amb=X[:, 1, None], cp=X[:, 2, None])
        try:
            _, s2 = _simulate_runs(system, runs, pack2=pack, stride=sample_stride)
        except IntegrationError:
            return _one_by_one(batch2, X)
        err = _state_error(s2, runs, "twc2_state", sample_stride)
        return np.where(np.isfinite(err), err, np.inf)

    res2 = pattern_search(None, np.clip(x0b, lo2, hi2), lo2, hi2, batch_objective=batch2, **search)
    twc2 = replace(twc2, thermal=replace(th2, k_rad_W_per_mK=res2.x[0], k_amb_W_per_mK=res2.x[1],
                                         cp_J_per_kgK=res2.x[2]))
    report = {"twc1": {"objective": res1.fun, "iterations": res1.iterations},
              "twc2": {"objective": res2.fun, "iterations": res2.iterations}}
    return (twc1, twc2), report


# -- accuracy ---------------------------------------------------------------------


def cumulative_error(sim, meas):
    """Relative bag-emission error ``sum(sim) / sum(meas) - 1`` per species.

    Species with zero measured mass get ``nan``.
    """
    sim = np.asarray(sim, dtype=float)
    meas = np.asarray(meas, dtype=float)
    if sim.shape != meas.shape:
        raise ValueError("series must have equal shapes")
    s, m = sim.sum(axis=0), meas.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(m != 0, s / np.where(m != 0, m, 1.0) - 1.0, np.nan)


def accuracy_table(specs: Sequence[MonolithSpec], runs: Sequence[ColdStartRun], n_channels: int = 10,
                   consts: GasConstants | None = None) -> list[dict]:
    """Per-run cumulative tailpipe error of a full simulation."""
    system = TWCSystem(specs[0], specs[1], n_channels=n_channels, consts=consts)
    rows = []
    for run in runs:
        tp = []
        x1, x2 = run.twc1_state[0], run.twc2_state[0]
        shape = system.shape_factors(run.profile_index)
        for k in range(len(run)):
            u = PlantInput(run.T_exh[k], run.mdot[k], run.engine_out[k], shape)
            x1, x2, out = system.step(x1, x2, u, run.dt, outputs=True)
            tp.append(out.tailpipe[:3])
        d = cumulative_error(np.array(tp), run.tailpipe)
        rows.append({"load_point": run.load_point, "op_index": run.op_index,
                     **{f"delta_{s}": float(v) for s, v in zip(MEASURED, d)}})
    return rows


class TWCCalibrator(BaseEstimator):
    """Two-stage calibration of a two-brick system.

    Parameters
    ----------
    initial_specs : pair of MonolithSpec
        Starting point and fixed quantities (geometry, masses, OFA).
    n_channels_kinetics, n_channels_thermal : int
        Radial channel counts used by the two stages.
    kinetics_search, thermal_search : dict, optional
        Keyword options forwarded to :func:`pattern_search`.
    fit_thermal : bool
        Skip the thermal stage when False.
    slices_from : {"kinetics", "thermal"}
        Which stage estimates the first brick's slice lengths. Mid-brick
        emissions pin them far more tightly than the temperatures do.
    """

    def __init__(self, initial_specs=None, n_channels_kinetics=100, n_channels_thermal=10,
                 kinetics_search=None, thermal_search=None, fit_thermal=True, consts=None,
                 slices_from="kinetics"):
        self.initial_specs = initial_specs
        self.n_channels_kinetics = n_channels_kinetics
        self.n_channels_thermal = n_channels_thermal
        self.kinetics_search = kinetics_search
        self.thermal_search = thermal_search
        self.fit_thermal = fit_thermal
        self.consts = consts
        self.slices_from = slices_from

    def fit(self, runs, y=None):
        if not runs:
            raise DataError("no training runs")
        if self.slices_from not in ("kinetics", "thermal"):
            raise ValueError(f"unknown slices_from {self.slices_from!r}")
        by_kinetics = self.slices_from == "kinetics"
        twc1, twc2 = self.initial_specs
        kin1, rep1 = calibrate_kinetics(twc1, runs, n_channels=self.n_channels_kinetics, consts=self.consts,
                                        fit_slices=by_kinetics, **(self.kinetics_search or {}))
        twc1 = replace(twc1, kinetics=kin1)
        if "slice_lengths_m" in rep1:
            twc1 = replace(twc1, geometry=twc1.geometry.with_slices(rep1["slice_lengths_m"]))
        kin2, rep2 = calibrate_twc2_ratio(twc1, twc2, runs, n_channels=self.n_channels_kinetics,
                                          consts=self.consts, **(self.kinetics_search or {}))
        twc2 = replace(twc2, kinetics=kin2)
        self.report_ = {"kinetics_twc1": rep1, "kinetics_twc2": rep2}
        if self.fit_thermal:
            (twc1, twc2), rep3 = calibrate_thermal((twc1, twc2), runs, n_channels=self.n_channels_thermal,
                                                   consts=self.consts, fit_slices=not by_kinetics,
                                                   **(self.thermal_search or {}))
            self.report_["thermal"] = rep3
        self.specs_ = (twc1, twc2)
        return self

    def score_runs(self, runs) -> list[dict]:
        """Cumulative tailpipe errors of the calibrated model."""
        check_is_fitted(self, "specs_")
        return accuracy_table(self.specs_, runs, n_channels=self.n_channels_thermal, consts=self.consts)

    def score(self, runs, y=None) -> float:
        """Negative mean absolute cumulative error (higher is better)."""
        rows = self.score_runs(runs)
        vals = [abs(r[f"delta_{s}"]) for r in rows for s in MEASURED if math.isfinite(r[f"delta_{s}"])]
        return -float(np.mean(vals)) if vals else float("nan")
