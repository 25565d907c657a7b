"""Radial temperature profiles from a transient heated-disc solution family.

A uniformly heated disc with its rim held at zero develops a profile that is
flat at early times and parabolic at steady state. Scaling and offsetting
one member of the family lets two numbers (centre temperature and
centre-to-rim offset) describe a whole radial profile.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse import diags
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

FLAT_PROFILE = -1
_MAGIC = b"TWCL"
_VERSION = 1


class LibraryError(RuntimeError):
    """Raised when the disc solution cannot be computed."""


@dataclass(frozen=True)
class DiscSolutionLibrary:
    """Normalised disc solutions ``values[time, radius]``."""

    radii_normalized: np.ndarray
    times_normalized: np.ndarray
    values: np.ndarray

    @property
    def n_times(self) -> int:
        return len(self.times_normalized)

    def profile(self, t_index: int, r) -> np.ndarray:
        """Library profile at time index ``t_index`` evaluated at radii ``r``."""
        return np.interp(r, self.radii_normalized, self.values[t_index])

    def shape_factors(self, t_index: int, r) -> np.ndarray:
        """``1 - T(t, r) / T(t, 0)``: 0 at the centre, 1 at the rim.

        Channel temperatures are ``T_n + Delta_T * shape_factors``.
        """
        r = np.asarray(r, dtype=float)
        if t_index == FLAT_PROFILE:
            return np.zeros_like(r)
        row = self.values[t_index]
        return 1.0 - np.interp(r, self.radii_normalized, row) / row[0]

    def save(self, path) -> None:
        nt, nr = self.values.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<III", _VERSION, nt, nr))
            fh.write(np.ascontiguousarray(self.radii_normalized, "<f8").tobytes())
            fh.write(np.ascontiguousarray(self.times_normalized, "<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values, "<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DiscSolutionLibrary":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a profile library file")
        version, nt, nr = struct.unpack_from("<III", raw, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported library version {version}")
        data = np.frombuffer(raw, "<f8", offset=16)
        if data.size != nr + nt + nt * nr:
            raise ValueError(f"{path}: truncated library file")
        return cls(data[:nr].copy(), data[nr:nr + nt].copy(), data[nr + nt:].reshape(nt, nr).copy())


def _disc_operator(n_radii: int):
    """Finite-difference Laplacian on the interior nodes (rim excluded)."""
    h = 1.0 / (n_radii - 1)
    r = np.arange(n_radii - 1) * h
    main = np.full(n_radii - 1, -2.0 / h**2)
    upper = np.zeros(n_radii - 2)
    lower = np.zeros(n_radii - 2)
    upper[1:] = 1.0 / h**2 + 1.0 / (2 * r[1:-1] * h)
    lower[:] = 1.0 / h**2 - 1.0 / (2 * r[1:] * h)
    # symmetry at the axis: laplacian -> 2 T_rr = 4 (T1 - T0) / h^2
    main[0] = -4.0 / h**2
    upper[0] = 4.0 / h**2
    return diags([lower, main, upper], [-1, 0, 1], format="csc")


def _solve_disc(n_radii: int, times: np.ndarray) -> np.ndarray:
    op = _disc_operator(n_radii)
    rhs = lambda t, y: op @ y + 1.0  # noqa: E731
    sol = solve_ivp(
        rhs, (0.0, float(times[-1])), np.zeros(n_radii - 1), method="BDF",
        t_eval=times, jac=op, rtol=1e-9, atol=1e-12,
    )
    if not sol.success or sol.y.shape[1] != len(times):
        resid = np.nan
        if sol.y.size:
            resid = float(np.max(np.abs(op @ sol.y[:, -1] + 1.0)))
        raise LibraryError(
            f"disc solve failed at t={sol.t[-1] if sol.t.size else 0.0:.3g}: {sol.message} "
            f"(steady-state residual {resid:.3g})"
        )
    vals = np.zeros((len(times), n_radii))
    vals[:, :-1] = sol.y.T
    return vals


def _steady_time(n_radii: int, tol: float = 1e-4) -> float:
    probe = np.geomspace(1e-4, 20.0, 400)
    vals = _solve_disc(n_radii, np.concatenate([probe, 2 * probe[-1:]]))
    vals_probe = vals[:-1]
    steady_max = 0.25
    for i, t in enumerate(probe):
        j = np.searchsorted(probe, 2 * t)
        if j >= len(probe):
            break
        # linear interpolation in time is enough for a monotone saturating curve
        w = (2 * t - probe[j - 1]) / (probe[j] - probe[j - 1])
        later = (1 - w) * vals_probe[j - 1] + w * vals_probe[j]
        if np.max(np.abs(later - vals_probe[i])) / steady_max < tol:
            return float(t)
    raise LibraryError("disc solution did not approach steady state by t = 10")


def precompute_library(n_radii: int = 64, n_times: int = 128,
                       t_max: float | None = None) -> DiscSolutionLibrary:
    """Solve the heated-disc problem and normalise the solution family.

    Parameters
    ----------
    n_radii, n_times : int
        Radial nodes on [0, 1] and log-spaced output times.
    t_max : float, optional
        Last stored time. Detected from the approach to steady state when
        omitted.
    """
    if n_radii < 16 or n_times < 16:
        raise ValueError("need at least 16 radii and 16 times")
    if t_max is None:
        t_max = _steady_time(n_radii)
    times = np.geomspace(1e-4, t_max, n_times)
    vals = _solve_disc(n_radii, times)
    vals /= vals.max()
    vals = np.clip(vals, 0.0, 1.0)
    radii = np.linspace(0.0, 1.0, n_radii)
    return DiscSolutionLibrary(radii, times, vals)


@lru_cache(maxsize=4)
def _cached_library(path: str | None) -> DiscSolutionLibrary:
    if path is None:
        return precompute_library()
    p = Path(path)
    if p.exists():
        try:
            return DiscSolutionLibrary.load(p)
        except ValueError:
            pass
    lib = precompute_library()
    p.parent.mkdir(parents=True, exist_ok=True)
    lib.save(p)
    return lib


def get_library(cache_path=None) -> DiscSolutionLibrary:
    """Default library, loaded from ``cache_path`` or regenerated there."""
    return _cached_library(None if cache_path is None else str(cache_path))


def _fit_errors(library: DiscSolutionLibrary, tt) -> np.ndarray:
    tt = np.asarray(tt, dtype=float)
    shape = np.stack(
        [library.shape_factors(i, [1 / 3, 2 / 3]) for i in range(library.n_times)]
    )
    pred = tt[0] + (tt[3] - tt[0]) * shape
    return np.abs(pred - tt[1:3]).sum(axis=1)


def fit_profile_time(library: DiscSolutionLibrary, measured_temps, rtol: float = 1e-12) -> int:
    """Library time index whose scaled profile best matches four measurements.

    Parameters
    ----------
    measured_temps : sequence of 4 floats
        Temperatures at ``r = 0, R/3, 2R/3, R``.

    Returns
    -------
    int
        Index into ``library.times_normalized``, or ``FLAT_PROFILE`` when the
        centre and rim readings coincide.
    """
    tt = np.asarray(measured_temps, dtype=float)
    if tt.shape != (4,) or not np.all(np.isfinite(tt)):
        raise ValueError("expected four finite temperatures")
    if tt[0] == tt[3]:
        return FLAT_PROFILE
    err = _fit_errors(library, tt)
    best = err.min()
    return int(np.flatnonzero(err <= best + rtol * max(abs(best), 1.0))[0])


def channel_radii(M: int) -> np.ndarray:
    """Normalised annulus-midpoint radii ``(m - 1/2) / M``."""
    return (np.arange(1, M + 1) - 0.5) / M


def channel_massflow_weights(M: int) -> np.ndarray:
    """Annulus area fractions ``(2m - 1) / M**2``."""
    if M < 1:
        raise ValueError("need at least one channel")
    m = np.arange(1, M + 1, dtype=float)
    return (2 * m - 1) / float(M * M)


def interpolate_channel_temps(library: DiscSolutionLibrary, t_index: int, T_n, delta_T,
                              M: int) -> np.ndarray:
    """Channel temperatures anchored at ``T_n`` (centre) and ``T_n + delta_T`` (rim)."""
    if M < 1:
        raise ValueError("need at least one channel")
    g = library.shape_factors(t_index, channel_radii(M))
    return np.asarray(T_n, dtype=float)[..., None] + np.asarray(delta_T, dtype=float)[..., None] * g


class RadialProfileFitter(BaseEstimator):
    """Map measured four-point radial profiles to library time indices.

    Parameters
    ----------
    n_radii, n_times : int
        Library resolution used when no library is supplied.
    library : DiscSolutionLibrary, optional
    n_channels : int
        Channel count for :meth:`transform`.
    """

    def __init__(self, n_radii=64, n_times=128, library=None, n_channels=100):
        self.n_radii = n_radii
        self.n_times = n_times
        self.library = library
        self.n_channels = n_channels

    def _lib(self):
        if self.library is not None:
            return self.library
        if (self.n_radii, self.n_times) == (64, 128):
            return get_library()
        return precompute_library(self.n_radii, self.n_times)

    def fit(self, X, y=None):
        """Fit one profile time per row of ``X`` (shape ``(n, 4)``)."""
        X = check_array(X, ensure_min_features=4)
        self.library_ = self._lib()
        self.profile_indices_ = self.predict(X)
        return self

    def predict(self, X) -> np.ndarray:
        X = check_array(X, ensure_min_features=4)
        lib = getattr(self, "library_", None) or self._lib()
        return np.array([fit_profile_time(lib, row[:4]) for row in X], dtype=int)

    def transform(self, X) -> np.ndarray:
        """Reconstruct channel temperatures for the fitted rows.

        ``X`` holds ``(T_centre, T_rim)`` pairs aligned with the rows seen in
        :meth:`fit`; the result has shape ``(n, n_channels)``.
        """
        check_is_fitted(self, "profile_indices_")
        X = check_array(X, ensure_min_features=2)
        if len(X) != len(self.profile_indices_):
            raise ValueError("transform expects one row per fitted profile")
        return np.stack(
            [
                interpolate_channel_temps(self.library_, i, row[0], row[1] - row[0], self.n_channels)
                for i, row in zip(self.profile_indices_, X)
            ]
        )
