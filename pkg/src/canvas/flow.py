"""Rectified-flow path, timestep shifting and the Euler sampling loop.

Convention: t = 1 is pure noise, t = 0 is data. The linear path is
``z_t = (1 - t) x0 + t eps`` and its velocity is ``eps - x0``; sampling
integrates from t = 1 down to t = 0.
"""

from __future__ import annotations

import math
import threading
from typing import Any, Callable

import numpy as np

from canvas.errors import InvalidArgument, NumericDivergence

GRID_DTYPE = np.float32


def as_grid(x: Any, dtype=GRID_DTYPE) -> np.ndarray:
    """Coerce to a float array; a bare scalar becomes a 1x1x1 grid."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1)
    return arr


def _check_same_shape(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise InvalidArgument(f"shape mismatch: {shape} vs {a.shape}")


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise InvalidArgument(f"timestep {t} outside [0, 1]")
    return t


# ---------------------------------------------------------------------------
# Timestep shifting
# ---------------------------------------------------------------------------

def timestep_shift(t: float | np.ndarray, factor: float) -> float | np.ndarray:
    """Map a timestep through the resolution shift ``f t / (1 + (f - 1) t)``."""
    if not factor > 0:
        raise InvalidArgument("shift factor must be positive")
    t = np.asarray(t, dtype=np.float64)
    out = factor * t / (1.0 + (factor - 1.0) * t)
    return float(out) if out.ndim == 0 else out


def timestep_shift_inverse(t: float | np.ndarray, factor: float) -> float | np.ndarray:
    if not factor > 0:
        raise InvalidArgument("shift factor must be positive")
    t = np.asarray(t, dtype=np.float64)
    out = t / (factor - (factor - 1.0) * t)
    return float(out) if out.ndim == 0 else out


def make_schedule(n_steps: int, factor: float = 1.0) -> np.ndarray:
    """Shifted uniform grid from 1 to 0 with ``n_steps + 1`` points."""
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    grid = np.linspace(1.0, 0.0, n_steps + 1)
    sched = np.asarray(timestep_shift(grid, factor), dtype=np.float64)
    sched[0], sched[-1] = 1.0, 0.0
    return sched


def sample_training_t(rng: np.random.Generator, factor: float = 1.0) -> float:
    """Uniform t pushed through the shift (train-time counterpart of make_schedule)."""
    return float(timestep_shift(rng.random(), factor))


# ---------------------------------------------------------------------------
# Path and target
# ---------------------------------------------------------------------------

def interpolate(x0, eps, t: float) -> np.ndarray:
    x0, eps = as_grid(x0), as_grid(eps)
    _check_same_shape(x0, eps)
    t = _check_t(t)
    tt = GRID_DTYPE(t)
    return (GRID_DTYPE(1) - tt) * x0 + tt * eps


def fm_target(x0, eps) -> np.ndarray:
    x0, eps = as_grid(x0), as_grid(eps)
    _check_same_shape(x0, eps)
    return eps - x0


# ---------------------------------------------------------------------------
# Velocity fields and sampling
# ---------------------------------------------------------------------------

class VelocityField:
    """Base class for anything the sampler can integrate.

    Subclasses implement ``_evaluate``; ``evaluate`` wraps it with exact,
    lock-protected evaluation counting.
    """

    def __init__(self) -> None:
        self._count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def evaluate(self, z: np.ndarray, t: float, c: Any = None) -> np.ndarray:
        with self._lock:
            self._count += 1
        out = self._evaluate(z, t, c)
        if out.shape != z.shape:
            raise InvalidArgument(f"field returned shape {out.shape} for input {z.shape}")
        return out

    __call__ = evaluate

    def _evaluate(self, z: np.ndarray, t: float, c: Any) -> np.ndarray:
        raise NotImplementedError


class FunctionField(VelocityField):
    """Adapts a plain ``fn(z, t, c) -> v`` callable."""

    def __init__(self, fn: Callable[[np.ndarray, float, Any], np.ndarray]):
        super().__init__()
        self.fn = fn

    def _evaluate(self, z, t, c):
        return np.asarray(self.fn(z, t, c), dtype=z.dtype)


class ConstantField(VelocityField):
    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def _evaluate(self, z, t, c):
        return np.full_like(z, self.value)


def euler_sample(field: VelocityField, z_init, schedule, c: Any = None) -> np.ndarray:
    """Integrate ``dz/dt = v`` from schedule[0] down to schedule[-1]."""
    z = as_grid(z_init).copy()
    if not np.all(np.isfinite(z)):
        raise NumericDivergence("non-finite initial state", step=0)
    sched = np.asarray(schedule, dtype=np.float64)
    for k in range(len(sched) - 1):
        t, t_next = sched[k], sched[k + 1]
        dt = GRID_DTYPE(t - t_next)
        v = field.evaluate(z, float(t), c)
        z = z - dt * v
        if not np.all(np.isfinite(z)):
            raise NumericDivergence("non-finite state during Euler sampling", step=k)
    return z


# ---------------------------------------------------------------------------
# Analytic oracle: N(mu0, sigma0^2) data against N(0, 1) noise
# ---------------------------------------------------------------------------

def analytic_gaussian_field(mu0: float, sigma0: float, z, t: float):
    """Exact marginal velocity ``E[eps - x0 | z_t = z]`` for Gaussian data.

    (x0, eps, z_t) are jointly Gaussian, so the conditional mean is linear in z:
    slope Cov(v, z) / Var(z) with Cov = t - (1 - t) sigma0^2 and
    Var = (1 - t)^2 sigma0^2 + t^2.
    """
    if not sigma0 > 0:
        raise InvalidArgument("sigma0 must be positive")
    t = _check_t(t)
    var_z = (1.0 - t) ** 2 * sigma0**2 + t**2
    cov = t - (1.0 - t) * sigma0**2
    z = np.asarray(z, dtype=np.float64)
    out = -mu0 + (cov / var_z) * (z - (1.0 - t) * mu0)
    return float(out) if out.ndim == 0 else out


class GaussianField(VelocityField):
    """The analytic field as a sampler-compatible object."""

    def __init__(self, mu0: float, sigma0: float):
        super().__init__()
        self.mu0 = mu0
        self.sigma0 = sigma0

    def _evaluate(self, z, t, c):
        return analytic_gaussian_field(self.mu0, self.sigma0, z, t).astype(z.dtype)


def monte_carlo_velocity(mu0: float, sigma0: float, z_bins: np.ndarray, t: float,
                         n_draws: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brute-force binned estimate of ``E[eps - x0 | z_t in bin]``.

    Returns (bin centers of mass, means, standard errors); bins with fewer
    than 50 draws get NaN.
    """
    x0 = rng.normal(mu0, sigma0, n_draws)
    eps = rng.normal(0.0, 1.0, n_draws)
    z = (1.0 - t) * x0 + t * eps
    v = eps - x0
    idx = np.digitize(z, z_bins) - 1
    nb = len(z_bins) - 1
    centers = np.full(nb, np.nan)
    means = np.full(nb, np.nan)
    ses = np.full(nb, np.nan)
    for b in range(nb):
        sel = idx == b
        n = int(sel.sum())
        if n < 50:
            continue
        centers[b] = z[sel].mean()
        means[b] = v[sel].mean()
        ses[b] = v[sel].std(ddof=1) / math.sqrt(n)
    return centers, means, ses
