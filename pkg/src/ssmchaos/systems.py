"""Benchmark dynamical systems and fixed-step integrators.

All ODE right-hand sides are numba-compiled and share one RK4 driver; the
Kuramoto-Sivashinsky PDE uses a Fourier pseudo-spectral ETDRK4 scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numba
import numpy as np

from .trajectory import TrajectorySet


class IntegrationError(RuntimeError):
    """Raised when a trajectory leaves the finite floating-point range."""

    def __init__(self, message: str, blowup_time: float | None = None):
        super().__init__(message)
        self.blowup_time = blowup_time


# --------------------------------------------------------------------------
# right-hand sides; forcing parameters (amplitude, frequency, phase) are the
# last three entries of ``p`` for the forced systems


@numba.njit(cache=True)
def _lorenz3(t, x, p):
    sigma, rho, beta = p[0], p[1], p[2]
    out = np.empty(3)
    out[0] = sigma * (x[1] - x[0])
    out[1] = x[0] * (rho - x[2]) - x[1]
    out[2] = x[0] * x[1] - beta * x[2]
    return out


@numba.njit(cache=True)
def _lorenz9(t, x, p):
    sigma, r = p[0], p[1]
    b1, b2, b3, b4, b5, b6 = p[3], p[4], p[5], p[6], p[7], p[8]
    c1, c2, c3, c4, c5, c6, c7, c8, c9 = x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]
    out = np.empty(9)
    out[0] = -sigma * b1 * c1 - c2 * c4 + b4 * c4 * c4 + b3 * c3 * c5 - sigma * b2 * c7
    out[1] = -sigma * c2 + c1 * c4 - c2 * c5 + c4 * c5 - 0.5 * sigma * c9
    out[2] = -sigma * b1 * c3 + c2 * c4 - b4 * c2 * c2 - b3 * c1 * c5 + sigma * b2 * c8
    # minus sign on c2*c3: the plus sign printed in some sources gives no chaos at r=14.2
    out[3] = -sigma * c4 - c2 * c3 - c2 * c5 + c4 * c5 + 0.5 * sigma * c9
    out[4] = -sigma * b5 * c5 + 0.5 * c2 * c2 - 0.5 * c4 * c4
    out[5] = -b6 * c6 + c2 * c9 - c4 * c9
    out[6] = -b1 * c7 - r * c1 + 2.0 * c5 * c8 - c4 * c9
    out[7] = -b1 * c8 + r * c3 - 2.0 * c5 * c7 + c2 * c9
    out[8] = -c9 - r * c2 + r * c4 - 2.0 * c2 * c6 + 2.0 * c4 * c6 + c4 * c7 - c2 * c8
    return out


@numba.njit(cache=True)
def _rossler(t, x, p):
    a, b, c = p[0], p[1], p[2]
    out = np.empty(3)
    out[0] = -x[1] - x[2]
    out[1] = x[0] + a * x[1]
    out[2] = b + x[2] * (x[0] - c)
    return out


@numba.njit(cache=True)
def _duffing_chain(t, x, p):
    # state: displacements x1..x4 then velocities v1..v4
    m, m3, c, c3, k, k1g, k3, k4g, beta = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]
    amp, om, ph = p[9], p[10], p[11]
    x1, x2, x3, x4 = x[0], x[1], x[2], x[3]
    v1, v2, v3, v4 = x[4], x[5], x[6], x[7]
    out = np.empty(8)
    out[0] = v1
    out[1] = v2
    out[2] = v3
    out[3] = v4
    out[4] = -(c * v1 + (k1g + k) * x1 - k * x2) / m
    out[5] = -(c * v2 - k * x1 + 2.0 * k * x2 - k * x3) / m
    out[6] = -(c3 * v3 - k * x2 + (2.0 * k + k3) * x3 - k * x4 + beta * x3 ** 3
               - amp * math.cos(om * t + ph)) / m3
    out[7] = -(c * v4 - k * x3 + (k + k4g) * x4) / m
    return out


@numba.njit(cache=True)
def _bistable(t, x, p):
    c1, k1, beta, kappa, c2, k2 = p[0], p[1], p[2], p[3], p[4], p[5]
    amp, om, ph = p[6], p[7], p[8]
    x1, v1, x2, v2 = x[0], x[1], x[2], x[3]
    out = np.empty(4)
    out[0] = v1
    out[1] = -c1 * v1 + k1 * x1 - beta * x1 ** 3 - kappa * (x1 - x2) + amp * math.cos(om * t + ph)
    out[2] = v2
    out[3] = -c2 * v2 - k2 * x2 - kappa * (x2 - x1)
    return out


@numba.njit(cache=True)
def _rk4_run(rhs, x0, t0, h, n_out, substeps, p):
    n = x0.shape[0]
    out = np.empty((n_out + 1, n))
    out[0] = x0
    x = x0.copy()
    for i in range(n_out):
        for s in range(substeps):
            t = t0 + (i * substeps + s) * h
            k1 = rhs(t, x, p)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1, p)
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2, p)
            k4 = rhs(t + h, x + h * k3, p)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for j in range(n):
            if not np.isfinite(x[j]):
                return out[: i + 1], i + 1
        out[i + 1] = x
    return out, -1


@numba.njit(cache=True)
def _rk4_batch(rhs, X0, t0, h, n_out, substeps, p):
    m, n = X0.shape
    out = np.empty((n_out + 1, m, n))
    fail = -1
    for j in range(m):
        traj, bad = _rk4_run(rhs, X0[j], t0, h, n_out, substeps, p)
        if bad >= 0:
            fail = j
            out[:, j, :] = np.nan
            out[: traj.shape[0], j, :] = traj
        else:
            out[:, j, :] = traj
    return out, fail


# --------------------------------------------------------------------------
# system registry


def _lorenz9_derived(p: Mapping[str, float]) -> list[float]:
    a2 = p["a"] ** 2
    b1 = 4 * (1 + a2) / (1 + 2 * a2)
    b2 = (1 + 2 * a2) / (2 * (1 + a2))
    b3 = 2 * (1 - a2) / (1 + a2)
    b4 = a2 / (1 + a2)
    b5 = 8 * a2 / (1 + 2 * a2)
    b6 = 4 / (1 + 2 * a2)
    return [p["sigma"], p["r"], p["a"], b1, b2, b3, b4, b5, b6]


@dataclass(frozen=True)
class _SystemInfo:
    dim: int
    rhs: object
    params: tuple[str, ...]
    defaults: dict[str, float]
    forced: bool = False
    pack: object = None


_SYSTEMS: dict[str, _SystemInfo] = {
    "Lorenz3": _SystemInfo(3, _lorenz3, ("sigma", "rho", "beta"),
                           {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}),
    "Lorenz9": _SystemInfo(9, _lorenz9, ("sigma", "r", "a"),
                           {"sigma": 0.5, "r": 14.2, "a": 0.5}, pack=_lorenz9_derived),
    "Rossler": _SystemInfo(3, _rossler, ("a", "b", "c"), {"a": 0.2, "b": 0.2, "c": 5.7}),
    "DuffingChain": _SystemInfo(
        8, _duffing_chain,
        ("m", "m3", "c", "c3", "k", "k1_ground", "k3", "k4_ground", "beta"),
        # linear stiffness of the Duffing element is net-negative so that the
        # origin is a saddle; see the equations of motion in the README
        {"m": 0.1, "m3": 1.0, "c": 0.75, "c3": 0.1, "k": 1.0, "k1_ground": 1.0,
         "k3": -3.0, "k4_ground": 2.0, "beta": 0.25},
        forced=True),
    "BistableAnalog": _SystemInfo(
        4, _bistable, ("c1", "k1", "beta", "kappa", "c2", "k2"),
        {"c1": 0.25, "k1": 1.2, "beta": 1.0, "kappa": 0.2, "c2": 1.0, "k2": 16.0},
        forced=True),
}

SYSTEM_NAMES = tuple(_SYSTEMS) + ("KuramotoSivashinsky",)


@dataclass(frozen=True)
class Forcing:
    amplitude: float
    frequency: float
    phase: float = 0.0

    @property
    def period(self) -> float:
        return 2 * math.pi / self.frequency


@dataclass(frozen=True)
class SystemSpec:
    name: str
    parameters: Mapping[str, float] = field(default_factory=dict)
    forcing: Forcing | None = None

    def __post_init__(self):
        if self.name == "KuramotoSivashinsky":
            required = ("L", "n_modes", "n_grid")
            forced_ok = False
        elif self.name in _SYSTEMS:
            required = _SYSTEMS[self.name].params
            forced_ok = _SYSTEMS[self.name].forced
        else:
            raise ValueError(f"unknown system {self.name!r}; expected one of {SYSTEM_NAMES}")
        for key in required:
            if key not in self.parameters:
                raise ValueError(f"{self.name}: missing parameter {key!r}")
            if not np.isfinite(self.parameters[key]):
                raise ValueError(f"{self.name}: parameter {key!r} is not finite")
        if self.forcing is not None and not forced_ok:
            raise ValueError(f"{self.name} does not accept forcing")

    @classmethod
    def default(cls, name: str, forcing: Forcing | None = None, **overrides) -> "SystemSpec":
        if name == "KuramotoSivashinsky":
            params = {"L": 22.0, "n_modes": 64, "n_grid": 256}
        else:
            params = dict(_SYSTEMS[name].defaults)
        params.update(overrides)
        return cls(name, params, forcing)

    @property
    def dim(self) -> int:
        if self.name == "KuramotoSivashinsky":
            return int(self.parameters["n_grid"])
        return _SYSTEMS[self.name].dim

    def packed(self) -> np.ndarray:
        info = _SYSTEMS[self.name]
        if info.pack is not None:
            vals = info.pack(self.parameters)
        else:
            vals = [float(self.parameters[k]) for k in info.params]
        if info.forced:
            f = self.forcing or Forcing(0.0, 1.0, 0.0)
            vals += [f.amplitude, f.frequency, f.phase]
        return np.asarray(vals, dtype=float)

    def rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        return _SYSTEMS[self.name].rhs(float(t), np.asarray(x, dtype=float), self.packed())

    def jacobian(self, x: np.ndarray, t: float = 0.0, h: float = 1e-7) -> np.ndarray:
        """Central-difference Jacobian of the vector field."""
        x = np.asarray(x, dtype=float)
        n = x.size
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h * max(1.0, abs(x[j]))
            J[:, j] = (self.rhs(t, x + e) - self.rhs(t, x - e)) / (2 * e[j])
        return J


def integrate(spec: SystemSpec, x0, t_span: tuple[float, float], dt: float,
              substeps: int = 1) -> TrajectorySet:
    """Fixed-step RK4 trajectory sampled every ``dt``.

    ``substeps`` subdivides each sampling interval into equal RK4 steps, which
    lets long Poincare records be produced without storing the fine grid.
    """
    if spec.name == "KuramotoSivashinsky":
        raise ValueError("use integrate_ks for the Kuramoto-Sivashinsky equation")
    if not dt > 0:
        raise ValueError("dt must be positive")
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != spec.dim:
        raise ValueError(f"{spec.name} has state dimension {spec.dim}, got x0 of size {x0.size}")
    t0, t1 = t_span
    n_out = int(round((t1 - t0) / dt))
    h = dt / substeps
    out, bad = _rk4_run(_SYSTEMS[spec.name].rhs, x0, float(t0), h, n_out, int(substeps), spec.packed())
    if bad >= 0:
        raise IntegrationError(f"{spec.name}: non-finite state at t={t0 + bad * dt:g}", t0 + bad * dt)
    return TrajectorySet([out], dt, t0=float(t0))


def integrate_batch(spec: SystemSpec, X0: np.ndarray, t0: float, dt: float, n_steps: int,
                    substeps: int = 1) -> np.ndarray:
    """RK4 for many initial conditions at once; returns ``(n_steps+1, m, n)``."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    out, fail = _rk4_batch(_SYSTEMS[spec.name].rhs, X0, float(t0), dt / substeps, int(n_steps),
                           int(substeps), spec.packed())
    return out


# --------------------------------------------------------------------------
# Kuramoto-Sivashinsky


def _etdrk4_coefficients(lin: np.ndarray, h: float, n_contour: int = 32):
    # contour-integral evaluation avoids cancellation for small |h*lin|
    r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    LR = h * lin[:, None] + r[None, :]
    E = np.exp(h * lin)
    E2 = np.exp(h * lin / 2)
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
    f1 = h * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR ** 2)) / LR ** 3, axis=1))
    f2 = h * np.real(np.mean((2 + LR + np.exp(LR) * (-2 + LR)) / LR ** 3, axis=1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR ** 2 + np.exp(LR) * (4 - LR)) / LR ** 3, axis=1))
    return E, E2, Q, f1, f2, f3


def integrate_ks(L: float, n_modes: int, n_grid: int, u0, t_span: tuple[float, float],
                 dt: float, substeps: int = 1) -> TrajectorySet:
    """Solve u_t + (u^2/2)_x + u_xx + u_xxxx = 0 on a periodic domain of length L.

    Grid points are x_i = -L/2 + i L / n_grid. Fourier modes with index
    ``|j| >= n_modes`` are removed at every step.
    """
    if n_grid <= 0 or n_grid & (n_grid - 1):
        raise ValueError("n_grid must be a power of two")
    if n_modes > n_grid // 2:
        raise ValueError("n_modes must not exceed n_grid/2")
    if not (L > 0 and dt > 0):
        raise ValueError("L and dt must be positive")
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (n_grid,):
        raise ValueError(f"u0 must have shape ({n_grid},)")
    h = dt / substeps
    j = np.arange(n_grid // 2 + 1)
    k = 2 * np.pi * j / L
    keep = j < n_modes
    lin = k ** 2 - k ** 4
    E, E2, Q, f1, f2, f3 = _etdrk4_coefficients(lin, h)
    g = -0.5j * k * keep

    def nonlin(v):
        u = np.fft.irfft(v, n_grid)
        return g * np.fft.rfft(u * u)

    v = np.fft.rfft(u0) * keep
    n_out = int(round((t_span[1] - t_span[0]) / dt))
    out = np.empty((n_out + 1, n_grid))
    out[0] = np.fft.irfft(v, n_grid)
    for i in range(n_out):
        for _ in range(substeps):
            Nv = nonlin(v)
            a = E2 * v + Q * Nv
            Na = nonlin(a)
            b = E2 * v + Q * Na
            Nb = nonlin(b)
            c = E2 * a + Q * (2 * Nb - Nv)
            Nc = nonlin(c)
            v = E * v + Nv * f1 + 2 * (Na + Nb) * f2 + Nc * f3
        u = np.fft.irfft(v, n_grid)
        if not np.all(np.isfinite(u)):
            t_bad = t_span[0] + (i + 1) * dt
            raise IntegrationError(f"KS field became non-finite at t={t_bad:g}", t_bad)
        out[i + 1] = u
    return TrajectorySet([out], dt, t0=float(t_span[0]))


def ks_grid(L: float, n_grid: int) -> np.ndarray:
    return -L / 2 + L * np.arange(n_grid) / n_grid


# --------------------------------------------------------------------------
# Poincare maps


def poincare_sample(traj: TrajectorySet, period: float) -> TrajectorySet:
    ratio = period / traj.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-12 * max(ratio, 1.0):
        raise ValueError(f"period {period!r} is not an integer multiple of dt {traj.dt!r}")
    return TrajectorySet([s[::stride] for s in traj.states], float(period), traj.labels, traj.t0)


@dataclass
class FixedPointResult:
    state: np.ndarray
    residual_norm: float
    stability: np.ndarray
    iterations: int = 0

    @property
    def n_unstable(self) -> int:
        return int(np.sum(np.abs(self.stability) > 1.0))


def period_map(spec: SystemSpec, period: float, X: np.ndarray, substeps: int = 400,
               t0: float = 0.0) -> np.ndarray:
    """Apply the time-``period`` flow map to the rows of ``X``."""
    X = np.atleast_2d(X)
    out = integrate_batch(spec, X, t0, period, 1, substeps)
    return out[-1]


def find_map_fixed_point(spec: SystemSpec, period: float, guess, tol: float = 1e-10,
                         max_iter: int = 50, substeps: int = 400) -> FixedPointResult:
    """Newton shooting for P(x) = x with a forward-difference Jacobian."""
    if spec.forcing is not None and spec.forcing.amplitude != 0.0:
        ratio = period / spec.forcing.period
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("period must be a multiple of the forcing period")
    x = np.asarray(guess, dtype=float).copy()
    n = x.size
    for it in range(max_iter + 1):
        scale = max(1.0, np.linalg.norm(x))
        h = 1e-6 * scale
        probes = np.vstack([x, x + h * np.eye(n)])
        images = period_map(spec, period, probes, substeps)
        F = images[0] - x
        res = float(np.linalg.norm(F))
        J = (images[1:] - images[0]).T / h
        if res <= tol:
            return FixedPointResult(x, res, np.linalg.eigvals(J), it)
        A = J - np.eye(n)
        if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError("singular Jacobian in Newton shooting")
        x = x - np.linalg.solve(A, F)
    raise RuntimeError(f"Newton shooting did not converge in {max_iter} iterations (residual {res:.3e})")


def continue_map_fixed_point(spec: SystemSpec, period: float, n_steps: int = 20,
                             tol: float = 1e-10, substeps: int = 400) -> FixedPointResult:
    """Follow the origin's fixed point from zero forcing up to the full amplitude.

    Natural-parameter continuation: each Newton solve starts from the
    previous amplitude's solution. Assumes the unforced origin is an
    equilibrium.
    """
    if spec.forcing is None:
        return find_map_fixed_point(spec, period, np.zeros(spec.dim), tol, substeps=substeps)
    x = np.zeros(spec.dim)
    result = None
    for amp in np.linspace(0.0, spec.forcing.amplitude, n_steps + 1)[1:]:
        step = replace(spec, forcing=replace(spec.forcing, amplitude=float(amp)))
        result = find_map_fixed_point(step, period, x, tol, substeps=substeps)
        x = result.state
    return result


# --------------------------------------------------------------------------
# synthetic bistable oscillator


def bistable_analog_spec(forcing: Forcing | None = None, **overrides) -> SystemSpec:
    """Two-degree-of-freedom analog of a buckled beam.

    x1 is a bistable (negative linear stiffness, cubic hardening) slow DOF,
    x2 a stiff, lightly damped linear DOF, coupled by a spring ``kappa``.
    """
    return SystemSpec.default("BistableAnalog", forcing, **overrides)


def bistable_equilibria(spec: SystemSpec) -> np.ndarray:
    """The origin and the two buckled equilibria, as rows of a (3, 4) array."""
    p = spec.parameters
    k1, beta, kappa, k2 = p["k1"], p["beta"], p["kappa"], p["k2"]
    # static balance: x2 = kappa x1 / (k2 + kappa); k1 x1 - beta x1^3 - kappa (x1 - x2) = 0
    eff = k1 - kappa + kappa ** 2 / (k2 + kappa)
    rows = [np.zeros(4)]
    if beta > 0 and eff > 0:
        x1 = math.sqrt(eff / beta)
        for s in (1.0, -1.0):
            rows.append(np.array([s * x1, 0.0, s * x1 * kappa / (k2 + kappa), 0.0]))
    return np.array(rows)


def mechanical_energy_duffing(spec: SystemSpec, X: np.ndarray) -> np.ndarray:
    """Kinetic plus potential energy of the unforced Duffing chain along rows of X."""
    p = spec.parameters
    m, m3, k, k1g, k3, k4g, beta = (p[n] for n in ("m", "m3", "k", "k1_ground", "k3", "k4_ground", "beta"))
    x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    v = X[:, 4:]
    kin = 0.5 * (m * (v[:, 0] ** 2 + v[:, 1] ** 2 + v[:, 3] ** 2) + m3 * v[:, 2] ** 2)
    pot = 0.5 * (k1g * x1 ** 2 + k * (x2 - x1) ** 2 + k * (x3 - x2) ** 2 + k * (x4 - x3) ** 2
                 + k3 * x3 ** 2 + k4g * x4 ** 2) + 0.25 * beta * x3 ** 4
    return kin + pot
