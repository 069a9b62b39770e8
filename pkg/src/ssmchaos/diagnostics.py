"""Model-quality diagnostics: normalized mean trajectory error, maximal
Lyapunov exponent from trajectory separation, and kernel density comparison."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .trajectory import TrajectorySet

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# NMTE


def _pair_arrays(reference, predicted):
    A = reference.states[0] if isinstance(reference, TrajectorySet) else np.asarray(reference, float)
    B = predicted.states[0] if isinstance(predicted, TrajectorySet) else np.asarray(predicted, float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    if isinstance(reference, TrajectorySet) and isinstance(predicted, TrajectorySet):
        if not np.isclose(reference.dt, predicted.dt, rtol=1e-9):
            raise ValueError("sampling intervals differ")
    return A, B


def nmte(reference, predicted) -> np.ndarray:
    """Running-mean trajectory error normalized by the largest reference norm.

    Entry ``i`` averages the pointwise errors over samples ``0..i``.
    """
    A, B = _pair_arrays(reference, predicted)
    scale = float(np.max(np.linalg.norm(A, axis=1)))
    if scale == 0.0:
        raise ValueError("reference trajectory has zero norm")
    err = np.linalg.norm(A - B, axis=1)
    return np.cumsum(err) / np.arange(1, len(err) + 1) / scale


def prediction_horizon(curve: np.ndarray, dt: float, threshold: float) -> float:
    """Time at which ``curve`` first exceeds ``threshold`` (full span if never)."""
    over = np.nonzero(curve > threshold)[0]
    n = over[0] if over.size else len(curve)
    return float(n * dt)


# --------------------------------------------------------------------------
# Lyapunov exponent


@dataclass
class LyapunovEstimate:
    mle: float
    fit_r2: float
    fit_window: tuple[float, float]
    per_trial: list[float] = field(default_factory=list)
    chaotic: bool = True
    n_failed: int = 0
    curve: np.ndarray | None = field(default=None, repr=False)  # (t, mean log separation)

    @property
    def lyapunov_time(self) -> float:
        return 1.0 / self.mle if self.mle > 0 else float("inf")

    def to_csv(self) -> str:
        lines = [f"# mle={self.mle!r} r2={self.fit_r2!r} window={float(self.fit_window[0])!r},{float(self.fit_window[1])!r}"
                 f" chaotic={self.chaotic} failed_trials={self.n_failed}", "t,log_separation"]
        if self.curve is not None:
            lines += [f"{t:.17g},{v:.17g}" for t, v in self.curve]
        return "\n".join(lines) + "\n"


def _linear_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    res = stats.linregress(t, y)
    r2 = float(res.rvalue ** 2) if np.isfinite(res.rvalue) else 1.0
    return float(res.slope), min(max(r2, 0.0), 1.0)


def auto_window(t: np.ndarray, log_sep: np.ndarray, log_eps0: float, diameter: float,
                frac=(0.5, 0.8), target: float = 1e-2) -> tuple[float, float]:
    """Window ``frac`` times the first time the separation reaches ``target`` x diameter."""
    if log_eps0 >= np.log(target * diameter):
        raise ValueError("initial separation already exceeds the saturation target; give fit_window")
    hit = np.nonzero(log_sep + log_eps0 >= np.log(target * diameter))[0]
    t_hit = t[hit[0]] if hit.size else t[-1]
    return (frac[0] * t_hit, frac[1] * t_hit)


def _window_fit(t, curve, window, min_r2=0.9):
    t0, t1 = window
    if t1 > t[-1] + 1e-12 or t0 < t[0] - 1e-12 or not t1 > t0:
        raise ValueError(f"fit window {window} outside the data span [{t[0]}, {t[-1]}]")
    sel = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
    if sel.sum() < 3:
        raise ValueError("fit window holds fewer than 3 samples")
    slope, r2 = _linear_fit(t[sel], curve[sel])
    return slope, r2, bool(slope > 0 and r2 >= min_r2)


def _log_separation(A: np.ndarray, B: np.ndarray, eps0: float) -> np.ndarray:
    sep = np.linalg.norm(A - B, axis=-1)
    if np.any(sep == 0.0):
        raise FloatingPointError("trajectory separation reached zero")
    return np.log(sep / eps0)


def mle_from_pair(trajA, trajB, fit_window=None, diameter: float | None = None,
                  min_r2: float = 0.9) -> LyapunovEstimate:
    """Slope of ``log(|xA(t) - xB(t)| / |xA(0) - xB(0)|)`` over a time window."""
    A, B = _pair_arrays(trajA, trajB)
    dt = trajA.dt if isinstance(trajA, TrajectorySet) else 1.0
    eps0 = float(np.linalg.norm(A[0] - B[0]))
    if eps0 == 0:
        raise ValueError("initial separation must be positive")
    t = dt * np.arange(len(A))
    curve = _log_separation(A, B, eps0)
    if fit_window is None:
        diameter = diameter or attractor_diameter(A)
        fit_window = auto_window(t, curve, np.log(eps0), diameter)
    slope, r2, ok = _window_fit(t, curve, fit_window, min_r2)
    return LyapunovEstimate(slope, r2, tuple(fit_window), [slope], ok, 0, np.column_stack([t, curve]))


def attractor_diameter(X: np.ndarray) -> float:
    return float(np.linalg.norm(np.ptp(X, axis=0)))


def mle_ensemble(propagate: Callable[[np.ndarray, int], np.ndarray], base_points: np.ndarray,
                 n_trials: int, n_steps: int, dt: float, eps0: float | None = None,
                 fit_window=None, rng: np.random.Generator | None = None,
                 diameter: float | None = None, min_r2: float = 0.9) -> LyapunovEstimate:
    """Average divergence rate of perturbed pairs started on the attractor.

    ``propagate(X0, n_steps)`` advances a batch of states and returns an
    array ``(n_steps+1, m, dim)``. Base points are drawn from
    ``base_points``; each partner is offset by a random direction of norm
    ``eps0`` (default ``1e-8`` x diameter). Each trial's slope is fitted
    over the same window, chosen from the trial-averaged curve unless given.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    rng = rng or np.random.default_rng(0)
    diameter = diameter or attractor_diameter(base_points)
    eps0 = eps0 if eps0 is not None else 1e-8 * diameter
    pick = rng.choice(len(base_points), size=n_trials, replace=len(base_points) < n_trials)
    X0 = base_points[pick]
    dirs = rng.standard_normal(X0.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = propagate(np.vstack([X0, X0 + eps0 * dirs]), n_steps)
    A, B = out[:, :n_trials], out[:, n_trials:]
    with np.errstate(divide="ignore", invalid="ignore"):
        curves = np.log(np.linalg.norm(A - B, axis=-1) / eps0)  # (n_steps+1, n_trials)
    good = np.all(np.isfinite(curves), axis=0)
    n_failed = int((~good).sum())
    if n_failed:
        log.warning("mle_ensemble: %d of %d trials failed", n_failed, n_trials)
    if not good.any():
        raise FloatingPointError("all Lyapunov trials failed")
    curves = curves[:, good]
    t = dt * np.arange(curves.shape[0])
    mean_curve = curves.mean(axis=1)
    if fit_window is None:
        fit_window = auto_window(t, mean_curve, np.log(eps0), diameter)
    slopes = [_window_fit(t, curves[:, j], fit_window, min_r2)[0] for j in range(curves.shape[1])]
    mean = float(np.mean(slopes))
    _, r2, ok = _window_fit(t, mean_curve, fit_window, min_r2)
    if not ok:
        log.info("no positive-slope linear separation regime: not chaotic")
    return LyapunovEstimate(mean, r2, tuple(fit_window), slopes, ok and mean > 0, n_failed,
                            np.column_stack([t, mean_curve]))


# --------------------------------------------------------------------------
# densities


@dataclass
class CoordinateDensity:
    grid: np.ndarray
    density_ref: np.ndarray
    density_model: np.ndarray
    l1_distance: float


@dataclass
class DensityComparison:
    per_coordinate: list[CoordinateDensity]
    bandwidths: list[float]

    @property
    def l1_distances(self) -> list[float]:
        return [c.l1_distance for c in self.per_coordinate]

    def to_csv(self) -> str:
        lines = ["coord,x,density_ref,density_model"]
        for i, c in enumerate(self.per_coordinate):
            lines += [f"{i + 1},{x:.17g},{a:.17g},{b:.17g}"
                      for x, a, b in zip(c.grid, c.density_ref, c.density_model)]
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["coord,bandwidth,l1_distance"]
        lines += [f"{i + 1},{h:.17g},{c.l1_distance:.17g}"
                  for i, (h, c) in enumerate(zip(self.bandwidths, self.per_coordinate))]
        return "\n".join(lines) + "\n"


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sigma = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    h = 0.9 * spread * len(x) ** -0.2
    if not h > 0:
        raise ValueError("degenerate sample: zero spread")
    return float(h)


def gaussian_kde(x: np.ndarray, grid: np.ndarray, h: float, chunk: int = 2_000_000) -> np.ndarray:
    """Gaussian KDE on a uniform grid, by binning onto the grid and convolving.

    Linear binning keeps the error far below the kernel width when the grid
    spacing is a small fraction of ``h``.
    """
    x = np.asarray(x, dtype=float)
    g0, dx = grid[0], grid[1] - grid[0]
    pos = (x - g0) / dx
    i = np.clip(np.floor(pos).astype(int), 0, len(grid) - 2)
    frac = np.clip(pos - i, 0.0, 1.0)
    counts = np.bincount(i, 1 - frac, minlength=len(grid)) + np.bincount(i + 1, frac, minlength=len(grid))
    half = int(np.ceil(6 * h / dx))
    offs = dx * np.arange(-half, half + 1)
    kern = np.exp(-0.5 * (offs / h) ** 2) / (h * np.sqrt(2 * np.pi))
    dens = np.convolve(counts, kern, mode="same") if len(kern) <= len(grid) else \
        np.convolve(counts, kern, mode="full")[half: half + len(grid)]
    return dens / len(x)


def density_compare(reference: TrajectorySet | np.ndarray, modeled: TrajectorySet | np.ndarray,
                    n_grid: int = 512, bandwidths=None) -> DensityComparison:
    """Per-coordinate KDE of both data sets on a shared grid, with L1 distance.

    Bandwidths default to Silverman's rule on the reference and are shared
    by both estimates; passing ``bandwidths`` forces explicit values.
    """
    R = reference.stacked() if isinstance(reference, TrajectorySet) else np.atleast_2d(reference)
    M = modeled.stacked() if isinstance(modeled, TrajectorySet) else np.atleast_2d(modeled)
    if R.size == 0 or M.size == 0:
        raise ValueError("empty data")
    if R.shape[1] != M.shape[1]:
        raise ValueError("state dimensions differ")
    if bandwidths is None:
        bandwidths = [silverman_bandwidth(R[:, j]) for j in range(R.shape[1])]
    out = []
    for j, h in enumerate(bandwidths):
        lo = min(R[:, j].min(), M[:, j].min())
        hi = max(R[:, j].max(), M[:, j].max())
        pad = max(0.1 * (hi - lo), 4 * h)
        grid = np.linspace(lo - pad, hi + pad, n_grid)
        if grid[1] - grid[0] > h / 4:
            log.warning("coordinate %d: grid spacing exceeds a quarter bandwidth", j + 1)
        pr = gaussian_kde(R[:, j], grid, h)
        pm = gaussian_kde(M[:, j], grid, h)
        l1 = float(np.trapezoid(np.abs(pr - pm), grid))
        out.append(CoordinateDensity(grid, pr, pm, l1))
    return DensityComparison(out, [float(h) for h in bandwidths])
