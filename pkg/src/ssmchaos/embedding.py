"""Delay-coordinate embedding, lag selection by mutual information, and
embedding-dimension estimation by false nearest neighbors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .trajectory import TrajectorySet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DelaySpec:
    observable_index: int = 0
    m: int = 1
    lag_steps: int = 1

    def __post_init__(self):
        if self.m < 1 or self.lag_steps < 1:
            raise ValueError("need m >= 1 and lag_steps >= 1")

    @property
    def window(self) -> int:
        return (self.m - 1) * self.lag_steps


@dataclass
class FnnReport:
    dims_tested: list[int]
    fnn_percentage: list[float]
    chosen_dim: int | None
    threshold: float
    lag_steps: int = 1

    def to_csv(self) -> str:
        rows = ["dim,fnn_percentage"]
        rows += [f"{d},{p:.17g}" for d, p in zip(self.dims_tested, self.fnn_percentage)]
        rows.append(f"# chosen_dim={self.chosen_dim} threshold_pct={self.threshold} lag_steps={self.lag_steps}")
        return "\n".join(rows) + "\n"


def takens_dimension(d: int) -> int:
    """Smallest delay-embedding dimension guaranteed to embed a d-manifold."""
    return 2 * d + 1


def _scalar(series) -> np.ndarray:
    if isinstance(series, TrajectorySet):
        if series.state_dim != 1:
            raise ValueError("expected a scalar time series")
        return [s[:, 0] for s in series.states]
    return [np.asarray(series, dtype=float).ravel()]


def embed_array(s: np.ndarray, m: int, lag: int) -> np.ndarray:
    n = len(s) - (m - 1) * lag
    if n < 1:
        raise ValueError(f"series of length {len(s)} too short for m={m}, lag={lag}")
    idx = np.arange(n)[:, None] + lag * np.arange(m)[None, :]
    return s[idx]


def delay_embed(series: TrajectorySet, spec: DelaySpec) -> TrajectorySet:
    """Stack ``m`` forward-shifted copies of the observed coordinate.

    A multivariate input is reduced to ``spec.observable_index`` first.
    """
    if series.state_dim != 1:
        series = series.select(spec.observable_index)
    states = [embed_array(s[:, 0], spec.m, spec.lag_steps) for s in series.states]
    return TrajectorySet(states, series.dt, series.labels, series.t0)


# --------------------------------------------------------------------------


def mutual_information(series, max_lag: int, n_bins: int = 128, smoothing: float = 4.0) -> np.ndarray:
    """Smoothed-histogram estimate of I(s(t); s(t+tau)) in nats for tau = 0..max_lag.

    The joint histogram is convolved with a Gaussian of ``smoothing`` cells
    before the information is evaluated; without it, lattice effects of the
    binning make the curve ragged on smooth deterministic signals.
    """
    parts = _scalar(series)
    s_all = np.concatenate(parts)
    lo, hi = s_all.min(), s_all.max()
    if not hi > lo:
        raise ValueError("constant series: mutual information undefined")
    codes = [np.minimum(((s - lo) / (hi - lo) * n_bins).astype(int), n_bins - 1) for s in parts]
    out = np.empty(max_lag + 1)
    for tau in range(max_lag + 1):
        joint = np.zeros(n_bins * n_bins)
        for c in codes:
            if len(c) <= tau:
                continue
            joint += np.bincount(c[: len(c) - tau] * n_bins + c[tau:], minlength=n_bins * n_bins)
        joint = joint.reshape(n_bins, n_bins)
        if smoothing > 0:
            joint = gaussian_filter(joint, smoothing, mode="constant")
        p = joint / joint.sum()
        px = p.sum(axis=1, keepdims=True)
        py = p.sum(axis=0, keepdims=True)
        nz = p > 0
        out[tau] = float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))
    return out


def ami_lag(series, max_lag: int, n_bins: int = 128, rel_tol: float = 1e-3,
            smoothing: float = 4.0) -> tuple[int, bool]:
    """Lag of the first local minimum of the average mutual information.

    A lag counts as a minimum once the next lag fails to lower the
    information by more than ``rel_tol * I(0)``; this keeps the rule stable
    on flat, noise-dominated curves. Returns ``(lag, found)``; when no
    minimum exists up to ``max_lag`` the lag is ``max_lag`` and ``found`` is
    False.
    """
    if max_lag < 2:
        raise ValueError("max_lag must be at least 2")
    mi = mutual_information(series, max_lag + 1, n_bins, smoothing)
    tol = rel_tol * mi[0]
    for tau in range(1, max_lag + 1):
        if mi[tau + 1] >= mi[tau] - tol:
            return tau, True
    log.warning("ami_lag: no local minimum up to lag %d", max_lag)
    return max_lag, False


def fnn_percentages(series, lag_steps: int, dims, r_tol: float = 10.0, a_tol: float = 2.0,
                    theiler: int = 10, max_points: int | None = None,
                    seed: int = 0) -> list[float]:
    """Percentage of false nearest neighbors for each embedding dimension.

    A neighbor is false when adding the next delay coordinate stretches the
    pair distance by more than ``r_tol`` or makes it exceed ``a_tol`` times
    the attractor size (the standard deviation of the series). Temporal
    neighbors within ``theiler`` samples are never used.
    """
    s = _scalar(series)
    if len(s) != 1:
        s = [np.concatenate(s)]
    s = s[0]
    size = float(np.std(s))
    out = []
    for d in dims:
        n = len(s) - d * lag_steps
        if n < 2 * theiler + 10:
            raise ValueError(f"series too short for dimension {d + 1} with lag {lag_steps}")
        Y = embed_array(s, d, lag_steps)[:n]
        extra = s[d * lag_steps: d * lag_steps + n]
        tree = cKDTree(Y)
        queries = np.arange(n)
        if max_points is not None and n > max_points:
            rng = np.random.default_rng(seed)
            queries = np.sort(rng.choice(n, max_points, replace=False))
        k = 2 * theiler + 2
        dist, idx = tree.query(Y[queries], k=k)
        ok = np.abs(idx - queries[:, None]) > theiler
        first = np.argmax(ok, axis=1)
        rows = np.arange(len(queries))
        has = ok[rows, first]
        dist, nb, q = dist[rows, first][has], idx[rows, first][has], queries[has]
        gap = np.abs(extra[q] - extra[nb])
        # floor keeps roundoff between repeated points from counting as stretching
        crit1 = gap > r_tol * np.maximum(dist, 1e-10 * size)
        crit2 = np.sqrt(dist ** 2 + gap ** 2) / size > a_tol
        out.append(float(100.0 * np.mean(crit1 | crit2)))
    return out


def fnn_dimension(series, lag_steps: int, dims, r_tol: float = 10.0,
                  threshold_pct: float = 1.0, theiler: int = 10,
                  max_points: int | None = None) -> FnnReport:
    dims = list(dims)
    if dims != sorted(dims):
        raise ValueError("dims must be ascending")
    if r_tol <= 1:
        raise ValueError("r_tol must exceed 1")
    pct = fnn_percentages(series, lag_steps, dims, r_tol, theiler=theiler, max_points=max_points)
    chosen = next((d for d, p in zip(dims, pct) if p < threshold_pct), None)
    return FnnReport(dims, pct, chosen, threshold_pct, lag_steps)
