"""Reduced dynamics on the manifold: polynomial flows and maps, modal
coordinates, nearest-neighbor one-step predictors, and forced flows."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from .manifold import (MonomialBasis, ModelFormatError, rescale_coefficients, ridge_lstsq,
                       strip_comment_header)
from .trajectory import TrajectorySet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# derivatives


_EDGE = np.array([[-25.0, 48.0, -36.0, 16.0, -3.0],
                  [-3.0, -10.0, 18.0, -6.0, 1.0]]) / 12.0


def _derivative(x: np.ndarray, h: float) -> np.ndarray:
    n = x.shape[0]
    if n < 5:
        raise ValueError("need at least 5 samples for fourth-order differences")
    out = np.empty_like(x)
    out[2:-2] = (x[:-4] - 8 * x[1:-3] + 8 * x[3:-1] - x[4:]) / 12.0
    out[0] = _EDGE[0] @ x[:5]
    out[1] = _EDGE[1] @ x[:5]
    out[-1] = -(_EDGE[0] @ x[-1:-6:-1])
    out[-2] = -(_EDGE[1] @ x[-1:-6:-1])
    return out / h


def estimate_derivatives(traj: TrajectorySet) -> TrajectorySet:
    """Fourth-order finite differences: central inside, one-sided at the ends."""
    return traj.map(lambda s: _derivative(s, traj.dt))


# --------------------------------------------------------------------------
# polynomial models


@dataclass
class ModalForm:
    W: np.ndarray            # columns: real (block) eigenvectors of R1
    eigenvalues: np.ndarray  # complex, one per reduced coordinate
    linear: np.ndarray       # W^-1 R1 W, diagonal up to 2x2 blocks
    N: np.ndarray            # nonlinear coefficients in modal coordinates


@dataclass
class PolyFlowModel:
    """``d eta/dt = R phi(eta)`` (continuous) or ``eta+ = R phi(eta)`` (discrete),
    with ``phi`` the monomials of orders 1..K."""

    R: np.ndarray
    order: int
    kind: str = "continuous"
    modal: ModalForm | None = None
    residual: float = float("nan")
    rank_deficient: bool = False

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        if self.kind not in ("continuous", "discrete"):
            raise ValueError("kind must be 'continuous' or 'discrete'")
        if self.R.shape[1] != len(self.basis):
            raise ValueError("coefficient matrix does not match the monomial basis")

    @property
    def d(self) -> int:
        return self.R.shape[0]

    @property
    def basis(self) -> MonomialBasis:
        return MonomialBasis(self.R.shape[0], 1, self.order)

    @property
    def R1(self) -> np.ndarray:
        return self.R[:, : self.d]

    @property
    def Rnl(self) -> np.ndarray:
        return self.R[:, self.d:]

    def __call__(self, eta: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        return self.basis.evaluate(eta) @ self.R.T

    def modal_rhs(self, xi: np.ndarray) -> np.ndarray:
        if self.modal is None:
            raise ValueError("modal form not computed")
        xi = np.asarray(xi, dtype=float)
        out = xi @ self.modal.linear.T
        if self.order >= 2:
            out = out + MonomialBasis(self.d, 2, self.order).evaluate(xi) @ self.modal.N.T
        return out

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"ssmchaos-polyflow v{FORMAT_VERSION}", f"kind {self.kind}", f"d {self.d}",
                 f"order {self.order}", "ordering grlex", f"R {self.R.shape[0]} {self.R.shape[1]}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.R]
        lines.append(f"modal {int(self.modal is not None)}")
        if self.modal is not None:
            lines.append(f"W {self.d} {self.d}")
            lines += [" ".join(repr(float(v)) for v in row) for row in self.modal.W]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PolyFlowModel":
        lines, off = strip_comment_header(text)
        if not lines or not lines[0].startswith("ssmchaos-polyflow"):
            raise ModelFormatError(f"line {off + 1}: not a polynomial flow model file")
        kv = {}
        i = 1
        try:
            for name in ("kind", "d", "order", "ordering"):
                parts = lines[i].split()
                if parts[0] != name:
                    raise ModelFormatError(f"line {off + i + 1}: expected field {name!r}")
                kv[name] = parts[1]
                i += 1
            parts = lines[i].split()
            if parts[0] != "R":
                raise ModelFormatError(f"line {off + i + 1}: expected field 'R'")
            r, c = int(parts[1]), int(parts[2])
            try:
                R = np.array([[float(v) for v in lines[i + 1 + j].split()] for j in range(r)])
            except ValueError:
                raise ModelFormatError("field 'R': non-numeric entry")
            if R.shape != (r, c):
                raise ModelFormatError("field 'R': shape disagrees with header")
            i += 1 + r
            model = cls(R, int(kv["order"]), kv["kind"])
            if lines[i].split() == ["modal", "1"]:
                model = modal_transform(model)
        except IndexError:
            raise ModelFormatError("unexpected end of file")
        return model


def _regress(X: np.ndarray, T: np.ndarray, order: int, kind: str) -> PolyFlowModel:
    d = X.shape[1]
    basis = MonomialBasis(d, 1, order)
    if X.shape[0] < 10 * len(basis):
        raise ValueError(f"not enough samples ({X.shape[0]}) for {len(basis)} coefficients")
    scale = max(float(np.max(np.abs(X))), 1e-300)
    Phi = basis.evaluate(X / scale)
    C, deficient = ridge_lstsq(Phi, T)
    if deficient:
        log.warning("polynomial regression near rank deficient; ridge applied")
    resid = float(np.sqrt(np.mean(np.sum((T - Phi @ C) ** 2, axis=1))))
    R = rescale_coefficients(C.T, basis, scale)
    return PolyFlowModel(R, order, kind, residual=resid, rank_deficient=deficient)


def fit_poly_flow(etas: TrajectorySet, order: int,
                  derivatives: TrajectorySet | None = None) -> PolyFlowModel:
    """Least-squares polynomial vector field from reduced trajectories."""
    if derivatives is None:
        derivatives = estimate_derivatives(etas)
    return _regress(etas.stacked(), derivatives.stacked(), order, "continuous")


def fit_poly_map(etas: TrajectorySet, order: int) -> PolyFlowModel:
    """Least-squares polynomial map between consecutive samples."""
    X = np.vstack([s[:-1] for s in etas.states])
    T = np.vstack([s[1:] for s in etas.states])
    return _regress(X, T, order, "discrete")


# -- modal coordinates ------------------------------------------------------


def _real_eigenbasis(A: np.ndarray, tol: float = 1e-10):
    # LAPACK order is kept, so a diagonal A gives W = I; conjugate pairs are adjacent
    lam, V = np.linalg.eig(A)
    d = A.shape[0]
    cols, vals = [], []
    i = 0
    while i < d:
        v = V[:, i]
        if abs(lam[i].imag) <= tol * max(1.0, abs(lam[i])):
            v = v.real if np.linalg.norm(v.real) >= np.linalg.norm(v.imag) else v.imag
            j = np.argmax(np.abs(v))
            cols.append(np.sign(v[j]) * v / np.linalg.norm(v))
            vals.append(lam[i].real + 0j)
            i += 1
        else:
            # pair (a +- i w): columns Re v, Im v give the block [[a, w], [-w, a]]
            if lam[i].imag < 0:
                lam[i], v = np.conj(lam[i]), np.conj(v)
            j = np.argmax(np.abs(v))
            v = v * np.exp(-1j * np.angle(v[j]))
            v = v / np.linalg.norm(v)
            cols += [v.real, v.imag]
            vals += [lam[i], np.conj(lam[i])]
            i += 2
    return np.column_stack(cols), np.array(vals)


def _compose_linear(coef: np.ndarray, basis: MonomialBasis, W: np.ndarray) -> np.ndarray:
    """Coefficients of ``p(W xi)`` in the same monomial basis, for ``p = coef @ phi``."""
    d = basis.dim
    index = {tuple(e): i for i, e in enumerate(basis.exponents)}
    out = np.zeros((coef.shape[0], len(basis)))
    for m, e in enumerate(basis.exponents):
        poly = {(0,) * d: 1.0}
        for var, power in enumerate(e):
            for _ in range(power):
                new = {}
                for mono, c in poly.items():
                    for j in range(d):
                        w = W[var, j]
                        if w == 0.0:
                            continue
                        key = list(mono)
                        key[j] += 1
                        key = tuple(key)
                        new[key] = new.get(key, 0.0) + c * w
                poly = new
        for mono, c in poly.items():
            out[:, index[mono]] += coef[:, m] * c
    return out


def modal_transform(model: PolyFlowModel, max_cond: float = 1e8) -> PolyFlowModel:
    """Express the model in coordinates xi = W^-1 eta that (block-)diagonalize R1."""
    W, lam = _real_eigenbasis(model.R1)
    if np.linalg.cond(W) > max_cond:
        raise np.linalg.LinAlgError("linear part is defective or its eigenvectors are ill-conditioned")
    Winv = np.linalg.inv(W)
    linear = Winv @ model.R1 @ W
    if model.order >= 2:
        nl_basis = MonomialBasis(model.d, 2, model.order)
        N = Winv @ _compose_linear(model.Rnl, nl_basis, W)
    else:
        N = np.zeros((model.d, 0))
    return replace(model, modal=ModalForm(W, lam, linear, N))


# --------------------------------------------------------------------------
# nearest neighbors


@dataclass
class KnnModel:
    k: int
    X: np.ndarray        # training points eta_j
    X_next: np.ndarray   # their successors eta_j+
    dt: float
    theiler: int = 0
    tree: cKDTree = field(repr=False, default=None)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.tree is None:
            self.tree = cKDTree(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def to_text(self) -> str:
        lines = [f"ssmchaos-knn v{FORMAT_VERSION}", f"k {self.k}", f"theiler {self.theiler}",
                 f"dt {self.dt!r}", f"pairs {self.X.shape[0]} {self.d}"]
        lines += [" ".join(repr(float(v)) for v in np.concatenate([a, b]))
                  for a, b in zip(self.X, self.X_next)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "KnnModel":
        lines, off = strip_comment_header(text)
        if not lines or not lines[0].startswith("ssmchaos-knn"):
            raise ModelFormatError(f"line {off + 1}: not a kNN model file")
        try:
            k = int(lines[1].split()[1])
            theiler = int(lines[2].split()[1])
            dt = float(lines[3].split()[1])
            _, n, d = lines[4].split()
            P = np.loadtxt(lines[5: 5 + int(n)], ndmin=2)
        except (IndexError, ValueError) as exc:
            raise ModelFormatError(f"malformed kNN model: {exc}")
        if P.shape != (int(n), 2 * int(d)):
            raise ModelFormatError("field 'pairs': shape disagrees with header")
        d = int(d)
        return cls(k, P[:, :d], P[:, d:], dt, theiler)


def knn_build(etas: TrajectorySet, k: int, theiler: int = 0) -> KnnModel:
    X = np.vstack([s[:-1] for s in etas.states])
    Xn = np.vstack([s[1:] for s in etas.states])
    if X.shape[0] < k + theiler + 1:
        raise ValueError(f"k={k} exceeds the usable training pairs ({X.shape[0]})")
    return KnnModel(k, X, Xn, etas.dt, theiler)


def knn_step(model: KnnModel, eta: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Inverse-distance weighted average of the successors of the k nearest
    training points. Rows of ``eta`` are predicted independently.

    ``exclude`` gives, per query, the training index it was replayed from;
    neighbors within the Theiler window of that index are skipped.
    """
    if model.X.shape[0] == 0:
        raise ValueError("empty kNN model")
    eta = np.asarray(eta, dtype=float)
    single = eta.ndim == 1
    Q = np.atleast_2d(eta)
    k = model.k
    if exclude is not None and model.theiler > 0:
        kq = k + 2 * model.theiler + 1
        dist, idx = model.tree.query(Q, k=kq)
        ex = np.atleast_1d(exclude)[:, None]
        ok = np.abs(idx - ex) > model.theiler
        order = np.argsort(~ok, axis=1, kind="stable")[:, :k]
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
    else:
        dist, idx = model.tree.query(Q, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
    succ = model.X_next[idx]  # (n, k, d)
    out = np.empty((Q.shape[0], model.d))
    hit = dist[:, 0] == 0.0
    out[hit] = succ[hit, 0]
    if np.any(~hit):
        w = 1.0 / dist[~hit]
        w /= w.sum(axis=1, keepdims=True)
        out[~hit] = np.einsum("nk,nkd->nd", w, succ[~hit])
    return out[0] if single else out


# --------------------------------------------------------------------------
# forcing


@dataclass
class ForcedPolyFlow:
    """Autonomous polynomial flow plus ``A cos(omega t) (sin phi, cos phi)``
    acting on two reduced coordinates (``axes``)."""

    base: PolyFlowModel
    A: float
    omega: float
    phi: float
    axes: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.A < 0 or not self.omega > 0:
            raise ValueError("need A >= 0 and omega > 0")
        if self.base.kind != "continuous":
            raise ValueError("forcing applies to continuous models only")

    @property
    def d(self) -> int:
        return self.base.d

    def direction(self) -> np.ndarray:
        v = np.zeros(self.d)
        v[self.axes[0]] = math.sin(self.phi)
        v[self.axes[1]] = math.cos(self.phi)
        return v

    def rhs(self, t, eta: np.ndarray) -> np.ndarray:
        return self.base(eta) + self.A * math.cos(self.omega * t) * self.direction()


def calibrate_forcing(base: PolyFlowModel, forced_traj: TrajectorySet, omega: float,
                      axes: tuple[int, int] = (0, 1), min_signal: float = 1e-12) -> ForcedPolyFlow:
    """Fit forcing amplitude and direction angle to a forced reduced trajectory.

    The model residual ``d eta/dt - R(eta)`` is regressed on ``cos(omega t)``
    in the two forced coordinates; both coefficients enter linearly.
    """
    if base.kind != "continuous":
        raise ValueError("base model must be continuous")
    deriv = estimate_derivatives(forced_traj)
    num = np.zeros(2)
    den = 0.0
    for k, (s, ds) in enumerate(zip(forced_traj.states, deriv.states)):
        c = np.cos(omega * forced_traj.times(k))
        r = ds - base(s)
        num += c @ r[:, list(axes)]
        den += float(c @ c)
    if den <= min_signal:
        raise ValueError("degenerate forcing calibration: no harmonic signal")
    a, b = num / den  # a = A sin(phi), b = A cos(phi)
    A = math.hypot(a, b)
    phi = math.atan2(a, b) if A > 0 else 0.0
    if phi <= -math.pi:
        phi += 2 * math.pi
    return ForcedPolyFlow(base, A, omega, phi, tuple(axes))


# --------------------------------------------------------------------------
# forecasting


Forecastable = Union[PolyFlowModel, KnnModel, ForcedPolyFlow]


@dataclass
class Forecast:
    trajectory: TrajectorySet
    blew_up: bool = False
    blowup_step: int | None = None


def _vector_field(model):
    if isinstance(model, ForcedPolyFlow):
        return model.rhs
    return lambda t, eta: model(eta)


def propagate(model: Forecastable, eta0: np.ndarray, n_steps: int, dt: float, t0: float = 0.0,
              bound: float = np.inf) -> np.ndarray:
    """Advance a batch of initial conditions; returns ``(n_steps+1, m, d)``.

    Rows whose norm exceeds ``bound`` are frozen (NaN afterwards).
    """
    X = np.atleast_2d(np.asarray(eta0, dtype=float)).copy()
    out = np.full((n_steps + 1,) + X.shape, np.nan)
    out[0] = X
    alive = np.ones(X.shape[0], dtype=bool)
    if isinstance(model, KnnModel) or (isinstance(model, PolyFlowModel) and model.kind == "discrete"):
        step = (lambda x, t: knn_step(model, x)) if isinstance(model, KnnModel) else (lambda x, t: model(x))
        for i in range(n_steps):
            X[alive] = step(X[alive], t0 + i * dt)
            alive &= np.linalg.norm(X, axis=1) <= bound
            out[i + 1, alive] = X[alive]
            if not alive.any():
                break
        return out
    f = _vector_field(model)
    h = dt
    for i in range(n_steps):
        t = t0 + i * h
        Xa = X[alive]
        k1 = f(t, Xa)
        k2 = f(t + h / 2, Xa + h / 2 * k1)
        k3 = f(t + h / 2, Xa + h / 2 * k2)
        k4 = f(t + h, Xa + h * k3)
        X[alive] = Xa + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        with np.errstate(invalid="ignore"):
            alive &= np.all(np.isfinite(X), axis=1) & (np.linalg.norm(X, axis=1) <= bound)
        out[i + 1, alive] = X[alive]
        if not alive.any():
            break
    return out


def forecast(model: Forecastable, eta0: np.ndarray, n_steps: int, dt: float, t0: float = 0.0,
             bound: float = np.inf) -> Forecast:
    """Integrate (RK4) or iterate a reduced model from one initial condition.

    A trajectory whose norm exceeds ``bound`` is truncated and flagged.
    """
    if isinstance(model, KnnModel) and not math.isclose(dt, model.dt, rel_tol=1e-9):
        raise ValueError("kNN forecasts must use the training sampling interval")
    out = propagate(model, np.asarray(eta0, dtype=float)[None, :], n_steps, dt, t0, bound)[:, 0]
    finite = np.all(np.isfinite(out), axis=1)
    if finite.all():
        return Forecast(TrajectorySet([out], dt, t0=t0))
    n = int(np.argmin(finite))
    log.warning("forecast blew up at step %d", n)
    return Forecast(TrajectorySet([out[:n]], dt, t0=t0), True, n)
