"""Spectral submanifolds fitted as polynomial graphs over a tangent space.

The manifold is parametrized as

    y = origin + V1 @ eta + Vnl @ phi(eta),     eta = V1.T @ (y - origin),

where ``phi`` collects the monomials of orders 2..K of the reduced
coordinates, ``V1`` has orthonormal columns and ``V1.T @ Vnl = 0``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize

from .trajectory import TrajectorySet

log = logging.getLogger(__name__)

FORMAT_TAG = "ssmchaos-ssm"
FORMAT_VERSION = 1
ORDERING = "grlex"


def strip_comment_header(text: str) -> tuple[list[str], int]:
    """Split ``text`` into lines, dropping leading ``#`` comment lines.

    Returns the remaining lines and the number of lines dropped, so parse
    errors can still report file line numbers.
    """
    lines = text.splitlines()
    n = 0
    while n < len(lines) and lines[n].startswith("#"):
        n += 1
    return lines[n:], n


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MonomialBasis:
    """All ``dim``-variate monomials with total degree in [order_min, order_max].

    Ordered by degree, and within a degree lexicographically by decreasing
    exponent of the first variable, so dim=2 gives u1^2, u1 u2, u2^2, ...
    """

    dim: int
    order_min: int
    order_max: int

    def __post_init__(self):
        if self.dim < 1 or self.order_min < 0 or self.order_min > self.order_max:
            raise ValueError(f"invalid monomial basis ({self.dim}, {self.order_min}, {self.order_max})")

    @cached_property
    def exponents(self) -> np.ndarray:
        rows = []
        for k in range(self.order_min, self.order_max + 1):
            for combo in itertools.combinations_with_replacement(range(self.dim), k):
                e = [0] * self.dim
                for i in combo:
                    e[i] += 1
                rows.append(e)
        return np.array(rows, dtype=int).reshape(-1, self.dim)

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.exponents.sum(axis=1)

    def __len__(self) -> int:
        return self.exponents.shape[0]

    def count(self, k: int) -> int:
        return int(np.sum(self.degrees == k))

    def evaluate(self, eta: np.ndarray) -> np.ndarray:
        """Monomial vectors of the rows of ``eta``: ``(N, dim) -> (N, len(self))``."""
        eta = np.asarray(eta, dtype=float)
        single = eta.ndim == 1
        eta = np.atleast_2d(eta)
        pw = _powers(eta, self.order_max)
        out = np.ones((eta.shape[0], len(self)))
        E = self.exponents
        for i in range(self.dim):
            out *= pw[E[:, i], :, i].T
        return out[0] if single else out

    def derivative(self, eta: np.ndarray, var: int) -> np.ndarray:
        """d phi / d eta_var at the rows of ``eta``, shape ``(N, len(self))``."""
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        pw = _powers(eta, self.order_max)
        E = self.exponents
        out = np.ones((eta.shape[0], len(self)))
        for i in range(self.dim):
            if i == var:
                e = np.maximum(E[:, i] - 1, 0)
                out *= pw[e, :, i].T * E[:, i]
            else:
                out *= pw[E[:, i], :, i].T
        return out


def _powers(eta: np.ndarray, kmax: int) -> np.ndarray:
    pw = np.empty((kmax + 1,) + eta.shape)
    pw[0] = 1.0
    for k in range(1, kmax + 1):
        pw[k] = pw[k - 1] * eta
    return pw


def monomials(dim: int, l: int, r: int) -> MonomialBasis:
    if not (1 <= l <= r) or dim < 1:
        raise ValueError("need 1 <= l <= r and dim >= 1")
    return MonomialBasis(dim, l, r)


def rescale_coefficients(coef: np.ndarray, basis: MonomialBasis, scale: float) -> np.ndarray:
    """Coefficients w.r.t. ``phi(eta)`` from coefficients w.r.t. ``phi(eta / scale)``."""
    return coef / scale ** basis.degrees[None, :]


def ridge_lstsq(A: np.ndarray, B: np.ndarray, ridge: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Least squares ``A X ~ B`` by column-equilibrated normal equations.

    A ridge of ``ridge * trace`` is always added; the flag reports whether the
    Gram matrix was numerically rank deficient.
    """
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    As = A / norms
    G = As.T @ As
    tr = np.trace(G)
    G[np.diag_indices_from(G)] += ridge * tr
    rhs = As.T @ B
    try:
        L = np.linalg.cholesky(G)
        X = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        deficient = False
    except np.linalg.LinAlgError:
        X = np.linalg.lstsq(G, rhs, rcond=None)[0]
        deficient = True
    if not deficient:
        ev = np.linalg.eigvalsh(G)
        deficient = ev[0] < 1e3 * ridge * tr
    X = X / norms[:, None] if X.ndim == 2 else X / norms
    return X, deficient


# --------------------------------------------------------------------------


@dataclass
class SsmModel:
    V1: np.ndarray
    Vnl: np.ndarray
    order: int
    origin: np.ndarray
    anchor_mode: str = "fixed"  # or "constant": origin regressed from data

    def __post_init__(self):
        self.V1 = np.asarray(self.V1, dtype=float)
        self.Vnl = np.asarray(self.Vnl, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.Vnl.shape != (self.rho, len(self.basis)):
            raise ValueError("Vnl shape does not match the monomial basis")

    @property
    def rho(self) -> int:
        return self.V1.shape[0]

    @property
    def d(self) -> int:
        return self.V1.shape[1]

    @property
    def basis(self) -> MonomialBasis:
        return MonomialBasis(self.d, 2, max(self.order, 2))

    def constraint_residuals(self) -> tuple[float, float]:
        orth = np.linalg.norm(self.V1.T @ self.V1 - np.eye(self.d))
        cross = np.linalg.norm(self.V1.T @ self.Vnl)
        return float(orth), float(cross)

    def project(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (y - self.origin) @ self.V1

    def lift(self, eta: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        y = self.origin + eta @ self.V1.T
        if self.order >= 2:
            y = y + self.basis.evaluate(eta) @ self.Vnl.T
        return y

    def reduce(self, data: TrajectorySet) -> TrajectorySet:
        return data.map(self.project)

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{FORMAT_TAG} v{FORMAT_VERSION}",
                 f"rho {self.rho}", f"d {self.d}", f"order {self.order}",
                 f"ordering {ORDERING}", f"anchor {self.anchor_mode}",
                 "origin " + " ".join(repr(float(v)) for v in self.origin),
                 f"V1 {self.rho} {self.d}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.V1]
        lines.append(f"Vnl {self.rho} {self.Vnl.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in self.Vnl]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SsmModel":
        lines, skipped = strip_comment_header(text)
        it = iter(enumerate(lines, 1 + skipped))

        def field(name):
            try:
                n, line = next(it)
            except StopIteration:
                raise ModelFormatError(f"unexpected end of file, expected field {name!r}")
            parts = line.split()
            if not parts or parts[0] != name:
                raise ModelFormatError(f"line {n}: expected field {name!r}, got {line[:40]!r}")
            return n, parts[1:]

        def matrix(name):
            n, (r, c) = field(name)
            r, c = int(r), int(c)
            rows = []
            for _ in range(r):
                m, line = next(it, (None, None))
                if line is None:
                    raise ModelFormatError(f"field {name!r}: truncated matrix")
                try:
                    vals = [float(v) for v in line.split()]
                except ValueError:
                    raise ModelFormatError(f"line {m}: field {name!r}: non-numeric entry")
                if len(vals) != c:
                    raise ModelFormatError(f"line {m}: field {name!r}: expected {c} columns")
                rows.append(vals)
            return np.array(rows).reshape(r, c)

        n, header = next(it, (1 + skipped, ""))
        if not header.startswith(FORMAT_TAG):
            raise ModelFormatError(f"line {n}: not an SSM model file (header {header[:30]!r})")
        try:
            rho = int(field("rho")[1][0])
            d = int(field("d")[1][0])
            order = int(field("order")[1][0])
            ordering = field("ordering")[1][0]
            anchor = field("anchor")[1][0]
            origin = np.array([float(v) for v in field("origin")[1]])
        except (IndexError, ValueError) as exc:
            raise ModelFormatError(f"malformed header field: {exc}")
        if ordering != ORDERING:
            raise ModelFormatError(f"field 'ordering': unsupported {ordering!r}")
        if origin.size != rho:
            raise ModelFormatError("field 'origin': wrong length")
        V1 = matrix("V1")
        Vnl = matrix("Vnl")
        if V1.shape != (rho, d):
            raise ModelFormatError("field 'V1': shape disagrees with header")
        return cls(V1, Vnl, order, origin, anchor)


@dataclass
class FitReport:
    invariance_error: float
    order: int
    d: int
    n_points: int
    solver_iterations: int
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    rank_deficient: bool = False


def invariance_error(model: SsmModel, data: TrajectorySet | np.ndarray) -> float:
    """Mean distance between points and their lifted projections, divided by
    the largest point norm of the same data."""
    Y = data.stacked() if isinstance(data, TrajectorySet) else np.atleast_2d(data)
    if Y.size == 0:
        raise ValueError("empty data")
    scale = np.max(np.linalg.norm(Y, axis=1))
    if scale == 0:
        raise ZeroDivisionError("all-zero data: invariance error undefined")
    err = np.linalg.norm(Y - model.lift(model.project(Y)), axis=1)
    return float(np.mean(err) / scale)


# --------------------------------------------------------------------------
# fitting


def _as_matrix(data) -> np.ndarray:
    return data.stacked() if isinstance(data, TrajectorySet) else np.atleast_2d(np.asarray(data, float))


def _check_fit_inputs(Y: np.ndarray, d: int, order: int):
    rho = Y.shape[1]
    if not 1 <= d <= rho:
        raise ValueError(f"manifold dimension {d} must lie in [1, {rho}]")
    # each ambient coordinate is an independent regression on these features
    n_coef = len(MonomialBasis(d, 1, max(order, 1)))
    if Y.shape[0] < 10 * n_coef:
        raise ValueError(f"not enough points ({Y.shape[0]}) for d={d}, order={order}")


def _leading_subspace(Y: np.ndarray, d: int) -> np.ndarray:
    # eigen-decomposition of the (rho x rho) second-moment matrix: cost linear in N
    C = Y.T @ Y
    w, U = np.linalg.eigh(C)
    V1 = U[:, ::-1][:, :d]
    # deterministic sign: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(V1), axis=0)
    V1 = V1 * np.sign(V1[idx, np.arange(d)])
    return V1


class _GraphProblem:
    """Variable-projection form of the graph-fit objective for fixed data."""

    def __init__(self, Y: np.ndarray, d: int, order: int, constant: bool, ridge: float):
        self.Y = Y
        self.d = d
        self.order = order
        self.constant = constant
        self.ridge = ridge
        self.basis = MonomialBasis(d, 2, max(order, 2))
        self.scale = 1.0
        self.rank_deficient = False

    def features(self, eta: np.ndarray) -> np.ndarray:
        cols = []
        if self.constant:
            cols.append(np.ones((eta.shape[0], 1)))
        if self.order >= 2:
            cols.append(self.basis.evaluate(eta / self.scale))
        return np.hstack(cols) if cols else np.empty((eta.shape[0], 0))

    def solve(self, V1: np.ndarray):
        """Optimal coefficients and squared-error objective for fixed V1."""
        eta = self.Y @ V1
        R = self.Y - eta @ V1.T
        Phi = self.features(eta)
        if Phi.shape[1] == 0:
            B = np.zeros((0, self.Y.shape[1]))
        else:
            B, deficient = ridge_lstsq(Phi, R, self.ridge)
            self.rank_deficient |= deficient
            # the fit target lies in the complement of span(V1); remove round-off drift
            B = B - (B @ V1) @ V1.T
        E = R - Phi @ B
        return B, float(np.sum(E * E)), eta, Phi, E

    def gradient(self, V1, B, eta, E) -> np.ndarray:
        # envelope theorem: differentiate at fixed optimal coefficients
        G = -2.0 * E.T @ eta
        if self.order >= 2:
            Bnl = B[1:] if self.constant else B
            C = E @ Bnl.T  # (N, D)
            g = np.empty_like(eta)
            es = eta / self.scale
            for i in range(self.d):
                g[:, i] = np.sum(C * self.basis.derivative(es, i), axis=1) / self.scale
            G += -2.0 * self.Y.T @ g
        return G

    def model(self, V1: np.ndarray, B: np.ndarray) -> SsmModel:
        rho = self.Y.shape[1]
        origin = np.zeros(rho)
        if self.constant:
            origin = B[0].copy()
            B = B[1:]
        if self.order >= 2:
            Vnl = rescale_coefficients(B.T, self.basis, self.scale)
        else:
            Vnl = np.zeros((rho, len(self.basis)))
        return SsmModel(V1, Vnl, self.order, origin, "constant" if self.constant else "fixed")


def fit_ssm_fast(data, d: int, order: int, constant: bool = False,
                 ridge: float = 1e-10) -> tuple[SsmModel, FitReport]:
    """Tangent space from the leading singular vectors, graph by explicit regression."""
    Y = _as_matrix(data)
    _check_fit_inputs(Y, d, order)
    V1 = _leading_subspace(Y, d)
    prob = _GraphProblem(Y, d, order, constant, ridge)
    prob.scale = max(float(np.max(np.abs(Y @ V1))), 1e-300)
    B, obj, *_ = prob.solve(V1)
    model = prob.model(V1, B)
    report = FitReport(invariance_error(model, Y), order, d, Y.shape[0], 0, True, [obj],
                       prob.rank_deficient)
    return model, report


def fit_ssm(data, d: int, order: int, constant: bool = False, max_iter: int = 500,
            rtol: float = 1e-9, ridge: float = 1e-10,
            init: SsmModel | None = None) -> tuple[SsmModel, FitReport]:
    """Constrained least-squares graph fit with an optimized tangent space.

    The nonlinear coefficients are eliminated by exact regression for every
    candidate V1, which leaves an objective that depends only on span(V1).
    That objective is minimized by L-BFGS over the chart
    ``span(V0 + V0_perp @ X)`` centred on the principal subspace ``V0``.
    ``objective_history`` holds the squared error of every accepted iterate
    and is non-increasing.
    """
    Y = _as_matrix(data)
    _check_fit_inputs(Y, d, order)
    rho = Y.shape[1]
    V0 = _leading_subspace(Y, d) if init is None else init.V1.copy()
    prob = _GraphProblem(Y, d, order, constant, ridge)
    prob.scale = max(float(np.max(np.abs(Y @ V0))), 1e-300)
    B, obj0, *_ = prob.solve(V0)
    history = [obj0]
    if d == rho or order < 2:
        model = prob.model(V0, B)
        return model, FitReport(invariance_error(model, Y), order, d, Y.shape[0], 0, True, history,
                                prob.rank_deficient)

    Q, _ = np.linalg.qr(V0, mode="complete")
    V0p = Q[:, d:]
    shape = (rho - d, d)
    cache = {}

    def frame(x):
        A = V0 + V0p @ x.reshape(shape)
        w, U = np.linalg.eigh(A.T @ A)
        S_inv = (U / np.sqrt(w)) @ U.T
        return A @ S_inv, S_inv

    def fun(x):
        V1, S_inv = frame(x)
        B, obj, eta, _, E = prob.solve(V1)
        G = prob.gradient(V1, B, eta, E)
        G = G - V1 @ (V1.T @ G)
        grad = V0p.T @ G @ S_inv
        cache["last"] = (x.copy(), obj)
        return obj / obj0, grad.ravel() / obj0

    def record(xk):
        last = cache.get("last")
        obj = last[1] if last is not None and np.array_equal(last[0], xk) else fun(xk)[0] * obj0
        if obj <= history[-1]:
            history.append(obj)

    res = optimize.minimize(fun, np.zeros(shape).ravel(), jac=True, method="L-BFGS-B",
                            callback=record,
                            options={"maxiter": max_iter, "ftol": rtol, "gtol": 1e-12})
    V1, _ = frame(res.x)
    B, obj, *_ = prob.solve(V1)
    if obj > history[0]:
        V1, obj = V0, history[0]
        B, *_ = prob.solve(V1)
    # canonical orientation: rotate so the reduced coordinates are principal axes
    eta = Y @ V1
    w, U = np.linalg.eigh(eta.T @ eta)
    V1 = V1 @ U[:, ::-1]
    idx = np.argmax(np.abs(V1), axis=0)
    V1 = V1 * np.sign(V1[idx, np.arange(d)])
    B, obj, *_ = prob.solve(V1)
    model = prob.model(V1, B)
    converged = bool(res.success) or res.nit < max_iter
    report = FitReport(invariance_error(model, Y), order, d, Y.shape[0], int(res.nit), converged,
                       history, prob.rank_deficient)
    if prob.rank_deficient:
        log.info("fit_ssm: near rank-deficient regression (ridge applied)")
    return model, report
