import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import linprog

from ssmchaos.dynamics import (ForcedPolyFlow, KnnModel, PolyFlowModel, calibrate_forcing,
                               estimate_derivatives, fit_poly_flow, fit_poly_map, forecast, knn_build,
                               knn_step, modal_transform, propagate)
from ssmchaos.manifold import ModelFormatError, MonomialBasis
from ssmchaos.trajectory import TrajectorySet


def _ts(states, dt):
    return TrajectorySet([np.asarray(s, float) for s in states], dt)


# -- derivatives -----------------------------------------------------------------


def test_derivative_of_sine():
    t = np.arange(0, 10, 0.01)
    d = estimate_derivatives(_ts([np.sin(t)[:, None]], 0.01))
    assert np.max(np.abs(d[0][:, 0] - np.cos(t))) < 1e-7


def test_derivative_constant_and_cubic():
    d = estimate_derivatives(_ts([np.full((20, 2), 3.0)], 0.1))
    np.testing.assert_allclose(d[0], 0.0, atol=1e-12)
    t = np.arange(0, 2, 0.1)
    d = estimate_derivatives(_ts([(t ** 3)[:, None]], 0.1))
    np.testing.assert_allclose(d[0][:, 0], 3 * t ** 2, atol=1e-10)


# -- polynomial fits -------------------------------------------------------------


def _cubic_field():
    basis = MonomialBasis(3, 1, 3)
    R = np.zeros((3, len(basis)))
    R[:, :3] = [[-1.0, 0.5, 0.0], [-0.5, -1.0, 0.0], [0.0, 0.0, -2.0]]
    rng = np.random.default_rng(0)
    R[:, 3:] = 0.1 * rng.standard_normal((3, len(basis) - 3))
    R[:, 3 + 6:] *= 0.5
    return PolyFlowModel(R, 3)


def test_cubic_field_refit():
    truth = _cubic_field()
    rng = np.random.default_rng(1)
    t = np.arange(0, 4, 0.005)
    trajs = []
    for x0 in rng.uniform(-0.8, 0.8, (8, 3)):
        sol = solve_ivp(lambda _, x: truth(x), (0, t[-1]), x0, t_eval=t, rtol=1e-12, atol=1e-13)
        trajs.append(sol.y.T)
    fit = fit_poly_flow(_ts(trajs, 0.005), 3)
    assert np.max(np.abs(fit.R - truth.R)) < 1e-4


def test_linear_flow_order_one():
    A = np.array([[-0.3, 1.0], [-1.0, -0.3]])
    t = np.arange(0, 6, 0.01)
    trajs = [np.array([expm(A * s) @ x0 for s in t]) for x0 in ([1.0, 0.0], [0.2, -1.0])]
    fit = fit_poly_flow(_ts(trajs, 0.01), 1)
    np.testing.assert_allclose(fit.R1, A, atol=1e-6)


def test_residual_non_increasing_with_order():
    truth = _cubic_field()
    sol = solve_ivp(lambda _, x: truth(x), (0, 6), [0.7, -0.5, 0.6], t_eval=np.arange(0, 6, 0.01), rtol=1e-10)
    data = _ts([sol.y.T], 0.01)
    res = [fit_poly_flow(data, k).residual for k in (1, 2, 3)]
    assert res[0] >= res[1] >= res[2]


def _quadratic_map(x):
    return np.column_stack([0.6 * x[:, 0] + 0.2 * x[:, 1] - 0.3 * x[:, 0] ** 2,
                            -0.1 * x[:, 0] + 0.5 * x[:, 1] + 0.4 * x[:, 0] * x[:, 1]])


def test_quadratic_map_refit():
    rng = np.random.default_rng(2)
    trajs = []
    for x0 in rng.uniform(-1, 1, (20, 2)):
        s = [x0]
        for _ in range(10):
            s.append(_quadratic_map(s[-1][None])[0])
        trajs.append(np.array(s))
    fit = fit_poly_map(_ts(trajs, 1.0), 2)
    R = np.array([[0.6, 0.2, -0.3, 0.0, 0.0], [-0.1, 0.5, 0.0, 0.4, 0.0]])
    np.testing.assert_allclose(fit.R, R, atol=1e-8)
    assert fit.kind == "discrete"


def test_identity_and_stable_maps():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (200, 2))
    ident = fit_poly_map(_ts([np.repeat(p[None], 2, axis=0) for p in pts], 1.0), 3)
    np.testing.assert_allclose(ident.R1, np.eye(2), atol=1e-10)
    assert np.max(np.abs(ident.Rnl)) < 1e-7  # ridge-level residue
    M = np.array([[0.5, 0.3], [-0.2, 0.7]])
    orbits = []
    for x0 in pts[:20]:
        s = [x0]
        for _ in range(15):
            s.append(M @ s[-1])
        orbits.append(np.array(s))
    fit = fit_poly_map(_ts(orbits, 1.0), 1)
    assert np.max(np.abs(np.linalg.eigvals(fit.R1))) < 1


# -- modal form ------------------------------------------------------------------


def test_modal_diagonal_input():
    R = np.zeros((2, 5))
    R[:, :2] = np.diag([-1.0, 2.0])
    R[:, 2:] = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]
    m = modal_transform(PolyFlowModel(R, 2))
    W = m.modal.W
    np.testing.assert_allclose(W, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(m.modal.linear, np.diag(np.diag(m.modal.linear)), atol=1e-14)
    np.testing.assert_allclose(m.modal.N, R[:, 2:], atol=1e-14)


def test_modal_random_diagonalizable():
    rng = np.random.default_rng(4)
    for _ in range(5):
        A = rng.standard_normal((4, 4))
        m = modal_transform(PolyFlowModel(np.hstack([A, np.zeros((4, len(MonomialBasis(4, 2, 2))))]), 2))
        L = m.modal.linear
        off = L.copy()
        i = 0
        while i < 4:
            # real eigenvalue: 1x1 block; complex pair: 2x2 block
            w = 1 if abs(m.modal.eigenvalues[i].imag) < 1e-12 else 2
            off[i:i + w, i:i + w] = 0.0
            i += w
        assert np.max(np.abs(off)) < 1e-10
        np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(L)),
                                   np.sort_complex(np.linalg.eigvals(A)), atol=1e-10)


def test_modal_conjugacy_preserves_trajectories():
    truth = modal_transform(_cubic_field())
    W = truth.modal.W
    eta0 = np.array([0.5, -0.3, 0.4])
    xi0 = np.linalg.solve(W, eta0)
    t = np.linspace(0, 5, 101)
    a = solve_ivp(lambda _, x: truth(x), (0, 5), eta0, t_eval=t, rtol=1e-11, atol=1e-12).y.T
    b = solve_ivp(lambda _, x: truth.modal_rhs(x), (0, 5), xi0, t_eval=t, rtol=1e-11, atol=1e-12).y.T
    np.testing.assert_allclose(b @ W.T, a, atol=1e-6)


# -- kNN ---------------------------------------------------------------------------


def test_knn_two_points_single_neighbor():
    m = KnnModel(1, np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[5.0, 5.0], [7.0, 7.0]]), 1.0)
    np.testing.assert_array_equal(knn_step(m, np.array([0.9, 0.1])), [7.0, 7.0])


def test_knn_exact_hit_and_equidistant():
    X = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 10.0]])
    Xn = np.array([[1.0, 3.0], [3.0, 5.0], [0.0, 0.0]])
    m = KnnModel(2, X, Xn, 1.0)
    np.testing.assert_array_equal(knn_step(m, X[1]), Xn[1])
    np.testing.assert_allclose(knn_step(m, np.array([1.0, 0.0])), [2.0, 4.0], atol=1e-15)


@given(arrays(float, (2,), elements=st.floats(-2, 2)), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_knn_output_in_convex_hull(q, k):
    rng = np.random.default_rng(k)
    X = rng.uniform(-1, 1, (40, 2))
    Xn = rng.uniform(-1, 1, (40, 2))
    m = KnnModel(k, X, Xn, 1.0)
    _, idx = m.tree.query(q, k=k)
    S = Xn[np.atleast_1d(idx)]
    out = knn_step(m, q)
    # a point is in the hull iff nonnegative weights summing to one reproduce it
    A_eq = np.vstack([S.T, np.ones(len(S))])
    res = linprog(np.zeros(len(S)), A_eq=A_eq, b_eq=np.append(out, 1.0), bounds=(0, None))
    assert res.status == 0


def test_knn_linear_map_grid_accuracy():
    M = np.array([[0.8, 0.3], [-0.3, 0.8]])
    h = 0.02
    g = np.arange(-1, 1 + h / 2, h)
    X = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    m = KnnModel(4, X, X @ M.T, 1.0)
    Q = np.random.default_rng(5).uniform(-0.9, 0.9, (500, 2))
    err = np.max(np.linalg.norm(knn_step(m, Q) - Q @ M.T, axis=1))
    assert err < 2 * h * np.linalg.norm(M, 2)


def test_knn_forecast_stays_in_successor_box():
    t = np.arange(0, 60, 0.05)
    s = np.column_stack([np.cos(t) * (1 + 0.3 * np.sin(3.1 * t)), np.sin(t)])
    m = knn_build(_ts([s], 0.05), 4)
    lo, hi = m.X_next.min(axis=0), m.X_next.max(axis=0)
    out = forecast(m, np.array([3.0, -3.0]), 500, 0.05).trajectory[0][1:]
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    with pytest.raises(ValueError):
        forecast(m, s[0], 10, 0.1)
    with pytest.raises(ValueError):
        knn_build(_ts([s[:3]], 0.05), 4)


def test_knn_theiler_exclusion():
    s = np.column_stack([np.arange(50.0), np.zeros(50)])
    m = knn_build(_ts([s], 1.0), 1, theiler=3)
    out = knn_step(m, s[10:11], exclude=np.array([10]))
    # nearest admissible index is 6 or 14, both away from the replayed point
    assert abs(out[0, 0] - 11.0) >= 3.5


# -- forecasting and forcing ---------------------------------------------------------


def test_linear_flow_forecast_matches_expm():
    A = np.array([[-0.2, 1.0], [-1.0, -0.2]])
    m = PolyFlowModel(A, 1)
    eta0 = np.array([1.0, 0.5])
    out = forecast(m, eta0, 200, 0.01).trajectory[0]
    np.testing.assert_allclose(out[-1], expm(2.0 * A) @ eta0, atol=1e-9)


def test_forecast_blowup_flagged():
    m = PolyFlowModel(np.array([[0.0, 1.0]]), 2)  # d eta/dt = eta^2
    f = forecast(m, np.array([1.0]), 200, 0.01, bound=10.0)
    assert f.blew_up and f.blowup_step is not None and f.blowup_step < 100
    assert np.all(np.isfinite(f.trajectory[0]))


def test_zero_amplitude_forcing_is_autonomous():
    base = _cubic_field()
    f0 = ForcedPolyFlow(base, 0.0, 1.3, 0.4)
    eta0 = np.array([0.3, 0.2, -0.1])
    np.testing.assert_array_equal(propagate(f0, eta0, 300, 0.01), propagate(base, eta0, 300, 0.01))


def _forced_data(base, A, phi, omega, T=60.0, dt=0.01):
    truth = ForcedPolyFlow(base, A, omega, phi)
    traj = propagate(truth, np.array([0.2, -0.1, 0.3]), int(T / dt), dt)[:, 0]
    return TrajectorySet([traj], dt)


def test_calibration_closed_loop_oracle():
    base = _cubic_field()
    fit = calibrate_forcing(base, _forced_data(base, 0.4, 0.9, 1.7), 1.7)
    assert fit.A == pytest.approx(0.4, rel=0.01)
    assert fit.phi == pytest.approx(0.9, rel=0.01)


def test_calibration_zero_amplitude():
    base = _cubic_field()
    fit = calibrate_forcing(base, _forced_data(base, 0.0, 0.0, 1.7), 1.7)
    assert fit.A < 1e-6


def test_forcing_validation():
    base = _cubic_field()
    with pytest.raises(ValueError):
        ForcedPolyFlow(base, -1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        ForcedPolyFlow(base, 1.0, 0.0, 0.0)


# -- serialization -------------------------------------------------------------------


def test_polyflow_round_trip():
    m = modal_transform(_cubic_field())
    text = m.to_text()
    m2 = PolyFlowModel.from_text("# comment\n" + text)
    np.testing.assert_array_equal(m.R, m2.R)
    np.testing.assert_allclose(m2.modal.eigenvalues, m.modal.eigenvalues)
    with pytest.raises(ModelFormatError):
        PolyFlowModel.from_text(text.replace("order 3", "order x", 1).replace("R 3", "Q 3"))


def test_knn_round_trip():
    rng = np.random.default_rng(6)
    m = KnnModel(3, rng.standard_normal((20, 2)), rng.standard_normal((20, 2)), 0.1, 2)
    m2 = KnnModel.from_text(m.to_text())
    np.testing.assert_array_equal(m.X, m2.X)
    np.testing.assert_array_equal(m.X_next, m2.X_next)
    assert (m2.k, m2.dt, m2.theiler) == (3, 0.1, 2)
    with pytest.raises(ModelFormatError):
        KnnModel.from_text(m.to_text().replace("pairs 20", "pairs 21"))
