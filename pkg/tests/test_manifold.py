import functools
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import subspace_angles

from ssmchaos.embedding import embed_array
from ssmchaos.manifold import (ModelFormatError, MonomialBasis, SsmModel, fit_ssm, fit_ssm_fast,
                               invariance_error, monomials)
from ssmchaos.systems import SystemSpec, integrate


@functools.lru_cache(maxsize=None)
def _compositions(d, k):
    # exponent tuples with sum k, counted by recursion on the last entry
    if d == 1:
        return 1
    return sum(_compositions(d - 1, k - j) for j in range(k + 1))


@pytest.mark.parametrize("d", range(1, 7))
@pytest.mark.parametrize("k", range(1, 9))
def test_monomial_counts(d, k):
    b = monomials(d, 1, k)
    assert b.count(k) == _compositions(d, k) == math.comb(d + k - 1, k)
    if d <= 3:
        brute = sum(1 for e in itertools.product(range(k + 1), repeat=d) if sum(e) == k)
        assert b.count(k) == brute
    E = b.exponents
    assert len({tuple(e) for e in E}) == len(E)
    assert np.all((E.sum(axis=1) >= 1) & (E.sum(axis=1) <= k))


def test_monomial_ordering_two_variables():
    E = monomials(2, 2, 3).exponents.tolist()
    assert E == [[2, 0], [1, 1], [0, 2], [3, 0], [2, 1], [1, 2], [0, 3]]
    assert monomials(1, 1, 1).exponents.tolist() == [[1]]


def test_monomial_counts_dim3():
    b = monomials(3, 2, 6)
    assert [b.count(k) for k in range(2, 7)] == [6, 10, 15, 21, 28]
    assert len(b) == 80


def test_monomial_evaluation_and_derivative():
    b = monomials(2, 1, 3)
    u = np.array([[1.5, -0.5], [0.3, 2.0]])
    oracle = np.array([[x ** e[0] * y ** e[1] for e in b.exponents] for x, y in u])
    np.testing.assert_allclose(b.evaluate(u), oracle, rtol=1e-14)
    h = 1e-6
    for var in range(2):
        du = np.zeros(2)
        du[var] = h
        fd = (b.evaluate(u + du) - b.evaluate(u - du)) / (2 * h)
        np.testing.assert_allclose(b.derivative(u, var), fd, atol=1e-8)


def test_monomial_precondition():
    with pytest.raises(ValueError):
        monomials(2, 3, 2)
    with pytest.raises(ValueError):
        monomials(0, 1, 2)


def _random_model(rng, rho=6, d=2, order=3, origin=None):
    Q, _ = np.linalg.qr(rng.standard_normal((rho, rho)))
    V1, W = Q[:, :d], Q[:, d:]
    n_nl = len(MonomialBasis(d, 2, order))
    Vnl = W @ rng.standard_normal((rho - d, n_nl)) * 0.3
    return SsmModel(V1, Vnl, order, np.zeros(rho) if origin is None else origin)


def test_synthetic_graph_recovered():
    rng = np.random.default_rng(1)
    truth = _random_model(rng)
    eta = rng.uniform(-1, 1, (3000, 2))
    Y = truth.lift(eta)
    held = truth.lift(rng.uniform(-1, 1, (500, 2)))
    model, rep = fit_ssm(Y, 2, 3, rtol=1e-12)
    assert invariance_error(model, held) < 1e-8
    assert rep.invariance_error >= 0


def test_linear_subspace_any_order():
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    Y = rng.standard_normal((2000, 2)) @ Q.T
    spans = []
    for fit in (fit_ssm, fit_ssm_fast):
        for order in (1, 3):
            m, _ = fit(Y, 2, order)
            assert np.max(np.abs(m.Vnl)) < 1e-8 if m.Vnl.size else True
            assert np.max(subspace_angles(Q, m.V1)) < 1e-8
            spans.append(m.V1 @ m.V1.T)
    for P in spans[1:]:
        np.testing.assert_allclose(P, spans[0], atol=1e-10)


def test_constraints_after_fit():
    rng = np.random.default_rng(3)
    truth = _random_model(rng, rho=5, d=2, order=2)
    Y = truth.lift(rng.uniform(-1, 1, (2000, 2))) + 1e-3 * rng.standard_normal((2000, 5))
    m, rep = fit_ssm(Y, 2, 3)
    orth, cross = m.constraint_residuals()
    assert orth < 1e-10 and cross < 1e-8
    h = rep.objective_history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_fit_preconditions():
    Y = np.random.default_rng(0).standard_normal((30, 4))
    with pytest.raises(ValueError):
        fit_ssm_fast(Y, 2, 3)
    with pytest.raises(ValueError):
        fit_ssm_fast(np.random.default_rng(0).standard_normal((3000, 4)), 5, 2)


def test_project_examples():
    rng = np.random.default_rng(4)
    origin = rng.standard_normal(6)
    m = _random_model(rng, origin=origin)
    np.testing.assert_array_equal(m.project(origin), np.zeros(2))
    np.testing.assert_allclose(m.project(origin + m.V1[:, 0]), [1.0, 0.0], atol=1e-14)
    y = rng.standard_normal((10, 6))
    oracle = np.array([[sum(m.V1[i, j] * (yy[i] - origin[i]) for i in range(6)) for j in range(2)] for yy in y])
    np.testing.assert_allclose(m.project(y), oracle, atol=1e-12)
    np.testing.assert_allclose(m.lift(np.zeros(2)), origin, atol=0)


@given(arrays(float, 2, elements=st.floats(-3, 3)), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_project_lift_identity(eta, seed):
    m = _random_model(np.random.default_rng(seed), origin=np.random.default_rng(seed + 1).standard_normal(6))
    np.testing.assert_allclose(m.project(m.lift(eta)), eta, atol=1e-10 * (1 + np.max(np.abs(eta)) ** 3))


def test_invariance_error_definition():
    rng = np.random.default_rng(5)
    m = _random_model(rng)
    Y = m.lift(rng.uniform(-1, 1, (200, 2)))
    assert invariance_error(m, Y) < 1e-14
    Z = Y + 0.01 * rng.standard_normal(Y.shape)
    oracle = np.mean(np.linalg.norm(Z - m.lift(m.project(Z)), axis=1)) / np.max(np.linalg.norm(Z, axis=1))
    assert invariance_error(m, Z) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ZeroDivisionError):
        invariance_error(m, np.zeros((3, 6)))


def test_text_round_trip_and_corruption():
    m = _random_model(np.random.default_rng(6), origin=np.arange(6.0))
    text = m.to_text()
    m2 = SsmModel.from_text(text)
    for a in ("V1", "Vnl", "origin"):
        np.testing.assert_array_equal(getattr(m, a), getattr(m2, a))
    assert m2.order == m.order and m2.to_text() == text
    assert SsmModel.from_text("# header\n" + text).to_text() == text
    lines = text.splitlines()
    bad = "\n".join(lines[:9] + ["1.0 oops"] + lines[10:])
    with pytest.raises(ModelFormatError, match="line"):
        SsmModel.from_text(bad)
    with pytest.raises(ModelFormatError):
        SsmModel.from_text("\n".join(lines[:-3]))


@pytest.fixture(scope="module")
def lorenz_embedded():
    tr = integrate(SystemSpec.default("Lorenz3"), [-8, 8, 27], (0, 100), 0.001).drop_before(1.0)
    Y = embed_array(tr[0][:, 0], 7, 70)
    return Y[::10], Y[5::10]


@pytest.fixture(scope="module")
def lorenz_fits(lorenz_embedded):
    Y, _ = lorenz_embedded
    return fit_ssm(Y, 3, 3), fit_ssm_fast(Y, 3, 3)


def test_lorenz_order3_fit(lorenz_embedded, lorenz_fits):
    (m_opt, r_opt), (_, r_fast) = lorenz_fits
    assert r_opt.invariance_error <= 0.025
    assert r_opt.invariance_error <= r_fast.invariance_error
    # lifted projections of held-out points match the reported error level
    assert invariance_error(m_opt, lorenz_embedded[1]) == pytest.approx(r_opt.invariance_error, rel=0.05)


@pytest.mark.xfail(strict=True, reason="principal-subspace tangent space is about 3x worse on this attractor")
def test_lorenz_fast_within_twice_optimized(lorenz_fits):
    (_, r_opt), (_, r_fast) = lorenz_fits
    assert r_fast.invariance_error <= 2 * r_opt.invariance_error
