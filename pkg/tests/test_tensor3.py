import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cavlab import tensor3 as t3

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
mats = arrays(np.float64, (3, 3), elements=finite)
vecs = arrays(np.float64, (3,), elements=finite)


def unit_vecs():
    return vecs.filter(lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: v / np.linalg.norm(v))


def test_adjugate_examples():
    assert np.allclose(t3.adjugate(np.eye(3)), np.eye(3))
    assert np.allclose(t3.adjugate(np.diag([1.0, 2.0, 3.0])), np.diag([6.0, 3.0, 2.0]))
    u, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.7, -1.1])
    assert np.abs(t3.adjugate(t3.outer(u, v))).max() < 1e-15


def test_adjugate_against_inverse():
    rng = np.random.default_rng(1)
    A = t3.random_matrices(rng, 50)
    ref = np.linalg.det(A)[:, None, None] * np.linalg.inv(A)
    assert np.abs(t3.adjugate(A) - ref).max() < 1e-10


def test_cofactor_is_adjugate_transpose():
    A = np.arange(9.0).reshape(3, 3) + np.eye(3)
    assert np.allclose(t3.cofactor(A), t3.adjugate(A).T)


def test_det_matches_numpy():
    rng = np.random.default_rng(2)
    A = t3.random_matrices(rng, 100)
    assert np.allclose(t3.det(A), np.linalg.det(A), atol=1e-12)


def test_bracket_examples():
    assert np.allclose(t3.bracket(np.eye(3), np.eye(3)), 2 * np.eye(3))
    rng = np.random.default_rng(3)
    xi = rng.normal(size=(3, 3))
    u, v = rng.normal(size=3), rng.normal(size=3)
    uv = t3.outer(u, v)
    assert np.allclose(t3.bracket(xi, uv), t3.adjugate(xi + uv) - t3.adjugate(xi), atol=1e-12)
    assert np.allclose(t3.bracket(np.eye(3), uv), (u @ v) * np.eye(3) - uv, atol=1e-14)


def test_bracket_is_directional_derivative_of_adjugate():
    rng = np.random.default_rng(4)
    xi, eta = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    h = 1e-6
    fd = (t3.adjugate(xi + h * eta) - t3.adjugate(xi - h * eta)) / (2 * h)
    assert np.allclose(t3.bracket(xi, eta), fd, atol=1e-8)


def test_split_residual_examples():
    assert np.abs(t3.split_residual(np.eye(3), np.array([1.0, 0, 0]))).max() == 0
    assert np.abs(t3.split_residual(np.diag([2.0, 3.0, 5.0]), np.array([0, 1.0, 0]))).max() < 1e-14
    rng = np.random.default_rng(5)
    F = t3.random_matrices(rng, 100)
    v = t3.random_unit_vectors(rng, 100)
    assert np.abs(t3.split_residual(F, v)).max() < 1e-10


def test_swapped_ordering_breaks_the_split():
    # the other tensor ordering is not an identity
    rng = np.random.default_rng(6)
    F = t3.random_matrices(rng, 20)
    v = t3.random_unit_vectors(rng, 20)
    A = t3.adjugate(F)
    Ftv = t3.matvec(t3.transpose(F), v)
    res = A - t3.matmul(A, t3.outer(v, v)) - t3.bracket(F, t3.outer(Ftv, v))
    assert np.abs(res).max() > 1e-2


def test_renormalize():
    v = np.array([1.0 + 5e-13, 0.0, 0.0])
    assert t3.norm(t3.renormalize(v)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        t3.renormalize(np.array([1.1, 0.0, 0.0]))
    with pytest.raises(ValueError):
        t3.unit(np.zeros(3))


def test_epsilon_contraction_kills_symmetric():
    S = np.array([[1.0, 2.0, 3.0], [2.0, 5.0, -1.0], [3.0, -1.0, 0.5]])
    assert np.all(t3.epsilon_contract(S) == 0)
    A = np.triu(np.ones((3, 3)), 1)
    assert np.any(t3.epsilon_contract(A - A.T) != 0)


def test_identity_residuals_battery():
    res = t3.identity_residuals(np.random.default_rng(0), 2000)
    assert max(res.values()) < 1e-10


@settings(max_examples=200, deadline=None)
@given(mats, mats)
def test_polarization_property(xi, eta):
    lhs = t3.adjugate(xi + eta) - t3.adjugate(xi) - t3.adjugate(eta)
    assert np.abs(lhs - t3.bracket(xi, eta)).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(mats, mats, mats, finite)
def test_bracket_symmetric_bilinear(a, b, c, s):
    assert np.abs(t3.bracket(a, b) - t3.bracket(b, a)).max() < 1e-12
    lin = t3.bracket(a, s * b + c) - s * t3.bracket(a, b) - t3.bracket(a, c)
    assert np.abs(lin).max() < 1e-11


@settings(max_examples=200, deadline=None)
@given(mats, unit_vecs())
def test_adjugate_split_property(F, v):
    assert np.abs(t3.split_residual(F, v)).max() < 1e-10


@settings(max_examples=200, deadline=None)
@given(mats, unit_vecs(), vecs)
def test_adjugate_on_tangent_vectors(F, v, a):
    tau = np.cross(v, a)
    Ftv = F.T @ v
    lhs = t3.adjugate(F) @ tau
    rhs = t3.bracket(F, t3.outer(v, Ftv)) @ tau
    assert np.abs(lhs - rhs).max() < 1e-10


@settings(max_examples=200, deadline=None)
@given(mats, unit_vecs())
def test_cofactor_contraction_is_det(F, v):
    val = t3.frobenius_dot(t3.cofactor(F), t3.outer(v, F.T @ v))
    assert abs(val - t3.det(F)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(mats, mats)
def test_det_multiplicative_and_adj_inverse(A, B):
    assert abs(t3.det(A @ B) - t3.det(A) * t3.det(B)) < 1e-12 * max(1.0, abs(t3.det(A) * t3.det(B)), 50.0)
    assert np.abs(t3.adjugate(A) @ A - t3.det(A) * np.eye(3)).max() < 1e-12 * 100
