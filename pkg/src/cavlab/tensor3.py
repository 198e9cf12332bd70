"""Small 3-vector / 3x3-matrix algebra.

Every function accepts stacked inputs: vectors have shape ``(..., 3)`` and
matrices ``(..., 3, 3)`` with row-major semantics (``A[..., i, j]`` is row i,
column j).  Leading axes broadcast like ordinary numpy operations.
"""

import numpy as np

UNIT_TOL = 1e-12

#: Levi-Civita symbol, ``LEVI_CIVITA[i, j, k] = eps^{ijk}``.
LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI_CIVITA[_i, _j, _k] = 1.0
    LEVI_CIVITA[_i, _k, _j] = -1.0

IDENTITY = np.eye(3)


def norm(v):
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def unit(v):
    """Return ``v / |v|``; raises for zero vectors."""
    v = np.asarray(v, dtype=float)
    n = norm(v)
    if np.any(n == 0.0):
        raise ValueError("unit() of a zero vector")
    return v / n[..., None]


def renormalize(v):
    """Re-normalize nearly-unit vectors.

    Vectors further than ``UNIT_TOL`` from the unit sphere are rejected.
    """
    v = np.asarray(v, dtype=float)
    n = norm(v)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError("expected unit vector(s), got norm(s) %s" % np.unique(n)[:5])
    return v / n[..., None]


def outer(u, v):
    return u[..., :, None] * v[..., None, :]


def matvec(A, v):
    return np.einsum("...ij,...j->...i", A, v)


def matmul(A, B):
    return np.einsum("...ij,...jk->...ik", A, B)


def transpose(A):
    return np.swapaxes(A, -1, -2)


def frobenius_dot(X, Y):
    """``X . Y = tr(X^T Y)``."""
    return np.einsum("...ij,...ij->...", X, Y)


def det(A):
    A = np.asarray(A, dtype=float)
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def cofactor(A):
    """Cofactor matrix; rows are cross products of the other two rows."""
    A = np.asarray(A, dtype=float)
    r0, r1, r2 = A[..., 0, :], A[..., 1, :], A[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def adjugate(A):
    """``adj A = (cof A)^T``, so that ``adj(A) A = det(A) 1``."""
    return transpose(cofactor(A))


def bracket(xi, eta):
    """Polarization of the adjugate.

    ``<xi, eta>_{ij} = eps^{jab} eps^{icd} xi_{ac} eta_{bd}``; symmetric and
    bilinear, with ``adj(xi + eta) = adj xi + <xi, eta> + adj eta``.
    """
    return np.einsum("jab,icd,...ac,...bd->...ij", LEVI_CIVITA, LEVI_CIVITA, xi, eta)


def split_residual(F, v):
    """``adj F - adj F (v (x) v) - <F, v (x) F^T v>`` for unit ``v``.

    Vanishes identically; returned so callers can measure rounding.
    """
    v = renormalize(v)
    A = adjugate(F)
    Ftv = matvec(transpose(F), v)
    return A - matmul(A, outer(v, v)) - bracket(F, outer(v, Ftv))


def epsilon_contract(S):
    """``eps^{icd} S_{cd}``; zero for symmetric ``S``."""
    return np.einsum("icd,...cd->...i", LEVI_CIVITA, S)


def random_matrices(rng, n, scale=2.0):
    return rng.uniform(-scale, scale, size=(n, 3, 3))


def random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / norm(v)[:, None]


def identity_residuals(rng, n=10_000, scale=2.0):
    """Max-abs residuals of the algebraic identities over ``n`` random instances."""
    F = random_matrices(rng, n, scale)
    H = random_matrices(rng, n, scale)
    u = rng.uniform(-scale, scale, size=(n, 3))
    w = rng.uniform(-scale, scale, size=(n, 3))
    v = random_unit_vectors(rng, n)
    uv = outer(u, w)
    Ftv = matvec(transpose(F), v)
    tau = unit(np.cross(v, random_unit_vectors(rng, n)))
    S = H + transpose(H)

    def mx(a):
        return float(np.max(np.abs(a)))

    return {
        "polarization": mx(adjugate(F + H) - adjugate(F) - adjugate(H) - bracket(F, H)),
        "bracket_symmetry": mx(bracket(F, H) - bracket(H, F)),
        "rank_one_update": mx(bracket(F, uv) - (adjugate(F + uv) - adjugate(F))),
        "identity_bracket": mx(
            bracket(np.broadcast_to(IDENTITY, F.shape), uv)
            - (np.einsum("ni,ni->n", u, w)[:, None, None] * IDENTITY - uv)
        ),
        "adj_split": mx(split_residual(F, v)),
        "adj_tangent": mx(matvec(adjugate(F) - bracket(F, outer(v, Ftv)), tau)),
        "cof_contraction": mx(frobenius_dot(cofactor(F), outer(v, Ftv)) - det(F)),
        "eps_symmetric": mx(epsilon_contract(S)),
        "adj_rank_one": mx(adjugate(uv)),
        "adj_inverse": mx(matmul(adjugate(F), F) - det(F)[:, None, None] * IDENTITY),
    }
