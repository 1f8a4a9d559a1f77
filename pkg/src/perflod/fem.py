"""P1 finite element assembly and sparse solves on the active fine mesh.

Element integrals use the analytic constant-gradient formulas, so the
stiffness matrix carries no quadrature error; loads use the one-point
barycenter rule, exact for forcings that are piecewise constant on
elements.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import NumericalError, SolverError

# exact local mass matrix scaled by area
_MASS_LOCAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def triangle_areas(points, triangles):
    p = points[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _local_stiffness(points, triangles):
    """(nt, 3, 3) exact stiffness blocks for constant P1 gradients."""
    p = points[triangles]
    x = p[..., 0]
    y = p[..., 1]
    # opposite-edge components, cyclic
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = triangle_areas(points, triangles)
    return (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * area[:, None, None]
    )


def _scatter(blocks, triangles, nv):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return coo_matrix((blocks.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()


def assemble_stiffness_on(points, triangles, nv, weights=None):
    """Stiffness over an explicit triangle list, optionally weighted per element."""
    blocks = _local_stiffness(points, triangles)
    if weights is not None:
        blocks = blocks * np.asarray(weights)[:, None, None]
    return _scatter(blocks, triangles, nv)


def assemble_mass_on(points, triangles, nv):
    area = triangle_areas(points, triangles)
    blocks = area[:, None, None] * _MASS_LOCAL[None, :, :]
    return _scatter(blocks, triangles, nv)


def assemble_stiffness(pm):
    """Stiffness over active triangles, restricted to free dofs."""
    a = assemble_stiffness_on(pm.mesh.points, pm.active_triangles(), pm.mesh.n_vertices)
    return a[pm.free_vertices][:, pm.free_vertices].tocsr()


def assemble_mass(pm):
    m = assemble_mass_on(pm.mesh.points, pm.active_triangles(), pm.mesh.n_vertices)
    return m[pm.free_vertices][:, pm.free_vertices].tocsr()


def assemble_load(pm, g):
    """Load vector for forcing g, evaluated once per element at barycenters.

    g may be a scalar or a callable mapping an (N, 2) array of points to
    N values.
    """
    tris = pm.active_triangles()
    pts = pm.mesh.points
    bary = pts[tris].mean(axis=1)
    gval = np.full(len(tris), float(g)) if np.isscalar(g) else np.asarray(g(bary), dtype=float)
    contrib = gval * triangle_areas(pts, tris) / 3.0
    b = np.zeros(pm.mesh.n_vertices)
    np.add.at(b, tris.ravel(), np.repeat(contrib, 3))
    return b[pm.free_vertices]


def solve_spd(A, b, tol=1e-10, maxiter=None):
    """Solve A x = b for symmetric positive definite A.

    Jacobi-preconditioned conjugate gradients with a direct-factorization
    fallback; the relative residual contract ||Ax-b||/||b|| <= tol is
    checked on every call.
    """
    b = np.asarray(b, dtype=float)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b)
    if maxiter is None:
        maxiter = max(1000, 20 * int(np.sqrt(A.shape[0])) + 100)

    diag = A.diagonal().copy()
    diag[diag <= 0.0] = 1.0
    inv_diag = 1.0 / diag
    precond = LinearOperator(A.shape, matvec=lambda x: inv_diag * x)
    try:
        x, info = cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=precond)
    except TypeError:  # scipy < 1.12 spells the tolerance 'tol'
        x, info = cg(A, b, tol=tol, atol=0.0, maxiter=maxiter, M=precond)
    if np.linalg.norm(A @ x - b) <= tol * norm_b:
        return x

    x = splu(A.tocsc()).solve(b)
    residual = np.linalg.norm(A @ x - b) / norm_b
    if residual > tol:
        raise SolverError(f"linear solve stalled at relative residual {residual:.3e}")
    return x


def quadratic_form(op, u):
    val = float(u @ (op @ u))
    if val < -1e-12:
        raise NumericalError(f"quadratic form returned {val:.3e} < -1e-12")
    return max(val, 0.0)


def h1_seminorm(A, u):
    """Energy seminorm sqrt(u' A u) for a stiffness operator A."""
    return np.sqrt(quadratic_form(A, u))


def l2_norm(M, u):
    """L2 norm sqrt(u' M u) for a mass operator M."""
    return np.sqrt(quadratic_form(M, u))
