"""Localized corrector solves and the multiscale Galerkin method.

Fine-scale detail lives in the kernel of the interpolation operator C.
For each interior coarse node x and truncation layer k, a corrector is
the energy projection of a (partition-of-unity weighted) coarse hat
gradient onto the kernel functions supported on the k-layer patch; these
are computed as saddle-point systems with the kernel constraint enforced
by Lagrange multipliers.  Summing over x produces one corrector column
per coarse node; the multiscale basis is the prolongation minus those
columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from . import fem, interp, mesh
from .errors import CorrectorError, DegenerateBasisError

MULTIPLIER_EIG_TOL = 1e-10  # relative eigenvalue cutoff for the multiplier block


@dataclass(eq=False, frozen=True)
class PartitionWeights:
    """Element-wise values of the normalized interior hat functions.

    Near the outer boundary the interior hats do not sum to one (the
    boundary hats are excluded by the Dirichlet condition), so each hat is
    divided by the interior sum to restore a partition of unity on every
    active element.
    """

    cs: "interp.CoarseSpace"
    barycenters: np.ndarray   # all fine triangles
    denominator: np.ndarray   # sum of interior hats at barycenters

    def values(self, node, tri_ids):
        n1 = self.cs.coarse.n + 1
        lam = interp.hat_values(
            self.barycenters[tri_ids], node % n1, node // n1, self.cs.H
        )
        return lam / self.denominator[tri_ids]


def partition_weights(pm, cs):
    bary = mesh.barycenters(pm.mesh)
    den = np.zeros(len(bary))
    n1 = cs.coarse.n + 1
    m = cs.ratio
    n = pm.mesh.n
    for node in cs.interior_nodes:
        ci, cj = node % n1, node // n1
        lo_x, hi_x = max(0, m * (ci - 1)), min(n - 1, m * (ci + 1) - 1)
        lo_y, hi_y = max(0, m * (cj - 1)), min(n - 1, m * (cj + 1) - 1)
        cx, cy = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
        cells = (cy.ravel() * n + cx.ravel())
        tris = np.concatenate([2 * cells, 2 * cells + 1])
        den[tris] += interp.hat_values(bary[tris], ci, cj, cs.H)
    return PartitionWeights(cs=cs, barycenters=bary, denominator=den)


@dataclass(eq=False)
class CorrectorProblem:
    """Factorized saddle-point system for one (node, layer) patch."""

    node: int
    k: int
    patch: "mesh.PatchSet"
    trial_dofs: np.ndarray
    constraint_rows: np.ndarray
    _lu: object
    _constraints: csr_matrix          # restricted C
    _basis_solves: np.ndarray         # A_p^{-1} C_p'
    _eig_w: np.ndarray                # Schur complement eigenvalues
    _eig_v: np.ndarray
    _weighted_rhs: csr_matrix         # hat-weighted stiffness on the layer-0 patch


def _weighted_patch_stiffness(pm, cs, node, pou):
    """Hat-weighted stiffness over the node's layer-0 patch, on free dofs.

    The weight is the normalized hat, piecewise constant per fine element
    (evaluated at barycenters).
    """
    p0 = mesh.patch(pm, cs.coarse, node, 0)
    tris = pm.mesh.triangles[p0.fine_triangles]
    w = pou.values(node, p0.fine_triangles)
    aw = fem.assemble_stiffness_on(pm.mesh.points, tris, pm.mesh.n_vertices, weights=w)
    return aw[pm.free_vertices][:, pm.free_vertices].tocsr()


def build_corrector_problem(pm, cs, op, A, node, k, pou=None, _shared=None):
    """Set up and factorize the constrained patch system for one coarse node.

    The constraint set is every interpolation row with any support on the
    trial dofs, so a solution extended by zero stays in the kernel
    globally.  _shared optionally carries a (lu, basis_solves, eig) tuple
    reused across saturated patches, whose systems coincide.
    """
    if pou is None:
        pou = partition_weights(pm, cs)
    pset = mesh.patch(pm, cs.coarse, node, k)
    trial = pset.interior_dofs
    if len(trial) == 0:
        raise CorrectorError(f"corrector problem ({node}, {k}): empty trial space")

    C_t = op.C[:, trial].tocsr()
    rows = np.flatnonzero(np.diff(C_t.indptr) > 0)
    C_p = C_t[rows]

    if _shared is not None:
        lu, solves, (w, v) = _shared
    else:
        A_p = A[trial][:, trial].tocsc()
        try:
            lu = splu(A_p)
        except RuntimeError as exc:
            raise CorrectorError(f"corrector problem ({node}, {k}): singular patch stiffness") from exc
        solves = lu.solve(C_p.T.toarray())
        schur = C_p @ solves
        schur = 0.5 * (schur + schur.T)
        w, v = eigh(schur)

    return CorrectorProblem(
        node=node,
        k=k,
        patch=pset,
        trial_dofs=trial,
        constraint_rows=rows,
        _lu=lu,
        _constraints=C_p,
        _basis_solves=solves,
        _eig_w=w,
        _eig_v=v,
        _weighted_rhs=_weighted_patch_stiffness(pm, cs, node, pou),
    )


def _multiplier_solve(prob, d):
    w, v = prob._eig_w, prob._eig_v
    cutoff = MULTIPLIER_EIG_TOL * max(w.max(), 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return v @ (inv * (v.T @ d))


def solve_corrector(prob, cs, neighbor):
    """Corrector response of one neighbor's coarse hat, extended by zero.

    Returns a free-dof vector in the interpolation kernel (the Lagrange
    block enforces C q = 0; rank-deficient constraint sets go through a
    spectrally thresholded pseudo-inverse).
    """
    col = cs.P_vertices[:, neighbor].toarray().ravel()
    p_y = col[cs.pm.free_vertices]
    r = (prob._weighted_rhs @ p_y)[prob.trial_dofs]
    q = np.zeros(prob._weighted_rhs.shape[0])
    if not np.any(r):
        return q
    x_r = prob._lu.solve(r)
    mu = _multiplier_solve(prob, prob._constraints @ x_r)
    q[prob.trial_dofs] = x_r - prob._basis_solves @ mu
    return q


@dataclass(eq=False, frozen=True)
class CorrectorBasis:
    """One corrector column per interior coarse node (k < 0 marks the
    untruncated, globally supported basis)."""

    k: int
    Q: csr_matrix  # free fine dofs x interior coarse nodes


def build_corrector_basis(pm, cs, op, A, k, pou=None):
    """Assemble the truncated corrector basis by accumulating patch solves.

    Deterministic: nodes are visited in sorted order and neighbor
    contributions accumulate in sorted order.  Saturated patches (covering
    the whole pore space) share one factorization.
    """
    if pou is None:
        pou = partition_weights(pm, cs)
    n_active = pm.n_active
    shared = None
    cols, rows, vals = [], [], []
    for node in cs.interior_nodes:
        pset = mesh.patch(pm, cs.coarse, node, k)
        saturated = len(pset.fine_triangles) == n_active
        prob = build_corrector_problem(
            pm, cs, op, A, node, k, pou=pou,
            _shared=shared if saturated else None,
        )
        if saturated and shared is None:
            shared = (prob._lu, prob._basis_solves, (prob._eig_w, prob._eig_v))
        for neighbor in cs.window_nodes(node, interior_only=True):
            q = solve_corrector(prob, cs, neighbor)
            nz = np.flatnonzero(q)
            if len(nz) == 0:
                continue
            rows.append(nz)
            cols.append(np.full(len(nz), cs.column_of(neighbor), dtype=np.int64))
            vals.append(q[nz])
    if rows:
        Q = coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(pm.n_free, cs.n_interior),
        ).tocsr()
    else:
        Q = csr_matrix((pm.n_free, cs.n_interior))
    return CorrectorBasis(k=k, Q=Q)


def ideal_corrector_basis(pm, cs, op, A):
    """Untruncated corrector basis from one global constrained solve per node.

    Only affordable at desk scale; serves as ground truth for truncation
    studies.  Equivalent to the truncated basis at a saturating layer
    count, because the partition-of-unity weights sum the patchwise right
    hand sides back to the plain hat-gradient load.
    """
    lu = splu(A.tocsc())
    solves = lu.solve(op.C.T.toarray())
    schur = op.C @ solves
    schur = 0.5 * (schur + schur.T)
    w, v = eigh(schur)
    cutoff = MULTIPLIER_EIG_TOL * max(w.max(), 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)

    columns = np.empty((pm.n_free, cs.n_interior))
    P = cs.P.toarray()
    for col in range(cs.n_interior):
        p_y = P[:, col]
        mu = v @ (inv * (v.T @ (op.C @ p_y)))
        columns[:, col] = p_y - solves @ mu
    return CorrectorBasis(k=-1, Q=csr_matrix(columns))


@dataclass(eq=False, frozen=True)
class MultiscaleSolution:
    coefficients: np.ndarray   # per interior coarse node
    fine: np.ndarray           # free fine dofs, (P - Q) @ coefficients
    metadata: dict = field(default_factory=dict)


def multiscale_solve(pm, cs, basis, A, b, metadata=None):
    """Galerkin solve in the corrected coarse space span(P - Q)."""
    B = (cs.P - basis.Q).tocsr()
    reduced = (B.T @ (A @ B)).toarray()
    reduced = 0.5 * (reduced + reduced.T)
    try:
        factor = cho_factor(reduced, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasisError("reduced multiscale system is not positive definite") from exc
    coeff = cho_solve(factor, B.T @ b)
    meta = {"k": basis.k, "H": cs.H}
    if metadata:
        meta.update(metadata)
    return MultiscaleSolution(coefficients=coeff, fine=B @ coeff, metadata=meta)


def save_corrector_basis(basis, path):
    """Textual (node column, dof row, value) triplets; loadable cross-run."""
    q = basis.Q.tocoo()
    with open(path, "w") as f:
        f.write(f"{basis.k} {q.shape[0]} {q.shape[1]} {q.nnz}\n")
        order = np.lexsort((q.row, q.col))
        for idx in order:
            f.write(f"{q.col[idx]} {q.row[idx]} {q.data[idx]:.17g}\n")


def load_corrector_basis(path):
    with open(path) as f:
        k, n_rows, n_cols, nnz = (int(v) for v in f.readline().split())
        cols = np.empty(nnz, dtype=np.int64)
        rows = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for i in range(nnz):
            c, r, v = f.readline().split()
            cols[i], rows[i], vals[i] = int(c), int(r), float(v)
    Q = coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    return CorrectorBasis(k=k, Q=Q)
