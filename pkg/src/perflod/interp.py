"""Restricted coarse space and quasi-interpolation operators.

The coarse space is the P1 hat basis of a nested coarser grid restricted
to the pore space; an interpolation operator is an explicit sparse map C
from fine free dofs to interior coarse nodes.  The projective variant
evaluates, at each interior node, the local L2 projection onto the
restricted coarse functions living on that node's support patch; it
satisfies C P = I.  The averaging (Clement-type) variant divides the
mass-weighted hat pairing by the hat's pore-space integral and is not a
projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse import coo_matrix, csr_matrix, diags

from . import fem, mesh
from .errors import ConfigurationError, DegeneratePatchError


def hat_values(points, node_x, node_y, H):
    """Evaluate the coarse hat centered at (node_x, node_y) at given points.

    Closed form for the lower-left/upper-right diagonal convention; exact
    for dyadic inputs.
    """
    s = points[:, 0] / H - node_x
    t = points[:, 1] / H - node_y
    val = np.minimum(1.0 - s, 1.0 - t)
    val = np.minimum(val, np.minimum(1.0 + s, 1.0 + t))
    val = np.minimum(val, np.minimum(1.0 - s + t, 1.0 + s - t))
    return np.maximum(val, 0.0)


@dataclass(eq=False, frozen=True)
class CoarseSpace:
    pm: "mesh.PerforatedMesh"
    coarse: "mesh.StructuredMesh"
    H: float
    ratio: int                   # fine cells per coarse cell
    interior_nodes: np.ndarray   # coarse vertex indices, sorted
    P: csr_matrix                # free fine dofs x interior nodes
    P_vertices: csr_matrix       # all fine vertices x all coarse nodes

    @property
    def n_interior(self):
        return len(self.interior_nodes)

    def column_of(self, node):
        cols = np.searchsorted(self.interior_nodes, node)
        if self.interior_nodes[cols] != node:
            raise ConfigurationError(f"coarse node {node} is not interior")
        return int(cols)

    def window_nodes(self, node, interior_only=False):
        """Coarse nodes in the 3x3 neighborhood of a node (including itself)."""
        n1 = self.coarse.n + 1
        i, j = node % n1, node // n1
        out = []
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if 0 <= ii <= self.coarse.n and 0 <= jj <= self.coarse.n:
                    if interior_only and not (0 < ii < self.coarse.n and 0 < jj < self.coarse.n):
                        continue
                    out.append(jj * n1 + ii)
        return np.array(sorted(out), dtype=np.int64)


def _hat_column(fine_n, coarse_n, node):
    """Sparse fine-vertex values of one coarse hat (window-local evaluation)."""
    m = fine_n // coarse_n
    n1 = coarse_n + 1
    ci, cj = node % n1, node // n1
    lo_x, hi_x = max(0, m * (ci - 1)), min(fine_n, m * (ci + 1))
    lo_y, hi_y = max(0, m * (cj - 1)), min(fine_n, m * (cj + 1))
    ix = np.arange(lo_x, hi_x + 1)
    iy = np.arange(lo_y, hi_y + 1)
    gx, gy = np.meshgrid(ix, iy)
    s = gx.ravel() / m - ci
    t = gy.ravel() / m - cj
    val = np.minimum(1.0 - s, 1.0 - t)
    val = np.minimum(val, np.minimum(1.0 + s, 1.0 + t))
    val = np.minimum(val, np.minimum(1.0 - s + t, 1.0 + s - t))
    keep = val > 0.0
    verts = gy.ravel()[keep] * (fine_n + 1) + gx.ravel()[keep]
    return verts, val[keep]


def build_coarse_space(pm, H):
    """Assemble the prolongation of restricted coarse hats onto the fine grid."""
    fine_n = pm.mesh.n
    n_c = round(1.0 / H)
    if abs(n_c * H - 1.0) > 1e-12 or n_c & (n_c - 1):
        raise ConfigurationError(f"coarse size H={H} is not a dyadic fraction of the domain")
    if fine_n % n_c or n_c > fine_n:
        raise ConfigurationError(f"coarse grid {n_c} does not nest in fine grid {fine_n}")
    coarse = mesh.build_structured_mesh(n_c)
    interior = mesh.interior_coarse_nodes(coarse)

    rows, cols, vals = [], [], []
    for node in range(coarse.n_vertices):
        verts, hv = _hat_column(fine_n, n_c, node)
        rows.append(verts)
        cols.append(np.full(len(verts), node, dtype=np.int64))
        vals.append(hv)
    P_vertices = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(pm.mesh.n_vertices, coarse.n_vertices),
    ).tocsr()
    P = P_vertices[pm.free_vertices][:, interior].tocsr()
    return CoarseSpace(
        pm=pm,
        coarse=coarse,
        H=H,
        ratio=fine_n // n_c,
        interior_nodes=interior,
        P=P,
        P_vertices=P_vertices,
    )


@dataclass(eq=False, frozen=True)
class InterpOperator:
    kind: str                    # "projective" or "clement"
    C: csr_matrix                # interior coarse nodes x free fine dofs
    cs: CoarseSpace

    def apply(self, u):
        """Coarse coefficients of the interpolant of a free-dof vector."""
        return self.C @ u

    def interpolate(self, u):
        """Fine free-dof representation of the interpolant."""
        return self.cs.P @ (self.C @ u)


def _patch_mass(pm, pset):
    """Local mass matrix of a layer-0 patch on its own vertex numbering."""
    tris = pm.mesh.triangles[pset.fine_triangles]
    verts = np.unique(tris)
    local = np.full(pm.mesh.n_vertices, -1, dtype=np.int64)
    local[verts] = np.arange(len(verts))
    m0 = fem.assemble_mass_on(pm.mesh.points[verts], local[tris], len(verts))
    return verts, m0


def build_projective_interp(pm, cs, pivot_tol=1e-12):
    """Interpolation based on local patch L2 projections; a projection onto
    the restricted coarse space.

    The local space on a node's patch is spanned by every coarse hat
    (interior or boundary) with measurable support there; hats whose
    restricted mass falls below pivot_tol of the largest are excluded as
    perforation artifacts.  A near-singular local Gram matrix is a hard
    error: it signals a geometry/H misconfiguration.
    """
    rows, cols, vals = [], [], []
    for node in cs.interior_nodes:
        pset = mesh.patch(pm, cs.coarse, node, 0)
        if len(pset.fine_triangles) == 0:
            raise DegeneratePatchError(f"patch of coarse node {node} is fully perforated")
        verts, m0 = _patch_mass(pm, pset)
        cand = cs.window_nodes(node)
        basis = cs.P_vertices[verts][:, cand].toarray()
        gram = basis.T @ (m0 @ basis)

        diag = np.diag(gram)
        keep = diag > pivot_tol * diag.max()
        if not keep[np.searchsorted(cand, node)]:
            raise DegeneratePatchError(
                f"coarse node {node}: own basis function lost its patch mass"
            )
        cand, basis, gram = cand[keep], basis[:, keep], gram[np.ix_(keep, keep)]

        try:
            factor = cho_factor(gram, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DegeneratePatchError(f"coarse node {node}: singular patch Gram matrix") from exc
        pivots = np.diag(factor[0]) ** 2
        if pivots.min() < pivot_tol * pivots.max():
            raise DegeneratePatchError(f"coarse node {node}: patch Gram matrix nearly singular")

        unit = np.zeros(len(cand))
        unit[np.searchsorted(cand, node)] = 1.0
        weights = cho_solve(factor, unit)
        row = m0 @ (basis @ weights)

        dof = pm.dof_index[verts]
        ok = dof >= 0
        rows.append(np.full(ok.sum(), cs.column_of(node), dtype=np.int64))
        cols.append(dof[ok])
        vals.append(row[ok])

    C = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(cs.n_interior, pm.n_free),
    ).tocsr()
    return InterpOperator(kind="projective", C=C, cs=cs)


def build_clement_interp(pm, cs):
    """Averaging interpolation: node value is the hat-weighted mean over the pores."""
    mass = fem.assemble_mass_on(pm.mesh.points, pm.active_triangles(), pm.mesh.n_vertices)
    weighted = (mass @ cs.P_vertices[:, cs.interior_nodes]).tocsr()
    totals = np.asarray(weighted.sum(axis=0)).ravel()
    bad = np.flatnonzero(totals <= 0.0)
    if len(bad):
        node = cs.interior_nodes[bad[0]]
        raise DegeneratePatchError(f"coarse node {node}: patch has no pore mass")
    C = (weighted[pm.free_vertices] @ diags(1.0 / totals)).T.tocsr()
    return InterpOperator(kind="clement", C=C, cs=cs)


def stability_ratio(op, pm, cs, trials=20, seed=0):
    """Empirical lower bound on the local interpolation stability constant.

    Draws random fine functions supported on one-layer patches, measures
    (||u - Iu||_L2 / H + ||grad(u - Iu)||) on the layer-0 patch against
    ||grad u|| on the layer-1 patch, and returns the maximum ratio.
    """
    rng = np.random.default_rng(seed)
    A = fem.assemble_stiffness(pm)
    worst = 0.0
    for _ in range(trials):
        node = int(rng.choice(cs.interior_nodes))
        p1 = mesh.patch(pm, cs.coarse, node, 1)
        if len(p1.interior_dofs) == 0:
            continue
        u = np.zeros(pm.n_free)
        u[p1.interior_dofs] = rng.standard_normal(len(p1.interior_dofs))
        denom = fem.h1_seminorm(A, u)
        if denom < 1e-14:
            continue
        v = u - op.interpolate(u)

        p0 = mesh.patch(pm, cs.coarse, node, 0)
        tris = pm.mesh.triangles[p0.fine_triangles]
        a0 = fem.assemble_stiffness_on(pm.mesh.points, tris, pm.mesh.n_vertices)
        m0 = fem.assemble_mass_on(pm.mesh.points, tris, pm.mesh.n_vertices)
        vv = np.zeros(pm.mesh.n_vertices)
        vv[pm.free_vertices] = v
        num = fem.l2_norm(m0, vv) / cs.H + fem.h1_seminorm(a0, vv)
        worst = max(worst, num / denom)
    return worst
