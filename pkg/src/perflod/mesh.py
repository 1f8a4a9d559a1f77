"""Structured nested triangulations, perforation masking, and patches.

The unit square is split into n x n cells, each cut along the diagonal
from its lower-left to its upper-right corner.  Vertex (i, j) has index
j*(n+1) + i; cell c = j*n + i owns triangles 2c (lower: LL, LR, UR) and
2c + 1 (upper: LL, UR, UL).  This fixed convention gives valence-6
interior vertices and exact nesting between dyadic resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import geometry
from .errors import ConfigurationError, GeometryError


@dataclass(eq=False, frozen=True)
class StructuredMesh:
    n: int
    points: np.ndarray     # ((n+1)^2, 2)
    triangles: np.ndarray  # (2 n^2, 3) vertex index triples

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_vertices(self):
        return (self.n + 1) ** 2

    @property
    def n_triangles(self):
        return 2 * self.n * self.n


def build_structured_mesh(n):
    """Uniform criss triangulation of [0,1]^2 with n cells per side."""
    if n < 1 or n & (n - 1):
        raise ConfigurationError(f"cells per side must be a positive power of two, got {n}")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side)  # row-major in j
    points = np.column_stack([xx.ravel(), yy.ravel()])
    cells = np.arange(n * n)
    ci = cells % n
    cj = cells // n
    v00 = cj * (n + 1) + ci
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])
    return StructuredMesh(n=n, points=points, triangles=triangles)


def barycenters(mesh):
    return mesh.points[mesh.triangles].mean(axis=1)


def dual_neighbors(n):
    """Per-triangle indices of the up-to-3 edge neighbors (-1 where absent)."""
    cells = np.arange(n * n)
    ci = cells % n
    cj = cells // n
    lower = 2 * cells
    upper = lower + 1
    nb = np.full((2 * n * n, 3), -1, dtype=np.int64)
    # lower triangle: diagonal, right edge, bottom edge
    nb[lower, 0] = upper
    nb[lower[ci < n - 1], 1] = upper[ci < n - 1] + 2
    nb[lower[cj > 0], 2] = upper[cj > 0] - 2 * n
    # upper triangle: diagonal, left edge, top edge
    nb[upper, 0] = lower
    nb[upper[ci > 0], 1] = lower[ci > 0] - 2
    nb[upper[cj < n - 1], 2] = lower[cj < n - 1] + 2 * n
    return nb


def fine_to_coarse(n_fine, n_coarse):
    """Containing coarse-triangle index for every fine triangle (nested grids).

    Decided by integer arithmetic on barycenter coordinates in units of
    h/3, so no floating-point boundary ambiguity is possible.
    """
    if n_fine % n_coarse:
        raise ConfigurationError(f"grids not nested: {n_fine} fine vs {n_coarse} coarse cells")
    m = n_fine // n_coarse
    cells = np.arange(n_fine * n_fine)
    ci = cells % n_fine
    cj = cells // n_fine
    # barycenters: lower (3i+2, 3j+1), upper (3i+1, 3j+2)
    u = np.empty(2 * n_fine * n_fine, dtype=np.int64)
    v = np.empty_like(u)
    u[0::2], v[0::2] = 3 * ci + 2, 3 * cj + 1
    u[1::2], v[1::2] = 3 * ci + 1, 3 * cj + 2
    ii = u // (3 * m)
    jj = v // (3 * m)
    local_u = u - 3 * m * ii
    local_v = v - 3 * m * jj
    kind = (local_u < local_v).astype(np.int64)  # 0 lower, 1 upper
    return 2 * (jj * n_coarse + ii) + kind


@dataclass(eq=False, frozen=True)
class PerforatedMesh:
    """Fine mesh with inactive (solid) triangles masked out.

    free_vertices are the vertices incident to at least one active
    triangle and not on the outer boundary; dof_index maps vertex index
    to its compact dof number (-1 elsewhere).  Vertices on hole
    boundaries stay free: the homogeneous Neumann condition there needs
    no constraint.
    """

    mesh: StructuredMesh
    spec: geometry.GeometrySpec
    active: np.ndarray          # bool per triangle
    free_vertices: np.ndarray   # sorted vertex indices
    dof_index: np.ndarray       # vertex -> dof or -1
    boundary_vertices: np.ndarray
    active_degree: np.ndarray   # per vertex, number of incident active triangles

    @property
    def n_free(self):
        return len(self.free_vertices)

    @property
    def n_active(self):
        return int(self.active.sum())

    def active_triangles(self):
        return self.mesh.triangles[self.active]


def _boundary_vertex_mask(n):
    idx = np.arange((n + 1) ** 2)
    i = idx % (n + 1)
    j = idx // (n + 1)
    return (i == 0) | (i == n) | (j == 0) | (j == n)


def _check_connected(n, active):
    nb = dual_neighbors(n)
    t = np.repeat(np.arange(2 * n * n), 3)
    s = nb.ravel()
    ok = (s >= 0) & active[t] & active[np.maximum(s, 0)]
    g = csr_matrix(
        (np.ones(ok.sum()), (t[ok], s[ok])), shape=(2 * n * n, 2 * n * n)
    )
    n_comp, labels = connected_components(g, directed=False)
    if len(np.unique(labels[active])) != 1:
        raise GeometryError("pore space is disconnected for this geometry/mesh")


def perforate(mesh, spec):
    """Mask solid triangles and enumerate degrees of freedom.

    Activity is decided at barycenters; the dyadic alignment requirement
    guarantees no triangle straddles an obstacle boundary.
    """
    n = mesh.n
    step = geometry.alignment_step(spec)
    ratio = step * n
    if ratio < 1.0 - 1e-12 or abs(ratio - round(ratio)) > 1e-12:
        raise ConfigurationError(
            f"fine mesh h=1/{n} does not align with obstacle boundaries "
            f"(need h dividing {step})"
        )
    solid = geometry.is_solid(spec, barycenters(mesh))
    active = ~np.asarray(solid)
    _check_connected(n, active)

    corners = mesh.triangles[active].ravel()
    degree = np.bincount(corners, minlength=mesh.n_vertices)
    boundary = _boundary_vertex_mask(n)
    free_mask = (degree > 0) & ~boundary
    free_vertices = np.flatnonzero(free_mask)
    dof_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
    dof_index[free_vertices] = np.arange(len(free_vertices))
    return PerforatedMesh(
        mesh=mesh,
        spec=spec,
        active=active,
        free_vertices=free_vertices,
        dof_index=dof_index,
        boundary_vertices=np.flatnonzero(boundary),
        active_degree=degree,
    )


@dataclass(eq=False, frozen=True)
class PatchSet:
    """A coarse node's support patch grown by k layers of coarse elements."""

    node: int
    k: int
    coarse_triangles: np.ndarray
    fine_triangles: np.ndarray   # active fine triangles inside the patch
    interior_dofs: np.ndarray    # free dofs fully surrounded by patch triangles


def coarse_node_grid(coarse, node):
    n1 = coarse.n + 1
    return node % n1, node // n1


def interior_coarse_nodes(coarse):
    """Coarse vertex indices strictly inside the unit square, sorted."""
    idx = np.arange(coarse.n_vertices)
    i = idx % (coarse.n + 1)
    j = idx // (coarse.n + 1)
    return idx[(i > 0) & (i < coarse.n) & (j > 0) & (j < coarse.n)]


def patch(pm, coarse, node, k):
    """Extension patch of a coarse node: its support plus k vertex-adjacent layers.

    Growth adds every coarse triangle sharing at least a vertex with the
    previous layer; fine membership uses the nested containment map and
    the activity mask.
    """
    i, j = coarse_node_grid(coarse, node)
    if not (0 < i < coarse.n and 0 < j < coarse.n):
        raise ConfigurationError(f"coarse node {node} lies on the boundary")

    vert_mask = np.zeros(coarse.n_vertices, dtype=bool)
    vert_mask[node] = True
    tri_mask = vert_mask[coarse.triangles].any(axis=1)
    for _ in range(k):
        vert_mask[:] = False
        vert_mask[coarse.triangles[tri_mask].ravel()] = True
        tri_mask = vert_mask[coarse.triangles].any(axis=1)

    f2c = fine_to_coarse(pm.mesh.n, coarse.n)
    fine_mask = tri_mask[f2c] & pm.active
    fine_ids = np.flatnonzero(fine_mask)

    corners = pm.mesh.triangles[fine_ids].ravel()
    inside = np.bincount(corners, minlength=pm.mesh.n_vertices)
    surrounded = (pm.dof_index >= 0) & (inside == pm.active_degree) & (pm.active_degree > 0)
    interior = pm.dof_index[np.flatnonzero(surrounded)]
    return PatchSet(
        node=node,
        k=k,
        coarse_triangles=np.flatnonzero(tri_mask),
        fine_triangles=fine_ids,
        interior_dofs=np.sort(interior),
    )


def dump_mesh(pm, path):
    """Plain-text dump: 'v x y' per vertex, 't i j k a' per triangle."""
    with open(path, "w") as f:
        for x, y in pm.mesh.points:
            f.write(f"v {x:.17g} {y:.17g}\n")
        for tri, a in zip(pm.mesh.triangles, pm.active):
            f.write(f"t {tri[0]} {tri[1]} {tri[2]} {int(a)}\n")
