"""Constructive Poincare-constant bounds on perforated patches.

A patch is partitioned into simplices; chains of edge-adjacent simplices
connect every simplex to a facet set X* on one unperforated side of the
patch.  Telescoping facet averages along those chains yields computable
upper bounds on the best constant C_P in  ||u - mean(u)|| <= C_P * H *
||grad u||  (H the patch diameter).  A discrete Neumann eigensolve on the
fine mesh provides ground truth from below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from . import fem, geometry, mesh
from .errors import ConfigurationError, GeometryError, NumericalError

# best constant over a single simplex with a face-average constraint
SIMPLEX_FACE_CONSTANT_SQ = 7.0 / 5.0


@dataclass(eq=False, frozen=True)
class SquarePatch:
    """Axis-aligned square window into a perforated fine mesh."""

    spec: "geometry.GeometrySpec"
    h: float
    origin: tuple
    side: float
    n_cells: int
    points: np.ndarray      # local vertices of the window grid
    triangles: np.ndarray   # local triangles (criss convention)
    active: np.ndarray      # bool per local triangle

    @property
    def diameter(self):
        return self.side * np.sqrt(2.0)


def _structured_local(n_cells, origin, side):
    cells = np.arange(n_cells * n_cells)
    ci = cells % n_cells
    cj = cells // n_cells
    v00 = cj * (n_cells + 1) + ci
    v10 = v00 + 1
    v01 = v00 + (n_cells + 1)
    v11 = v01 + 1
    triangles = np.empty((2 * n_cells * n_cells, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])
    axis = np.linspace(0.0, side, n_cells + 1)
    gx, gy = np.meshgrid(axis, axis)
    points = np.column_stack([gx.ravel() + origin[0], gy.ravel() + origin[1]])
    return points, triangles


def square_patch(pm, origin=(0.0, 0.0), side=1.0):
    """Extract the cell-aligned square [x0, x0+side] x [y0, y0+side]."""
    h = pm.mesh.h
    n = pm.mesh.n
    i0 = origin[0] / h
    j0 = origin[1] / h
    nc = side / h
    for name, val in (("origin", i0), ("origin", j0), ("side", nc)):
        if abs(val - round(val)) > 1e-9:
            raise ConfigurationError(f"patch {name} must sit on the fine grid")
    i0, j0, nc = round(i0), round(j0), round(nc)
    if nc < 1 or i0 < 0 or j0 < 0 or i0 + nc > n or j0 + nc > n:
        raise ConfigurationError("patch square exceeds the unit domain")

    cells_local = np.arange(nc * nc)
    ci = cells_local % nc
    cj = cells_local // nc
    cells_global = (cj + j0) * n + (ci + i0)
    active = np.empty(2 * nc * nc, dtype=bool)
    active[0::2] = pm.active[2 * cells_global]
    active[1::2] = pm.active[2 * cells_global + 1]
    points, triangles = _structured_local(nc, origin, side)
    return SquarePatch(
        spec=pm.spec, h=h, origin=tuple(origin), side=side, n_cells=nc,
        points=points, triangles=triangles, active=active,
    )


@dataclass(eq=False, frozen=True)
class PartitionGraph:
    """Dual graph of a simplicial partition with facet-rooted path trees."""

    patch: SquarePatch
    partition_size: float
    points: np.ndarray
    triangles: np.ndarray       # active partition simplices, compact ids
    areas: np.ndarray
    diameters: np.ndarray
    inball_diameters: np.ndarray
    adjacency: csr_matrix
    facet_owners: np.ndarray    # simplex id per facet of X*
    xstar_length: float
    dist: np.ndarray            # (n_facets, n_simplices) BFS distances
    pred: np.ndarray            # matching predecessor trees
    forest_dist: np.ndarray     # distance to the nearest facet owner
    forest_pred: np.ndarray

    @property
    def n_simplices(self):
        return len(self.triangles)

    @property
    def H(self):
        return self.patch.diameter

    @property
    def path_lengths(self):
        """Path length (in simplices) to the nearest facet owner."""
        return self.forest_dist.astype(np.int64) + 1


def _triangle_shape(points, triangles):
    p = points[triangles]
    areas = fem.triangle_areas(points, triangles)
    edges = np.stack(
        [
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
        ],
        axis=1,
    )
    diam = edges.max(axis=1)
    # inscribed-circle diameter from area / semiperimeter
    rho = 2.0 * areas / (0.5 * edges.sum(axis=1))
    return areas, diam, rho


_SIDES = {"right", "left", "top", "bottom"}


def build_partition_graph(patch, side="right", partition_size=None):
    """Partition the patch pore space and build facet-rooted shortest paths.

    The partition is a uniform right-triangle grid at a dyadic size that
    must align with the perforation (each partition triangle is wholly
    fluid or wholly solid; mixed triangles raise).  By default the
    geometry's natural alignment step is used, falling back to a quarter
    of the patch for unperforated patches.  Paths are breadth-first
    shortest chains in the edge-adjacency dual graph, with one tree per
    facet of X*; ties resolve to the lowest simplex index.
    """
    if side not in _SIDES:
        raise ConfigurationError(f"unknown X* side {side!r}")
    if partition_size is None:
        step = geometry.alignment_step(patch.spec)
        partition_size = step if step < 1.0 else patch.side / 4.0
        partition_size = max(partition_size, patch.h)
        partition_size = min(partition_size, patch.side)
    ratio = partition_size / patch.h
    n_part = patch.side / partition_size
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigurationError("partition size must be a multiple of the fine mesh size")
    if abs(n_part - round(n_part)) > 1e-9:
        raise ConfigurationError("partition size must divide the patch side")
    ratio, n_part = round(ratio), round(n_part)

    child_of = mesh.fine_to_coarse(patch.n_cells, n_part)
    n_tris = 2 * n_part * n_part
    active_children = np.bincount(child_of, weights=patch.active, minlength=n_tris)
    children = np.bincount(child_of, minlength=n_tris)
    mixed = (active_children > 0) & (active_children < children)
    if mixed.any():
        raise ConfigurationError(
            f"partition size {partition_size} does not align with the perforation"
        )
    part_active = active_children == children

    points, triangles = _structured_local(n_part, patch.origin, patch.side)
    compact = np.full(n_tris, -1, dtype=np.int64)
    ids = np.flatnonzero(part_active)
    compact[ids] = np.arange(len(ids))
    tris = triangles[ids]
    areas, diam, rho = _triangle_shape(points, tris)

    nb = mesh.dual_neighbors(n_part)
    src = np.repeat(np.arange(n_tris), 3)
    dst = nb.ravel()
    ok = (dst >= 0) & part_active[src] & part_active[np.maximum(dst, 0)]
    adj = coo_matrix(
        (np.ones(ok.sum()), (compact[src[ok]], compact[dst[ok]])),
        shape=(len(ids), len(ids)),
    ).tocsr()

    n_comp = _count_components(adj)
    if n_comp != 1:
        raise GeometryError(f"partition dual graph has {n_comp} components")

    owners_raw = _side_facet_owners(n_part, side)
    if not part_active[owners_raw].all():
        raise ConfigurationError(f"X* side {side!r} of the patch is perforated")
    owners = compact[owners_raw]

    dist, pred = dijkstra(adj, unweighted=True, indices=owners, return_predecessors=True)
    nearest = np.argmin(dist, axis=0)
    cols = np.arange(dist.shape[1])
    forest_dist = dist[nearest, cols]
    forest_pred = pred[nearest, cols]
    if not np.isfinite(forest_dist).all():  # pragma: no cover - guarded by connectivity
        raise GeometryError("some simplices cannot reach X*")

    return PartitionGraph(
        patch=patch,
        partition_size=partition_size,
        points=points,
        triangles=tris,
        areas=areas,
        diameters=diam,
        inball_diameters=rho,
        adjacency=adj,
        facet_owners=owners,
        xstar_length=patch.side,
        dist=dist,
        pred=pred,
        forest_dist=forest_dist,
        forest_pred=forest_pred,
    )


def _count_components(adj):
    from scipy.sparse.csgraph import connected_components

    n, _ = connected_components(adj, directed=False)
    return n


def _side_facet_owners(n_part, side):
    """Partition-triangle ids owning the boundary edges of one bbox side."""
    idx = np.arange(n_part)
    if side == "right":
        cells = idx * n_part + (n_part - 1)
        return 2 * cells          # lower triangle owns the right edge
    if side == "left":
        cells = idx * n_part
        return 2 * cells + 1      # upper triangle owns the left edge
    if side == "bottom":
        return 2 * idx            # lower triangles of the bottom row
    cells = (n_part - 1) * n_part + idx
    return 2 * cells + 1          # upper triangles of the top row


@dataclass(eq=False, frozen=True)
class PoincareEstimate:
    method: str
    value: float
    structural_factor: float | None = None
    s_max: int | None = None
    r_max: int | None = None
    r_max_nearest: int | None = None
    n: int | None = None
    eta_min: float | None = None
    c_reg: float | None = None


def shape_regular_bound(graph):
    """Patch constant bound from path lengths, areas and shape regularity.

    C_P^2 <= (28/5) * 2^(d+1) * C_reg^(d-1) * sum_k s_k |Y_k| / (H^2 eta_min^(d-2))
    with d = 2, per-simplex face constants folded into the leading factor.
    """
    s = graph.path_lengths
    c_reg = float((graph.diameters / graph.inball_diameters).max())
    eta_min = float(graph.diameters.min())
    h_sq = graph.H**2
    value_sq = (28.0 / 5.0) * 8.0 * c_reg * float((s * graph.areas).sum()) / h_sq
    return PoincareEstimate(
        method="shape_regular",
        value=float(np.sqrt(value_sq)),
        s_max=int(s.max()),
        n=graph.n_simplices,
        eta_min=eta_min,
        c_reg=c_reg,
    )


def _descendant_counts(dist_row, pred_row):
    """Nodes in each simplex's subtree (itself included) for one path tree."""
    reachable = np.isfinite(dist_row)
    desc = reachable.astype(np.float64)
    levels = dist_row[reachable].astype(np.int64)
    if len(levels) == 0:
        return desc
    for d in range(levels.max(), 0, -1):
        nodes = np.flatnonzero(reachable & (dist_row == d))
        np.add.at(desc, pred_row[nodes], desc[nodes])
    return desc


def path_multiplicity_bound(graph):
    """Structural factor of the facet-summed bound, generic constant set to 1.

    C_P^2 <= C * s_max * r_max * eta^(d+1) / (|X*| H^2), where r_max is the
    largest number of (simplex, facet) paths any simplex participates in.
    The all-pairs trees feed the bound; the nearest-facet variant is
    recorded alongside for diagnostics.
    """
    n_facets, n = graph.dist.shape
    totals = np.zeros(n)
    for j in range(n_facets):
        totals += _descendant_counts(graph.dist[j], graph.pred[j])
    r_max = int(totals.max())
    s_max = int(graph.dist[np.isfinite(graph.dist)].max()) + 1

    nearest_desc = _descendant_counts(graph.forest_dist, graph.forest_pred)
    r_max_nearest = int(nearest_desc.max())

    eta_part = float(graph.diameters.max())
    factor = s_max * r_max * eta_part**3 / (graph.xstar_length * graph.H**2)
    return PoincareEstimate(
        method="multiplicity",
        value=float(np.sqrt(factor)),
        structural_factor=float(factor),
        s_max=s_max,
        r_max=r_max,
        r_max_nearest=r_max_nearest,
        n=graph.n_simplices,
        eta_min=float(graph.diameters.min()),
    )


def _prefix_path_sums(graph):
    """Per-simplex sum of diam^2/|Y| along the chain to its facet root."""
    g = graph.diameters**2 / graph.areas
    total = np.zeros_like(g)
    dist = graph.forest_dist
    max_d = int(dist.max())
    total[dist == 0] = g[dist == 0]
    for d in range(1, max_d + 1):
        nodes = np.flatnonzero(dist == d)
        total[nodes] = g[nodes] + total[graph.forest_pred[nodes]]
    return total


def telescoped_constant(graph, k):
    """Squared path constant of simplex k, telescoped along its chain.

    (c_k)^2 = 4 * (7/5) * sum_i (|Y_k| / |Y_i|) * diam(Y_i)^2 / H^2 over the
    chain simplices i from k to the facet owner, both ends included.
    """
    g = graph.diameters**2 / graph.areas
    node = k
    acc = 0.0
    while True:
        acc += g[node]
        parent = graph.forest_pred[node]
        if parent < 0:
            break
        node = parent
    return 4.0 * SIMPLEX_FACE_CONSTANT_SQ * graph.areas[k] * acc / graph.H**2


def telescoped_bound(graph):
    """Patch constant from summing every simplex's telescoped path constant."""
    sums = _prefix_path_sums(graph)
    c_sq = 4.0 * SIMPLEX_FACE_CONSTANT_SQ * graph.areas * sums / graph.H**2
    s = graph.path_lengths
    return PoincareEstimate(
        method="telescoped",
        value=float(np.sqrt(c_sq.sum())),
        s_max=int(s.max()),
        n=graph.n_simplices,
        eta_min=float(graph.diameters.min()),
    )


def _neumann_operators(patch):
    """Pure-Neumann stiffness/mass over the patch's active triangles."""
    tris = patch.triangles[patch.active]
    used = np.unique(tris)
    local = np.full(len(patch.points), -1, dtype=np.int64)
    local[used] = np.arange(len(used))
    pts = patch.points[used]
    ltris = local[tris]
    A = fem.assemble_stiffness_on(pts, ltris, len(used))
    M = fem.assemble_mass_on(pts, ltris, len(used))
    return A, M


def _check_patch_connected(patch):
    nb = mesh.dual_neighbors(patch.n_cells)
    src = np.repeat(np.arange(len(patch.active)), 3)
    dst = nb.ravel()
    ok = (dst >= 0) & patch.active[src] & patch.active[np.maximum(dst, 0)]
    g = coo_matrix(
        (np.ones(ok.sum()), (src[ok], dst[ok])),
        shape=(len(patch.active), len(patch.active)),
    ).tocsr()
    from scipy.sparse.csgraph import connected_components

    _, labels = connected_components(g, directed=False)
    if len(np.unique(labels[patch.active])) != 1:
        raise GeometryError("patch pore space is disconnected")


def rayleigh_oracle(patch, tol=1e-9, maxiter=None):
    """Discrete best constant from the second Neumann eigenvalue.

    Solves A v = lambda M v on all patch dofs (no essential conditions),
    takes the smallest nonzero eigenvalue by shift-inverted iteration, and
    returns C_P = 1 / (diam * sqrt(lambda_2)).  A lower bound on the
    continuum constant, used as ground truth for the path bounds.
    """
    _check_patch_connected(patch)
    A, M = _neumann_operators(patch)
    n = A.shape[0]
    scale = A.diagonal().sum() / max(M.diagonal().sum(), 1e-300)
    sigma = -1e-10 * scale
    v0 = np.linspace(0.1, 1.0, n)
    try:
        vals = eigsh(
            A, k=2, M=M, sigma=sigma, which="LM", v0=v0,
            tol=tol, maxiter=maxiter, return_eigenvectors=False,
        )
    except ArpackNoConvergence as exc:
        raise NumericalError(f"Neumann eigensolve stagnated: {exc}") from exc
    lam = float(np.sort(vals)[-1])
    if lam <= 0.0:
        raise NumericalError(f"nonpositive second eigenvalue {lam:.3e}")
    return PoincareEstimate(
        method="rayleigh",
        value=float(1.0 / (patch.diameter * np.sqrt(lam))),
        n=int(patch.active.sum()),
    )


def constrained_min_rayleigh(A, M, f, diam, tol=0):
    """Best constant with a linear constraint f' u = 0 instead of the kernel.

    Eliminates one dof against the constraint and solves the reduced
    generalized eigenproblem; returns 1 / (diam * sqrt(lambda_min)).
    """
    f = np.asarray(f, dtype=float)
    n = len(f)
    m = int(np.argmax(np.abs(f)))
    if f[m] == 0.0:
        raise ConfigurationError("constraint vector is zero")
    others = np.concatenate([np.arange(m), np.arange(m + 1, n)])
    rows = np.concatenate([others, np.full(n - 1, m)])
    cols = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
    data = np.concatenate([np.ones(n - 1), -f[others] / f[m]])
    Z = coo_matrix((data, (rows, cols)), shape=(n, n - 1)).tocsr()
    Az = (Z.T @ A @ Z).tocsc()
    Mz = (Z.T @ M @ Z).tocsc()
    v0 = np.linspace(0.1, 1.0, n - 1)
    try:
        vals = eigsh(
            Az, k=1, M=Mz, sigma=0.0, which="LM", v0=v0,
            tol=tol, return_eigenvectors=False,
        )
    except ArpackNoConvergence as exc:
        raise NumericalError(f"constrained eigensolve stagnated: {exc}") from exc
    lam = float(vals[0])
    return 1.0 / (diam * np.sqrt(lam))


def simplex_face_constant(n=64):
    """Discrete best constant of one right triangle against a leg average.

    The unit right triangle (legs along the axes) is meshed at 1/n and the
    constraint is a vanishing average over the bottom leg.  The value
    undershoots the continuum constant, which theory caps at sqrt(7/5).
    """
    sm = mesh.build_structured_mesh(n)
    bary = mesh.barycenters(sm)
    keep = bary[:, 0] > bary[:, 1]
    tris = sm.triangles[keep]
    used = np.unique(tris)
    local = np.full(sm.n_vertices, -1, dtype=np.int64)
    local[used] = np.arange(len(used))
    pts = sm.points[used]
    ltris = local[tris]
    A = fem.assemble_stiffness_on(pts, ltris, len(used))
    M = fem.assemble_mass_on(pts, ltris, len(used))

    # hat integrals along the bottom edge: h/2 to each endpoint per segment
    f = np.zeros(len(used))
    h = 1.0 / n
    bottom = np.flatnonzero(pts[:, 1] == 0.0)
    order = bottom[np.argsort(pts[bottom, 0])]
    for a, b in zip(order[:-1], order[1:]):
        f[a] += 0.5 * h
        f[b] += 0.5 * h
    value = constrained_min_rayleigh(A, M, f, diam=np.sqrt(2.0))
    return PoincareEstimate(method="rayleigh", value=value, n=int(keep.sum()))
