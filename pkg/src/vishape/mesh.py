"""Triangulated hold-all domain with a tracked inner interface.

The unit square is split into an inner region (label ``INNER``) and an outer
region (label ``OUTER``). The interface is never stored as a curve of its
own; it is derived from the cell labels, so a deformation of the vertices
moves the interface, the subdomains, and every subdomain integral together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

OUTER = 0
INNER = 1

_BOUNDARY_TOL = 1e-12


class MeshError(ValueError):
    """Raised when a mesh cannot be generated or read."""


class CellInversionError(MeshError):
    """Raised when a deformation produces a cell with non-positive area."""

    def __init__(self, cells):
        self.cells = np.asarray(cells)
        super().__init__(f"{self.cells.size} cell(s) inverted by deformation")


def signed_areas(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[cells[:, i]] for i in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable P1 mesh of the unit square.

    ``interface_edges`` is derived: each row ``(i, j)`` is an edge separating an
    inner from an outer cell, oriented so the inner cell lies on its left.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_labels: np.ndarray
    outer_boundary: np.ndarray = field(init=False)
    interface_edges: np.ndarray = field(init=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        cells = np.array(self.cells, dtype=np.int64)
        labels = np.array(self.cell_labels, dtype=np.int8)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (n, 2)")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("cells must have shape (m, 3)")
        if labels.shape != (cells.shape[0],):
            raise MeshError("one label per cell required")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell references a missing vertex")
        for arr in (vertices, cells, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "cell_labels", labels)
        object.__setattr__(self, "outer_boundary", self._find_boundary())
        object.__setattr__(self, "interface_edges", self._find_interface())

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.cells)

    def diameters(self) -> np.ndarray:
        v = self.vertices[self.cells]
        edges = v[:, [1, 2, 0]] - v
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted per row."""
        e = self.cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def adjacency(self):
        e = self.edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    def interface_vertices(self) -> np.ndarray:
        return np.unique(self.interface_edges)

    def n_interface_loops(self) -> int:
        iv = self.interface_vertices()
        if iv.size == 0:
            return 0
        e = self.interface_edges
        n = self.n_vertices
        g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
        return len(np.unique(comp[iv]))

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices, self.cells, self.cell_labels)

    def _find_boundary(self) -> np.ndarray:
        v = self.vertices
        on = ((np.abs(v[:, 0]) <= _BOUNDARY_TOL) | (np.abs(v[:, 0] - 1) <= _BOUNDARY_TOL)
              | (np.abs(v[:, 1]) <= _BOUNDARY_TOL) | (np.abs(v[:, 1] - 1) <= _BOUNDARY_TOL))
        # Vertices on boundary edges (edges used by a single cell) are boundary
        # vertices even after deformation; the coordinate test above is the
        # documented invariant and the edge test catches nothing extra on
        # valid meshes, but keeps deformed meshes consistent.
        directed = self.cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        key = np.sort(directed, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        single = directed[counts[inv.ravel()] == 1]
        on[single.ravel()] = True
        return np.flatnonzero(on)

    def _find_interface(self) -> np.ndarray:
        cells, labels = self.cells, self.cell_labels
        directed = cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        owner = np.repeat(np.arange(len(cells)), 3)
        inner = labels[owner] == INNER
        # An inner cell's directed edge (i, j) has the cell on its left; it is
        # an interface edge when the reversed edge belongs to an outer cell.
        outer_keys = {(int(j), int(i)) for (i, j) in directed[~inner]}
        rows = [(int(i), int(j)) for (i, j) in directed[inner] if (int(i), int(j)) in outer_keys]
        if not rows:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(rows), dtype=np.int64)


def interface_length(mesh: TriangleMesh) -> float:
    e = mesh.interface_edges
    if len(e) == 0:
        return 0.0
    d = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def interface_adjacent_vertices(mesh: TriangleMesh) -> np.ndarray:
    """Interface vertices together with their one-ring neighbours."""
    iv = mesh.interface_vertices()
    if iv.size == 0:
        return iv
    adj = mesh.adjacency()
    mark = np.zeros(mesh.n_vertices, dtype=bool)
    mark[iv] = True
    mark |= np.asarray(adj[iv].sum(axis=0)).ravel() > 0
    return np.flatnonzero(mark)


def deform_mesh(mesh: TriangleMesh, displacement: np.ndarray) -> TriangleMesh:
    """Move every vertex by the nodal displacement; connectivity is kept.

    Raises ``CellInversionError`` when any cell ends up with area <= 0.
    """
    displacement = np.asarray(displacement, dtype=float)
    if displacement.shape != mesh.vertices.shape:
        raise ValueError("displacement must have one 2-vector per vertex")
    if not np.all(np.isfinite(displacement)):
        raise ValueError("displacement contains non-finite values")
    if np.any(displacement[mesh.outer_boundary] != 0.0):
        raise ValueError("displacement must vanish on the outer boundary")
    if not np.any(displacement):
        return mesh
    vertices = mesh.vertices + displacement
    bad = np.flatnonzero(signed_areas(vertices, mesh.cells) <= 0.0)
    if bad.size:
        raise CellInversionError(bad)
    return mesh.with_vertices(vertices)


def quality(mesh: TriangleMesh) -> dict:
    """Summary statistics used to monitor mesh degradation."""
    v = mesh.vertices[mesh.cells]
    lengths = np.linalg.norm(v[:, [1, 2, 0]] - v, axis=2)
    areas = mesh.areas()
    # 4*sqrt(3)*A / sum(l^2) is 1 for equilateral triangles
    ratio = 4.0 * np.sqrt(3.0) * areas / np.sum(lengths**2, axis=1)
    return {
        "min_area": float(areas.min()),
        "min_quality": float(ratio.min()),
        "mean_quality": float(ratio.mean()),
        "h_max": float(lengths.max()),
        "h_min": float(lengths.max(axis=1).min()),
    }


# --------------------------------------------------------------------------
# generation


def circle_curve(center=(0.5, 0.5), radius: float = 0.15, h: float = 0.025) -> np.ndarray:
    return ellipse_curve(center, (radius, radius), 0.0, h)


def ellipse_curve(center=(0.5, 0.5), axes=(0.2, 0.1), angle: float = 0.0,
                  h: float = 0.025) -> np.ndarray:
    """Polygon with roughly uniform edge length ``h`` on an ellipse."""
    a, b = axes
    t = np.linspace(0.0, 2 * np.pi, 4097)
    pts = np.column_stack([a * np.cos(t), b * np.sin(t)])
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    n = max(8, int(round(arc[-1] / h)))
    s = np.linspace(0.0, arc[-1], n + 1)[:-1]
    ts = np.interp(s, arc, t)
    x = np.column_stack([a * np.cos(ts), b * np.sin(ts)])
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return x @ rot.T + np.asarray(center, dtype=float)


def _points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = points[:, 0:1], points[:, 1:2]
    xa, ya = poly[:, 0], poly[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    crosses = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xa + (y - ya) * (xb - xa) / (yb - ya)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1


def _distance_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly
    b = np.roll(poly, -1, axis=0)
    out = np.full(len(points), np.inf)
    for start in range(0, len(points), 2048):
        p = points[start:start + 2048, None, :]
        ab = b - a
        t = np.clip(np.sum((p - a) * ab, axis=2) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        proj = a + t[..., None] * ab
        out[start:start + 2048] = np.linalg.norm(p - proj, axis=2).min(axis=1)
    return out


def generate_interface_mesh(curves, target_edge_length: float, seed: int = 0,
                            smoothing_steps: int = 8) -> TriangleMesh:
    """Conforming triangulation of the unit square around closed polygons.

    Each polygon in ``curves`` must lie strictly inside the square and have
    edge lengths close to ``target_edge_length``. Interior points come from a
    jittered hexagonal lattice with a band cleared around the polygons, so the
    Delaunay triangulation recovers every polygon edge.
    """
    h = float(target_edge_length)
    if not 0 < h < 0.5:
        raise MeshError("target_edge_length must lie in (0, 0.5)")
    if isinstance(curves, np.ndarray) and curves.ndim == 2:
        curves = [curves]
    curves = [np.asarray(c, dtype=float) for c in curves]
    for c in curves:
        if len(c) < 3:
            raise MeshError("interface polygon needs at least 3 points")
        if c.min() <= 0.5 * h or c.max() >= 1 - 0.5 * h:
            raise MeshError("interface polygon too close to the outer boundary")

    rng = np.random.default_rng(seed)
    n_side = max(2, int(np.ceil(1.0 / h)))
    s = np.linspace(0.0, 1.0, n_side + 1)[:-1]
    boundary = np.concatenate([
        np.column_stack([s, np.zeros_like(s)]),
        np.column_stack([np.ones_like(s), s]),
        np.column_stack([1 - s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s), 1 - s]),
    ])

    dy = h * np.sqrt(3.0) / 2
    rows = np.arange(0.0, 1.0 + dy, dy)
    lattice = []
    for j, yj in enumerate(rows):
        xs = np.arange(0.0, 1.0 + h, h) + (0.5 * h if j % 2 else 0.0)
        lattice.append(np.column_stack([xs, np.full_like(xs, yj)]))
    lattice = np.concatenate(lattice)
    lattice += rng.uniform(-0.08 * h, 0.08 * h, size=lattice.shape)
    keep = ((lattice > 0.6 * h) & (lattice < 1 - 0.6 * h)).all(axis=1)
    lattice = lattice[keep]
    for c in curves:
        lattice = lattice[_distance_to_polyline(lattice, c) > 0.65 * h]

    points = np.concatenate([boundary] + curves + [lattice])
    n_fixed = len(boundary) + sum(len(c) for c in curves)
    cells = _delaunay(points, h)
    points = _smooth(points, cells, n_fixed, smoothing_steps)
    # smoothing moves vertices; recompute the Delaunay connectivity once more
    cells = _delaunay(points, h)

    offsets = np.cumsum([len(boundary)] + [len(c) for c in curves])
    edge_set = {tuple(sorted(e)) for e in cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2).tolist()}
    for k, c in enumerate(curves):
        idx = np.arange(offsets[k], offsets[k] + len(c))
        for i, j in zip(idx, np.roll(idx, -1)):
            if (min(i, j), max(i, j)) not in edge_set:
                raise MeshError("interface edge not recovered; refine the interface sampling")

    centroids = points[cells].mean(axis=1)
    labels = np.zeros(len(cells), dtype=np.int8)
    for c in curves:
        labels[_points_in_polygon(centroids, c)] = INNER
    mesh = TriangleMesh(points, cells, labels)
    if np.any(mesh.areas() <= 0):
        raise MeshError("generated mesh has degenerate cells")
    return mesh


def _delaunay(points: np.ndarray, h: float) -> np.ndarray:
    tri = Delaunay(points)
    cells = tri.simplices.astype(np.int64)
    area = signed_areas(points, cells)
    flip = area < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    cells = cells[np.abs(area) > 1e-10 * h * h]
    used = np.zeros(len(points), dtype=bool)
    used[cells] = True
    if not used.all():
        raise MeshError("triangulation dropped input points")
    return cells


def _smooth(points, cells, n_fixed, steps):
    """Laplacian smoothing of lattice points; boundary and interface are fixed."""
    if steps <= 0:
        return points
    n = len(points)
    e = np.sort(cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    e = np.unique(e, axis=0)
    adj = coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                     shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    pts = points.copy()
    free = np.arange(n) >= n_fixed
    for _ in range(steps):
        avg = (adj @ pts) / deg[:, None]
        trial = pts.copy()
        trial[free] = 0.5 * pts[free] + 0.5 * avg[free]
        if np.any(signed_areas(trial, cells) <= 0):
            break
        pts = trial
    return pts


def generate_disk_mesh(radius: float, target_edge_length: float,
                       center=(0.5, 0.5), seed: int = 0) -> TriangleMesh:
    if not 0 < radius < 0.5:
        raise MeshError("radius must lie in (0, 0.5)")
    if not 0 < target_edge_length < radius:
        raise MeshError("target_edge_length must lie in (0, radius)")
    curve = circle_curve(center, radius, target_edge_length)
    return generate_interface_mesh([curve], target_edge_length, seed=seed)


def generate_ellipse_mesh(axes, target_edge_length: float, center=(0.5, 0.5),
                          angle: float = 0.0, seed: int = 0) -> TriangleMesh:
    curve = ellipse_curve(center, axes, angle, target_edge_length)
    return generate_interface_mesh([curve], target_edge_length, seed=seed)


def unit_square_mesh(n: int, inner=None) -> TriangleMesh:
    """Structured ``n x n`` criss-cross-free mesh; ``inner`` is an optional
    box ``(x0, y0, x1, y1)`` whose cells get the inner label."""
    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    cells = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    labels = np.zeros(len(cells), dtype=np.int8)
    if inner is not None:
        x0, y0, x1, y1 = inner
        cen = vertices[cells].mean(axis=1)
        labels[(cen[:, 0] > x0) & (cen[:, 0] < x1) & (cen[:, 1] > y0) & (cen[:, 1] < y1)] = INNER
    return TriangleMesh(vertices, cells, labels)


# --------------------------------------------------------------------------
# refinement


def refine(mesh: TriangleMesh, marked=None) -> TriangleMesh:
    """Red refinement of marked cells with green closure.

    ``marked=None`` refines every cell uniformly. Neighbours that would carry
    two or more hanging nodes are promoted to red; those with exactly one are
    bisected.
    """
    cells = mesh.cells
    m = len(cells)
    red = np.ones(m, dtype=bool) if marked is None else np.zeros(m, dtype=bool)
    if marked is not None:
        red[np.asarray(marked)] = True
    local = cells[:, [0, 1, 1, 2, 2, 0]].reshape(m, 3, 2)
    keys = np.sort(local, axis=2)
    flat = keys.reshape(-1, 2)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.reshape(m, 3)
    while True:
        split = np.zeros(len(uniq), dtype=bool)
        split[inv[red].ravel()] = True
        count = split[inv].sum(axis=1)
        promote = (~red) & (count >= 2)
        if not promote.any():
            break
        red |= promote

    split_ids = np.flatnonzero(split)
    mid_index = np.full(len(uniq), -1, dtype=np.int64)
    mid_index[split_ids] = mesh.n_vertices + np.arange(len(split_ids))
    mids = 0.5 * (mesh.vertices[uniq[split_ids, 0]] + mesh.vertices[uniq[split_ids, 1]])
    vertices = np.concatenate([mesh.vertices, mids])

    new_cells, new_labels = [], []
    for t in range(m):
        a, b, c = cells[t]
        lab = mesh.cell_labels[t]
        mab, mbc, mca = mid_index[inv[t]]
        if red[t]:
            new_cells += [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
            new_labels += [lab] * 4
        elif count[t] == 1:
            if mab >= 0:
                new_cells += [(a, mab, c), (mab, b, c)]
            elif mbc >= 0:
                new_cells += [(a, b, mbc), (a, mbc, c)]
            else:
                new_cells += [(a, b, mca), (mca, b, c)]
            new_labels += [lab] * 2
        else:
            new_cells.append((a, b, c))
            new_labels.append(lab)
    return TriangleMesh(vertices, np.array(new_cells), np.array(new_labels))


# --------------------------------------------------------------------------
# I/O


def write_mesh(mesh: TriangleMesh, path) -> None:
    """Plain text: ``vertices N cells M``, N lines ``x y``, M lines ``i j k label``."""
    lines = [f"vertices {mesh.n_vertices} cells {mesh.n_cells}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k} {int(l)}" for (i, j, k), l in zip(mesh.cells.tolist(), mesh.cell_labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriangleMesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 4 or head[0] != "vertices" or head[2] != "cells":
        raise MeshError(f"{path}: bad mesh header")
    n, m = int(head[1]), int(head[3])
    try:
        vertices = np.array([list(map(float, text[1 + i].split())) for i in range(n)])
        raw = np.array([list(map(int, text[1 + n + i].split())) for i in range(m)])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: truncated or malformed mesh") from exc
    return TriangleMesh(vertices, raw[:, :3], raw[:, 3])


def write_vtk(mesh: TriangleMesh, path, point_data=None) -> None:
    """Legacy ASCII VTK unstructured grid with optional nodal fields.

    ``point_data`` maps names to arrays of shape (n,) or (n, 2).
    """
    out = ["# vtk DataFile Version 3.0", "vishape", "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    out += [f"3 {i} {j} {k}" for i, j, k in mesh.cells.tolist()]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["5"] * mesh.n_cells
    out.append(f"CELL_DATA {mesh.n_cells}")
    out += ["SCALARS label int 1", "LOOKUP_TABLE default"]
    out += [str(int(l)) for l in mesh.cell_labels]
    if point_data:
        out.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [repr(v) for v in values.tolist()]
            else:
                out.append(f"VECTORS {name} double")
                out += [f"{a!r} {b!r} 0.0" for a, b in values.tolist()]
    Path(path).write_text("\n".join(out) + "\n")


def interface_polylines(mesh: TriangleMesh) -> list:
    """Interface loops as ordered point arrays (first point not repeated)."""
    nxt = {int(i): int(j) for i, j in mesh.interface_edges}
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, v = [], start
        while v not in seen and v in nxt:
            seen.add(v)
            loop.append(v)
            v = nxt[v]
        loops.append(mesh.vertices[loop])
    return loops
