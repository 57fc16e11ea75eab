"""Triangulations of the spatial domain.

A :class:`TriangleMesh` is an immutable, validated, counter-clockwise
triangulation. Meshes are read from a pair of CSV files (vertices and
triangles) or built with :func:`delaunay` for synthetic experiments.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import Delaunay, QhullError

from ._validation import InputError, check_points, frozen

EDGE_TOL = 1e-10


class MeshError(InputError):
    """Raised for malformed, degenerate or non-conforming meshes."""


@dataclass(frozen=True)
class BarycentricPoint:
    triangle_id: int
    coords: tuple


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Validated triangulation with counter-clockwise triangles.

    Parameters
    ----------
    vertices : array-like of shape (n_vertices, 2)
    triangles : array-like of shape (M, 3)
        Vertex indices (0-based). Clockwise triangles are reoriented.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    _digest: str = field(init=False, repr=False)

    def __post_init__(self):
        verts = check_points(self.vertices, "vertices")
        tris = np.asarray(self.triangles)
        if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
            raise MeshError(f"triangles must have shape (M, 3), got {tris.shape}")
        if not np.issubdtype(tris.dtype, np.integer):
            if not np.all(tris == np.round(tris)):
                raise MeshError("triangle vertex indices must be integers")
        tris = tris.astype(np.int64)
        if tris.min() < 0 or tris.max() >= len(verts):
            bad = np.flatnonzero((tris < 0).any(1) | (tris >= len(verts)).any(1))
            raise MeshError(f"dangling vertex references in triangles {bad.tolist()}")
        same = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if same.any():
            raise MeshError(f"repeated vertices in triangles {np.flatnonzero(same).tolist()}")

        area2 = _signed_area2(verts, tris)
        scale = np.ptp(verts, axis=0).max() ** 2 or 1.0
        degenerate = np.abs(area2) <= 1e-14 * scale
        if degenerate.any():
            raise MeshError(f"degenerate (zero-area) triangles {np.flatnonzero(degenerate).tolist()}")
        flip = area2 < 0
        tris[flip] = tris[flip][:, [0, 2, 1]]

        _check_conforming(verts, tris)
        object.__setattr__(self, "vertices", frozen(verts))
        object.__setattr__(self, "triangles", frozen(tris, np.int64))
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        object.__setattr__(self, "_digest", h.hexdigest())

    @property
    def M(self):
        return len(self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def digest(self):
        """SHA-256 of the vertex and triangle arrays."""
        return self._digest

    def __eq__(self, other):
        return isinstance(other, TriangleMesh) and other.digest == self.digest

    def __hash__(self):
        return hash(self._digest)

    def areas(self):
        return 0.5 * _signed_area2(self.vertices, self.triangles)

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def corners(self, triangle_id):
        return self.vertices[self.triangles[triangle_id]]

    def edges(self):
        """Map each undirected edge ``(a, b)`` with ``a < b`` to its triangle ids."""
        out = {}
        for k, tri in enumerate(self.triangles):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                out.setdefault(key, []).append(k)
        return out

    def interior_edges(self):
        return {e: ts for e, ts in self.edges().items() if len(ts) == 2}

    def min_angles(self):
        """Smallest interior angle (radians) of every triangle."""
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cos, -1, 1)))
        return np.min(angles, axis=0)


def _signed_area2(verts, tris):
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    return (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])


def _check_conforming(verts, tris):
    # every edge is used by at most two triangles
    counts = {}
    for k, tri in enumerate(tris):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts.setdefault(key, []).append(k)
    over = [ts for ts in counts.values() if len(ts) > 2]
    if over:
        raise MeshError(f"non-conforming mesh: edge shared by triangles {over[0]}")

    scale = np.ptp(verts, axis=0).max() or 1.0
    tol = 1e-12 * scale

    # hanging vertices lying strictly inside another triangle's edge
    edges = np.array(list(counts.keys()))
    a, b = verts[edges[:, 0]], verts[edges[:, 1]]
    d = b - a
    len2 = np.sum(d * d, axis=1)
    for v in range(len(verts)):
        w = verts[v] - a
        t = np.sum(w * d, axis=1) / len2
        cross = np.abs(w[:, 0] * d[:, 1] - w[:, 1] * d[:, 0]) / np.sqrt(len2)
        hit = (cross <= tol) & (t > 1e-12) & (t < 1 - 1e-12)
        hit &= (edges[:, 0] != v) & (edges[:, 1] != v)
        if hit.any():
            e = edges[np.argmax(hit)]
            raise MeshError(f"non-conforming mesh: vertex {v} lies inside edge {tuple(e)}")

    # interior overlap via separating axes, pre-filtered by bounding boxes
    p = verts[tris]
    lo, hi = p.min(axis=1), p.max(axis=1)
    normals = np.stack([np.stack([-(p[:, (i + 1) % 3, 1] - p[:, i, 1]),
                                  p[:, (i + 1) % 3, 0] - p[:, i, 0]], axis=1) for i in range(3)], axis=1)
    for i in range(len(tris) - 1):
        cand = np.arange(i + 1, len(tris))
        box = np.all(lo[cand] < hi[i] - tol, axis=1) & np.all(hi[cand] > lo[i] + tol, axis=1)
        cand = cand[box]
        if len(cand) == 0:
            continue
        separated = np.zeros(len(cand), dtype=bool)
        for axes in (np.broadcast_to(normals[i], (len(cand), 3, 2)), normals[cand]):
            for k in range(3):
                ax = axes[:, k, :]
                pi = np.einsum("vd,cd->cv", p[i], ax)
                pj = np.einsum("cvd,cd->cv", p[cand], ax)
                norm = np.linalg.norm(ax, axis=1)
                gap = np.minimum(pi.max(1), pj.max(1)) - np.maximum(pi.min(1), pj.min(1))
                separated |= gap <= tol * norm
        if not separated.all():
            j = cand[np.argmin(separated)]
            raise MeshError(f"non-conforming mesh: triangles {i} and {j} overlap")


def load_mesh(vertices_source, triangles_source):
    """Read a mesh from CSV files with headers ``id,u1,u2`` and ``id,v1,v2,v3``."""
    try:
        vdf = pd.read_csv(vertices_source, float_precision="round_trip")
        tdf = pd.read_csv(triangles_source, float_precision="round_trip")
    except FileNotFoundError as exc:
        raise MeshError(f"mesh file not found: {exc.filename}") from exc
    for df, cols, src in ((vdf, ["id", "u1", "u2"], vertices_source),
                          (tdf, ["id", "v1", "v2", "v3"], triangles_source)):
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise MeshError(f"{src}: missing columns {missing}")
        if df["id"].duplicated().any():
            dup = df.loc[df["id"].duplicated(), "id"].tolist()
            raise MeshError(f"{src}: duplicate ids {dup}")
    vdf = vdf.sort_values("id")
    pos = {int(v): k for k, v in enumerate(vdf["id"])}
    tdf = tdf.sort_values("id")
    tris = []
    for row in tdf[["id", "v1", "v2", "v3"]].itertuples(index=False):
        try:
            tris.append([pos[int(row.v1)], pos[int(row.v2)], pos[int(row.v3)]])
        except KeyError as exc:
            raise MeshError(f"triangle {row.id} references unknown vertex {exc.args[0]}") from None
    return TriangleMesh(vdf[["u1", "u2"]].to_numpy(float), np.array(tris, dtype=np.int64))


def save_mesh(mesh, vertices_path, triangles_path):
    pd.DataFrame({"id": np.arange(mesh.n_vertices), "u1": mesh.vertices[:, 0],
                  "u2": mesh.vertices[:, 1]}).to_csv(vertices_path, index=False)
    t = mesh.triangles
    pd.DataFrame({"id": np.arange(mesh.M), "v1": t[:, 0], "v2": t[:, 1],
                  "v3": t[:, 2]}).to_csv(triangles_path, index=False)


def _bary_all(mesh, pts):
    """Barycentric coordinates of every point in every triangle, shape (n, M, 3)."""
    p = mesh.vertices[mesh.triangles]
    v0 = p[:, 0]
    e1, e2 = p[:, 1] - v0, p[:, 2] - v0
    det = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    w = pts[:, None, :] - v0[None]
    b1 = (w[..., 0] * e2[:, 1] - w[..., 1] * e2[:, 0]) / det
    b2 = (e1[:, 0] * w[..., 1] - e1[:, 1] * w[..., 0]) / det
    return np.stack([1 - b1 - b2, b1, b2], axis=-1)


def barycentric(mesh, triangle_id, point):
    """Affine coordinates of ``point`` with respect to triangle ``triangle_id``."""
    corners = mesh.corners(triangle_id)
    pt = check_points(point)[0]
    A = np.array([corners[1] - corners[0], corners[2] - corners[0]]).T
    try:
        b12 = np.linalg.solve(A, pt - corners[0])
    except np.linalg.LinAlgError as exc:
        raise MeshError(f"triangle {triangle_id} is degenerate") from exc
    return BarycentricPoint(int(triangle_id), (1.0 - b12[0] - b12[1], float(b12[0]), float(b12[1])))


def locate_all(mesh, points):
    """Vectorised :func:`locate`; returns ids with -1 for points outside."""
    pts = check_points(points)
    out = np.full(len(pts), -1, dtype=np.int64)
    bary = np.empty((len(pts), 3))
    chunk = max(1, 2_000_000 // (3 * mesh.M))
    for s in range(0, len(pts), chunk):
        b = _bary_all(mesh, pts[s:s + chunk])
        inside = np.all(b >= -EDGE_TOL, axis=2)
        found = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        ids = np.where(found, first, -1)
        out[s:s + chunk] = ids
        bary[s:s + chunk] = b[np.arange(len(ids)), np.maximum(ids, 0)]
    return out, bary


def locate(mesh, point):
    """Lowest-id triangle containing ``point`` or ``None`` when outside."""
    ids, _ = locate_all(mesh, point)
    return None if ids[0] < 0 else int(ids[0])


def delaunay(points):
    """Delaunay triangulation of the convex hull of ``points``."""
    pts = check_points(points)
    if len(pts) < 3:
        raise MeshError("delaunay needs at least 3 points")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise MeshError("points are collinear; no triangulation exists") from exc
    used = np.unique(tri.simplices)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    return TriangleMesh(pts[used], remap[tri.simplices])


def grid_mesh(nx, ny, bounds=(0.0, 1.0, 0.0, 1.0)):
    """Type-I triangulation of a rectangle: ``nx * ny`` cells split by one diagonal."""
    x0, x1, y0, y1 = bounds
    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    verts = np.array([(x, y) for y in ys for x in xs])
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            tris += [[a, b, d], [a, d, c]]
    return TriangleMesh(verts, np.array(tris))
