"""Mesh and 2D triangulation primitives.

Provides the geometric substrate used everywhere else: triangle meshes with a
shared-topology contract, area-weighted vertex normals, a deterministic
Bowyer-Watson Delaunay triangulation for landmark graphs, exact closest-point
queries, and offset-surface projection.

All operations are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


def _as_points(a, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise GeometryError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    return arr


@dataclass
class Mesh:
    """Triangle mesh in millimetres with a topology identity tag.

    Meshes sharing a ``topology_id`` are guaranteed to have the same vertex
    count and triangle list, which is what allows per-vertex annotations
    (landmarks, region labels) to transfer between them unchanged.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    topology_id: str = ""

    def __post_init__(self):
        self.vertices = _as_points(self.vertices, 3, "vertices")
        tris = np.asarray(self.triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise GeometryError(f"triangles must have shape (t, 3), got {tris.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")
        self.triangles = tris
        if not self.topology_id:
            self.topology_id = topology_hash(len(self.vertices), tris)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new vertex positions."""
        return Mesh(vertices, self.triangles, self.topology_id)


def topology_hash(n_vertices: int, triangles: np.ndarray) -> str:
    h = hashlib.sha1()
    h.update(str(n_vertices).encode())
    h.update(np.ascontiguousarray(triangles, dtype=np.int64).tobytes())
    return "topo-" + h.hexdigest()[:12]


@dataclass
class LandmarkGraph:
    """2D landmark points plus the edge set of their triangulation.

    The edge list is sorted and duplicate-free; each edge is an (i, j) index
    pair with i < j.
    """

    points: np.ndarray
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self.points = _as_points(self.points, 2, "points")
        self.edges = sorted(set((min(a, b), max(a, b)) for a, b in self.edges))


# ---------------------------------------------------------------------------
# vertex normals


def face_cross_products(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized triangle normals (b-a) x (c-a); magnitude is twice the area."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return np.cross(b - a, c - a)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals.

    Each vertex normal is the normalized sum of the cross products of its
    incident triangles (cross products are already area weighted). Vertices
    whose incident triangles are all degenerate get a NaN row; callers can
    locate them with ``numpy.isnan``.
    """
    cross = face_cross_products(mesh.vertices, mesh.triangles)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    out = np.full_like(acc, np.nan)
    ok = norms > 1e-300
    out[ok] = acc[ok] / norms[ok, None]
    return out


# ---------------------------------------------------------------------------
# Delaunay triangulation (Bowyer-Watson, deterministic)

# Tie handling: a point exactly on a circumcircle is treated as outside during
# insertion; a post-pass flips cocircular quadrilaterals so the kept diagonal
# is the one incident to the lowest vertex index.
_COCIRC_EPS = 4e-11


def _incircle(pts: np.ndarray, a: int, b: int, c: int, d: int) -> float:
    """Positive when pts[d] lies inside the circumcircle of ccw (a, b, c)."""
    ax, ay = pts[a]
    bx, by = pts[b]
    cx, cy = pts[c]
    dx, dy = pts[d]
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    return (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )


def _orient(pts: np.ndarray, a: int, b: int, c: int) -> float:
    ax, ay = pts[a]
    bx, by = pts[b]
    cx, cy = pts[c]
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def delaunay_triangles(points) -> np.ndarray:
    """Delaunay triangulation of 2D points, returned as index triples.

    Deterministic for a fixed input ordering: points are inserted in index
    order into a super-triangle, cavities are retriangulated, and cocircular
    ties are resolved by preferring the diagonal incident to the lowest
    vertex index.

    Raises GeometryError for fewer than 3 points, an all-collinear set, or
    duplicate points (duplicates are reported by index).
    """
    pts_in = _as_points(points, 2, "points")
    n = len(pts_in)
    if n < 3:
        raise GeometryError(f"need at least 3 points, got {n}")

    # exact duplicates
    seen: dict[tuple, int] = {}
    for i, p in enumerate(map(tuple, pts_in)):
        if p in seen:
            raise GeometryError(f"duplicate points at indices {seen[p]} and {i}")
        seen[p] = i

    # normalize to [-1, 1] so the in-circle epsilon has a fixed scale
    center = 0.5 * (pts_in.min(axis=0) + pts_in.max(axis=0))
    half = 0.5 * (pts_in.max(axis=0) - pts_in.min(axis=0)).max()
    if half == 0.0:
        raise GeometryError("all points coincide")
    pts = (pts_in - center) / half

    i0 = 0
    i1 = int(np.argmax(np.linalg.norm(pts - pts[i0], axis=1)))
    d = pts[i1] - pts[i0]
    rel = pts - pts[i0]
    cr = np.abs(d[0] * rel[:, 1] - d[1] * rel[:, 0])
    if cr.max() <= 1e-12:
        raise GeometryError("points are collinear; no 2D triangulation exists")

    # super-triangle well outside the normalized data
    big = 64.0
    sup = np.array([[-big, -big], [big, -big], [0.0, big]])
    pts = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2

    tris: list[tuple[int, int, int]] = [(s0, s1, s2)]
    for p in range(n):
        bad = []
        for ti, (a, b, c) in enumerate(tris):
            if _incircle(pts, a, b, c, p) > _COCIRC_EPS:
                bad.append(ti)
        if not bad:
            # strictly-on-circle fallback: locate by containment
            for ti, (a, b, c) in enumerate(tris):
                if (
                    _orient(pts, a, b, p) >= -1e-300
                    and _orient(pts, b, c, p) >= -1e-300
                    and _orient(pts, c, a, p) >= -1e-300
                ):
                    bad.append(ti)
                    break
            if not bad:
                raise GeometryError(f"failed to locate point {p} during insertion")
        # cavity boundary = edges owned by exactly one bad triangle
        edge_count: dict[tuple[int, int], tuple[int, int]] = {}
        for ti in bad:
            a, b, c = tris[ti]
            for u, v in ((a, b), (b, c), (c, a)):
                key = (min(u, v), max(u, v))
                if key in edge_count:
                    edge_count.pop(key)
                else:
                    edge_count[key] = (u, v)
        for ti in sorted(bad, reverse=True):
            tris.pop(ti)
        for u, v in sorted(edge_count.values()):
            if _orient(pts, u, v, p) > 0:
                tris.append((u, v, p))
            else:
                tris.append((v, u, p))

    tris = [t for t in tris if max(t) < n]
    tris = _tie_break_flips(pts, tris)
    out = np.array(sorted(tuple(sorted(t)) for t in tris), dtype=np.int64)
    return out


def _tie_break_flips(pts: np.ndarray, tris: list) -> list:
    """Lawson pass: repair residual non-Delaunay edges and impose the
    lowest-index-diagonal rule on cocircular quadrilaterals."""
    tris = [tuple(t) for t in tris]
    for _ in range(64):
        adj: dict[tuple[int, int], list[int]] = {}
        for ti, (a, b, c) in enumerate(tris):
            for u, v in ((a, b), (b, c), (c, a)):
                adj.setdefault((min(u, v), max(u, v)), []).append(ti)
        flipped = False
        for edge in sorted(adj):
            owners = adj[edge]
            if len(owners) != 2:
                continue
            t1, t2 = owners
            u, v = edge
            p = next(x for x in tris[t1] if x not in edge)
            q = next(x for x in tris[t2] if x not in edge)
            # flip only across a strictly convex quadrilateral
            if _orient(pts, u, p, q) * _orient(pts, v, p, q) >= 0:
                continue
            a, b, c = tris[t1]
            if _orient(pts, a, b, c) < 0:
                a, b, c = a, c, b
            det = _incircle(pts, a, b, c, q)
            do_flip = det > _COCIRC_EPS or (
                abs(det) <= _COCIRC_EPS and min(p, q) < min(u, v)
            )
            if do_flip:
                tris[t1] = (p, q, u) if _orient(pts, p, q, u) > 0 else (p, u, q)
                tris[t2] = (p, q, v) if _orient(pts, p, q, v) > 0 else (p, v, q)
                flipped = True
                break
        if not flipped:
            break
    return tris


def edges_of_triangles(tris: np.ndarray) -> list:
    edges = set()
    for a, b, c in np.asarray(tris, dtype=np.int64):
        edges.add((min(a, b), max(a, b)))
        edges.add((min(b, c), max(b, c)))
        edges.add((min(a, c), max(a, c)))
    return sorted(edges)


def delaunay(points) -> LandmarkGraph:
    """Delaunay landmark graph: triangulate and return the sorted edge set."""
    tris = delaunay_triangles(points)
    return LandmarkGraph(np.asarray(points, dtype=np.float64), edges_of_triangles(tris))


# ---------------------------------------------------------------------------
# closest point / offset surface


def closest_points_on_mesh(mesh: Mesh, queries) -> tuple[np.ndarray, np.ndarray]:
    """Exact closest points on a triangle mesh for a batch of queries.

    Returns (points (m, 3), triangle indices (m,)). Distances are exact up to
    floating point; every triangle is tested (desk-scale meshes are small
    enough that no spatial index is needed).
    """
    q = _as_points(queries, 3, "queries")
    if len(mesh.triangles) == 0:
        raise GeometryError("mesh has no triangles")
    a = mesh.vertices[mesh.triangles[:, 0]]
    ab = mesh.vertices[mesh.triangles[:, 1]] - a
    ac = mesh.vertices[mesh.triangles[:, 2]] - a

    best_d2 = np.full(len(q), np.inf)
    best_pt = np.zeros((len(q), 3))
    best_tri = np.zeros(len(q), dtype=np.int64)

    # chunk over triangles to bound memory at (chunk x queries)
    chunk = max(1, int(4_000_000 / max(len(q), 1)))
    for start in range(0, len(a), chunk):
        sl = slice(start, start + chunk)
        pt = _closest_point_triangles(q, a[sl], ab[sl], ac[sl])  # (m, t, 3)
        d2 = np.einsum("mtk,mtk->mt", pt - q[:, None, :], pt - q[:, None, :])
        ti = np.argmin(d2, axis=1)
        rows = np.arange(len(q))
        dmin = d2[rows, ti]
        better = dmin < best_d2
        best_d2[better] = dmin[better]
        best_pt[better] = pt[rows[better], ti[better]]
        best_tri[better] = ti[better] + start
    return best_pt, best_tri


def _closest_point_triangles(q, a, ab, ac):
    """Closest point on each triangle (a, a+ab, a+ac) to each query.

    Vectorized form of the standard region-classification algorithm; shapes
    are (m, t, 3) with m queries and t triangles.
    """
    ap = q[:, None, :] - a[None, :, :]
    d1 = np.einsum("tk,mtk->mt", ab, ap)
    d2 = np.einsum("tk,mtk->mt", ac, ap)
    bp = ap - ab[None, :, :]
    d3 = np.einsum("tk,mtk->mt", ab, bp)
    d4 = np.einsum("tk,mtk->mt", ac, bp)
    cp = ap - ac[None, :, :]
    d5 = np.einsum("tk,mtk->mt", ab, cp)
    d6 = np.einsum("tk,mtk->mt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        # edge AB
        t_ab = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0.0)
        # edge AC
        t_ac = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0.0)
        # edge BC
        denom_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(denom_bc != 0, (d4 - d3) / np.where(denom_bc != 0, denom_bc, 1.0), 0.0)

    pt = a[None, :, :] + v[..., None] * ab[None, :, :] + w[..., None] * ac[None, :, :]
    # vertex A region
    in_a = (d1 <= 0) & (d2 <= 0)
    # vertex B region
    in_b = (d3 >= 0) & (d4 <= d3)
    # vertex C region
    in_c = (d6 >= 0) & (d5 <= d6)
    # edge regions
    on_ab = (~in_a) & (~in_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (~in_a) & (~in_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (~in_b) & (~in_c) & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    t_ab = np.clip(t_ab, 0.0, 1.0)
    t_ac = np.clip(t_ac, 0.0, 1.0)
    t_bc = np.clip(t_bc, 0.0, 1.0)
    p_a = np.broadcast_to(a[None, :, :], pt.shape)
    p_b = np.broadcast_to((a + ab)[None, :, :], pt.shape)
    p_ab = a[None, :, :] + t_ab[..., None] * ab[None, :, :]
    p_ac = a[None, :, :] + t_ac[..., None] * ac[None, :, :]
    p_bc = (a + ab)[None, :, :] + t_bc[..., None] * (ac - ab)[None, :, :]

    pt = np.where(on_bc[..., None], p_bc, pt)
    pt = np.where(on_ac[..., None], p_ac, pt)
    pt = np.where(on_ab[..., None], p_ab, pt)
    pt = np.where(in_c[..., None], np.broadcast_to((a + ac)[None, :, :], pt.shape), pt)
    pt = np.where(in_b[..., None], p_b, pt)
    pt = np.where(in_a[..., None], p_a, pt)
    return pt


def offset_surface_project(mesh: Mesh, offset: float, query) -> np.ndarray:
    """Project a query point onto the surface offset outward by ``offset`` mm.

    The result is the closest surface point displaced by ``offset`` along the
    local outward direction. That direction is taken toward the query when
    the query is off the surface (exact for convex meshes), and falls back to
    the area-weighted vertex normal of the nearest triangle when the query
    lies on the surface itself.
    """
    if offset < 0:
        raise GeometryError("offset must be non-negative")
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    base, tri = closest_points_on_mesh(mesh, q)
    base, tri = base[0], int(tri[0])
    if offset == 0.0:
        return base
    d = q[0] - base
    dist = np.linalg.norm(d)
    if dist > 1e-9:
        direction = d / dist
    else:
        cross = face_cross_products(mesh.vertices, mesh.triangles[tri : tri + 1])[0]
        nrm = np.linalg.norm(cross)
        if nrm == 0:
            raise GeometryError("degenerate triangle at query point")
        direction = cross / nrm
    return base + offset * direction


def offset_surface_project_many(mesh: Mesh, offset: float, queries) -> np.ndarray:
    """Batched :func:`offset_surface_project`."""
    q = _as_points(queries, 3, "queries")
    if offset < 0:
        raise GeometryError("offset must be non-negative")
    base, tri = closest_points_on_mesh(mesh, q)
    if offset == 0.0:
        return base
    d = q - base
    dist = np.linalg.norm(d, axis=1)
    direction = np.zeros_like(d)
    far = dist > 1e-9
    direction[far] = d[far] / dist[far, None]
    if not far.all():
        cross = face_cross_products(mesh.vertices, mesh.triangles)
        for i in np.flatnonzero(~far):
            c = cross[tri[i]]
            n = np.linalg.norm(c)
            if n == 0:
                raise GeometryError("degenerate triangle at query point")
            direction[i] = c / n
    return base + offset * direction


# ---------------------------------------------------------------------------
# text I/O


def save_mesh(path, mesh: Mesh) -> None:
    """Write a mesh as Wavefront-style text: "v x y z" and 1-based "f i j k"."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_mesh(path, topology_id: str = "") -> Mesh:
    verts, tris = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(x) for x in parts[1:]])
                elif parts[0] == "f" and len(parts) == 4:
                    tris.append([int(x) - 1 for x in parts[1:]])
                else:
                    raise ValueError("unrecognized record")
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: bad mesh line: {line!r}") from exc
    if not verts:
        raise GeometryError(f"{path}: no vertices found")
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3), topology_id)


def save_landmarks_2d(path, ids, points) -> None:
    pts = _as_points(points, 2, "points")
    with open(path, "w") as fh:
        for lid, p in zip(ids, pts):
            fh.write(f"{lid} {p[0]:.12g} {p[1]:.12g}\n")


def load_landmarks_2d(path) -> tuple[list, np.ndarray]:
    """Read "id x y" lines; returns (ids, (n, 2) float array)."""
    ids, pts = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise GeometryError(f"{path}:{lineno}: expected 'id x y', got {line!r}")
            try:
                pts.append([float(parts[1]), float(parts[2])])
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: bad coordinate in {line!r}") from exc
            ids.append(parts[0])
    return ids, np.array(pts, dtype=np.float64).reshape(-1, 2)
