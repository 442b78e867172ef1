"""Analytic differentiable image formation.

Forward pass: posed vertices are projected through a pinhole camera and
shaded per vertex with a 3-band real spherical-harmonics illumination model;
pixels come from a z-buffered rasterizer with barycentric (Gouraud) color
interpolation. Backward pass: exact chain-rule gradients of the per-vertex
outputs (screen positions and colors) with respect to all 228 code entries.
Rasterization coverage is treated as locally constant, so pixel-level
gradients flow through vertex attributes only.

Conventions, fixed across the package:

- The camera code block is a delta against a canonical camera placed
  ``CANONICAL_DISTANCE`` mm in front of the head looking along +z. World to
  camera: p_cam = R^T (p - t_world) with R = rodrigues(cam_rot) and
  t_world = canonical_translation + cam_trans. Camera-space depth must be
  positive to project.
- Real SH basis order: (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0),
  (2,1), (2,2), with the standard constants (see ``SH_C``). gamma reshapes
  to (3 channels, 9 bands), channels ordered red, green, blue.
- Surface reflectance is the fixed scalar ``REFLECTANCE`` per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RenderError
from .facemodel import (
    FaceModel,
    SemanticCodeVector,
    evaluate_jacobian,
    evaluate_positions,
    rodrigues,
    rodrigues_jacobian,
)

CANONICAL_DISTANCE = 600.0  # mm from camera to the head origin
CANONICAL_IMAGE_SIZE = 240
CANONICAL_FILL = 0.8  # mean head spans this fraction of the canonical image
REFLECTANCE = 0.8
CANONICAL_GRAY = 0.7  # face intensity under the canonical band-0 white light

# real SH constants, bands 0..2
SH_C = np.array(
    [
        0.28209479177387814,
        0.4886025119029199,
        0.4886025119029199,
        0.4886025119029199,
        1.0925484305920792,
        1.0925484305920792,
        0.31539156525252005,
        1.0925484305920792,
        0.5462742152960396,
    ]
)

CANONICAL_GAMMA0 = CANONICAL_GRAY / (REFLECTANCE * SH_C[0])

_NEAR = 1e-6


@dataclass
class CameraIntrinsics:
    focal: float
    principal: np.ndarray  # (2,) pixels
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise RenderError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise RenderError("image size must be positive")
        self.principal = np.asarray(self.principal, dtype=np.float64).reshape(2)


@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    rotation: np.ndarray  # axis-angle, radians
    translation: np.ndarray  # world position of the camera center, mm

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)


@dataclass
class Illumination:
    """27 SH weights (9 per color channel) and the fixed reflectance."""

    gamma: np.ndarray
    reflectance: float = REFLECTANCE

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if g.shape != (27,):
            raise RenderError(f"gamma must have 27 entries, got {g.shape}")
        self.gamma = g

    @property
    def per_channel(self) -> np.ndarray:
        return self.gamma.reshape(3, 9)


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    depth: np.ndarray  # (h, w), +inf where empty
    coverage: np.ndarray  # (h, w) triangle id, -1 where empty
    bary: np.ndarray | None = field(default=None, repr=False)  # (h, w, 3)

    @property
    def covered(self) -> np.ndarray:
        return self.coverage >= 0


def canonical_gamma() -> np.ndarray:
    g = np.zeros(27)
    g[0::9] = CANONICAL_GAMMA0
    return g


def canonical_intrinsics(model: FaceModel, size: int = CANONICAL_IMAGE_SIZE) -> CameraIntrinsics:
    """Pinhole intrinsics sized so the mean head fills ``CANONICAL_FILL`` of
    the frame at the canonical distance."""
    v = model.mean_shape.vertices
    r = max(np.abs(v[:, 0]).max(), np.abs(v[:, 1]).max())
    focal = CANONICAL_FILL * (size / 2) * CANONICAL_DISTANCE / r
    return CameraIntrinsics(focal, np.array([size / 2, size / 2]), size, size)


def canonical_translation() -> np.ndarray:
    return np.array([0.0, 0.0, -CANONICAL_DISTANCE])


def camera_from_code(code: SemanticCodeVector, intrinsics: CameraIntrinsics) -> Camera:
    """The code's camera block is a delta on the canonical pose."""
    return Camera(intrinsics, code.cam_rot.copy(), canonical_translation() + code.cam_trans)


# ---------------------------------------------------------------------------
# projection


def project(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points.

    Returns (pixel positions (n, 2), camera-space depths (n,)). Raises if
    any point has non-positive depth.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = _camera_space(camera, p)
    if np.any(cam[:, 2] <= 0):
        bad = int(np.argmax(cam[:, 2] <= 0))
        raise RenderError(f"point {bad} is behind the camera (depth {cam[bad, 2]:.3g})")
    u = camera.intrinsics.principal + camera.intrinsics.focal * cam[:, :2] / cam[:, 2:3]
    return u, cam[:, 2]


def _camera_space(camera: Camera, points: np.ndarray) -> np.ndarray:
    R = rodrigues(camera.rotation)
    return (points - camera.translation) @ R  # equals R.T applied to columns


# ---------------------------------------------------------------------------
# spherical-harmonics shading


def sh_basis(normals) -> np.ndarray:
    """Real SH bands 0..2 evaluated at unit vectors; shape (n, 9)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack(
        [
            np.full_like(x, SH_C[0]),
            -SH_C[1] * y,
            SH_C[2] * z,
            -SH_C[3] * x,
            SH_C[4] * x * y,
            -SH_C[5] * y * z,
            SH_C[6] * (3 * z * z - 1),
            -SH_C[7] * x * z,
            SH_C[8] * (x * x - y * y),
        ],
        axis=1,
    )


def sh_basis_gradient(normals) -> np.ndarray:
    """d(sh_basis)/d(normal); shape (n, 9, 3)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    zero = np.zeros_like(x)
    rows = [
        [zero, zero, zero],
        [zero, -SH_C[1] + zero, zero],
        [zero, zero, SH_C[2] + zero],
        [-SH_C[3] + zero, zero, zero],
        [SH_C[4] * y, SH_C[4] * x, zero],
        [zero, -SH_C[5] * z, -SH_C[5] * y],
        [zero, zero, SH_C[6] * 6 * z],
        [-SH_C[7] * z, zero, -SH_C[7] * x],
        [SH_C[8] * 2 * x, -SH_C[8] * 2 * y, zero],
    ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def shade(normal, illum: Illumination) -> np.ndarray:
    """Radiosity of a unit normal under the illumination model; (3,) color."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise RenderError(f"shade expects a unit normal, |n| = {np.linalg.norm(n):.8f}")
    h = sh_basis(n)[0]
    return illum.reflectance * (illum.per_channel @ h)


def shade_vertices(normals_cam: np.ndarray, illum: Illumination) -> np.ndarray:
    h = sh_basis(normals_cam)
    return illum.reflectance * (h @ illum.per_channel.T)


# ---------------------------------------------------------------------------
# rasterization


def rasterize(
    screen: np.ndarray,
    depths: np.ndarray,
    colors: np.ndarray,
    triangles: np.ndarray,
    width: int,
    height: int,
    tri_valid: np.ndarray | None = None,
) -> RenderedImage:
    """Z-buffered scan of triangles with barycentric interpolation.

    Deterministic: depth ties resolve to the lower triangle id. ``tri_valid``
    masks out triangles that must be skipped (e.g. a vertex behind the
    camera).
    """
    tris = np.asarray(triangles, dtype=np.int64)
    if tri_valid is not None:
        tris_idx = np.flatnonzero(tri_valid)
    else:
        tris_idx = np.arange(len(tris))
    pixels = np.zeros((height, width, 3))
    depth_buf = np.full((height, width), np.inf)
    cover = np.full((height, width), -1, dtype=np.int64)
    bary_buf = np.zeros((height, width, 3))
    if len(tris_idx) == 0:
        return RenderedImage(pixels, depth_buf, cover, bary_buf)

    t = tris[tris_idx]
    v0, v1, v2 = screen[t[:, 0]], screen[t[:, 1]], screen[t[:, 2]]
    area = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (
        v2[:, 0] - v0[:, 0]
    )
    keep = np.abs(area) > 1e-12
    t, v0, v1, v2, area = t[keep], v0[keep], v1[keep], v2[keep], area[keep]
    tris_idx = tris_idx[keep]
    if len(t) == 0:
        return RenderedImage(pixels, depth_buf, cover, bary_buf)

    # candidate pixels are those whose centers (col + 0.5) fall inside the
    # bounding box, hence the half-pixel shifts
    x_lo = np.clip(np.ceil(np.minimum.reduce([v0[:, 0], v1[:, 0], v2[:, 0]]) - 0.5), 0, width - 1).astype(np.int64)
    x_hi = np.clip(np.floor(np.maximum.reduce([v0[:, 0], v1[:, 0], v2[:, 0]]) - 0.5) + 1, 0, width).astype(np.int64)
    y_lo = np.clip(np.ceil(np.minimum.reduce([v0[:, 1], v1[:, 1], v2[:, 1]]) - 0.5), 0, height - 1).astype(np.int64)
    y_hi = np.clip(np.floor(np.maximum.reduce([v0[:, 1], v1[:, 1], v2[:, 1]]) - 0.5) + 1, 0, height).astype(np.int64)
    bw = np.maximum(x_hi - x_lo, 0)
    bh = np.maximum(y_hi - y_lo, 0)
    counts = bw * bh
    nonempty = counts > 0
    t, v0, v1, v2, area = t[nonempty], v0[nonempty], v1[nonempty], v2[nonempty], area[nonempty]
    tris_idx, x_lo, y_lo, bw, bh, counts = (
        a[nonempty] for a in (tris_idx, x_lo, y_lo, bw, bh, counts)
    )
    if len(t) == 0:
        return RenderedImage(pixels, depth_buf, cover, bary_buf)

    total = int(counts.sum())
    owner = np.repeat(np.arange(len(t)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - offsets[owner]
    px = x_lo[owner] + local % bw[owner]
    py = y_lo[owner] + local // bw[owner]
    cx = px + 0.5
    cy = py + 0.5

    a0, a1, a2 = v0[owner], v1[owner], v2[owner]
    ar = area[owner]
    l0 = ((a1[:, 1] - a2[:, 1]) * (cx - a2[:, 0]) + (a2[:, 0] - a1[:, 0]) * (cy - a2[:, 1])) / ar
    l1 = ((a2[:, 1] - a0[:, 1]) * (cx - a0[:, 0]) + (a0[:, 0] - a2[:, 0]) * (cy - a0[:, 1])) / ar
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return RenderedImage(pixels, depth_buf, cover, bary_buf)
    owner, px, py, l0, l1, l2 = (a[inside] for a in (owner, px, py, l0, l1, l2))

    z = (
        l0 * depths[t[owner, 0]]
        + l1 * depths[t[owner, 1]]
        + l2 * depths[t[owner, 2]]
    )
    flat = py * width + px
    order = np.lexsort((tris_idx[owner], z, flat))
    flat_sorted = flat[order]
    first = np.ones(len(flat_sorted), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    lam = np.stack([l0[win], l1[win], l2[win]], axis=1)
    tw = t[owner[win]]
    col = (
        lam[:, 0:1] * colors[tw[:, 0]]
        + lam[:, 1:2] * colors[tw[:, 1]]
        + lam[:, 2:3] * colors[tw[:, 2]]
    )
    rows, cols_ = py[win], px[win]
    pixels[rows, cols_] = np.clip(col, 0.0, 1.0)
    depth_buf[rows, cols_] = z[win]
    cover[rows, cols_] = tris_idx[owner[win]]
    bary_buf[rows, cols_] = lam
    return RenderedImage(pixels, depth_buf, cover, bary_buf)


# ---------------------------------------------------------------------------
# full forward pass


def _world_vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = positions[triangles[:, 0]]
    cross = np.cross(positions[triangles[:, 1]] - a, positions[triangles[:, 2]] - a)
    acc = np.zeros_like(positions)
    for k in range(3):
        np.add.at(acc, triangles[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    norms[norms == 0] = 1.0
    return acc / norms[:, None]


def render(
    model: FaceModel,
    code: SemanticCodeVector,
    intrinsics: CameraIntrinsics | None = None,
) -> RenderedImage:
    """Rasterized image of the coded face under the coded camera and light."""
    if intrinsics is None:
        intrinsics = canonical_intrinsics(model)
    camera = camera_from_code(code, intrinsics)
    positions = evaluate_positions(model, code.alpha, code.delta, code.theta)
    cam_pts = _camera_space(camera, positions)
    visible = cam_pts[:, 2] > _NEAR
    if not visible.any():
        raise RenderError("mesh is entirely behind the camera")
    screen = np.zeros((len(positions), 2))
    screen[visible] = (
        intrinsics.principal
        + intrinsics.focal * cam_pts[visible, :2] / cam_pts[visible, 2:3]
    )
    R = rodrigues(camera.rotation)
    normals_cam = _world_vertex_normals(positions, model.mean_shape.triangles) @ R
    colors = shade_vertices(normals_cam, Illumination(code.gamma))
    tris = model.mean_shape.triangles
    tri_ok = visible[tris].all(axis=1)
    # exact back-face cull: head meshes are closed with consistent outward
    # winding, so any pixel reached by a back face is covered by a nearer
    # front face along the same ray
    a = cam_pts[tris[:, 0]]
    face_n = np.cross(cam_pts[tris[:, 1]] - a, cam_pts[tris[:, 2]] - a)
    centroid = (a + cam_pts[tris[:, 1]] + cam_pts[tris[:, 2]]) / 3.0
    tri_ok &= np.einsum("tk,tk->t", face_n, centroid) < 0
    return rasterize(
        screen,
        cam_pts[:, 2],
        colors,
        tris,
        intrinsics.width,
        intrinsics.height,
        tri_valid=tri_ok,
    )


def normalize_render(
    model: FaceModel,
    code: SemanticCodeVector,
    intrinsics: CameraIntrinsics | None = None,
) -> RenderedImage:
    """Render under the fixed canonical camera and band-0 white light.

    Only the geometry part of the code matters; the rendering block is
    replaced wholesale.
    """
    canon = SemanticCodeVector.zeros().with_geometry(code.geometry_part)
    canon.vec[201:] = canonical_gamma()
    return render(model, canon, intrinsics)


def landmark_outputs(
    model: FaceModel,
    code: SemanticCodeVector,
    vertex_ids,
    intrinsics: CameraIntrinsics | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Screen positions and shaded colors of selected vertices.

    This is the per-vertex forward map the backward pass differentiates:
    no rasterization is involved. Only the vertices incident to the query
    set are evaluated, which keeps finite-difference sweeps cheap.
    """
    if intrinsics is None:
        intrinsics = canonical_intrinsics(model)
    ids = np.asarray(vertex_ids, dtype=np.int64)
    camera = camera_from_code(code, intrinsics)
    tris = model.mean_shape.triangles
    face_mask = np.isin(tris, ids).any(axis=1)
    faces = tris[face_mask]
    involved = np.unique(np.concatenate([faces.reshape(-1), ids]))
    pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=involved)
    local = {int(v): k for k, v in enumerate(involved)}
    u, _ = project(camera, pos[[local[int(i)] for i in ids]])

    acc = np.zeros((len(involved), 3))
    a = pos[[local[int(x)] for x in faces[:, 0]]]
    b = pos[[local[int(x)] for x in faces[:, 1]]]
    c = pos[[local[int(x)] for x in faces[:, 2]]]
    cross = np.cross(b - a, c - a)
    for k in range(3):
        np.add.at(acc, [local[int(x)] for x in faces[:, k]], cross)
    n_world = acc[[local[int(i)] for i in ids]]
    norms = np.linalg.norm(n_world, axis=1)
    norms[norms == 0] = 1.0
    n_world = n_world / norms[:, None]
    R = rodrigues(camera.rotation)
    colors = shade_vertices(n_world @ R, Illumination(code.gamma))
    return u, colors


# ---------------------------------------------------------------------------
# backward pass


def backward(
    model: FaceModel,
    code: SemanticCodeVector,
    vertex_ids,
    grad_u: np.ndarray | None = None,
    grad_c: np.ndarray | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Chain-rule gradient of the per-vertex outputs over all 228 entries.

    ``grad_u`` (k, 2) and ``grad_c`` (k, 3) are the incoming loss gradients
    at the screen positions and vertex colors of ``vertex_ids``; either may
    be omitted. Output layout matches the code vector: alpha, delta, theta,
    camera rotation, camera translation, gamma.
    """
    if intrinsics is None:
        intrinsics = canonical_intrinsics(model)
    ids = np.asarray(vertex_ids, dtype=np.int64)
    k = len(ids)
    if grad_u is None:
        grad_u = np.zeros((k, 2))
    if grad_c is None:
        grad_c = np.zeros((k, 3))
    grad_u = np.asarray(grad_u, dtype=np.float64).reshape(k, 2)
    grad_c = np.asarray(grad_c, dtype=np.float64).reshape(k, 3)

    camera = camera_from_code(code, intrinsics)
    tris = model.mean_shape.triangles
    need_normals = bool(grad_c.any())
    if need_normals:
        face_mask = np.isin(tris, ids).any(axis=1)
        faces = tris[face_mask]
        involved = np.unique(np.concatenate([faces.reshape(-1), ids]))
    else:
        faces = tris[:0]
        involved = np.unique(ids)
    local = {int(v): k_ for k_, v in enumerate(involved)}
    pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=involved)

    R = rodrigues(camera.rotation)
    dR = rodrigues_jacobian(camera.rotation)
    rel_all = pos - camera.translation
    cam_all = rel_all @ R

    id_rows = np.array([local[int(i)] for i in ids])
    cam = cam_all[id_rows]
    if np.any(cam[:, 2] <= 0):
        raise RenderError("queried vertex is behind the camera")

    grad_pos = np.zeros_like(pos)
    grad_rot = np.zeros(3)
    grad_trans = np.zeros(3)
    grad_gamma = np.zeros((3, 9))

    # screen-position path
    f = camera.intrinsics.focal
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    g_pc = np.zeros((k, 3))
    g_pc[:, 0] = f / z * grad_u[:, 0]
    g_pc[:, 1] = f / z * grad_u[:, 1]
    g_pc[:, 2] = -f * (x * grad_u[:, 0] + y * grad_u[:, 1]) / (z * z)
    np.add.at(grad_pos, id_rows, g_pc @ R.T)
    grad_trans -= (g_pc @ R.T).sum(axis=0)
    rel = rel_all[id_rows]
    for c_ in range(3):
        grad_rot[c_] += np.einsum("kc,kc->", g_pc, rel @ dR[c_])

    # shading path
    if need_normals:
        fa = np.array([[local[int(xx)] for xx in row] for row in faces])
        cross = np.cross(pos[fa[:, 1]] - pos[fa[:, 0]], pos[fa[:, 2]] - pos[fa[:, 0]])
        acc = np.zeros_like(pos)
        for k_ in range(3):
            np.add.at(acc, fa[:, k_], cross)
        n_raw = acc[id_rows]
        nn = np.linalg.norm(n_raw, axis=1)
        nn[nn == 0] = 1.0
        n_world = n_raw / nn[:, None]
        n_cam = n_world @ R

        illum = Illumination(code.gamma)
        h = sh_basis(n_cam)  # (k, 9)
        grad_gamma += illum.reflectance * grad_c.T @ h
        dh = sh_basis_gradient(n_cam)  # (k, 9, 3)
        # dc/dn_cam = r * Gamma @ dh ; VJP with grad_c
        g_ncam = illum.reflectance * np.einsum(
            "kc,cb,kbn->kn", grad_c, illum.per_channel, dh
        )
        for c_ in range(3):
            grad_rot[c_] += np.einsum("kn,kn->", g_ncam, n_world @ dR[c_])
        g_nworld = g_ncam @ R.T
        g_nraw = (
            g_nworld - (np.einsum("kn,kn->k", g_nworld, n_world))[:, None] * n_world
        ) / nn[:, None]
        g_acc = np.zeros_like(pos)
        np.add.at(g_acc, id_rows, g_nraw)
        gc = g_acc[fa]  # gradient at each face vertex slot w.r.t. its cross product
        g_face = gc[:, 0] + gc[:, 1] + gc[:, 2]
        np.add.at(grad_pos, fa[:, 0], np.cross(g_face, pos[fa[:, 2]] - pos[fa[:, 1]]))
        np.add.at(grad_pos, fa[:, 1], np.cross(g_face, pos[fa[:, 0]] - pos[fa[:, 2]]))
        np.add.at(grad_pos, fa[:, 2], np.cross(g_face, pos[fa[:, 1]] - pos[fa[:, 0]]))

    jac = evaluate_jacobian(model, code.alpha, code.delta, code.theta, idx=involved)
    grad_geom = jac.vjp_geometry(grad_pos)
    return np.concatenate([grad_geom, grad_rot, grad_trans, grad_gamma.reshape(-1)])


# ---------------------------------------------------------------------------
# image I/O (PPM P6 for color, PGM P5 for masks and depth dumps)


def write_ppm(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    q = np.round(arr * 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _pnm_header(data, path)
    if magic != b"P6":
        raise RenderError(f"{path}: expected P6, got {magic!r}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Grayscale P5. Boolean or uint8 input at maxval 255; uint16 data
    (e.g. scaled depth) at maxval 65535, stored big-endian."""
    arr = np.asarray(values)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        if maxval <= 255:
            if arr.dtype == bool:
                arr = arr.astype(np.uint8) * 255
            fh.write(arr.astype(np.uint8).tobytes())
        else:
            fh.write(arr.astype(">u2").tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _pnm_header(data, path)
    if magic != b"P5":
        raise RenderError(f"{path}: expected P5, got {magic!r}")
    if maxval <= 255:
        raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    else:
        raw = np.frombuffer(data, dtype=">u2", count=w * h, offset=offset)
    return raw.reshape(h, w).copy(), maxval


def write_depth_pgm(path, depth: np.ndarray) -> None:
    """Depth dump: finite depths scaled into 1..65535, empty pixels 0."""
    finite = np.isfinite(depth)
    out = np.zeros(depth.shape, dtype=np.uint16)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = (1 + (depth[finite] - lo) / span * 65534).astype(np.uint16)
    write_pgm(path, out, maxval=65535)


def _pnm_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise RenderError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace after maxval
    return fields[0], int(fields[1]), int(fields[2]), int(fields[3]), pos
