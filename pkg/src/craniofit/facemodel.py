"""Parametric head model and the semantic code vector.

A face is described by a 228-entry code split into a geometry part (90 shape
coefficients, 90 expression coefficients, 15 pose values) and a rendering
part (camera rotation, camera translation, 27 illumination weights). The
model maps the geometry part to a mesh with fixed topology: linear blend
shapes followed by rigid-joint posing with linear blend skinning.

Pose layout: theta[0:3] is a global axis-angle rotation about the origin,
theta[3*j : 3*j+3] for j in 1..4 are per-joint axis-angle rotations about
the joint pivots (jaw, neck, left eye, right eye). A vertex moves as

    posed = R_global @ (w0 * v + sum_j w_j * (R_j @ (v - p_j) + p_j))

where row (w0, w1..w4) of the skinning matrix sums to one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError
from .geometry import Mesh

N_SHAPE = 90
N_EXPR = 90
N_JOINTS = 4  # plus one global rotation
N_THETA = 3 * (N_JOINTS + 1)
GEOM_DIM = N_SHAPE + N_EXPR + N_THETA  # 195
RENDER_DIM = 3 + 3 + 27  # camera rotation, translation, illumination
CODE_DIM = GEOM_DIM + RENDER_DIM  # 228

_A = 0
_D = N_SHAPE
_TH = N_SHAPE + N_EXPR
_CR = GEOM_DIM
_CT = GEOM_DIM + 3
_GM = GEOM_DIM + 6


@dataclass
class SemanticCodeVector:
    """The 228-entry code (shape, expression, pose, camera, illumination)."""

    vec: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64).reshape(-1)
        if v.shape != (CODE_DIM,):
            raise ModelError(f"code vector must have {CODE_DIM} entries, got {v.shape}")
        self.vec = v

    @classmethod
    def zeros(cls) -> "SemanticCodeVector":
        return cls(np.zeros(CODE_DIM))

    @classmethod
    def from_parts(cls, alpha=None, delta=None, theta=None, cam_rot=None, cam_trans=None, gamma=None):
        v = np.zeros(CODE_DIM)
        for sl, val in (
            (slice(_A, _D), alpha),
            (slice(_D, _TH), delta),
            (slice(_TH, _CR), theta),
            (slice(_CR, _CT), cam_rot),
            (slice(_CT, _GM), cam_trans),
            (slice(_GM, CODE_DIM), gamma),
        ):
            if val is not None:
                v[sl] = val
        return cls(v)

    alpha = property(lambda self: self.vec[_A:_D])
    delta = property(lambda self: self.vec[_D:_TH])
    theta = property(lambda self: self.vec[_TH:_CR])
    cam_rot = property(lambda self: self.vec[_CR:_CT])
    cam_trans = property(lambda self: self.vec[_CT:_GM])
    gamma = property(lambda self: self.vec[_GM:CODE_DIM])

    @property
    def geometry_part(self) -> np.ndarray:
        """The 195 entries driving the mesh."""
        return self.vec[:GEOM_DIM]

    @property
    def rendering_part(self) -> np.ndarray:
        """The 33 entries driving camera and illumination."""
        return self.vec[GEOM_DIM:]

    def copy(self) -> "SemanticCodeVector":
        return SemanticCodeVector(self.vec.copy())

    def with_geometry(self, geom) -> "SemanticCodeVector":
        v = self.vec.copy()
        v[:GEOM_DIM] = geom
        return SemanticCodeVector(v)


def geometry_slices():
    """(alpha, delta, theta) slices into the geometry part."""
    return slice(_A, _D), slice(_D, _TH), slice(_TH, _CR)


# ---------------------------------------------------------------------------
# axis-angle rotations


def rodrigues(rvec) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    v = np.asarray(rvec, dtype=np.float64)
    th2 = float(v @ v)
    K = np.array(
        [[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64
    )
    if th2 < 1e-16:
        return np.eye(3) + K + 0.5 * (K @ K)
    th = np.sqrt(th2)
    return np.eye(3) + (np.sin(th) / th) * K + ((1 - np.cos(th)) / th2) * (K @ K)


def rodrigues_jacobian(rvec) -> np.ndarray:
    """d(rodrigues)/d(rvec), shape (3, 3, 3) indexed [component, row, col].

    Closed form: dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) / |v|^2 @ R, with
    the limit [e_i]x at v = 0.
    """
    v = np.asarray(rvec, dtype=np.float64)
    th2 = float(v @ v)
    R = rodrigues(v)
    out = np.zeros((3, 3, 3))
    if th2 < 1e-12:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = _skew(e) @ R
        return out
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        w = np.cross(v, (np.eye(3) - R) @ e)
        out[i] = ((v[i] * _skew(v) + _skew(w)) / th2) @ R
    return out


def _skew(v) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


# ---------------------------------------------------------------------------
# model


@dataclass
class FaceModel:
    """Mean head plus shape/expression displacement bases and pose joints."""

    mean_shape: Mesh
    shape_basis: np.ndarray  # (n_shape, N, 3)
    expression_basis: np.ndarray  # (n_expr, N, 3)
    joint_pivots: np.ndarray  # (K+1, 3); row 0 is the global pivot (origin)
    skin_weights: np.ndarray  # (N, K+1); rows sum to 1
    anthropometric_map: dict = field(default_factory=dict)  # landmark id -> vertex index

    def __post_init__(self):
        n = self.mean_shape.n_vertices
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expression_basis = np.asarray(self.expression_basis, dtype=np.float64)
        self.joint_pivots = np.asarray(self.joint_pivots, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        if self.shape_basis.shape[1:] != (n, 3):
            raise ModelError(
                f"shape basis fields must be ({n}, 3), got {self.shape_basis.shape[1:]}"
            )
        if self.expression_basis.shape[1:] != (n, 3):
            raise ModelError(
                f"expression basis fields must be ({n}, 3), got {self.expression_basis.shape[1:]}"
            )
        k1 = self.joint_pivots.shape[0]
        if self.skin_weights.shape != (n, k1):
            raise ModelError(
                f"skin weights must be ({n}, {k1}), got {self.skin_weights.shape}"
            )
        if self.skin_weights.min() < -1e-12:
            raise ModelError("skin weights must be non-negative")
        row_sums = self.skin_weights.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-9:
            raise ModelError("skin weight rows must sum to 1")
        for lid, vi in self.anthropometric_map.items():
            if not 0 <= vi < n:
                raise ModelError(f"anthropometric landmark {lid!r} maps to bad vertex {vi}")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.n_vertices

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expression_basis.shape[0]

    @property
    def topology_id(self) -> str:
        return self.mean_shape.topology_id

    def landmark_vertex_indices(self, ids) -> np.ndarray:
        missing = [str(i) for i in ids if str(i) not in self.anthropometric_map]
        if missing:
            raise ModelError(f"landmark ids not in anthropometric map: {missing}")
        return np.array([self.anthropometric_map[str(i)] for i in ids], dtype=np.int64)


def _check_coeffs(model: FaceModel, alpha, delta, theta):
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if alpha.shape != (model.n_shape,):
        raise ModelError(f"alpha block: expected {model.n_shape} entries, got {alpha.shape[0]}")
    if delta.shape != (model.n_expr,):
        raise ModelError(f"delta block: expected {model.n_expr} entries, got {delta.shape[0]}")
    n_theta = 3 * (len(model.joint_pivots))
    if theta.shape != (n_theta,):
        raise ModelError(f"theta block: expected {n_theta} entries, got {theta.shape[0]}")
    return alpha, delta, theta


def _pose_rotations(model: FaceModel, theta):
    rots = [rodrigues(theta[3 * j : 3 * j + 3]) for j in range(len(model.joint_pivots))]
    return rots  # rots[0] is global


def evaluate_positions(model: FaceModel, alpha, delta, theta, idx=None) -> np.ndarray:
    """Posed vertex positions for a geometry code; optionally only rows idx."""
    alpha, delta, theta = _check_coeffs(model, alpha, delta, theta)
    if idx is None:
        base = model.mean_shape.vertices.copy()
        base += np.tensordot(alpha, model.shape_basis, axes=(0, 0))
        base += np.tensordot(delta, model.expression_basis, axes=(0, 0))
        w = model.skin_weights
    else:
        idx = np.asarray(idx, dtype=np.int64)
        base = model.mean_shape.vertices[idx].copy()
        base += np.tensordot(alpha, model.shape_basis[:, idx], axes=(0, 0))
        base += np.tensordot(delta, model.expression_basis[:, idx], axes=(0, 0))
        w = model.skin_weights[idx]
    if not theta.any():  # zero pose is the identity, bit-exactly
        return base
    rots = _pose_rotations(model, theta)
    blended = w[:, 0:1] * base
    for j in range(1, len(rots)):
        p = model.joint_pivots[j]
        blended += w[:, j : j + 1] * ((base - p) @ rots[j].T + p)
    return blended @ rots[0].T


def evaluate(model: FaceModel, alpha, delta, theta) -> Mesh:
    """Posed mesh for a geometry code; topology is that of the mean shape."""
    return model.mean_shape.with_vertices(evaluate_positions(model, alpha, delta, theta))


def evaluate_mesh_from_code(model: FaceModel, code: SemanticCodeVector) -> Mesh:
    return evaluate(model, code.alpha, code.delta, code.theta)


@dataclass
class ModelJacobian:
    """Per-vertex derivative blocks of posed positions at a geometry code.

    ``pose_matrix[i]`` is the 3x3 map from a base-shape displacement of
    vertex i to its posed displacement, so d(posed_i)/d(alpha_k) is
    ``pose_matrix[i] @ shape_basis[k, i]``. ``d_theta`` holds the explicit
    (3, n_theta) pose derivative per vertex.
    """

    model: FaceModel
    idx: np.ndarray  # vertex indices covered, (k,)
    pose_matrix: np.ndarray  # (k, 3, 3)
    d_theta: np.ndarray  # (k, 3, n_theta)

    def vjp_geometry(self, grad_pos: np.ndarray) -> np.ndarray:
        """Contract (k, 3) position gradients into a 195-entry gradient."""
        g_base = np.einsum("kab,ka->kb", self.pose_matrix, grad_pos)
        g_alpha = np.einsum("qkc,kc->q", self.model.shape_basis[:, self.idx], g_base)
        g_delta = np.einsum("qkc,kc->q", self.model.expression_basis[:, self.idx], g_base)
        g_theta = np.einsum("kct,kc->t", self.d_theta, grad_pos)
        return np.concatenate([g_alpha, g_delta, g_theta])

    def dense(self) -> np.ndarray:
        """Full (k, 3, 195) Jacobian."""
        d_alpha = np.einsum("kab,qkb->kaq", self.pose_matrix, self.model.shape_basis[:, self.idx])
        d_delta = np.einsum("kab,qkb->kaq", self.pose_matrix, self.model.expression_basis[:, self.idx])
        return np.concatenate([d_alpha, d_delta, self.d_theta], axis=2)


def evaluate_jacobian(model: FaceModel, alpha, delta, theta, idx=None) -> ModelJacobian:
    """Analytic derivatives of posed positions with respect to the code."""
    alpha, delta, theta = _check_coeffs(model, alpha, delta, theta)
    if idx is None:
        idx = np.arange(model.n_vertices)
    else:
        idx = np.asarray(idx, dtype=np.int64)
    base = model.mean_shape.vertices[idx].copy()
    base += np.tensordot(alpha, model.shape_basis[:, idx], axes=(0, 0))
    base += np.tensordot(delta, model.expression_basis[:, idx], axes=(0, 0))
    w = model.skin_weights[idx]
    rots = _pose_rotations(model, theta)
    k1 = len(rots)

    # pre-global blended position, needed for the global-rotation derivative
    blended = w[:, 0:1] * base
    for j in range(1, k1):
        p = model.joint_pivots[j]
        blended += w[:, j : j + 1] * ((base - p) @ rots[j].T + p)

    Rg = rots[0]
    pose_mat = np.einsum("k,ab->kab", w[:, 0], Rg)
    for j in range(1, k1):
        pose_mat += np.einsum("k,ab->kab", w[:, j], Rg @ rots[j])

    d_theta = np.zeros((len(idx), 3, 3 * k1))
    dRg = rodrigues_jacobian(theta[0:3])
    for c in range(3):
        d_theta[:, :, c] = blended @ dRg[c].T
    for j in range(1, k1):
        dRj = rodrigues_jacobian(theta[3 * j : 3 * j + 3])
        rel = base - model.joint_pivots[j]
        for c in range(3):
            d_theta[:, :, 3 * j + c] = w[:, j : j + 1] * (rel @ (Rg @ dRj[c]).T)
    return ModelJacobian(model, idx, pose_mat, d_theta)


# ---------------------------------------------------------------------------
# synthetic model generation

_ICOSPHERE_COUNTS = {12: 0, 42: 1, 162: 2, 642: 3, 2562: 4, 10242: 5}

DEFAULT_N = 2562

# landmark ids "1".."46"; id "1" is the forehead point used by the
# definite-region machinery, the rest sweep brows, eyes, nose, mouth, chin,
# cheeks, and jawline. The face points toward -z (the canonical camera side).
_NAMED_DIRECTIONS = [
    ("1", (0.0, 0.62, -0.72)),  # forehead
    ("2", (0.0, 0.30, -0.95)),  # glabella
    ("3", (0.0, 0.12, -1.0)),  # nasion
    ("4", (0.0, -0.12, -1.0)),  # nose tip
    ("5", (0.0, -0.30, -0.95)),  # subnasale
    ("6", (0.0, -0.52, -0.86)),  # upper lip
    ("7", (0.0, -0.66, -0.75)),  # lower lip
    ("8", (0.0, -0.84, -0.54)),  # chin
    ("9", (-0.30, 0.16, -0.92)),  # left eye inner
    ("10", (-0.52, 0.18, -0.80)),  # left eye outer
    ("11", (0.30, 0.16, -0.92)),  # right eye inner
    ("12", (0.52, 0.18, -0.80)),  # right eye outer
    ("13", (-0.38, -0.55, -0.70)),  # left mouth corner
    ("14", (0.38, -0.55, -0.70)),  # right mouth corner
    ("15", (-0.62, -0.18, -0.72)),  # left cheekbone
    ("16", (0.62, -0.18, -0.72)),  # right cheekbone
    ("17", (-0.72, -0.52, -0.42)),  # left jaw angle
    ("18", (0.72, -0.52, -0.42)),  # right jaw angle
]


def _fibonacci_front_directions(count, seed_offset=0.5):
    """Deterministic spread of unit directions over the frontal hemisphere."""
    out = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(count):
        z = 0.25 + 0.7 * (i + seed_offset) / count  # keep to the face side
        r = np.sqrt(max(0.0, 1 - z * z))
        ang = golden * i
        out.append((r * np.cos(ang), r * np.sin(ang), -z))
    return out


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere via midpoint subdivision; deterministic indexing."""
    phi = (1 + 5**0.5) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts = [tuple(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.array(verts[a]) + np.array(verts[b])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    return np.array(verts, dtype=np.float64), faces


def _head_template(n_vertices: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Head-like template from a subdivided icosahedron.

    Returns (vertices mm, triangles, unit sphere coords of each vertex).
    """
    if n_vertices not in _ICOSPHERE_COUNTS:
        raise ModelError(
            f"n_vertices must be one of {sorted(_ICOSPHERE_COUNTS)} "
            f"(subdivided icosahedron sizes), got {n_vertices}"
        )
    unit, tris = icosphere(_ICOSPHERE_COUNTS[n_vertices])
    head = unit * np.array([80.0, 105.0, 90.0])
    # nose ridge (face points toward -z) and a mild occipital bulge
    nose_dir = np.array([0.0, -0.12, -1.0])
    nose_dir /= np.linalg.norm(nose_dir)
    t = unit @ nose_dir
    head += unit * (13.0 * np.exp(-((1.0 - t) / 0.05) ** 2))[:, None]
    back_dir = np.array([0.0, -0.12, 1.0])
    back_dir /= np.linalg.norm(back_dir)
    tb = unit @ back_dir
    head += unit * (7.0 * np.exp(-((1.0 - tb) / 0.35) ** 2))[:, None]
    head -= 0.5 * (head.max(axis=0) + head.min(axis=0))
    return head, tris, unit


def _rigid_modes(vertices: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the six rigid displacement fields, (3N, 6)."""
    n = len(vertices)
    modes = np.zeros((n, 3, 6))
    for k in range(3):
        modes[:, k, k] = 1.0  # translations
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        modes[:, :, 3 + k] = np.cross(e, vertices)  # infinitesimal rotations
    flat = modes.reshape(3 * n, 6)
    q, _ = np.linalg.qr(flat)
    return q


def _smooth_random_fields(rng, unit: np.ndarray, count: int) -> np.ndarray:
    """(count, N, 3) low-frequency random displacement fields on the sphere."""
    feats = [np.ones(len(unit))]
    polys = [np.ones(len(unit))]
    # restricted to the sphere, monomials up to degree 8 span the smooth
    # low-order function space (dimension 81), comfortably above the 186
    # field directions needed after the rigid modes
    for _ in range(8):
        polys = [p * unit[:, ax] for p in polys for ax in range(3)]
        feats.extend(polys)
    feats = np.unique(np.round(np.stack(feats), 15), axis=0)
    # monomials are nearly collinear on the sphere; orthonormalize them so
    # random combinations give a numerically full-rank smooth family
    q, r = np.linalg.qr(feats.T)
    keep = np.abs(np.diag(r)) > 1e-9 * np.abs(r[0, 0])
    basis = q[:, keep]
    coeff = rng.normal(size=(count, 3, basis.shape[1]))
    return np.einsum("kcf,nf->knc", coeff, basis)


def default_energy_profile(count: int = N_SHAPE) -> np.ndarray:
    """Per-mode displacement scale in mm of per-vertex RMS."""
    return 3.0 * 0.95 ** np.arange(count)


def synthesize_model(
    seed: int,
    n_vertices: int = DEFAULT_N,
    basis_energy_profile=None,
    n_shape: int = N_SHAPE,
    n_expr: int = N_EXPR,
) -> FaceModel:
    """Deterministic pseudo-random desk-scale head model.

    The same seed always produces a bit-identical model. Shape and
    expression fields are smooth low-frequency random fields, jointly
    orthonormalized and then scaled by the energy profile (expression
    fields at half the shape energy).
    """
    if basis_energy_profile is None:
        energy = default_energy_profile(n_shape)
    else:
        energy = np.asarray(basis_energy_profile, dtype=np.float64).reshape(-1)
        if energy.shape[0] != n_shape:
            raise ModelError(f"energy profile needs {n_shape} entries, got {energy.shape[0]}")
        if energy.min() < 0:
            raise ModelError("basis energies must be non-negative")
        if np.any(np.diff(energy) > 1e-12):
            raise ModelError("basis energies must be non-increasing")

    head, tris, unit = _head_template(n_vertices)
    rng = np.random.default_rng(seed)
    raw = _smooth_random_fields(rng, unit, n_shape + n_expr)
    # displacement fields carry shape only, and none of it in the
    # constant-tissue-depth (definite) regions: taper every field to zero
    # there, then remove remaining rigid content, as bases built from
    # aligned scans would have
    taper = _definite_taper(head)
    raw = raw * taper[None, :, None]
    flat = raw.reshape(n_shape + n_expr, -1).T  # (3N, count)
    rigid_raw = _rigid_modes(head) * np.repeat(taper, 3)[:, None]
    rq, rs = np.linalg.qr(rigid_raw)
    rigid = rq[:, np.abs(np.diag(rs)) > 1e-9]
    flat -= rigid @ (rigid.T @ flat)
    q, _ = np.linalg.qr(flat)
    fields = q.T.reshape(n_shape + n_expr, len(head), 3)
    # unit-norm fields scaled so a unit coefficient moves vertices by
    # energy[k] mm in per-vertex RMS
    scale = np.sqrt(len(head))
    shape_basis = fields[:n_shape] * (scale * energy)[:, None, None]
    expr_energy = 0.5 * energy[: min(n_expr, len(energy))]
    if n_expr > len(energy):
        expr_energy = np.concatenate([expr_energy, np.full(n_expr - len(energy), expr_energy[-1])])
    expression_basis = fields[n_shape:] * (scale * expr_energy)[:, None, None]

    pivots = np.array(
        [
            [0.0, 0.0, 0.0],  # global
            [0.0, -47.0, 28.0],  # jaw
            [0.0, -85.0, -10.0],  # neck
            [-26.0, 20.0, 60.0],  # left eye
            [26.0, 20.0, 60.0],  # right eye
        ]
    )
    centers = np.array(
        [[0.0, -75.0, 45.0], [0.0, -100.0, -10.0], [-26.0, 20.0, 62.0], [26.0, 20.0, 62.0]]
    )
    sigmas = np.array([28.0, 34.0, 14.0, 14.0])
    raw_w = np.stack(
        [
            0.8 * np.exp(-np.sum((head - c) ** 2, axis=1) / (2 * s * s))
            for c, s in zip(centers, sigmas)
        ],
        axis=1,
    )
    total = raw_w.sum(axis=1)
    over = total > 0.95
    raw_w[over] *= (0.95 / total[over])[:, None]
    weights = np.concatenate([(1.0 - raw_w.sum(axis=1))[:, None], raw_w], axis=1)

    anthro = _build_anthropometric_map(unit)
    return FaceModel(
        mean_shape=Mesh(head, tris),
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        joint_pivots=pivots,
        skin_weights=weights,
        anthropometric_map=anthro,
    )


def _build_anthropometric_map(unit: np.ndarray) -> dict:
    dirs = list(_NAMED_DIRECTIONS)
    fill = _fibonacci_front_directions(46 - len(dirs))
    for i, d in enumerate(fill, start=len(dirs) + 1):
        dirs.append((str(i), d))
    used = set()
    out = {}
    for lid, d in dirs:
        d = np.asarray(d, dtype=np.float64)
        d /= np.linalg.norm(d)
        order = np.argsort(-(unit @ d))
        for vi in order:
            if int(vi) not in used:
                used.add(int(vi))
                out[lid] = int(vi)
                break
    return out


SEGMENT_SEEDS = {
    "forehead": (0.0, 0.60, -0.62),
    "eye_l": (-0.38, 0.17, -0.86),
    "eye_r": (0.38, 0.17, -0.86),
    "nose": (0.0, -0.10, -1.0),
    "cheek_l": (-0.66, -0.28, -0.62),
    "cheek_r": (0.66, -0.28, -0.62),
    "mouth": (0.0, -0.55, -0.80),
    "chin": (0.0, -0.86, -0.46),
    "jaw_l": (-0.60, -0.55, -0.30),
    "jaw_r": (0.60, -0.55, -0.30),
    "side_l": (-0.95, 0.05, 0.1),
    "side_r": (0.95, 0.05, 0.1),
    "backhead": (0.0, 0.10, 0.99),
    "crown": (0.0, 0.99, 0.12),
}

DEFINITE_REGIONS = ("forehead", "backhead", "crown")


def _region_seed_dots(vertices: np.ndarray):
    unit = vertices / np.linalg.norm(vertices, axis=1)[:, None]
    names = list(SEGMENT_SEEDS)
    seeds = np.array([SEGMENT_SEEDS[n] for n in names], dtype=np.float64)
    seeds /= np.linalg.norm(seeds, axis=1)[:, None]
    return names, unit @ seeds.T


def _labels_from_vertices(vertices: np.ndarray) -> np.ndarray:
    names, dots = _region_seed_dots(vertices)
    best = np.argmax(dots, axis=1)
    return np.array([names[i] for i in best], dtype=object)


def _definite_taper(vertices: np.ndarray) -> np.ndarray:
    """Smooth per-vertex factor: exactly zero on (and just outside) the
    definite regions, rising to one away from them."""
    names, dots = _region_seed_dots(vertices)
    definite = np.array([n in DEFINITE_REGIONS for n in names])
    margin = dots[:, definite].max(axis=1) - dots[:, ~definite].max(axis=1)
    out = np.zeros(len(vertices))
    away = margin < -0.03
    out[away] = 1.0 - np.exp(-(((margin[away] + 0.03) / 0.12) ** 2))
    return out


def synthesize_region_labels(model: FaceModel) -> np.ndarray:
    """Per-vertex region names on the template, assigned by nearest seed
    direction. Deterministic for a given topology."""
    return _labels_from_vertices(model.mean_shape.vertices)


# ---------------------------------------------------------------------------
# model container I/O

_MAGIC = b"CFM1"


def save_model(path, model: FaceModel) -> None:
    """Binary container: magic, version, counts, then float64 blocks."""
    n = model.n_vertices
    t = len(model.mean_shape.triangles)
    k1 = len(model.joint_pivots)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6I", 1, n, model.n_shape, model.n_expr, k1 - 1, t))
        fh.write(np.ascontiguousarray(model.mean_shape.vertices).tobytes())
        fh.write(np.ascontiguousarray(model.mean_shape.triangles, dtype=np.int64).tobytes())
        fh.write(np.ascontiguousarray(model.shape_basis).tobytes())
        fh.write(np.ascontiguousarray(model.expression_basis).tobytes())
        fh.write(np.ascontiguousarray(model.joint_pivots).tobytes())
        fh.write(np.ascontiguousarray(model.skin_weights).tobytes())


def load_model(path, anthropometric_map=None) -> FaceModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ModelError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        version, n, n_shape, n_expr, k, t = struct.unpack("<6I", fh.read(24))
        if version != 1:
            raise ModelError(f"{path}: unsupported container version {version}")

        def block(count, dtype=np.float64):
            arr = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
            if arr.size != count:
                raise ModelError(f"{path}: truncated container")
            return arr.copy()

        verts = block(n * 3).reshape(n, 3)
        tris = block(t * 3, np.int64).reshape(t, 3)
        shape = block(n_shape * n * 3).reshape(n_shape, n, 3)
        expr = block(n_expr * n * 3).reshape(n_expr, n, 3)
        pivots = block((k + 1) * 3).reshape(k + 1, 3)
        weights = block(n * (k + 1)).reshape(n, k + 1)
    return FaceModel(
        mean_shape=Mesh(verts, tris),
        shape_basis=shape,
        expression_basis=expr,
        joint_pivots=pivots,
        skin_weights=weights,
        anthropometric_map=anthropometric_map or {},
    )


def save_anthropometric_map(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for lid in sorted(mapping, key=lambda s: (len(s), s)):
            fh.write(f"{lid} {mapping[lid]}\n")


def load_anthropometric_map(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ModelError(f"{path}:{lineno}: expected 'landmark_id vertex_index'")
            out[parts[0]] = int(parts[1])
    return out


def save_region_labels(path, labels) -> None:
    with open(path, "w") as fh:
        for i, name in enumerate(labels):
            fh.write(f"{i} {name}\n")


def load_region_labels(path, n_vertices: int) -> np.ndarray:
    labels = np.empty(n_vertices, dtype=object)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ModelError(f"{path}:{lineno}: expected 'vertex_index region_id'")
            labels[int(parts[0])] = parts[1]
    if any(v is None for v in labels):
        raise ModelError(f"{path}: not every vertex is labeled")
    return labels
