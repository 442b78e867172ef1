"""Landmark-based reconstruction.

The loss compares edge lengths of the Delaunay graph built on the target
landmarks against the same edges measured on the model's projected
landmarks, plus a quadratic regularizer on the geometry coefficients:

    loss = w_m * sum_edges (|e| - |e'|)^2
         + w_r * (sum alpha^2 + sum delta^2 + sum theta^2)

Edge lengths make the loss blind to rigid in-plane motion of the projected
pattern, so synthetic targets are generated with zero image-plane camera
offsets and fits are initialized at the zero code.

Optimization is plain gradient descent with Armijo backtracking and an
adaptive step; the graph is triangulated once on the target landmarks and
frozen for the whole fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, NumericalError
from .facemodel import FaceModel, SemanticCodeVector, evaluate_positions, GEOM_DIM
from .geometry import LandmarkGraph, delaunay, load_landmarks_2d
from .render import CameraIntrinsics, backward, camera_from_code, canonical_intrinsics, project

LANDMARK_COUNT = 46


@dataclass
class LandmarkSet:
    """46 named 2D landmarks from one image (or one synthetic render)."""

    ids: list
    points2d: np.ndarray
    source: str = "detected-file"

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.points2d = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
        if len(self.ids) != LANDMARK_COUNT or len(self.points2d) != LANDMARK_COUNT:
            raise FitError(
                f"a landmark set holds exactly {LANDMARK_COUNT} points, got "
                f"{len(self.ids)} ids / {len(self.points2d)} points"
            )
        if len(set(self.ids)) != LANDMARK_COUNT:
            raise FitError("landmark ids must be unique")

    @classmethod
    def from_file(cls, path) -> "LandmarkSet":
        ids, pts = load_landmarks_2d(path)
        if len(ids) == 66:
            ids, pts = reduce_66_to_46(pts)
        return cls(ids, pts, source="detected-file")


# The detector-side 66-point layout is thinned to 46 by merging 20
# too-close pairs (midpoint): jaw contour thinning, two brow pairs, the
# eyelid pairs, and inner/outer lip pairs. Kept as configuration; see the
# README table.
REDUCTION_66_PAIRS = (
    [(2 * i, 2 * i + 1) for i in range(4)]  # jaw left
    + [(9 + 2 * i, 10 + 2 * i) for i in range(4)]  # jaw right
    + [(18, 19), (23, 24)]  # brows
    + [(37, 38), (40, 41), (43, 44), (46, 47)]  # upper/lower eyelids
    + [(48, 60), (50, 61), (52, 62), (54, 63), (56, 64), (58, 65)]  # lips
)


def reduce_66_to_46(points66) -> tuple[list, np.ndarray]:
    """Merge the configured too-close pairs of a 66-point detection."""
    pts = np.asarray(points66, dtype=np.float64).reshape(-1, 2)
    if len(pts) != 66:
        raise FitError(f"expected 66 points, got {len(pts)}")
    merged = {a: b for a, b in REDUCTION_66_PAIRS}
    dropped = {b for _, b in REDUCTION_66_PAIRS}
    out = []
    for i in range(66):
        if i in dropped:
            continue
        if i in merged:
            out.append(0.5 * (pts[i] + pts[merged[i]]))
        else:
            out.append(pts[i])
    out = np.array(out)
    if len(out) != LANDMARK_COUNT:
        raise FitError(f"reduction produced {len(out)} points")
    return [str(i + 1) for i in range(LANDMARK_COUNT)], out


def default_param_scales() -> np.ndarray:
    """Per-entry step scaling that evens out landmark sensitivity.

    The code mixes unitless coefficients, radians, and millimetres; their
    pixel sensitivities span four orders of magnitude, which cripples an
    unscaled first-order method. Descent steps use these fixed per-block
    scales (squared), which is steepest descent under a constant diagonal
    metric. Values are sensitivity ratios at the canonical viewing
    distance, rounded; only their order of magnitude matters.
    """
    s = np.ones(228)
    s[180:183] = 0.03  # global rotation, radians
    s[183:195] = 0.1  # joint rotations, radians
    s[195:198] = 0.005  # camera rotation, radians
    s[198:200] = 3.0  # lateral camera translation, mm
    s[200] = 10.0  # viewing-distance translation, mm
    return s


@dataclass
class FitConfig:
    w_m: float = 1.0
    w_r: float = 1e-3
    max_iters: int = 500
    tol: float = 1e-6  # relative loss-change convergence threshold
    init_step: float = 1e-4
    step_grow: float = 1.6
    step_shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 60

    def __post_init__(self):
        if self.w_m <= 0:
            raise FitError("w_m must be positive")
        if self.w_r < 0:
            raise FitError("w_r must be non-negative")


@dataclass
class FitResult:
    code: SemanticCodeVector
    final_loss: float
    e_m: float
    e_r: float
    iterations: int
    converged: bool
    loss_trace: list = field(default_factory=list, repr=False)

    def report(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "e_m": self.e_m,
            "e_r": self.e_r,
            "iterations": self.iterations,
            "converged": self.converged,
            "code": self.code.vec.tolist(),
            "loss_curve": self.loss_trace,
        }


# ---------------------------------------------------------------------------
# loss


def _aligned_positions(reference_ids, other: LandmarkSet) -> np.ndarray:
    index = {i: k for k, i in enumerate(other.ids)}
    missing = [i for i in reference_ids if i not in index]
    if missing:
        raise FitError(f"landmark ids missing from the second set: {missing}")
    extra = [i for i in other.ids if i not in set(reference_ids)]
    if extra:
        raise FitError(f"unexpected landmark ids in the second set: {extra}")
    return other.points2d[[index[i] for i in reference_ids]]


def edge_lengths(points: np.ndarray, edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64)
    return np.linalg.norm(points[e[:, 0]] - points[e[:, 1]], axis=1)


def regularizer(code: SemanticCodeVector) -> float:
    g = code.geometry_part
    return float(g @ g)


def geometric_loss(
    landmarks: LandmarkSet,
    projected: LandmarkSet,
    graph: LandmarkGraph,
    code: SemanticCodeVector,
    cfg: FitConfig,
) -> tuple[float, float, float]:
    """(total, e_m, e_r) for a target/projected landmark pair."""
    p = landmarks.points2d
    q = _aligned_positions(landmarks.ids, projected)
    le = edge_lengths(p, graph.edges)
    lq = edge_lengths(q, graph.edges)
    e_m = float(((le - lq) ** 2).sum())
    e_r = regularizer(code)
    return cfg.w_m * e_m + cfg.w_r * e_r, e_m, e_r


def _edge_loss_and_grad(target_pts, proj_pts, edges):
    """e_m and its gradient with respect to the projected positions."""
    e = np.asarray(edges, dtype=np.int64)
    dt = target_pts[e[:, 0]] - target_pts[e[:, 1]]
    dq = proj_pts[e[:, 0]] - proj_pts[e[:, 1]]
    lt = np.linalg.norm(dt, axis=1)
    lq = np.linalg.norm(dq, axis=1)
    e_m = float(((lt - lq) ** 2).sum())
    grad = np.zeros_like(proj_pts)
    safe = np.where(lq > 0, lq, 1.0)
    coeff = (2.0 * (lq - lt) / safe)[:, None] * dq
    np.add.at(grad, e[:, 0], coeff)
    np.add.at(grad, e[:, 1], -coeff)
    return e_m, grad


def project_landmarks(
    model: FaceModel,
    code: SemanticCodeVector,
    ids,
    intrinsics: CameraIntrinsics,
) -> np.ndarray:
    vids = model.landmark_vertex_indices(ids)
    pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=vids)
    u, _ = project(camera_from_code(code, intrinsics), pos)
    return u


# ---------------------------------------------------------------------------
# single-image fit


def fit_single(
    model: FaceModel,
    landmarks: LandmarkSet,
    cfg: FitConfig | None = None,
    init_code: SemanticCodeVector | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> FitResult:
    """Analysis-by-synthesis descent of the landmark loss over all 228 entries."""
    cfg = cfg or FitConfig()
    if intrinsics is None:
        intrinsics = canonical_intrinsics(model)
    code = (init_code or SemanticCodeVector.zeros()).copy()
    graph = delaunay(landmarks.points2d)
    vids = model.landmark_vertex_indices(landmarks.ids)

    def loss_and_parts(c):
        pos = evaluate_positions(model, c.alpha, c.delta, c.theta, idx=vids)
        u, _ = project(camera_from_code(c, intrinsics), pos)
        e_m, grad_u = _edge_loss_and_grad(landmarks.points2d, u, graph.edges)
        e_r = regularizer(c)
        total = cfg.w_m * e_m + cfg.w_r * e_r
        return total, e_m, e_r, grad_u

    def gradient(c, grad_u):
        g = backward(model, c, vids, grad_u=cfg.w_m * grad_u, intrinsics=intrinsics)
        g[:GEOM_DIM] += 2.0 * cfg.w_r * c.geometry_part
        return g

    total, e_m, e_r, grad_u = loss_and_parts(code)
    if not np.isfinite(total):
        raise NumericalError("non-finite loss at iteration 0")
    trace = [total]
    if total <= cfg.tol:
        return FitResult(code, total, e_m, e_r, 0, True, trace)

    metric = default_param_scales() ** 2
    step = cfg.init_step
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = gradient(code, grad_u)
        direction = metric * g
        decrement = float(g @ direction)
        if decrement == 0.0:
            converged = True
            break
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = SemanticCodeVector(code.vec - step * direction)
            t_total, t_em, t_er, t_gu = loss_and_parts(trial)
            if not np.isfinite(t_total):
                raise NumericalError(f"non-finite loss at iteration {it}")
            if t_total <= total - cfg.armijo_c * step * decrement:
                accepted = True
                break
            step *= cfg.step_shrink
        if not accepted:
            break
        rel_change = (total - t_total) / max(1.0, abs(total))
        code, total, e_m, e_r, grad_u = trial, t_total, t_em, t_er, t_gu
        trace.append(total)
        step *= cfg.step_grow
        if total <= cfg.tol or rel_change < cfg.tol:
            converged = True
            break
    return FitResult(code, total, e_m, e_r, it, converged, trace)


# ---------------------------------------------------------------------------
# multi-image fit with one shared geometry


@dataclass
class MultiFitResult:
    geometry: np.ndarray  # shared 195-entry geometry part
    rendering: list  # per-image 33-entry rendering blocks
    final_loss: float
    per_image: list  # stage-1 FitResults
    iterations: int
    converged: bool

    def code_for(self, j: int) -> SemanticCodeVector:
        v = np.concatenate([self.geometry, self.rendering[j]])
        return SemanticCodeVector(v)


def fit_multi(
    model: FaceModel,
    landmark_sets: list,
    cfg: FitConfig | None = None,
    init_code: SemanticCodeVector | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> MultiFitResult:
    """Two stages: independent fits, then joint refinement of one geometry.

    Stage 1 fits every image separately. Stage 2 starts from the average of
    the recovered geometries and descends the summed loss with one shared
    geometry block and per-image rendering blocks.
    """
    cfg = cfg or FitConfig()
    if len(landmark_sets) < 1:
        raise FitError("need at least one landmark set")
    if intrinsics is None:
        intrinsics = canonical_intrinsics(model)

    singles = [fit_single(model, lm, cfg, init_code, intrinsics) for lm in landmark_sets]
    if len(landmark_sets) == 1:
        r = singles[0]
        return MultiFitResult(
            r.code.geometry_part.copy(),
            [r.code.rendering_part.copy()],
            r.final_loss,
            singles,
            r.iterations,
            r.converged,
        )

    m = len(landmark_sets)
    graphs = [delaunay(lm.points2d) for lm in landmark_sets]
    vids = [model.landmark_vertex_indices(lm.ids) for lm in landmark_sets]
    geom = np.mean([r.code.geometry_part for r in singles], axis=0)
    renders = [r.code.rendering_part.copy() for r in singles]

    def park(x):
        return np.concatenate([x[0]] + list(x[1]))

    def unpack(vec):
        g = vec[:GEOM_DIM]
        rs = [vec[GEOM_DIM + 33 * j : GEOM_DIM + 33 * (j + 1)] for j in range(m)]
        return g, rs

    def total_loss(vec):
        g, rs = unpack(vec)
        tot = 0.0
        grads_u = []
        for j in range(m):
            c = SemanticCodeVector(np.concatenate([g, rs[j]]))
            pos = evaluate_positions(model, c.alpha, c.delta, c.theta, idx=vids[j])
            u, _ = project(camera_from_code(c, intrinsics), pos)
            e_m, gu = _edge_loss_and_grad(
                landmark_sets[j].points2d, u, graphs[j].edges
            )
            tot += cfg.w_m * e_m + cfg.w_r * regularizer(c)
            grads_u.append(gu)
        return tot, grads_u

    def total_gradient(vec, grads_u):
        g, rs = unpack(vec)
        out = np.zeros_like(vec)
        for j in range(m):
            c = SemanticCodeVector(np.concatenate([g, rs[j]]))
            gj = backward(model, c, vids[j], grad_u=cfg.w_m * grads_u[j], intrinsics=intrinsics)
            gj[:GEOM_DIM] += 2.0 * cfg.w_r * c.geometry_part
            out[:GEOM_DIM] += gj[:GEOM_DIM]
            out[GEOM_DIM + 33 * j : GEOM_DIM + 33 * (j + 1)] = gj[GEOM_DIM:]
        return out

    vec = park((geom, renders))
    total, grads_u = total_loss(vec)
    if not np.isfinite(total):
        raise NumericalError("non-finite joint loss at stage-2 start")
    scales = default_param_scales()
    metric = np.concatenate([scales[:GEOM_DIM]] + [scales[GEOM_DIM:]] * m) ** 2
    step = cfg.init_step
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad = total_gradient(vec, grads_u)
        direction = metric * grad
        decrement = float(grad @ direction)
        if decrement == 0.0:
            converged = True
            break
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = vec - step * direction
            t_total, t_gu = total_loss(trial)
            if not np.isfinite(t_total):
                raise NumericalError(f"non-finite joint loss at iteration {it}")
            if t_total <= total - cfg.armijo_c * step * decrement:
                accepted = True
                break
            step *= cfg.step_shrink
        if not accepted:
            break
        rel = (total - t_total) / max(1.0, abs(total))
        vec, total, grads_u = trial, t_total, t_gu
        step *= cfg.step_grow
        if total <= cfg.tol or rel < cfg.tol:
            converged = True
            break
    g, rs = unpack(vec)
    return MultiFitResult(g.copy(), [r.copy() for r in rs], total, singles, it, converged)


# ---------------------------------------------------------------------------
# the encoder seam: anything mapping landmarks to a code fits here, so a
# trained network can replace the optimization without touching callers


class FittingEncoder:
    """Analysis-by-synthesis stand-in for a learned landmark encoder."""

    def __init__(self, model: FaceModel, cfg: FitConfig | None = None, intrinsics=None):
        self.model = model
        self.cfg = cfg or FitConfig()
        self.intrinsics = intrinsics or canonical_intrinsics(model)

    def encode(self, landmarks: LandmarkSet) -> SemanticCodeVector:
        return fit_single(self.model, landmarks, self.cfg, intrinsics=self.intrinsics).code
