"""Skull-face matching.

Anthropometric skull landmarks are pushed outward along their surface
normals by statistical tissue depths; a face matches where it passes close
to those extended points. The superimposition score is the matched fraction
S = M / (M + U), with a landmark counted as matched when its distance is
strictly below the per-landmark threshold.

Skull and face frames are registered first: either a caller-supplied rigid
transform or the closed-form least-squares rotation/translation over the
corresponding point pairs ("auto").
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SuperimposeError
from .facemodel import DEFINITE_REGIONS, FaceModel
from .geometry import Mesh, closest_points_on_mesh, offset_surface_project_many

DEFAULT_MATCH_THRESHOLD_MM = 2.5


@dataclass(frozen=True)
class TissueDepth:
    depth: float
    threshold: float = DEFAULT_MATCH_THRESHOLD_MM


@dataclass
class TissueDepthTable:
    entries: dict  # landmark id -> TissueDepth

    def __post_init__(self):
        clean = {}
        for lid, e in self.entries.items():
            if not isinstance(e, TissueDepth):
                e = TissueDepth(*e) if isinstance(e, (tuple, list)) else TissueDepth(e)
            if e.depth <= 0:
                raise SuperimposeError(f"tissue depth for {lid!r} must be positive, got {e.depth}")
            if e.threshold <= 0:
                raise SuperimposeError(
                    f"match threshold for {lid!r} must be positive, got {e.threshold}"
                )
            clean[str(lid)] = e
        self.entries = clean

    def ids(self):
        return list(self.entries)


def save_tissue_table(path, table: TissueDepthTable) -> None:
    with open(path, "w") as fh:
        fh.write("# id,depth_mm,eta_mm\n")
        for lid in sorted(table.entries, key=lambda s: (len(s), s)):
            e = table.entries[lid]
            fh.write(f"{lid},{e.depth:.6g},{e.threshold:.6g}\n")


def load_tissue_table(path) -> TissueDepthTable:
    """Comma-separated "id,depth_mm,eta_mm"; the threshold may be omitted and
    defaults to 2.5 mm."""
    entries = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (2, 3):
                raise SuperimposeError(
                    f"{path}:{lineno}: expected 'id,depth_mm[,eta_mm]', got {line!r}"
                )
            try:
                depth = float(parts[1])
                eta = float(parts[2]) if len(parts) == 3 else DEFAULT_MATCH_THRESHOLD_MM
            except ValueError as exc:
                raise SuperimposeError(f"{path}:{lineno}: bad number in {line!r}") from exc
            entries[parts[0]] = TissueDepth(depth, eta)
    return TissueDepthTable(entries)


@dataclass
class SkullAnnotation:
    """Skull mesh plus named anthropometric landmarks with outward normals."""

    skull: Mesh
    landmarks: dict  # id -> (position (3,), unit normal (3,))

    def __post_init__(self):
        clean = {}
        positions = []
        for lid, (pos, nrm) in self.landmarks.items():
            pos = np.asarray(pos, dtype=np.float64).reshape(3)
            nrm = np.asarray(nrm, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(nrm) - 1.0) > 1e-6:
                raise SuperimposeError(f"landmark {lid!r} normal is not unit length")
            clean[str(lid)] = (pos, nrm)
            positions.append(pos)
        if positions:
            near, _ = closest_points_on_mesh(self.skull, np.array(positions))
            off = np.linalg.norm(near - np.array(positions), axis=1)
            if off.max() > 1e-3:
                bad = list(clean)[int(np.argmax(off))]
                raise SuperimposeError(
                    f"landmark {bad!r} lies {off.max():.4g} mm off the skull surface"
                )
        self.landmarks = clean


def save_skull_landmarks(path, annotation: SkullAnnotation) -> None:
    with open(path, "w") as fh:
        for lid in sorted(annotation.landmarks, key=lambda s: (len(s), s)):
            p, n = annotation.landmarks[lid]
            fh.write(
                f"{lid} {p[0]:.12g} {p[1]:.12g} {p[2]:.12g} "
                f"{n[0]:.12g} {n[1]:.12g} {n[2]:.12g}\n"
            )


def load_skull_landmarks(path) -> dict:
    """Text lines "id x y z nx ny nz"."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise SuperimposeError(
                    f"{path}:{lineno}: expected 'id x y z nx ny nz', got {line!r}"
                )
            try:
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise SuperimposeError(f"{path}:{lineno}: bad number in {line!r}") from exc
            out[parts[0]] = (np.array(vals[:3]), np.array(vals[3:]))
    return out


# ---------------------------------------------------------------------------
# rigid registration


@dataclass
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def procrustes_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation mapping source onto target.

    Closed form via the cross-covariance SVD, determinant-corrected so the
    result is a proper rotation.
    """
    p = np.asarray(source, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise SuperimposeError("registration needs matching (n, 3) arrays with n >= 3")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, qc - rot @ pc)


# ---------------------------------------------------------------------------
# superimposition


def extend_landmarks(skull: SkullAnnotation, depths: TissueDepthTable) -> dict:
    """Extended point for every landmark in the depth table: position plus
    depth along the stored normal."""
    missing = [lid for lid in depths.entries if lid not in skull.landmarks]
    if missing:
        raise SuperimposeError(f"depth table ids missing from the skull annotation: {missing}")
    out = {}
    for lid, e in depths.entries.items():
        pos, nrm = skull.landmarks[lid]
        out[lid] = pos + e.depth * nrm
    return out


@dataclass
class LandmarkMatch:
    landmark_id: str
    extended: np.ndarray
    face_point: np.ndarray
    distance: float
    matched: bool


@dataclass
class SuperimpositionResult:
    matches: list
    matched_count: int
    unmatched_count: int
    score: float
    mean_distance: float
    alignment: RigidTransform

    @property
    def percent(self) -> str:
        return format_percentage(self.score)

    def report(self) -> dict:
        return {
            "score": self.score,
            "score_percent": self.percent,
            "matched": self.matched_count,
            "unmatched": self.unmatched_count,
            "mean_distance_mm": self.mean_distance,
            "landmarks": [
                {
                    "id": m.landmark_id,
                    "extended": m.extended.tolist(),
                    "face_point": m.face_point.tolist(),
                    "distance_mm": m.distance,
                    "matched": m.matched,
                }
                for m in self.matches
            ],
        }


def format_percentage(score: float) -> str:
    return f"{100.0 * score:.2f}%"


def superimpose(
    face: Mesh,
    model: FaceModel,
    skull: SkullAnnotation,
    depths: TissueDepthTable,
    alignment="auto",
) -> SuperimpositionResult:
    """Classify every extended landmark against the face and score the match.

    The face must share the model's topology so the anthropometric table
    gives the corresponding face vertices. ``alignment`` is "auto" (solve the
    rigid registration over the corresponding pairs), a RigidTransform, or
    None for identity.
    """
    if face.topology_id != model.topology_id:
        raise SuperimposeError(
            f"face topology {face.topology_id!r} does not match the model's "
            f"{model.topology_id!r}"
        )
    extended = extend_landmarks(skull, depths)
    ids = [lid for lid in depths.entries if lid in model.anthropometric_map]
    if not ids:
        raise SuperimposeError("no landmark ids shared between depth table and model")
    vids = model.landmark_vertex_indices(ids)
    face_pts = face.vertices[vids]
    targets = np.array([extended[lid] for lid in ids])

    if alignment == "auto":
        xform = procrustes_rigid(face_pts, targets)
    elif alignment is None:
        xform = RigidTransform.identity()
    elif isinstance(alignment, RigidTransform):
        xform = alignment
    else:
        raise SuperimposeError(f"alignment must be 'auto', None, or RigidTransform")
    moved = xform.apply(face_pts)

    matches = []
    m_count = 0
    dists = np.linalg.norm(moved - targets, axis=1)
    for lid, fp, tgt, d in zip(ids, moved, targets, dists):
        ok = bool(d < depths.entries[lid].threshold)
        m_count += ok
        matches.append(LandmarkMatch(lid, tgt, fp, float(d), ok))
    u_count = len(ids) - m_count
    return SuperimpositionResult(
        matches=matches,
        matched_count=m_count,
        unmatched_count=u_count,
        score=m_count / (m_count + u_count),
        mean_distance=float(dists.mean()),
        alignment=xform,
    )


def rank_candidates(
    skull: SkullAnnotation,
    depths: TissueDepthTable,
    model: FaceModel,
    candidates,
    alignment="auto",
    workers: int = 1,
) -> list:
    """Score every (id, mesh) candidate and order best first.

    Descending score; ties break on smaller mean landmark distance, then on
    candidate id. The merge is deterministic regardless of worker count.
    """
    candidates = list(candidates)
    if not candidates:
        raise SuperimposeError("candidate list is empty")
    for cid, mesh in candidates:
        if mesh.topology_id != model.topology_id:
            raise SuperimposeError(f"candidate {cid!r} does not share the model topology")

    def score(item):
        cid, mesh = item
        return cid, superimpose(mesh, model, skull, depths, alignment)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, candidates))
    else:
        scored = [score(c) for c in candidates]
    scored.sort(key=lambda it: (-it[1].score, it[1].mean_distance, str(it[0])))
    return scored


def definite_region_landmarks(
    skull: SkullAnnotation,
    depths: TissueDepthTable,
    face: Mesh,
    region_labels,
    definite_names=DEFINITE_REGIONS,
    forehead_landmark_id: str = "1",
) -> dict:
    """Constraint points for the constant-depth regions (forehead, back of
    the head): each definite-region face vertex projected onto the skull
    surface offset by that region's tissue depth.

    Returns vertex index -> target point. The offset uses the forehead
    landmark's tabulated depth.
    """
    if forehead_landmark_id not in depths.entries:
        raise SuperimposeError(
            f"depth table lacks the forehead landmark {forehead_landmark_id!r}"
        )
    labels = np.asarray(region_labels)
    if labels.dtype == bool:
        mask = labels
    else:
        mask = np.isin(labels, list(definite_names))
    if len(mask) != len(face.vertices):
        raise SuperimposeError("region labels must cover every face vertex")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise SuperimposeError("definite region is empty")
    d1 = depths.entries[forehead_landmark_id].depth
    projected = offset_surface_project_many(skull.skull, d1, face.vertices[idx])
    return {int(i): projected[k] for k, i in enumerate(idx)}
