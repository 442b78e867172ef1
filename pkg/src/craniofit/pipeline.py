"""End-to-end orchestration and synthetic data generation.

The three pipeline stages (landmark-based reconstruction, skull-face
ranking, constrained re-synthesis) are wired here, together with the
synthetic ground-truth generator that stands in for CT-derived skull-face
pairs: a skull is built by pushing a known face inward along its vertex
normals by per-landmark tissue depths, so the generating face superimposes
at exactly 100%.

Synthetic datasets live entirely in the head model's canonical frame; their
manifests record that, and the re-synthesis stage then uses an identity
registration instead of estimating one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InpaintError, SuperimposeError
from .facemodel import (
    DEFINITE_REGIONS,
    FaceModel,
    GEOM_DIM,
    SemanticCodeVector,
    evaluate_jacobian,
    evaluate_mesh_from_code,
    evaluate_positions,
    load_anthropometric_map,
    load_model,
    load_region_labels,
    save_anthropometric_map,
    save_model,
    save_region_labels,
    synthesize_model,
    synthesize_region_labels,
)
from .fitting import (
    FitConfig,
    LandmarkSet,
    fit_multi,
    fit_single,
    project_landmarks,
)
from .geometry import Mesh, load_mesh, save_landmarks_2d, save_mesh, vertex_normals
from .inpaint import (
    InpaintProblem,
    MaskImage,
    Segmentation,
    build_mask,
    importance_weights,
    reference_gan,
    save_loss_trace,
    save_problem,
    select_unmatched_regions,
    solve,
)
from .render import backward, canonical_intrinsics, landmark_outputs, write_ppm, write_pgm
from .superimpose import (
    RigidTransform,
    SkullAnnotation,
    TissueDepth,
    TissueDepthTable,
    definite_region_landmarks,
    extend_landmarks,
    format_percentage,
    load_skull_landmarks,
    load_tissue_table,
    rank_candidates,
    save_skull_landmarks,
    save_tissue_table,
    superimpose,
)

LATENT_SHAPE_MODES = 20
LATENT_EXPR_MODES = 12
DEFAULT_D_Z = LATENT_SHAPE_MODES + LATENT_EXPR_MODES
INTERIOR_REGIONS = ("nose", "mouth", "eye_l", "eye_r")

LANDMARK_IDS = [str(i) for i in range(1, 47)]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    """Everything one skull-identification exercise needs, generated from a
    seed: the head model, a segmented template, a ground-truth face, the
    derived skull with annotations and a tissue-depth table, a candidate
    database, and the generator training codes."""

    seed: int
    model: FaceModel
    region_labels: np.ndarray
    segmentation: Segmentation
    tissue_table: TissueDepthTable
    skull: SkullAnnotation
    truth_code: SemanticCodeVector
    truth_mesh: Mesh
    candidates: list  # (id, SemanticCodeVector, Mesh), resynth demos first
    training_codes: np.ndarray  # (m, 195)
    latent_scales: np.ndarray = field(repr=False, default=None)

    def candidate_meshes(self):
        return [(cid, mesh) for cid, _, mesh in self.candidates]

    def candidate_code(self, cid: str) -> SemanticCodeVector:
        for c, code, _ in self.candidates:
            if c == cid:
                return code
        raise ConfigError(f"unknown candidate id {cid!r}")


def latent_code_embedding(n_shape: int = 90) -> tuple[np.ndarray, np.ndarray]:
    """Affine family used for synthetic identities: the leading shape and
    expression coefficients with decreasing per-mode scales. Returns the
    (195, d_z) embedding and the per-mode scales."""
    scales = np.concatenate(
        [0.5 * 0.96 ** np.arange(LATENT_SHAPE_MODES), 0.3 * 0.96 ** np.arange(LATENT_EXPR_MODES)]
    )
    emb = np.zeros((GEOM_DIM, DEFAULT_D_Z))
    emb[:LATENT_SHAPE_MODES, :LATENT_SHAPE_MODES] = np.diag(scales[:LATENT_SHAPE_MODES])
    emb[n_shape : n_shape + LATENT_EXPR_MODES, LATENT_SHAPE_MODES:] = np.diag(
        scales[LATENT_SHAPE_MODES:]
    )
    return emb, scales


def geometry_code_from_latent(w: np.ndarray) -> np.ndarray:
    emb, _ = latent_code_embedding()
    return emb @ np.asarray(w, dtype=np.float64)


def erode_definite_mask(labels: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Definite-region vertices whose whole one-ring is definite. The
    constant-depth assumption only holds away from the transition band, so
    constraint generation uses this eroded set."""
    definite = np.isin(labels, DEFINITE_REGIONS)
    boundary = np.zeros(len(labels), dtype=bool)
    tri_mixed = ~definite[triangles].all(axis=1)
    for k in range(3):
        np.add.at(boundary, triangles[tri_mixed, k], True)
    return definite & ~boundary


def build_skull_from_face(
    model: FaceModel,
    face: Mesh,
    labels: np.ndarray,
    depths: dict,
    forehead_landmark_id: str = "1",
) -> SkullAnnotation:
    """Skull derived from a face: every vertex moves inward along the face
    vertex normal by an interpolated tissue depth that is exact at the
    landmark vertices and constant across the definite regions."""
    normals = vertex_normals(face)
    ids = list(depths)
    lm_v = {i: model.anthropometric_map[i] for i in ids}
    lm_pos = np.array([face.vertices[lm_v[i]] for i in ids])
    lm_d = np.array([depths[i] for i in ids])
    dist = np.linalg.norm(face.vertices[:, None, :] - lm_pos[None], axis=2)
    weight = 1.0 / np.maximum(dist, 1e-9) ** 2
    dfield = (weight * lm_d).sum(axis=1) / weight.sum(axis=1)
    for i in ids:
        dfield[lm_v[i]] = depths[i]
    dfield[np.isin(labels, DEFINITE_REGIONS)] = depths[forehead_landmark_id]
    skull_mesh = Mesh(face.vertices - dfield[:, None] * normals, face.triangles)
    annotation = {i: (skull_mesh.vertices[lm_v[i]], normals[lm_v[i]]) for i in ids}
    return SkullAnnotation(skull_mesh, annotation)


def _sample_depths(rng, model: FaceModel, labels) -> dict:
    """Per-landmark depths; landmarks inside a definite region share the
    forehead depth so the constant-depth convention stays consistent."""
    depths = {i: float(rng.uniform(3.5, 8.0)) for i in LANDMARK_IDS}
    d1 = depths["1"]
    for i in LANDMARK_IDS:
        if labels[model.anthropometric_map[i]] in DEFINITE_REGIONS:
            depths[i] = d1
    return depths


def _demo_candidate_directions(model: FaceModel, labels, embedding) -> np.ndarray:
    """Latent directions that move interior-region landmarks while pinning
    outline-adjacent landmarks and the visual rim, found as generalized
    eigenvectors of the two motion quadratic forms."""
    lm_rows = [model.anthropometric_map[i] for i in LANDMARK_IDS]
    jac = evaluate_jacobian(
        model, np.zeros(model.n_shape), np.zeros(model.n_expr), np.zeros(15), idx=lm_rows
    ).dense()
    motion = np.einsum("kcg,gz->kcz", jac, embedding)
    interior_rows = [
        k for k, i in enumerate(LANDMARK_IDS) if labels[lm_rows[k]] in INTERIOR_REGIONS
    ]
    boundary_rows = [
        k
        for k, i in enumerate(LANDMARK_IDS)
        if labels[lm_rows[k]] not in INTERIOR_REGIONS
        and labels[lm_rows[k]] not in DEFINITE_REGIONS
    ]
    normals = vertex_normals(model.mean_shape)
    rim = np.flatnonzero(np.abs(normals[:, 2]) < 0.25)
    jac_rim = evaluate_jacobian(
        model, np.zeros(model.n_shape), np.zeros(model.n_expr), np.zeros(15), idx=rim
    ).dense()
    rim_motion = np.einsum("kcg,gz->kcz", jac_rim, embedding)

    push = sum(motion[k].T @ motion[k] for k in interior_rows)
    pin = sum(motion[k].T @ motion[k] for k in boundary_rows)
    pin = pin + np.einsum("kcz,kcy->zy", rim_motion, rim_motion)
    pin = pin + 1e-6 * np.eye(pin.shape[0])
    chol = np.linalg.cholesky(pin)
    chol_inv = np.linalg.inv(chol)
    _, vecs = np.linalg.eigh(chol_inv @ push @ chol_inv.T)
    return chol_inv.T @ vecs, motion, interior_rows


def _construct_demo_candidates(
    model, labels, seg, skull, table, truth_w, embedding, count=2
) -> list:
    """Candidates whose mismatch against the skull is interior: unmatched
    landmarks fall only in removable interior regions, and the corrupted
    image's importance ring carries no silhouette difference against the
    generating face. Each proposal is verified and scaled down on failure."""
    directions, motion, interior_rows = _demo_candidate_directions(model, labels, embedding)
    truth_code = SemanticCodeVector.zeros().with_geometry(embedding @ truth_w)
    picked = []
    d_col = directions.shape[1] - 1
    while len(picked) < count and d_col >= 0:
        direction = directions[:, d_col]
        d_col -= 1
        for target_mm in (4.0, 3.2, 2.8, 2.4):
            mot = max(np.linalg.norm(motion[k] @ direction) for k in interior_rows)
            w = truth_w + direction * (target_mm / mot)
            code = SemanticCodeVector.zeros().with_geometry(embedding @ w)
            mesh = evaluate_mesh_from_code(model, code)
            result = superimpose(mesh, model, skull, table, alignment=None)
            removed = select_unmatched_regions(seg, result.matches)
            if not removed or not removed <= set(INTERIOR_REGIONS):
                continue
            y_img, mask = build_mask(model, code, removed, seg)
            truth_img, _ = build_mask(model, truth_code, removed, seg)
            ring = importance_weights(mask) > 0
            diff = np.abs(truth_img.pixels - y_img.pixels).max(axis=2) > 1e-9
            if (ring & diff).any():
                continue
            picked.append(code)
            break
    if len(picked) < count:
        raise InpaintError("could not construct enough interior-mismatch candidates")
    return picked


def generate_scene(
    seed: int,
    n_vertices: int = 2562,
    n_candidates: int = 12,
    n_train: int = 120,
    n_demo: int = 2,
    perturb_depths: bool = False,
) -> SyntheticScene:
    """Deterministic synthetic skull-identification scene.

    The candidate list starts with the interior-mismatch demo candidates
    (the intended re-synthesis starting faces) followed by random
    identities. ``perturb_depths`` inflates a few tabulated depths past
    their thresholds, producing a known nonzero unmatched count for the
    generating face itself.
    """
    rng = np.random.default_rng(seed)
    model = synthesize_model(seed=seed, n_vertices=n_vertices)
    labels = synthesize_region_labels(model)
    seg = Segmentation.from_model(model, labels)
    embedding, scales = latent_code_embedding(model.n_shape)

    training_w = rng.normal(size=(n_train, DEFAULT_D_Z))
    training_codes = training_w @ embedding.T

    truth_w = rng.normal(size=DEFAULT_D_Z)
    truth_code = SemanticCodeVector.zeros().with_geometry(embedding @ truth_w)
    truth_mesh = evaluate_mesh_from_code(model, truth_code)

    depths = _sample_depths(rng, model, labels)
    skull = build_skull_from_face(model, truth_mesh, labels, depths)
    if perturb_depths:
        which = sorted(rng.choice(LANDMARK_IDS, size=4, replace=False))
        for i in which:
            depths[i] = depths[i] + 3.0 * TissueDepth(depths[i]).threshold
    table = TissueDepthTable({i: TissueDepth(d) for i, d in depths.items()})

    candidates = []
    if n_demo:
        demo = _construct_demo_candidates(
            model, labels, seg, skull, table, truth_w, embedding, count=n_demo
        )
        for k, code in enumerate(demo):
            candidates.append((f"demo_{k:02d}", code, evaluate_mesh_from_code(model, code)))
    for k in range(n_candidates):
        w = rng.normal(size=DEFAULT_D_Z)
        code = SemanticCodeVector.zeros().with_geometry(embedding @ w)
        candidates.append((f"cand_{k:03d}", code, evaluate_mesh_from_code(model, code)))

    return SyntheticScene(
        seed=seed,
        model=model,
        region_labels=labels,
        segmentation=seg,
        tissue_table=table,
        skull=skull,
        truth_code=truth_code,
        truth_mesh=truth_mesh,
        candidates=candidates,
        training_codes=training_codes,
        latent_scales=scales,
    )


def synthetic_landmark_sets(
    scene: SyntheticScene, count: int, noise_px: float, seed: int
) -> list:
    """Landmark sets of one identity seen at different viewing distances,
    with optional detector-style pixel noise."""
    rng = np.random.default_rng(seed)
    intr = canonical_intrinsics(scene.model)
    out = []
    for _ in range(count):
        code = scene.truth_code.copy()
        code.vec[200] = rng.normal(scale=12.0)
        pts = project_landmarks(scene.model, code, LANDMARK_IDS, intr)
        if noise_px:
            pts = pts + rng.normal(scale=noise_px, size=pts.shape)
        out.append(LandmarkSet(LANDMARK_IDS, pts, source="synthetic-render"))
    return out


# ---------------------------------------------------------------------------
# dataset on disk


def write_scene(scene: SyntheticScene, out_dir) -> dict:
    """Write the full dataset; returns the manifest (also saved as JSON)."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "model.cfm", scene.model)
    save_anthropometric_map(d / "anthropometric.txt", scene.model.anthropometric_map)
    save_region_labels(d / "regions.txt", scene.region_labels)
    save_mesh(d / "skull.obj", scene.skull.skull)
    save_skull_landmarks(d / "skull_landmarks.txt", scene.skull)
    save_tissue_table(d / "tissue_depths.csv", scene.tissue_table)
    save_mesh(d / "truth.obj", scene.truth_mesh)
    np.savetxt(d / "truth.code.txt", scene.truth_code.vec)
    np.savetxt(d / "training_codes.txt", scene.training_codes)
    cdir = d / "candidates"
    cdir.mkdir(exist_ok=True)
    for cid, code, mesh in scene.candidates:
        save_mesh(cdir / f"{cid}.obj", mesh)
        np.savetxt(cdir / f"{cid}.code.txt", code.vec)
    ldir = d / "landmarks"
    ldir.mkdir(exist_ok=True)
    for j, lm in enumerate(synthetic_landmark_sets(scene, 3, 0.0, scene.seed + 1)):
        save_landmarks_2d(ldir / f"view_{j:02d}.txt", lm.ids, lm.points2d)

    config_text = "\n".join(
        [
            "model.path=model.cfm",
            "model.anthropometric=anthropometric.txt",
            "model.regions=regions.txt",
            "skull.mesh=skull.obj",
            "skull.landmarks=skull_landmarks.txt",
            "skull.depths=tissue_depths.csv",
            "candidates.dir=candidates",
            "superimposition.alignment=identity",
            "inpaint.lambda_p=0.1",
            "inpaint.lambda_2=1.0",
            "inpaint.window=7",
            "inpaint.seed=11",
            "inpaint.max_iters=500",
            "inpaint.candidate=auto",
            "output.dir=resynth_out",
            "",
        ]
    )
    (d / "resynth.config").write_text(config_text)

    manifest = {
        "seed": scene.seed,
        "n_vertices": scene.model.n_vertices,
        "n_candidates": len(scene.candidates),
        "n_training_codes": len(scene.training_codes),
        "frame": "model",
        "landmark_count": len(LANDMARK_IDS),
        "files": sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file()),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_scene_dir(path) -> dict:
    """Load the dataset files cmd_rank / cmd_resynth need."""
    d = Path(path)
    model = load_model(d / "model.cfm", load_anthropometric_map(d / "anthropometric.txt"))
    labels = load_region_labels(d / "regions.txt", model.n_vertices)
    skull_mesh = load_mesh(d / "skull.obj")
    skull = SkullAnnotation(skull_mesh, load_skull_landmarks(d / "skull_landmarks.txt"))
    table = load_tissue_table(d / "tissue_depths.csv")
    candidates = []
    cdir = d / "candidates"
    for obj in sorted(cdir.glob("*.obj")):
        cid = obj.stem
        mesh = load_mesh(obj, topology_id=model.topology_id)
        code_file = cdir / f"{cid}.code.txt"
        code = SemanticCodeVector(np.loadtxt(code_file)) if code_file.exists() else None
        candidates.append((cid, code, mesh))
    training = np.loadtxt(d / "training_codes.txt")
    return {
        "model": model,
        "labels": labels,
        "segmentation": Segmentation.from_model(model, labels),
        "skull": skull,
        "table": table,
        "candidates": candidates,
        "training_codes": training,
    }


# ---------------------------------------------------------------------------
# re-synthesis orchestration


@dataclass
class PipelineReport:
    stage_seconds: dict
    ranking: list  # (candidate id, score percent, mean distance)
    chosen: str
    initial_score: float
    final_score: float
    removed_regions: list
    final_losses: tuple | None  # (L_c, L_p, L_g) or None when nothing was removed
    iterations: int
    artifacts: dict

    def to_dict(self) -> dict:
        return {
            "stage_seconds": self.stage_seconds,
            "ranking": [
                {"id": cid, "score": format_percentage(s), "mean_distance_mm": m}
                for cid, s, m in self.ranking
            ],
            "chosen": self.chosen,
            "initial_score": format_percentage(self.initial_score),
            "final_score": format_percentage(self.final_score),
            "removed_regions": self.removed_regions,
            "final_losses": None
            if self.final_losses is None
            else {
                "context": self.final_losses[0],
                "prior": self.final_losses[1],
                "geometry": self.final_losses[2],
            },
            "iterations": self.iterations,
            "artifacts": self.artifacts,
        }

    def table(self) -> str:
        lines = [f"{'candidate':<12} {'score':>8} {'mean mm':>9}"]
        for cid, s, m in self.ranking:
            lines.append(f"{cid:<12} {format_percentage(s):>8} {m:9.3f}")
        lines.append(f"chosen: {self.chosen}")
        lines.append(
            f"superimposition: initial {format_percentage(self.initial_score)}"
            f" -> final {format_percentage(self.final_score)}"
        )
        if self.final_losses is not None:
            lc, lp, lg = self.final_losses
            lines.append(f"final losses Lc/Lp/Lg: {lc:.4g}/{lp:.4g}/{lg:.4g}")
        return "\n".join(lines)


def run_resynth(
    model: FaceModel,
    labels: np.ndarray,
    seg: Segmentation,
    skull: SkullAnnotation,
    table: TissueDepthTable,
    candidates: list,  # (id, code or None, mesh)
    training_codes: np.ndarray,
    out_dir,
    chosen: str = "auto",
    alignment: str = "identity",
    lambda_p: float = 0.1,
    lambda_2: float = 1.0,
    window: int = 7,
    seed: int = 11,
    max_iters: int = 500,
    removal_policy: str = "any",
) -> PipelineReport:
    """Rank, pick, remove unmatched regions, re-synthesize, re-superimpose."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    align_arg = "auto" if alignment == "auto" else None
    timings = {}

    t0 = time.perf_counter()
    ranked = rank_candidates(skull, table, model, [(c, m) for c, _, m in candidates], align_arg)
    timings["rank"] = time.perf_counter() - t0
    ranking_rows = [(cid, r.score, r.mean_distance) for cid, r in ranked]

    chosen_id = ranked[0][0] if chosen == "auto" else chosen
    code = next((code for cid, code, _ in candidates if cid == chosen_id), None)
    if code is None:
        raise ConfigError(f"candidate {chosen_id!r} has no code vector; cannot re-synthesize")
    cand_mesh = next(m for cid, _, m in candidates if cid == chosen_id)
    initial = next(r for cid, r in ranked if cid == chosen_id)

    t0 = time.perf_counter()
    removed = select_unmatched_regions(seg, initial.matches, removal_policy)
    timings["segment"] = time.perf_counter() - t0

    artifacts = {}
    if not removed:
        # nothing to revise: the candidate already matches everywhere
        final_mesh = cand_mesh
        final = initial
        losses = None
        iterations = 0
        timings["solve"] = 0.0
    else:
        t0 = time.perf_counter()
        y_img, mask = build_mask(model, code, removed, seg)
        inv = initial.alignment.inverse()
        extended = extend_landmarks(skull, table)
        constraints, cids = [], []
        for lid in table.ids():
            if lid not in model.anthropometric_map:
                continue
            constraints.append(
                (model.anthropometric_map[lid], inv.apply(extended[lid])[0])
            )
            cids.append(lid)
        eroded = erode_definite_mask(labels, model.mean_shape.triangles)
        for vi, p in definite_region_landmarks(skull, table, cand_mesh, eroded).items():
            constraints.append((vi, inv.apply(p)[0]))
            cids.append(f"v{vi}")
        problem = InpaintProblem(
            y=y_img.pixels,
            mask=mask,
            constraints=constraints,
            constraint_ids=cids,
            lambda_p=lambda_p,
            lambda_2=lambda_2,
            window=window,
            seed=seed,
            max_iters=max_iters,
        )
        save_problem(out / "problem", problem)
        timings["mask"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        generator, discriminator = reference_gan(model, training_codes, DEFAULT_D_Z, seed=0)
        timings["generator"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        result = solve(problem, generator, discriminator, model)
        timings["solve"] = time.perf_counter() - t0
        losses = (result.final_context, result.final_prior, result.final_geometry)
        iterations = result.iterations

        final_mesh = evaluate_mesh_from_code(model, result.refit_code)
        save_loss_trace(out / "loss_trace.csv", result.trace)
        write_ppm(out / "inpainted.ppm", result.image.pixels)
        np.savetxt(out / "refit_code.txt", result.refit_code.vec)
        artifacts["loss_trace"] = str(out / "loss_trace.csv")
        artifacts["inpainted_image"] = str(out / "inpainted.ppm")
        artifacts["problem_dir"] = str(out / "problem")

        t0 = time.perf_counter()
        final = superimpose(final_mesh, model, skull, table, align_arg)
        timings["re-superimpose"] = time.perf_counter() - t0

    save_mesh(out / "final_face.obj", final_mesh)
    artifacts["final_mesh"] = str(out / "final_face.obj")

    report = PipelineReport(
        stage_seconds=timings,
        ranking=ranking_rows,
        chosen=chosen_id,
        initial_score=initial.score,
        final_score=final.score,
        removed_regions=sorted(removed),
        final_losses=losses,
        iterations=iterations,
        artifacts=artifacts,
    )
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    """Key=value configuration with section prefixes, validated up front."""

    values: dict
    base_dir: Path

    REQUIRED_RESYNTH = (
        "model.path",
        "model.anthropometric",
        "model.regions",
        "skull.mesh",
        "skull.landmarks",
        "skull.depths",
        "candidates.dir",
    )

    @classmethod
    def parse(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values = {}
        for lineno, raw in enumerate(p.read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
        return cls(values, p.parent)

    def path(self, key: str) -> Path:
        return self.base_dir / self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def validate_resynth(self) -> None:
        missing = [k for k in self.REQUIRED_RESYNTH if k not in self.values]
        if missing:
            raise ConfigError(f"config is missing required keys: {missing}")
        for key in self.REQUIRED_RESYNTH:
            target = self.path(key)
            if not target.exists():
                raise ConfigError(f"configured path does not exist: {key}={target}")
        align = self.get("superimposition.alignment", "identity")
        if align not in ("identity", "auto"):
            raise ConfigError(f"superimposition.alignment must be identity or auto, got {align!r}")
        for key in ("inpaint.lambda_p", "inpaint.lambda_2"):
            if key in self.values and float(self.values[key]) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if "inpaint.window" in self.values:
            w = int(self.values["inpaint.window"])
            if w < 3 or w % 2 == 0:
                raise ConfigError("inpaint.window must be odd and >= 3")


# ---------------------------------------------------------------------------
# gradient-check harness


def run_gradcheck(seed: int, count: int, corrupt: bool = False) -> list:
    """Analytic gradients vs central differences over random configurations.

    Covers the per-vertex image-formation backward pass, the landmark-fit
    gradient, and the re-synthesis total-loss gradient. Rows are
    (name, index, max relative error, pass flag). ``corrupt`` injects a
    deliberate error into the first analytic gradient to confirm the
    harness actually fails when it should.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    model = synthesize_model(seed=seed, n_vertices=642)
    intr = canonical_intrinsics(model)
    vids = model.landmark_vertex_indices(LANDMARK_IDS)
    rows = []
    h = 1e-5
    tol = 1e-4

    def rel_err(analytic, fd):
        return abs(analytic - fd) / max(1.0, abs(analytic))

    for j in range(count):
        code = SemanticCodeVector.from_parts(
            alpha=rng.normal(scale=0.4, size=90),
            delta=rng.normal(scale=0.4, size=90),
            theta=rng.normal(scale=0.06, size=15),
            cam_rot=rng.normal(scale=0.04, size=3),
            cam_trans=rng.normal(scale=6.0, size=3),
            gamma=rng.normal(loc=0.4, scale=0.3, size=27),
        )
        gu = rng.normal(size=(46, 2))
        gc = rng.normal(size=(46, 3))
        grad = backward(model, code, vids, grad_u=gu, grad_c=gc, intrinsics=intr)
        if corrupt and j == 0:
            grad = grad.copy()
            grad[0] += 0.05

        def scalar(c):
            u, col = landmark_outputs(model, c, vids, intr)
            return float((u * gu).sum() + (col * gc).sum())

        worst = 0.0
        for k in range(0, 228, 3):
            cp, cm = code.copy(), code.copy()
            cp.vec[k] += h
            cm.vec[k] -= h
            worst = max(worst, rel_err(grad[k], (scalar(cp) - scalar(cm)) / (2 * h)))
        rows.append(("renderer-backward", j, worst, worst < tol))

    # landmark-fit gradient on a synthetic target
    from .fitting import _edge_loss_and_grad, regularizer
    from .geometry import delaunay
    from .render import camera_from_code, project

    cfg = FitConfig()
    for j in range(count):
        truth = SemanticCodeVector.from_parts(alpha=rng.normal(scale=0.4, size=90))
        target = project_landmarks(model, truth, LANDMARK_IDS, intr)
        graph = delaunay(target)
        code = SemanticCodeVector.from_parts(alpha=rng.normal(scale=0.3, size=90))

        def fit_loss(c):
            pos = evaluate_positions(model, c.alpha, c.delta, c.theta, idx=vids)
            u, _ = project(camera_from_code(c, intr), pos)
            e_m, _ = _edge_loss_and_grad(target, u, graph.edges)
            return cfg.w_m * e_m + cfg.w_r * regularizer(c)

        pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=vids)
        u, _ = project(camera_from_code(code, intr), pos)
        _, grad_u = _edge_loss_and_grad(target, u, graph.edges)
        grad = backward(model, code, vids, grad_u=cfg.w_m * grad_u, intrinsics=intr)
        grad[:GEOM_DIM] += 2 * cfg.w_r * code.geometry_part
        worst = 0.0
        for k in rng.choice(228, size=60, replace=False):
            cp, cm = code.copy(), code.copy()
            cp.vec[k] += h
            cm.vec[k] -= h
            worst = max(worst, rel_err(grad[k], (fit_loss(cp) - fit_loss(cm)) / (2 * h)))
        rows.append(("fitting-gradient", j, worst, worst < tol))

    # re-synthesis total-loss gradient over the latent space
    embedding, _ = latent_code_embedding(model.n_shape)
    train = rng.normal(size=(80, DEFAULT_D_Z)) @ embedding.T
    generator, discriminator = reference_gan(model, train, DEFAULT_D_Z, seed=0, intrinsics=intr)
    y = generator.generate(rng.normal(size=DEFAULT_D_Z)).pixels
    mask_arr = np.ones(y.shape[:2], dtype=bool)
    mask_arr[90:140, 100:150] = False
    anchor = [model.anthropometric_map[i] for i in ("2", "4", "8", "13", "14")]
    constraints = [
        (v, model.mean_shape.vertices[v] + rng.normal(scale=4.0, size=3)) for v in anchor
    ]
    for j in range(count):
        problem = InpaintProblem(
            y=y, mask=MaskImage(mask_arr), constraints=constraints, seed=seed + j
        )
        z0 = np.random.default_rng(problem.seed).uniform(-1, 1, DEFAULT_D_Z)
        weights3 = importance_weights(problem.mask, problem.window)[:, :, None]
        targets = np.array([c[1] for c in constraints])
        avids = np.array([c[0] for c in constraints])

        def total_loss(z):
            img = generator.generate(z)
            l_c = float((weights3 * np.abs(img.pixels - problem.y)).sum())
            d = discriminator.score(img.pixels)
            l_p = float(problem.lambda_p * np.log1p(-d))
            g, _ = generator.code_readout(z)
            c = SemanticCodeVector.zeros().with_geometry(g)
            pos = evaluate_positions(model, c.alpha, c.delta, c.theta, idx=avids)
            return l_c + l_p + problem.lambda_2 * float(
                np.linalg.norm(pos - targets, axis=1).sum()
            )

        img = generator.generate(z0)
        d_val = discriminator.score(img.pixels)
        g, A = generator.code_readout(z0)
        c = SemanticCodeVector.zeros().with_geometry(g)
        pos = evaluate_positions(model, c.alpha, c.delta, c.theta, idx=avids)
        resid = pos - targets
        dist = np.linalg.norm(resid, axis=1)
        units = resid / np.where(dist > 0, dist, 1.0)[:, None]
        jac = evaluate_jacobian(model, c.alpha, c.delta, c.theta, idx=avids)
        grad = problem.lambda_2 * (jac.vjp_geometry(units) @ A)
        gp = weights3 * np.sign(img.pixels - problem.y)
        gp = gp + (-problem.lambda_p / (1.0 - d_val)) * discriminator.gradient(img.pixels)
        grad = grad + generator.image_vjp(z0, gp, image=img)
        worst = 0.0
        for k in range(DEFAULT_D_Z):
            zp, zm = z0.copy(), z0.copy()
            zp[k] += h
            zm[k] -= h
            worst = max(worst, rel_err(grad[k], (total_loss(zp) - total_loss(zm)) / (2 * h)))
        rows.append(("inpaint-total-loss", j, worst, worst < tol))
    return rows
