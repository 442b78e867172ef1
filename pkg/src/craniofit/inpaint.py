"""Skull-guided face re-synthesis in a generator's latent space.

Unmatched face regions are removed from the normalized render, and a latent
vector is optimized so the generated face stays coherent with the kept
pixels (context loss), stays plausible under a discriminator (prior loss),
and passes through the extended skull landmarks (geometry loss):

    z_hat = argmin_z  L_c(z | y, B) + L_p(z) + L_g(z | constraints)

with L_c the importance-weighted L1 image difference on known pixels, L_p =
lambda_p * log(1 - D(G(z))), and L_g = lambda_2 * sum of Euclidean distances
between generated-face feature vertices and their constraint points.

Generator and discriminator are pluggable contracts; the reference pair is
an affine map into the head-model code space (so the encoder composition
Psi(G(z)) is available in closed form) and an image-moment discriminator
whose score is a logistic squashing of the refit code's squared Mahalanobis
distance under the training-code distribution.

Pixel gradients treat rasterization coverage and barycentric weights as
locally constant; gradients flow through vertex attributes only. Under the
canonical flat illumination this is exact wherever coverage is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InpaintError, NumericalError
from .facemodel import (
    FaceModel,
    GEOM_DIM,
    SemanticCodeVector,
    evaluate_jacobian,
    evaluate_positions,
    synthesize_region_labels,
)
from .render import (
    CameraIntrinsics,
    Illumination,
    RenderedImage,
    canonical_gamma,
    canonical_intrinsics,
    normalize_render,
    read_pgm,
    read_ppm,
    rodrigues,
    sh_basis_gradient,
    write_pgm,
    write_ppm,
)

DEFAULT_WINDOW = 7
DEFAULT_LAMBDA_P = 0.1
DEFAULT_LAMBDA_2 = 1.0
DEFAULT_LATENT_DIM = 32


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class Segmentation:
    """Per-vertex region names on the template topology plus the landmark
    ids associated with each region. Labels transfer unchanged to any mesh
    sharing the topology."""

    region_label: np.ndarray  # (N,) str
    region_landmarks: dict  # region -> list of landmark ids
    topology_id: str = ""

    def __post_init__(self):
        self.region_label = np.asarray(self.region_label, dtype=object)
        if any(v is None for v in self.region_label):
            raise InpaintError("every vertex must carry a region label")
        seen = {}
        for region, ids in self.region_landmarks.items():
            for lid in ids:
                if lid in seen:
                    raise InpaintError(
                        f"landmark {lid!r} appears in regions {seen[lid]!r} and {region!r}"
                    )
                seen[lid] = region

    @classmethod
    def from_model(cls, model: FaceModel, labels=None) -> "Segmentation":
        if labels is None:
            labels = synthesize_region_labels(model)
        labels = np.asarray(labels, dtype=object)
        region_landmarks: dict = {}
        for lid, vi in model.anthropometric_map.items():
            region_landmarks.setdefault(labels[vi], []).append(lid)
        for ids in region_landmarks.values():
            ids.sort(key=lambda s: (len(s), s))
        return cls(labels, region_landmarks, model.topology_id)

    def region_of_landmark(self, lid: str):
        for region, ids in self.region_landmarks.items():
            if lid in ids:
                return region
        return None


def select_unmatched_regions(seg: Segmentation, matches, policy: str = "any") -> set:
    """Region ids slated for removal based on per-landmark match flags.

    ``matches`` is the per-landmark list from a superimposition result.
    Policy "any" removes a region when at least one associated landmark is
    unmatched; "majority" when strictly more than half are.
    """
    if policy not in ("any", "majority"):
        raise InpaintError(f"unknown removal policy {policy!r}")
    by_region: dict = {}
    for m in matches:
        region = seg.region_of_landmark(m.landmark_id)
        if region is None:
            raise InpaintError(f"landmark {m.landmark_id!r} is not mapped to any region")
        tot, unm = by_region.get(region, (0, 0))
        by_region[region] = (tot + 1, unm + (0 if m.matched else 1))
    removed = set()
    for region, (tot, unm) in by_region.items():
        if policy == "any" and unm >= 1:
            removed.add(region)
        elif policy == "majority" and unm > tot / 2:
            removed.add(region)
    return removed


# ---------------------------------------------------------------------------
# masks and weights


@dataclass
class MaskImage:
    """Per-pixel known/missing flags: True means the pixel is known."""

    known: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.known)
        if arr.dtype != bool:
            uniq = np.unique(arr)
            if not np.isin(uniq, (0, 1)).all():
                raise InpaintError("mask must be binary")
            arr = arr.astype(bool)
        self.known = arr


def build_mask(
    model: FaceModel,
    code: SemanticCodeVector,
    removed_regions: set,
    seg: Segmentation,
    intrinsics: CameraIntrinsics | None = None,
) -> tuple[RenderedImage, MaskImage]:
    """Normalized render of the coded face plus the missing-pixel mask.

    A pixel is missing exactly when its covering triangle has all three
    vertices inside removed regions; background pixels count as known.
    """
    img = normalize_render(model, code, intrinsics)
    removed_v = np.array([lbl in removed_regions for lbl in seg.region_label])
    tri_removed = removed_v[model.mean_shape.triangles].all(axis=1)
    known = np.ones(img.coverage.shape, dtype=bool)
    covered = img.coverage >= 0
    known[covered] = ~tri_removed[img.coverage[covered]]
    return img, MaskImage(known)


def importance_weights(mask: MaskImage, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Per-pixel context weight: the fraction of missing pixels in the
    window around each known pixel (window excludes the pixel itself and is
    clipped at the borders); zero on missing pixels."""
    if window < 3 or window % 2 == 0:
        raise InpaintError(f"window must be odd and >= 3, got {window}")
    b = mask.known
    h, w = b.shape
    miss = (~b).astype(np.float64)
    r = window // 2
    # summed-area table for box sums of the missing indicator
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(miss, axis=0), axis=1)
    ys, xs = np.mgrid[0:h, 0:w]
    y0 = np.clip(ys - r, 0, h)
    y1 = np.clip(ys + r + 1, 0, h)
    x0 = np.clip(xs - r, 0, w)
    x1 = np.clip(xs + r + 1, 0, w)
    box = sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
    count = (y1 - y0) * (x1 - x0) - 1  # exclude the center pixel
    weights = (box - miss) / count
    weights[~b] = 0.0
    return weights


# ---------------------------------------------------------------------------
# contracts and the reference pair


class AffineCodeGenerator:
    """Reference generator: an affine map from latent space into the
    model's geometry code space, rendered under the canonical camera.

    The affine map is the principal decomposition of a training-code set,
    so z = 0 generates the training mean and unit steps in z move one
    standard deviation along each principal direction. The encoder
    composition is therefore available exactly: code(z) = b + A z.
    """

    def __init__(self, model: FaceModel, mean_code, directions, intrinsics=None):
        self.model = model
        self.mean_code = np.asarray(mean_code, dtype=np.float64).reshape(GEOM_DIM)
        self.directions = np.asarray(directions, dtype=np.float64)
        if self.directions.ndim != 2 or self.directions.shape[0] != GEOM_DIM:
            raise InpaintError("directions must be (195, d_z)")
        self.intrinsics = intrinsics or canonical_intrinsics(model)

    @property
    def latent_dim(self) -> int:
        return self.directions.shape[1]

    def code_readout(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Geometry code for a latent vector and its (constant) Jacobian."""
        z = np.asarray(z, dtype=np.float64).reshape(self.latent_dim)
        return self.mean_code + self.directions @ z, self.directions

    def generate(self, z) -> RenderedImage:
        g, _ = self.code_readout(z)
        code = SemanticCodeVector.zeros().with_geometry(g)
        return normalize_render(self.model, code, self.intrinsics)

    def image_vjp(self, z, grad_pixels: np.ndarray, image: RenderedImage | None = None) -> np.ndarray:
        """Pixel-space gradient pulled back to the latent vector.

        Coverage and barycentric weights are frozen at the forward pass;
        gradients flow through the shaded vertex colors. The canonical
        band-0 light makes colors normal-independent, so this path
        contracts to an exact zero there; the chain is still present so
        other illumination choices remain differentiable. Pass ``image`` to
        reuse an existing forward render.
        """
        g, A = self.code_readout(z)
        code = SemanticCodeVector.zeros().with_geometry(g)
        img = image if image is not None else self.generate(z)
        covered = img.coverage >= 0
        if not covered.any():
            return np.zeros(self.latent_dim)
        tris = self.model.mean_shape.triangles
        grad_colors = np.zeros((self.model.n_vertices, 3))
        lam = img.bary[covered]  # (p, 3)
        gp = np.asarray(grad_pixels, dtype=np.float64)[covered]  # (p, 3)
        tri_ids = img.coverage[covered]
        for k in range(3):
            np.add.at(grad_colors, tris[tri_ids, k], lam[:, k : k + 1] * gp)

        # colors = r * Gamma @ H(R^T n_world); chain back to positions
        illum = Illumination(canonical_gamma())
        positions = evaluate_positions(self.model, code.alpha, code.delta, code.theta)
        a = positions[tris[:, 0]]
        cross = np.cross(positions[tris[:, 1]] - a, positions[tris[:, 2]] - a)
        acc = np.zeros_like(positions)
        for k in range(3):
            np.add.at(acc, tris[:, k], cross)
        nn = np.linalg.norm(acc, axis=1)
        nn[nn == 0] = 1.0
        n_world = acc / nn[:, None]
        R = rodrigues(np.zeros(3))
        dh = sh_basis_gradient(n_world @ R)
        g_ncam = illum.reflectance * np.einsum(
            "kc,cb,kbn->kn", grad_colors, illum.per_channel, dh
        )
        if not g_ncam.any():  # band-0 light: the color path is exactly zero
            return np.zeros(self.latent_dim)
        g_nworld = g_ncam @ R.T
        g_acc = (g_nworld - np.einsum("kn,kn->k", g_nworld, n_world)[:, None] * n_world) / nn[:, None]
        grad_pos = np.zeros_like(positions)
        gface = g_acc[tris[:, 0]] + g_acc[tris[:, 1]] + g_acc[tris[:, 2]]
        np.add.at(grad_pos, tris[:, 0], np.cross(gface, positions[tris[:, 2]] - positions[tris[:, 1]]))
        np.add.at(grad_pos, tris[:, 1], np.cross(gface, positions[tris[:, 0]] - positions[tris[:, 2]]))
        np.add.at(grad_pos, tris[:, 2], np.cross(gface, positions[tris[:, 1]] - positions[tris[:, 0]]))
        jac = evaluate_jacobian(self.model, code.alpha, code.delta, code.theta)
        return jac.vjp_geometry(grad_pos) @ A


class MomentDiscriminator:
    """Reference discriminator over normalized renders.

    Low-order intensity moments of the image are linearly read out to a
    latent estimate; the score is sigmoid(-q) with q the squared Mahalanobis
    distance of the corresponding refit code under the training codes.
    Output is strictly inside (0, 1) and differentiable in the pixels.
    """

    _LOGIT_CLIP = 500.0

    def __init__(self, readout: np.ndarray):
        self.readout = np.asarray(readout, dtype=np.float64)  # (d_z, 7)

    @staticmethod
    def features(pixels: np.ndarray) -> np.ndarray:
        h, w = pixels.shape[:2]
        i = pixels.mean(axis=2)
        ys, xs = np.mgrid[0:h, 0:w]
        xn = 2.0 * (xs + 0.5) / w - 1.0
        yn = 2.0 * (ys + 0.5) / h - 1.0
        s0 = i.sum()
        denom = s0 + 1e-6
        return np.array(
            [
                s0 / (h * w),
                (i * xn).sum() / denom,
                (i * yn).sum() / denom,
                (i * xn * xn).sum() / denom,
                (i * yn * yn).sum() / denom,
                (i * xn * yn).sum() / denom,
            ]
        )

    def _latent(self, pixels) -> np.ndarray:
        f = np.concatenate([self.features(pixels), [1.0]])
        return self.readout @ f

    def score(self, pixels: np.ndarray) -> float:
        q = float(self._latent(pixels) @ self._latent(pixels))
        logit = np.clip(-q, -self._LOGIT_CLIP, self._LOGIT_CLIP)
        return float(1.0 / (1.0 + np.exp(-logit)))

    def gradient(self, pixels: np.ndarray) -> np.ndarray:
        """dD/dpixels, shape like the image."""
        h, w = pixels.shape[:2]
        i = pixels.mean(axis=2)
        ys, xs = np.mgrid[0:h, 0:w]
        xn = 2.0 * (xs + 0.5) / w - 1.0
        yn = 2.0 * (ys + 0.5) / h - 1.0
        s0 = i.sum()
        denom = s0 + 1e-6
        feats = self.features(pixels)
        zhat = self.readout @ np.concatenate([feats, [1.0]])
        q = float(zhat @ zhat)
        d = 1.0 / (1.0 + np.exp(-np.clip(-q, -self._LOGIT_CLIP, self._LOGIT_CLIP)))
        # dD/dq with the clip treated as inactive in its interior
        dDdq = -d * (1.0 - d) if abs(q) < self._LOGIT_CLIP else 0.0
        dq_df = 2.0 * (zhat @ self.readout[:, :6])  # (6,)
        # feature derivatives with respect to the intensity image
        basis = [np.ones_like(i) / (h * w), xn, yn, xn * xn, yn * yn, xn * yn]
        di = np.zeros_like(i)
        di += dq_df[0] * basis[0]
        for k in range(1, 6):
            di += dq_df[k] * (basis[k] / denom - feats[k] / denom)
        grad_i = dDdq * di
        return np.repeat(grad_i[:, :, None] / 3.0, 3, axis=2)


def reference_gan(
    model: FaceModel,
    training_codes,
    d_z: int = DEFAULT_LATENT_DIM,
    seed: int = 0,
    intrinsics: CameraIntrinsics | None = None,
) -> tuple[AffineCodeGenerator, MomentDiscriminator]:
    """Analytic generator/discriminator pair fitted to a training-code set.

    The generator is the principal affine map of the codes (top d_z
    directions, one latent standard deviation per unit); the discriminator
    reads image moments back to latent coordinates by least squares over
    the rendered training set.
    """
    codes = np.asarray(training_codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] not in (GEOM_DIM, 228):
        raise InpaintError("training codes must be (m, 195) or (m, 228)")
    if codes.shape[1] == 228:
        codes = codes[:, :GEOM_DIM]
    m = len(codes)
    if m < 20:
        raise InpaintError(f"need at least 20 training codes, got {m}")
    if not 1 <= d_z <= GEOM_DIM:
        raise InpaintError(f"d_z must be in [1, {GEOM_DIM}], got {d_z}")
    mean = codes.mean(axis=0)
    centered = codes - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = s / np.sqrt(m - 1)
    if len(scale) < d_z or scale[d_z - 1] <= 1e-9 * max(scale[0], 1e-30):
        raise InpaintError(
            f"training codes are rank deficient: rank < d_z = {d_z}"
        )
    # deterministic sign convention: largest-magnitude entry positive
    dirs = vt[:d_z].T * scale[:d_z]
    flips = np.sign(dirs[np.argmax(np.abs(dirs), axis=0), np.arange(d_z)])
    flips[flips == 0] = 1.0
    dirs = dirs * flips

    gen = AffineCodeGenerator(model, mean, dirs, intrinsics)
    rng = np.random.default_rng(seed)
    del rng  # reserved for future stochastic readouts; construction is exact
    feats = []
    targets = []
    w_latent = (centered @ vt[:d_z].T) / scale[:d_z]
    for j in range(m):
        img = normalize_render(
            model, SemanticCodeVector.zeros().with_geometry(codes[j]), gen.intrinsics
        )
        feats.append(np.concatenate([MomentDiscriminator.features(img.pixels), [1.0]]))
        targets.append(w_latent[j] * flips)
    feats = np.array(feats)
    targets = np.array(targets)
    readout, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    return gen, MomentDiscriminator(readout.T)


# ---------------------------------------------------------------------------
# losses


def context_loss(z, y_pixels: np.ndarray, mask: MaskImage, generator, window: int = DEFAULT_WINDOW) -> float:
    """Importance-weighted L1 difference on known pixels."""
    gen = generator.generate(z)
    if gen.pixels.shape != y_pixels.shape:
        raise InpaintError(
            f"generated image {gen.pixels.shape} does not match target {y_pixels.shape}"
        )
    weights = importance_weights(mask, window)
    return float((weights[:, :, None] * np.abs(gen.pixels - y_pixels)).sum())


def prior_loss(z, generator, discriminator, lambda_p: float = DEFAULT_LAMBDA_P) -> float:
    """Realism penalty: lambda_p * log(1 - D(G(z)))."""
    if lambda_p == 0.0:
        return 0.0
    gen = generator.generate(z)
    d = discriminator.score(gen.pixels)
    if not 0.0 < d < 1.0:
        raise ContractViolation(f"discriminator returned {d}, outside (0, 1)")
    return float(lambda_p * np.log1p(-d))


def geometry_loss(
    z,
    generator,
    model: FaceModel,
    constraints,
    lambda_2: float = DEFAULT_LAMBDA_2,
) -> float:
    """Summed distances from generated-face feature vertices to their
    constraint points (anthropometric and definite-region targets alike)."""
    if not constraints:
        raise InpaintError("constraint set is empty")
    g, _ = generator.code_readout(z)
    code = SemanticCodeVector.zeros().with_geometry(g)
    vids = np.array([c[0] for c in constraints], dtype=np.int64)
    if vids.min() < 0 or vids.max() >= model.n_vertices:
        bad = vids[(vids < 0) | (vids >= model.n_vertices)]
        raise InpaintError(f"constraint vertex ids out of range: {bad.tolist()}")
    targets = np.array([c[1] for c in constraints], dtype=np.float64)
    pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=vids)
    return float(lambda_2 * np.linalg.norm(pos - targets, axis=1).sum())


# ---------------------------------------------------------------------------
# the composed solve


@dataclass
class InpaintProblem:
    y: np.ndarray  # corrupted normalized image, (h, w, 3)
    mask: MaskImage
    constraints: list  # (vertex_index, target point) pairs; ids kept alongside
    constraint_ids: list = field(default_factory=list)
    lambda_p: float = DEFAULT_LAMBDA_P
    lambda_2: float = DEFAULT_LAMBDA_2
    window: int = DEFAULT_WINDOW
    seed: int = 0
    max_iters: int = 600
    tol: float = 1e-11
    init_step: float = 1.0  # the descent metric makes unit steps natural
    step_grow: float = 1.6
    step_shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 60

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.lambda_p < 0 or self.lambda_2 < 0:
            raise InpaintError("loss weights must be non-negative")
        if self.window < 3 or self.window % 2 == 0:
            raise InpaintError("window must be odd and >= 3")
        if self.y.shape[:2] != self.mask.known.shape:
            raise InpaintError("image and mask dimensions differ")


@dataclass
class SolveResult:
    z: np.ndarray
    image: RenderedImage
    refit_code: SemanticCodeVector
    trace: list  # rows (iter, total, l_c, l_p, l_g)
    final_context: float
    final_prior: float
    final_geometry: float
    iterations: int
    converged: bool

    @property
    def final_total(self) -> float:
        return self.final_context + self.final_prior + self.final_geometry


def solve(
    problem: InpaintProblem,
    generator,
    discriminator,
    model: FaceModel,
    encoder=None,
) -> SolveResult:
    """Descend the composed loss over the latent space from a seeded start.

    Gradient descent with Armijo backtracking on the total loss; the trace
    records every accepted iterate (the total never increases across trace
    rows). The refit code is the encoder composition at the solution, which
    the reference generator supplies in closed form.
    """
    d_z = generator.latent_dim
    rng = np.random.default_rng(problem.seed)
    z = rng.uniform(-1.0, 1.0, size=d_z)
    weights = importance_weights(problem.mask, problem.window)
    weights3 = weights[:, :, None]

    vids = np.array([c[0] for c in problem.constraints], dtype=np.int64)
    targets = np.array([c[1] for c in problem.constraints], dtype=np.float64)
    if len(vids) == 0:
        raise InpaintError("constraint set is empty")
    if vids.min() < 0 or vids.max() >= model.n_vertices:
        raise InpaintError("constraint vertex ids out of range")

    # fixed descent metric: the constraint Jacobians at the starting iterate
    # even out the latent directions' wildly different leverage on the
    # geometry term (steepest descent under a constant metric; the metric is
    # never re-linearized)
    g0, A0 = generator.code_readout(z)
    code0 = SemanticCodeVector.zeros().with_geometry(g0)
    jac0 = evaluate_jacobian(model, code0.alpha, code0.delta, code0.theta, idx=vids)
    m_k = np.einsum("kcg,gz->kcz", jac0.dense(), A0)
    normal = np.einsum("kcz,kcy->zy", m_k, m_k)
    ridge = 1e-8 * max(np.trace(normal) / max(len(normal), 1), 1e-12)
    metric_inv = np.linalg.inv(normal + ridge * np.eye(len(normal)))

    def evaluate_losses(zv):
        img = generator.generate(zv)
        diff = img.pixels - problem.y
        l_c = float((weights3 * np.abs(diff)).sum())
        d_val = discriminator.score(img.pixels)
        if not 0.0 < d_val < 1.0:
            raise ContractViolation(f"discriminator returned {d_val}, outside (0, 1)")
        l_p = float(problem.lambda_p * np.log1p(-d_val))
        g, _ = generator.code_readout(zv)
        code = SemanticCodeVector.zeros().with_geometry(g)
        pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=vids)
        l_g = float(problem.lambda_2 * np.linalg.norm(pos - targets, axis=1).sum())
        total = l_c + l_p + l_g
        if not np.isfinite(total):
            raise NumericalError("non-finite inpainting loss")
        return total, l_c, l_p, l_g, img, d_val

    def gradient(zv, img, d_val):
        g, A = generator.code_readout(zv)
        code = SemanticCodeVector.zeros().with_geometry(g)
        pos = evaluate_positions(model, code.alpha, code.delta, code.theta, idx=vids)
        resid = pos - targets
        dist = np.linalg.norm(resid, axis=1)
        units = np.zeros_like(resid)
        nz = dist > 0
        units[nz] = resid[nz] / dist[nz, None]
        jac = evaluate_jacobian(model, code.alpha, code.delta, code.theta, idx=vids)
        grad_z = problem.lambda_2 * (jac.vjp_geometry(units) @ A)

        grad_pixels = weights3 * np.sign(img.pixels - problem.y)
        if problem.lambda_p > 0:
            grad_pixels = grad_pixels + (
                -problem.lambda_p / (1.0 - d_val)
            ) * discriminator.gradient(img.pixels)
        grad_z = grad_z + generator.image_vjp(zv, grad_pixels, image=img)
        return grad_z

    total, l_c, l_p, l_g, img, d_val = evaluate_losses(z)
    trace = [(0, total, l_c, l_p, l_g)]
    # The context and prior terms are flat between rasterization coverage
    # events and jump across them. Two line-search details matter for that
    # landscape: a wall-heavy iteration must not poison later step sizes
    # (every iteration restarts from the grown last-accepted step, floored
    # at the configured initial step), and an accepted step is extended
    # while longer steps keep improving, which lets the descent jump clean
    # over a loss wall when enough geometry gain lies beyond it. Descent
    # stops when no tested step improves the total.
    step = problem.init_step
    converged = False
    it = 0
    for it in range(1, problem.max_iters + 1):
        grad = gradient(z, img, d_val)
        direction = metric_inv @ grad
        decrement = float(grad @ direction)
        if decrement <= 0.0:
            converged = True
            break
        accepted = False
        trial_step = step
        for _ in range(problem.max_backtracks):
            trial = z - trial_step * direction
            t_state = evaluate_losses(trial)
            if t_state[0] <= total - problem.armijo_c * trial_step * decrement:
                accepted = True
                break
            trial_step *= problem.step_shrink
        if not accepted:
            # sitting against a loss wall: look for a long step whose gain
            # beyond the wall pays for crossing it
            trial_step = step
            for _ in range(problem.max_backtracks):
                trial_step *= problem.step_grow
                trial = z - trial_step * direction
                t_state = evaluate_losses(trial)
                if t_state[0] <= total - problem.armijo_c * trial_step * decrement:
                    accepted = True
                    break
        if not accepted:
            converged = True
            break
        for _ in range(problem.max_backtracks):  # forward tracking
            longer = trial_step * problem.step_grow
            l_trial = z - longer * direction
            l_state = evaluate_losses(l_trial)
            if (
                l_state[0] <= total - problem.armijo_c * longer * decrement
                and l_state[0] < t_state[0]
            ):
                trial_step, trial, t_state = longer, l_trial, l_state
            else:
                break
        t_total, t_lc, t_lp, t_lg, t_img, t_d = t_state
        z, total, l_c, l_p, l_g, img, d_val = trial, t_total, t_lc, t_lp, t_lg, t_img, t_d
        trace.append((it, total, l_c, l_p, l_g))
        step = max(trial_step * problem.step_grow, problem.init_step)

    g, _ = generator.code_readout(z)
    refit = SemanticCodeVector.zeros().with_geometry(g)
    return SolveResult(z, img, refit, trace, l_c, l_p, l_g, it, converged)


# ---------------------------------------------------------------------------
# problem bundle on disk


def save_problem(directory, problem: InpaintProblem) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "y.ppm", problem.y)
    write_pgm(d / "mask.pgm", problem.mask.known)
    ids = problem.constraint_ids or [f"v{v}" for v, _ in problem.constraints]
    with open(d / "constraints.txt", "w") as fh:
        for cid, (_, p) in zip(ids, problem.constraints):
            fh.write(f"{cid} {p[0]:.12g} {p[1]:.12g} {p[2]:.12g}\n")
    with open(d / "settings.txt", "w") as fh:
        for key in ("lambda_p", "lambda_2", "window", "seed", "max_iters"):
            fh.write(f"{key}={getattr(problem, key)}\n")


def load_problem(directory, model: FaceModel) -> InpaintProblem:
    d = Path(directory)
    y = read_ppm(d / "y.ppm")
    raw, _ = read_pgm(d / "mask.pgm")
    mask = MaskImage(raw > 0)
    constraints = []
    ids = []
    with open(d / "constraints.txt") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise InpaintError(f"{d}/constraints.txt:{lineno}: expected 'id x y z'")
            cid = parts[0]
            point = np.array([float(v) for v in parts[1:]])
            if cid.startswith("v") and cid[1:].isdigit():
                vi = int(cid[1:])
            elif cid in model.anthropometric_map:
                vi = model.anthropometric_map[cid]
            else:
                raise InpaintError(
                    f"{d}/constraints.txt:{lineno}: id {cid!r} is neither a vertex "
                    "reference nor an anthropometric landmark"
                )
            constraints.append((vi, point))
            ids.append(cid)
    settings = {}
    with open(d / "settings.txt") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            settings[k.strip()] = v.strip()
    return InpaintProblem(
        y=y,
        mask=mask,
        constraints=constraints,
        constraint_ids=ids,
        lambda_p=float(settings.get("lambda_p", DEFAULT_LAMBDA_P)),
        lambda_2=float(settings.get("lambda_2", DEFAULT_LAMBDA_2)),
        window=int(settings.get("window", DEFAULT_WINDOW)),
        seed=int(settings.get("seed", 0)),
        max_iters=int(settings.get("max_iters", 600)),
    )


def save_loss_trace(path, trace) -> None:
    """Comma-separated "iter,total,Lc,Lp,Lg" rows for external plotting."""
    with open(path, "w") as fh:
        fh.write("iter,total,Lc,Lp,Lg\n")
        for row in trace:
            fh.write(f"{row[0]},{row[1]:.12g},{row[2]:.12g},{row[3]:.12g},{row[4]:.12g}\n")
