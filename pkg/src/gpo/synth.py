"""Deterministic synthetic vessel images with exact ground-truth deformations.

Pairs are generated so that the ground truth matches the engine's backward
warp convention exactly: the moving image is the fixed image resampled
through the inverse of the composed map ``x -> T(x + u(x))``, and landmark
mates go through the forward map. That makes TRE-zero achievable by a
perfect registration, down to the inversion residual.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from .coarse import GlobalTransform, MatchSet, read_matches, read_transform, \
    write_matches, write_transform
from .coarse import _dlt
from .errors import GenerationError
from .field import build_knn, blend, read_field, write_field
from .image import load_image, sample_bilinear_many, save_image_u8
from .loss import interp_field
from .metrics import LandmarkPairs, read_landmarks, write_landmarks
from .nodes import NodeSet, RadiusConfig, beta_for_radius

_INVERT_MAX_ITERS = 20
_INVERT_TOL = 0.05


@dataclass
class SynthConfig:
    seed: int = 0
    size: int = 256
    n_vessels: int = 5
    vessel_width_min: float = 0.8
    vessel_width_max: float = 2.0
    deform_nodes: int = 6
    deform_max_px: float = 12.0
    intensity_jitter: float = 0.02
    landmark_count: int = 10
    match_noise_px: float = 0.0
    transform_frac: float = 0.03     # corner perturbation as a size fraction; 0 -> identity

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("synthetic size must be >= 64")
        if self.deform_max_px < 0:
            raise ValueError("deform_max_px must be >= 0")
        if not (0 <= self.intensity_jitter <= 0.2):
            raise ValueError("intensity_jitter must lie in [0, 0.2]")
        if not (0 < self.vessel_width_min <= self.vessel_width_max):
            raise ValueError("vessel width range must satisfy 0 < min <= max")
        if self.landmark_count < 1:
            raise ValueError("landmark_count must be >= 1")


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    gt_field: np.ndarray
    landmarks: LandmarkPairs
    matches: MatchSet
    gt_transform: GlobalTransform


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Sum of three broad Gaussians, rescaled to span exactly [0.3, 0.7]."""
    size = cfg.size
    coords = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    raw = np.zeros((size, size))
    for _ in range(3):
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, 2)
        sigma = rng.uniform(0.8, 1.3) * size
        amp = rng.uniform(0.5, 1.0)
        raw += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    span = raw.max() - raw.min()
    return 0.3 + 0.4 * (raw - raw.min()) / max(span, 1e-12)


def _walk(rng: np.random.Generator, start, angle, n_steps, size, step=0.75):
    pts = []
    x, y = start
    for _ in range(n_steps):
        angle += rng.normal(0.0, 0.15)
        x += step * np.cos(angle)
        y += step * np.sin(angle)
        if not (2.0 <= x <= size - 3.0 and 2.0 <= y <= size - 3.0):
            break
        pts.append((x, y))
    return pts


def _vessel_centerlines(cfg: SynthConfig, rng: np.random.Generator):
    """Random-walk centerlines, each with up to two branchings."""
    size = cfg.size
    vessels = []
    main_steps = int(0.8 * size)
    for _ in range(cfg.n_vessels):
        start = rng.uniform(0.12 * size, 0.88 * size, 2)
        angle = rng.uniform(0.0, 2 * np.pi)
        width = rng.uniform(cfg.vessel_width_min, cfg.vessel_width_max)
        depth = rng.uniform(0.25, 0.4)
        main = _walk(rng, start, angle, main_steps, size)
        branches = [main]
        n_branch = rng.integers(0, 3)
        for _ in range(n_branch):
            if len(main) < 10:
                break
            at = int(rng.integers(len(main) // 4, len(main)))
            turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            branches.append(_walk(rng, main[min(at, len(main) - 1)],
                                  angle + turn, main_steps // 3, size))
        vessels.append((width, depth, [p for b in branches for p in b]))
    return vessels


def _render_vessels(cfg: SynthConfig, vessels) -> np.ndarray:
    """Max-composited Gaussian cross-section darkening map."""
    size = cfg.size
    depth_map = np.zeros((size, size))
    for width, depth, pts in vessels:
        radius = int(np.ceil(3.0 * width))
        for (x, y) in pts:
            x0 = max(0, int(np.floor(x)) - radius)
            x1 = min(size, int(np.floor(x)) + radius + 1)
            y0 = max(0, int(np.floor(y)) - radius)
            y1 = min(size, int(np.floor(y)) + radius + 1)
            px = np.arange(x0, x1, dtype=np.float64)
            py = np.arange(y0, y1, dtype=np.float64)
            d2 = (px[None, :] - x) ** 2 + (py[:, None] - y) ** 2
            stamp = depth * np.exp(-d2 / (2.0 * width * width))
            np.maximum(depth_map[y0:y1, x0:x1], stamp,
                       out=depth_map[y0:y1, x0:x1])
    return depth_map


def _gen_parts(cfg: SynthConfig):
    """Background, vessel darkening, centerline points and noise, per seed."""
    rng = np.random.default_rng(cfg.seed)
    bg = _background(cfg, rng)
    vessels = _vessel_centerlines(cfg, rng)
    depth_map = _render_vessels(cfg, vessels)
    if cfg.n_vessels > 0:
        noise = rng.uniform(-0.01, 0.01, (cfg.size, cfg.size))
    else:
        noise = np.zeros((cfg.size, cfg.size))
    centerlines = np.array([p for _, _, pts in vessels for p in pts]) \
        if vessels else np.zeros((0, 2))
    return bg, depth_map, centerlines, noise


def gen_vessel_image(cfg: SynthConfig) -> np.ndarray:
    """Smooth low-frequency background with dark curvilinear structures."""
    bg, depth_map, _, noise = _gen_parts(cfg)
    return np.clip(bg - depth_map + noise, 0.0, 1.0)


def _uniform_disc(rng: np.random.Generator, radius: float, n: int) -> np.ndarray:
    """Uniform draws from the square, rejected to the disc of given radius."""
    if radius == 0:
        return np.zeros((n, 2))
    out = np.empty((n, 2))
    for i in range(n):
        while True:
            v = rng.uniform(-radius, radius, 2)
            if v[0] ** 2 + v[1] ** 2 <= radius * radius:
                out[i] = v
                break
    return out


def gen_deformation(cfg: SynthConfig, size: int | None = None) -> np.ndarray:
    """Smooth random field blended from a handful of full-support primitives.

    Displacement vectors are bounded by ``deform_max_px`` in norm, so the
    blended field (a convex combination) is too.
    """
    size = size or cfg.size
    rng = np.random.default_rng(cfg.seed + 1)
    n = max(1, cfg.deform_nodes)
    g = rng.uniform(0.0, size, (n, 2))
    t = _uniform_disc(rng, cfg.deform_max_px, n)
    radii = rng.uniform(size / 8.0, size / 3.0, n)
    radius_cfg = RadiusConfig(size / 16.0, size / 2.0)
    beta = np.array([beta_for_radius(r, radius_cfg) for r in radii])
    nodes = NodeSet(g, t, beta, radius_cfg)
    index = build_knn(nodes, size, size, K=n)
    return blend(nodes, index)


def _gen_transform(cfg: SynthConfig) -> GlobalTransform:
    if cfg.transform_frac == 0:
        return GlobalTransform.identity()
    rng = np.random.default_rng(cfg.seed + 2)
    s = float(cfg.size)
    corners = np.array([[0.0, 0.0], [s - 1, 0.0], [0.0, s - 1], [s - 1, s - 1]])
    jitter = rng.uniform(-cfg.transform_frac * s, cfg.transform_frac * s, (4, 2))
    h = _dlt(corners, corners + jitter)
    if h is None:
        return GlobalTransform.identity()
    return GlobalTransform(h, kind="homography")


def _invert_composed_map(transform: GlobalTransform, field: np.ndarray):
    """Solve T(x + u(x)) = y for x on the full pixel grid, by fixed point."""
    h, w = field.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    grid = np.c_[xs.ravel(), ys.ravel()]
    base = transform.inverse().apply_points(grid)
    x = base.copy()
    for _ in range(_INVERT_MAX_ITERS):
        u = interp_field(field, x)
        x_new = base - u
        residual = np.abs(x_new - x).max()
        x = x_new
        if residual < _INVERT_TOL:
            return x
    raise GenerationError(
        f"deformation inversion did not converge (residual {residual:.3f} px); "
        "reduce deform_max_px")


def make_pair(cfg: SynthConfig) -> SynthPair:
    """Build a fixed/moving pair with exact landmarks, matches and field."""
    rng = np.random.default_rng(cfg.seed + 3)
    size = cfg.size
    bg, depth_map, centerlines, noise = _gen_parts(cfg)
    fixed = np.clip(bg - depth_map + noise, 0.0, 1.0)
    gt_field = gen_deformation(cfg, size)
    gt_transform = _gen_transform(cfg)

    inv = _invert_composed_map(gt_transform, gt_field)
    values, _, _ = sample_bilinear_many(fixed, inv[:, 0], inv[:, 1])
    moving = values.reshape(size, size)
    if cfg.intensity_jitter > 0:
        gain = 1.0 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        bias = rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        moving = np.clip(gain * moving + bias, 0.0, 1.0)

    # keep landmarks far enough inside that their moving-frame mates stay
    # in-domain under the deformation plus the corner-perturbation transform
    drift = cfg.deform_max_px + cfg.transform_frac * size + 0.02 * size
    margin = max(8.0, min(0.2 * size, drift))
    ok = ((centerlines[:, 0] > margin) & (centerlines[:, 0] < size - margin)
          & (centerlines[:, 1] > margin) & (centerlines[:, 1] < size - margin)) \
        if len(centerlines) else np.zeros(0, dtype=bool)
    candidates = centerlines[ok]
    if len(candidates) < cfg.landmark_count:
        raise GenerationError(
            f"only {len(candidates)} interior vessel points available for "
            f"{cfg.landmark_count} landmarks; increase n_vessels or size")
    p_f = _farthest_point_subset(candidates, cfg.landmark_count)
    p_m = gt_transform.apply_points(p_f + interp_field(gt_field, p_f))
    landmarks = LandmarkPairs(p_f, p_m, 1.0, 1.0)
    matches = MatchSet(p_f.copy(),
                       p_m + _uniform_disc(rng, cfg.match_noise_px, len(p_m)))
    return SynthPair(fixed=fixed, moving=moving, gt_field=gt_field,
                     landmarks=landmarks, matches=matches,
                     gt_transform=gt_transform)


def _farthest_point_subset(pts: np.ndarray, k: int) -> np.ndarray:
    """Greedy spread-out subset, seeded at the point nearest the centroid."""
    chosen = [int(np.argmin(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))]
    d_min = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d_min))
        chosen.append(nxt)
        d_min = np.minimum(d_min, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen].copy()


# ---------------------------------------------------------------------------
# Pair bundle directory layout.

def write_pair_bundle(out_dir, pair: SynthPair, cfg: SynthConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_image_u8(os.path.join(out_dir, "fixed.png"), pair.fixed)
    save_image_u8(os.path.join(out_dir, "moving.png"), pair.moving)
    write_field(os.path.join(out_dir, "gt_field.gpof"), pair.gt_field)
    write_landmarks(os.path.join(out_dir, "landmarks.csv"), pair.landmarks)
    write_matches(os.path.join(out_dir, "matches.csv"), pair.matches)
    write_transform(os.path.join(out_dir, "gt_transform.txt"), pair.gt_transform)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for key, value in sorted(asdict(cfg).items()):
            fh.write(f"synth.{key} = {value!r}\n")


def read_pair_bundle(bundle_dir) -> dict:
    """Load a bundle back as plain arrays/objects keyed by artifact name."""
    return {
        "fixed": load_image(os.path.join(bundle_dir, "fixed.png")),
        "moving": load_image(os.path.join(bundle_dir, "moving.png")),
        "gt_field": read_field(os.path.join(bundle_dir, "gt_field.gpof")),
        "landmarks": read_landmarks(os.path.join(bundle_dir, "landmarks.csv")),
        "matches": read_matches(os.path.join(bundle_dir, "matches.csv")),
        "gt_transform": read_transform(os.path.join(bundle_dir, "gt_transform.txt")),
    }
