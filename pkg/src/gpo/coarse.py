"""Global coarse alignment fitted from keypoint match files.

A :class:`GlobalTransform` maps fixed-frame coordinates into the moving
image, so backward warping needs no inversion: output pixel ``x`` samples the
moving image at ``T @ x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DegeneratePointError, NoConsensusError
from .image import sample_bilinear_many

_W_EPS = 1e-12


@dataclass
class MatchSet:
    """Corresponding point pairs (fixed frame, moving frame)."""

    fixed: np.ndarray            # (N, 2)
    moving: np.ndarray           # (N, 2)
    confidence: np.ndarray | None = None   # (N,) in [0,1], optional

    def __post_init__(self):
        self.fixed = np.atleast_2d(np.asarray(self.fixed, dtype=np.float64))
        self.moving = np.atleast_2d(np.asarray(self.moving, dtype=np.float64))
        if self.fixed.shape != self.moving.shape or (len(self) and self.fixed.shape[1] != 2):
            raise ValueError("match arrays must both have shape (N, 2)")
        if not (np.isfinite(self.fixed).all() and np.isfinite(self.moving).all()):
            raise ValueError("match coordinates must be finite")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != (len(self),):
                raise ValueError("confidence must have one value per pair")
            if len(self) and (self.confidence.min() < 0 or self.confidence.max() > 1):
                raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return 0 if self.fixed.size == 0 else self.fixed.shape[0]

    def select(self, idx) -> "MatchSet":
        conf = None if self.confidence is None else self.confidence[idx]
        return MatchSet(self.fixed[idx], self.moving[idx], conf)


@dataclass
class GlobalTransform:
    """3x3 homography (affine/identity as special cases), fixed -> moving."""

    H: np.ndarray
    kind: str = "homography"

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if self.kind not in ("identity", "affine", "homography"):
            raise ValueError(f"unknown transform kind '{self.kind}'")
        if self.kind == "homography":
            if abs(self.H[2, 2]) < _W_EPS:
                raise ValueError("homography has vanishing scale H[2,2]")
            self.H = self.H / self.H[2, 2]
        else:
            self.H[2] = (0.0, 0.0, 1.0)
        if abs(np.linalg.det(self.H[:2, :2])) < _W_EPS:
            raise ValueError("transform has singular upper-left 2x2 block")

    @classmethod
    def identity(cls) -> "GlobalTransform":
        return cls(np.eye(3), kind="identity")

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) points through H with homogeneous division."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        hom = self.H @ np.c_[pts, np.ones(len(pts))].T
        w = hom[2]
        if np.any(np.abs(w) < _W_EPS):
            raise DegeneratePointError("point maps to the plane at infinity")
        return (hom[:2] / w).T

    def inverse(self) -> "GlobalTransform":
        Hinv = np.linalg.inv(self.H)
        kind = "homography" if self.kind == "homography" else self.kind
        return GlobalTransform(Hinv, kind=kind)


@dataclass
class RansacConfig:
    iters: int = 2000
    inlier_thresh_px: float = 3.0
    min_inliers: int = 0      # 0 -> max(10, 30% of pairs)
    seed: int = 0

    def resolved_min_inliers(self, n_pairs: int) -> int:
        if self.min_inliers > 0:
            return self.min_inliers
        return max(10, int(np.ceil(0.3 * n_pairs)))


def fit_affine(matches: MatchSet) -> GlobalTransform:
    """Least-squares affine minimizing sum ||A p_f + b - p_m||^2."""
    n = len(matches)
    if n < 3:
        raise DegenerateInputError(f"affine fit needs >= 3 pairs, got {n}")
    design = np.c_[matches.fixed, np.ones(n)]
    if np.linalg.matrix_rank(design, tol=1e-9 * max(1.0, np.abs(design).max())) < 3:
        raise DegenerateInputError("affine fit is rank-deficient (collinear points)")
    sol, _, _, _ = np.linalg.lstsq(design, matches.moving, rcond=None)
    H = np.eye(3)
    H[:2, :2] = sol[:2].T
    H[:2, 2] = sol[2]
    return GlobalTransform(H, kind="affine")


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin and mean radius to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0.0, -s * c[0]],
                     [0.0, s, -s * c[1]],
                     [0.0, 0.0, 1.0]])


def _dlt(fixed: np.ndarray, moving: np.ndarray) -> np.ndarray | None:
    """Normalized DLT homography from >= 4 pairs; None if degenerate."""
    tf = _hartley_normalization(fixed)
    tm = _hartley_normalization(moving)
    fn = (tf @ np.c_[fixed, np.ones(len(fixed))].T).T[:, :2]
    mn = (tm @ np.c_[moving, np.ones(len(moving))].T).T[:, :2]

    n = len(fn)
    a = np.zeros((2 * n, 9))
    x, y = fn[:, 0], fn[:, 1]
    u, v = mn[:, 0], mn[:, 1]
    a[0::2] = np.c_[x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u]
    a[1::2] = np.c_[np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v]
    if np.linalg.matrix_rank(a) < 8:
        return None
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tm) @ hn @ tf
    if abs(h[2, 2]) < _W_EPS:
        return None
    return h / h[2, 2]


def _any3_collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    for i in range(4):
        tri = np.delete(pts, i, axis=0)
        ab = tri[1] - tri[0]
        ac = tri[2] - tri[0]
        if abs(ab[0] * ac[1] - ab[1] * ac[0]) <= tol:
            return True
    return False


def fit_homography(matches: MatchSet, cfg: RansacConfig | None = None) -> GlobalTransform:
    """RANSAC homography over 4-point DLT hypotheses, re-fit on the inlier set.

    Deterministic for a fixed config: hypothesis sample indices are drawn up
    front from the seeded generator and scanned in order; the model with the
    most inliers wins, ties broken by lower hypothesis index.
    """
    cfg = cfg or RansacConfig()
    n = len(matches)
    if n < 4:
        raise DegenerateInputError(f"homography fit needs >= 4 pairs, got {n}")
    min_inliers = cfg.resolved_min_inliers(n)

    fixed, moving = matches.fixed, matches.moving
    rng = np.random.default_rng(cfg.seed)
    thresh2 = cfg.inlier_thresh_px ** 2

    best_count = -1
    best_inliers = None
    for _ in range(cfg.iters):
        idx = rng.choice(n, size=4, replace=False)
        pf, pm = fixed[idx], moving[idx]
        if _any3_collinear(pf) or _any3_collinear(pm):
            continue
        h = _dlt(pf, pm)
        if h is None:
            continue
        proj = h @ np.c_[fixed, np.ones(n)].T
        w = proj[2]
        ok = np.abs(w) > _W_EPS
        err2 = np.full(n, np.inf)
        err2[ok] = ((proj[0, ok] / w[ok] - moving[ok, 0]) ** 2
                    + (proj[1, ok] / w[ok] - moving[ok, 1]) ** 2)
        inliers = err2 <= thresh2
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < max(min_inliers, 4):
        raise NoConsensusError(
            f"no homography reached {min_inliers} inliers over {cfg.iters} hypotheses")

    h = _dlt(fixed[best_inliers], moving[best_inliers])
    if h is None:
        raise DegenerateInputError("inlier set is degenerate for the final fit")
    return GlobalTransform(h, kind="homography")


def apply_global(img: np.ndarray, transform: GlobalTransform,
                 out_w: int, out_h: int) -> np.ndarray:
    """Backward-warp ``img`` by the global transform onto an out_w x out_h grid."""
    if abs(np.linalg.det(transform.H)) < _W_EPS:
        raise ValueError("global transform is singular")
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    pts = transform.apply_points(np.c_[xs.ravel(), ys.ravel()])
    values, _, _ = sample_bilinear_many(img, pts[:, 0], pts[:, 1])
    return values.reshape(out_h, out_w)


def to_coarse_frame(transform: GlobalTransform, pts: np.ndarray) -> np.ndarray:
    """Map moving-frame points back into the coarse/fixed frame (T^-1 @ p)."""
    return transform.inverse().apply_points(pts)


# ---------------------------------------------------------------------------
# Match file format: header line, then one `x_f,y_f,x_m,y_m[,confidence]` per row.

def read_matches(path) -> MatchSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"match file '{path}' is empty (header line required)")
    header = [c.strip().lower() for c in lines[0].split(",")]
    if header[:4] != ["x_f", "y_f", "x_m", "y_m"]:
        raise ValueError(f"match file '{path}' must start with header x_f,y_f,x_m,y_m")
    has_conf = len(header) > 4 and header[4] == "confidence"
    rows = []
    for ln in lines[1:]:
        parts = [float(p) for p in ln.split(",")]
        if len(parts) < 4:
            raise ValueError(f"malformed match row in '{path}': '{ln}'")
        rows.append(parts)
    if not rows:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)))
    arr = np.asarray(rows, dtype=np.float64)
    conf = arr[:, 4] if (has_conf and arr.shape[1] > 4) else None
    return MatchSet(arr[:, 0:2], arr[:, 2:4], conf)


def write_matches(path, matches: MatchSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if matches.confidence is not None:
            fh.write("x_f,y_f,x_m,y_m,confidence\n")
            for (xf, yf), (xm, ym), c in zip(matches.fixed, matches.moving,
                                             matches.confidence):
                fh.write(f"{xf:.9g},{yf:.9g},{xm:.9g},{ym:.9g},{c:.9g}\n")
        else:
            fh.write("x_f,y_f,x_m,y_m\n")
            for (xf, yf), (xm, ym) in zip(matches.fixed, matches.moving):
                fh.write(f"{xf:.9g},{yf:.9g},{xm:.9g},{ym:.9g}\n")


def read_transform(path) -> GlobalTransform:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) != 4:
        raise ValueError(f"transform file '{path}' must hold a kind line and 3 matrix rows")
    kind = lines[0]
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    return GlobalTransform(np.asarray(rows), kind=kind)


def write_transform(path, transform: GlobalTransform) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(transform.kind + "\n")
        for row in transform.H:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
