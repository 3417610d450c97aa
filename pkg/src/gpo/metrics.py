"""Landmark-based evaluation: target registration error and AUC curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse import GlobalTransform
from .loss import interp_field


@dataclass
class LandmarkPairs:
    """Annotated landmark pairs at the original image resolutions.

    ``scale_fixed``/``scale_moving`` are original-to-working resolution
    ratios, so working coordinates are original / scale.
    """

    fixed: np.ndarray
    moving: np.ndarray
    scale_fixed: float = 1.0
    scale_moving: float = 1.0

    def __post_init__(self):
        self.fixed = np.atleast_2d(np.asarray(self.fixed, dtype=np.float64))
        self.moving = np.atleast_2d(np.asarray(self.moving, dtype=np.float64))
        if self.fixed.shape != self.moving.shape or self.fixed.shape[0] < 1:
            raise ValueError("landmark arrays must both be (N, 2) with N >= 1")
        if self.scale_fixed <= 0 or self.scale_moving <= 0:
            raise ValueError("resolution scales must be positive")

    def __len__(self) -> int:
        return self.fixed.shape[0]


@dataclass
class TREStats:
    distances: np.ndarray
    median: float
    mean: float
    max: float
    n_clamped: int = 0

    @classmethod
    def from_distances(cls, d: np.ndarray, n_clamped: int = 0) -> "TREStats":
        return cls(distances=d, median=float(np.median(d)), mean=float(d.mean()),
                   max=float(d.max()), n_clamped=n_clamped)


@dataclass
class AUCCurve:
    """Success rate per integer threshold 1..T_max plus AUC at chosen T."""

    success: np.ndarray          # success[e-1] = fraction of pairs with mean TRE <= e
    auc_at: dict


def map_fixed_to_moving(points: np.ndarray, transform: GlobalTransform,
                        field: np.ndarray, scale_fixed: float = 1.0,
                        scale_moving: float = 1.0):
    """Map original-resolution fixed-frame points through the registration.

    Returns ``(mapped_points, clamped_mask)``: the exact moving-frame
    coordinate each landmark is sampled from, and flags for queries that fell
    outside the working field (interpolation clamps to the border there).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64)) / scale_fixed
    h, w = field.shape[:2]
    clamped = ((pts[:, 0] < 0) | (pts[:, 0] > w - 1)
               | (pts[:, 1] < 0) | (pts[:, 1] > h - 1))
    u = interp_field(field, pts)
    mapped = transform.apply_points(pts + u) * scale_moving
    return mapped, clamped


def tre(landmarks: LandmarkPairs, transform: GlobalTransform,
        field: np.ndarray) -> TREStats:
    """Per-landmark L2 error, in original-resolution pixels."""
    mapped, clamped = map_fixed_to_moving(landmarks.fixed, transform, field,
                                          landmarks.scale_fixed,
                                          landmarks.scale_moving)
    d = np.sqrt(((mapped - landmarks.moving) ** 2).sum(axis=1))
    return TREStats.from_distances(d, n_clamped=int(clamped.sum()))


def auc(per_pair: list, thresholds=(15, 25, 50)) -> AUCCurve:
    """Mean success rate over integer thresholds 1..T.

    A pair counts as a success at threshold ``e`` when its MEAN landmark
    error is <= e; AUC@T averages the success rate over e = 1..T.
    """
    if not per_pair:
        raise ValueError("auc needs at least one pair")
    thresholds = [int(t) for t in thresholds]
    if any(t < 1 for t in thresholds):
        raise ValueError("thresholds must be positive integers")
    t_max = max(thresholds)
    means = np.array([s.mean for s in per_pair])
    es = np.arange(1, t_max + 1)
    success = (means[None, :] <= es[:, None]).mean(axis=1)
    auc_at = {t: float(success[:t].mean()) for t in thresholds}
    return AUCCurve(success=success, auc_at=auc_at)


def write_report(per_pair: list, curve: AUCCurve, out_dir) -> None:
    """Emit per-pair TRE and AUC text tables with stable formatting."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "tre_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("pair,n_landmarks,mean,median,max,n_clamped\n")
        for i, s in enumerate(per_pair):
            fh.write(f"{i},{len(s.distances)},{s.mean:.9g},{s.median:.9g},"
                     f"{s.max:.9g},{s.n_clamped}\n")
    with open(os.path.join(out_dir, "auc_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("threshold,auc\n")
        for t in sorted(curve.auc_at):
            fh.write(f"{t},{curve.auc_at[t]:.9g}\n")
    with open(os.path.join(out_dir, "success_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("threshold,success_rate\n")
        for e, s in enumerate(curve.success, start=1):
            fh.write(f"{e},{s:.9g}\n")


def read_auc_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "threshold,auc":
        raise ValueError(f"'{path}' is not an AUC report")
    out = {}
    for ln in lines[1:]:
        t, v = ln.split(",")
        out[int(t)] = float(v)
    return out


# ---------------------------------------------------------------------------
# Landmark file format: header `x_f,y_f,x_m,y_m`, original-resolution coords.

def read_landmarks(path, scale_fixed: float = 1.0,
                   scale_moving: float = 1.0) -> LandmarkPairs:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or [c.strip().lower() for c in lines[0].split(",")] != \
            ["x_f", "y_f", "x_m", "y_m"]:
        raise ValueError(f"landmark file '{path}' must start with header x_f,y_f,x_m,y_m")
    rows = np.asarray([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if rows.size == 0:
        raise ValueError(f"landmark file '{path}' holds no pairs")
    return LandmarkPairs(rows[:, 0:2], rows[:, 2:4], scale_fixed, scale_moving)


def write_landmarks(path, landmarks: LandmarkPairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x_f,y_f,x_m,y_m\n")
        for (xf, yf), (xm, ym) in zip(landmarks.fixed, landmarks.moving):
            fh.write(f"{xf:.9g},{yf:.9g},{xm:.9g},{ym:.9g}\n")
