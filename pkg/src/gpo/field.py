"""Dense displacement fields from sparse nodes: KNN assignment and blending.

The field at a pixel is the softmax-Gaussian weighted average of the
displacements of its K nearest node centers. Neighbor selection is
accelerated by a uniform spatial hash grid but is exact: ids and order agree
with an exhaustive scan, ties broken by lower node id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._kernels import backward_kernel, blend_kernel, knn_query, warp_grad_kernel
from .errors import ConsistencyError
from .nodes import NodeSet

_GPOF_MAGIC = b"GPOF"
_GPOF_VERSION = 1


@dataclass
class NeighborIndex:
    """Per-pixel K nearest node ids (ascending distance, ties by lower id)."""

    ids: np.ndarray         # (H, W, k) int32
    d2: np.ndarray          # (H, W, k) squared distances
    k: int
    node_revision: int
    n_nodes: int

    @property
    def shape(self):
        return self.ids.shape[:2]


def build_knn(nodes: NodeSet, width: int, height: int, K: int) -> NeighborIndex:
    """Index the k = min(K, N) nearest nodes for every pixel center.

    Node centers are hashed into square bins sized for ~1 node per bin; each
    pixel expands rings of bins until the remaining rings are provably
    farther than its current kth neighbor (strictly, so ties are safe).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(nodes)
    k = min(K, n)
    pts = nodes.g

    ox = min(0.0, float(pts[:, 0].min()))
    oy = min(0.0, float(pts[:, 1].min()))
    ex = max(float(width - 1), float(pts[:, 0].max()))
    ey = max(float(height - 1), float(pts[:, 1].max()))
    # ~1 node per bin, but keep the grid bounded when nodes drift far out
    bin_size = max(4.0, float(np.sqrt(width * height / n)),
                   (ex - ox) / 512.0, (ey - oy) / 512.0)
    nbx = int(np.floor((ex - ox) / bin_size)) + 1
    nby = int(np.floor((ey - oy) / bin_size)) + 1

    node_bx = np.minimum(((pts[:, 0] - ox) / bin_size).astype(np.int64), nbx - 1)
    node_by = np.minimum(((pts[:, 1] - oy) / bin_size).astype(np.int64), nby - 1)
    node_bin = node_by * nbx + node_bx
    order = np.argsort(node_bin, kind="stable")      # keeps id order within bins
    starts = np.searchsorted(node_bin[order], np.arange(nbx * nby + 1))

    ids, d2 = knn_query(
        np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]),
        order.astype(np.int64), starts.astype(np.int64),
        ox, oy, bin_size, nbx, nby, int(width), int(height), k)
    return NeighborIndex(ids, d2, k, nodes.revision, n)


def _check_index(nodes: NodeSet, index: NeighborIndex, allow_stale: bool) -> None:
    if index.n_nodes != len(nodes):
        raise ConsistencyError("neighbor index was built for a different node count")
    if not allow_stale and index.node_revision != nodes.revision:
        raise ConsistencyError(
            f"stale neighbor index (built at revision {index.node_revision}, "
            f"nodes now at {nodes.revision})")


def _node_arrays(nodes: NodeSet):
    return (np.ascontiguousarray(nodes.g[:, 0]), np.ascontiguousarray(nodes.g[:, 1]),
            np.ascontiguousarray(nodes.t[:, 0]), np.ascontiguousarray(nodes.t[:, 1]),
            nodes.radii())


def blend_with_weights(nodes: NodeSet, index: NeighborIndex, *,
                       allow_stale: bool = False):
    """Blend and also return the per-pixel normalized weights (H, W, k)."""
    _check_index(nodes, index, allow_stale)
    gx, gy, tx, ty, radius = _node_arrays(nodes)
    return blend_kernel(gx, gy, tx, ty, radius, index.ids, True)


def blend(nodes: NodeSet, index: NeighborIndex, *, allow_stale: bool = False) -> np.ndarray:
    """Blend node displacements into a dense (H, W, 2) field."""
    _check_index(nodes, index, allow_stale)
    gx, gy, tx, ty, radius = _node_arrays(nodes)
    _, u = blend_kernel(gx, gy, tx, ty, radius, index.ids, False)
    return u


def scatter_adjoint(nodes: NodeSet, index: NeighborIndex, adj: np.ndarray):
    """Push per-pixel field adjoints dL/du(x) to (dt, dg, dr) node sums."""
    gx, gy, tx, ty, radius = _node_arrays(nodes)
    return backward_kernel(gx, gy, tx, ty, radius, index.ids,
                           np.ascontiguousarray(adj[..., 0]),
                           np.ascontiguousarray(adj[..., 1]))


def warp_with_grads(img: np.ndarray, field: np.ndarray):
    """Backward-warp plus the image's spatial partials at the sample points.

    Returns ``(warped, gx, gy)``, each (H, W); the gradients feed the
    reverse pass so the image is only resampled once per iteration.
    """
    h, w = img.shape
    if field.shape != (h, w, 2):
        raise ValueError(f"field shape {field.shape} does not match image {img.shape}")
    if not np.isfinite(field).all():
        raise ValueError("displacement field contains non-finite values")
    return warp_grad_kernel(np.ascontiguousarray(img),
                            np.ascontiguousarray(field))


def warp(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward-warp: output(x) samples ``img`` at ``x + u(x)``."""
    values, _, _ = warp_with_grads(img, field)
    return values


def field_stats(field: np.ndarray) -> dict:
    """Displacement magnitudes and the forward-difference Jacobian extremum."""
    h, w = field.shape[:2]
    if h < 2 or w < 2:
        raise ValueError("field statistics need at least a 2x2 field")
    mag = np.hypot(field[..., 0], field[..., 1])
    ux, uy = field[..., 0], field[..., 1]
    dux_dx = ux[:-1, 1:] - ux[:-1, :-1]
    dux_dy = ux[1:, :-1] - ux[:-1, :-1]
    duy_dx = uy[:-1, 1:] - uy[:-1, :-1]
    duy_dy = uy[1:, :-1] - uy[:-1, :-1]
    det = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
    return {
        "max_mag": float(mag.max()),
        "mean_mag": float(mag.mean()),
        "jacobian_min_det": float(det.min()),
    }


# ---------------------------------------------------------------------------
# Field dump: magic "GPOF", version byte, little-endian u32 width/height, then
# row-major (dx, dy) float32 pairs.

def write_field(path, field: np.ndarray) -> None:
    h, w = field.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_GPOF_MAGIC)
        fh.write(struct.pack("<B", _GPOF_VERSION))
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _GPOF_MAGIC:
        raise ValueError(f"'{path}' is not a field dump (bad magic)")
    version = blob[4]
    if version != _GPOF_VERSION:
        raise ValueError(f"unsupported field dump version {version}")
    w, h = struct.unpack("<II", blob[5:13])
    data = np.frombuffer(blob[13:], dtype="<f4")
    if data.size != w * h * 2:
        raise ValueError(f"field dump '{path}' is truncated")
    return data.astype(np.float64).reshape(h, w, 2)
