"""Trainable Gaussian control nodes: construction, radius mapping, subsampling.

Each node carries a center ``g`` (coarse/fixed frame), a displacement ``t``
and a raw radius scalar ``beta``. The effective radius is
``r = r_min + (r_max - r_min) * sigmoid(beta) + 0.1`` so it can never vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .coarse import GlobalTransform, MatchSet, to_coarse_frame
from .errors import DegenerateInputError

_SUBSAMPLE_GRID = 16


@dataclass
class RadiusConfig:
    r_min: float
    r_max: float

    def __post_init__(self):
        if not (0 <= self.r_min < self.r_max):
            raise ValueError(f"radius bounds need 0 <= r_min < r_max, got "
                             f"[{self.r_min}, {self.r_max}]")


@dataclass
class ControlNode:
    g: np.ndarray       # (2,) center
    t: np.ndarray       # (2,) displacement
    beta: float


@dataclass
class NodeSet:
    """Struct-of-arrays node population plus frozen anchor/target pairs.

    ``anchors``/``targets`` hold the initial keypoint positions and initial
    displacements used by the keypoint-consistency loss (empty for grid
    nodes). ``revision`` increments on every mutation so stale neighbor
    indices can be detected.
    """

    g: np.ndarray
    t: np.ndarray
    beta: np.ndarray
    radius_cfg: RadiusConfig
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    revision: int = 0

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1, 2)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1, 2)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 2)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        n = len(self.g)
        if n < 1:
            raise ValueError("a node set needs at least one node")
        if len(self.t) != n or len(self.beta) != n:
            raise ValueError("g, t and beta must have matching lengths")
        if len(self.anchors) != len(self.targets):
            raise ValueError("anchors and targets must have matching lengths")
        for name, arr in (("g", self.g), ("t", self.t), ("beta", self.beta)):
            if not np.isfinite(arr).all():
                raise ValueError(f"node field '{name}' contains non-finite values")

    def __len__(self) -> int:
        return len(self.g)

    def node(self, i: int) -> ControlNode:
        return ControlNode(self.g[i].copy(), self.t[i].copy(), float(self.beta[i]))

    def radii(self) -> np.ndarray:
        return radius_of(self.beta, self.radius_cfg)

    def bump(self) -> None:
        self.revision += 1

    def copy(self) -> "NodeSet":
        return NodeSet(self.g.copy(), self.t.copy(), self.beta.copy(),
                       self.radius_cfg, self.anchors.copy(), self.targets.copy(),
                       self.revision)


def radius_of(beta, cfg: RadiusConfig):
    """Map raw beta to a radius inside (r_min + 0.1, r_max + 0.1)."""
    return cfg.r_min + (cfg.r_max - cfg.r_min) * expit(beta) + 0.1


def radius_grad(beta, cfg: RadiusConfig):
    """d radius / d beta = (r_max - r_min) * sigmoid(beta) * (1 - sigmoid(beta))."""
    s = expit(beta)
    return (cfg.r_max - cfg.r_min) * s * (1.0 - s)


def beta_for_radius(r: float, cfg: RadiusConfig) -> float:
    """Inverse of :func:`radius_of`; valid on the open radius interval only."""
    lo, hi = cfg.r_min + 0.1, cfg.r_max + 0.1
    if not (lo < r < hi):
        raise ValueError(f"radius {r} outside the open interval ({lo}, {hi})")
    frac = (r - lo) / (cfg.r_max - cfg.r_min)
    return float(np.log(frac / (1.0 - frac)))


def subsample_keypoints(matches: MatchSet, n_nodes: int, seed: int) -> MatchSet:
    """Spatially stratified reduction to at most ``n_nodes`` pairs.

    Pairs are bucketed on a 16x16 grid over the fixed-frame bounding box.
    Each bucket first contributes floor(its proportional share) pairs (taken
    in descending confidence, seeded shuffle breaking ties), then leftover
    slots are filled round-robin across buckets. Deterministic per seed.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    n = len(matches)
    if n <= n_nodes:
        return matches

    rng = np.random.default_rng(seed)
    fixed = matches.fixed
    lo = fixed.min(axis=0)
    span = fixed.max(axis=0) - lo
    span[span == 0] = 1.0
    cells = np.minimum((_SUBSAMPLE_GRID * (fixed - lo) / span).astype(np.intp),
                       _SUBSAMPLE_GRID - 1)
    bucket_id = cells[:, 1] * _SUBSAMPLE_GRID + cells[:, 0]

    conf = matches.confidence
    if conf is None:
        conf = np.ones(n)
    # Shuffle first so an ordinary stable sort breaks confidence ties randomly.
    perm = rng.permutation(n)
    order = perm[np.argsort(-conf[perm], kind="stable")]

    buckets: dict[int, list[int]] = {}
    for idx in order:
        buckets.setdefault(int(bucket_id[idx]), []).append(int(idx))

    keys = sorted(buckets)
    taken: list[int] = []
    cursor = {b: 0 for b in keys}
    for b in keys:
        quota = (n_nodes * len(buckets[b])) // n
        take = min(quota, len(buckets[b]))
        taken.extend(buckets[b][:take])
        cursor[b] = take
    while len(taken) < n_nodes:
        progressed = False
        for b in keys:
            if len(taken) >= n_nodes:
                break
            if cursor[b] < len(buckets[b]):
                taken.append(buckets[b][cursor[b]])
                cursor[b] += 1
                progressed = True
        if not progressed:
            break
    return matches.select(np.sort(np.asarray(taken, dtype=np.intp)))


def _median_nn_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 1.0
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def _clamped_beta(radius: float, cfg: RadiusConfig) -> float:
    # Pull auto-chosen radii strictly inside the open interval.
    lo, hi = cfg.r_min + 0.1, cfg.r_max + 0.1
    margin = 1e-3 * (hi - lo)
    return beta_for_radius(float(np.clip(radius, lo + margin, hi - margin)), cfg)


def init_dcn(matches: MatchSet, transform: GlobalTransform, n_nodes: int,
             cfg: RadiusConfig, init_radius: float | None = None,
             seed: int = 0) -> NodeSet:
    """Descriptor-based nodes from matches, displacements in the coarse frame.

    Moving points are mapped back through the coarse transform; each retained
    pair becomes a node with ``g = p_f`` and ``t = p_m_coarse - p_f``. When
    ``init_radius`` is None it defaults to twice the median nearest-neighbor
    node distance.
    """
    if len(matches) == 0:
        raise DegenerateInputError("cannot initialize nodes from an empty match set")
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    chosen = subsample_keypoints(matches, n_nodes, seed)
    moving_coarse = to_coarse_frame(transform, chosen.moving)
    g = chosen.fixed.copy()
    t = moving_coarse - g
    if init_radius is None:
        init_radius = 2.0 * _median_nn_distance(g)
    beta = np.full(len(g), _clamped_beta(init_radius, cfg))
    return NodeSet(g, t, beta, cfg, anchors=g.copy(), targets=t.copy())


def init_gcn(width: int, height: int, n: int, cfg: RadiusConfig,
             init_radius: float | None = None) -> NodeSet:
    """n x n lattice of zero-displacement nodes at cell centers."""
    if n < 2:
        raise ValueError(f"grid side must be >= 2, got {n}")
    i = np.arange(n, dtype=np.float64)
    gx = (i + 0.5) * (width / n)
    gy = (i + 0.5) * (height / n)
    xx, yy = np.meshgrid(gx, gy)
    g = np.c_[xx.ravel(), yy.ravel()]
    if init_radius is None:
        init_radius = width / n
    beta = np.full(n * n, _clamped_beta(init_radius, cfg))
    return NodeSet(g, np.zeros_like(g), beta, cfg)


# ---------------------------------------------------------------------------
# Node table format: comment line with radius bounds, then x,y,tx,ty,beta rows.

def write_nodes(path, nodes: NodeSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# r_min={nodes.radius_cfg.r_min!r} r_max={nodes.radius_cfg.r_max!r}\n")
        fh.write("x,y,tx,ty,beta\n")
        for (x, y), (tx, ty), b in zip(nodes.g, nodes.t, nodes.beta):
            fh.write(f"{float(x)!r},{float(y)!r},{float(tx)!r},"
                     f"{float(ty)!r},{float(b)!r}\n")


def read_nodes(path) -> NodeSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 3 or not lines[0].startswith("#"):
        raise ValueError(f"node file '{path}' must carry a radius-bounds comment, "
                         "a header, and at least one node row")
    bounds = dict(kv.split("=") for kv in lines[0][1:].split())
    cfg = RadiusConfig(float(bounds["r_min"]), float(bounds["r_max"]))
    if lines[1] != "x,y,tx,ty,beta":
        raise ValueError(f"node file '{path}' has an unexpected header")
    rows = np.asarray([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    return NodeSet(rows[:, 0:2], rows[:, 2:4], rows[:, 4], cfg)
