"""Per-group Adam updates and the iterative registration loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .coarse import GlobalTransform, MatchSet, RansacConfig, apply_global, \
    fit_affine, fit_homography
from .errors import ConsistencyError, NoConsensusError, NumericalFailureError
from .field import build_knn, blend, warp, warp_with_grads
from .image import gaussian_blur, load_image, resize_bilinear
from .loss import LossReport, LossWeights, backward, total_loss
from .nodes import NodeSet, RadiusConfig, init_dcn, init_gcn


@dataclass
class OptimConfig:
    eta_g: float = 1.0
    eta_t: float = 0.01
    eta_r: float = 0.01
    tau_max: int = 100
    K: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = dc_field(default_factory=LossWeights)
    gcc_norm_len: float = 0.0       # 0 -> image width
    seed: int = 0
    snapshot_every: int = 10        # 0 disables node snapshots

    def __post_init__(self):
        if min(self.eta_g, self.eta_t, self.eta_r) <= 0:
            raise ValueError("learning rates must be positive")
        if self.tau_max < 1:
            raise ValueError("tau_max must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class AdamState:
    m_g: np.ndarray
    v_g: np.ndarray
    m_t: np.ndarray
    v_t: np.ndarray
    m_beta: np.ndarray
    v_beta: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros((n, 2)), np.zeros((n, 2)),
                   np.zeros((n, 2)), np.zeros((n, 2)),
                   np.zeros(n), np.zeros(n))


@dataclass
class RegistrationResult:
    final_field: np.ndarray
    warped: np.ndarray
    loss_trace: list
    node_snapshots: list
    final_nodes: NodeSet
    global_transform: GlobalTransform
    timing: dict
    # original -> working resolution ratios, (x, y) per image
    scale_fixed: tuple = (1.0, 1.0)
    scale_moving: tuple = (1.0, 1.0)


def _adam_update(param, grad, m, v, lr, cfg: OptimConfig, t: int) -> None:
    m *= cfg.adam_beta1
    m += (1.0 - cfg.adam_beta1) * grad
    v *= cfg.adam_beta2
    v += (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1 ** t)
    v_hat = v / (1.0 - cfg.adam_beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def adam_step(nodes: NodeSet, grads, state: AdamState, cfg: OptimConfig) -> None:
    """One bias-corrected Adam step, in place, with per-group learning rates."""
    n = len(nodes)
    if grads.dg.shape != (n, 2) or state.m_g.shape != (n, 2):
        raise ConsistencyError("gradient/state arrays do not match the node count")
    state.step += 1
    t = state.step
    _adam_update(nodes.g, grads.dg, state.m_g, state.v_g, cfg.eta_g, cfg, t)
    _adam_update(nodes.t, grads.dt, state.m_t, state.v_t, cfg.eta_t, cfg, t)
    _adam_update(nodes.beta, grads.dbeta, state.m_beta, state.v_beta, cfg.eta_r, cfg, t)
    nodes.bump()


def register(fixed: np.ndarray, moving_coarse: np.ndarray, nodes: NodeSet,
             cfg: OptimConfig) -> RegistrationResult:
    """Optimize the node parameters for ``tau_max`` iterations.

    Every iteration rebuilds the neighbor index (node centers drift), blends
    the field, warps, evaluates the loss and applies one Adam step. The
    returned field/warp are recomputed from the final parameters.
    """
    if fixed.shape != moving_coarse.shape:
        raise ValueError("fixed and moving images must have equal dimensions")
    h, w = fixed.shape
    norm_len = cfg.gcc_norm_len if cfg.gcc_norm_len > 0 else float(w)

    state = AdamState.zeros(len(nodes))
    trace: list[LossReport] = []
    snapshots = []
    t_start = time.perf_counter()

    for tau in range(1, cfg.tau_max + 1):
        index = build_knn(nodes, w, h, cfg.K)
        u = blend(nodes, index)
        warp_cache = warp_with_grads(moving_coarse, u)
        report = total_loss(fixed, warp_cache[0], nodes, u, cfg.loss_weights,
                            norm_len)
        if not np.isfinite(report.total):
            raise NumericalFailureError(
                f"non-finite loss at iteration {tau}", iteration=tau)
        grads = backward(fixed, moving_coarse, nodes, index, u,
                         cfg.loss_weights, norm_len, warp_cache=warp_cache)
        if not grads.isfinite():
            bad = np.unique(np.concatenate([
                np.nonzero(~np.isfinite(grads.dg).all(axis=1))[0],
                np.nonzero(~np.isfinite(grads.dt).all(axis=1))[0],
                np.nonzero(~np.isfinite(grads.dbeta))[0]]))
            raise NumericalFailureError(
                f"non-finite gradient at iteration {tau} for nodes {bad.tolist()}",
                iteration=tau, node_ids=bad.tolist())
        trace.append(report)
        adam_step(nodes, grads, state, cfg)
        if cfg.snapshot_every and tau % cfg.snapshot_every == 0:
            snapshots.append((tau, nodes.copy()))

    t_opt = time.perf_counter()
    index = build_knn(nodes, w, h, cfg.K)
    final_field = blend(nodes, index)
    final_warped = warp(moving_coarse, final_field)
    t_end = time.perf_counter()

    return RegistrationResult(
        final_field=final_field,
        warped=final_warped,
        loss_trace=trace,
        node_snapshots=snapshots,
        final_nodes=nodes,
        global_transform=GlobalTransform.identity(),
        timing={"optimize_s": t_opt - t_start, "finalize_s": t_end - t_opt},
    )


def write_run_artifacts(out_dir, result: "RegistrationResult",
                        fixed_work: np.ndarray, metadata_lines=()) -> None:
    """Write the full artifact set for a finished registration.

    Called only after the run succeeded, so a numerical failure leaves the
    output directory untouched.
    """
    import os
    from .coarse import write_transform
    from .field import field_stats, write_field
    from .image import save_image_u8, save_overlay_u8, write_image_f32
    from .nodes import write_nodes

    os.makedirs(out_dir, exist_ok=True)
    save_image_u8(os.path.join(out_dir, "warped.png"), result.warped)
    write_image_f32(os.path.join(out_dir, "warped.gpoi"), result.warped)
    write_field(os.path.join(out_dir, "field.gpof"), result.final_field)
    write_transform(os.path.join(out_dir, "transform.txt"),
                    result.global_transform)
    write_nodes(os.path.join(out_dir, "nodes_final.csv"), result.final_nodes)
    save_overlay_u8(os.path.join(out_dir, "overlay.png"), fixed_work,
                    result.warped)
    save_image_u8(os.path.join(out_dir, "diff.png"),
                  np.abs(fixed_work - result.warped))
    with open(os.path.join(out_dir, "loss_trace.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("iter,total,l_gcc,l_ncc,ncc\n")
        for i, rep in enumerate(result.loss_trace, start=1):
            fh.write(f"{i},{rep.total:.9g},{rep.l_gcc:.9g},"
                     f"{rep.l_ncc:.9g},{rep.ncc_value:.9g}\n")

    stats = field_stats(result.final_field)
    final = result.loss_trace[-1]
    mean_u = float(np.hypot(result.final_field[..., 0],
                            result.final_field[..., 1]).mean())
    with open(os.path.join(out_dir, "run_metadata.txt"), "w",
              encoding="utf-8") as fh:
        for line in metadata_lines:
            fh.write(line + "\n")
        fh.write(f"metric.final_total = {final.total:.9g}\n")
        fh.write(f"metric.final_l_gcc = {final.l_gcc:.9g}\n")
        fh.write(f"metric.final_l_ncc = {final.l_ncc:.9g}\n")
        fh.write(f"metric.final_ncc = {final.ncc_value:.9g}\n")
        fh.write(f"metric.mean_abs_u = {mean_u:.9g}\n")
        fh.write(f"metric.max_abs_u = {stats['max_mag']:.9g}\n")
        fh.write(f"metric.jacobian_min_det = {stats['jacobian_min_det']:.9g}\n")
        fh.write("transform.kind = " + result.global_transform.kind + "\n")
        fh.write("transform.matrix = "
                 + " ".join(repr(float(v)) for v in
                            result.global_transform.H.ravel()) + "\n")
        for key in sorted(result.timing):
            fh.write(f"timing.{key} = {result.timing[key]:.3f}\n")


@dataclass
class PreprocConfig:
    blur_sigma: float = 1.0
    resize_w: int = 1024      # 0 -> keep native size
    resize_h: int = 1024


@dataclass
class PipelineConfig:
    """Everything run_pipeline needs besides the file paths."""

    optim: OptimConfig = dc_field(default_factory=OptimConfig)
    preproc: PreprocConfig = dc_field(default_factory=PreprocConfig)
    radius_cfg: RadiusConfig = dc_field(default_factory=lambda: RadiusConfig(8.0, 256.0))
    n_nodes: int = 1000
    grid_n: int = 20
    init_radius: float = 0.0      # 0 -> automatic per mode
    ransac: RansacConfig = dc_field(default_factory=RansacConfig)
    affine_fallback: bool = True


def _preprocess(img: np.ndarray, pre: PreprocConfig):
    """Blur + optional resize; returns the image and original->working scales."""
    out = gaussian_blur(img, pre.blur_sigma)
    if pre.resize_w > 0 and pre.resize_h > 0:
        h, w = img.shape
        out = resize_bilinear(out, pre.resize_w, pre.resize_h)
        return out, (w / pre.resize_w, h / pre.resize_h)
    return out, (1.0, 1.0)


def fit_coarse_transform(matches: MatchSet, ransac: RansacConfig,
                         affine_fallback: bool = True) -> GlobalTransform:
    """Homography with affine fallback when RANSAC finds no consensus."""
    try:
        return fit_homography(matches, ransac)
    except NoConsensusError:
        if not affine_fallback:
            raise
        return fit_affine(matches)


def run_pipeline(fixed_path, moving_path, matches_path=None, mode: str = "gcn",
                 cfg: PipelineConfig | None = None, out_dir=None,
                 metadata_lines=()) -> RegistrationResult:
    """Load, preprocess, coarse-align, build nodes, and register.

    In ``dcn`` mode the coarse transform is fitted from the supplied match
    file (match coordinates are given in the native frames of the input
    images and are rescaled to the working resolution); ``gcn`` mode uses
    the identity transform and a node lattice. With ``out_dir`` the full
    artifact set is written after the run succeeds; ``metadata_lines`` are
    prepended to the run-metadata record.
    """
    cfg = cfg or PipelineConfig()
    if mode not in ("dcn", "gcn"):
        raise ValueError(f"mode must be 'dcn' or 'gcn', got '{mode}'")
    if mode == "dcn" and matches_path is None:
        raise ValueError("dcn mode requires a match file")

    timing = {}
    t0 = time.perf_counter()
    fixed_raw = load_image(fixed_path)
    moving_raw = load_image(moving_path)
    fixed, scale_f = _preprocess(fixed_raw, cfg.preproc)
    moving_pre, scale_m = _preprocess(moving_raw, cfg.preproc)
    h, w = fixed.shape
    timing["load_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if mode == "dcn":
        from .coarse import read_matches
        matches_native = read_matches(matches_path)
        if len(matches_native) < 4:
            raise ValueError(
                f"dcn mode needs >= 4 matches, got {len(matches_native)}")
        matches = MatchSet(matches_native.fixed / scale_f,
                           matches_native.moving / scale_m,
                           matches_native.confidence)
        transform = fit_coarse_transform(matches, cfg.ransac, cfg.affine_fallback)
    else:
        transform = GlobalTransform.identity()
    moving_coarse = apply_global(moving_pre, transform, w, h)
    timing["coarse_s"] = time.perf_counter() - t0

    if mode == "dcn":
        nodes = init_dcn(matches, transform, cfg.n_nodes, cfg.radius_cfg,
                         cfg.init_radius if cfg.init_radius > 0 else None,
                         seed=cfg.optim.seed)
    else:
        nodes = init_gcn(w, h, cfg.grid_n, cfg.radius_cfg,
                         cfg.init_radius if cfg.init_radius > 0 else None)

    result = register(fixed, moving_coarse, nodes, cfg.optim)
    result.global_transform = transform
    result.timing.update(timing)
    result.scale_fixed = scale_f
    result.scale_moving = scale_m
    if out_dir is not None:
        write_run_artifacts(out_dir, result, fixed, metadata_lines)
    return result
