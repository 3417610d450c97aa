"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

The synthetic-recovery criteria run full registrations on a 20-pair suite at
256x256 (deformation amplitude 12 px, no global component, landmark noise
2 px for the match-driven runs) with thresholds frozen at bring-up:
grid-node recovery must cut the median landmark error by >= 70% and land
under 1.5 px on >= 80% of pairs; descriptor-node runs must beat the
homography-only baseline on >= 95% of pairs.
"""

import os
import time

import numpy as np
import pytest

from gpo.cli import main as cli_main
from gpo.coarse import GlobalTransform, RansacConfig, apply_global
from gpo.field import blend_with_weights, build_knn
from gpo.image import gaussian_blur
from gpo.loss import LossWeights
from gpo.metrics import LandmarkPairs, TREStats, auc, tre
from gpo.nodes import NodeSet, RadiusConfig, init_dcn, init_gcn
from gpo.optim import OptimConfig, fit_coarse_transform, register
from gpo.synth import SynthConfig, make_pair

SUITE_SIZE = 20
IMG = 256
DEFORM = 12.0
MATCH_NOISE = 2.0
BLUR = 1.0
ETA_T = 0.15        # reaches the 12 px regime within the iteration budget
RADIUS = RadiusConfig(8.0, 256.0)


def report(criterion: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion:2d} [{name}]: {status}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {criterion} ({name}) failed: {detail}"


def suite_config(seed: int, with_match_noise: bool = False) -> SynthConfig:
    return SynthConfig(seed=seed, size=IMG, deform_max_px=DEFORM,
                       transform_frac=0.0,
                       match_noise_px=MATCH_NOISE if with_match_noise else 0.0)


@pytest.fixture(scope="session")
def gcn_results():
    """Criterion 5/4 runs: grid-node recovery on the 20-pair suite."""
    out = []
    for seed in range(SUITE_SIZE):
        pair = make_pair(suite_config(seed))
        fixed = gaussian_blur(pair.fixed, BLUR)
        moving = gaussian_blur(pair.moving, BLUR)
        pre = tre(pair.landmarks, GlobalTransform.identity(),
                  np.zeros((IMG, IMG, 2)))
        nodes = init_gcn(IMG, IMG, 20, RADIUS)
        cfg = OptimConfig(eta_g=1.0, eta_t=ETA_T, eta_r=0.01, tau_max=200,
                          K=10, loss_weights=LossWeights(0.0, 1.0), seed=seed,
                          snapshot_every=1 if seed == 0 else 0)
        t0 = time.perf_counter()
        result = register(fixed, moving, nodes, cfg)
        wall = time.perf_counter() - t0
        post = tre(pair.landmarks, GlobalTransform.identity(),
                   result.final_field)
        out.append({"pre": pre, "post": post, "wall": wall,
                    "loss_first": result.loss_trace[0].total,
                    "loss_last": result.loss_trace[-1].total,
                    "snapshots": result.node_snapshots if seed == 0 else []})
    return out


@pytest.fixture(scope="session")
def dcn_results():
    """Criterion 6 runs: descriptor nodes vs the coarse fit alone."""
    out = []
    for seed in range(SUITE_SIZE):
        pair = make_pair(suite_config(seed, with_match_noise=True))
        fixed = gaussian_blur(pair.fixed, BLUR)
        moving = gaussian_blur(pair.moving, BLUR)
        ransac = RansacConfig(iters=500, inlier_thresh_px=6.0, min_inliers=4,
                              seed=seed)
        transform = fit_coarse_transform(pair.matches, ransac)
        homo_only = tre(pair.landmarks, transform, np.zeros((IMG, IMG, 2)))
        moving_coarse = apply_global(moving, transform, IMG, IMG)
        nodes = init_dcn(pair.matches, transform, 1000, RADIUS, seed=seed)
        cfg = OptimConfig(eta_g=1.0, eta_t=ETA_T, eta_r=0.01, tau_max=100,
                          K=10, loss_weights=LossWeights(0.4, 1.0), seed=seed,
                          snapshot_every=0)
        result = register(fixed, moving_coarse, nodes, cfg)
        dcn = tre(pair.landmarks, transform, result.final_field)
        out.append({"homo": homo_only, "dcn": dcn})
    return out


def test_criterion_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    code = cli_main(["gradcheck", "--seed", "0", "--trials", "10"])
    wall = time.perf_counter() - t0
    out = capsys.readouterr().out
    with capsys.disabled():
        report(1, "gradient correctness", code == 0 and wall < 120.0,
               f"exit {code}, {out.count('pass=true')}/10 seeds, {wall:.1f}s")


def test_criterion_2_partition_of_unity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2025)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 400))
        nodes = NodeSet(rng.uniform(-10, 138, (n, 2)),
                        rng.normal(0, 2, (n, 2)), rng.normal(0, 1.5, n),
                        RadiusConfig(0.5, 150.0))
        index = build_knn(nodes, 128, 128, 10)
        weights, _ = blend_with_weights(nodes, index)
        worst = max(worst, float(np.abs(weights.sum(axis=2) - 1.0).max()))
    wall = time.perf_counter() - t0
    with capsys.disabled():
        report(2, "partition of unity", worst < 1e-6 and wall < 30.0,
               f"worst |sum w - 1| = {worst:.2e}, {wall:.1f}s")


def test_criterion_3_knn_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    all_equal = True
    for trial in range(50):
        if trial % 10 == 0:
            # constructed equidistant ties: duplicated and mirrored centers
            base = rng.uniform(10, 50, (8, 2))
            g = np.vstack([base, base, 64.0 - base])
        else:
            g = rng.uniform(-8, 72, (int(rng.integers(2, 200)), 2))
        nodes = NodeSet(g, np.zeros_like(g), np.zeros(len(g)),
                        RadiusConfig(1.0, 100.0))
        k = int(rng.integers(1, 12))
        index = build_knn(nodes, 64, 64, k)
        xs, ys = np.meshgrid(np.arange(64, dtype=float),
                             np.arange(64, dtype=float))
        d2 = (xs[..., None] - g[:, 0]) ** 2 + (ys[..., None] - g[:, 1]) ** 2
        order = np.argsort(d2, axis=2, kind="stable")[:, :, :index.k]
        all_equal &= np.array_equal(order.astype(np.int32), index.ids)
        all_equal &= np.array_equal(np.take_along_axis(d2, order, 2), index.d2)
    wall = time.perf_counter() - t0
    with capsys.disabled():
        report(3, "knn exactness", all_equal and wall < 30.0,
               f"50 configurations, {wall:.1f}s")


def test_criterion_4_radius_bounds(gcn_results, capsys):
    snapshots = gcn_results[0]["snapshots"]
    assert len(snapshots) == 200
    lo, hi = RADIUS.r_min + 0.1, RADIUS.r_max + 0.1
    ok = True
    worst_lo, worst_hi = np.inf, -np.inf
    for _, nodes in snapshots:
        r = nodes.radii()
        worst_lo = min(worst_lo, float(r.min()))
        worst_hi = max(worst_hi, float(r.max()))
        ok &= bool(np.all(r > lo) and np.all(r < hi))
    with capsys.disabled():
        report(4, "radius bounds", ok,
               f"radii in [{worst_lo:.3f}, {worst_hi:.3f}] "
               f"within ({lo}, {hi}) over 200 steps")


def test_criterion_5_synthetic_recovery(gcn_results, capsys):
    reductions = np.array([1.0 - r["post"].median / r["pre"].median
                           for r in gcn_results])
    finals = np.array([r["post"].median for r in gcn_results])
    walls = np.array([r["wall"] for r in gcn_results])
    # optimizer invariant along the way: total loss improves on >= 95% of runs
    improved = np.mean([r["loss_last"] < r["loss_first"]
                        for r in gcn_results])
    ok = (bool(np.all(reductions >= 0.70))
          and (finals < 1.5).mean() >= 0.80
          and bool(np.all(walls < 120.0))
          and improved >= 0.95)
    with capsys.disabled():
        report(5, "synthetic recovery", ok,
               f"min reduction {reductions.min()*100:.1f}% (need >= 70%), "
               f"{(finals < 1.5).mean()*100:.0f}% of pairs < 1.5 px "
               f"(max final {finals.max():.3f}), loss improved on "
               f"{improved*100:.0f}%, max {walls.max():.0f}s/pair")


def test_criterion_6_dcn_beats_coarse_only(dcn_results, capsys):
    wins = sum(1 for r in dcn_results
               if r["dcn"].median < r["homo"].median)
    frac = wins / len(dcn_results)
    with capsys.disabled():
        report(6, "descriptor nodes beat coarse-only", frac >= 0.95,
               f"{wins}/{len(dcn_results)} pairs improved")


def test_criterion_7_identity_stability(capsys):
    rng = np.random.default_rng(7)
    img = gaussian_blur(rng.random((128, 128)), 2.0)
    nodes = init_gcn(128, 128, 20, RadiusConfig(4.0, 128.0))
    cfg = OptimConfig(tau_max=50, K=10, loss_weights=LossWeights(0.0, 1.0),
                      snapshot_every=0)
    result = register(img, img.copy(), nodes, cfg)
    peak = float(np.hypot(result.final_field[..., 0],
                          result.final_field[..., 1]).max())
    with capsys.disabled():
        report(7, "identity stability", peak < 0.5,
               f"max |u| = {peak:.2e} px after 50 iterations")


def test_criterion_8_metric_oracles(capsys):
    lm = LandmarkPairs(np.array([[5.0, 5.0]]), np.array([[8.0, 9.0]]))
    five = tre(lm, GlobalTransform.identity(), np.zeros((20, 20, 2)))
    exact_five = five.distances[0] == 5.0

    curve = auc([TREStats.from_distances(np.full(10, 10.0))], (25,))
    worked = curve.auc_at[25] == pytest.approx(0.64, abs=1e-12)

    rng = np.random.default_rng(8)
    stats = [TREStats.from_distances(rng.uniform(0, 60, 10))
             for _ in range(40)]
    monotone = bool(np.all(np.diff(auc(stats, (50,)).success) >= 0))
    with capsys.disabled():
        report(8, "metric oracles", exact_five and worked and monotone,
               f"tre(3,4)={five.distances[0]}, auc@25={curve.auc_at[25]:.4f}, "
               f"success curve monotone={monotone}")


def test_criterion_9_ablation_directions(tmp_path_factory, capsys):
    root = tmp_path_factory.mktemp("ablation")
    pairs_dir = root / "pairs"
    code = cli_main([
        "synth", "--seed", "0", "--size", str(IMG), "--deform-max",
        str(DEFORM), "--count", str(SUITE_SIZE),
        "--set", "synth.transform_frac=0", "--out", str(pairs_dir)])
    assert code == 0
    sweep_dir = root / "sweep"
    code = cli_main([
        "sweep", "--grid", "optim.K=5,10", "--grid", "optim.tau_max=50,200",
        "--pairs", str(pairs_dir), "--out", str(sweep_dir),
        "--set", f"optim.eta_t={ETA_T}", "--set", "loss.alpha_gcc=0",
        "--set", "nodes.grid_n=20", "--set", f"preproc.blur_sigma={BLUR}"])
    assert code == 0
    rows = (sweep_dir / "summary.csv").read_text().strip().splitlines()[1:]
    medians = {}
    for row in rows:
        cells = row.split(",")
        medians[(int(cells[2]), int(cells[3]))] = float(cells[4])
    k_dir = medians[(10, 200)] <= medians[(5, 200)]
    tau_dir = medians[(10, 200)] <= medians[(10, 50)]
    with capsys.disabled():
        report(9, "ablation directions", k_dir and tau_dir,
               f"median TRE: K10/t200 {medians[(10, 200)]:.3f} vs "
               f"K5/t200 {medians[(5, 200)]:.3f} vs "
               f"K10/t50 {medians[(10, 50)]:.3f} (20 pairs)")


@pytest.mark.skipif("GPO_FIRE_DIR" not in os.environ,
                    reason="set GPO_FIRE_DIR to a directory of pair bundles "
                           "(fixed/moving images, matches.csv, landmarks.csv) "
                           "to run the full-scale pathway")
def test_criterion_10_full_scale_pathway(tmp_path, capsys):
    """Full-resolution pathway over externally supplied image pairs.

    Each subdirectory of GPO_FIRE_DIR must hold fixed.* and moving.* images,
    a matches.csv produced by an external matcher, and landmarks.csv at the
    original resolution. Reference target for this configuration: mean TRE
    2.352 px (recorded, not asserted).
    """
    from gpo.config import resolve, to_pipeline_config
    from gpo.optim import run_pipeline
    from gpo.metrics import read_landmarks

    root = os.environ["GPO_FIRE_DIR"]
    pair_dirs = sorted(p for p in os.listdir(root)
                       if os.path.isdir(os.path.join(root, p)))
    assert pair_dirs, f"no pair directories under {root}"
    improvements, walls = [], []
    for name in pair_dirs:
        d = os.path.join(root, name)
        def find(stem):
            hits = [f for f in os.listdir(d) if f.startswith(stem)]
            assert hits, f"missing {stem}.* in {d}"
            return os.path.join(d, hits[0])
        cfg = to_pipeline_config(resolve())
        t0 = time.perf_counter()
        result = run_pipeline(find("fixed"), find("moving"),
                              os.path.join(d, "matches.csv"), mode="dcn",
                              cfg=cfg)
        walls.append(time.perf_counter() - t0)
        lm = read_landmarks(os.path.join(d, "landmarks.csv"),
                            scale_fixed=result.scale_fixed[0],
                            scale_moving=result.scale_moving[0])
        full = tre(lm, result.global_transform, result.final_field)
        coarse_only = tre(lm, result.global_transform,
                          np.zeros_like(result.final_field))
        improvements.append(1.0 - full.mean / coarse_only.mean)
    ok = np.mean(improvements) >= 0.50 and max(walls) < 60.0
    with capsys.disabled():
        report(10, "full-scale pathway", ok,
               f"mean improvement {np.mean(improvements)*100:.0f}%, "
               f"max {max(walls):.0f}s/pair over {len(pair_dirs)} pairs")
