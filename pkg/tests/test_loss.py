import numpy as np
import pytest

from gpo.errors import ConsistencyError
from gpo.field import blend, build_knn
from gpo.image import gaussian_blur
from gpo.loss import GradcheckConfig, LossWeights, backward, gcc_loss, gradcheck, \
    ncc_loss, total_loss, _loss_with_frozen_index
from gpo.nodes import NodeSet, RadiusConfig


def ncc_oracle(a, b):
    """Straightforward zero-mean NCC, independent of the implementation."""
    az = a - a.mean()
    bz = b - b.mean()
    return float((az * bz).sum()
                 / np.sqrt((az * az).sum() * (bz * bz).sum() + 1e-10))


class TestNccLoss:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16))
        loss, rho, grad = ncc_loss(img, img.copy())
        assert loss == pytest.approx(0.0, abs=1e-9)
        assert rho == pytest.approx(1.0, abs=1e-9)
        assert np.abs(grad).max() <= 1e-8

    def test_anticorrelated(self):
        rng = np.random.default_rng(1)
        img = rng.random((12, 12))
        loss, rho, _ = ncc_loss(img, 1.0 - img)
        assert rho == pytest.approx(-1.0, abs=1e-9)
        assert loss == pytest.approx(2.0, abs=1e-9)

    def test_value_matches_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        loss, rho, _ = ncc_loss(a, b)
        assert rho == pytest.approx(ncc_oracle(a, b), abs=1e-12)
        assert -1.0 - 1e-9 <= rho <= 1.0 + 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        _, _, grad = ncc_loss(a, b)
        h = 1e-4
        for (y, x) in [(0, 0), (3, 7), (15, 15), (8, 2)]:
            bp = b.copy(); bp[y, x] += h
            bm = b.copy(); bm[y, x] -= h
            fd = (ncc_loss(a, bp)[0] - ncc_loss(a, bm)[0]) / (2 * h)
            assert abs(fd - grad[y, x]) / max(abs(grad[y, x]), abs(fd)) < 1e-5

    def test_constant_image_guard(self):
        flat = np.full((8, 8), 0.5)
        rng = np.random.default_rng(4)
        loss, rho, grad = ncc_loss(flat, rng.random((8, 8)))
        assert loss == 1.0 and rho == 0.0
        assert np.all(grad == 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ncc_loss(np.zeros((4, 4)), np.zeros((4, 5)))


class TestGccLoss:
    def _nodes_with_anchors(self, anchors, targets):
        n = len(anchors)
        return NodeSet(np.asarray(anchors, float), np.zeros((n, 2)),
                       np.zeros(n), RadiusConfig(1, 50),
                       anchors=np.asarray(anchors, float),
                       targets=np.asarray(targets, float))

    def test_zero_residual(self):
        ns = self._nodes_with_anchors([[4.5, 5.5]], [[2.0, -1.0]])
        field = np.zeros((12, 12, 2))
        field[..., 0] = 2.0
        field[..., 1] = -1.0
        loss, grad = gcc_loss(ns, field, norm_len=12.0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.abs(grad).max() < 1e-12

    def test_single_anchor_arithmetic(self):
        w = 64.0
        ns = self._nodes_with_anchors([[10.0, 10.0]], [[0.0, 0.0]])
        field = np.zeros((64, 64, 2))
        field[..., 0] = 3.0
        field[..., 1] = 4.0
        loss, grad = gcc_loss(ns, field, norm_len=w)
        assert loss == pytest.approx(25.0 / w ** 2)
        assert np.allclose(grad, [[2 * 3 / w ** 2, 2 * 4 / w ** 2]])

    def test_gcn_mode_returns_zero(self):
        ns = NodeSet([[1.0, 1.0]], [[0.0, 0.0]], [0.0], RadiusConfig(1, 50))
        loss, grad = gcc_loss(ns, np.ones((8, 8, 2)), norm_len=8.0)
        assert loss == 0.0
        assert grad.shape == (0, 2)


class TestTotalLoss:
    def test_default_weights(self):
        w = LossWeights()
        assert w.alpha_gcc == 0.4 and w.alpha_ncc == 1.0

    def test_zero_components(self):
        rng = np.random.default_rng(5)
        img = rng.random((10, 10))
        ns = NodeSet([[5.0, 5.0]], [[0.0, 0.0]], [0.0], RadiusConfig(1, 50))
        rep = total_loss(img, img.copy(), ns, np.zeros((10, 10, 2)), LossWeights())
        assert rep.total == pytest.approx(0.0, abs=1e-9)

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((10, 10)), rng.random((10, 10))
        ns = NodeSet([[5.0, 5.0]], [[1.0, 0.0]], [0.0], RadiusConfig(1, 50),
                     anchors=[[5.0, 5.0]], targets=[[0.5, 0.5]])
        field = np.ones((10, 10, 2)) * 0.3
        r1 = total_loss(a, b, ns, field, LossWeights(0.4, 1.0))
        r2 = total_loss(a, b, ns, field, LossWeights(0.4, 2.0))
        assert r2.total - r2.l_gcc * 0.4 == pytest.approx(
            2 * (r1.total - r1.l_gcc * 0.4), rel=1e-12)
        assert r1.total == pytest.approx(0.4 * r1.l_gcc + 1.0 * r1.l_ncc, abs=1e-9)


class TestBackward:
    def test_stationary_at_perfect_alignment(self):
        rng = np.random.default_rng(7)
        img = gaussian_blur(rng.random((32, 32)), 1.0)
        ns = NodeSet(rng.uniform(4, 28, (8, 2)), np.zeros((8, 2)),
                     np.zeros(8), RadiusConfig(2, 30),
                     anchors=rng.uniform(4, 28, (8, 2)),
                     targets=np.zeros((8, 2)))
        idx = build_knn(ns, 32, 32, 4)
        field = blend(ns, idx)
        grads = backward(img, img.copy(), ns, idx, field, LossWeights())
        assert grads.max_abs() <= 1e-8

    def test_unsupported_node_gets_exact_zero(self):
        # node 6 is farther from every pixel than the 6-node cluster; K=5
        g = np.vstack([np.random.default_rng(8).uniform(10, 20, (6, 2)),
                       [[1e6, 1e6]]])
        ns = NodeSet(g, np.ones((7, 2)), np.zeros(7), RadiusConfig(2, 30))
        idx = build_knn(ns, 32, 32, 5)
        assert not np.any(idx.ids == 6)
        rng = np.random.default_rng(9)
        fixed = gaussian_blur(rng.random((32, 32)), 1.0)
        moving = gaussian_blur(rng.random((32, 32)), 1.0)
        field = blend(ns, idx)
        grads = backward(fixed, moving, ns, idx, field, LossWeights(0.0, 1.0))
        assert np.all(grads.dt[6] == 0.0)
        assert np.all(grads.dg[6] == 0.0)
        assert grads.dbeta[6] == 0.0
        assert np.abs(grads.dt[:6]).max() > 0.0

    def test_stale_index_rejected(self):
        rng = np.random.default_rng(10)
        ns = NodeSet(rng.uniform(0, 16, (4, 2)), np.zeros((4, 2)),
                     np.zeros(4), RadiusConfig(1, 20))
        idx = build_knn(ns, 16, 16, 2)
        field = blend(ns, idx)
        img = rng.random((16, 16))
        ns.bump()
        with pytest.raises(ConsistencyError):
            backward(img, img, ns, idx, field, LossWeights())

    def test_full_loss_finite_difference_oracle(self):
        """Central-difference check of every parameter on a small instance,
        with the neighbor index frozen across perturbations."""
        rng = np.random.default_rng(11)
        size = 48
        fixed = gaussian_blur(rng.random((size, size)), 2.0)
        moving = gaussian_blur(rng.random((size, size)), 2.0)
        g = rng.uniform(8, 40, (10, 2))
        t = 0.5 + rng.uniform(-0.08, 0.08, (10, 2))
        ns = NodeSet(g, t, rng.uniform(-1, 1, 10), RadiusConfig(3, 24),
                     anchors=g + rng.uniform(-2, 2, g.shape),
                     targets=t + rng.uniform(-0.1, 0.1, t.shape))
        idx = build_knn(ns, size, size, 5)
        field = blend(ns, idx)
        w = LossWeights(0.4, 1.0)
        grads = backward(fixed, moving, ns, idx, field, w)

        def loss_at():
            return _loss_with_frozen_index(fixed, moving, ns, idx, w)

        h = 1e-3
        for param, grad in ((ns.t, grads.dt), (ns.g, grads.dg)):
            for i in range(len(ns)):
                for c in range(2):
                    orig = param[i, c]
                    param[i, c] = orig + h
                    up = loss_at()
                    param[i, c] = orig - h
                    dn = loss_at()
                    param[i, c] = orig
                    fd = (up - dn) / (2 * h)
                    a = grad[i, c]
                    if abs(a) < 1e-6 and abs(a - fd) < 1e-8:
                        continue
                    assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-3
        for i in range(len(ns)):
            orig = ns.beta[i]
            ns.beta[i] = orig + h
            up = loss_at()
            ns.beta[i] = orig - h
            dn = loss_at()
            ns.beta[i] = orig
            fd = (up - dn) / (2 * h)
            a = grads.dbeta[i]
            if abs(a) < 1e-6 and abs(a - fd) < 1e-8:
                continue
            assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-3


class TestGradcheck:
    def test_default_seed_passes(self):
        report = gradcheck(0)
        assert report.passed
        assert report.max_rel_err_t < 1e-3
        assert report.max_rel_err_g < 1e-3
        assert report.max_rel_err_beta < 1e-3

    def test_deterministic(self):
        a = gradcheck(3)
        b = gradcheck(3)
        assert a == b

    def test_report_line_format(self):
        line = gradcheck(1, GradcheckConfig(size=32, n_nodes=6)).line()
        assert "seed=1" in line and "pass=" in line
        assert "max_rel_err_t=" in line
