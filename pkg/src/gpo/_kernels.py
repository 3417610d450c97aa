"""Numba inner loops for neighbor queries, blending and gradient scatter.

Per-pixel outputs are written to disjoint slots, so the parallel kernels are
bit-identical regardless of thread count; the gradient accumulation kernel
is serial so node sums are reproducible. `GPO_THREADS` caps the thread pool.
"""

from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange, set_num_threads


def configure_threads() -> None:
    raw = os.environ.get("GPO_THREADS")
    if not raw:
        return
    try:
        threads = max(1, int(raw))
    except ValueError:
        return
    try:
        set_num_threads(min(threads, os.cpu_count() or 1))
    except ValueError:
        pass


configure_threads()


@njit(cache=True, parallel=True)
def knn_query(node_x, node_y, order, starts, ox, oy, bin_size, nbx, nby,
              width, height, k):
    """Exact k-nearest node ids per pixel via expanding rings of hash bins.

    Candidates are kept in a (distance^2, id)-sorted insertion buffer; a ring
    at Chebyshev bin distance rho is at least (rho-1)*bin_size away, so the
    search stops once that bound strictly exceeds the current kth distance.
    """
    ids_out = np.empty((height, width, k), dtype=np.int32)
    d2_out = np.empty((height, width, k), dtype=np.float64)
    max_ring = max(nbx, nby)

    for y in prange(height):
        buf_d2 = np.empty(k, dtype=np.float64)
        buf_id = np.empty(k, dtype=np.int32)
        fy = float(y)
        cby = int((fy - oy) / bin_size)      # coords - origin >= 0, so
        for x in range(width):               # truncation == floor
            fx = float(x)
            cbx = int((fx - ox) / bin_size)
            # distance from this pixel to the nearest edge of its own bin
            # tightens the ring lower bound below
            dxl = (fx - ox) - cbx * bin_size
            dyl = (fy - oy) - cby * bin_size
            edge = min(min(dxl, bin_size - dxl), min(dyl, bin_size - dyl))
            count = 0
            for ring in range(max_ring + 1):
                if count == k:
                    # unvisited ring-r bins are >= (r-1)*bin + edge away
                    bound = (ring - 1) * bin_size + edge
                    if bound > 0.0 and bound * bound > buf_d2[k - 1]:
                        break
                by_lo = cby - ring
                by_hi = cby + ring
                for by in range(max(by_lo, 0), min(by_hi, nby - 1) + 1):
                    if ring == 0 or by == by_lo or by == by_hi:
                        bx_first, bx_last, bx_step = cbx - ring, cbx + ring, 1
                    else:
                        bx_first, bx_last, bx_step = cbx - ring, cbx + ring, 2 * ring
                    if bx_step <= 0:
                        bx_step = 1
                    for bx in range(bx_first, bx_last + 1, bx_step):
                        if bx < 0 or bx >= nbx:
                            continue
                        b = by * nbx + bx
                        for slot in range(starts[b], starts[b + 1]):
                            nid = order[slot]
                            dx = fx - node_x[nid]
                            dy = fy - node_y[nid]
                            nd2 = dx * dx + dy * dy
                            if count == k:
                                last = buf_d2[k - 1]
                                if nd2 > last or (nd2 == last
                                                  and nid > buf_id[k - 1]):
                                    continue
                                pos = k - 1
                            else:
                                pos = count
                                count += 1
                            while pos > 0 and (nd2 < buf_d2[pos - 1]
                                               or (nd2 == buf_d2[pos - 1]
                                                   and nid < buf_id[pos - 1])):
                                buf_d2[pos] = buf_d2[pos - 1]
                                buf_id[pos] = buf_id[pos - 1]
                                pos -= 1
                            buf_d2[pos] = nd2
                            buf_id[pos] = nid
            for j in range(k):
                ids_out[y, x, j] = buf_id[j]
                d2_out[y, x, j] = buf_d2[j]
    return ids_out, d2_out


@njit(cache=True, parallel=True)
def blend_kernel(node_x, node_y, node_tx, node_ty, radius, ids, want_weights):
    """Softmax-Gaussian blending; optionally materializes per-pixel weights."""
    height, width, k = ids.shape
    if want_weights:
        weights = np.empty((height, width, k), dtype=np.float64)
    else:
        weights = np.empty((1, 1, 1), dtype=np.float64)
    u = np.empty((height, width, 2), dtype=np.float64)
    for y in prange(height):
        s = np.empty(k, dtype=np.float64)
        fy = float(y)
        for x in range(width):
            fx = float(x)
            smax = -np.inf
            for j in range(k):
                nid = ids[y, x, j]
                dx = fx - node_x[nid]
                dy = fy - node_y[nid]
                r = radius[nid]
                s[j] = -(dx * dx + dy * dy) / (2.0 * r * r)
                if s[j] > smax:
                    smax = s[j]
            den = 0.0
            for j in range(k):
                s[j] = np.exp(s[j] - smax)
                den += s[j]
            ux = 0.0
            uy = 0.0
            for j in range(k):
                nid = ids[y, x, j]
                w = s[j] / den
                if want_weights:
                    weights[y, x, j] = w
                ux += w * node_tx[nid]
                uy += w * node_ty[nid]
            u[y, x, 0] = ux
            u[y, x, 1] = uy
    return weights, u


@njit(cache=True, parallel=True)
def warp_grad_kernel(img, field):
    """Bilinear backward warp with the surface partials at each sample.

    Mirrors the scalar sampling convention exactly: clamp to the border,
    containing cell by floor (top edge folded into the last cell), lerp
    form, zero gradient in any clamped direction.
    """
    h, w = img.shape
    warped = np.empty((h, w), dtype=np.float64)
    gx = np.empty((h, w), dtype=np.float64)
    gy = np.empty((h, w), dtype=np.float64)
    wm1 = float(w - 1)
    hm1 = float(h - 1)
    for y in prange(h):
        for x in range(w):
            sx = float(x) + field[y, x, 0]
            sy = float(y) + field[y, x, 1]
            in_x = 1.0 if (0.0 <= sx <= wm1) else 0.0
            in_y = 1.0 if (0.0 <= sy <= hm1) else 0.0
            cx = min(max(sx, 0.0), wm1)
            cy = min(max(sy, 0.0), hm1)
            x0 = int(np.floor(cx))
            y0 = int(np.floor(cy))
            if w >= 2 and x0 > w - 2:
                x0 = w - 2
            if h >= 2 and y0 > h - 2:
                y0 = h - 2
            fx = cx - x0
            fy = cy - y0
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            v00 = img[y0, x0]
            v01 = img[y0, x1]
            v10 = img[y1, x0]
            v11 = img[y1, x1]
            dx_top = v01 - v00
            dx_bot = v11 - v10
            top = v00 + fx * dx_top
            bot = v10 + fx * dx_bot
            warped[y, x] = top + fy * (bot - top)
            gx[y, x] = (dx_top + fy * (dx_bot - dx_top)) * in_x
            gy[y, x] = ((v10 - v00) + fx * ((v11 - v01) - (v10 - v00))) * in_y
    return warped, gx, gy


_SCATTER_BANDS = 64


@njit(cache=True, parallel=True)
def backward_kernel(node_x, node_y, node_tx, node_ty, radius, ids, adj_x, adj_y):
    """Scatter pixel adjoints dL/du(x) into node gradients (dt, dg, dr).

    Rows are split into a fixed number of bands; each band accumulates its
    own partial sums, merged afterwards in band order. Results are
    therefore identical for any thread count.
    """
    height, width, k = ids.shape
    n = node_x.shape[0]
    bands = min(_SCATTER_BANDS, height)
    part_dt = np.zeros((bands, n, 2), dtype=np.float64)
    part_dg = np.zeros((bands, n, 2), dtype=np.float64)
    part_dr = np.zeros((bands, n), dtype=np.float64)

    for band in prange(bands):
        s = np.empty(k, dtype=np.float64)
        y_lo = band * height // bands
        y_hi = (band + 1) * height // bands
        for y in range(y_lo, y_hi):
            fy = float(y)
            for x in range(width):
                ax = adj_x[y, x]
                ay = adj_y[y, x]
                if ax == 0.0 and ay == 0.0:
                    continue
                fx = float(x)
                smax = -np.inf
                for j in range(k):
                    nid = ids[y, x, j]
                    dx = fx - node_x[nid]
                    dy = fy - node_y[nid]
                    r = radius[nid]
                    s[j] = -(dx * dx + dy * dy) / (2.0 * r * r)
                    if s[j] > smax:
                        smax = s[j]
                den = 0.0
                for j in range(k):
                    s[j] = np.exp(s[j] - smax)
                    den += s[j]
                ux = 0.0
                uy = 0.0
                for j in range(k):
                    nid = ids[y, x, j]
                    w = s[j] / den
                    ux += w * node_tx[nid]
                    uy += w * node_ty[nid]
                for j in range(k):
                    nid = ids[y, x, j]
                    w = s[j] / den
                    part_dt[band, nid, 0] += w * ax
                    part_dt[band, nid, 1] += w * ay
                    # softmax adjoint: dL/ds_j = w_j * (t_j - u) . dL/du
                    ds = w * ((node_tx[nid] - ux) * ax
                              + (node_ty[nid] - uy) * ay)
                    dx = fx - node_x[nid]
                    dy = fy - node_y[nid]
                    r = radius[nid]
                    r2 = r * r
                    part_dg[band, nid, 0] += ds * dx / r2
                    part_dg[band, nid, 1] += ds * dy / r2
                    part_dr[band, nid] += ds * (dx * dx + dy * dy) / (r2 * r)

    dt = np.zeros((n, 2), dtype=np.float64)
    dg = np.zeros((n, 2), dtype=np.float64)
    dr = np.zeros(n, dtype=np.float64)
    for band in range(bands):
        dt += part_dt[band]
        dg += part_dg[band]
        dr += part_dr[band]
    return dt, dg, dr
