"""Pure numpy versions of the hot kernels.

Signatures match the compiled ``_ckernels`` module exactly; ``kernels``
picks one at import time.
"""
from __future__ import annotations

import numpy as np

from . import mathkit as mk

BACKEND = "python"
SOFT_CUTOFF = 40.0


def raster_tile(px, py, invz, valid, x0, x1, y0, y1, tri_id, bary, depth):
    """Z-buffer the triangles into pixel rows ``y0:y1`` and columns ``x0:x1``.

    ``px, py`` are pixel-space vertex coordinates (F, 3), ``invz`` the
    reciprocal camera depths. Writes ``tri_id``, perspective-correct
    ``bary`` and ``depth`` in place. Triangles are visited in index order
    and replace the stored sample only when strictly nearer.
    """
    for f in range(px.shape[0]):
        if not valid[f]:
            continue
        fx, fy = px[f], py[f]
        i0 = max(x0, int(np.ceil(fx.min() - 0.5)))
        i1 = min(x1, int(np.floor(fx.max() - 0.5)) + 1)
        j0 = max(y0, int(np.ceil(fy.min() - 0.5)))
        j1 = min(y1, int(np.floor(fy.max() - 0.5)) + 1)
        if i0 >= i1 or j0 >= j1:
            continue
        area = (fx[1] - fx[0]) * (fy[2] - fy[0]) - (fy[1] - fy[0]) * (fx[2] - fx[0])
        if abs(area) < 1e-18:
            continue
        cx = np.arange(i0, i1) + 0.5
        cy = (np.arange(j0, j1) + 0.5)[:, None]
        l0 = ((fx[2] - fx[1]) * (cy - fy[1]) - (fy[2] - fy[1]) * (cx - fx[1])) / area
        l1 = ((fx[0] - fx[2]) * (cy - fy[2]) - (fy[0] - fy[2]) * (cx - fx[2])) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        q0, q1, q2 = l0 * invz[f, 0], l1 * invz[f, 1], l2 * invz[f, 2]
        qs = q0 + q1 + q2
        z = 1.0 / np.where(inside, qs, 1.0)
        region = depth[j0:j1, i0:i1]
        win = inside & (z < region)
        if not win.any():
            continue
        region[win] = z[win]
        tri_id[j0:j1, i0:i1][win] = f
        b = bary[j0:j1, i0:i1]
        b[..., 0][win] = (q0 * z)[win]
        b[..., 1][win] = (q1 * z)[win]
        b[..., 2][win] = (q2 * z)[win]


def _seg_dist2(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    ll = ex * ex + ey * ey
    t = np.clip(((px - ax) * ex + (py - ay) * ey) / max(ll, 1e-300), 0.0, 1.0)
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return dx * dx + dy * dy, t, dx, dy


def _face_region(fx, fy, sx, sy, reach):
    """Index ranges of pixel centers within ``reach`` of the face bbox."""
    i0 = np.searchsorted(sx, fx.min() - reach, side="left")
    i1 = np.searchsorted(sx, fx.max() + reach, side="right")
    # sy is decreasing (row 0 is the top of the image)
    j0 = np.searchsorted(-sy, -(fy.max() + reach), side="left")
    j1 = np.searchsorted(-sy, -(fy.min() - reach), side="right")
    return i0, i1, j0, j1


def _face_distance(fx, fy, X, Y):
    """Squared distance from points to the triangle plus per-edge data."""
    segs = [
        _seg_dist2(X, Y, fx[0], fy[0], fx[1], fy[1]),
        _seg_dist2(X, Y, fx[1], fy[1], fx[2], fy[2]),
        _seg_dist2(X, Y, fx[2], fy[2], fx[0], fy[0]),
    ]
    d2 = np.stack([s[0] for s in segs])
    which = np.argmin(d2, axis=0)
    best = np.take_along_axis(d2, which[None], axis=0)[0]
    area = (fx[1] - fx[0]) * (fy[2] - fy[0]) - (fy[1] - fy[0]) * (fx[2] - fx[0])
    e0 = (fx[1] - fx[0]) * (Y - fy[0]) - (fy[1] - fy[0]) * (X - fx[0])
    e1 = (fx[2] - fx[1]) * (Y - fy[1]) - (fy[2] - fy[1]) * (X - fx[1])
    e2 = (fx[0] - fx[2]) * (Y - fy[2]) - (fy[0] - fy[2]) * (X - fx[2])
    sgn = 1.0 if area >= 0.0 else -1.0
    inside = (sgn * e0 >= 0.0) & (sgn * e1 >= 0.0) & (sgn * e2 >= 0.0) & (area != 0.0)
    best = np.where(inside, 0.0, best)
    return best, which, segs, inside


def soft_mask_forward(nx, ny, valid, sx, sy, covered, sigma):
    """Accumulated ``log(prod(1 - exp(-d^2/sigma)))`` per uncovered pixel."""
    covered = np.asarray(covered).astype(bool)
    h, w = covered.shape
    logp = np.zeros((h, w))
    reach = np.sqrt(SOFT_CUTOFF * sigma)
    for f in range(nx.shape[0]):
        if not valid[f]:
            continue
        i0, i1, j0, j1 = _face_region(nx[f], ny[f], sx, sy, reach)
        if i0 >= i1 or j0 >= j1:
            continue
        X, Y = np.meshgrid(sx[i0:i1], sy[j0:j1])
        d2, _, _, _ = _face_distance(nx[f], ny[f], X, Y)
        x = d2 / sigma
        use = (x < SOFT_CUTOFF) & ~covered[j0:j1, i0:i1]
        term = np.log(np.maximum(-np.expm1(-np.where(use, x, 1.0)), 1e-300))
        logp[j0:j1, i0:i1] += np.where(use, term, 0.0)
    return logp


def soft_mask_backward(nx, ny, valid, sx, sy, covered, sigma, prob_out, g_mask):
    """Adjoint of the soft mask w.r.t. the NDC vertex coordinates.

    ``prob_out`` is ``1 - soft_mask`` from the forward pass. Returns
    ``(g_nx, g_ny)`` shaped like ``nx``.
    """
    covered = np.asarray(covered).astype(bool)
    g_nx = np.zeros_like(nx)
    g_ny = np.zeros_like(ny)
    reach = np.sqrt(SOFT_CUTOFF * sigma)
    for f in range(nx.shape[0]):
        if not valid[f]:
            continue
        i0, i1, j0, j1 = _face_region(nx[f], ny[f], sx, sy, reach)
        if i0 >= i1 or j0 >= j1:
            continue
        X, Y = np.meshgrid(sx[i0:i1], sy[j0:j1])
        d2, which, segs, inside = _face_distance(nx[f], ny[f], X, Y)
        x = d2 / sigma
        use = (x < SOFT_CUTOFF) & ~covered[j0:j1, i0:i1] & ~inside
        if not use.any():
            continue
        xs = np.where(use, x, 1.0)
        e = np.exp(-xs)
        one_m_e = np.maximum(-np.expm1(-xs), 1e-300)
        # d(mask)/d(d^2) = -P * (e / sigma) / (1 - e)
        g_d2 = np.where(use, -g_mask[j0:j1, i0:i1] * prob_out[j0:j1, i0:i1] * (e / sigma) / one_m_e, 0.0)
        for k in range(3):
            sel = use & (which == k)
            if not sel.any():
                continue
            _, t, dx, dy = segs[k]
            g = g_d2[sel]
            ga = -2.0 * g * (1.0 - t[sel])
            gb = -2.0 * g * t[sel]
            a_, b_ = k, (k + 1) % 3
            g_nx[f, a_] += np.sum(ga * dx[sel])
            g_ny[f, a_] += np.sum(ga * dy[sel])
            g_nx[f, b_] += np.sum(gb * dx[sel])
            g_ny[f, b_] += np.sum(gb * dy[sel])
    return g_nx, g_ny


def mc_shade(n, wo, a_eval, s, beta, m, n_samp, wo_samp, a_samp, s_samp, beta_samp, m_samp, env, seed,
             stream, nsamples):
    """Monte Carlo estimate of reflected radiance for a block of points.

    Directions and their pdf come from the sampling frame and parameters
    (``*_samp``); the BRDF and cosine use the evaluation ones. Both sets
    coincide during ordinary rendering.
    """
    from . import brdf

    keys = mk.stream_keys(seed, stream)[:, None]
    draws = np.arange(nsamples)[None, :] * 3
    u1 = mk.uniform_from_keys(keys, draws)
    u2 = mk.uniform_from_keys(keys, draws + 1)
    u3 = mk.uniform_from_keys(keys, draws + 2)
    wi, pdf = brdf.sample_arrays(a_samp[:, None, :], s_samp, beta_samp, m_samp, n_samp[:, None, :],
                                 wo_samp[:, None, :], u1, u2, u3)
    nn, ww = n[:, None, :], wo[:, None, :]
    f = brdf.eval_arrays(a_eval[:, None, :], s, beta, m, nn, wi, ww)
    u, v = mk.dir_to_equirect(wi)
    idx, wts, _, _ = mk.bilinear_taps(env.shape[1], env.shape[0], u, v)
    li = mk.bilinear_gather(env, idx, wts)
    cos = np.maximum(mk.dot(nn, wi), 0.0)
    ok = pdf > 0.0
    weight = np.where(ok, cos / np.where(ok, pdf, 1.0), 0.0)
    return (f * li * weight[..., None]).sum(axis=1) / nsamples
