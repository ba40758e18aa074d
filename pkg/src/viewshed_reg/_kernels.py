"""Compiled inner loops for the voxel-grid renderer and its pose gradient.

Everything here works on plain arrays so it can be jitted. Per-ray outputs
are written to preallocated slots and reduced afterwards in numpy, which
keeps results independent of the thread schedule.
"""

import math

import numpy as np
from numba import njit, prange

_MASK64 = 0xFFFFFFFFFFFFFFFF


@njit(cache=True, inline="always")
def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(_MASK64)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(_MASK64)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(_MASK64)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def hash_uniform(seed, ray_id, k):
    """Counter-based uniform in [0, 1) keyed by (seed, ray, sample)."""
    h = _splitmix(np.uint64(seed))
    h = _splitmix(h ^ np.uint64(ray_id))
    h = _splitmix(h ^ np.uint64(k))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def sample_times(t_near, t_far, n_samples, seed, ray_id, jitter, out_t, out_dt):
    width = (t_far - t_near) / n_samples
    for i in range(n_samples):
        u = hash_uniform(seed, ray_id, i) if jitter else 0.5
        out_t[i] = t_near + (i + u) * width
    for i in range(n_samples - 1):
        out_dt[i] = out_t[i + 1] - out_t[i]
    out_dt[n_samples - 1] = t_far - out_t[n_samples - 1]


@njit(cache=True, inline="always")
def _axis_coord(x, lo, inv_h, n):
    # returns (i0, frac, inside_interp) with edge replication beyond outer centers
    u = (x - lo) * inv_h - 0.5
    if u <= 0.0:
        return 0, 0.0, False
    if u >= n - 1:
        return n - 2, 1.0, False
    i0 = int(math.floor(u))
    if i0 > n - 2:
        i0 = n - 2
    return i0, u - i0, True


@njit(cache=True)
def trilinear(density, color, lo, hi, inv_h, x, y, z, grad, out):
    """Interpolate (sigma, r, g, b) at a point; optional spatial gradients.

    ``out`` receives 4 values; when ``grad`` is true ``out[4:16]`` receives the
    gradient rows d(sigma, r, g, b)/d(x, y, z). Points outside the bounds
    return zero density, zero colour and zero gradient (the caller supplies
    the background colour).
    """
    for k in range(out.shape[0]):
        out[k] = 0.0
    if x < lo[0] or y < lo[1] or z < lo[2] or x > hi[0] or y > hi[1] or z > hi[2]:
        return False
    nx, ny, nz = density.shape
    i0, fx, gx_ok = _axis_coord(x, lo[0], inv_h[0], nx)
    j0, fy, gy_ok = _axis_coord(y, lo[1], inv_h[1], ny)
    k0, fz, gz_ok = _axis_coord(z, lo[2], inv_h[2], nz)
    for di in range(2):
        wx = fx if di else 1.0 - fx
        dwx = 1.0 if di else -1.0
        for dj in range(2):
            wy = fy if dj else 1.0 - fy
            dwy = 1.0 if dj else -1.0
            for dk in range(2):
                wz = fz if dk else 1.0 - fz
                dwz = 1.0 if dk else -1.0
                w = wx * wy * wz
                ii, jj, kk = i0 + di, j0 + dj, k0 + dk
                s = density[ii, jj, kk]
                r = color[ii, jj, kk, 0]
                g = color[ii, jj, kk, 1]
                b = color[ii, jj, kk, 2]
                out[0] += w * s
                out[1] += w * r
                out[2] += w * g
                out[3] += w * b
                if grad:
                    ddx = dwx * wy * wz * inv_h[0] if gx_ok else 0.0
                    ddy = wx * dwy * wz * inv_h[1] if gy_ok else 0.0
                    ddz = wx * wy * dwz * inv_h[2] if gz_ok else 0.0
                    out[4] += ddx * s
                    out[5] += ddy * s
                    out[6] += ddz * s
                    out[7] += ddx * r
                    out[8] += ddy * r
                    out[9] += ddz * r
                    out[10] += ddx * g
                    out[11] += ddy * g
                    out[12] += ddz * g
                    out[13] += ddx * b
                    out[14] += ddy * b
                    out[15] += ddz * b
    return True


@njit(cache=True, parallel=True)
def render_rays(
    density, color, lo, hi, inv_h, background,
    origins, dirs, t_near, t_far, ray_ids, seed, n_samples, jitter,
    opacity_floor, out_rgb, out_depth, out_opacity, out_weights,
):
    """Emission-absorption quadrature with median-weight depth per ray.

    ``out_weights`` may have zero rows, in which case weights are not stored.
    Depth is NaN where opacity falls below ``opacity_floor`` or the ray
    interval is empty.
    """
    n = origins.shape[0]
    keep_w = out_weights.shape[0] == n
    for r in prange(n):
        ts = np.empty(n_samples)
        dts = np.empty(n_samples)
        ws = np.empty(n_samples)
        buf = np.empty(4)
        acc = np.zeros(3)
        if not (t_far[r] > t_near[r]):
            out_rgb[r, 0] = background[0]
            out_rgb[r, 1] = background[1]
            out_rgb[r, 2] = background[2]
            out_opacity[r] = 0.0
            out_depth[r] = np.nan
            if keep_w:
                for i in range(n_samples):
                    out_weights[r, i] = 0.0
            continue
        sample_times(t_near[r], t_far[r], n_samples, seed, ray_ids[r], jitter, ts, dts)
        trans = 1.0
        opacity = 0.0
        for i in range(n_samples):
            px = origins[r, 0] + ts[i] * dirs[r, 0]
            py = origins[r, 1] + ts[i] * dirs[r, 1]
            pz = origins[r, 2] + ts[i] * dirs[r, 2]
            trilinear(density, color, lo, hi, inv_h, px, py, pz, False, buf)
            sig = buf[0] if buf[0] > 0.0 else 0.0
            alpha = 1.0 - math.exp(-sig * dts[i])
            w = trans * alpha
            ws[i] = w
            opacity += w
            acc[0] += w * buf[1]
            acc[1] += w * buf[2]
            acc[2] += w * buf[3]
            trans *= 1.0 - alpha
        for c in range(3):
            out_rgb[r, c] = acc[c] + (1.0 - opacity) * background[c]
        out_opacity[r] = opacity
        if keep_w:
            for i in range(n_samples):
                out_weights[r, i] = ws[i]
        if opacity < opacity_floor or opacity <= 0.0:
            out_depth[r] = np.nan
        else:
            half = 0.5 * opacity
            run = 0.0
            d = ts[n_samples - 1]
            for i in range(n_samples):
                run += ws[i]
                if run >= half:
                    d = ts[i]
                    break
            out_depth[r] = d


@njit(cache=True, parallel=True)
def photometric_terms(
    density, color, lo, hi, inv_h, background,
    rot, trans_vec, scale,
    origins, dirs, t_near, t_far, ray_ids, seeds, n_samples, jitter,
    targets, want_grad, out_rgb, out_sqerr, out_grad,
):
    """Render source rays mapped by ``x -> scale*rot@x + trans_vec`` and score them.

    Stratification is keyed per ray by ``(seeds[r], ray_ids[r])``.
    Writes the rendered colour, the per-ray summed squared error and, when
    ``want_grad``, the per-ray gradient of that squared error with respect
    to a left perturbation ``(omega, v, log_scale)`` of the transform.
    """
    n = origins.shape[0]
    for r in prange(n):
        ts = np.empty(n_samples)
        dts = np.empty(n_samples)
        ys = np.empty((n_samples, 3))
        vals = np.empty((n_samples, 16))
        taus = np.empty(n_samples)
        ws = np.empty(n_samples)
        tnext = np.empty(n_samples)
        buf = np.empty(16)
        for k in range(7):
            out_grad[r, k] = 0.0
        if not (t_far[r] > t_near[r]):
            for c in range(3):
                out_rgb[r, c] = background[c]
            e = 0.0
            for c in range(3):
                e += (background[c] - targets[r, c]) ** 2
            out_sqerr[r] = e
            continue
        sample_times(t_near[r], t_far[r], n_samples, seeds[r], ray_ids[r], jitter, ts, dts)
        tr = 1.0
        opacity = 0.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for i in range(n_samples):
            px = origins[r, 0] + ts[i] * dirs[r, 0]
            py = origins[r, 1] + ts[i] * dirs[r, 1]
            pz = origins[r, 2] + ts[i] * dirs[r, 2]
            qx = scale * (rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz) + trans_vec[0]
            qy = scale * (rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz) + trans_vec[1]
            qz = scale * (rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz) + trans_vec[2]
            ys[i, 0] = qx
            ys[i, 1] = qy
            ys[i, 2] = qz
            trilinear(density, color, lo, hi, inv_h, qx, qy, qz, want_grad, buf)
            for k in range(16):
                vals[i, k] = buf[k]
            sig = buf[0] if buf[0] > 0.0 else 0.0
            if buf[0] <= 0.0:
                for k in range(4, 7):
                    vals[i, k] = 0.0
            tau = sig * dts[i] * scale
            taus[i] = tau
            a = 1.0 - math.exp(-tau)
            w = tr * a
            ws[i] = w
            tr = tr * (1.0 - a)
            tnext[i] = tr
            opacity += w
            acc0 += w * buf[1]
            acc1 += w * buf[2]
            acc2 += w * buf[3]
        c0 = acc0 + (1.0 - opacity) * background[0]
        c1 = acc1 + (1.0 - opacity) * background[1]
        c2 = acc2 + (1.0 - opacity) * background[2]
        out_rgb[r, 0] = c0
        out_rgb[r, 1] = c1
        out_rgb[r, 2] = c2
        e0 = c0 - targets[r, 0]
        e1 = c1 - targets[r, 1]
        e2 = c2 - targets[r, 2]
        out_sqerr[r] = e0 * e0 + e1 * e1 + e2 * e2
        if not want_grad:
            continue
        g0 = 2.0 * e0
        g1 = 2.0 * e1
        g2 = 2.0 * e2
        # suffix sums S_k = sum_{i>k} w_i (c_i - bg)
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for i in range(n_samples - 1, -1, -1):
            cr = vals[i, 1] - background[0]
            cg = vals[i, 2] - background[1]
            cb = vals[i, 3] - background[2]
            # dC/dtau_i = T_{i+1} (c_i - bg) - S_i
            dcr = tnext[i] * cr - s0
            dcg = tnext[i] * cg - s1
            dcb = tnext[i] * cb - s2
            gtau = g0 * dcr + g1 * dcg + g2 * dcb
            w = ws[i]
            coef_sig = gtau * dts[i] * scale
            G0 = coef_sig * vals[i, 4] + w * (g0 * vals[i, 7] + g1 * vals[i, 10] + g2 * vals[i, 13])
            G1 = coef_sig * vals[i, 5] + w * (g0 * vals[i, 8] + g1 * vals[i, 11] + g2 * vals[i, 14])
            G2 = coef_sig * vals[i, 6] + w * (g0 * vals[i, 9] + g1 * vals[i, 12] + g2 * vals[i, 15])
            y0 = ys[i, 0]
            y1 = ys[i, 1]
            y2 = ys[i, 2]
            out_grad[r, 0] += y1 * G2 - y2 * G1
            out_grad[r, 1] += y2 * G0 - y0 * G2
            out_grad[r, 2] += y0 * G1 - y1 * G0
            out_grad[r, 3] += G0
            out_grad[r, 4] += G1
            out_grad[r, 5] += G2
            out_grad[r, 6] += y0 * G0 + y1 * G1 + y2 * G2 + gtau * taus[i]
            s0 += w * cr
            s1 += w * cg
            s2 += w * cb
