"""Pure-numpy kernels (warp and NMI histogram). Same signatures as the compiled ``_warp_c`` module."""

import numpy as np


def bspline_weights(t):
    """Cubic B-spline blending weights and their derivatives, stacked on the last axis."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    s = 1.0 - t
    w = np.stack([s * s * s, 3 * t3 - 6 * t2 + 4, -3 * t3 + 3 * t2 + 3 * t + 1, t3], axis=-1) / 6.0
    dw = np.stack([-3 * s * s, 9 * t2 - 12 * t, -9 * t2 + 6 * t + 3, 3 * t2], axis=-1) / 6.0
    return w, dw


def grid_spacing(out_dims, grid_dims):
    return np.array(
        [(n - 1) / (g - 3) if n > 1 else 1.0 for n, g in zip(out_dims, grid_dims)], dtype=np.float64
    )


def _lattice(q, out_dims, grid_dims):
    delta = grid_spacing(out_dims, grid_dims)
    u = q / delta + 1.0
    cell = np.floor(u).astype(np.int64)
    return cell, u - cell, delta


def _taps(cell, frac, grid_dims):
    """Per-axis control indices and weights; taps outside the lattice get weight zero."""
    taps = []
    for axis in range(3):
        w, dw = bspline_weights(frac[:, axis])
        idx = cell[:, axis, None] + np.arange(-1, 3)
        inside = (idx >= 0) & (idx < grid_dims[axis])
        taps.append((np.clip(idx, 0, grid_dims[axis] - 1), w * inside, dw * inside))
    return taps


def ffd_eval(q, phi, out_dims, with_jacobian=False):
    """Displacement (and optionally d disp/dq) at points ``q`` of shape (N, 3)."""
    q = np.asarray(q, dtype=np.float64)
    grid_dims = phi.shape[:3]
    cell, frac, delta = _lattice(q, out_dims, grid_dims)
    (tx, wx, dwx), (ty, wy, dwy), (tz, wz, dwz) = _taps(cell, frac, grid_dims)
    disp = np.zeros_like(q)
    jac = np.zeros(q.shape + (3,)) if with_jacobian else None
    for a in range(4):
        ix = tx[:, a]
        for b in range(4):
            iy = ty[:, b]
            wab = wx[:, a] * wy[:, b]
            for c in range(4):
                iz = tz[:, c]
                ctrl = phi[ix, iy, iz]
                disp += (wab * wz[:, c])[:, None] * ctrl
                if with_jacobian:
                    gx = dwx[:, a] * wy[:, b] * wz[:, c] / delta[0]
                    gy = wx[:, a] * dwy[:, b] * wz[:, c] / delta[1]
                    gz = wab * dwz[:, c] / delta[2]
                    jac += ctrl[:, :, None] * np.stack([gx, gy, gz], axis=-1)[:, None, :]
    return disp, jac


def voxel_grid(out_dims):
    axes = [np.arange(n, dtype=np.float64) for n in out_dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def map_points(p, theta, phi, out_dims):
    p = np.asarray(p, dtype=np.float64)
    q = p @ theta[:9].reshape(3, 3).T + theta[9:12]
    disp, _ = ffd_eval(q, phi, out_dims)
    return q + disp


def _trilinear(vol, r, need_grad):
    dims = np.array(vol.shape)
    c = np.clip(r, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
    i1 = np.minimum(i0 + 1, dims - 1)
    f = c - i0
    g = 1.0 - f
    v = {}
    for a in (0, 1):
        xa = i1[:, 0] if a else i0[:, 0]
        for b in (0, 1):
            yb = i1[:, 1] if b else i0[:, 1]
            for cc in (0, 1):
                zc = i1[:, 2] if cc else i0[:, 2]
                v[a, b, cc] = vol[xa, yb, zc]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    val = (
        gx * gy * gz * v[0, 0, 0] + fx * gy * gz * v[1, 0, 0]
        + gx * fy * gz * v[0, 1, 0] + fx * fy * gz * v[1, 1, 0]
        + gx * gy * fz * v[0, 0, 1] + fx * gy * fz * v[1, 0, 1]
        + gx * fy * fz * v[0, 1, 1] + fx * fy * fz * v[1, 1, 1]
    )
    if not need_grad:
        return val, None
    dx = (gy * gz * (v[1, 0, 0] - v[0, 0, 0]) + fy * gz * (v[1, 1, 0] - v[0, 1, 0])
          + gy * fz * (v[1, 0, 1] - v[0, 0, 1]) + fy * fz * (v[1, 1, 1] - v[0, 1, 1]))
    dy = (gx * gz * (v[0, 1, 0] - v[0, 0, 0]) + fx * gz * (v[1, 1, 0] - v[1, 0, 0])
          + gx * fz * (v[0, 1, 1] - v[0, 0, 1]) + fx * fz * (v[1, 1, 1] - v[1, 0, 1]))
    dz = (gx * gy * (v[0, 0, 1] - v[0, 0, 0]) + fx * gy * (v[1, 0, 1] - v[1, 0, 0])
          + gx * fy * (v[0, 1, 1] - v[0, 1, 0]) + fx * fy * (v[1, 1, 1] - v[1, 1, 0]))
    grad = np.stack([dx, dy, dz], axis=-1)
    # clamped coordinates do not move the sample
    grad[(r < 0) | (r > dims - 1)] = 0.0
    return val, grad


def _nearest(vol, r):
    dims = np.array(vol.shape)
    idx = np.sign(r) * np.floor(np.abs(r) + 0.5)
    idx = np.clip(idx, 0, dims - 1).astype(np.int64)
    return vol[idx[:, 0], idx[:, 1], idx[:, 2]]


def warp_forward(vol, theta, phi, out_dims, nearest=False):
    """Warp a (X, Y, Z) volume or a (C, X, Y, Z) stack sharing one deformation."""
    out_dims = tuple(int(n) for n in out_dims)
    r = map_points(voxel_grid(out_dims), theta, phi, out_dims)
    vol = np.asarray(vol, dtype=np.float64)
    stack = vol[None] if vol.ndim == 3 else vol
    outs = []
    for ch in stack:
        out = _nearest(ch, r) if nearest else _trilinear(ch, r, False)[0]
        outs.append(out.reshape(out_dims))
    return outs[0] if vol.ndim == 3 else np.stack(outs)


def warp_vjp(vol, theta, phi, out_dims, upstream):
    out_dims = tuple(int(n) for n in out_dims)
    p = voxel_grid(out_dims)
    q = p @ theta[:9].reshape(3, 3).T + theta[9:12]
    disp, jac = ffd_eval(q, phi, out_dims, with_jacobian=True)
    vol = np.asarray(vol, dtype=np.float64)
    stack = vol[None] if vol.ndim == 3 else vol
    ups = np.asarray(upstream, dtype=np.float64).reshape(len(stack), -1)
    g_r = np.zeros_like(q)
    for ch, up in zip(stack, ups):
        _, grad = _trilinear(ch, q + disp, True)
        g_r += grad * up[:, None]

    # dL/dphi: scatter g_r with the tensor-product weights
    grid_dims = phi.shape[:3]
    cell, frac, _ = _lattice(q, out_dims, grid_dims)
    (tx, wx, _), (ty, wy, _), (tz, wz, _) = _taps(cell, frac, grid_dims)
    gx, gy, gz = grid_dims
    dphi = np.zeros((gx * gy * gz, 3), dtype=np.float64)
    for a in range(4):
        ix = tx[:, a]
        for b in range(4):
            iy = ty[:, b]
            wab = wx[:, a] * wy[:, b]
            for c in range(4):
                iz = tz[:, c]
                flat = (ix * gy + iy) * gz + iz
                w = wab * wz[:, c]
                for comp in range(3):
                    dphi[:, comp] += np.bincount(
                        flat, weights=w * g_r[:, comp], minlength=gx * gy * gz
                    )

    g_q = g_r + np.einsum("ni,nij->nj", g_r, jac)
    dtheta = np.empty(12)
    dtheta[:9] = (g_q.T @ p).reshape(-1)
    dtheta[9:] = g_q.sum(axis=0)
    return dtheta, dphi.reshape(phi.shape)


def _anchored(a, b, bins):
    """Anchor taps on ``a`` with the partner ``b`` placed at ``k + (b - a)`` bins."""
    scale = bins - 1
    ua, ub = a * scale, b * scale
    cell = np.floor(ua)
    w, dw = bspline_weights(ua - cell)
    k = np.clip(cell[:, None].astype(np.int64) + np.arange(-1, 3), 0, bins - 1)
    raw = k + (ub - ua)[:, None]
    v = np.clip(raw, 0, scale)
    l0 = np.minimum(np.floor(v).astype(np.int64), max(bins - 2, 0))
    inside = (raw > 0) & (raw < scale)
    return k, w, dw, l0, v - l0, inside


def _scatter(k, w, l0, f, bins):
    flat0 = (k * bins + l0).ravel()
    hist = np.bincount(flat0, weights=(w * (1 - f)).ravel(), minlength=bins * bins)
    hist += np.bincount(flat0 + 1, weights=(w * f).ravel(), minlength=bins * bins)
    return hist.reshape(bins, bins)


def joint_hist(x, g, bins):
    """Unnormalised symmetric joint histogram of flat arrays in [0, 1]; rows index x."""
    kx, wx, _, lx, fx, _ = _anchored(x, g, bins)
    kg, wg, _, lg, fg, _ = _anchored(g, x, bins)
    return _scatter(kx, wx, lx, fx, bins) + _scatter(kg, wg, lg, fg, bins).T


def joint_hist_vjp(x, g, dhist, bins):
    """d sum(dhist * joint_hist(x, g)) / dg."""
    top = bins - 1
    kx, wx, _, lx, fx, inx = _anchored(x, g, bins)
    du = (wx * (dhist[kx, np.minimum(lx + 1, top)] - dhist[kx, lx]) * inx).sum(axis=1)
    d2 = dhist.T
    kg, wg, dwg, lg, fg, ing = _anchored(g, x, bins)
    hi = d2[kg, np.minimum(lg + 1, top)]
    lo = d2[kg, lg]
    du += (dwg * (lo * (1 - fg) + hi * fg) - wg * (hi - lo) * ing).sum(axis=1)
    return du * top
