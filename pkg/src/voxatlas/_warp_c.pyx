# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled warp kernels. Mirrors ``_warp_py``; voxels are visited in a fixed order."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


cdef inline void _basis(double t, double* w, double* dw) noexcept nogil:
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    cdef double s = 1.0 - t
    w[0] = s * s * s / 6.0
    w[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[3] = t3 / 6.0
    dw[0] = -3.0 * s * s / 6.0
    dw[1] = (9.0 * t2 - 12.0 * t) / 6.0
    dw[2] = (-9.0 * t2 + 6.0 * t + 3.0) / 6.0
    dw[3] = 3.0 * t2 / 6.0


cdef struct Lattice:
    Py_ssize_t cell[3]
    Py_ssize_t idx[3][4]
    double w[3][4]
    double dw[3][4]


cdef inline void _lattice(double* q, double* delta, Py_ssize_t* gdim, Lattice* lat) noexcept nogil:
    # taps outside the control lattice get zero weight (zero-padded lattice)
    cdef int a, m
    cdef double u
    cdef Py_ssize_t idx
    for a in range(3):
        u = q[a] / delta[a] + 1.0
        lat.cell[a] = <Py_ssize_t>floor(u)
        _basis(u - lat.cell[a], lat.w[a], lat.dw[a])
        for m in range(4):
            idx = lat.cell[a] + m - 1
            if idx < 0 or idx >= gdim[a]:
                lat.w[a][m] = 0.0
                lat.dw[a][m] = 0.0
                lat.idx[a][m] = 0
            else:
                lat.idx[a][m] = idx


cdef struct Corners:
    Py_ssize_t i0[3]
    Py_ssize_t i1[3]
    double f[3]
    double g[3]
    bint moves[3]


cdef inline void _corners(double* r, Py_ssize_t* n, Corners* cn) noexcept nogil:
    cdef double c
    cdef int a
    for a in range(3):
        c = r[a]
        cn.moves[a] = 1
        if c < 0.0:
            c = 0.0
            cn.moves[a] = 0
        if c > <double>(n[a] - 1):
            c = <double>(n[a] - 1)
            cn.moves[a] = 0
        cn.i0[a] = <Py_ssize_t>floor(c)
        if cn.i0[a] > n[a] - 2:
            cn.i0[a] = n[a] - 2 if n[a] >= 2 else 0
        cn.i1[a] = cn.i0[a] + 1 if cn.i0[a] + 1 < n[a] else n[a] - 1
        cn.f[a] = c - cn.i0[a]
        cn.g[a] = 1.0 - cn.f[a]


cdef inline double _trilinear(const double[:, :, :, ::1] vol, Py_ssize_t ch, Corners* cn,
                              double* grad) noexcept nogil:
    cdef double* f = cn.f
    cdef double* g = cn.g
    cdef double v000 = vol[ch, cn.i0[0], cn.i0[1], cn.i0[2]]
    cdef double v100 = vol[ch, cn.i1[0], cn.i0[1], cn.i0[2]]
    cdef double v010 = vol[ch, cn.i0[0], cn.i1[1], cn.i0[2]]
    cdef double v110 = vol[ch, cn.i1[0], cn.i1[1], cn.i0[2]]
    cdef double v001 = vol[ch, cn.i0[0], cn.i0[1], cn.i1[2]]
    cdef double v101 = vol[ch, cn.i1[0], cn.i0[1], cn.i1[2]]
    cdef double v011 = vol[ch, cn.i0[0], cn.i1[1], cn.i1[2]]
    cdef double v111 = vol[ch, cn.i1[0], cn.i1[1], cn.i1[2]]
    cdef int a
    if grad != NULL:
        grad[0] = (g[1] * g[2] * (v100 - v000) + f[1] * g[2] * (v110 - v010)
                   + g[1] * f[2] * (v101 - v001) + f[1] * f[2] * (v111 - v011))
        grad[1] = (g[0] * g[2] * (v010 - v000) + f[0] * g[2] * (v110 - v100)
                   + g[0] * f[2] * (v011 - v001) + f[0] * f[2] * (v111 - v101))
        grad[2] = (g[0] * g[1] * (v001 - v000) + f[0] * g[1] * (v101 - v100)
                   + g[0] * f[1] * (v011 - v010) + f[0] * f[1] * (v111 - v110))
        for a in range(3):
            if not cn.moves[a]:
                grad[a] = 0.0
    return (g[0] * g[1] * g[2] * v000 + f[0] * g[1] * g[2] * v100
            + g[0] * f[1] * g[2] * v010 + f[0] * f[1] * g[2] * v110
            + g[0] * g[1] * f[2] * v001 + f[0] * g[1] * f[2] * v101
            + g[0] * f[1] * f[2] * v011 + f[0] * f[1] * f[2] * v111)


cdef inline Py_ssize_t _round_clamp(double v, Py_ssize_t n) noexcept nogil:
    cdef double rv = floor(fabs(v) + 0.5)
    if v < 0:
        rv = -rv
    if rv < 0:
        return 0
    if rv > n - 1:
        return n - 1
    return <Py_ssize_t>rv


cdef void _setup(tuple out_dims, tuple grid_dims, double* delta, Py_ssize_t* gdim):
    cdef int a
    for a in range(3):
        n = out_dims[a]
        delta[a] = (n - 1.0) / (grid_dims[a] - 3.0) if n > 1 else 1.0
        gdim[a] = grid_dims[a]


def _as4d(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a[None] if a.ndim == 3 else a


def warp_forward(vol, theta, phi, out_dims, nearest=False):
    """Warp a (X, Y, Z) volume or a (C, X, Y, Z) stack sharing one deformation."""
    squeeze = np.ndim(vol) == 3
    cdef const double[:, :, :, ::1] v = _as4d(vol)
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, :, :, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    dims = tuple(int(n) for n in out_dims)
    cdef Py_ssize_t nch = v.shape[0]
    out_arr = np.empty((nch,) + dims, dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double delta[3]
    cdef Py_ssize_t gdim[3]
    cdef Py_ssize_t vn[3]
    _setup(dims, tuple(phi.shape[:3]), delta, gdim)
    vn[0] = v.shape[1]
    vn[1] = v.shape[2]
    vn[2] = v.shape[3]
    cdef bint near = bool(nearest)
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t i, j, k, a, b, c, comp, ix, iy, iz, ch, ri, rj, rk
    cdef double p[3]
    cdef double q[3]
    cdef double r[3]
    cdef double wabc
    cdef Lattice lat
    cdef Corners cn
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    p[0] = i
                    p[1] = j
                    p[2] = k
                    for comp in range(3):
                        q[comp] = (th[3 * comp] * p[0] + th[3 * comp + 1] * p[1]
                                   + th[3 * comp + 2] * p[2] + th[9 + comp])
                        r[comp] = q[comp]
                    _lattice(q, delta, gdim, &lat)
                    for a in range(4):
                        ix = lat.idx[0][a]
                        for b in range(4):
                            iy = lat.idx[1][b]
                            for c in range(4):
                                iz = lat.idx[2][c]
                                wabc = lat.w[0][a] * lat.w[1][b] * lat.w[2][c]
                                if wabc == 0.0:
                                    continue
                                for comp in range(3):
                                    r[comp] += wabc * ph[ix, iy, iz, comp]
                    if near:
                        ri = _round_clamp(r[0], vn[0])
                        rj = _round_clamp(r[1], vn[1])
                        rk = _round_clamp(r[2], vn[2])
                        for ch in range(nch):
                            out[ch, i, j, k] = v[ch, ri, rj, rk]
                    else:
                        _corners(r, vn, &cn)
                        for ch in range(nch):
                            out[ch, i, j, k] = _trilinear(v, ch, &cn, NULL)
    return out_arr[0] if squeeze else out_arr


def warp_vjp(vol, theta, phi, out_dims, upstream):
    """Gradient of sum(upstream * warp(vol)) w.r.t. (theta, phi); channels are summed."""
    cdef const double[:, :, :, ::1] v = _as4d(vol)
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, :, :, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    dims = tuple(int(n) for n in out_dims)
    cdef Py_ssize_t nch = v.shape[0]
    cdef const double[:, :, :, ::1] up = np.ascontiguousarray(
        np.asarray(upstream, dtype=np.float64).reshape((nch,) + dims))
    dtheta_arr = np.zeros(12, dtype=np.float64)
    dphi_arr = np.zeros(phi.shape, dtype=np.float64)
    cdef double[::1] dth = dtheta_arr
    cdef double[:, :, :, ::1] dph = dphi_arr
    cdef double delta[3]
    cdef Py_ssize_t gdim[3]
    cdef Py_ssize_t vn[3]
    _setup(dims, tuple(phi.shape[:3]), delta, gdim)
    vn[0] = v.shape[1]
    vn[1] = v.shape[2]
    vn[2] = v.shape[3]
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t i, j, k, a, b, c, comp, col, ix, iy, iz, ch
    cdef double p[3]
    cdef double q[3]
    cdef double r[3]
    cdef double grad[3]
    cdef double gr[3]
    cdef double gq[3]
    cdef double jac[3][3]
    cdef double dbasis[3]
    cdef double wabc, u, ctrl
    cdef bint any_up
    cdef Lattice lat
    cdef Corners cn
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    any_up = 0
                    for ch in range(nch):
                        if up[ch, i, j, k] != 0.0:
                            any_up = 1
                    if not any_up:
                        continue
                    p[0] = i
                    p[1] = j
                    p[2] = k
                    for comp in range(3):
                        q[comp] = (th[3 * comp] * p[0] + th[3 * comp + 1] * p[1]
                                   + th[3 * comp + 2] * p[2] + th[9 + comp])
                        r[comp] = q[comp]
                        for col in range(3):
                            jac[comp][col] = 0.0
                    _lattice(q, delta, gdim, &lat)
                    for a in range(4):
                        ix = lat.idx[0][a]
                        for b in range(4):
                            iy = lat.idx[1][b]
                            for c in range(4):
                                iz = lat.idx[2][c]
                                dbasis[0] = lat.dw[0][a] * lat.w[1][b] * lat.w[2][c] / delta[0]
                                dbasis[1] = lat.w[0][a] * lat.dw[1][b] * lat.w[2][c] / delta[1]
                                dbasis[2] = lat.w[0][a] * lat.w[1][b] * lat.dw[2][c] / delta[2]
                                wabc = lat.w[0][a] * lat.w[1][b] * lat.w[2][c]
                                for comp in range(3):
                                    ctrl = ph[ix, iy, iz, comp]
                                    r[comp] += wabc * ctrl
                                    for col in range(3):
                                        jac[comp][col] += ctrl * dbasis[col]
                    _corners(r, vn, &cn)
                    gr[0] = 0.0
                    gr[1] = 0.0
                    gr[2] = 0.0
                    for ch in range(nch):
                        u = up[ch, i, j, k]
                        if u == 0.0:
                            continue
                        _trilinear(v, ch, &cn, grad)
                        for comp in range(3):
                            gr[comp] += u * grad[comp]
                    if gr[0] == 0.0 and gr[1] == 0.0 and gr[2] == 0.0:
                        continue
                    for a in range(4):
                        ix = lat.idx[0][a]
                        for b in range(4):
                            iy = lat.idx[1][b]
                            for c in range(4):
                                iz = lat.idx[2][c]
                                wabc = lat.w[0][a] * lat.w[1][b] * lat.w[2][c]
                                if wabc == 0.0:
                                    continue
                                for comp in range(3):
                                    dph[ix, iy, iz, comp] += wabc * gr[comp]
                    for col in range(3):
                        gq[col] = gr[col]
                        for comp in range(3):
                            gq[col] += gr[comp] * jac[comp][col]
                    for comp in range(3):
                        dth[3 * comp] += gq[comp] * p[0]
                        dth[3 * comp + 1] += gq[comp] * p[1]
                        dth[3 * comp + 2] += gq[comp] * p[2]
                        dth[9 + comp] += gq[comp]
    return dtheta_arr, dphi_arr


cdef inline void _anchor(double a, double b, Py_ssize_t bins, Py_ssize_t m, double* w, double* dw,
                         Py_ssize_t* k, Py_ssize_t* l0, double* f, bint* inside) noexcept nogil:
    cdef double scale = bins - 1
    cdef double ua = a * scale
    cdef double cell = floor(ua)
    cdef double raw, v
    cdef Py_ssize_t kk, top0
    _basis(ua - cell, w, dw)
    top0 = bins - 2 if bins >= 2 else 0
    kk = <Py_ssize_t>cell + m - 1
    if kk < 0:
        kk = 0
    if kk > bins - 1:
        kk = bins - 1
    raw = kk + (b - a) * scale
    inside[0] = raw > 0 and raw < scale
    v = raw
    if v < 0:
        v = 0
    if v > scale:
        v = scale
    l0[0] = <Py_ssize_t>floor(v)
    if l0[0] > top0:
        l0[0] = top0
    f[0] = v - l0[0]
    k[0] = kk


def joint_hist(x, g, bins):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t nb = bins
    hist_arr = np.zeros((nb, nb), dtype=np.float64)
    cdef double[:, ::1] h = hist_arr
    cdef Py_ssize_t i, m, k, l0
    cdef double w[4]
    cdef double dw[4]
    cdef double f
    cdef bint inside
    with nogil:
        for i in range(xv.shape[0]):
            for m in range(4):
                _anchor(xv[i], gv[i], nb, m, w, dw, &k, &l0, &f, &inside)
                h[k, l0] += w[m] * (1.0 - f)
                h[k, l0 + 1] += w[m] * f
            for m in range(4):
                _anchor(gv[i], xv[i], nb, m, w, dw, &k, &l0, &f, &inside)
                h[l0, k] += w[m] * (1.0 - f)
                h[l0 + 1, k] += w[m] * f
    return hist_arr


def joint_hist_vjp(x, g, dhist, bins):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dhist, dtype=np.float64)
    cdef Py_ssize_t nb = bins
    out_arr = np.zeros(xv.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, m, k, l0
    cdef double w[4]
    cdef double dw[4]
    cdef double f, lo, hi, acc
    cdef double scale = nb - 1
    cdef bint inside
    with nogil:
        for i in range(xv.shape[0]):
            acc = 0.0
            for m in range(4):
                _anchor(xv[i], gv[i], nb, m, w, dw, &k, &l0, &f, &inside)
                if inside:
                    acc += w[m] * (d[k, l0 + 1] - d[k, l0])
            for m in range(4):
                _anchor(gv[i], xv[i], nb, m, w, dw, &k, &l0, &f, &inside)
                lo = d[l0, k]
                hi = d[l0 + 1, k]
                acc += dw[m] * (lo * (1.0 - f) + hi * f)
                if inside:
                    acc -= w[m] * (hi - lo)
            out[i] = acc * scale
    return out_arr
