# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; see ``_kernels_py`` for the reference.

Every function mirrors its numpy counterpart operation for operation. The
loops run without the GIL so tile- and block-level threads overlap.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport acos, atan2, ceil, cos, exp, expm1, fabs, floor, log, sin, sqrt

cnp.import_array()

BACKEND = "cython"
SOFT_CUTOFF = 40.0

ctypedef unsigned long long u64

cdef double PI = 3.141592653589793
cdef u64 GOLDEN = 0x9E3779B97F4A7C15ULL
cdef u64 M1 = 0xBF58476D1CE4E5B9ULL
cdef u64 M2 = 0x94D049BB133111EBULL
cdef double ONE_MINUS_ULP = 0.9999999999999999
cdef double BETA_MIN = 0.01
cdef double DIELECTRIC_F0 = 0.08


# --------------------------------------------------------------------------
# rasterization


def raster_tile(double[:, ::1] px, double[:, ::1] py, double[:, ::1] invz, const unsigned char[::1] valid,
                int x0, int x1, int y0, int y1, long long[:, ::1] tri_id, double[:, :, ::1] bary,
                double[:, ::1] depth):
    cdef Py_ssize_t nf = px.shape[0]
    cdef Py_ssize_t f
    cdef int i, j, i0, i1, j0, j1
    cdef double fx0, fx1, fx2, fy0, fy1, fy2, area, cx, cy, l0, l1, l2, q0, q1, q2, z
    with nogil:
        for f in range(nf):
            if not valid[f]:
                continue
            fx0 = px[f, 0]; fx1 = px[f, 1]; fx2 = px[f, 2]
            fy0 = py[f, 0]; fy1 = py[f, 1]; fy2 = py[f, 2]
            i0 = <int>ceil(min3(fx0, fx1, fx2) - 0.5)
            i1 = <int>floor(max3(fx0, fx1, fx2) - 0.5) + 1
            j0 = <int>ceil(min3(fy0, fy1, fy2) - 0.5)
            j1 = <int>floor(max3(fy0, fy1, fy2) - 0.5) + 1
            if i0 < x0:
                i0 = x0
            if i1 > x1:
                i1 = x1
            if j0 < y0:
                j0 = y0
            if j1 > y1:
                j1 = y1
            if i0 >= i1 or j0 >= j1:
                continue
            area = (fx1 - fx0) * (fy2 - fy0) - (fy1 - fy0) * (fx2 - fx0)
            if fabs(area) < 1e-18:
                continue
            for j in range(j0, j1):
                cy = j + 0.5
                for i in range(i0, i1):
                    cx = i + 0.5
                    l0 = ((fx2 - fx1) * (cy - fy1) - (fy2 - fy1) * (cx - fx1)) / area
                    l1 = ((fx0 - fx2) * (cy - fy2) - (fy0 - fy2) * (cx - fx2)) / area
                    l2 = 1.0 - l0 - l1
                    if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                        continue
                    q0 = l0 * invz[f, 0]
                    q1 = l1 * invz[f, 1]
                    q2 = l2 * invz[f, 2]
                    z = 1.0 / (q0 + q1 + q2)
                    if z < depth[j, i]:
                        depth[j, i] = z
                        tri_id[j, i] = f
                        bary[j, i, 0] = q0 * z
                        bary[j, i, 1] = q1 * z
                        bary[j, i, 2] = q2 * z


cdef inline double min3(double a, double b, double c) nogil:
    cdef double m = a
    if b < m:
        m = b
    if c < m:
        m = c
    return m


cdef inline double max3(double a, double b, double c) nogil:
    cdef double m = a
    if b > m:
        m = b
    if c > m:
        m = c
    return m


# --------------------------------------------------------------------------
# soft silhouette


cdef inline double seg_dist2(double px, double py, double ax, double ay, double bx, double by,
                             double* t_out, double* dx_out, double* dy_out) nogil:
    cdef double ex = bx - ax, ey = by - ay
    cdef double ll = ex * ex + ey * ey
    cdef double t
    if ll < 1e-300:
        ll = 1e-300
    t = ((px - ax) * ex + (py - ay) * ey) / ll
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    dx_out[0] = px - (ax + t * ex)
    dy_out[0] = py - (ay + t * ey)
    t_out[0] = t
    return dx_out[0] * dx_out[0] + dy_out[0] * dy_out[0]


cdef inline void face_region(double* fx, double* fy, const double[::1] sx, const double[::1] sy, double reach,
                             Py_ssize_t* i0, Py_ssize_t* i1, Py_ssize_t* j0, Py_ssize_t* j1) nogil:
    cdef double xmin = min3(fx[0], fx[1], fx[2]) - reach
    cdef double xmax = max3(fx[0], fx[1], fx[2]) + reach
    cdef double ymin = min3(fy[0], fy[1], fy[2]) - reach
    cdef double ymax = max3(fy[0], fy[1], fy[2]) + reach
    cdef Py_ssize_t w = sx.shape[0], h = sy.shape[0]
    cdef Py_ssize_t k = 0
    while k < w and sx[k] < xmin:
        k += 1
    i0[0] = k
    while k < w and sx[k] <= xmax:
        k += 1
    i1[0] = k
    k = 0
    while k < h and sy[k] > ymax:  # sy decreases down the image
        k += 1
    j0[0] = k
    while k < h and sy[k] >= ymin:
        k += 1
    j1[0] = k


cdef inline double face_distance(double* fx, double* fy, double X, double Y, double area, int* which,
                                 double* ts, double* dxs, double* dys, bint* inside) nogil:
    cdef double d0 = seg_dist2(X, Y, fx[0], fy[0], fx[1], fy[1], &ts[0], &dxs[0], &dys[0])
    cdef double d1 = seg_dist2(X, Y, fx[1], fy[1], fx[2], fy[2], &ts[1], &dxs[1], &dys[1])
    cdef double d2 = seg_dist2(X, Y, fx[2], fy[2], fx[0], fy[0], &ts[2], &dxs[2], &dys[2])
    cdef double best = d0
    cdef double e0, e1, e2, sgn
    which[0] = 0
    if d1 < best:
        best = d1
        which[0] = 1
    if d2 < best:
        best = d2
        which[0] = 2
    e0 = (fx[1] - fx[0]) * (Y - fy[0]) - (fy[1] - fy[0]) * (X - fx[0])
    e1 = (fx[2] - fx[1]) * (Y - fy[1]) - (fy[2] - fy[1]) * (X - fx[1])
    e2 = (fx[0] - fx[2]) * (Y - fy[2]) - (fy[0] - fy[2]) * (X - fx[2])
    sgn = 1.0 if area >= 0.0 else -1.0
    inside[0] = sgn * e0 >= 0.0 and sgn * e1 >= 0.0 and sgn * e2 >= 0.0 and area != 0.0
    if inside[0]:
        return 0.0
    return best


def soft_mask_forward(double[:, ::1] nx, double[:, ::1] ny, const unsigned char[::1] valid, const double[::1] sx,
                      const double[::1] sy, const unsigned char[:, ::1] covered, double sigma):
    cdef Py_ssize_t h = covered.shape[0], w = covered.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] logp_arr = np.zeros((h, w))
    cdef double[:, ::1] logp = logp_arr
    cdef double reach = sqrt(SOFT_CUTOFF * sigma)
    cdef double cutoff = SOFT_CUTOFF
    cdef Py_ssize_t f, i, j, i0, i1, j0, j1
    cdef double fx[3]
    cdef double fy[3]
    cdef double ts[3]
    cdef double dxs[3]
    cdef double dys[3]
    cdef int which
    cdef bint inside
    cdef double area, d2, x, om
    with nogil:
        for f in range(nx.shape[0]):
            if not valid[f]:
                continue
            fx[0] = nx[f, 0]; fx[1] = nx[f, 1]; fx[2] = nx[f, 2]
            fy[0] = ny[f, 0]; fy[1] = ny[f, 1]; fy[2] = ny[f, 2]
            face_region(fx, fy, sx, sy, reach, &i0, &i1, &j0, &j1)
            if i0 >= i1 or j0 >= j1:
                continue
            area = (fx[1] - fx[0]) * (fy[2] - fy[0]) - (fy[1] - fy[0]) * (fx[2] - fx[0])
            for j in range(j0, j1):
                for i in range(i0, i1):
                    if covered[j, i]:
                        continue
                    d2 = face_distance(fx, fy, sx[i], sy[j], area, &which, ts, dxs, dys, &inside)
                    x = d2 / sigma
                    if x < cutoff:
                        om = -expm1(-x)
                        if om < 1e-300:
                            om = 1e-300
                        logp[j, i] += log(om)
    return logp_arr


def soft_mask_backward(double[:, ::1] nx, double[:, ::1] ny, const unsigned char[::1] valid, const double[::1] sx,
                       const double[::1] sy, const unsigned char[:, ::1] covered, double sigma,
                       const double[:, ::1] prob_out, const double[:, ::1] g_mask):
    cdef Py_ssize_t nf = nx.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx_arr = np.zeros((nf, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gy_arr = np.zeros((nf, 3))
    cdef double[:, ::1] g_nx = gx_arr
    cdef double[:, ::1] g_ny = gy_arr
    cdef double reach = sqrt(SOFT_CUTOFF * sigma)
    cdef double cutoff = SOFT_CUTOFF
    cdef Py_ssize_t f, i, j, i0, i1, j0, j1
    cdef double fx[3]
    cdef double fy[3]
    cdef double ts[3]
    cdef double dxs[3]
    cdef double dys[3]
    cdef int which, a_, b_
    cdef bint inside
    cdef double area, d2, x, e, om, g, ga, gb
    with nogil:
        for f in range(nf):
            if not valid[f]:
                continue
            fx[0] = nx[f, 0]; fx[1] = nx[f, 1]; fx[2] = nx[f, 2]
            fy[0] = ny[f, 0]; fy[1] = ny[f, 1]; fy[2] = ny[f, 2]
            face_region(fx, fy, sx, sy, reach, &i0, &i1, &j0, &j1)
            if i0 >= i1 or j0 >= j1:
                continue
            area = (fx[1] - fx[0]) * (fy[2] - fy[0]) - (fy[1] - fy[0]) * (fx[2] - fx[0])
            for j in range(j0, j1):
                for i in range(i0, i1):
                    if covered[j, i]:
                        continue
                    d2 = face_distance(fx, fy, sx[i], sy[j], area, &which, ts, dxs, dys, &inside)
                    x = d2 / sigma
                    if inside or x >= cutoff:
                        continue
                    e = exp(-x)
                    om = -expm1(-x)
                    if om < 1e-300:
                        om = 1e-300
                    g = -g_mask[j, i] * prob_out[j, i] * (e / sigma) / om
                    ga = -2.0 * g * (1.0 - ts[which])
                    gb = -2.0 * g * ts[which]
                    a_ = which
                    b_ = (which + 1) % 3
                    g_nx[f, a_] += ga * dxs[which]
                    g_ny[f, a_] += ga * dys[which]
                    g_nx[f, b_] += gb * dxs[which]
                    g_ny[f, b_] += gb * dys[which]
    return gx_arr, gy_arr


# --------------------------------------------------------------------------
# Monte Carlo shading


cdef inline u64 mix64(u64 z) nogil:
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


cdef inline double uniform_at(u64 key, u64 draw) nogil:
    cdef u64 z = mix64(key + (draw + 1) * GOLDEN)
    return <double>(z >> 11) * (1.0 / 9007199254740992.0)


cdef inline double dot3(double* a, double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void normalize3(double* v) nogil:
    cdef double n = sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n < 1e-300:
        n = 1e-300
    v[0] /= n
    v[1] /= n
    v[2] /= n


cdef inline double lum(double r, double g, double b) nogil:
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


cdef inline double ggx_d(double ch, double a2) nogil:
    cdef double k = ch * ch * (a2 - 1.0) + 1.0
    return a2 / (PI * k * k)


cdef inline double smith_lambda(double c, double a2) nogil:
    cdef double c2 = c * c
    if c2 < 1e-300:
        c2 = 1e-300
    return 0.5 * (sqrt(1.0 + a2 * ((1.0 - c * c) / c2)) - 1.0)


cdef inline double alpha2(double beta) nogil:
    cdef double be = beta if beta > BETA_MIN else BETA_MIN
    return be * be * be * be


cdef inline void basis(double* n, double* t, double* b) nogil:
    cdef double sign = 1.0 if n[2] >= 0.0 else -1.0
    cdef double a = -1.0 / (sign + n[2])
    cdef double bb = n[0] * n[1] * a
    t[0] = 1.0 + sign * n[0] * n[0] * a
    t[1] = sign * bb
    t[2] = -sign * n[0]
    b[0] = bb
    b[1] = sign + n[1] * n[1] * a
    b[2] = -n[1]


cdef inline double pdf_eval(double pd, double a2, double* n, double* wi, double* wo) nogil:
    cdef double ci = dot3(n, wi)
    cdef double h[3]
    cdef double ch, oh, spec
    if ci <= 0.0:
        return 0.0
    h[0] = wi[0] + wo[0]; h[1] = wi[1] + wo[1]; h[2] = wi[2] + wo[2]
    normalize3(h)
    ch = dot3(n, h)
    oh = fabs(dot3(wo, h))
    if oh < 1e-300:
        oh = 1e-300
    spec = ggx_d(ch, a2) * (ch if ch > 0.0 else 0.0) / (4.0 * oh)
    return pd * ci / PI + (1.0 - pd) * spec


cdef inline void brdf_eval(double* a, double s, double a2, double m, double* n, double* wi, double* wo,
                           double* out) nogil:
    cdef double ci = dot3(n, wi), co = dot3(n, wo)
    cdef double h[3]
    cdef double ch, d, p5, g2, sp, f0, f90
    cdef int c
    if not (ci > 0.0 and co > 0.0):
        out[0] = 0.0; out[1] = 0.0; out[2] = 0.0
        return
    h[0] = wi[0] + wo[0]; h[1] = wi[1] + wo[1]; h[2] = wi[2] + wo[2]
    normalize3(h)
    ch = dot3(n, h)
    d = dot3(wo, h)
    if d < 0.0:
        d = 0.0
    elif d > 1.0:
        d = 1.0
    p5 = (1.0 - d) * (1.0 - d)
    p5 = p5 * p5 * (1.0 - d)
    g2 = 1.0 / (1.0 + smith_lambda(ci, a2) + smith_lambda(co, a2))
    sp = ggx_d(ch, a2) * g2 / (4.0 * ci * co)
    for c in range(3):
        f0 = (1.0 - m) * (DIELECTRIC_F0 * s) + m * a[c]
        f90 = 50.0 * f0
        if f90 < 0.0:
            f90 = 0.0
        elif f90 > 1.0:
            f90 = 1.0
        out[c] = (1.0 - m) * a[c] / PI + sp * (f0 + (f90 - f0) * p5)


cdef inline void env_lookup(const double[:, :, ::1] env, double* w, double* out) nogil:
    cdef Py_ssize_t H = env.shape[0], W = env.shape[1]
    cdef double phi = atan2(w[0], 0.0 - w[2])
    cdef double u = (phi + PI) / (2.0 * PI)
    cdef double y = w[1]
    cdef double v, x, fx, yy, fy, x0, y0
    cdef long long ix0, ix1, iy0, iy1
    cdef int c
    u = u - floor(u)
    if u >= 1.0:
        u = 0.0
    if y < -1.0:
        y = -1.0
    elif y > 1.0:
        y = 1.0
    v = acos(y) / PI
    if v > ONE_MINUS_ULP:
        v = ONE_MINUS_ULP
    x = u * W - 0.5
    x0 = floor(x)
    fx = x - x0
    ix0 = (<long long>x0) % W
    if ix0 < 0:
        ix0 += W
    ix1 = (ix0 + 1) % W
    yy = v * H - 0.5
    if yy < 0.0:
        yy = 0.0
    elif yy > H - 1.0:
        yy = H - 1.0
    y0 = floor(yy)
    if H >= 2 and y0 > H - 2:
        y0 = H - 2
    elif H < 2:
        y0 = 0.0
    fy = yy - y0
    iy0 = <long long>y0
    iy1 = iy0 + 1
    if iy1 > H - 1:
        iy1 = H - 1
    for c in range(3):
        out[c] = ((1 - fx) * (1 - fy) * env[iy0, ix0, c] + fx * (1 - fy) * env[iy0, ix1, c]
                  + (1 - fx) * fy * env[iy1, ix0, c] + fx * fy * env[iy1, ix1, c])


def mc_shade(const double[:, ::1] n, const double[:, ::1] wo, const double[:, ::1] a_eval, double s, double beta,
             double m, const double[:, ::1] n_samp, const double[:, ::1] wo_samp, const double[:, ::1] a_samp,
             double s_samp, double beta_samp, double m_samp, const double[:, :, ::1] env, seed,
             const long long[::1] stream, long nsamples):
    cdef Py_ssize_t P = n.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((P, 3))
    cdef double[:, ::1] out = out_arr
    cdef u64 useed = <u64>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef double a2e = alpha2(beta)
    cdef double a2s = alpha2(beta_samp)
    cdef Py_ssize_t p
    cdef long k
    cdef u64 key
    cdef double nn[3]
    cdef double ww[3]
    cdef double ns[3]
    cdef double ws[3]
    cdef double ae[3]
    cdef double as_[3]
    cdef double t[3]
    cdef double b[3]
    cdef double wi[3]
    cdef double hw[3]
    cdef double f[3]
    cdef double li[3]
    cdef double acc[3]
    cdef double wd, wsp, tot, pd, u1, u2, u3, phi, r, zd, cos_h, sin_h, lx, ly, lz, dwh, pdf, cs, weight
    cdef int c
    with nogil:
        for p in range(P):
            for c in range(3):
                nn[c] = n[p, c]; ww[c] = wo[p, c]; ns[c] = n_samp[p, c]; ws[c] = wo_samp[p, c]
                ae[c] = a_eval[p, c]; as_[c] = a_samp[p, c]
                acc[c] = 0.0
            wd = lum((1.0 - m_samp) * as_[0], (1.0 - m_samp) * as_[1], (1.0 - m_samp) * as_[2])
            wsp = lum((1.0 - m_samp) * (DIELECTRIC_F0 * s_samp) + m_samp * as_[0],
                      (1.0 - m_samp) * (DIELECTRIC_F0 * s_samp) + m_samp * as_[1],
                      (1.0 - m_samp) * (DIELECTRIC_F0 * s_samp) + m_samp * as_[2])
            tot = wd + wsp
            pd = wd / tot if tot > 0.0 else 1.0
            basis(ns, t, b)
            key = mix64(useed ^ mix64(<u64>stream[p] * GOLDEN + GOLDEN))
            for k in range(nsamples):
                u1 = uniform_at(key, <u64>(3 * k))
                u2 = uniform_at(key, <u64>(3 * k + 1))
                u3 = uniform_at(key, <u64>(3 * k + 2))
                phi = 2.0 * PI * u2
                if u3 < pd:
                    r = sqrt(u1)
                    zd = 1.0 - u1
                    lx = r * cos(phi)
                    ly = r * sin(phi)
                    lz = sqrt(zd if zd > 0.0 else 0.0)
                    for c in range(3):
                        wi[c] = lx * t[c] + ly * b[c] + lz * ns[c]
                else:
                    cos_h = sqrt((1.0 - u1) / (1.0 + (a2s - 1.0) * u1))
                    zd = 1.0 - cos_h * cos_h
                    sin_h = sqrt(zd if zd > 0.0 else 0.0)
                    lx = sin_h * cos(phi)
                    ly = sin_h * sin(phi)
                    for c in range(3):
                        hw[c] = lx * t[c] + ly * b[c] + cos_h * ns[c]
                    dwh = dot3(ws, hw)
                    for c in range(3):
                        wi[c] = 2.0 * dwh * hw[c] - ws[c]
                normalize3(wi)
                pdf = pdf_eval(pd, a2s, ns, wi, ws)
                if not (pdf > 0.0):
                    continue
                cs = dot3(nn, wi)
                if cs <= 0.0:
                    continue
                weight = cs / pdf
                brdf_eval(ae, s, a2e, m, nn, wi, ww, f)
                env_lookup(env, wi, li)
                for c in range(3):
                    acc[c] += f[c] * li[c] * weight
            for c in range(3):
                out[p, c] = acc[c] / nsamples
    return out_arr
