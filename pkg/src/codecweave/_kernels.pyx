# cython: language_level=3, cdivision=True
"""Compiled row kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
cimport cython
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt, sqrtf

cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)

cnp.import_array()

cdef double GELU_C = 0.7978845608028654


@cython.boundscheck(False)
@cython.wraparound(False)
cdef double _xent_rows(floating[:, ::1] e, const cnp.int64_t[::1] t,
                       const floating[::1] w) noexcept nogil:
    # rows of e already hold exp(x - rowmax)
    cdef Py_ssize_t R = e.shape[0], C = e.shape[1], r, c
    cdef double s, total = 0.0, wr
    cdef floating inv
    cdef floating *row
    cdef cnp.int64_t tr
    for r in range(R):
        row = &e[r, 0]
        tr = t[r]
        if tr < 0:
            for c in range(C):
                row[c] = 0
            continue
        s = 0.0
        for c in range(C):
            s += row[c]
        wr = w[r]
        total -= wr * log(row[tr] / s)
        inv = <floating>(wr / s)
        for c in range(C):
            row[c] = row[c] * inv
        row[tr] -= <floating>wr
    return total


def softmax_xent(logits, targets, weights):
    if not logits.flags.c_contiguous:
        raise ValueError("logits must be C-contiguous (updated in place)")
    x2 = logits.reshape(-1, logits.shape[-1])
    t = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
    w = np.ascontiguousarray(weights, dtype=logits.dtype).reshape(-1)
    if x2.shape[0] == 0:
        return 0.0
    # numpy's vectorized exp beats a scalar libm loop
    x2 -= x2.max(axis=1, keepdims=True)
    np.exp(x2, out=x2)
    if logits.dtype == np.float32:
        return _xent_rows[float](x2, t, w)
    return _xent_rows[double](x2, t, w)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _ln_fwd(const floating[:, ::1] x, const floating[::1] g, const floating[::1] b,
                  double eps, floating[:, ::1] y, floating[:, ::1] xhat,
                  floating[::1] rstd) noexcept nogil:
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], r, c
    cdef double mu, var, d, rs
    for r in range(R):
        mu = 0.0
        for c in range(D):
            mu += x[r, c]
        mu /= D
        var = 0.0
        for c in range(D):
            d = x[r, c] - mu
            var += d * d
        var /= D
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <floating>rs
        for c in range(D):
            d = (x[r, c] - mu) * rs
            xhat[r, c] = <floating>d
            y[r, c] = <floating>(d * g[c] + b[c])


def layernorm_fwd(x, g, b, eps):
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=x.dtype)
    if x.dtype == np.float32:
        _ln_fwd[float](x2, g, b, eps, y, xhat, rstd)
    else:
        _ln_fwd[double](x2, g, b, eps, y, xhat, rstd)
    return y.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:-1] + (1,))


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _ln_bwd(const floating[:, ::1] dy, const floating[:, ::1] xhat,
                  const floating[::1] rstd, const floating[::1] g, floating[:, ::1] dx,
                  double[::1] dg, double[::1] db) noexcept nogil:
    cdef Py_ssize_t R = dy.shape[0], D = dy.shape[1], r, c
    cdef double a, bsum, dxh
    for r in range(R):
        a = 0.0
        bsum = 0.0
        for c in range(D):
            dxh = dy[r, c] * g[c]
            a += dxh
            bsum += dxh * xhat[r, c]
            dg[c] += dy[r, c] * xhat[r, c]
            db[c] += dy[r, c]
        a /= D
        bsum /= D
        for c in range(D):
            dx[r, c] = <floating>(rstd[r] * (dy[r, c] * g[c] - a - xhat[r, c] * bsum))


def layernorm_bwd(dy, xhat, rstd, g):
    shape = dy.shape
    D = shape[-1]
    dy2 = np.ascontiguousarray(dy).reshape(-1, D)
    xh2 = np.ascontiguousarray(xhat).reshape(-1, D)
    rs = np.ascontiguousarray(rstd).reshape(-1)
    dx = np.empty_like(dy2)
    dg = np.zeros(D)
    db = np.zeros(D)
    if dy.dtype == np.float32:
        _ln_bwd[float](dy2, xh2, rs, g, dx, dg, db)
    else:
        _ln_bwd[double](dy2, xh2, rs, g, dx, dg, db)
    return dx.reshape(shape), dg.astype(dy.dtype), db.astype(dy.dtype)


def gelu_fwd(x):
    # numpy's SIMD tanh beats any scalar libm call; everything runs in place
    x = np.ascontiguousarray(x)
    th = np.multiply(x, x)
    th *= x.dtype.type(0.044715)
    th += 1
    th *= x
    th *= x.dtype.type(GELU_C)
    np.tanh(th, out=th)
    y = th + 1
    y *= x
    y *= x.dtype.type(0.5)
    return y, th


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gelu_bwd(const floating[::1] dy, const floating[::1] x, const floating[::1] th,
                    floating[::1] dx) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating v, t
    for i in range(n):
        v = x[i]
        t = th[i]
        dx[i] = dy[i] * (<floating>0.5 * (1 + t) + <floating>0.5 * v * (1 - t * t)
                         * <floating>GELU_C * (1 + <floating>(3 * 0.044715) * v * v))


def gelu_bwd(dy, x, th):
    dy1 = np.ascontiguousarray(dy).reshape(-1)
    dx = np.empty_like(dy1)
    if dy.dtype == np.float32:
        _gelu_bwd[float](dy1, np.ascontiguousarray(x).reshape(-1),
                         np.ascontiguousarray(th).reshape(-1), dx)
    else:
        _gelu_bwd[double](dy1, np.ascontiguousarray(x).reshape(-1),
                          np.ascontiguousarray(th).reshape(-1), dx)
    return dx.reshape(dy.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _causal_softmax(floating[:, :, ::1] s) noexcept nogil:
    cdef Py_ssize_t R = s.shape[0], N = s.shape[1], r, i, j
    cdef double m, tot, inv
    for r in range(R):
        for i in range(N):
            m = s[r, i, 0]
            for j in range(1, i + 1):
                if s[r, i, j] > m:
                    m = s[r, i, j]
            tot = 0.0
            for j in range(i + 1):
                s[r, i, j] = _exp(<floating>(s[r, i, j] - m))
                tot += s[r, i, j]
            inv = 1.0 / tot
            for j in range(i + 1):
                s[r, i, j] = <floating>(s[r, i, j] * inv)
            for j in range(i + 1, N):
                s[r, i, j] = 0


def causal_softmax(scores):
    if not scores.flags.c_contiguous:
        raise ValueError("scores must be C-contiguous (updated in place)")
    N = scores.shape[-1]
    s3 = scores.reshape(-1, N, N)
    if scores.dtype == np.float32:
        _causal_softmax[float](s3)
    else:
        _causal_softmax[double](s3)
    return scores


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _softmax_bwd(const floating[:, ::1] a, const floating[:, ::1] da,
                       floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t R = a.shape[0], N = a.shape[1], r, j
    cdef double dot
    for r in range(R):
        dot = 0.0
        for j in range(N):
            dot += a[r, j] * da[r, j]
        for j in range(N):
            out[r, j] = <floating>(a[r, j] * (da[r, j] - dot))


def softmax_bwd(att, datt):
    N = att.shape[-1]
    a2 = np.ascontiguousarray(att).reshape(-1, N)
    d2 = np.ascontiguousarray(datt).reshape(-1, N)
    out = np.empty_like(a2)
    if att.dtype == np.float32:
        _softmax_bwd[float](a2, d2, out)
    else:
        _softmax_bwd[double](a2, d2, out)
    return out.reshape(att.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _scatter(floating[:, ::1] table, const cnp.int64_t[::1] ids,
                   const floating[:, ::1] rows) noexcept nogil:
    cdef Py_ssize_t n = ids.shape[0], D = rows.shape[1], i, c
    cdef cnp.int64_t r
    for i in range(n):
        r = ids[i]
        for c in range(D):
            table[r, c] += rows[i, c]


def scatter_add_rows(table, ids, rows):
    t2 = table.reshape(-1, table.shape[-1])
    ids1 = np.ascontiguousarray(ids, dtype=np.int64).reshape(-1)
    if ids1.size and (ids1.min() < 0 or ids1.max() >= t2.shape[0]):
        raise IndexError("scatter index out of range")
    r2 = np.ascontiguousarray(rows, dtype=table.dtype).reshape(-1, t2.shape[1])
    if table.dtype == np.float32:
        _scatter[float](t2, ids1, r2)
    else:
        _scatter[double](t2, ids1, r2)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _adamw(floating[::1] p, const floating[::1] g, floating[::1] m, floating[::1] v,
                 double lr, double b1, double b2, double c1, double c2, double eps,
                 double shrink) noexcept nogil:
    cdef Py_ssize_t n = p.shape[0], i
    cdef floating gi, mi, vi
    cdef floating fb1 = <floating>b1, fa1 = <floating>(1.0 - b1)
    cdef floating fb2 = <floating>b2, fa2 = <floating>(1.0 - b2)
    cdef floating step = <floating>(lr / c1), rc2 = <floating>(1.0 / sqrt(c2))
    cdef floating feps = <floating>eps, fshrink = <floating>shrink
    cdef floating *pp
    cdef floating *mp
    cdef floating *vp
    cdef const floating *gp
    if n == 0:
        return
    gp = &g[0]
    pp = &p[0]
    mp = &m[0]
    vp = &v[0]
    for i in range(n):
        gi = gp[i]
        mi = fb1 * mp[i] + fa1 * gi
        vi = fb2 * vp[i] + fa2 * gi * gi
        mp[i] = mi
        vp[i] = vi
        pp[i] = pp[i] * fshrink - step * mi / (_sqrt(vi) * rc2 + feps)


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, shrink):
    for arr in (p, m, v):
        if not arr.flags.c_contiguous:
            raise ValueError("optimizer tensors must be C-contiguous (updated in place)")
    g1 = np.ascontiguousarray(g, dtype=p.dtype).reshape(-1)
    if p.dtype == np.float32:
        _adamw[float](p.reshape(-1), g1, m.reshape(-1), v.reshape(-1),
                      lr, b1, b2, c1, c2, eps, shrink)
    else:
        _adamw[double](p.reshape(-1), g1, m.reshape(-1), v.reshape(-1),
                       lr, b1, b2, c1, c2, eps, shrink)
