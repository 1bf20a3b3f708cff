# cython: language_level=3
"""Compiled pair loops; same contract as the NumPy module ``_pairs``.

Loops run without the GIL so row blocks can be processed by several Python
threads at once.  Per-row sums accumulate over the right point set in index
order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, pow
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _profile(int kind, double a, double b, double r2,
                          double* k, double* k1, double* k2) noexcept nogil:
    cdef double s, base
    if kind == 0:
        s = 1.0 / (2.0 * a * a)
        k[0] = exp(-s * r2)
        k1[0] = -s * k[0]
        k2[0] = s * s * k[0]
    else:
        base = a * a + r2
        k[0] = pow(base, b)
        k1[0] = b * k[0] / base
        k2[0] = (b - 1.0) * k1[0] / base


cdef inline double _dot(const double* x, const double* y, Py_ssize_t d) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(d):
        s += x[i] * y[i]
    return s


cdef inline void _matvec_t(const double* M, const double* x, double* out, Py_ssize_t d) noexcept nogil:
    # out_j = sum_i M_ij x_i
    cdef Py_ssize_t i, j
    for j in range(d):
        out[j] = 0.0
    for i in range(d):
        for j in range(d):
            out[j] += M[i * d + j] * x[i]


cdef inline void _matvec(const double* C, const double* x, double* out, Py_ssize_t d) noexcept nogil:
    # out_r = sum_s C_rs x_s
    cdef Py_ssize_t r, s
    for r in range(d):
        out[r] = 0.0
        for s in range(d):
            out[r] += C[r * d + s] * x[s]


cdef inline double _quad(const double* x, const double* C, const double* y, Py_ssize_t d) noexcept nogil:
    cdef double s = 0.0, t
    cdef Py_ssize_t r, q
    for r in range(d):
        t = 0.0
        for q in range(d):
            t += C[r * d + q] * y[q]
        s += x[r] * t
    return s


def _precompute(double[:, ::1] P, double[:, :, ::1] M, double[:, :, ::1] C):
    """``C P`` per point and comp, and ``M C`` per point and comp."""
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], nc = C.shape[0]
    cp = np.einsum("crs,ns->ncr", np.asarray(C), np.asarray(P))
    mc = np.einsum("nis,csq->nciq", np.asarray(M), np.asarray(C))
    return np.ascontiguousarray(cp), np.ascontiguousarray(mc)


def stein_matrix(double[:, ::1] Xa, double[:, ::1] Pa, double[:, :, ::1] Ma,
                 double[:, ::1] Xb, double[:, ::1] Pb, double[:, :, ::1] Mb,
                 double[:, :, ::1] C, int[::1] kinds, double[:, ::1] params,
                 Py_ssize_t r0, Py_ssize_t r1, bint exclude):
    cdef Py_ssize_t nb = Xb.shape[0]
    out = np.zeros((r1 - r0, nb))
    cdef double[:, ::1] o = out
    _stein_block(Xa, Pa, Ma, Xb, Pb, Mb, C, kinds, params, r0, r1, exclude, o, None)
    return out


def stein_rows(double[:, ::1] Xa, double[:, ::1] Pa, double[:, :, ::1] Ma,
               double[:, ::1] Xb, double[:, ::1] Pb, double[:, :, ::1] Mb,
               double[:, :, ::1] C, int[::1] kinds, double[:, ::1] params,
               Py_ssize_t r0, Py_ssize_t r1, bint exclude):
    out = np.zeros(r1 - r0)
    cdef double[::1] o = out
    _stein_block(Xa, Pa, Ma, Xb, Pb, Mb, C, kinds, params, r0, r1, exclude, None, o)
    return out


cdef _stein_block(double[:, ::1] Xa, double[:, ::1] Pa, double[:, :, ::1] Ma,
                  double[:, ::1] Xb, double[:, ::1] Pb, double[:, :, ::1] Mb,
                  double[:, :, ::1] C, int[::1] kinds, double[:, ::1] params,
                  Py_ssize_t r0, Py_ssize_t r1, bint exclude,
                  double[:, ::1] full, double[::1] rows):
    cdef Py_ssize_t nb = Xb.shape[0], d = Xa.shape[1], nc = C.shape[0]
    cpa_, mca_ = _precompute(Pa, Ma, C)
    cpb_, _ = _precompute(Pb, Mb, C)
    cdef double[:, :, ::1] cpa = cpa_
    cdef double[:, :, ::1] cpb = cpb_
    cdef double[:, :, :, ::1] mca = mca_
    cdef double* buf = <double*> malloc(4 * d * sizeof(double))
    cdef double* delta = buf
    cdef double* v = buf + d
    cdef double* w = buf + 2 * d
    cdef Py_ssize_t i, j, c, a, s
    cdef double r2, k, k1, k2, t1, t2, t3, t4, t5, val, acc
    try:
        with nogil:
            for i in range(r0, r1):
                acc = 0.0
                for j in range(nb):
                    if exclude and i == j:
                        if full is not None:
                            full[i - r0, j] = 0.0
                        continue
                    r2 = 0.0
                    for a in range(d):
                        delta[a] = Xa[i, a] - Xb[j, a]
                        r2 += delta[a] * delta[a]
                    _matvec_t(&Ma[i, 0, 0], delta, v, d)
                    _matvec_t(&Mb[j, 0, 0], delta, w, d)
                    val = 0.0
                    for c in range(nc):
                        _profile(kinds[c], params[c, 0], params[c, 1], r2, &k, &k1, &k2)
                        t1 = _dot(&cpa[i, c, 0], &Pb[j, 0], d)
                        t2 = _dot(&cpa[i, c, 0], w, d)
                        t3 = _dot(v, &cpb[j, c, 0], d)
                        t4 = 0.0
                        for a in range(d):
                            for s in range(d):
                                t4 += mca[i, c, a, s] * Mb[j, a, s]
                        t5 = _quad(v, &C[c, 0, 0], w, d)
                        val += k * t1 + 2.0 * k1 * (t3 - t2 - t4) - 4.0 * k2 * t5
                    if full is not None:
                        full[i - r0, j] = val
                    acc += val
                if rows is not None:
                    rows[i - r0] = acc
    finally:
        free(buf)


def stein_grad_rows(double[:, ::1] Xa, double[:, ::1] Pa, double[:, :, ::1] Ma,
                    double[:, :, ::1] dPa, double[:, :, :, ::1] dMa,
                    double[:, ::1] Xb, double[:, ::1] Pb, double[:, :, ::1] Mb,
                    double[:, :, ::1] dPb, double[:, :, :, ::1] dMb,
                    double[:, :, ::1] C, int[::1] kinds, double[:, ::1] params,
                    Py_ssize_t r0, Py_ssize_t r1, bint exclude, bint m_dep):
    cdef Py_ssize_t nb = Xb.shape[0], d = Xa.shape[1], nc = C.shape[0]
    cdef Py_ssize_t p = dPa.shape[1]
    out_ = np.zeros((r1 - r0, p))
    cdef double[:, ::1] out = out_
    cpa_, mca_ = _precompute(Pa, Ma, C)
    cpb_, _ = _precompute(Pb, Mb, C)
    cdpa_ = np.ascontiguousarray(np.einsum("crs,nts->ntcr", np.asarray(C), np.asarray(dPa)))
    cdpb_ = np.ascontiguousarray(np.einsum("crs,nts->ntcr", np.asarray(C), np.asarray(dPb)))
    dmca_ = np.ascontiguousarray(np.einsum("ntis,csq->ntciq", np.asarray(dMa), np.asarray(C)))
    cdef double[:, :, ::1] cpa = cpa_
    cdef double[:, :, ::1] cpb = cpb_
    cdef double[:, :, :, ::1] mca = mca_
    cdef double[:, :, :, ::1] cdpa = cdpa_
    cdef double[:, :, :, ::1] cdpb = cdpb_
    cdef double[:, :, :, :, ::1] dmca = dmca_
    cdef double* buf = <double*> malloc((3 * d + 2 * p * d + p) * sizeof(double))
    cdef double* delta = buf
    cdef double* v = buf + d
    cdef double* w = buf + 2 * d
    cdef double* dv = buf + 3 * d
    cdef double* dw = buf + 3 * d + p * d
    cdef double* acc = buf + 3 * d + 2 * p * d
    cdef Py_ssize_t i, j, c, a, s, t
    cdef double r2, k, k1, k2, g, t4
    try:
        with nogil:
            for i in range(r0, r1):
                for t in range(p):
                    acc[t] = 0.0
                for j in range(nb):
                    if exclude and i == j:
                        continue
                    r2 = 0.0
                    for a in range(d):
                        delta[a] = Xa[i, a] - Xb[j, a]
                        r2 += delta[a] * delta[a]
                    _matvec_t(&Ma[i, 0, 0], delta, v, d)
                    _matvec_t(&Mb[j, 0, 0], delta, w, d)
                    if m_dep:
                        for t in range(p):
                            _matvec_t(&dMa[i, t, 0, 0], delta, dv + t * d, d)
                            _matvec_t(&dMb[j, t, 0, 0], delta, dw + t * d, d)
                    for c in range(nc):
                        _profile(kinds[c], params[c, 0], params[c, 1], r2, &k, &k1, &k2)
                        for t in range(p):
                            g = k * (_dot(&cdpa[i, t, c, 0], &Pb[j, 0], d)
                                     + _dot(&cpa[i, c, 0], &dPb[j, t, 0], d))
                            g += 2.0 * k1 * (_dot(v, &cdpb[j, t, c, 0], d)
                                             - _dot(&cdpa[i, t, c, 0], w, d))
                            if m_dep:
                                t4 = 0.0
                                for a in range(d):
                                    for s in range(d):
                                        t4 += (dmca[i, t, c, a, s] * Mb[j, a, s]
                                               + mca[i, c, a, s] * dMb[j, t, a, s])
                                g += 2.0 * k1 * (_dot(dv + t * d, &cpb[j, c, 0], d)
                                                 - _dot(&cpa[i, c, 0], dw + t * d, d)
                                                 - t4)
                                g -= 4.0 * k2 * (_quad(dv + t * d, &C[c, 0, 0], w, d)
                                                 + _quad(v, &C[c, 0, 0], dw + t * d, d))
                            acc[t] += g
                for t in range(p):
                    out[i - r0, t] = acc[t]
    finally:
        free(buf)
    return out_


def info_rows(double[:, ::1] Xa, double[:, :, ::1] Ba, double[:, ::1] Xb, double[:, :, ::1] Bb,
              double[:, :, ::1] C, int[::1] kinds, double[:, ::1] params,
              Py_ssize_t r0, Py_ssize_t r1, bint exclude):
    cdef Py_ssize_t nb = Xb.shape[0], d = Xa.shape[1], nc = C.shape[0]
    cdef Py_ssize_t p = Ba.shape[1], q = Bb.shape[1]
    out_ = np.zeros((r1 - r0, p, q))
    cdef double[:, :, ::1] out = out_
    cba_ = np.ascontiguousarray(np.einsum("crs,nts->ntcr", np.asarray(C), np.asarray(Ba)))
    cdef double[:, :, :, ::1] cba = cba_
    cdef Py_ssize_t i, j, c, a, t, u
    cdef double r2, k, k1, k2, diff
    with nogil:
        for i in range(r0, r1):
            for j in range(nb):
                if exclude and i == j:
                    continue
                r2 = 0.0
                for a in range(d):
                    diff = Xa[i, a] - Xb[j, a]
                    r2 += diff * diff
                for c in range(nc):
                    _profile(kinds[c], params[c, 0], params[c, 1], r2, &k, &k1, &k2)
                    for t in range(p):
                        for u in range(q):
                            out[i - r0, t, u] += k * _dot(&cba[i, t, c, 0], &Bb[j, u, 0], d)
    return out_
