"""Vectorized NumPy implementation of the pairwise Stein-kernel reductions.

Each function works on a row block ``[r0, r1)`` of the left point set and
returns per-row sums over every right point, skipping the diagonal pair when
``exclude`` is set (left and right are then the same sample).  The compiled
extension exposes the same functions with the same signatures.

Notation: for a pair ``(x, y)`` with ``delta = x - y``, ``v = m(x)^T delta``
and ``w = m(y)^T delta``, a matrix kernel ``sum_c C_c kappa_c(||delta||^2)``
and per-point features ``P = m^T grad log p + div m``,

    k0 = sum_c  kappa  P_x^T C P_y
              - 2 kappa'  P_x^T C w
              + 2 kappa'  v^T C P_y
              - 2 kappa'  tr(m(x) C m(y)^T)
              - 4 kappa'' v^T C w
"""

import numpy as np

GAUSSIAN = 0
IMQ = 1


def profile(kind, params, r2):
    a, b = params
    if kind == GAUSSIAN:
        s = 1.0 / (2.0 * a * a)
        k = np.exp(-s * r2)
        return k, -s * k, s * s * k
    base = a * a + r2
    k = base**b
    k1 = b * k / base
    return k, k1, (b - 1.0) * k1 / base


def _geometry(Xa, Ma, Xb, Mb, r0, r1):
    delta = Xa[r0:r1, None, :] - Xb[None, :, :]
    r2 = np.einsum("abi,abi->ab", delta, delta)
    v = np.einsum("aij,abi->abj", Ma[r0:r1], delta)
    w = np.einsum("bij,abi->abj", Mb, delta)
    return delta, r2, v, w


def _mask(out, r0, exclude):
    if exclude:
        rows = np.arange(out.shape[0])
        out[rows, rows + r0] = 0.0
    return out


def stein_matrix(Xa, Pa, Ma, Xb, Pb, Mb, C, kinds, params, r0, r1, exclude):
    """Full block of Stein-kernel values, shape ``(r1 - r0, nb)``."""
    _, r2, v, w = _geometry(Xa, Ma, Xb, Mb, r0, r1)
    Pi = Pa[r0:r1]
    Mi = Ma[r0:r1]
    out = np.zeros(r2.shape)
    for c in range(C.shape[0]):
        Cc = C[c]
        k, k1, k2 = profile(kinds[c], params[c], r2)
        CPi = Pi @ Cc
        CPj = Pb @ Cc
        MCi = Mi @ Cc
        t1 = CPi @ Pb.T
        t2 = np.einsum("ar,abr->ab", CPi, w)
        t3 = np.einsum("abr,br->ab", v, CPj)
        t4 = np.einsum("ias,jas->ij", MCi, Mb)
        t5 = np.einsum("abr,abr->ab", v @ Cc, w)
        out += k * t1 + k1 * (2.0 * (t3 - t2 - t4)) - 4.0 * k2 * t5
    return _mask(out, r0, exclude)


def stein_rows(Xa, Pa, Ma, Xb, Pb, Mb, C, kinds, params, r0, r1, exclude):
    return stein_matrix(Xa, Pa, Ma, Xb, Pb, Mb, C, kinds, params, r0, r1, exclude).sum(axis=1)


def stein_grad_rows(Xa, Pa, Ma, dPa, dMa, Xb, Pb, Mb, dPb, dMb,
                    C, kinds, params, r0, r1, exclude, m_dep):
    """Per-row sums of the theta-gradient, shape ``(r1 - r0, p)``."""
    delta, r2, v, w = _geometry(Xa, Ma, Xb, Mb, r0, r1)
    Pi, Mi, dPi = Pa[r0:r1], Ma[r0:r1], dPa[r0:r1]
    if m_dep:
        dv = np.einsum("atij,abi->abtj", dMa[r0:r1], delta)
        dw = np.einsum("btij,abi->abtj", dMb, delta)
    nrow, nb = r2.shape
    p = dPa.shape[1]
    out = np.zeros((nrow, nb, p))
    for c in range(C.shape[0]):
        Cc = C[c]
        k, k1, k2 = profile(kinds[c], params[c], r2)
        k, k1, k2 = k[..., None], k1[..., None], k2[..., None]
        CPi, CPj = Pi @ Cc, Pb @ Cc
        CdPi, CdPj = dPi @ Cc, dPb @ Cc
        vC = v @ Cc
        wC = w @ Cc
        t1 = np.einsum("atr,br->abt", CdPi, Pb) + np.einsum("ar,btr->abt", CPi, dPb)
        t2 = np.einsum("atr,abr->abt", CdPi, w)
        t3 = np.einsum("abr,btr->abt", v, CdPj)
        g = k * t1 + 2.0 * k1 * (t3 - t2)
        if m_dep:
            t2m = np.einsum("ar,abtr->abt", CPi, dw)
            t3m = np.einsum("abtr,br->abt", dv, CPj)
            MCi = Mi @ Cc
            t4 = (np.einsum("atis,bis->abt", dMa[r0:r1] @ Cc, Mb)
                  + np.einsum("ais,btis->abt", MCi, dMb))
            t5 = np.einsum("abtr,abr->abt", dv, wC) + np.einsum("abr,abtr->abt", vC, dw)
            g = g + 2.0 * k1 * (t3m - t2m - t4) - 4.0 * k2 * t5
        out += g
    if exclude:
        rows = np.arange(nrow)
        out[rows, rows + r0, :] = 0.0
    return out.sum(axis=1)


def info_rows(Xa, Ba, Xb, Bb, C, kinds, params, r0, r1, exclude):
    """Per-row sums of ``b_t(x)^T K(x, y) b_s(y)``, shape ``(r1 - r0, p, p)``."""
    delta = Xa[r0:r1, None, :] - Xb[None, :, :]
    r2 = np.einsum("abi,abi->ab", delta, delta)
    Bi = Ba[r0:r1]
    out = np.zeros((r1 - r0, Ba.shape[1], Bb.shape[1]))
    for c in range(C.shape[0]):
        k = profile(kinds[c], params[c], r2)[0]
        k = _mask(k, r0, exclude)
        # sum_j k_ij B_j : (rows, p, d)
        kB = np.einsum("ab,bsr->asr", k, Bb)
        out += np.einsum("atr,rq,asq->ats", Bi, C[c], kB)
    return out
