"""Closed-form DKSD and DSM estimators for natural exponential families.

For ``log p(x; theta) = <theta, T(x)> + b(x) + const`` both losses are exact
quadratics ``theta^T A theta + v^T theta + c`` in the parameter, so the
minimizer is ``-A^{-1} v / 2`` whenever ``A`` is positive definite.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _backend
from ._arrays import as_sample, sym
from .diffusion import Identity, dsm_theta_independence_check
from .errors import ConfigError, SingularMatrixError
from .model import ModelSpec


class ExpFamSpec(ModelSpec):
    """Exponential family given by its sufficient statistic and base measure.

    Parameters
    ----------
    dim_x, dim_theta : int
    T, grad_T, hess_T : callable
        Batched maps returning ``(n, m)``, ``(n, m, d)`` and ``(n, m, d, d)``.
    b, grad_b, hess_b : callable
        Batched maps returning ``(n,)``, ``(n, d)`` and ``(n, d, d)``.
    """

    name = "expfam"

    def __init__(self, dim_x, dim_theta, T, grad_T, hess_T, b, grad_b, hess_b,
                 theta_domain=None, param_names=None, name=None):
        super().__init__(dim_x, dim_theta, theta_domain, param_names)
        self.T, self.grad_T, self.hess_T = T, grad_T, hess_T
        self.b, self.grad_b, self.hess_b = b, grad_b, hess_b
        if name:
            self.name = name

    def _logp(self, X, th):
        return self.T(X) @ th + self.b(X)

    def _score(self, X, th):
        return self.grad_b(X) + np.einsum("t,ntd->nd", th, self.grad_T(X))

    def _hess(self, X, th):
        return self.hess_b(X) + np.einsum("t,ntij->nij", th, self.hess_T(X))

    def _dscore(self, X, th):
        return self.grad_T(X)

    def _dhess(self, X, th):
        return self.hess_T(X)


def gaussian_location_expfam(d=1):
    """``log p = <theta, 2x> - ||x||^2``, the Gaussian location model."""
    eye = np.eye(d)
    return ExpFamSpec(
        d, d,
        T=lambda X: 2.0 * X,
        grad_T=lambda X: np.broadcast_to(2.0 * eye, (X.shape[0], d, d)).copy(),
        hess_T=lambda X: np.zeros((X.shape[0], d, d, d)),
        b=lambda X: -np.sum(X**2, axis=1),
        grad_b=lambda X: -2.0 * X,
        hess_b=lambda X: np.broadcast_to(-2.0 * eye, (X.shape[0], d, d)).copy(),
        name="gaussian_location_expfam",
    )


def gaussian_natural():
    """One-dimensional Gaussian with ``T(x) = (x, x^2)``; needs ``theta_2 < 0``."""
    return ExpFamSpec(
        1, 2,
        T=lambda X: np.concatenate([X, X**2], axis=1),
        grad_T=lambda X: np.stack([np.ones_like(X), 2.0 * X], axis=1),
        hess_T=lambda X: np.broadcast_to(
            np.array([0.0, 2.0]).reshape(1, 2, 1, 1), (X.shape[0], 2, 1, 1)).copy(),
        b=lambda X: np.zeros(X.shape[0]),
        grad_b=lambda X: np.zeros_like(X),
        hess_b=lambda X: np.zeros((X.shape[0], 1, 1)),
        theta_domain=[(-np.inf, np.inf), (-np.inf, 0.0)],
        param_names=["eta_1", "eta_2"],
        name="gaussian_natural",
    )


INTRACTABLE_CROSS = 0.2
INTRACTABLE_TANH1 = 0.6
INTRACTABLE_SLOT = 4


def intractable_expfam(d=6):
    """Unnormalizable test model with one free coefficient.

    ``log p = -||x||^2 / 2 + 0.2 x_1 sum_{i>=3} x_i + 0.6 tanh(x_1) + theta tanh(x_5)``
    (1-based coordinates).  Requires ``d >= 5``.
    """
    if d < 5:
        raise ConfigError("intractable_expfam needs d >= 5")
    k = INTRACTABLE_SLOT
    tail = np.zeros(d)
    tail[2:] = 1.0
    e1 = np.zeros(d)
    e1[0] = 1.0

    def T(X):
        return np.tanh(X[:, k:k + 1])

    def grad_T(X):
        out = np.zeros((X.shape[0], 1, d))
        out[:, 0, k] = 1.0 - np.tanh(X[:, k]) ** 2
        return out

    def hess_T(X):
        out = np.zeros((X.shape[0], 1, d, d))
        t = np.tanh(X[:, k])
        out[:, 0, k, k] = -2.0 * t * (1.0 - t**2)
        return out

    def b(X):
        return (-0.5 * np.sum(X**2, axis=1) + INTRACTABLE_CROSS * X[:, 0] * (X @ tail)
                + INTRACTABLE_TANH1 * np.tanh(X[:, 0]))

    def grad_b(X):
        g = -X + INTRACTABLE_CROSS * ((X @ tail)[:, None] * e1 + X[:, :1] * tail)
        g[:, 0] += INTRACTABLE_TANH1 * (1.0 - np.tanh(X[:, 0]) ** 2)
        return g

    cross = INTRACTABLE_CROSS * (np.outer(e1, tail) + np.outer(tail, e1)) - np.eye(d)

    def hess_b(X):
        out = np.broadcast_to(cross, (X.shape[0], d, d)).copy()
        t = np.tanh(X[:, 0])
        out[:, 0, 0] += INTRACTABLE_TANH1 * (-2.0 * t * (1.0 - t**2))
        return out

    return ExpFamSpec(d, 1, T, grad_T, hess_T, b, grad_b, hess_b,
                      param_names=["theta"], name="intractable_expfam")


EXPFAM_IDS = ("gaussian_location_expfam", "gaussian_natural", "intractable_expfam")


def builtin_expfam(name, hyper=None):
    hyper = dict(hyper or {})
    if name == "gaussian_location_expfam":
        return gaussian_location_expfam(int(hyper.get("d", 1)))
    if name == "gaussian_natural":
        return gaussian_natural()
    if name == "intractable_expfam":
        return intractable_expfam(int(hyper.get("d", 6)))
    raise ConfigError(f"unknown exponential family {name!r}")


@dataclass
class QuadraticForm:
    """``theta^T A theta + v^T theta + c``."""

    A: np.ndarray
    v: np.ndarray
    c: float

    def __call__(self, theta):
        th = np.asarray(theta, dtype=float)
        return float(th @ self.A @ th + self.v @ th + self.c)

    def grad(self, theta):
        th = np.asarray(theta, dtype=float)
        return (self.A + self.A.T) @ th + self.v


def _require_fixed(m):
    if not dsm_theta_independence_check(m):
        raise ConfigError("closed-form solution needs a diffusion matrix independent of theta")


def _pair_terms(spec, K, m, X, r0, r1):
    """Per-pair ``A``, ``v`` and ``c`` for rows ``[r0, r1)`` against all points.

    Returns arrays shaped ``(rows, n, m, m)``, ``(rows, n, m)``, ``(rows, n)``.
    """
    th0 = np.zeros(spec.dim_theta)
    M = m._eval(X, th0)
    divm = m._div(X, th0)
    gT = spec.grad_T(X)                                  # (n, m, d)
    phi = np.einsum("nij,nti->njt", M, gT)               # (n, d, m)
    s0 = np.einsum("nij,ni->nj", M, spec.grad_b(X))      # (n, d)
    Xa, Ma, phia, s0a, dma = X[r0:r1], M[r0:r1], phi[r0:r1], s0[r0:r1], divm[r0:r1]
    xa = Xa[:, None, :]
    yb = X[None, :, :]
    nr, nb, p = r1 - r0, X.shape[0], spec.dim_theta
    A = np.zeros((nr, nb, p, p))
    v = np.zeros((nr, nb, p))
    c = np.zeros((nr, nb))
    for C, k in K.components:
        kv = k.eval(xa, yb)                 # (nr, nb)
        gx = k.grad_x(xa, yb)               # (nr, nb, d)
        gy = k.grad_y(xa, yb)
        Hxy = k.grad_xy(xa, yb)             # (nr, nb, d, d)
        # D_x = div_x(m(x) K(x, y)), E_y = div_y(m(y) K(y, x))
        Dx = np.einsum("rs,abs->abr", C, kv[..., None] * dma[:, None, :]
                       + np.einsum("aij,abi->abj", Ma, gx))
        Ey = np.einsum("rs,abs->abr", C, kv[..., None] * divm[None, :, :]
                       + np.einsum("bij,abi->abj", M, gy))
        Cphi_b = np.einsum("rs,bst->brt", C, phi)
        Cs0_b = s0 @ C
        A += kv[..., None, None] * np.einsum("art,brs->abts", phia, Cphi_b)
        v += kv[..., None] * (np.einsum("art,br->abt", phia, Cs0_b)
                              + np.einsum("ar,brt->abt", s0a @ C, phi))
        v += np.einsum("abr,art->abt", Ey, phia) + np.einsum("abr,brt->abt", Dx, phi)
        trace = (np.einsum("ar,rs,bks,abk->ab", dma, C, M, gy)
                 + np.einsum("air,rs,bks,abik->ab", Ma, C, M, Hxy))
        c += (kv * np.einsum("ar,br->ab", s0a @ C, s0) + np.einsum("ar,abr->ab", s0a, Ey)
              + np.einsum("abr,br->ab", Dx, s0) + np.einsum("abr,br->ab", Dx, divm) + trace)
    rows = np.arange(nr)
    A[rows, rows + r0] = 0.0
    v[rows, rows + r0] = 0.0
    c[rows, rows + r0] = 0.0
    return A, v, c


def _dksd_pair_rows(spec, K, m, X):
    """Row sums (over ``j != i``) of the pair quadratic coefficients."""
    parts = _backend.parallel_map(
        lambda b: tuple(a.sum(axis=1) for a in _pair_terms(spec, K, m, X, *b)),
        _backend.row_blocks(X.shape[0]))
    return tuple(np.concatenate([pt[i] for pt in parts], axis=0) for i in range(3))


def dksd_quadratic(spec, K, m, sample):
    """U-statistic coefficients of the DKSD loss as a quadratic in theta."""
    m = Identity(spec.dim_x) if m is None else m
    _require_fixed(m)
    X = as_sample(sample, spec.dim_x)
    n = X.shape[0]
    if n < 2:
        raise ConfigError("DKSD needs at least two sample points")
    Ar, vr, cr = _dksd_pair_rows(spec, K, m, X)
    norm = n * (n - 1)
    A = sym(_backend.fsum_rows(Ar) / norm)
    v = _backend.fsum_rows(vr) / norm
    c = _backend.fsum_rows(cr) / norm
    return QuadraticForm(np.atleast_2d(A), np.atleast_1d(v), float(c))


def _dsm_point_terms(spec, m, X):
    th0 = np.zeros(spec.dim_theta)
    S = m._mmT(X, th0)
    divS = m._div_mmT(X, th0)
    gT = spec.grad_T(X)
    gb = spec.grad_b(X)
    A = np.einsum("nti,nij,nsj->nts", gT, S, gT)
    v = (2 * np.einsum("nti,nij,nj->nt", gT, S, gb) + 2 * np.einsum("nti,ni->nt", gT, divS)
         + 2 * np.einsum("nij,ntji->nt", S, spec.hess_T(X)))
    c = (np.einsum("ni,nij,nj->n", gb, S, gb) + 2 * np.einsum("ni,ni->n", divS, gb)
         + 2 * np.einsum("nij,nji->n", S, spec.hess_b(X)))
    return A, v, c


def dsm_quadratic(spec, m, sample):
    """Sample-mean coefficients of the DSM loss as a quadratic in theta."""
    m = Identity(spec.dim_x) if m is None else m
    _require_fixed(m)
    X = as_sample(sample, spec.dim_x)
    A, v, c = _dsm_point_terms(spec, m, X)
    n = X.shape[0]
    return QuadraticForm(np.atleast_2d(sym(_backend.fsum_rows(A) / n)),
                         np.atleast_1d(_backend.fsum_rows(v) / n),
                         float(_backend.fsum_rows(c) / n))


def _factor(A):
    A = sym(np.asarray(A, dtype=float))
    m = A.shape[0]
    eig = np.linalg.eigvalsh(A)
    tr = float(np.trace(A))
    if not (eig.min() > 1e-12 * max(abs(tr), np.finfo(float).tiny) / m):
        raise SingularMatrixError(
            f"quadratic coefficient matrix is not positive definite (min eigenvalue "
            f"{eig.min():.3e}); try a larger sample or a different kernel",
            float(eig.min()),
        )
    return linalg.cho_factor(A, lower=True)


def solve_quadratic(q):
    """Minimizer ``-A^{-1} v / 2`` via Cholesky."""
    return -0.5 * linalg.cho_solve(_factor(q.A), q.v)


def expfam_asymptotic_cov(kind, spec, K, m, sample):
    """Delta-method covariance of ``sqrt(n) (theta_hat - theta*)``.

    With per-observation contributions ``z_i = vbar_i + 2 Abar_i theta_hat``
    (conditional means over the partner index for DKSD, plain point terms for
    DSM), ``theta_hat = -A^{-1} v / 2`` linearizes to

    * DKSD: ``A^{-1} Cov(z) A^{-1}`` (the U-statistic doubles each projection),
    * DSM: ``A^{-1} Cov(z) A^{-1} / 4``.
    """
    m = Identity(spec.dim_x) if m is None else m
    X = as_sample(sample, spec.dim_x)
    n = X.shape[0]
    if kind == "dksd":
        q = dksd_quadratic(spec, K, m, X)
        Ar, vr, _ = _dksd_pair_rows(spec, K, m, X)
        Abar, vbar = sym(Ar) / (n - 1), vr / (n - 1)
        scale = 1.0
    elif kind == "dsm":
        q = dsm_quadratic(spec, m, X)
        Abar, vbar, _ = _dsm_point_terms(spec, m, X)
        Abar = sym(Abar)
        scale = 0.25
    else:
        raise ConfigError(f"unknown estimator kind {kind!r}")
    th = solve_quadratic(q)
    z = vbar + 2.0 * np.einsum("nts,s->nt", Abar, th)
    z = z - z.mean(axis=0)
    Sigma = np.einsum("nt,ns->ts", z, z) / n
    fac = _factor(q.A)
    left = linalg.cho_solve(fac, Sigma)
    return sym(scale * linalg.cho_solve(fac, left.T))
