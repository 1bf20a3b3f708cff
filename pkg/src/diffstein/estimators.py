"""Empirical DKSD, DSM and SM losses with gradients and information matrices.

Conventions
-----------
* DKSD loss: U-statistic ``(n(n-1))^{-1} sum_{i != j} k0(X_i, X_j)``.
* DSM loss: ``n^{-1} sum_i F(X_i)`` with
  ``F = ||m^T u||^2 + 2 <div(m m^T), u> + 2 tr(m m^T H)``, ``u`` the score and
  ``H`` its Jacobian.
* SM loss: ``n^{-1} sum_i (tr H + ||u||^2 / 2)``, so DSM with ``m = I`` equals
  twice SM.

Information matrices are plug-in estimates that average over the data sample.
Near the optimum of a well-specified model this matches the expectation under
the model; away from it the estimate is biased.

Both population losses have Hessian ``2 g`` at a well-specified optimum, where
``g`` is the information matrix.  :func:`sandwich_covariance` accounts for
this: it returns the asymptotic covariance of ``sqrt(n) (theta_hat - theta*)``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from . import _backend
from ._arrays import as_sample, sym
from .diffusion import Identity, dsm_theta_independence_check
from .errors import ConfigError, NumericalError, SingularMatrixError
from .steinkern import SteinKernelCtx

RIDGE_REL = 1e-6


@dataclass
class LossReport:
    value: float
    grad: Optional[np.ndarray] = None
    info_matrix: Optional[np.ndarray] = None
    n_used: int = 0


def regularized_solve(G, b, ridge_rel=RIDGE_REL):
    """Solve ``(G + lam I) x = b`` with ``lam = ridge_rel * tr(G) / m``.

    ``G`` is symmetrized first.  Raises :class:`SingularMatrixError` when the
    Cholesky factorization fails even with the ridge.
    """
    G = sym(np.atleast_2d(np.asarray(G, dtype=float)))
    m = G.shape[0]
    tr = float(np.trace(G))
    lam = ridge_rel * tr / m if tr > 0 else 0.0
    A = G + lam * np.eye(m)
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        min_eig = float(np.linalg.eigvalsh(G).min()) if np.all(np.isfinite(G)) else float("nan")
        raise SingularMatrixError(
            f"information matrix is singular beyond regularization (min eigenvalue {min_eig:.3e})",
            min_eig,
        ) from exc
    return linalg.cho_solve(factor, b)


def _ctx_for(ctx, sample):
    if sample is None:
        if ctx.sample is None:
            raise ConfigError("no sample supplied")
        return ctx
    X = as_sample(sample, ctx.model.dim_x)
    if ctx.sample is not None and X.shape == ctx.sample.shape and np.array_equal(X, ctx.sample):
        return ctx
    return SteinKernelCtx(ctx.model, ctx.kernel, ctx.diffusion, ctx.theta, X,
                          ctx.backend, ctx.fd_theta)


def _check_finite(val, what):
    if not np.all(np.isfinite(val)):
        raise NumericalError(f"non-finite {what}")
    return val


def _pairs_n(ctx):
    n = ctx.sample.shape[0]
    if n < 2:
        raise ConfigError("DKSD needs at least two sample points")
    return n


def dksd_loss(ctx, sample=None):
    """U-statistic estimate of the squared DKSD."""
    ctx = _ctx_for(ctx, sample)
    n = _pairs_n(ctx)
    val = _backend.fsum_rows(ctx.row_sums()) / (n * (n - 1))
    return float(_check_finite(val, "DKSD loss"))


def dksd_grad(ctx, sample=None):
    ctx = _ctx_for(ctx, sample)
    n = _pairs_n(ctx)
    g = _backend.fsum_rows(ctx.grad_row_sums()) / (n * (n - 1))
    return _check_finite(np.atleast_1d(g), "DKSD gradient")


def dksd_info_matrix(ctx, sample=None):
    """U-statistic of ``b_t(x)^T K(x, y) b_s(y)`` with ``b_t = m^T d_t grad log p``."""
    ctx = _ctx_for(ctx, sample)
    n = _pairs_n(ctx)
    G = _backend.fsum_rows(ctx.info_row_sums()) / (n * (n - 1))
    return _check_finite(sym(np.atleast_2d(G)), "DKSD information matrix")


def dksd_report(ctx, sample=None, grad=True, info=False):
    ctx = _ctx_for(ctx, sample)
    return LossReport(
        dksd_loss(ctx),
        dksd_grad(ctx) if grad else None,
        dksd_info_matrix(ctx) if info else None,
        ctx.sample.shape[0],
    )


# ----------------------------------------------------------------------
# DSM / SM

def _dsm_parts(model, m, theta, sample):
    if not dsm_theta_independence_check(m):
        raise ConfigError("DSM requires a diffusion matrix that does not depend on theta")
    X = as_sample(sample, model.dim_x)
    th = model.check_theta(theta)
    return X, th


def dsm_pointwise(model, m, theta, sample, grad=False):
    """Per-point ``F`` values and optionally their theta-gradients ``(n, p)``."""
    X, th = _dsm_parts(model, m, theta, sample)
    u = model._score(X, th)
    H = model._hess(X, th)
    M = m._eval(X, th)
    S = m._mmT(X, th)
    divS = m._div_mmT(X, th)
    mu = np.einsum("nij,ni->nj", M, u)
    F = (np.einsum("nj,nj->n", mu, mu) + 2 * np.einsum("nj,nj->n", divS, u)
         + 2 * np.einsum("nij,nji->n", S, H))
    if not grad:
        return F
    du = model._dscore(X, th)
    dH = model._dhess(X, th)
    mdu = np.einsum("nij,nti->ntj", M, du)
    gF = (2 * np.einsum("nj,ntj->nt", mu, mdu) + 2 * np.einsum("nj,ntj->nt", divS, du)
          + 2 * np.einsum("nij,ntji->nt", S, dH))
    return F, gF


def dsm_loss(model, m, theta, sample):
    F = dsm_pointwise(model, m, theta, sample)
    return float(_check_finite(_backend.fsum_rows(F) / F.size, "DSM loss"))


def dsm_grad(model, m, theta, sample):
    _, gF = dsm_pointwise(model, m, theta, sample, grad=True)
    return _check_finite(_backend.fsum_rows(gF) / gF.shape[0], "DSM gradient")


def dsm_info_matrix(model, m, theta, sample):
    """Sample mean of ``<m^T d_i grad log p, m^T d_j grad log p>``."""
    X, th = _dsm_parts(model, m, theta, sample)
    B = np.einsum("nij,nti->ntj", m._eval(X, th), model._dscore(X, th))
    G = _backend.fsum_rows(np.einsum("nti,nsi->nts", B, B)) / X.shape[0]
    return _check_finite(sym(np.atleast_2d(G)), "DSM information matrix")


def sm_loss(model, theta, sample):
    """Score-matching objective ``mean(tr H + ||u||^2 / 2)``."""
    X = as_sample(sample, model.dim_x)
    th = model.check_theta(theta)
    u = model._score(X, th)
    H = model._hess(X, th)
    vals = np.trace(H, axis1=1, axis2=2) + 0.5 * np.sum(u**2, axis=1)
    return float(_check_finite(_backend.fsum_rows(vals) / X.shape[0], "SM loss"))


def sm_grad(model, theta, sample):
    return 0.5 * dsm_grad(model, Identity(model.dim_x), theta, sample)


# ----------------------------------------------------------------------
# asymptotic covariance

def dksd_sandwich(ctx, sample=None, ridge_rel=RIDGE_REL):
    """``g^{-1} Sigma g^{-1}`` with ``Sigma = mean_i h_i h_i^T`` and
    ``h_i = mean_{j != i} grad_theta k0(X_i, X_j)`` (not centered)."""
    ctx = _ctx_for(ctx, sample)
    n = _pairs_n(ctx)
    h = ctx.grad_row_sums() / (n - 1)
    Sigma = _backend.fsum_rows(np.einsum("nt,ns->nts", h, h)) / n
    G = dksd_info_matrix(ctx)
    return _congruence(G, np.atleast_2d(Sigma), ridge_rel)


def dsm_sandwich(model, m, theta, sample, ridge_rel=RIDGE_REL):
    """``(2g)^{-1} Sigma (2g)^{-1}`` with ``Sigma = mean grad F grad F^T``.

    The factor two is the ratio between the loss Hessian and the information
    matrix ``g``.
    """
    _, gF = dsm_pointwise(model, m, theta, sample, grad=True)
    Sigma = _backend.fsum_rows(np.einsum("nt,ns->nts", gF, gF)) / gF.shape[0]
    G = dsm_info_matrix(model, m, theta, sample)
    return _congruence(2.0 * G, np.atleast_2d(Sigma), ridge_rel)


def _congruence(G, Sigma, ridge_rel):
    left = regularized_solve(G, Sigma, ridge_rel)
    cov = regularized_solve(G, left.T, ridge_rel)
    return sym(cov)


def sandwich_covariance(kind, *args, **kwargs):
    """Dispatch on ``kind``.

    ``sandwich_covariance("dksd", ctx, sample)`` or
    ``sandwich_covariance("dsm", model, m, theta, sample)``; ``"sm"`` is DSM
    with the identity diffusion and takes ``(model, theta, sample)``.
    """
    if kind in ("dksd", "ksd", "nnksd"):
        return dksd_sandwich(*args, **kwargs)
    if kind in ("dsm", "nnsm"):
        return dsm_sandwich(*args, **kwargs)
    if kind == "sm":
        model, theta, sample = args
        return dsm_sandwich(model, Identity(model.dim_x), theta, sample, **kwargs)
    raise ConfigError(f"unknown estimator kind {kind!r}")


# ----------------------------------------------------------------------
# loss bundles used by the optimizer, grid scans and the harness

class LossBundle:
    """Uniform ``loss / grad / info`` interface over a parameter vector."""

    kind = "base"

    def __init__(self, model):
        self.model = model
        self.dim_theta = model.dim_theta

    def loss(self, theta, X):
        raise NotImplementedError

    def grad(self, theta, X):
        raise NotImplementedError

    def info(self, theta, X):
        raise NotImplementedError

    def loss_grad_info(self, theta, X, want_info=True):
        return self.loss(theta, X), self.grad(theta, X), (self.info(theta, X) if want_info else None)

    def sandwich(self, theta, X):
        raise NotImplementedError


class DKSDBundle(LossBundle):
    kind = "dksd"

    def __init__(self, model, kernel, diffusion=None, backend=None):
        super().__init__(model)
        self.kernel = kernel
        self.diffusion = Identity(model.dim_x) if diffusion is None else diffusion
        self.backend = backend

    def ctx(self, theta, X):
        return SteinKernelCtx(self.model, self.kernel, self.diffusion, theta, X, self.backend)

    def loss(self, theta, X):
        return dksd_loss(self.ctx(theta, X))

    def grad(self, theta, X):
        return dksd_grad(self.ctx(theta, X))

    def info(self, theta, X):
        return dksd_info_matrix(self.ctx(theta, X))

    def loss_grad_info(self, theta, X, want_info=True):
        c = self.ctx(theta, X)
        return dksd_loss(c), dksd_grad(c), (dksd_info_matrix(c) if want_info else None)

    def sandwich(self, theta, X):
        return dksd_sandwich(self.ctx(theta, X))


class DSMBundle(LossBundle):
    kind = "dsm"

    def __init__(self, model, diffusion=None, factor=1.0):
        super().__init__(model)
        self.diffusion = Identity(model.dim_x) if diffusion is None else diffusion
        if not dsm_theta_independence_check(self.diffusion):
            raise ConfigError("DSM requires a diffusion matrix that does not depend on theta")
        self.factor = float(factor)

    def loss(self, theta, X):
        return self.factor * dsm_loss(self.model, self.diffusion, theta, X)

    def grad(self, theta, X):
        return self.factor * dsm_grad(self.model, self.diffusion, theta, X)

    def info(self, theta, X):
        return self.factor * dsm_info_matrix(self.model, self.diffusion, theta, X)

    def sandwich(self, theta, X):
        return dsm_sandwich(self.model, self.diffusion, theta, X)


class SMBundle(DSMBundle):
    """Score matching, i.e. half of DSM with the identity diffusion."""

    kind = "sm"

    def __init__(self, model):
        super().__init__(model, Identity(model.dim_x), factor=0.5)

    def loss(self, theta, X):
        return sm_loss(self.model, theta, X)
