"""The diffusion Stein kernel and its theta-gradient.

For a matrix kernel ``K``, a diffusion field ``m`` and a model with score
``u = grad log p``, the Stein kernel is

    k0(x, y) = sum_{i,k} (p(x) p(y))^{-1} d_{x_i} d_{y_k} [p(x) p(y) A_ik(x, y)],
    A(x, y)  = m(x) K(x, y) m(y)^T.

The fast path (``_pairs`` / ``_pairs_ext``) exploits ``K = sum_c C_c k_c``
with radial ``k_c`` and per-point features ``P = m^T u + div m``; the dense
routine :func:`stein_kernel_dense` materializes every derivative tensor and
serves as the reference implementation.
"""

import math

import numpy as np

from . import _backend
from ._arrays import as_batch, as_sample
from .diffusion import DiffusionMatrix, Identity, WeightedDiffusion
from .errors import ConfigError, DomainError
from .kernel import GaussianKernel, MatrixKernel, ScaledKernel

_EPS = np.finfo(float).eps


class PointFeatures:
    """Per-point quantities for a batch of points at a fixed theta."""

    __slots__ = ("X", "score", "M", "divm", "P", "_ctx", "_grad")

    def __init__(self, ctx, X):
        model, diff, th = ctx.model, ctx.diffusion, ctx.theta
        self.X = np.ascontiguousarray(X)
        self.score = model._score(self.X, th)
        self.M = np.ascontiguousarray(diff._eval(self.X, th))
        self.divm = diff._div(self.X, th)
        self.P = np.ascontiguousarray(np.einsum("nij,ni->nj", self.M, self.score) + self.divm)
        self._ctx = ctx
        self._grad = None

    def grad(self):
        """``(dP, dM, B)`` with shapes ``(n,p,d)``, ``(n,p,d,d)``, ``(n,p,d)``.

        ``B[:, t] = m^T d_t u`` is the integrand row of the information matrix.
        """
        if self._grad is None:
            model, diff, th = self._ctx.model, self._ctx.diffusion, self._ctx.theta
            du = model._dscore(self.X, th)
            B = np.einsum("nij,nti->ntj", self.M, du)
            if diff.theta_dependent:
                dM = diff._dtheta(self.X, th)
                ddm = diff._dtheta_div(self.X, th)
                dP = np.einsum("ntij,ni->ntj", dM, self.score) + B + ddm
            else:
                n, d = self.X.shape
                dM = np.zeros((n, th.size, d, d))
                dP = B
            self._grad = (np.ascontiguousarray(dP), np.ascontiguousarray(dM),
                          np.ascontiguousarray(B))
        return self._grad


class SteinKernelCtx:
    """Immutable bundle of model, kernel, diffusion and parameter value.

    Parameters
    ----------
    model : ModelSpec
    kernel : MatrixKernel
    diffusion : DiffusionMatrix, optional
        Defaults to the identity field.
    theta : array_like
    sample : array_like, optional
        When given, point features for the sample are computed once and reused.
    backend : {"python", "compiled"}, optional
        Pair-loop implementation; defaults to the import-time selection.
    fd_theta : bool
        Use central differences in theta instead of the analytic gradient.
    """

    def __init__(self, model, kernel, diffusion=None, theta=None, sample=None,
                 backend=None, fd_theta=False):
        if not isinstance(kernel, MatrixKernel):
            raise ConfigError("kernel must be a MatrixKernel")
        d = model.dim_x
        if kernel.dim != d:
            raise ConfigError(f"kernel dimension {kernel.dim} does not match model dimension {d}")
        diffusion = Identity(d) if diffusion is None else diffusion
        if not isinstance(diffusion, DiffusionMatrix) or diffusion.dim != d:
            raise ConfigError("diffusion dimension does not match model")
        self.model = model
        self.kernel = kernel
        self.diffusion = diffusion
        self.theta = model.check_theta(theta)
        self.backend = backend
        self.fd_theta = fd_theta
        self._packed = kernel.packed()
        self._pairs = _backend.get_pairs(backend)
        self.sample = None
        self._sample_feats = None
        if sample is not None:
            self.sample = as_sample(sample, d)
            self._sample_feats = PointFeatures(self, self.sample)

    def with_theta(self, theta):
        return SteinKernelCtx(self.model, self.kernel, self.diffusion, theta,
                              self.sample, self.backend, self.fd_theta)

    def features(self, X=None):
        if X is None:
            if self._sample_feats is None:
                raise ConfigError("context has no sample")
            return self._sample_feats
        if self.sample is not None and X is self.sample:
            return self._sample_feats
        return PointFeatures(self, as_sample(X, self.model.dim_x))

    # ------------------------------------------------------------------
    def matrix(self, X=None, Y=None):
        """Stein-kernel values ``k0(X_i, Y_j)`` as an ``(n, m)`` array."""
        fa = self.features(X)
        fb = fa if Y is None else self.features(Y)
        C, kinds, params = self._packed
        n = fa.X.shape[0]
        return _backend.blocked_rows(
            lambda r0, r1: self._pairs.stein_matrix(
                fa.X, fa.P, fa.M, fb.X, fb.P, fb.M, C, kinds, params, r0, r1, False),
            n)

    def row_sums(self, X=None, Y=None, exclude=None):
        """``sum_j k0(X_i, Y_j)`` per row; the diagonal is skipped for a single set."""
        fa = self.features(X)
        same = Y is None
        fb = fa if same else self.features(Y)
        exclude = same if exclude is None else exclude
        C, kinds, params = self._packed
        return _backend.blocked_rows(
            lambda r0, r1: self._pairs.stein_rows(
                fa.X, fa.P, fa.M, fb.X, fb.P, fb.M, C, kinds, params, r0, r1, exclude),
            fa.X.shape[0])

    def grad_row_sums(self, X=None, Y=None, exclude=None):
        """``sum_j grad_theta k0(X_i, Y_j)`` per row, shape ``(n, p)``."""
        if self.fd_theta:
            return self._fd_grad_rows(X, Y, exclude)
        fa = self.features(X)
        same = Y is None
        fb = fa if same else self.features(Y)
        exclude = same if exclude is None else exclude
        dPa, dMa, _ = fa.grad()
        dPb, dMb, _ = fb.grad()
        C, kinds, params = self._packed
        m_dep = bool(self.diffusion.theta_dependent)
        return _backend.blocked_rows(
            lambda r0, r1: self._pairs.stein_grad_rows(
                fa.X, fa.P, fa.M, dPa, dMa, fb.X, fb.P, fb.M, dPb, dMb,
                C, kinds, params, r0, r1, exclude, m_dep),
            fa.X.shape[0])

    def info_row_sums(self, X=None, exclude=True):
        """``sum_j b(X_i)^T K(X_i, X_j) b(X_j)`` per row, shape ``(n, p, p)``."""
        fa = self.features(X)
        _, _, B = fa.grad()
        C, kinds, params = self._packed
        return _backend.blocked_rows(
            lambda r0, r1: self._pairs.info_rows(fa.X, B, fa.X, B, C, kinds, params,
                                                 r0, r1, exclude),
            fa.X.shape[0])

    def _fd_grad_rows(self, X, Y, exclude):
        th = self.theta
        cols = []
        for t in range(th.size):
            h = _EPS ** (1 / 3) * max(1.0, abs(th[t]))
            tp, tm = th.copy(), th.copy()
            tp[t] += h
            tm[t] -= h
            cp = SteinKernelCtx(self.model, self.kernel, self.diffusion, tp, self.sample, self.backend)
            cm = SteinKernelCtx(self.model, self.kernel, self.diffusion, tm, self.sample, self.backend)
            Xs = None if X is None else X
            cols.append((cp.row_sums(Xs, Y, exclude) - cm.row_sums(Xs, Y, exclude)) / (tp[t] - tm[t]))
        return np.stack(cols, axis=1)


def _pair_points(ctx, x, y):
    d = ctx.model.dim_x
    X, _ = as_batch(x, d)
    Y, _ = as_batch(y, d)
    if X.shape[0] != 1 or Y.shape[0] != 1:
        raise DomainError("stein_kernel takes single points; use SteinKernelCtx.matrix for batches")
    return X, Y


def stein_kernel(ctx, x, y):
    """``k0(x, y)`` for single points."""
    X, Y = _pair_points(ctx, x, y)
    return float(ctx.matrix(X, Y)[0, 0])


def stein_kernel_grad_theta(ctx, x, y):
    """``grad_theta k0(x, y)`` for single points."""
    X, Y = _pair_points(ctx, x, y)
    return ctx.grad_row_sums(X, Y, exclude=False)[0]


def stein_kernel_dense(ctx, x, y):
    """Reference evaluation from full derivative tensors (no structural shortcuts)."""
    X, Y = _pair_points(ctx, x, y)
    model, K, diff, th = ctx.model, ctx.kernel, ctx.diffusion, ctx.theta
    ux, uy = model._score(X, th)[0], model._score(Y, th)[0]
    mx, my = diff._eval(X, th)[0], diff._eval(Y, th)[0]
    Jx, Jy = diff._jac(X, th)[0], diff._jac(Y, th)[0]   # [i, j, a] = d_a m_ij
    x0, y0 = X[0], Y[0]
    Kv = K.eval(x0, y0)
    Kx = K.grad_x(x0, y0)       # [a, j, l]
    Ky = K.grad_y(x0, y0)       # [b, j, l]
    Kxy = K.grad_xy(x0, y0)     # [a, b, j, l]
    A = np.einsum("ij,jl,kl->ik", mx, Kv, my)
    dxA = (np.einsum("ija,jl,kl->aik", Jx, Kv, my)
           + np.einsum("ij,ajl,kl->aik", mx, Kx, my))
    dyA = (np.einsum("ij,bjl,kl->bik", mx, Ky, my)
           + np.einsum("ij,jl,klb->bik", mx, Kv, Jy))
    dxyA = (np.einsum("ija,bjl,kl->abik", Jx, Ky, my)
            + np.einsum("ija,jl,klb->abik", Jx, Kv, Jy)
            + np.einsum("ij,abjl,kl->abik", mx, Kxy, my)
            + np.einsum("ij,ajl,klb->abik", mx, Kx, Jy))
    val = (ux @ A @ uy
           + np.einsum("i,kik->", ux, dyA)
           + np.einsum("k,iik->", uy, dxA)
           + np.einsum("ikik->", dxyA))
    return float(val)


class KnownDensity:
    """A fully specified density given by its log-density and score."""

    def __init__(self, logpdf, score):
        self.logpdf = logpdf
        self.score = score


def gaussian_density(mean, var):
    """Isotropic Gaussian ``N(mean, var I)`` as a :class:`KnownDensity`."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.size

    def logpdf(X):
        X = np.atleast_2d(X)
        return -0.5 * np.sum((X - mean) ** 2, axis=1) / var - 0.5 * d * np.log(2 * np.pi * var)

    def score(X):
        return -(np.atleast_2d(X) - mean) / var

    return KnownDensity(logpdf, score)


def dsm_limit_check(model, theta, q, sample, gammas, diffusion=None, weights=None):
    """Gap between DKSD with a shrinking density-weighted kernel and DSM.

    The kernel is ``Phi_gamma(x - y) / sqrt(q(x) q(y)) I`` with
    ``Phi_gamma`` the ``N(0, gamma^2 I)`` density.  Folding ``q^{-1/2}`` into
    the diffusion gives an equivalent DKSD with a scaled Gaussian kernel.
    The DSM reference value is the sample mean of
    ``||m^T (grad log p - grad log q)||^2`` over the same sample.

    With ``weights`` the points are treated as quadrature nodes for ``Q``:
    both discrepancies become weighted sums (the double sum keeps its
    diagonal), which evaluates the population values instead of the
    Monte Carlo estimates.

    Returns one absolute gap per entry of ``gammas``.
    """
    X = as_sample(sample, model.dim_x)
    d = model.dim_x
    th = model.check_theta(theta)
    m = Identity(d) if diffusion is None else diffusion
    logq = np.asarray(q.logpdf(X), dtype=float)
    if not np.all(np.isfinite(logq)):
        raise DomainError("q evaluates to zero at a sample point")

    def weight(Z):
        return np.exp(-0.5 * np.asarray(q.logpdf(Z), dtype=float))

    def grad_weight(Z):
        return -0.5 * weight(Z)[:, None] * q.score(Z)

    wm = WeightedDiffusion(m, weight, grad_weight)
    M = m._eval(X, th)
    diff = model._score(X, th) - q.score(X)
    r = np.einsum("nij,ni->nj", M, diff)
    n = X.shape[0]
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or not w.sum() > 0:
            raise ConfigError("weights must be non-negative, one per point, with positive sum")
        w = w / math.fsum(w)
        dsm_value = _backend.fsum_rows(w * np.sum(r**2, axis=1))
    else:
        dsm_value = _backend.fsum_rows(np.sum(r**2, axis=1)) / n
    gaps = []
    for g in gammas:
        scale = (2 * np.pi * g * g) ** (-d / 2)
        K = ScaledKernel(scale * np.eye(d), GaussianKernel(g))
        ctx = SteinKernelCtx(model, K, wm, th, X)
        if weights is not None:
            rows = _backend.blocked_rows(lambda r0, r1: ctx.matrix(X[r0:r1], X) @ w, n)
            u = _backend.fsum_rows(w * rows)
        else:
            u = _backend.fsum_rows(ctx.row_sums()) / (n * (n - 1))
        gaps.append(abs(u - dsm_value))
    return gaps
