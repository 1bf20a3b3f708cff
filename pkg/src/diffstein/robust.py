"""Influence functions of the minimum-discrepancy estimators.

With loss Hessian ``2 g`` at the optimum (``g`` the information matrix), a
point mass ``eps`` at ``z`` moves the estimate by ``eps * IF(z)`` with

* DKSD: ``IF(z) = -g^{-1} mean_j grad_theta k0(z, X_j)``;
* DSM:  ``IF(z) = -g^{-1} grad_theta F(z) / 2``.

Expectations under the model are replaced by sample averages, which is valid
near the optimum of a well-specified fit.  Boundedness of the DKSD influence
additionally relies on integrability of the kernel terms; those conditions
are properties of the chosen kernel, diffusion and model and are not checked
at runtime.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _backend
from ._arrays import as_sample
from .diffusion import Identity
from .errors import ConfigError, DiffSteinError
from .estimators import (
    dksd_info_matrix,
    dsm_info_matrix,
    dsm_loss,
    dsm_pointwise,
    regularized_solve,
)
from .steinkern import SteinKernelCtx


def _points(z, d):
    Z = np.asarray(z, dtype=float)
    if Z.ndim == 0:
        Z = Z.reshape(1, 1)
    elif Z.ndim == 1:
        Z = Z.reshape(-1, 1) if d == 1 else Z.reshape(1, d)
    if Z.shape[1] != d:
        raise ConfigError(f"influence points must have dimension {d}")
    return Z


def _dksd_curve(ctx, sample, Z):
    if sample is not None:
        ctx = SteinKernelCtx(ctx.model, ctx.kernel, ctx.diffusion, ctx.theta,
                             as_sample(sample, ctx.model.dim_x), ctx.backend)
    X = ctx.sample
    G = dksd_info_matrix(ctx)
    rows = ctx.grad_row_sums(Z, X, exclude=False) / X.shape[0]
    return -regularized_solve(G, rows.T).T


def _dsm_curve(model, m, theta, sample, Z):
    G = dsm_info_matrix(model, m, theta, sample)
    _, gF = dsm_pointwise(model, m, theta, Z, grad=True)
    return -regularized_solve(G, 0.5 * gF.T).T


def influence_dksd(ctx, sample, z):
    """Influence of a point mass at ``z`` on the DKSD estimate at ``ctx.theta``."""
    Z = _points(z, ctx.model.dim_x)
    return _dksd_curve(ctx, sample, Z)[0]


def influence_dsm(model, m, theta, sample, z):
    """Influence of a point mass at ``z`` on the DSM estimate at ``theta``."""
    m = Identity(model.dim_x) if m is None else m
    Z = _points(z, model.dim_x)
    return _dsm_curve(model, m, theta, sample, Z)[0]


@dataclass
class InfluenceCurve:
    z: np.ndarray
    values: np.ndarray
    errors: list

    @property
    def norm(self):
        return np.sqrt(np.sum(self.values**2, axis=1))

    def to_csv(self, path):
        d, p = self.z.shape[1], self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"z_{i}" for i in range(d)] + [f"if_{i}" for i in range(p)] + ["if_norm"])
            for zz, vv, nn in zip(self.z, self.values, self.norm):
                vals = [repr(float(a)) for a in zz]
                if np.all(np.isfinite(vv)):
                    vals += [repr(float(a)) for a in vv] + [repr(float(nn))]
                else:
                    vals += [""] * (p + 1)
                w.writerow(vals)


def influence_curve(kind, fitted, sample, z_grid):
    """Influence over a grid of contamination points.

    ``fitted`` is a :class:`SteinKernelCtx` for ``"dksd"``, a tuple
    ``(model, m, theta)`` for ``"dsm"`` and ``(model, theta)`` for ``"sm"``.
    Grid points whose evaluation fails are reported as NaN rows.
    """
    if kind == "dksd":
        d = fitted.model.dim_x
        fn = lambda Z: _dksd_curve(fitted, sample, Z)  # noqa: E731
    elif kind in ("dsm", "sm"):
        if kind == "sm":
            model, theta = fitted
            m = Identity(model.dim_x)
        else:
            model, m, theta = fitted
        d = model.dim_x
        fn = lambda Z: _dsm_curve(model, m, theta, sample, Z)  # noqa: E731
    else:
        raise ConfigError(f"unknown estimator kind {kind!r}")
    Z = _points(z_grid, d)
    try:
        return InfluenceCurve(Z, fn(Z), [None] * Z.shape[0])
    except DiffSteinError:
        pass
    vals, errs = [], []
    for zz in Z:
        try:
            vals.append(fn(zz[None, :])[0])
            errs.append(None)
        except DiffSteinError as exc:
            vals.append(None)
            errs.append(str(exc))
    p = next((v.size for v in vals if v is not None), 1)
    arr = np.array([np.full(p, np.nan) if v is None else v for v in vals])
    return InfluenceCurve(Z, arr, errs)


# ----------------------------------------------------------------------
# contamination refits (finite-eps check of the influence function)

def weighted_dksd_loss(ctx, X, z, eps):
    """DKSD U-statistic for the mixture ``(1 - eps) Q_n + eps delta_z``.

    Off-diagonal pairs are weighted by ``w_a w_b`` and normalized by
    ``1 - sum w_a^2``; ``eps = 0`` gives the ordinary U-statistic.
    """
    Z = _points(z, X.shape[1])
    Xa = np.vstack([X, Z])
    n = X.shape[0]
    w = np.concatenate([np.full(n, (1 - eps) / n), [eps]])
    c = SteinKernelCtx(ctx.model, ctx.kernel, ctx.diffusion, ctx.theta, Xa, ctx.backend)
    K0 = c.matrix()
    np.fill_diagonal(K0, 0.0)
    val = _backend.fsum_rows(w * (K0 @ w))
    return val / (1.0 - float(w @ w))


def _refit(fun, theta0):
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if theta0.size == 1:
        span = 1.0
        res = optimize.minimize_scalar(lambda t: fun(np.array([t])),
                                       bounds=(theta0[0] - span, theta0[0] + span),
                                       method="bounded", options={"xatol": 1e-10})
        return np.array([res.x])
    res = optimize.minimize(fun, theta0, method="BFGS", options={"gtol": 1e-10})
    return res.x


def contamination_shift(kind, fitted, sample, z, eps, theta0):
    """``(theta_eps - theta_0) / eps`` from explicit refits on the mixture.

    ``theta0`` is the uncontaminated estimate.  ``fitted`` is as in
    :func:`influence_curve`.
    """
    X = as_sample(sample)
    if kind == "dksd":
        def fun(th):
            return weighted_dksd_loss(fitted.with_theta(th), X, z, eps)
    else:
        if kind == "sm":
            model, _ = fitted
            m = Identity(model.dim_x)
        else:
            model, m, _ = fitted
        Z = _points(z, model.dim_x)

        def fun(th):
            return (1 - eps) * dsm_loss(model, m, th, X) + eps * dsm_loss(model, m, th, Z)
    th_eps = _refit(fun, theta0)
    return (th_eps - np.asarray(theta0, dtype=float)) / eps
