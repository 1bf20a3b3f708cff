"""Unnormalized parametric models and their derivatives.

Every model exposes the log-density up to an additive constant together with
the derivatives needed by the Stein-type losses:

=====================  ==================  ==================================
method                 batched shape       meaning
=====================  ==================  ==================================
``log_density_unnorm`` ``(n,)``            log p(x; theta) + const
``score_x``            ``(n, d)``          gradient in x
``hess_x``             ``(n, d, d)``       Hessian in x
``grad_theta_score``   ``(n, m, d)``       row t = d/dtheta_t of the score
``grad_theta_hess``    ``(n, m, d, d)``    d/dtheta_t of the Hessian
=====================  ==================  ==================================

A single point of shape ``(d,)`` returns the same arrays without the leading
axis.
"""

import numpy as np
from scipy import special

from ._arrays import as_batch, unbatch
from .errors import ConfigError, DomainError, NumericalError

_EPS = np.finfo(float).eps


class ModelSpec:
    """Base class for unnormalized models.

    Subclasses implement the underscore methods on 2-d batches with a
    validated parameter vector; the public methods handle shapes and checks.
    """

    name = "model"

    def __init__(self, dim_x, dim_theta, theta_domain=None, param_names=None):
        self.dim_x = int(dim_x)
        self.dim_theta = int(dim_theta)
        if theta_domain is None:
            theta_domain = [(-np.inf, np.inf)] * self.dim_theta
        if len(theta_domain) != self.dim_theta:
            raise ConfigError("theta_domain length does not match dim_theta")
        self.theta_domain = [tuple(map(float, b)) for b in theta_domain]
        self.param_names = list(param_names or [f"theta_{i}" for i in range(self.dim_theta)])

    def __repr__(self):
        return f"{type(self).__name__}(dim_x={self.dim_x}, dim_theta={self.dim_theta})"

    def check_theta(self, theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        if th.shape != (self.dim_theta,):
            raise DomainError(f"theta has shape {th.shape}, expected ({self.dim_theta},)")
        if not np.all(np.isfinite(th)):
            raise DomainError("theta has non-finite entries")
        for i, (lo, hi) in enumerate(self.theta_domain):
            if not lo < th[i] < hi:
                raise DomainError(
                    f"{self.param_names[i]}={th[i]!r} outside ({lo}, {hi})"
                )
        return th

    def _call(self, fn, x, theta):
        X, single = as_batch(x, self.dim_x)
        return unbatch(fn(X, self.check_theta(theta)), single)

    def log_density_unnorm(self, x, theta):
        return self._call(self._logp, x, theta)

    def score_x(self, x, theta):
        return self._call(self._score, x, theta)

    def hess_x(self, x, theta):
        return self._call(self._hess, x, theta)

    def grad_theta_score(self, x, theta):
        return self._call(self._dscore, x, theta)

    def grad_theta_hess(self, x, theta):
        return self._call(self._dhess, x, theta)

    def _logp(self, X, th):
        raise NotImplementedError

    def _score(self, X, th):
        raise NotImplementedError

    def _hess(self, X, th):
        raise NotImplementedError

    def _dscore(self, X, th):
        raise NotImplementedError

    def _dhess(self, X, th):
        raise NotImplementedError

    def pinned(self, theta_full, free):
        """Restrict the parameter vector to the coordinates listed in ``free``."""
        return PinnedModel(self, theta_full, free)


class PinnedModel(ModelSpec):
    """View of a model with some parameters held at fixed values."""

    def __init__(self, base, theta_full, free):
        self.base = base
        self.theta_full = base.check_theta(theta_full).copy()
        self.free = np.asarray(sorted(int(i) for i in free), dtype=int)
        if self.free.size == 0 or len(set(self.free)) != self.free.size:
            raise ConfigError("free index list must be non-empty and unique")
        if self.free.min() < 0 or self.free.max() >= base.dim_theta:
            raise ConfigError("free index out of range")
        super().__init__(
            base.dim_x,
            self.free.size,
            [base.theta_domain[i] for i in self.free],
            [base.param_names[i] for i in self.free],
        )
        self.name = base.name

    def embed(self, theta):
        full = self.theta_full.copy()
        full[self.free] = theta
        return full

    def _logp(self, X, th):
        return self.base._logp(X, self.embed(th))

    def _score(self, X, th):
        return self.base._score(X, self.embed(th))

    def _hess(self, X, th):
        return self.base._hess(X, self.embed(th))

    def _dscore(self, X, th):
        return self.base._dscore(X, self.embed(th))[:, self.free]

    def _dhess(self, X, th):
        return self.base._dhess(X, self.embed(th))[:, self.free]


class GaussianLocation(ModelSpec):
    """``log p = -||x - theta||^2``; the parameter is a d-vector location."""

    name = "gaussian_location"

    def __init__(self, d=1):
        super().__init__(d, d, param_names=[f"loc_{i}" for i in range(d)])

    def _logp(self, X, th):
        return -np.sum((X - th) ** 2, axis=1)

    def _score(self, X, th):
        return -2.0 * (X - th)

    def _hess(self, X, th):
        d = self.dim_x
        return np.broadcast_to(-2.0 * np.eye(d), (X.shape[0], d, d)).copy()

    def _dscore(self, X, th):
        d = self.dim_x
        return np.broadcast_to(2.0 * np.eye(d), (X.shape[0], d, d)).copy()

    def _dhess(self, X, th):
        d = self.dim_x
        return np.zeros((X.shape[0], d, d, d))


class GaussianMeanScale(ModelSpec):
    """Diagonal Gaussian with parameters ``(mu_1..mu_d, sigma_1..sigma_d)``."""

    name = "gaussian_meancov"

    def __init__(self, d=1):
        names = [f"mu_{i}" for i in range(d)] + [f"sigma_{i}" for i in range(d)]
        dom = [(-np.inf, np.inf)] * d + [(0.0, np.inf)] * d
        super().__init__(d, 2 * d, dom, names)

    def _split(self, th):
        d = self.dim_x
        return th[:d], th[d:]

    def _logp(self, X, th):
        mu, sig = self._split(th)
        return -0.5 * np.sum(((X - mu) / sig) ** 2, axis=1)

    def _score(self, X, th):
        mu, sig = self._split(th)
        return -(X - mu) / sig**2

    def _hess(self, X, th):
        _, sig = self._split(th)
        return np.broadcast_to(np.diag(-1.0 / sig**2), (X.shape[0],) + (self.dim_x,) * 2).copy()

    def _dscore(self, X, th):
        mu, sig = self._split(th)
        n, d = X.shape
        out = np.zeros((n, 2 * d, d))
        idx = np.arange(d)
        out[:, idx, idx] = 1.0 / sig**2
        out[:, d + idx, idx] = 2.0 * (X - mu) / sig**3
        return out

    def _dhess(self, X, th):
        _, sig = self._split(th)
        n, d = X.shape
        out = np.zeros((n, 2 * d, d, d))
        idx = np.arange(d)
        out[:, d + idx, idx, idx] = 2.0 / sig**3
        return out


class RadialLocationModel(ModelSpec):
    """Models with ``log p = F(||x - loc||; e)`` for a location and one extra
    positive parameter ``e`` (a scale or a shape).

    Subclasses provide ``_profile(r, e)`` returning the radial derivatives
    ``(F', F'', F''', dF'/de, dF''/de)`` and ``_logprofile(r, e)``.  Parameter
    layout is ``(loc_1..loc_d, e)``.
    """

    extra_name = "scale"
    extra_domain = (0.0, np.inf)

    def __init__(self, d=1):
        names = [f"loc_{i}" for i in range(d)] + [self.extra_name]
        dom = [(-np.inf, np.inf)] * d + [self.extra_domain]
        super().__init__(d, d + 1, dom, names)

    def _profile(self, r, e):
        raise NotImplementedError

    def _logprofile(self, r, e):
        raise NotImplementedError

    def _geom(self, X, th):
        delta = X - th[:-1]
        r = np.sqrt(np.sum(delta**2, axis=1))
        return delta, r, th[-1]

    def _logp(self, X, th):
        _, r, e = self._geom(X, th)
        return self._logprofile(r, e)

    def _unit(self, delta, r):
        safe = np.where(r > 0, r, 1.0)
        return np.where(r[:, None] > 0, delta / safe[:, None], 0.0)

    def _ab(self, p1, p2, r):
        # H = a * delta delta^T + b * I away from the origin
        safe = np.where(r > 0, r, 1.0)
        b = np.where(r > 0, p1 / safe, p2)
        a = np.where(r > 0, (p2 - p1 / safe) / safe**2, 0.0)
        return a, b

    def _score(self, X, th):
        delta, r, e = self._geom(X, th)
        p1 = self._profile(r, e)[0]
        return p1[:, None] * self._unit(delta, r)

    def _hess(self, X, th):
        delta, r, e = self._geom(X, th)
        p1, p2 = self._profile(r, e)[:2]
        d = self.dim_x
        if d == 1:
            return p2.reshape(-1, 1, 1)
        a, b = self._ab(p1, p2, r)
        return a[:, None, None] * delta[:, :, None] * delta[:, None, :] + b[:, None, None] * np.eye(d)

    def _third(self, delta, r, p1, p2, p3):
        """``T[n, k, i, j] = d/dx_k H_ij``."""
        n, d = delta.shape
        if d == 1:
            sgn = np.sign(delta[:, 0])
            return (p3 * sgn).reshape(n, 1, 1, 1)
        safe = np.where(r > 0, r, 1.0)
        a, _ = self._ab(p1, p2, r)
        a_r = np.where(r > 0, p3 / safe**2 - 3 * p2 / safe**3 + 3 * p1 / safe**4, 0.0)
        b_r = a * r
        u = self._unit(delta, r)
        eye = np.eye(d)
        dd = delta[:, :, None] * delta[:, None, :]
        t = (a_r[:, None, None, None] * u[:, :, None, None] * dd[:, None, :, :])
        t += a[:, None, None, None] * (
            eye[None, :, :, None] * delta[:, None, None, :]
            + delta[:, None, :, None] * eye[None, :, None, :]
        )
        t += (b_r[:, None] * u)[:, :, None, None] * eye[None, None, :, :]
        return t

    def _dscore(self, X, th):
        delta, r, e = self._geom(X, th)
        p1, p2, _, dp1, _ = self._profile(r, e)
        n, d = X.shape
        out = np.empty((n, d + 1, d))
        out[:, :d, :] = -self._hess(X, th)
        out[:, d, :] = dp1[:, None] * self._unit(delta, r)
        return out

    def _dhess(self, X, th):
        delta, r, e = self._geom(X, th)
        p1, p2, p3, dp1, dp2 = self._profile(r, e)
        n, d = X.shape
        out = np.empty((n, d + 1, d, d))
        out[:, :d] = -self._third(delta, r, p1, p2, p3)
        if d == 1:
            out[:, 1, 0, 0] = dp2
        else:
            da, db = self._ab(dp1, dp2, r)
            out[:, d] = (da[:, None, None] * delta[:, :, None] * delta[:, None, :]
                         + db[:, None, None] * np.eye(d))
        return out


class StudentT(RadialLocationModel):
    """Non-standardized Student-t with ``nu`` degrees of freedom."""

    name = "student_t"

    def __init__(self, nu, d=1):
        if not nu > 0:
            raise ConfigError(f"student_t needs nu > 0, got {nu}")
        self.nu = float(nu)
        super().__init__(d)

    def _logprofile(self, r, e):
        return -0.5 * (self.nu + 1) * np.log1p(r**2 / (self.nu * e**2))

    def _profile(self, r, e):
        nu = self.nu
        c = nu * e**2
        dc = 2 * nu * e
        s = c + r**2
        p1 = -(nu + 1) * r / s
        p2 = -(nu + 1) * (c - r**2) / s**2
        p3 = 2 * (nu + 1) * r * (3 * c - r**2) / s**3
        dp1 = (nu + 1) * r * dc / s**2
        dp2 = -(nu + 1) * (3 * r**2 - c) * dc / s**3
        return p1, p2, p3, dp1, dp2


class Laplace(RadialLocationModel):
    """``log p = -||x - loc|| / scale``."""

    name = "laplace"

    def _logprofile(self, r, e):
        return -r / e

    def _profile(self, r, e):
        z = np.zeros_like(r)
        return z - 1.0 / e, z, z, z + 1.0 / e**2, z


class GeneralizedGamma(RadialLocationModel):
    """``log p = -||x - loc||^beta`` with shape ``beta > 1``."""

    name = "generalized_gamma"
    extra_name = "beta"
    extra_domain = (1.0, np.inf)

    def _logprofile(self, r, e):
        return -(r**e)

    def _profile(self, r, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.where(r > 0, np.log(np.where(r > 0, r, 1.0)), 0.0)
            rb1 = np.where(r > 0, r ** (b - 1), 0.0)
            rb2 = np.power(r, b - 2) if b != 2 else np.ones_like(r)
            rb3 = np.power(r, b - 3) if b != 3 else np.ones_like(r)
        p1 = -b * rb1
        p2 = -b * (b - 1) * rb2
        p3 = np.zeros_like(r) if b == 2 else -b * (b - 1) * (b - 2) * rb3
        dp1 = -rb1 * (1 + b * lr)
        dp2 = -rb2 * ((2 * b - 1) + b * (b - 1) * lr)
        return p1, p2, p3, dp1, dp2


def bessel_log_zk(nu, z):
    """``log(z^nu K_nu(z))`` for ``z > 0`` using the scaled Bessel function."""
    z = np.asarray(z, dtype=float)
    return nu * np.log(z) + np.log(special.kve(nu, z)) - z


def bessel_ratio(nu, z):
    """``K_{nu-1}(z) / K_nu(z)``; the scaling factors cancel."""
    return special.kve(nu - 1, z) / special.kve(nu, z)


class SymmetricBessel(RadialLocationModel):
    """Density proportional to ``(r/scale)^nu K_nu(r/scale)``, ``nu = s - d/2``."""

    name = "symmetric_bessel"
    _ZMIN = 1e-12

    def __init__(self, s, d=1):
        if not s > d / 2:
            raise ConfigError(f"symmetric_bessel needs s > d/2, got s={s}, d={d}")
        self.s = float(s)
        self.order = self.s - d / 2
        super().__init__(d)

    def _logprofile(self, r, e):
        return bessel_log_zk(self.order, np.maximum(r / e, self._ZMIN))

    def _profile(self, r, e):
        nu = self.order
        z = np.maximum(r / e, self._ZMIN)
        r1 = bessel_ratio(nu, z)
        dr1 = -1 + r1**2 + (2 * nu - 1) / z * r1
        f1 = -r1
        f2 = -dr1
        f3 = -2 * r1 * dr1 - (2 * nu - 1) * (dr1 / z - r1 / z**2)
        p1 = f1 / e
        p2 = f2 / e**2
        p3 = f3 / e**3
        dp1 = -(f2 * z + f1) / e**2
        dp2 = -(f3 * z + 2 * f2) / e**3
        return p1, p2, p3, dp1, dp2


class FiniteDiffModel(ModelSpec):
    """Fill all derivative slots from the log-density by central differences.

    Steps are ``h = eps**(1/3) * max(1, |coordinate|)``.  The third-order slot
    (``grad_theta_hess``) nests a difference in theta around the Hessian
    stencil and uses ``eps**(1/4)`` for the outer step to balance rounding.
    """

    name = "finite_diff"

    def __init__(self, logp, dim_x, dim_theta, theta_domain=None, param_names=None):
        super().__init__(dim_x, dim_theta, theta_domain, param_names)
        self._logp_fn = logp

    @classmethod
    def wrap(cls, spec):
        return cls(spec.log_density_unnorm, spec.dim_x, spec.dim_theta,
                   spec.theta_domain, spec.param_names)

    def _f(self, X, th):
        out = np.asarray(self._logp_fn(X, th), dtype=float).reshape(X.shape[0])
        return out

    @staticmethod
    def _step(v, power=1 / 3):
        return _EPS**power * np.maximum(1.0, np.abs(v))

    def _check(self, arr):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite difference quotient")
        return arr

    def _logp(self, X, th):
        return self._f(X, th)

    def _grad_x(self, f, X, th):
        n, d = X.shape
        out = np.empty((n, d))
        for i in range(d):
            h = self._step(X[:, i])
            xp, xm = X.copy(), X.copy()
            xp[:, i] += h
            xm[:, i] -= h
            out[:, i] = (f(xp, th) - f(xm, th)) / ((xp[:, i] - xm[:, i]))
        return out

    def _hess_x(self, f, X, th):
        n, d = X.shape
        out = np.empty((n, d, d))
        f0 = f(X, th)
        for i in range(d):
            hi = self._step(X[:, i])
            xp, xm = X.copy(), X.copy()
            xp[:, i] += hi
            xm[:, i] -= hi
            hi_p = xp[:, i] - X[:, i]
            out[:, i, i] = (f(xp, th) - 2 * f0 + f(xm, th)) / hi_p**2
            for j in range(i + 1, d):
                hj = self._step(X[:, j])
                pts = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    xx = X.copy()
                    xx[:, i] += si * hi
                    xx[:, j] += sj * hj
                    pts.append(f(xx, th))
                val = (pts[0] - pts[1] - pts[2] + pts[3]) / (4 * hi * hj)
                out[:, i, j] = out[:, j, i] = val
        return out

    def _score(self, X, th):
        return self._check(self._grad_x(self._f, X, th))

    def _hess(self, X, th):
        return self._check(self._hess_x(self._f, X, th))

    def _theta_diff(self, g, X, th, power):
        outs = []
        for t in range(self.dim_theta):
            h = float(self._step(th[t], power))
            tp, tm = th.copy(), th.copy()
            tp[t] += h
            tm[t] -= h
            outs.append((g(X, tp) - g(X, tm)) / (tp[t] - tm[t]))
        return np.stack(outs, axis=1)

    def _dscore(self, X, th):
        return self._check(self._theta_diff(lambda Y, t: self._grad_x(self._f, Y, t), X, th, 1 / 3))

    def _dhess(self, X, th):
        return self._check(self._theta_diff(lambda Y, t: self._hess_x(self._f, Y, t), X, th, 1 / 4))


def finite_diff_wrap(spec, dim_x=None, dim_theta=None):
    """Build a model whose derivatives come from central differences.

    ``spec`` is either a :class:`ModelSpec` (only its log-density is used) or
    a callable ``logp(X, theta)`` on batches, in which case the dimensions
    must be given.
    """
    if isinstance(spec, ModelSpec):
        return FiniteDiffModel.wrap(spec)
    if dim_x is None or dim_theta is None:
        raise ConfigError("dim_x and dim_theta are required for a bare callable")
    return FiniteDiffModel(spec, dim_x, dim_theta)


MODEL_IDS = (
    "gaussian_location",
    "gaussian_meancov",
    "laplace",
    "symmetric_bessel",
    "student_t",
    "generalized_gamma",
    "intractable_expfam",
)


def builtin_model(name, hyper=None):
    """Construct a builtin model from its id and a hyperparameter mapping.

    Recognized hyperparameters: ``d`` for every model, ``s`` for
    ``symmetric_bessel``, ``nu`` for ``student_t``.
    """
    hyper = dict(hyper or {})
    d = int(hyper.pop("d", 6 if name == "intractable_expfam" else 1))
    if d < 1:
        raise ConfigError("d must be positive")
    if name == "gaussian_location":
        model = GaussianLocation(d)
    elif name == "gaussian_meancov":
        model = GaussianMeanScale(d)
    elif name == "laplace":
        model = Laplace(d)
    elif name == "symmetric_bessel":
        if "s" not in hyper:
            raise ConfigError("symmetric_bessel requires hyperparameter s")
        model = SymmetricBessel(float(hyper.pop("s")), d)
    elif name == "student_t":
        model = StudentT(float(hyper.pop("nu", 5.0)), d)
    elif name == "generalized_gamma":
        model = GeneralizedGamma(d)
    elif name == "intractable_expfam":
        from .expfam import intractable_expfam

        model = intractable_expfam(d)
    else:
        raise ConfigError(f"unknown model id {name!r}; known: {', '.join(MODEL_IDS)}")
    if hyper:
        raise ConfigError(f"unused hyperparameters for {name}: {sorted(hyper)}")
    return model

