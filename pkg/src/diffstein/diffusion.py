"""Diffusion matrix fields ``m(x; theta)``.

Batched shapes for ``n`` points, dimension ``d`` and ``p`` parameters:

* ``eval``: ``(n, d, d)``
* ``jac_x``: ``(n, d, d, d)`` with ``[.., i, j, k] = d m_ij / d x_k``
* ``grad_theta``: ``(n, p, d, d)``
* ``grad_theta_jac_x``: ``(n, p, d, d, d)``
* ``div_x``: ``(n, d)`` with entry ``j = sum_i d m_ij / d x_i``
* ``grad_theta_div_x``: ``(n, p, d)``
* ``mmT`` / ``div_mmT``: ``(n, d, d)`` / ``(n, d)``

Fields that ignore ``theta`` accept a parameter vector of any length and
report zero theta-derivatives of matching size.
"""

import numpy as np

from ._arrays import as_batch, unbatch
from .errors import ConfigError, DomainError, SingularDiffusionError


class DiffusionMatrix:
    """Base class; subclasses fill ``_eval``, ``_jac``, ``_dtheta``, ``_dtheta_jac``."""

    form = "full"
    name = "diffusion"
    theta_dependent = False

    def __init__(self, dim, dim_theta=None):
        self.dim = int(dim)
        self.dim_theta = dim_theta

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def _prep(self, x, theta):
        X, single = as_batch(x, self.dim)
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.dim_theta is not None and th.shape != (self.dim_theta,):
            raise DomainError(f"diffusion expects {self.dim_theta} parameters, got {th.shape}")
        return X, th, single

    def _call(self, fn, x, theta):
        X, th, single = self._prep(x, theta)
        return unbatch(fn(X, th), single)

    def eval(self, x, theta=()):
        return self._call(self._eval, x, theta)

    def jac_x(self, x, theta=()):
        return self._call(self._jac, x, theta)

    def grad_theta(self, x, theta=()):
        return self._call(self._dtheta, x, theta)

    def grad_theta_jac_x(self, x, theta=()):
        return self._call(self._dtheta_jac, x, theta)

    def div_x(self, x, theta=()):
        return self._call(self._div, x, theta)

    def grad_theta_div_x(self, x, theta=()):
        return self._call(self._dtheta_div, x, theta)

    def mmT(self, x, theta=()):
        return self._call(self._mmT, x, theta)

    def div_mmT(self, x, theta=()):
        return self._call(self._div_mmT, x, theta)

    # derived quantities -------------------------------------------------
    def _div(self, X, th):
        return np.einsum("nijj->ni", np.swapaxes(self._jac(X, th), 1, 2))

    def _dtheta_div(self, X, th):
        J = self._dtheta_jac(X, th)
        return np.einsum("ntijj->nti", np.swapaxes(J, 2, 3))

    def _mmT(self, X, th):
        M = self._eval(X, th)
        return M @ np.swapaxes(M, 1, 2)

    def _div_mmT(self, X, th):
        M = self._eval(X, th)
        J = self._jac(X, th)
        # d_i S_ij = sum_a (d_i m_ia) m_ja + m_ia d_i m_ja
        return np.einsum("niai,nja->nj", J, M) + np.einsum("nia,njai->nj", M, J)

    def pinned(self, theta_full, free):
        if not self.theta_dependent:
            return self
        return PinnedDiffusion(self, theta_full, free)

    # subclass hooks -----------------------------------------------------
    def _eval(self, X, th):
        raise NotImplementedError

    def _jac(self, X, th):
        raise NotImplementedError

    def _dtheta(self, X, th):
        n, d = X.shape
        return np.zeros((n, th.size, d, d))

    def _dtheta_jac(self, X, th):
        n, d = X.shape
        return np.zeros((n, th.size, d, d, d))


class Identity(DiffusionMatrix):
    form = "identity"
    name = "identity"

    def _eval(self, X, th):
        n, d = X.shape
        return np.broadcast_to(np.eye(d), (n, d, d)).copy()

    def _jac(self, X, th):
        n, d = X.shape
        return np.zeros((n, d, d, d))

    def _div(self, X, th):
        return np.zeros_like(X)

    def _dtheta_div(self, X, th):
        return np.zeros((X.shape[0], th.size, X.shape[1]))


class ScalarField(DiffusionMatrix):
    """``m = h(x; theta) I``.

    Subclasses implement ``_h`` -> (n,), ``_grad_h`` -> (n, d) and, when the
    field depends on theta, ``_h_theta`` -> (n, p) and ``_grad_h_theta`` ->
    (n, p, d).
    """

    form = "scalar"

    def _h(self, X, th):
        raise NotImplementedError

    def _grad_h(self, X, th):
        raise NotImplementedError

    def _h_theta(self, X, th):
        return np.zeros((X.shape[0], th.size))

    def _grad_h_theta(self, X, th):
        return np.zeros((X.shape[0], th.size, X.shape[1]))

    def _eval(self, X, th):
        d = X.shape[1]
        return self._h(X, th)[:, None, None] * np.eye(d)

    def _jac(self, X, th):
        d = X.shape[1]
        return np.eye(d)[None, :, :, None] * self._grad_h(X, th)[:, None, None, :]

    def _div(self, X, th):
        return self._grad_h(X, th)

    def _dtheta(self, X, th):
        d = X.shape[1]
        return self._h_theta(X, th)[:, :, None, None] * np.eye(d)

    def _dtheta_jac(self, X, th):
        d = X.shape[1]
        return np.eye(d)[None, None, :, :, None] * self._grad_h_theta(X, th)[:, :, None, None, :]

    def _dtheta_div(self, X, th):
        return self._grad_h_theta(X, th)

    def _mmT(self, X, th):
        d = X.shape[1]
        return (self._h(X, th) ** 2)[:, None, None] * np.eye(d)

    def _div_mmT(self, X, th):
        return 2.0 * self._h(X, th)[:, None] * self._grad_h(X, th)


class DiagonalField(DiffusionMatrix):
    """``m = diag(f_1(x), ..., f_d(x))`` with ``f_i`` depending on ``x_i`` only."""

    form = "diagonal"

    def _f(self, X, th):
        raise NotImplementedError

    def _fprime(self, X, th):
        raise NotImplementedError

    def _eval(self, X, th):
        f = self._f(X, th)
        n, d = X.shape
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = f
        return out

    def _jac(self, X, th):
        fp = self._fprime(X, th)
        n, d = X.shape
        out = np.zeros((n, d, d, d))
        idx = np.arange(d)
        out[:, idx, idx, idx] = fp
        return out

    def _div(self, X, th):
        return self._fprime(X, th)

    def _dtheta_div(self, X, th):
        return np.zeros((X.shape[0], th.size, X.shape[1]))

    def _div_mmT(self, X, th):
        return 2.0 * self._f(X, th) * self._fprime(X, th)


class StudentLocation(ScalarField):
    """``h = 1 + ||x - loc||^2 / scale^2`` with parameters ``(loc..., scale)``."""

    name = "student_loc"
    theta_dependent = True

    def _parts(self, X, th):
        loc, sc = th[:-1], th[-1]
        if loc.size != X.shape[1]:
            raise DomainError("student_loc expects parameters (loc_1..loc_d, scale)")
        return X - loc, sc

    def _h(self, X, th):
        delta, sc = self._parts(X, th)
        return 1.0 + np.sum(delta**2, axis=1) / sc**2

    def _grad_h(self, X, th):
        delta, sc = self._parts(X, th)
        return 2.0 * delta / sc**2

    def _h_theta(self, X, th):
        delta, sc = self._parts(X, th)
        out = np.empty((X.shape[0], th.size))
        out[:, :-1] = -2.0 * delta / sc**2
        out[:, -1] = -2.0 * np.sum(delta**2, axis=1) / sc**3
        return out

    def _grad_h_theta(self, X, th):
        delta, sc = self._parts(X, th)
        n, d = X.shape
        out = np.empty((n, th.size, d))
        out[:, :-1, :] = -2.0 * np.eye(d) / sc**2
        out[:, -1, :] = -4.0 * delta / sc**3
        return out


class StudentScale(ScalarField):
    """``h = (x - loc)/scale * (1 + (x - loc)^2 / (nu scale^2))``, one dimension only."""

    name = "student_scale"
    theta_dependent = True

    def __init__(self, dim, nu):
        if dim != 1:
            raise ConfigError("student_scale diffusion is defined for d = 1 only")
        if not nu > 0:
            raise ConfigError("student_scale needs nu > 0")
        super().__init__(dim, 2)
        self.nu = float(nu)

    def _parts(self, X, th):
        return X[:, 0] - th[0], th[1]

    def _h(self, X, th):
        u, s = self._parts(X, th)
        return u / s + u**3 / (self.nu * s**3)

    def _grad_h(self, X, th):
        u, s = self._parts(X, th)
        return (1.0 / s + 3 * u**2 / (self.nu * s**3))[:, None]

    def _h_theta(self, X, th):
        u, s = self._parts(X, th)
        dh_du = 1.0 / s + 3 * u**2 / (self.nu * s**3)
        dh_ds = -u / s**2 - 3 * u**3 / (self.nu * s**4)
        return np.stack([-dh_du, dh_ds], axis=1)

    def _grad_h_theta(self, X, th):
        u, s = self._parts(X, th)
        d_loc = -6 * u / (self.nu * s**3)
        d_sc = -1.0 / s**2 - 9 * u**2 / (self.nu * s**4)
        return np.stack([d_loc, d_sc], axis=1)[:, :, None]


class Decay(ScalarField):
    """``h = 1 / (1 + ||x||^alpha)``."""

    name = "decay"

    def __init__(self, dim, alpha=2.0):
        if not alpha > 0:
            raise ConfigError("decay exponent alpha must be positive")
        super().__init__(dim)
        self.alpha = float(alpha)

    def _h(self, X, th):
        r = np.sqrt(np.sum(X**2, axis=1))
        return 1.0 / (1.0 + r**self.alpha)

    def _grad_h(self, X, th):
        a = self.alpha
        r = np.sqrt(np.sum(X**2, axis=1))
        h = 1.0 / (1.0 + r**a)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, a * safe ** (a - 2), 2.0 if a == 2 else 0.0)
        return -(coef * h**2)[:, None] * X


class NonNegative(DiagonalField):
    """``m = diag(x)``."""

    name = "nonneg"

    def _f(self, X, th):
        return X.copy()

    def _fprime(self, X, th):
        return np.ones_like(X)


class ReciprocalDiagonal(DiagonalField):
    """``m = diag(1 / (1 + x_i))``; singular where some ``x_i = -1``."""

    name = "recip_diag"
    tol = 1e-8

    def _base(self, X):
        b = 1.0 + X
        if np.any(np.abs(b) < self.tol):
            raise SingularDiffusionError("recip_diag diffusion is singular: some x_i is -1")
        return b

    def _f(self, X, th):
        return 1.0 / self._base(X)

    def _fprime(self, X, th):
        return -1.0 / self._base(X) ** 2


class WeightedDiffusion(DiffusionMatrix):
    """``w(x) m(x)`` for a positive scalar weight with known gradient."""

    name = "weighted"

    def __init__(self, base, weight, grad_weight):
        super().__init__(base.dim, base.dim_theta)
        self.base = base
        self.theta_dependent = base.theta_dependent
        self.form = "scalar" if base.form in ("identity", "scalar") else "full"
        self._w = weight
        self._gw = grad_weight

    def _eval(self, X, th):
        return self._w(X)[:, None, None] * self.base._eval(X, th)

    def _jac(self, X, th):
        w, gw = self._w(X), self._gw(X)
        return (w[:, None, None, None] * self.base._jac(X, th)
                + self.base._eval(X, th)[:, :, :, None] * gw[:, None, None, :])

    def _dtheta(self, X, th):
        return self._w(X)[:, None, None, None] * self.base._dtheta(X, th)

    def _dtheta_jac(self, X, th):
        w, gw = self._w(X), self._gw(X)
        return (w[:, None, None, None, None] * self.base._dtheta_jac(X, th)
                + self.base._dtheta(X, th)[..., None] * gw[:, None, None, None, :])


class PinnedDiffusion(DiffusionMatrix):
    """Theta-dependent field viewed through a subset of free parameters."""

    def __init__(self, base, theta_full, free):
        self.base = base
        self.theta_full = np.asarray(theta_full, dtype=float).copy()
        self.free = np.asarray(sorted(int(i) for i in free), dtype=int)
        super().__init__(base.dim, self.free.size)
        self.form = base.form
        self.name = base.name
        self.theta_dependent = True

    def embed(self, th):
        full = self.theta_full.copy()
        full[self.free] = th
        return full

    def _eval(self, X, th):
        return self.base._eval(X, self.embed(th))

    def _jac(self, X, th):
        return self.base._jac(X, self.embed(th))

    def _div(self, X, th):
        return self.base._div(X, self.embed(th))

    def _dtheta(self, X, th):
        return self.base._dtheta(X, self.embed(th))[:, self.free]

    def _dtheta_jac(self, X, th):
        return self.base._dtheta_jac(X, self.embed(th))[:, self.free]

    def _dtheta_div(self, X, th):
        return self.base._dtheta_div(X, self.embed(th))[:, self.free]


DIFFUSION_IDS = ("identity", "student_loc", "student_scale", "nonneg", "decay", "recip_diag")


def builtin_diffusion(name, hyper=None, dim=1):
    """Construct a builtin diffusion field.

    ``hyper`` may carry ``alpha`` (decay) and ``nu`` (student_scale).  The
    Student fields expect the parameter layout ``(loc..., scale)`` of the
    location-scale models.
    """
    hyper = dict(hyper or {})
    dim = int(hyper.pop("d", dim))
    if name == "identity":
        m = Identity(dim)
    elif name == "student_loc":
        m = StudentLocation(dim, dim + 1)
    elif name == "student_scale":
        m = StudentScale(dim, float(hyper.pop("nu", 5.0)))
    elif name == "nonneg":
        m = NonNegative(dim)
    elif name == "decay":
        m = Decay(dim, float(hyper.pop("alpha", 2.0)))
    elif name == "recip_diag":
        m = ReciprocalDiagonal(dim)
    else:
        raise ConfigError(f"unknown diffusion id {name!r}; known: {', '.join(DIFFUSION_IDS)}")
    if hyper:
        raise ConfigError(f"unused diffusion parameters for {name}: {sorted(hyper)}")
    return m


def dsm_theta_independence_check(m, theta=None, n_probe=16, seed=12345):
    """True when ``grad_theta`` vanishes on a random probe set."""
    if not m.theta_dependent:
        return True
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=2.0, size=(n_probe, m.dim))
    if theta is None:
        p = m.dim_theta or 1
        theta = np.ones(p)
    try:
        g = m.grad_theta(X, theta)
        gj = m.grad_theta_jac_x(X, theta)
    except SingularDiffusionError:
        return False
    return bool(np.all(g == 0) and np.all(gj == 0))
