"""Scalar radial kernels and the two matrix-valued kernel constructions.

A scalar kernel here is radial, ``k(x, y) = kappa(||x - y||^2)``, and reports
its profile together with the first two derivatives of ``kappa`` in the squared
distance.  Every derivative slot follows from those three numbers.

Matrix kernels are finite sums ``K(x, y) = sum_c C_c k_c(x, y)`` with constant
symmetric matrices ``C_c``:

* ``DiagonalKernel``: ``C_c = lambda_c e_c e_c^T``, one scalar kernel per axis;
* ``ScaledKernel``: a single term ``B k`` with ``B`` symmetric positive definite.

Integrally strictly positive definite kernels make the discrepancy separate
distributions.  That property is not checked numerically; Gaussian and IMQ
kernels with the constructions above satisfy the known sufficient conditions.
"""

import numpy as np

from .errors import ConfigError, DomainError

GAUSSIAN = 0
IMQ = 1


class ScalarKernel:
    """Radial scalar kernel; subclasses implement :meth:`profile`."""

    kind = -1
    name = "kernel"

    def profile(self, r2):
        """Return ``(kappa, kappa', kappa'')`` evaluated at squared distances."""
        raise NotImplementedError

    @property
    def params(self):
        """Two numbers handed to the compiled pair loops."""
        raise NotImplementedError

    @staticmethod
    def _pair(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1:] != y.shape[-1:]:
            raise DomainError("kernel arguments differ in dimension")
        delta = x - y
        return delta, np.sum(delta**2, axis=-1)

    def eval(self, x, y):
        _, r2 = self._pair(x, y)
        return self.profile(r2)[0]

    def __call__(self, x, y):
        return self.eval(x, y)

    def grad_x(self, x, y):
        delta, r2 = self._pair(x, y)
        k1 = self.profile(r2)[1]
        return 2.0 * np.asarray(k1)[..., None] * delta

    def grad_y(self, x, y):
        return -self.grad_x(x, y)

    def grad_xy(self, x, y):
        """Entry ``(i, j)`` is ``d^2 k / dx_i dy_j``."""
        delta, r2 = self._pair(x, y)
        _, k1, k2 = self.profile(r2)
        k1 = np.asarray(k1)[..., None, None]
        k2 = np.asarray(k2)[..., None, None]
        d = delta.shape[-1]
        return -2.0 * k1 * np.eye(d) - 4.0 * k2 * delta[..., :, None] * delta[..., None, :]


class GaussianKernel(ScalarKernel):
    """``exp(-||x - y||^2 / (2 l^2))``."""

    kind = GAUSSIAN
    name = "gaussian"

    def __init__(self, lengthscale=1.0):
        if not lengthscale > 0:
            raise ConfigError(f"lengthscale must be positive, got {lengthscale}")
        self.lengthscale = float(lengthscale)

    def __repr__(self):
        return f"GaussianKernel(lengthscale={self.lengthscale})"

    @property
    def params(self):
        return (self.lengthscale, 0.0)

    def profile(self, r2):
        s = 1.0 / (2.0 * self.lengthscale**2)
        k = np.exp(-s * np.asarray(r2, dtype=float))
        return k, -s * k, s * s * k


class IMQKernel(ScalarKernel):
    """``(c^2 + ||x - y||^2)^beta`` with ``c > 0`` and ``beta < 0``."""

    kind = IMQ
    name = "imq"

    def __init__(self, c=1.0, beta=-0.5):
        if not c > 0:
            raise ConfigError(f"IMQ offset c must be positive, got {c}")
        if not beta < 0:
            raise ConfigError(f"IMQ exponent beta must be negative, got {beta}")
        self.c = float(c)
        self.beta = float(beta)

    def __repr__(self):
        return f"IMQKernel(c={self.c}, beta={self.beta})"

    @property
    def params(self):
        return (self.c, self.beta)

    def profile(self, r2):
        b = self.beta
        base = self.c**2 + np.asarray(r2, dtype=float)
        k = base**b
        k1 = b * k / base
        k2 = (b - 1) * k1 / base
        return k, k1, k2


def gaussian_kernel(lengthscale):
    return GaussianKernel(lengthscale)


def imq_kernel(c, beta):
    return IMQKernel(c, beta)


class MatrixKernel:
    """``K(x, y) = sum_c C_c k_c(x, y)``.

    Parameters
    ----------
    components : list of (ndarray, ScalarKernel)
        Constant symmetric ``d x d`` matrices paired with scalar kernels.
    form : str
        ``"diagonal"`` or ``"scaled"``; informational.
    """

    def __init__(self, components, form):
        if not components:
            raise ConfigError("matrix kernel needs at least one component")
        mats = [np.array(C, dtype=float) for C, _ in components]
        d = mats[0].shape[0]
        for C in mats:
            if C.shape != (d, d) or not np.allclose(C, C.T, rtol=0, atol=1e-14):
                raise ConfigError("kernel component matrices must be symmetric d x d")
        self.dim = d
        self.form = form
        self.components = [(C, k) for C, (_, k) in zip(mats, components)]

    def __repr__(self):
        return f"MatrixKernel(form={self.form!r}, dim={self.dim}, n_components={len(self.components)})"

    def packed(self):
        """Arrays ``(C[c, d, d], kinds[c], params[c, 2])`` for the pair loops."""
        C = np.ascontiguousarray(np.stack([c for c, _ in self.components]))
        kinds = np.array([k.kind for _, k in self.components], dtype=np.intc)
        params = np.array([k.params for _, k in self.components], dtype=float)
        return C, kinds, params

    def scaled(self, factor):
        if not factor > 0:
            raise ConfigError("kernel scaling factor must be positive")
        return MatrixKernel([(factor * C, k) for C, k in self.components], self.form)

    def _check(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1] != self.dim or y.shape[-1] != self.dim:
            raise DomainError(
                f"kernel of dimension {self.dim} evaluated at points of dimension "
                f"{x.shape[-1]} and {y.shape[-1]}"
            )
        return x, y

    def eval(self, x, y):
        x, y = self._check(x, y)
        return sum(np.asarray(k.eval(x, y))[..., None, None] * C for C, k in self.components)

    def __call__(self, x, y):
        return self.eval(x, y)

    def grad_x(self, x, y):
        """``T[..., i, r, s] = d K_rs / d x_i``."""
        x, y = self._check(x, y)
        return sum(k.grad_x(x, y)[..., :, None, None] * C for C, k in self.components)

    def grad_y(self, x, y):
        """``T[..., l, r, s] = d K_rs / d y_l``."""
        x, y = self._check(x, y)
        return sum(k.grad_y(x, y)[..., :, None, None] * C for C, k in self.components)

    def grad_xy(self, x, y):
        """``T[..., i, l, r, s] = d^2 K_rs / d x_i d y_l``."""
        x, y = self._check(x, y)
        return sum(k.grad_xy(x, y)[..., :, :, None, None] * C for C, k in self.components)


class DiagonalKernel(MatrixKernel):
    """``diag(lambda_1 k_1, ..., lambda_d k_d)``."""

    def __init__(self, lambdas, kernels):
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
        if isinstance(kernels, ScalarKernel):
            kernels = [kernels] * lambdas.size
        if len(kernels) != lambdas.size:
            raise ConfigError("need one scalar kernel per diagonal weight")
        if not np.all(lambdas > 0):
            raise ConfigError("diagonal kernel weights must be positive")
        d = lambdas.size
        comps = []
        for i, (lam, k) in enumerate(zip(lambdas, kernels)):
            C = np.zeros((d, d))
            C[i, i] = lam
            comps.append((C, k))
        super().__init__(comps, "diagonal")
        self.lambdas = lambdas


class ScaledKernel(MatrixKernel):
    """``B k`` with ``B`` symmetric positive definite."""

    def __init__(self, B, kernel):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if B.shape[0] != B.shape[1] or not np.allclose(B, B.T, rtol=0, atol=1e-14):
            raise ConfigError("B must be a symmetric square matrix")
        if np.linalg.eigvalsh(B).min() <= 0:
            raise ConfigError("B must be positive definite")
        super().__init__([(B, kernel)], "scaled")
        self.B = B
        self.kernel = kernel


def identity_kernel(d, kernel):
    """``I k``, the kernel of the classical Langevin discrepancy."""
    return ScaledKernel(np.eye(d), kernel)


def matrix_kernel_eval(K, x, y):
    return K.eval(x, y)


SCALAR_KERNEL_IDS = ("gaussian", "imq")
MATRIX_FORMS = ("scaled", "diagonal")


def builtin_scalar_kernel(name, params=None):
    params = dict(params or {})
    try:
        if name == "gaussian":
            k = GaussianKernel(float(params.pop("lengthscale", 1.0)))
        elif name == "imq":
            k = IMQKernel(float(params.pop("c", 1.0)), float(params.pop("beta", -0.5)))
        else:
            raise ConfigError(f"unknown kernel id {name!r}; known: {', '.join(SCALAR_KERNEL_IDS)}")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if params:
        raise ConfigError(f"unused kernel parameters for {name}: {sorted(params)}")
    return k


def build_matrix_kernel(d, name, params=None, form="scaled", B=None, lambdas=None):
    """Matrix kernel of dimension ``d`` from a scalar kernel id."""
    k = builtin_scalar_kernel(name, params)
    if form == "scaled":
        return ScaledKernel(np.eye(d) if B is None else B, k)
    if form == "diagonal":
        return DiagonalKernel(np.ones(d) if lambdas is None else lambdas, k)
    raise ConfigError(f"unknown matrix kernel form {form!r}")
