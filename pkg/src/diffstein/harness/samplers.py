"""Exact samplers for the builtin models and corruption of samples.

Radial models are drawn as ``loc + radius * direction`` with a uniformly
distributed direction, which in one dimension is a random sign.  The
symmetric Bessel family uses its Gaussian variance-mixture representation.
The intractable exponential family is sampled by rejection from the Gaussian
part of its density.
"""

import numpy as np

from ..errors import ConfigError, DomainError
from ..expfam import INTRACTABLE_CROSS, INTRACTABLE_SLOT, INTRACTABLE_TANH1
from ..model import builtin_model

SAMPLER_IDS = (
    "gaussian_location",
    "gaussian_meancov",
    "laplace",
    "student_t",
    "generalized_gamma",
    "symmetric_bessel",
    "intractable_expfam",
)


def rng_for(seed, *keys):
    """Generator for the stream ``(seed, *keys)``; keys are non-negative ints."""
    try:
        entropy = [int(seed), *(int(k) for k in keys)]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed and stream keys must be integers: {exc}") from exc
    if min(entropy) < 0:
        raise ConfigError("seed and stream keys must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _directions(rng, n, d):
    if d == 1:
        return rng.choice([-1.0, 1.0], size=(n, 1))
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _intractable(rng, theta, n, d):
    k = INTRACTABLE_SLOT
    tail = np.zeros(d)
    tail[2:] = 1.0
    e1 = np.zeros(d)
    e1[0] = 1.0
    prec = np.eye(d) - INTRACTABLE_CROSS * (np.outer(e1, tail) + np.outer(tail, e1))
    try:
        L = np.linalg.cholesky(np.linalg.inv(prec))
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"intractable_expfam sampler needs a positive definite Gaussian part (d={d})") from exc
    th = float(theta[0])
    bound = abs(INTRACTABLE_TANH1) + abs(th)
    out = np.empty((0, d))
    while out.shape[0] < n:
        want = max(64, 2 * (n - out.shape[0]))
        X = rng.standard_normal((want, d)) @ L.T
        logw = INTRACTABLE_TANH1 * np.tanh(X[:, 0]) + th * np.tanh(X[:, k]) - bound
        keep = np.log(rng.uniform(size=want)) < logw
        out = np.vstack([out, X[keep]])
    return out[:n]


def sample_from(name, theta, n, seed, hyper=None, stream=()):
    """Draw ``n`` points from builtin model ``name`` at parameter ``theta``.

    ``hyper`` uses the same keys as :func:`diffstein.model.builtin_model`.
    The result has shape ``(n, d)`` and depends only on ``(seed, *stream)``.
    """
    if name not in SAMPLER_IDS:
        raise ConfigError(f"no sampler for model {name!r}; known: {', '.join(SAMPLER_IDS)}")
    n = int(n)
    if n < 1:
        raise ConfigError("sample size must be positive")
    model = builtin_model(name, hyper)
    th = model.check_theta(theta)
    d = model.dim_x
    rng = rng_for(seed, *stream)
    if name == "gaussian_location":
        return th + np.sqrt(0.5) * rng.standard_normal((n, d))
    if name == "gaussian_meancov":
        return th[:d] + th[d:] * rng.standard_normal((n, d))
    if name == "intractable_expfam":
        return _intractable(rng, th, n, d)
    loc, e = th[:d], th[d]
    if name == "student_t":
        nu = model.nu
        z = rng.standard_normal((n, d))
        w = rng.chisquare(nu, size=(n, 1))
        return loc + e * z / np.sqrt(w / nu)
    if name == "symmetric_bessel":
        w = rng.gamma(model.s, 1.0, size=(n, 1))
        return loc + e * np.sqrt(2.0 * w) * rng.standard_normal((n, d))
    if name == "laplace":
        r = rng.gamma(d, e, size=(n, 1))
    else:  # generalized_gamma: r^beta ~ Gamma(d / beta)
        r = rng.gamma(d / e, 1.0, size=(n, 1)) ** (1.0 / e)
    return loc + r * _directions(rng, n, d)


def corrupt(sample, count, value, seed, stream=()):
    """Copy of ``sample`` with ``count`` uniformly chosen rows set to ``value``."""
    X = np.array(sample, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, d = X.shape
    count = int(count)
    if count < 0 or count > n:
        raise DomainError(f"cannot corrupt {count} of {n} rows")
    val = np.broadcast_to(np.asarray(value, dtype=float), (d,))
    if count:
        rows = rng_for(seed, *stream).choice(n, size=count, replace=False)
        X[rows] = val
    return X
