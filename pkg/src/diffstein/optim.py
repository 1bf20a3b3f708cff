"""Stochastic gradient descent with optional information-metric preconditioning.

Each iteration draws a minibatch without replacement, evaluates the loss
gradient on it (and the information matrix when preconditioning), and takes a
step in unconstrained coordinates.  Coordinates with a finite lower bound are
optimized as ``log(theta - lo)``; a finite upper bound uses ``log(hi - theta)``.

The minibatch DKSD loss is the U-statistic over pairs inside the batch, which
makes the natural-gradient direction a biased estimate; that is accepted.
"""

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from . import _backend
from ._arrays import as_sample
from .errors import ConfigError, DiffSteinError, NumericalError
from .estimators import LossBundle, regularized_solve


@dataclass
class OptimConfig:
    """Settings for :func:`sgd_run`.

    ``schedule`` is ``"constant"`` (step ``gamma``) or ``"one_over_t"``
    (step ``gamma / (t + 1)``).  ``preconditioner`` is ``"none"``,
    ``"identity"`` or ``"info_metric"``.  ``reparam`` is ``"auto"`` (log
    coordinates for every bounded parameter), ``"none"``, or an explicit list
    of booleans.
    """

    gamma: float = 0.1
    schedule: str = "constant"
    minibatch_size: int = 50
    max_iters: int = 1000
    seed: int = 0
    preconditioner: str = "info_metric"
    ridge_rel: float = 1e-6
    reparam: object = "auto"
    tol: float = 0.0

    def validate(self, kind=None):
        if self.schedule not in ("constant", "one_over_t"):
            raise ConfigError(f"unknown step schedule {self.schedule!r}")
        if self.preconditioner not in ("none", "identity", "info_metric"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if not self.gamma > 0:
            raise ConfigError("step size must be positive")
        if self.minibatch_size < 2:
            raise ConfigError("minibatch_size must be at least 2")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")

    def step(self, t):
        return self.gamma if self.schedule == "constant" else self.gamma / (t + 1)


@dataclass
class Trajectory:
    """Per-iteration records; ``theta[t]`` is the iterate before step ``t``."""

    iters: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    millis: list = field(default_factory=list)

    def append(self, t, theta, loss, gnorm, ms):
        self.iters.append(t)
        self.theta.append(np.array(theta, dtype=float))
        self.loss.append(float(loss))
        self.grad_norm.append(float(gnorm))
        self.millis.append(float(ms))

    def __len__(self):
        return len(self.iters)

    def rows(self, timing=False):
        for t, th, lo, gn, ms in zip(self.iters, self.theta, self.loss, self.grad_norm, self.millis):
            row = [t, *th.tolist(), lo, gn]
            if timing:
                row.append(ms)
            yield row

    def header(self, timing=False):
        p = self.theta[0].size if self.theta else 0
        cols = ["iter"] + [f"theta_{i}" for i in range(p)] + ["loss", "grad_norm"]
        return cols + (["millis"] if timing else [])

    def to_csv(self, path, timing=False):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header(timing))
            for row in self.rows(timing):
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class OptimizationAborted(NumericalError):
    """Raised on non-finite loss or gradient; carries the trajectory so far."""

    def __init__(self, message, theta, trajectory):
        super().__init__(message)
        self.theta = theta
        self.trajectory = trajectory


class Reparam:
    """Map between constrained ``theta`` and unconstrained ``eta``."""

    def __init__(self, domain, flags="auto"):
        lo = np.array([b[0] for b in domain], dtype=float)
        hi = np.array([b[1] for b in domain], dtype=float)
        if isinstance(flags, str):
            if flags == "auto":
                use = np.isfinite(lo) | np.isfinite(hi)
            elif flags == "none":
                use = np.zeros(lo.size, dtype=bool)
            else:
                raise ConfigError(f"unknown reparameterization {flags!r}")
        else:
            use = np.asarray(flags, dtype=bool)
            if use.size != lo.size:
                raise ConfigError("reparameterization flags do not match the parameter count")
        both = use & np.isfinite(lo) & np.isfinite(hi)
        if np.any(both):
            raise ConfigError("two-sided bounds are not supported by the log reparameterization")
        self.lower = use & np.isfinite(lo)
        self.upper = use & np.isfinite(hi)
        self.lo, self.hi = lo, hi

    def to_eta(self, th):
        eta = np.array(th, dtype=float)
        eta[self.lower] = np.log(th[self.lower] - self.lo[self.lower])
        eta[self.upper] = np.log(self.hi[self.upper] - th[self.upper])
        return eta

    def to_theta(self, eta):
        th = np.array(eta, dtype=float)
        th[self.lower] = self.lo[self.lower] + np.exp(eta[self.lower])
        th[self.upper] = self.hi[self.upper] - np.exp(eta[self.upper])
        return th

    def jacobian(self, eta):
        """Diagonal of ``d theta / d eta``."""
        j = np.ones_like(eta)
        j[self.lower] = np.exp(eta[self.lower])
        j[self.upper] = -np.exp(eta[self.upper])
        return j


def sgd_run(bundle, sample, theta0, cfg=None, on_step=None):
    """Run (preconditioned) SGD and return ``(theta, trajectory)``.

    Parameters
    ----------
    bundle : LossBundle
        Provides ``loss_grad_info(theta, X, want_info)``.
    sample : array_like, shape (n, d)
    theta0 : array_like
    cfg : OptimConfig
    on_step : callable, optional
        Called as ``on_step(t, theta)`` after each update.
    """
    cfg = cfg or OptimConfig()
    cfg.validate()
    X = as_sample(sample, bundle.model.dim_x)
    n = X.shape[0]
    theta = bundle.model.check_theta(theta0)
    rp = Reparam(bundle.model.theta_domain, cfg.reparam)
    eta = rp.to_eta(theta)
    rng = np.random.default_rng(cfg.seed)
    want_info = cfg.preconditioner == "info_metric"
    traj = Trajectory()
    start = time.perf_counter()
    full = cfg.minibatch_size >= n
    for t in range(cfg.max_iters):
        Xb = X if full else X[np.sort(rng.choice(n, size=cfg.minibatch_size, replace=False))]
        try:
            loss, grad, G = bundle.loss_grad_info(theta, Xb, want_info)
        except NumericalError as exc:
            raise OptimizationAborted(str(exc), theta, traj) from exc
        grad = np.atleast_1d(np.asarray(grad, dtype=float))
        gnorm = float(np.sqrt(grad @ grad))
        traj.append(t, theta, loss, gnorm, 1000.0 * (time.perf_counter() - start))
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            raise OptimizationAborted("non-finite loss or gradient", theta, traj)
        J = rp.jacobian(eta)
        g_eta = grad * J
        if want_info:
            direction = regularized_solve(np.asarray(G) * np.outer(J, J), g_eta, cfg.ridge_rel)
        else:
            direction = g_eta
        eta = eta - cfg.step(t) * direction
        new_theta = rp.to_theta(eta)
        try:
            bundle.model.check_theta(new_theta)
        except DiffSteinError as exc:
            raise OptimizationAborted(f"iterate left the parameter domain: {exc}", theta, traj) from exc
        moved = float(np.max(np.abs(new_theta - theta)))
        theta = new_theta
        if on_step is not None:
            on_step(t, theta)
        if cfg.tol > 0 and moved < cfg.tol:
            break
    return theta, traj


class FunctionBundle(LossBundle):
    """Loss bundle from plain callables ``f(theta, X)``; handy for tests."""

    kind = "function"

    def __init__(self, model, loss, grad, info=None):
        super().__init__(model)
        self._loss, self._grad, self._info = loss, grad, info

    def loss(self, theta, X):
        return self._loss(theta, X)

    def grad(self, theta, X):
        return self._grad(theta, X)

    def info(self, theta, X):
        if self._info is None:
            return np.eye(self.dim_theta)
        return self._info(theta, X)


@dataclass
class GridScan:
    thetas: np.ndarray
    losses: np.ndarray
    errors: Sequence[Optional[str]]

    def argmin(self):
        if np.all(np.isnan(self.losses)):
            raise NumericalError("every grid point failed")
        return int(np.nanargmin(self.losses))

    def best(self):
        return self.thetas[self.argmin()]

    def to_csv(self, path, names=None):
        p = self.thetas.shape[1]
        names = names or [str(i) for i in range(p)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"theta_{nm}" for nm in names] + ["loss"])
            for th, lo in zip(self.thetas, self.losses):
                w.writerow([_fmt(v) for v in th] + ["" if np.isnan(lo) else _fmt(lo)])


def _as_grid(grid, p):
    G = np.asarray(grid, dtype=float)
    if G.ndim == 1:
        G = G.reshape(-1, 1) if p == 1 else G.reshape(1, -1)
    if G.ndim != 2 or G.shape[1] != p:
        raise ConfigError(f"grid must have shape (k, {p})")
    return G


def grid_scan(bundle, sample, grid):
    """Full-sample loss at each grid point, in grid order.

    Points where evaluation fails are recorded as NaN with the error message.
    """
    X = as_sample(sample, bundle.model.dim_x)
    G = _as_grid(grid, bundle.dim_theta)

    def one(th):
        try:
            return float(bundle.loss(th, X)), None
        except DiffSteinError as exc:
            return float("nan"), str(exc)

    res = _backend.parallel_map(one, list(G))
    return GridScan(G, np.array([r[0] for r in res]), [r[1] for r in res])


def grid_refine(bundle, sample, lo, hi, num=81, xatol=1e-6):
    """One-parameter fit: coarse grid, then bounded Brent search around the best cell."""
    if bundle.dim_theta != 1:
        raise ConfigError("grid_refine handles a single free parameter")
    X = as_sample(sample, bundle.model.dim_x)
    grid = np.linspace(lo, hi, num)
    scan = grid_scan(bundle, X, grid)
    k = scan.argmin()
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, num - 1)]

    def f(t):
        try:
            return bundle.loss(np.array([t]), X)
        except DiffSteinError:
            return np.inf

    res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                   options={"xatol": xatol})
    best_t, best_f = float(res.x), float(res.fun)
    if not best_f <= scan.losses[k]:
        best_t, best_f = float(grid[k]), float(scan.losses[k])
    return np.array([best_t]), best_f, scan
