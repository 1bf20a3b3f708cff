"""Experiment configuration, replicated fits and CLT replication studies."""

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .. import _backend
from ..diffusion import DIFFUSION_IDS, Identity, NonNegative, builtin_diffusion
from ..errors import ConfigError, DiffSteinError, NumericalError
from ..estimators import DKSDBundle, DSMBundle, SMBundle
from ..expfam import ExpFamSpec, dksd_quadratic, dsm_quadratic, solve_quadratic
from ..kernel import build_matrix_kernel
from ..model import MODEL_IDS, builtin_model
from ..optim import OptimConfig, grid_refine, grid_scan, sgd_run
from ..robust import influence_curve
from ..steinkern import SteinKernelCtx
from .samplers import SAMPLER_IDS, corrupt, rng_for, sample_from

ESTIMATORS = ("sm", "dsm", "ksd", "dksd", "nnsm", "nnksd")
FIT_METHODS = ("grid", "optimizer", "closed_form")

# stream keys inside a replication
_DATA, _CORRUPT, _OPTIM = 0, 1, 2


def json_number(v):
    """JSON-friendly float (NaN and infinities become ``None``)."""
    v = float(v)
    return v if math.isfinite(v) else None


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


# ----------------------------------------------------------------------
# configuration

_FIT_KEYS = {"method", "lo", "hi", "num", "refine", "theta0", "gamma", "schedule",
             "minibatch_size", "max_iters", "preconditioner", "reparam", "tol"}


@dataclass
class ExperimentConfig:
    """One experiment; field names match the JSON experiment file.

    ``sampler`` may override the data-generating model with keys ``model``,
    ``hyper`` and ``theta`` (useful for misspecified fits); by default data
    come from ``model`` at ``theta_true``.  ``free`` lists the estimated
    coordinates of theta, the rest stay at ``theta_true``.
    """

    model: str
    theta_true: list
    n: int
    estimator: str
    hyper: dict = field(default_factory=dict)
    free: Optional[list] = None
    sampler: dict = field(default_factory=dict)
    corruption: Optional[dict] = None
    kernel: Optional[dict] = None
    diffusion: Optional[dict] = None
    fit: dict = field(default_factory=lambda: {"method": "grid"})
    replications: int = 1
    seed: int = 0
    output: Optional[str] = None
    influence: Optional[dict] = None
    clt: Optional[dict] = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        required = [f.name for f in dataclasses.fields(cls)
                    if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
        missing = [k for k in required if k not in data]
        if missing:
            raise ConfigError(f"missing config fields: {missing}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def with_overrides(self, **kw):
        data = self.to_dict()
        data.update(kw)
        return ExperimentConfig.from_dict(data)

    def validate(self):
        if self.model not in MODEL_IDS:
            raise ConfigError(f"unknown model id {self.model!r}; known: {', '.join(MODEL_IDS)}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; known: {', '.join(ESTIMATORS)}")
        for key in ("n", "replications", "seed"):
            val = getattr(self, key)
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{key} must be an integer")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.replications < 1:
            raise ConfigError("replications must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for key in ("hyper", "sampler", "fit"):
            if not isinstance(getattr(self, key), dict):
                raise ConfigError(f"{key} must be an object")
        bad = sorted(set(self.sampler) - {"model", "hyper", "theta"})
        if bad:
            raise ConfigError(f"unknown sampler settings: {bad}")
        if self.sampler.get("model", self.model) not in SAMPLER_IDS:
            raise ConfigError(f"no sampler for {self.sampler.get('model', self.model)!r}")
        if self.corruption is not None:
            c = self.corruption
            if not isinstance(c, dict) or set(c) != {"count", "value"}:
                raise ConfigError("corruption must have exactly the fields count and value")
            if not 0 <= int(c["count"]) < self.n:
                raise ConfigError("corruption count must satisfy 0 <= count < n")
        fit = self.fit
        bad = sorted(set(fit) - _FIT_KEYS)
        if bad:
            raise ConfigError(f"unknown fit settings: {bad}")
        if fit.get("method", "grid") not in FIT_METHODS:
            raise ConfigError(f"unknown fit method {fit.get('method')!r}; known: {', '.join(FIT_METHODS)}")
        if self.diffusion is not None:
            if not isinstance(self.diffusion, dict) or "name" not in self.diffusion:
                raise ConfigError("diffusion must be an object with a name")
            if self.diffusion["name"] not in DIFFUSION_IDS:
                raise ConfigError(f"unknown diffusion id {self.diffusion['name']!r}")
        if self.kernel is not None and (not isinstance(self.kernel, dict) or "name" not in self.kernel):
            raise ConfigError("kernel must be an object with a name")
        if self.clt is not None:
            nl = self.clt.get("n_list") if isinstance(self.clt, dict) else None
            if not nl or any(int(v) < 2 for v in nl):
                raise ConfigError("clt.n_list must be a non-empty list of sample sizes")
        # resolving everything once surfaces bad ids and hyperparameters early
        build_setup(self)


# ----------------------------------------------------------------------
# resolution of ids into model / diffusion / loss objects

@dataclass
class Setup:
    base_model: object
    model: object
    free: np.ndarray
    theta_true: np.ndarray
    bundle: object
    kernel: object
    diffusion: object
    expfam: bool

    @property
    def names(self):
        return list(self.model.param_names)


def _kernel(cfg, d):
    spec = cfg.kernel or {"name": "gaussian"}
    bad = sorted(set(spec) - {"name", "params", "form"})
    if bad:
        raise ConfigError(f"unknown kernel settings: {bad}")
    return build_matrix_kernel(d, spec["name"], spec.get("params"), spec.get("form", "scaled"))


def _diffusion(cfg, d):
    est = cfg.estimator
    if est in ("nnsm", "nnksd"):
        if cfg.diffusion is not None:
            raise ConfigError(f"{est} fixes the diffusion to m(x) = x; remove the diffusion field")
        return NonNegative(d)
    if cfg.diffusion is None:
        return Identity(d)
    if est in ("sm", "ksd") and cfg.diffusion["name"] != "identity":
        raise ConfigError(f"{est} uses the identity diffusion; use dsm or dksd for other fields")
    bad = sorted(set(cfg.diffusion) - {"name", "hyper"})
    if bad:
        raise ConfigError(f"unknown diffusion settings: {bad}")
    return builtin_diffusion(cfg.diffusion["name"], cfg.diffusion.get("hyper"), dim=d)


def build_setup(cfg):
    base = builtin_model(cfg.model, cfg.hyper)
    th = base.check_theta(cfg.theta_true)
    free = np.arange(base.dim_theta) if cfg.free is None else np.asarray(cfg.free, dtype=int)
    full = sorted(free.tolist()) == list(range(base.dim_theta))
    model = base if full else base.pinned(th, free)
    d = base.dim_x
    m = _diffusion(cfg, d)
    if m.theta_dependent:
        if m.dim_theta != base.dim_theta:
            raise ConfigError(
                f"diffusion {cfg.diffusion['name']!r} expects {m.dim_theta} parameters, "
                f"model {cfg.model!r} has {base.dim_theta}")
        if not full:
            m = m.pinned(th, free)
    est = cfg.estimator
    K = None
    if est in ("ksd", "dksd", "nnksd"):
        K = _kernel(cfg, d)
        bundle = DKSDBundle(model, K, m)
    elif est == "sm":
        bundle = SMBundle(model)
    else:
        bundle = DSMBundle(model, m)
    is_ef = isinstance(base, ExpFamSpec)
    if cfg.fit.get("method", "grid") == "closed_form" and not (is_ef and full):
        raise ConfigError("closed_form fitting needs an exponential-family model with every parameter free")
    if cfg.fit.get("method", "grid") == "grid" and model.dim_theta != 1:
        raise ConfigError("grid fitting needs exactly one free parameter; use the optimizer")
    return Setup(base, model, free, th[free], bundle, K, m, is_ef)


# ----------------------------------------------------------------------
# single replications

def draw_sample(cfg, stream_key, n=None):
    """Data for one replication, corrupted when configured."""
    s = cfg.sampler
    name = s.get("model", cfg.model)
    hyper = s.get("hyper", cfg.hyper if name == cfg.model else None)
    theta = s.get("theta", cfg.theta_true)
    n = cfg.n if n is None else n
    X = sample_from(name, theta, n, cfg.seed, hyper, stream=(*stream_key, _DATA))
    if cfg.corruption is not None and cfg.corruption["count"]:
        X = corrupt(X, cfg.corruption["count"], cfg.corruption["value"], cfg.seed,
                    stream=(*stream_key, _CORRUPT))
    return X


def grid_bounds(cfg, setup):
    fit = cfg.fit
    t = float(setup.theta_true[0])
    lo, hi = float(fit.get("lo", t - 5.0)), float(fit.get("hi", t + 5.0))
    dom = setup.model.theta_domain[0]
    lo, hi = max(lo, dom[0]), min(hi, dom[1])
    if not lo < hi:
        raise ConfigError("grid bounds must satisfy lo < hi inside the parameter domain")
    num = int(fit.get("num", 81))
    if num < 3:
        raise ConfigError("grid needs at least 3 points")
    if lo == dom[0] or hi == dom[1]:
        # open domains: keep the grid strictly inside
        span = (hi - lo) / (num - 1)
        lo += span * 1e-6 if lo == dom[0] else 0.0
        hi -= span * 1e-6 if hi == dom[1] else 0.0
    return lo, hi, num


def optim_config(cfg, stream_key):
    fit = cfg.fit
    seed = int(rng_for(cfg.seed, *stream_key, _OPTIM).integers(2**31 - 1))
    kw = {k: fit[k] for k in ("gamma", "schedule", "minibatch_size", "max_iters",
                              "preconditioner", "reparam", "tol") if k in fit}
    try:
        oc = OptimConfig(seed=seed, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    oc.validate()
    return oc


def fit_sample(cfg, setup, X, stream_key=(0,)):
    """Fit the configured estimator to ``X``; returns ``(theta_hat, loss)``."""
    method = cfg.fit.get("method", "grid")
    bundle = setup.bundle
    if method == "grid":
        lo, hi, num = grid_bounds(cfg, setup)
        if cfg.fit.get("refine", True):
            th, loss, _ = grid_refine(bundle, X, lo, hi, num)
            return th, loss
        scan = grid_scan(bundle, X, np.linspace(lo, hi, num))
        k = scan.argmin()
        return scan.thetas[k], float(scan.losses[k])
    if method == "optimizer":
        theta0 = np.asarray(cfg.fit.get("theta0", setup.theta_true), dtype=float)
        th, traj = sgd_run(bundle, X, theta0, optim_config(cfg, stream_key))
        return th, float(bundle.loss(th, X))
    spec = setup.base_model
    est = cfg.estimator
    if est in ("sm", "dsm", "nnsm"):
        q = dsm_quadratic(spec, setup.diffusion, X)
    else:
        q = dksd_quadratic(spec, setup.kernel, setup.diffusion, X)
    th = solve_quadratic(q)
    loss = q(th) * (0.5 if est == "sm" else 1.0)
    return th, loss


@dataclass
class RepRecord:
    rep: int
    theta: Optional[np.ndarray]
    loss: float
    millis: float
    error: Optional[str] = None


def _one_rep(cfg, setup, rep):
    start = time.perf_counter()
    try:
        X = draw_sample(cfg, (rep,))
        th, loss = fit_sample(cfg, setup, X, (rep,))
        th = np.atleast_1d(np.asarray(th, dtype=float))
        if not (np.all(np.isfinite(th)) and math.isfinite(loss)):
            raise NumericalError("fit produced a non-finite result")
        return RepRecord(rep, th, float(loss), 1000.0 * (time.perf_counter() - start))
    except (DiffSteinError, np.linalg.LinAlgError) as exc:
        return RepRecord(rep, None, float("nan"), 1000.0 * (time.perf_counter() - start),
                         f"{type(exc).__name__}: {exc}")


# ----------------------------------------------------------------------
# results

@dataclass
class RunResult:
    config: ExperimentConfig
    names: list
    theta_true: np.ndarray
    records: list
    sandwich: Optional[np.ndarray] = None
    sandwich_error: Optional[str] = None

    @property
    def thetas(self):
        p = len(self.names)
        return np.array([np.full(p, np.nan) if r.theta is None else r.theta for r in self.records])

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    @property
    def ok(self):
        return np.array([r.error is None for r in self.records])

    def median(self):
        return np.median(self.thetas[self.ok], axis=0)

    def mad(self):
        T = self.thetas[self.ok]
        return np.median(np.abs(T - np.median(T, axis=0)), axis=0)

    def abs_error(self):
        return np.abs(self.thetas - self.theta_true)

    def csv_header(self, timing=False):
        cols = ["rep"] + [f"theta_hat_{nm}" for nm in self.names] + ["loss"]
        return cols + (["millis"] if timing else [])

    def csv_rows(self, timing=False):
        for r, th in zip(self.records, self.thetas):
            row = [r.rep, *th.tolist(), r.loss]
            if timing:
                row.append(r.millis)
            yield row

    def to_csv(self, path, timing=False):
        write_rows(path, self.csv_header(timing), self.csv_rows(timing))

    def summary(self):
        ok = self.ok
        out = {
            "model": self.config.model,
            "estimator": self.config.estimator,
            "n": self.config.n,
            "replications": len(self.records),
            "succeeded": int(ok.sum()),
            "param_names": self.names,
            "theta_true": [json_number(v) for v in self.theta_true],
            "median": [json_number(v) for v in self.median()],
            "mad": [json_number(v) for v in self.mad()],
            "median_abs_error": [json_number(v) for v in np.median(self.abs_error()[ok], axis=0)],
            "failures": [{"rep": r.rep, "error": r.error} for r in self.records if r.error],
        }
        if self.sandwich is not None:
            out["sandwich_cov_at_median"] = [[json_number(v) for v in row] for row in self.sandwich]
        if self.sandwich_error:
            out["sandwich_error"] = self.sandwich_error
        return out

    def write(self, out_dir, timing=False, prefix=""):
        os.makedirs(out_dir, exist_ok=True)
        self.to_csv(os.path.join(out_dir, f"reps{prefix}.csv"), timing)
        write_json(os.path.join(out_dir, f"summary{prefix}.json"), self.summary())


def run_experiment(cfg, sandwich=True):
    """Replicated fits; replications run concurrently with per-rep RNG streams.

    Raises :class:`NumericalError` only when every replication fails.
    """
    setup = build_setup(cfg)
    records = _backend.parallel_map(lambda r: _one_rep(cfg, setup, r), range(cfg.replications))
    res = RunResult(cfg, setup.names, setup.theta_true, records)
    if not res.ok.any():
        raise NumericalError(f"all {cfg.replications} replications failed; first error: {records[0].error}")
    if sandwich:
        first = next(r.rep for r in records if r.error is None)
        try:
            X = draw_sample(cfg, (first,))
            res.sandwich = np.atleast_2d(setup.bundle.sandwich(res.median(), X))
        except (DiffSteinError, np.linalg.LinAlgError) as exc:
            res.sandwich_error = f"{type(exc).__name__}: {exc}"
    return res


# ----------------------------------------------------------------------
# single-sample helpers used by the CLI

def run_scan(cfg, rep=0):
    """Loss over the fit grid on the sample of replication ``rep``."""
    setup = build_setup(cfg)
    if setup.model.dim_theta != 1:
        raise ConfigError("scan needs exactly one free parameter")
    lo, hi, num = grid_bounds(cfg, setup)
    X = draw_sample(cfg, (rep,))
    return grid_scan(setup.bundle, X, np.linspace(lo, hi, num)), setup


def fitted_for_influence(cfg, setup, theta):
    est = cfg.estimator
    if est == "sm":
        return "sm", (setup.model, theta)
    if est in ("dsm", "nnsm"):
        return "dsm", (setup.model, setup.diffusion, theta)
    return "dksd", SteinKernelCtx(setup.model, setup.kernel, setup.diffusion, theta)


def run_influence(cfg, rep=0):
    """Fit on one sample, then evaluate the influence function over a grid."""
    setup = build_setup(cfg)
    spec = cfg.influence or {}
    bad = sorted(set(spec) - {"lo", "hi", "num"})
    if bad:
        raise ConfigError(f"unknown influence settings: {bad}")
    d = setup.model.dim_x
    if d != 1:
        raise ConfigError("influence grids are one-dimensional; the model must have d = 1")
    lo, hi, num = float(spec.get("lo", -20.0)), float(spec.get("hi", 20.0)), int(spec.get("num", 201))
    X = draw_sample(cfg, (rep,))
    th, _ = fit_sample(cfg, setup, X, (rep,))
    kind, fitted = fitted_for_influence(cfg, setup, th)
    curve = influence_curve(kind, fitted, X, np.linspace(lo, hi, num))
    return curve, th, setup


# ----------------------------------------------------------------------
# CLT replication study

@dataclass
class CLTResult:
    rows: list
    normality: dict
    pooled: dict
    failures: dict
    names: list

    def to_csv(self, path):
        write_rows(path, ["n", "i", "j", "empirical", "sandwich", "ratio"], self.rows)

    def cov(self, n, which="empirical"):
        p = len(self.names)
        out = np.zeros((p, p))
        col = 3 if which == "empirical" else 4
        for row in self.rows:
            if row[0] == n:
                out[row[1], row[2]] = row[col]
        return out

    def summary(self):
        ns = sorted(self.normality)
        out = {
            "param_names": self.names,
            "n_list": ns,
            "normality_corr": {str(n): [json_number(v) for v in self.normality[n]] for n in ns},
            "pooled_theta": {str(n): [json_number(v) for v in self.pooled[n]] for n in ns},
            "failures": {str(n): self.failures[n] for n in ns},
            "ratios": {str(n): [json_number(r[5]) for r in self.rows if r[0] == n] for n in ns},
        }
        if len(ns) > 1:
            a, b = self.cov(ns[0]), self.cov(ns[-1])
            with np.errstate(divide="ignore", invalid="ignore"):
                out["scaled_cov_ratio_last_first"] = [json_number(v) for v in (b / a).ravel()]
        return out


def clt_study(cfg, n_list=None, replications=None):
    """Empirical vs plug-in sandwich covariance of ``sqrt(n)(theta_hat - theta*)``.

    For each ``n`` the fits use streams ``(n, rep)``; the sandwich is the
    average of per-replication plug-in sandwiches evaluated at the pooled
    (mean) estimate.
    """
    n_list = list(n_list or (cfg.clt or {}).get("n_list") or [cfg.n])
    R = int(replications or cfg.replications)
    if R < 3:
        raise ConfigError("a CLT study needs at least 3 replications")
    setup = build_setup(cfg)
    p = len(setup.names)
    rows, normality, pooled, failures = [], {}, {}, {}
    for n in n_list:
        n = int(n)

        def one(rep):
            try:
                X = draw_sample(cfg, (n, rep), n=n)
                th, _ = fit_sample(cfg, setup, X, (n, rep))
                return np.atleast_1d(th), X, None
            except (DiffSteinError, np.linalg.LinAlgError) as exc:
                return None, None, f"{type(exc).__name__}: {exc}"

        res = _backend.parallel_map(one, range(R))
        good = [(th, X) for th, X, err in res if err is None]
        failures[n] = [{"rep": k, "error": err} for k, (_, _, err) in enumerate(res) if err]
        if len(good) < 3:
            raise NumericalError(f"too few successful replications at n={n}")
        T = np.array([th for th, _ in good])
        Z = np.sqrt(n) * (T - setup.theta_true)
        emp = np.atleast_2d(np.cov(Z, rowvar=False, ddof=1))
        bar = T.mean(axis=0)
        sands = _backend.parallel_map(lambda g: np.atleast_2d(setup.bundle.sandwich(bar, g[1])), good)
        sand = np.mean(sands, axis=0)
        for i in range(p):
            for j in range(p):
                ratio = emp[i, j] / sand[i, j] if sand[i, j] != 0 else float("nan")
                rows.append([n, i, j, float(emp[i, j]), float(sand[i, j]), float(ratio)])
        normality[n] = [float(stats.probplot(Z[:, i], dist="norm")[1][2]) for i in range(p)]
        pooled[n] = bar
    return CLTResult(rows, normality, pooled, failures, setup.names)
