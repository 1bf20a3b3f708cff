"""Desk-scale experiment presets.

Each preset takes a flat parameter mapping (defaults below, overridable from
the CLI with ``--config``), writes CSV files plus ``summary.json`` into the
output directory and returns the summary.
"""

import copy
import os

import numpy as np

from ..errors import ConfigError, DiffSteinError
from ..estimators import DKSDBundle
from ..optim import OptimConfig, grid_scan, sgd_run
from ..robust import influence_curve
from .experiment import (
    ExperimentConfig,
    build_setup,
    clt_study,
    draw_sample,
    fit_sample,
    fitted_for_influence,
    grid_bounds,
    json_number,
    run_experiment,
    write_json,
    write_rows,
)

LENGTHSCALES = [0.1, 0.5, 1.0, 2.0, 5.0]

DEFAULTS = {
    "bessel_loc": {
        "s": 2.0, "n": 500, "theta_true": [0.0, 1.0], "param": "loc",
        "lengthscales": LENGTHSCALES, "lo": -2.0, "hi": 2.0, "num": 81, "seed": 0,
    },
    "studentt_loc": {
        "nu": 5.0, "theta_true": [25.0, 10.0], "n": 300, "replications": 50,
        "lo": 15.0, "hi": 35.0, "num": 81, "seed": 0,
        "ksd_kernel": {"c": 1.0, "beta": -0.5}, "dksd_kernel": {"c": 10.0, "beta": -0.5},
    },
    "studentt_scale": {
        "nu": 5.0, "theta_true": [25.0, 10.0], "n": 300, "replications": 20,
        "lo": 2.0, "hi": 30.0, "num": 113, "seed": 0,
        "ksd_kernel": {"c": 1.0, "beta": -0.5}, "dksd_kernel": {"c": 10.0, "beta": -0.5},
    },
    "studentt_optim": {
        "nu": 5.0, "theta_true": [25.0, 10.0], "n": 1000, "theta0": 15.0,
        "gamma": 0.1, "minibatch_size": 50, "max_iters": 1000,
        "kernel": {"c": 1.0, "beta": -0.5}, "lo": 15.0, "hi": 35.0, "num": 81,
        "dense_iters": 100, "eval_every": 10, "seed": 0,
    },
    "gengamma_robust": {
        "theta_true": [0.0, 2.0], "alpha": 2.0, "n": 300, "replications": 50,
        "corrupt_count": 80, "corrupt_value": 8.0, "lo": -4.0, "hi": 10.0, "num": 141,
        "lengthscale": 1.0, "z_lo": -30.0, "z_hi": 30.0, "z_num": 601, "seed": 0,
    },
    "intractable": {
        "d": 6, "theta_true": [-1.0], "n": 200, "replications": 20,
        "lengthscale": 1.0, "gamma": 0.1, "max_iters": 300, "theta0": 0.0, "seed": 0,
    },
    "gauss_clt": {
        "theta_true": [0.0], "n_list": [1000, 4000], "replications": 200,
        "lo": -1.0, "hi": 1.0, "num": 41, "seed": 0,
    },
}

PRESET_IDS = tuple(DEFAULTS)


def preset_params(name, overrides=None):
    if name not in DEFAULTS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESET_IDS)}")
    params = copy.deepcopy(DEFAULTS[name])
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - set(params))
    if unknown:
        raise ConfigError(f"unknown parameters for preset {name}: {unknown}")
    params.update(overrides)
    return params


def _imq(spec):
    return {"name": "imq", "params": {"c": float(spec["c"]), "beta": float(spec["beta"])}}


def _scan_to(path, cfg, setup, X):
    lo, hi, num = grid_bounds(cfg, setup)
    scan = grid_scan(setup.bundle, X, np.linspace(lo, hi, num))
    scan.to_csv(path, setup.names)
    return scan


# ----------------------------------------------------------------------

def _bessel_loc(p, out, timing):
    idx = {"loc": 0, "scale": 1}.get(p["param"])
    if idx is None:
        raise ConfigError("param must be 'loc' or 'scale'")
    base = dict(model="symmetric_bessel", hyper={"s": float(p["s"])}, theta_true=p["theta_true"],
                free=[idx], n=int(p["n"]), seed=int(p["seed"]),
                fit={"method": "grid", "lo": p["lo"], "hi": p["hi"], "num": int(p["num"])})
    jobs = [("sm", ExperimentConfig.from_dict(dict(base, estimator="sm")))]
    for ell in p["lengthscales"]:
        k = {"name": "gaussian", "params": {"lengthscale": float(ell)}}
        jobs.append((f"ksd_ell{float(ell):g}", ExperimentConfig.from_dict(dict(base, estimator="ksd", kernel=k))))
    X = draw_sample(jobs[0][1], (0,))
    summary = {"preset": "bessel_loc", "params": p, "grid_min": {}, "refined_min": {}}
    for tag, cfg in jobs:
        setup = build_setup(cfg)
        scan = _scan_to(os.path.join(out, f"scan_{tag}.csv"), cfg, setup, X)
        summary["grid_min"][tag] = json_number(scan.best()[0])
        try:
            summary["refined_min"][tag] = json_number(fit_sample(cfg, setup, X)[0][0])
        except DiffSteinError as exc:  # recorded, the scan is still useful
            summary["refined_min"][tag] = None
            summary.setdefault("errors", {})[tag] = str(exc)
    return summary


def _studentt(p, out, timing, which):
    free = [0] if which == "loc" else [1]
    base = dict(model="student_t", hyper={"nu": float(p["nu"])}, theta_true=p["theta_true"], free=free,
                n=int(p["n"]), replications=int(p["replications"]), seed=int(p["seed"]),
                fit={"method": "grid", "lo": p["lo"], "hi": p["hi"], "num": int(p["num"])})
    ksd_k, dksd_k = _imq(p["ksd_kernel"]), _imq(p["dksd_kernel"])
    if which == "loc":
        plan = [("sm", {}), ("ksd", {"kernel": ksd_k}),
                ("dksd", {"kernel": dksd_k, "diffusion": {"name": "student_loc"}})]
    else:
        plan = [("sm", {}), ("ksd", {"kernel": ksd_k}), ("nnsm", {}), ("nnksd", {"kernel": ksd_k}),
                ("dksd", {"kernel": dksd_k,
                          "diffusion": {"name": "student_scale", "hyper": {"nu": float(p["nu"])}}})]
    summary = {"preset": f"studentt_{which}", "params": p, "estimators": {}}
    errs = {}
    for est, extra in plan:
        cfg = ExperimentConfig.from_dict(dict(base, estimator=est, **extra))
        res = run_experiment(cfg)
        res.to_csv(os.path.join(out, f"reps_{est}.csv"), timing)
        summary["estimators"][est] = res.summary()
        errs[est] = res.abs_error()[:, 0]
        setup = build_setup(cfg)
        _scan_to(os.path.join(out, f"scan_{est}.csv"), cfg, setup, draw_sample(cfg, (0,)))
    if which == "loc":
        d = errs["dksd"]
        summary["comparison"] = {
            "frac_dksd_within_1": json_number(np.nanmean(d < 1.0)),
            "frac_sm_worse_than_dksd": json_number(np.nanmean(errs["sm"] > d)),
            "frac_ksd_worse_than_dksd": json_number(np.nanmean(errs["ksd"] > d)),
            "frac_sm_and_ksd_worse": json_number(np.nanmean((errs["sm"] > d) & (errs["ksd"] > d))),
        }
    summary["median_abs_error"] = {k: json_number(np.nanmedian(v)) for k, v in errs.items()}
    return summary


def _studentt_optim(p, out, timing):
    cfg = ExperimentConfig.from_dict(dict(
        model="student_t", hyper={"nu": float(p["nu"])}, theta_true=p["theta_true"], free=[0],
        n=int(p["n"]), seed=int(p["seed"]), estimator="ksd", kernel=_imq(p["kernel"]),
        fit={"method": "grid", "lo": p["lo"], "hi": p["hi"], "num": int(p["num"])}))
    setup = build_setup(cfg)
    bundle = setup.bundle
    X = draw_sample(cfg, (0,))
    th_min, loss_min = fit_sample(cfg, setup, X)
    theta0 = np.array([float(p["theta0"])])
    loss0 = float(bundle.loss(theta0, X))
    dense, every = int(p["dense_iters"]), int(p["eval_every"])
    summary = {"preset": "studentt_optim", "params": p, "grid_min_theta": json_number(th_min[0]),
               "grid_min_loss": json_number(loss_min), "initial_loss": json_number(loss0), "runs": {}}
    for tag, pre in (("rsgd", "info_metric"), ("sgd", "identity")):
        oc = OptimConfig(gamma=float(p["gamma"]), minibatch_size=int(p["minibatch_size"]),
                         max_iters=int(p["max_iters"]), preconditioner=pre, seed=int(p["seed"]))
        th, traj = sgd_run(bundle, X, theta0, oc)
        thetas = [t[0] for t in traj.theta] + [th[0]]
        losses = traj.loss + [float("nan")]
        gnorm = traj.grad_norm + [float("nan")]
        millis = traj.millis + [float("nan")]
        rows, first_hit = [], None
        for it, t in enumerate(thetas):
            full = float("nan")
            if it <= dense or it % every == 0 or it == len(thetas) - 1:
                full = float(bundle.loss(np.array([t]), X))
                gap = (full - loss_min) / (loss0 - loss_min)
                if first_hit is None and gap <= 0.05:
                    first_hit = it
            row = [it, t, losses[it], full, gnorm[it]]
            rows.append(row + ([millis[it]] if timing else []))
        header = ["iter", "theta_0", "batch_loss", "full_loss", "grad_norm"] + (["millis"] if timing else [])
        write_rows(os.path.join(out, f"traj_{tag}.csv"), header, rows)
        summary["runs"][tag] = {"final_theta": json_number(th[0]), "first_iter_within_5pct": first_hit,
                                "final_full_loss": json_number(rows[-1][3])}
    return summary


def _gengamma(p, out, timing):
    alpha = float(p["alpha"])
    decay = {"name": "decay", "hyper": {"alpha": alpha}}
    kern = {"name": "gaussian", "params": {"lengthscale": float(p["lengthscale"])}}
    base = dict(model="generalized_gamma", theta_true=p["theta_true"], free=[0], n=int(p["n"]),
                replications=int(p["replications"]), seed=int(p["seed"]),
                corruption={"count": int(p["corrupt_count"]), "value": float(p["corrupt_value"])},
                fit={"method": "grid", "lo": p["lo"], "hi": p["hi"], "num": int(p["num"])})
    plan = [("sm", {}), ("dsm", {"diffusion": decay}), ("dksd", {"diffusion": decay, "kernel": kern})]
    summary = {"preset": "gengamma_robust", "params": p, "estimators": {}, "influence": {}}
    z = np.linspace(float(p["z_lo"]), float(p["z_hi"]), int(p["z_num"]))
    for est, extra in plan:
        cfg = ExperimentConfig.from_dict(dict(base, estimator=est, **extra))
        res = run_experiment(cfg)
        res.to_csv(os.path.join(out, f"reps_{est}.csv"), timing)
        th = res.thetas[:, 0]
        s = res.summary()
        s["frac_abs_below_0.5"] = json_number(np.nanmean(np.abs(th) < 0.5))
        s["frac_above_1"] = json_number(np.nanmean(th > 1.0))
        summary["estimators"][est] = s
        # influence on clean data at the clean fit
        clean = ExperimentConfig.from_dict(dict(cfg.to_dict(), corruption=None))
        setup = build_setup(clean)
        X = draw_sample(clean, (0,))
        th0, _ = fit_sample(clean, setup, X)
        kind, fitted = fitted_for_influence(clean, setup, th0)
        curve = influence_curve(kind, fitted, X, z)
        curve.to_csv(os.path.join(out, f"influence_{est}.csv"))
        summary["influence"][est] = influence_stats(z, curve.values[:, 0])
    return summary


def influence_stats(z, values, inner=20.0):
    """Linear-fit R^2 and sup-norm extent stability of a 1-d influence curve."""
    ok = np.isfinite(values)
    zz, vv = z[ok], values[ok]
    coef = np.polyfit(zz, vv, 1)
    resid = vv - np.polyval(coef, zz)
    tot = np.sum((vv - vv.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / tot if tot > 0 else 1.0
    inside = np.abs(zz) <= inner + 1e-12
    sup_in = float(np.max(np.abs(vv[inside])))
    sup_all = float(np.max(np.abs(vv)))
    change = (sup_all - sup_in) / sup_in if sup_in > 0 else float("inf")
    return {"r2_linear": json_number(r2), "sup_inner": json_number(sup_in), "sup_full": json_number(sup_all),
            "relative_sup_change": json_number(change), "failed_points": int((~ok).sum())}


def _intractable(p, out, timing):
    kern = {"name": "gaussian", "params": {"lengthscale": float(p["lengthscale"])}}
    base = dict(model="intractable_expfam", hyper={"d": int(p["d"])}, theta_true=p["theta_true"],
                n=int(p["n"]), replications=int(p["replications"]), seed=int(p["seed"]),
                fit={"method": "closed_form"})
    plan = [("dksd", {"kernel": kern, "diffusion": {"name": "recip_diag"}}),
            ("ksd", {"kernel": kern}), ("sm", {})]
    summary = {"preset": "intractable", "params": p, "estimators": {}}
    results = {}
    for est, extra in plan:
        cfg = ExperimentConfig.from_dict(dict(base, estimator=est, **extra))
        res = run_experiment(cfg, sandwich=False)
        res.to_csv(os.path.join(out, f"reps_{est}.csv"), timing)
        summary["estimators"][est] = res.summary()
        results[est] = res
    # closed form vs full-batch Riemannian SGD on the first replication whose
    # quadratic is positive definite
    rep = next(r.rep for r in results["dksd"].records if r.error is None)
    cfg = ExperimentConfig.from_dict(dict(base, estimator="dksd", **plan[0][1]))
    setup = build_setup(cfg)
    X = draw_sample(cfg, (rep,))
    closed, _ = fit_sample(cfg, setup, X)
    oc = OptimConfig(gamma=float(p["gamma"]), minibatch_size=X.shape[0], max_iters=int(p["max_iters"]),
                     preconditioner="info_metric", seed=int(p["seed"]))
    bundle = DKSDBundle(setup.model, setup.kernel, setup.diffusion)
    th, traj = sgd_run(bundle, X, [float(p["theta0"])], oc)
    traj.to_csv(os.path.join(out, "traj_rsgd.csv"), timing)
    summary["closed_vs_rsgd"] = {"rep": rep, "closed_form": json_number(closed[0]), "rsgd": json_number(th[0]),
                                 "abs_diff": json_number(abs(closed[0] - th[0]))}
    return summary


def _gauss_clt(p, out, timing):
    cfg = ExperimentConfig.from_dict(dict(
        model="gaussian_location", theta_true=p["theta_true"], n=int(p["n_list"][0]),
        estimator="dsm", replications=int(p["replications"]), seed=int(p["seed"]),
        fit={"method": "grid", "lo": p["lo"], "hi": p["hi"], "num": int(p["num"])},
        clt={"n_list": [int(v) for v in p["n_list"]]}))
    res = clt_study(cfg)
    res.to_csv(os.path.join(out, "clt.csv"))
    s = res.summary()
    s.update({"preset": "gauss_clt", "params": p})
    return s


_RUNNERS = {
    "bessel_loc": _bessel_loc,
    "studentt_loc": lambda p, o, t: _studentt(p, o, t, "loc"),
    "studentt_scale": lambda p, o, t: _studentt(p, o, t, "scale"),
    "studentt_optim": _studentt_optim,
    "gengamma_robust": _gengamma,
    "intractable": _intractable,
    "gauss_clt": _gauss_clt,
}


def run_preset(name, out_dir, seed=None, overrides=None, timing=False):
    """Run a preset and write its files plus ``summary.json`` under ``out_dir``."""
    params = preset_params(name, overrides)
    if seed is not None:
        params["seed"] = int(seed)
    os.makedirs(out_dir, exist_ok=True)
    summary = _RUNNERS[name](params, out_dir, timing)
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary
