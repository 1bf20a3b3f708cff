"""Command-line entry point: ``diffstein <command> ...``.

Exit status is 0 on success, 1 for configuration errors (bad or missing
files, unknown ids) and 2 for numerical failures.
"""

import argparse
import json
import os
import sys

import numpy as np

from .. import BACKEND_NAME
from ..diffusion import DIFFUSION_IDS
from ..errors import ConfigError, NumericalError
from ..kernel import MATRIX_FORMS, SCALAR_KERNEL_IDS
from ..model import MODEL_IDS
from .experiment import (
    ESTIMATORS,
    ExperimentConfig,
    clt_study,
    json_number,
    run_experiment,
    run_influence,
    run_scan,
    write_json,
)
from .presets import PRESET_IDS, run_preset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p, with_config=True):
    if with_config:
        p.add_argument("config", help="experiment file (JSON)")
    p.add_argument("--out", help="output directory (default: the config's output field)")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--threads", type=int, help="worker threads (sets STEIN_ESTIM_THREADS)")
    p.add_argument("--timing", action="store_true",
                   help="add wall-clock columns; such files are not reproducible byte for byte")


def build_parser():
    parser = _Parser(prog="diffstein", description="Minimum Stein discrepancy estimation experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_ in (("estimate", "replicated fits: reps.csv and summary.json"),
                        ("scan", "loss over the fit grid: scan_<estimator>.csv"),
                        ("influence", "influence function over a grid: influence.csv"),
                        ("clt", "CLT replication study: clt.csv")):
        _common(sub.add_parser(name, help=help_))
    pp = sub.add_parser("preset", help="run a named preset")
    pp.add_argument("name", help="preset id (see `diffstein list`)")
    pp.add_argument("--config", help="JSON object overriding preset parameters")
    _common(pp, with_config=False)
    sub.add_parser("list", help="print known ids")
    return parser


def _load(args):
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out_dir(args, cfg=None):
    out = args.out or (cfg.output if cfg is not None else None)
    if not out:
        raise ConfigError("no output directory: pass --out or set the output field")
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_list(_args):
    print("models:      " + " ".join(MODEL_IDS))
    print("kernels:     " + " ".join(SCALAR_KERNEL_IDS) + "  (matrix forms: " + " ".join(MATRIX_FORMS) + ")")
    print("diffusions:  " + " ".join(DIFFUSION_IDS))
    print("estimators:  " + " ".join(ESTIMATORS))
    print("presets:     " + " ".join(PRESET_IDS))
    print("backend:     " + BACKEND_NAME)


def _cmd_estimate(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    res = run_experiment(cfg)
    res.write(out, args.timing)
    s = res.summary()
    print(f"{cfg.estimator}: median {s['median']} over {s['succeeded']}/{s['replications']} replications")


def _cmd_scan(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    scan, setup = run_scan(cfg)
    scan.to_csv(os.path.join(out, f"scan_{cfg.estimator}.csv"), setup.names)
    best = scan.best()
    write_json(os.path.join(out, "summary.json"), {
        "estimator": cfg.estimator, "param_names": setup.names,
        "grid_min": [json_number(v) for v in best],
        "failed_points": int(sum(e is not None for e in scan.errors)),
    })
    print(f"{cfg.estimator}: grid minimum at {best.tolist()}")


def _cmd_influence(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    curve, theta, setup = run_influence(cfg)
    curve.to_csv(os.path.join(out, "influence.csv"))
    write_json(os.path.join(out, "summary.json"), {
        "estimator": cfg.estimator, "param_names": setup.names,
        "theta_hat": [json_number(v) for v in theta],
        "max_norm": json_number(max((v for v in curve.norm if v == v), default=float("nan"))),
        "failed_points": int(sum(e is not None for e in curve.errors)),
    })
    print(f"{cfg.estimator}: influence at {len(curve.z)} points written")


def _cmd_clt(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    res = clt_study(cfg)
    res.to_csv(os.path.join(out, "clt.csv"))
    write_json(os.path.join(out, "summary.json"), res.summary())
    for row in res.rows:
        print(f"n={row[0]} entry ({row[1]},{row[2]}): empirical {row[3]:.4g} sandwich {row[4]:.4g} ratio {row[5]:.3f}")


def _cmd_preset(args):
    overrides = None
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError("preset overrides must be a JSON object")
    if args.name not in PRESET_IDS:
        raise ConfigError(f"unknown preset {args.name!r}; known: {', '.join(PRESET_IDS)}")
    out = _out_dir(args)
    run_preset(args.name, out, seed=args.seed, overrides=overrides, timing=args.timing)
    print(f"preset {args.name}: outputs in {out}")


_COMMANDS = {
    "list": _cmd_list,
    "estimate": _cmd_estimate,
    "scan": _cmd_scan,
    "influence": _cmd_influence,
    "clt": _cmd_clt,
    "preset": _cmd_preset,
}


def main(argv=None):
    saved = os.environ.get("STEIN_ESTIM_THREADS")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("missing command; choose one of " + ", ".join(_COMMANDS))
        if getattr(args, "threads", None) is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            os.environ["STEIN_ESTIM_THREADS"] = str(args.threads)
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"diffstein: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"diffstein: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # DomainError and other invalid-input errors
        print(f"diffstein: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if saved is None:
            os.environ.pop("STEIN_ESTIM_THREADS", None)
        else:
            os.environ["STEIN_ESTIM_THREADS"] = saved
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
