"""Command-line interface.

Exit codes: 0 success, 2 usage or input error, 3 training aborted,
4 requested branch does not exist.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRAINING = 3
EXIT_BRANCH = 4

log = logging.getLogger("hopf_hybrid")


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _load_model(path):
    from .storage import read_model

    try:
        return read_model(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read model {path}: {exc}") from exc


def _load_data(path):
    from .storage import read_dataset

    try:
        return read_dataset(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}") from exc


def _load_config(path):
    from .training import ConfigError, TrainingConfig

    try:
        return TrainingConfig.from_file(path)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}") from exc
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from . import reference_systems as rs
    from .errors import HopfHybridError
    from .storage import write_dataset

    try:
        if args.system == "vdp":
            kw = {}
            if args.mu:
                kw["mu_values"] = args.mu
            for name, key in (("dt", "dt"), ("record", "record_time"), ("settle", "settle_time")):
                if getattr(args, name) is not None:
                    kw[key] = getattr(args, name)
            ds = rs.make_vdp_dataset(**kw)
        else:
            kw = {}
            if args.mu:
                kw["stable_mu"] = args.mu
            if args.unstable_mu:
                kw["unstable_mu"] = args.unstable_mu
            if args.dt is not None:
                kw["dt"] = args.dt
            if args.record is not None:
                kw["record_time"] = args.record
            ds = rs.make_aero_dataset(**kw)
    except (HopfHybridError, ValueError, np.linalg.LinAlgError) as exc:
        raise CliError(f"data generation failed: {type(exc).__name__}: {exc}") from exc
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .errors import HopfHybridError, OptimizerAbort
    from .storage import dataset_columns, write_json, write_model
    from .training import train_full

    cfg = _load_config(args.config)
    ds = _load_data(args.data)
    report_path = args.report or _sibling(args.out, ".report.json")
    try:
        model, report = train_full(ds, cfg, dataset_columns(args.data))
    except OptimizerAbort as exc:
        write_json(report_path, exc.report.to_dict())
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (HopfHybridError, ValueError, np.linalg.LinAlgError) as exc:
        if hasattr(exc, "report"):
            write_json(report_path, exc.report.to_dict())
        print(f"training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    write_model(model, args.out)
    write_json(report_path, report.to_dict())
    nf = model.normal_form
    print(f"mu0={nf.mu0:.6g} a2={nf.a2:.6g} omega0={model.speed.omega0:.6g}")
    return EXIT_OK


def _sibling(path, suffix):
    return path[:-5] + suffix if path.endswith(".json") else path + suffix


def cmd_predict_bifurcation(args):
    from .storage import write_csv

    model = _load_model(args.model)
    if args.steps < 1:
        raise CliError("--steps must be >= 1")
    grid = [args.mu_min] if args.steps == 1 else np.linspace(args.mu_min, args.mu_max, args.steps)
    rows = model.bifurcation_rows(grid)
    write_csv(args.out, ["mu", "branch", "radius", "amplitude", "a0", "z1_ptp", "z2_ptp"], rows)
    if not any(r[1] in ("stable", "unstable") for r in rows):
        print("no periodic orbits in the requested parameter range", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_predict_orbit(args):
    from .orbit_geometry import equispaced_angles
    from .storage import write_csv

    model = _load_model(args.model)
    pts = model.orbit_points(args.mu, args.stability, args.points)
    phi = equispaced_angles(args.points)
    header = ["phi"] + [f"z{i + 1}" for i in range(pts.shape[1])] + ["mu"]
    write_csv(args.out, header, np.column_stack([phi, pts, np.full(len(phi), args.mu)]))
    return EXIT_OK


def cmd_predict_timeseries(args):
    from .storage import write_csv

    model = _load_model(args.model)
    if args.dt <= 0 or args.tmax < 0:
        raise CliError("--dt must be > 0 and --tmax >= 0")
    n = int(round(args.tmax / args.dt))
    t = args.dt * np.arange(n + 1)
    _, z = model.predict_timeseries(args.mu, args.stability, t, z_init=args.init)
    header = ["t"] + [f"z{i + 1}_hat" for i in range(z.shape[1])] + ["mu"]
    write_csv(args.out, header, np.column_stack([t, z, np.full(t.size, args.mu)]))
    return EXIT_OK


def cmd_cross_validate(args):
    from .storage import write_json
    from .training import leave_one_out

    cfg = _load_config(args.config)
    ds = _load_data(args.data)
    folds = leave_one_out(ds, cfg)
    doc = {"schema": "hopf_hybrid.cross_validation", "schema_version": 1,
           "folds": [f.summary() for f in folds]}
    write_json(args.out, doc)
    ok = sum(f.model is not None for f in folds)
    print(f"{ok}/{len(folds)} folds trained")
    return EXIT_OK if ok else EXIT_TRAINING


def cmd_eval(args):
    from .errors import HopfHybridError
    from .storage import write_json
    from .training import timeseries_nrmse

    model = _load_model(args.model)
    ds = _load_data(args.data)
    try:
        metrics = {
            "shape_loss": model.shape_loss(ds),
            "speed_loss": model.speed_loss(ds),
            "orbit_errors": model.orbit_errors(ds),
            "timeseries_nrmse": [
                {"record_id": r.record_id, "nrmse": timeseries_nrmse(model, r, model.config.get("downsample", 1000))}
                for r in ds.records],
            "invertibility": model.invertibility((min(r.mu for r in ds), max(r.mu for r in ds))),
            "mu0": model.normal_form.mu0,
            "a2": model.normal_form.a2,
            "omega0": model.speed.omega0,
            "fingerprint_match": model.fingerprint == _fingerprint(ds),
        }
    except HopfHybridError as exc:
        raise CliError(f"evaluation failed: {type(exc).__name__}: {exc}", EXIT_BRANCH) from exc
    write_json(args.out, metrics)
    return EXIT_OK


def _fingerprint(ds):
    from .model import dataset_fingerprint

    return dataset_fingerprint(ds)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hopf-hybrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate reference LCO datasets")
    g.add_argument("--system", choices=("vdp", "aero"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--mu", type=_floats, help="parameter values (stable records for aero)")
    g.add_argument("--unstable-mu", type=_floats, help="aero unstable-record airspeeds")
    g.add_argument("--dt", type=float)
    g.add_argument("--record", type=float, help="record length")
    g.add_argument("--settle", type=float, help="transient discarded before recording (vdp)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="identify a hybrid model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("predict-bifurcation", help="bifurcation diagram as CSV")
    b.add_argument("--model", required=True)
    b.add_argument("--mu-min", type=float, required=True)
    b.add_argument("--mu-max", type=float, required=True)
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_predict_bifurcation)

    for name, func in (("predict-orbit", cmd_predict_orbit), ("predict-timeseries", cmd_predict_timeseries)):
        o = sub.add_parser(name)
        o.add_argument("--model", required=True)
        o.add_argument("--mu", type=float, required=True)
        o.add_argument("--stability", choices=("stable", "unstable"), default="stable")
        o.add_argument("--out", required=True)
        if name == "predict-orbit":
            o.add_argument("--points", type=int, default=100)
        else:
            o.add_argument("--tmax", type=float, default=10.0)
            o.add_argument("--dt", type=float, default=0.01)
            o.add_argument("--init", type=_floats, help="observed initial point z1,z2")
        o.set_defaults(func=func)

    c = sub.add_parser("cross-validate", help="leave-one-out retraining")
    c.add_argument("--data", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cross_validate)

    e = sub.add_parser("eval", help="recompute losses and diagnostics")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    from .errors import MissingBranch

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except MissingBranch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BRANCH


if __name__ == "__main__":
    sys.exit(main())
