"""Command-line entry point: ``mfgfilter simulate | mle | propagate | update``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfg
from .filters import FilterError
from .harness import SIGMA_U_DEFAULT, SIGMA_V_DEFAULT, ConfigError, run_batch
from .matrix_fisher import InvalidMomentError
from .measurement import update
from .mfg import InvalidParameterError, mle
from .propagation import GyroNoiseModel, PropagationError, propagate_analytical, propagate_unscented
from .so3 import DEF1, DEF2

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
FMT = "%.17g"

_NUMERIC_ERRORS = (
    ArithmeticError,
    InvalidMomentError,
    InvalidParameterError,
    PropagationError,
    FilterError,
    np.linalg.LinAlgError,
)


def _write_csv(path, header, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    np.savetxt(path, rows, fmt=FMT, delimiter=",", header=",".join(header), comments="")


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# simulate


def _write_batch(out_dir, summary, results, names):
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ("attitude_error_deg", "bias_error_deg_s", "attitude_sd_rad", "bias_sd_rad_s")
    header = ["t"] + [f"{n}_{c}" for n in names for c in cols]

    def series(r, n):
        return (r.attitude_error[n], r.bias_error[n], r.attitude_sd[n], r.bias_sd[n])

    for i, r in enumerate(results):
        data = np.column_stack([r.t] + [s for n in names for s in series(r, n)])
        _write_csv(out_dir / f"trial_{i:03d}.csv", header, data)
    # across-trial mean of every per-step series, for plotting
    stacked = np.mean([np.column_stack([s for n in names for s in series(r, n)]) for r in results], axis=0)
    _write_csv(out_dir / "mean_series.csv", header, np.column_stack([results[0].t, stacked]))

    per_trial = np.column_stack(
        [np.arange(len(results))]
        + [v for n in names for v in (summary.per_trial_attitude[n], summary.per_trial_bias[n])]
    )
    _write_csv(
        out_dir / "per_trial.csv",
        ["trial"] + [f"{n}_{c}" for n in names for c in ("attitude_deg", "bias_deg_s")],
        per_trial,
    )
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "filter",
                "attitude_mean_deg",
                "attitude_sd_deg",
                "attitude_p_vs_mekf",
                "bias_mean_deg_s",
                "bias_sd_deg_s",
                "bias_p_vs_mekf",
                "failures",
            ]
        )
        for row in summary.rows():
            fails = sum(1 for f in summary.failures if f[1] == row[0])
            w.writerow([row[0]] + [FMT % v for v in row[1:]] + [fails])
    with open(out_dir / "failures.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "filter", "step"])
        w.writerows(summary.failures)


def cmd_simulate(args):
    kv = cfg.read_kv_file(args.config)
    if args.trials is not None:
        kv["trials"] = str(args.trials)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    config = cfg.scenario_from_kv(kv)
    if args.filters is not None or args.backend is not None:
        names = cfg.select_filters(args.filters or "mfg,mekf", args.backend or "both")
        config = replace(config, filters=names)
    summary, results = run_batch(config, workers=args.workers, keep_trials=True)
    _write_batch(Path(args.out), summary, results, config.filters)
    print(f"{'filter':<16}{'attitude [deg]':>22}{'p':>9}{'bias [deg/s]':>22}{'p':>9}")
    for name, am, asd, pa, bm, bsd, pb in summary.rows():
        print(f"{name:<16}{am:>13.3f} +- {asd:<6.3f}{pa:>9.3g}{bm:>13.3f} +- {bsd:<6.3f}{pb:>9.3g}")
    for trial, name, step in summary.failures:
        print(f"trial {trial}: {name} failed at step {step}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# single-step tools


def _read_samples(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh))]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, StopIteration, ValueError) as exc:
        raise ConfigError(f"cannot read samples from {path}: {exc}") from exc
    rcols = [f"R{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    missing = [c for c in rcols if c not in header]
    if missing:
        raise ConfigError(f"samples need columns {', '.join(rcols)}; missing {', '.join(missing)}")
    if data.shape[1] != len(header):
        raise ConfigError("sample rows do not match the header")
    idx = {c: k for k, c in enumerate(header)}
    R = data[:, [idx[c] for c in rcols]].reshape(-1, 3, 3)
    xcols = [k for k, c in enumerate(header) if c not in rcols and c != "w"]
    if not xcols:
        raise ConfigError("samples need at least one linear-variable column")
    w = data[:, idx["w"]] if "w" in idx else None
    return R, data[:, xcols], w


def cmd_mle(args):
    R, x, w = _read_samples(args.samples)
    params = mle(R, x, w, DEF1 if args.convention == "def1" else DEF2)
    _emit(cfg.params_to_kv(params), args.out)
    return EXIT_OK


def cmd_propagate(args):
    kv = cfg.read_kv_file(args.state)
    params = cfg.params_from_kv(kv)
    if params.n != 3:
        raise ConfigError("propagation needs a three-dimensional bias")
    if args.steps < 0:
        raise ConfigError("steps must be non-negative")
    omega = cfg.numbers(args.omega, 3, "omega") if args.omega else np.zeros(3)
    if not args.h > 0:
        raise ConfigError("h must be positive")
    model = GyroNoiseModel.isotropic(args.sigma_u, args.sigma_v, args.h)
    step = propagate_analytical if args.backend == "analytical" else propagate_unscented
    for _ in range(args.steps):
        params = step(params, omega, model)
    _emit(cfg.params_to_kv(params), args.out)
    return EXIT_OK


def cmd_update(args):
    params = cfg.params_from_kv(cfg.read_kv_file(args.state))
    att, vec = cfg.measurements_from_kv(cfg.read_kv_file(args.meas))
    _emit(cfg.params_to_kv(update(params, att, vec)), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mfgfilter", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte-Carlo comparison of the filters")
    s.add_argument("--config", required=True, help="scenario key=value file")
    s.add_argument("--out", required=True, help="output directory for CSV files")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--backend", choices=("analytical", "unscented", "both"))
    s.add_argument("--filters", help="comma list drawn from mfg, mekf")
    s.add_argument("--workers", type=int, default=1, help="worker processes")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("mle", help="fit MFG parameters to weighted samples")
    m.add_argument("--samples", required=True, help="CSV with R11..R33, linear columns, optional w")
    m.add_argument("--convention", choices=("def1", "def2"), default="def1")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mle)

    g = sub.add_parser("propagate", help="propagate an MFG state through constant gyro readings")
    g.add_argument("--state", required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--omega", help="gyro reading in rad/s, three numbers (default zero)")
    g.add_argument("--h", type=float, default=1.0 / 150.0, help="step in s")
    g.add_argument("--sigma-u", type=float, default=SIGMA_U_DEFAULT, help="rad/sqrt(s)")
    g.add_argument("--sigma-v", type=float, default=SIGMA_V_DEFAULT, help="rad/s/sqrt(s)")
    g.add_argument("--backend", choices=("analytical", "unscented"), default="analytical")
    g.add_argument("--out")
    g.set_defaults(func=cmd_propagate)

    u = sub.add_parser("update", help="fuse measurements into an MFG state")
    u.add_argument("--state", required=True)
    u.add_argument("--meas", required=True)
    u.add_argument("--out")
    u.set_defaults(func=cmd_update)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
