"""Command-line entry point: ``ivqr-risk <verb> [options]``.

Every command writes its tables plus ``manifest.json`` into one run
directory ``<out>/<verb>_<UTC timestamp>_<config hash>`` (or ``--run-name``).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import itertools
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .config import ENV_CONFIG, ConfigError, RunConfig, load_config
from .data import build_design, format_month, parse_month, summarize
from .linear_iv import fit_2sls, qq_data, residual_moments
from .mc import run_study
from .risk import (
    block_bootstrap_gap_se,
    fit_quantile_grid,
    fit_single,
    fitted_quantile_series,
    group_contrast,
    predictive_density,
    tail_risk,
)

log = logging.getLogger("ivqr_risk")

METHODS = {"qr": "qr", "ivqr": "auto", "auto": "auto", "ivqr-grid": "ivqr_grid",
           "ivqr_grid": "ivqr_grid", "ivqr-smoothed": "ivqr_smoothed",
           "ivqr_smoothed": "ivqr_smoothed", "2sls": "2sls"}


class Run:
    """Collects outputs of one command and writes the manifest last."""

    def __init__(self, args, cfg: RunConfig, command: str, cmd_args: dict):
        self.cfg = cfg
        self.command = command
        self.cmd_args = cmd_args
        self.outputs: list[Path] = []
        self.inputs = [cfg.data_path] if cfg.data_path is not None else []
        h = io.config_hash({"config": cfg.to_dict(), "arguments": cmd_args})[:10]
        name = args.run_name or (
            f"{command}_{_dt.datetime.now(_dt.timezone.utc).strftime('%Y%m%dT%H%M%SZ')}_{h}"
        )
        self.dir = Path(args.out) / name
        self.dir.mkdir(parents=True, exist_ok=True)

    def csv(self, name, rows, columns):
        self.outputs.append(io.write_csv(self.dir / name, rows, columns))

    def json(self, name, obj):
        self.outputs.append(io.write_json(self.dir / name, obj))

    def finish(self):
        manifest = io.build_manifest(self.command, self.cmd_args, self.cfg.to_dict(),
                                     self.inputs, self.outputs, self.cfg.seed)
        io.write_json(self.dir / "manifest.json", manifest)
        print(self.dir)


def _method(name: str) -> str:
    try:
        return METHODS[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None


def _estimation_dataset(cfg, panel, group, horizon, instrument):
    return build_design(panel, cfg.dataset_spec(cfg.group(group), horizon, instrument))


def cmd_summarize(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    run = Run(args, cfg, "summarize", {})
    rows = [
        {"series": s.name, "first": s.first, "last": s.last, "obs": s.obs, "mean": s.mean,
         "sd": s.sd, "min": s.min, "max": s.max, "empty": s.empty}
        for s in summarize(panel)
    ]
    run.csv("summary.csv", rows, ["series", "first", "last", "obs", "mean", "sd", "min", "max",
                                  "empty"])
    run.finish()


def cmd_estimate(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    horizon = args.horizon or cfg.horizons[0]
    tau = args.tau if args.tau is not None else cfg.estimation.tau
    method = _method(args.method or cfg.estimation.method)
    cmd_args = {"group": cfg.group(args.group).name, "horizon": horizon, "tau": tau,
                "method": method, "instrument": args.instrument}
    ds = _estimation_dataset(cfg, panel, args.group, horizon, args.instrument)
    opts = cfg.estimation.ivqr_options(horizon)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if method == "2sls":
            fit = fit_2sls(ds, cov_type=cfg.estimation.cov_type, hac_lags=horizon - 1)
            record = fit.to_record()
        else:
            fit = fit_single(ds, tau, method, opts)
            record = fit.to_record()
            record.setdefault("method", "qr" if method == "qr" else fit.method)
    record.update({
        "group": cmd_args["group"], "horizon_months": horizon,
        "instrument": None if method == "qr" else cfg.instrument(args.instrument)[0],
        "sample": [format_month(ds.t_index[0]), format_month(ds.t_index[-1])],
    })
    run = Run(args, cfg, "estimate", cmd_args)
    run.json("fit.json", record)
    names = ds.regressor_names
    coefs = record["coefficients"]
    ses = record.get("ses") or {}
    run.csv("coefficients.csv",
            [{"term": k, "coefficient": coefs[k], "se": ses.get(k)} for k in names],
            ["term", "coefficient", "se"])
    run.finish()


def cmd_grid(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    horizon = args.horizon or cfg.horizons[0]
    method = _method(args.method or cfg.estimation.method)
    group = cfg.group(args.group).name
    cmd_args = {"group": group, "horizon": horizon, "method": method,
                "instrument": args.instrument}
    ds = _estimation_dataset(cfg, panel, args.group, horizon, args.instrument)
    grid = fit_quantile_grid(ds, cfg.estimation.taus, method, cfg.estimation.ivqr_options(horizon))
    run = Run(args, cfg, "grid", cmd_args)
    run.csv("coefficients_by_tau.csv", grid.coefficient_table(),
            ["tau", "term", "coefficient", "se", "method"])
    if method != "qr":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tsls = fit_2sls(ds, cov_type=cfg.estimation.cov_type, hac_lags=horizon - 1)
        run.csv("coefficients_2sls.csv",
                [{"term": k, "coefficient": c, "se": s}
                 for k, c, s in zip(tsls.names, tsls.params, tsls.ses)],
                ["term", "coefficient", "se"])
    fit80 = grid.fit_at(cfg.estimation.tau) if any(
        abs(t - cfg.estimation.tau) < 1e-9 for t in grid.fitted_taus) else None
    if fit80 is not None:
        fitted = fitted_quantile_series(fit80, ds)
        run.csv("fitted_tail_quantile_insample.csv",
                [{"month": format_month(t), "fitted": v, "actual_change": y}
                 for t, v, y in zip(ds.t_index, fitted, ds.y)],
                ["month", "fitted", "actual_change"])
    run.csv("failures.csv", [{"tau": t, "error": e} for t, e in sorted(grid.failures.items())],
            ["tau", "error"])
    run.finish()


def cmd_density(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    horizon = args.horizon or cfg.horizons[-1]
    method = _method(args.method or cfg.estimation.density_method)
    groups = [cfg.group(g) for g in (args.group or [cfg.groups[0].name])]
    cmd_args = {"groups": [g.name for g in groups], "horizon": horizon, "method": method,
                "instrument": args.instrument, "date": args.date}
    run = Run(args, cfg, "density", cmd_args)
    for g in groups:
        ds = build_design(panel, cfg.dataset_spec(g, horizon, args.instrument))
        grid = fit_quantile_grid(ds, cfg.estimation.taus, method,
                                 cfg.estimation.ivqr_options(horizon))
        spec = cfg.dataset_spec(g, horizon, args.instrument)
        if args.date:
            month = parse_month(args.date)
            pos = np.flatnonzero(panel.dates == month)
            if pos.size == 0:
                raise ConfigError(f"conditioning date {args.date} outside the panel")
            i = int(pos[0])
        else:
            i = int(np.flatnonzero(panel.dates == ds.t_index[-1])[0])
        cond = {spec.endogenous_series: panel[spec.endogenous_series][i]}
        for name in spec.control_series:
            cond[name] = panel[name][i]
        cond["const"] = 1.0
        bad = [k for k, v in cond.items() if not np.isfinite(v)]
        if bad:
            raise ConfigError(f"conditioning values missing at {format_month(panel.dates[i])}: {bad}")
        level = float(panel[g.series][i])
        dens = predictive_density(grid, cond, cfg.estimation.tails, level=level)
        run.csv(f"density_{g.name}.csv",
                [{"change": s, "level": s + level, "density": f}
                 for s, f in zip(dens.support, dens.density)],
                ["change", "level", "density"])
        run.csv(f"quantile_function_{g.name}.csv",
                [{"tau": t, "change": q, "level": q + level}
                 for t, q in zip(dens.knot_taus, dens.knot_values)],
                ["tau", "change", "level"])
    run.finish()


def cmd_tailrisk(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    method = _method(args.method or cfg.estimation.method)
    tau = cfg.estimation.tau
    labels = list(cfg.instruments) if method != "qr" else [None]
    if method != "qr" and not labels:
        raise ConfigError("IV tail risk needs instruments in the config")
    run = Run(args, cfg, "tailrisk", {"method": method, "tau": tau})
    reports, datasets = [], {}
    for horizon, label, g in itertools.product(cfg.horizons, labels, cfg.groups):
        inst = label if label is not None else (next(iter(cfg.instruments), None))
        ds = build_design(panel, cfg.dataset_spec(g, horizon, inst))
        fit = fit_single(ds, tau, method, cfg.estimation.ivqr_options(horizon))
        rep = tail_risk(fit, tau, g.name, horizon, label or "none", g.category)
        reports.append(rep)
        datasets[(g.name, horizon, label)] = ds
    rows = [row for rep in reports for row in rep.to_rows()]
    run.csv("tail_risk.csv", rows, ["group", "category", "horizon_months", "tau", "instrument",
                                    "method", "n", "term", "coefficient", "se"])
    contrasts = []
    mode = cfg.estimation.contrast_mode
    for a, b in itertools.combinations(reports, 2):
        if (a.category, a.horizon_months, a.instrument) != (b.category, b.horizon_months,
                                                            b.instrument):
            continue
        gap_se = None
        if mode == "block_bootstrap":
            key = "none" if a.instrument == "none" else a.instrument
            lab = None if key == "none" else key
            gap_se = block_bootstrap_gap_se(
                datasets[(a.group, a.horizon_months, lab)],
                datasets[(b.group, b.horizon_months, lab)],
                tau, method, block_length=a.horizon_months,
                reps=cfg.estimation.bootstrap_reps, seed=cfg.seed,
                options=cfg.estimation.ivqr_options(a.horizon_months),
            )
        c = group_contrast(a, b, mode, gap_se)
        contrasts.append({"category": a.category, "horizon_months": a.horizon_months,
                          "instrument": a.instrument, "tau": tau, "group_a": c.group_a,
                          "group_b": c.group_b, "gap": c.coefficient_gap, "gap_se": c.gap_se,
                          "z": c.z_score, "covariance_mode": c.covariance_mode})
    run.csv("contrasts.csv", contrasts, ["category", "horizon_months", "instrument", "tau",
                                         "group_a", "group_b", "gap", "gap_se", "z",
                                         "covariance_mode"])
    run.finish()


def cmd_mc(args, cfg: RunConfig) -> None:
    sim = cfg.simulation
    reps = args.reps or sim.reps
    estimators = tuple(_method(e) for e in (args.estimator or sim.estimators))
    cmd_args = {"reps": reps, "estimators": list(estimators), "taus": list(sim.taus)}
    result = run_study(sim.dgp, sim.taus, reps, estimators,
                       cfg.estimation.ivqr_options(1), threads=args.threads)
    run = Run(args, cfg, "mc", cmd_args)
    cols = ["estimator", "tau", "true_alpha", "mean_estimate", "bias", "sd", "se_of_bias",
            "rmse", "mean_se", "coverage_95", "reps", "failures"]
    run.csv("mc_results.csv", result.to_frame().to_dict("records"), cols)
    run.csv("mc_failures.csv", [{"message": m} for m in result.failures], ["message"])
    run.finish()


def cmd_diagnostics(args, cfg: RunConfig) -> None:
    panel = cfg.load_panel()
    horizon = args.horizon or cfg.horizons[-1]
    group = cfg.group(args.group).name
    cmd_args = {"group": group, "horizon": horizon, "instrument": args.instrument}
    ds = _estimation_dataset(cfg, panel, args.group, horizon, args.instrument)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_2sls(ds, cov_type=cfg.estimation.cov_type, hac_lags=horizon - 1)
    run = Run(args, cfg, "diagnostics", cmd_args)
    qq = qq_data(fit)
    run.csv("qq.csv", [{"normal_quantile": a, "residual_quantile": b} for a, b in qq],
            ["normal_quantile", "residual_quantile"])
    run.csv("moments.csv", [residual_moments(fit)], ["n", "skewness", "excess_kurtosis"])
    run.csv("residuals.csv",
            [{"month": format_month(t), "residual": e} for t, e in zip(ds.t_index, fit.residuals)],
            ["month", "residual"])
    run.finish()


COMMANDS = {
    "summarize": cmd_summarize,
    "estimate": cmd_estimate,
    "grid": cmd_grid,
    "density": cmd_density,
    "tailrisk": cmd_tailrisk,
    "mc": cmd_mc,
    "diagnostics": cmd_diagnostics,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # the copy attached to each verb uses SUPPRESS so it never overwrites
    # values given before the verb
    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None),
                        help=f"YAML config or manifest (default: ${ENV_CONFIG})")
    common.add_argument("--out", default=d("runs"), help="parent directory for run outputs")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--threads", type=int, default=d(1), help="worker processes (mc)")
    common.add_argument("--run-name", default=d(None),
                        help="fixed run directory name instead of timestamp+hash")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    p = argparse.ArgumentParser(prog="ivqr-risk", parents=[_common_flags(suppress=False)],
                                description="IV quantile regression for unemployment tail risk")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("summarize", parents=[common], help="per-series summary statistics")

    def est_args(sp, multi_group=False):
        if multi_group:
            sp.add_argument("--group", action="append")
        else:
            sp.add_argument("--group")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--method", choices=sorted(METHODS))
        sp.add_argument("--instrument", help="instrument label from the config")

    sp = sub.add_parser("estimate", parents=[common], help="single-quantile fit")
    est_args(sp)
    sp.add_argument("--tau", type=float)
    est_args(sub.add_parser("grid", parents=[common], help="fits across the quantile grid"))
    sp = sub.add_parser("density", parents=[common], help="predictive density")
    est_args(sp, multi_group=True)
    sp.add_argument("--date", help="conditioning month YYYY-MM (default: last sample month)")
    sp = sub.add_parser("tailrisk", parents=[common], help="tail-risk and contrast tables")
    sp.add_argument("--method", choices=sorted(METHODS))
    sp = sub.add_parser("mc", parents=[common], help="Monte Carlo validation study")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--estimator", action="append", choices=sorted(METHODS))
    sp = sub.add_parser("diagnostics", parents=[common], help="2SLS residual QQ and moments")
    sp.add_argument("--group")
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--instrument")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = args.config or os.environ.get(ENV_CONFIG)
    if not config_path:
        parser.error(f"no configuration: pass --config or set {ENV_CONFIG}")
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        parser.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"error: cannot load config {config_path}: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.simulation.dgp = replace(cfg.simulation.dgp, seed=args.seed)
    try:
        COMMANDS[args.command](args, cfg)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
