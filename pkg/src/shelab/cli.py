"""Experiment runner: one subcommand per reproducible claim.

Each invocation writes `<command>_<timestamp>.csv` (or .json) report files
plus a `manifest.json` echo holding the resolved config, RNG identity, code
version, and wall clock.  Report bodies contain no timestamps, so reruns
with the same seed are byte-identical regardless of thread count.

Exit codes: 0 success, 2 configuration/validation failure, 3 runtime
failure.  Partially written outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .model import (ConfigError, SimConfig, apply_overrides, config_to_dict,
                    config_from_dict, load_config)
from .noise import RNG_FAMILY, RNG_VERSION
from .oracle import (laplace_U_numeric, lower_bound_certificate, picard_moment_bound,
                     solve_second_moment_volterra, threshold_bracket)
from .solver import picard_iterate, simulate_path
from .estimators import (fit_lyapunov, holder_increment_exponent, mc_moments,
                         collect_fields_at, peak_concentration_ratio,
                         rv_integral_check, support_profile)
from .reports import write_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_M_GUARD = 3.0

MC_COMMANDS = {"simulate", "moments", "holder", "peaks"}


def _base_metadata(command: str, cfg: SimConfig | None, **extra):
    md = {
        "report": f"shelab-{command}",
        "code_version": __version__,
        "rng_family": RNG_FAMILY,
        "rng_version": RNG_VERSION,
    }
    if cfg is not None:
        md["seed"] = cfg.seed
        md["config"] = config_to_dict(cfg)
    md.update({k: v for k, v in extra.items() if v is not None})
    return md


def _outfile(out_dir, command, stamp, suffix="csv", tag=""):
    name = f"{command}{tag}_{stamp}.{suffix}"
    path = os.path.join(out_dir, name)
    k = 1
    while os.path.exists(path):
        name = f"{command}{tag}_{stamp}-{k}.{suffix}"
        path = os.path.join(out_dir, name)
        k += 1
    return path


def _resolve_config(args) -> SimConfig | None:
    if not getattr(args, "config", None):
        return None
    cfg = load_config(args.config)
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        d = config_to_dict(cfg)
        d.pop("dx")
        d["seed"] = args.seed
        cfg = config_from_dict(d)
    return cfg


def _check_m_guard(cfg: SimConfig, m_guard: float):
    # Dirichlet truncation is honest only when the domain outruns the
    # effectively compact support; the guard is configurable because the
    # support speed depends on the noise strength.
    need = cfg.init.K + m_guard * cfg.t_end
    if cfg.x_max < need:
        raise ConfigError(
            f"x_max={cfg.x_max} < K + m_guard*t_end = {need} "
            f"(m_guard={m_guard}; lower it explicitly if the run warrants)"
        )


def _parse_times(text):
    if not text:
        return None
    vals = []
    for part in text.split(","):
        part = part.strip()
        vals.append(math.e if part == "e" else float(part))
    return vals


# --- command handlers ------------------------------------------------------

def _cmd_simulate(args, cfg, out_dir, stamp, results, written):
    traj = simulate_path(cfg, args.replicate, clip_negative=args.clip)
    rows = []
    for snap in traj.snapshots:
        for x, u in zip(snap.xs, snap.values):
            rows.append((snap.t, x, u))
    path = _outfile(out_dir, "simulate", stamp)
    written.append(path)
    write_report(path, ["t", "x", "u"], rows,
                 _base_metadata("simulate", cfg, replicate=args.replicate,
                                clip_negative=args.clip))
    results["min_value"] = traj.positivity_report.min_value
    results["neg_mass_fraction"] = list(traj.positivity_report.neg_mass_fraction)


def _cmd_moments(args, cfg, out_dir, stamp, results, written):
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    res = mc_moments(cfg, args.reps, kinds, threads=args.threads,
                     clip_negative=args.clip)
    rows = []
    for kind in kinds:
        series = res.series[kind]
        if series.xs is None:
            for t, est, se in zip(series.times, series.estimates, series.stderrs):
                rows.append((kind, series.k, t, None, est, se))
        else:
            for i, t in enumerate(series.times):
                for x, est, se in zip(series.xs, series.estimates[i], series.stderrs[i]):
                    rows.append((kind, series.k, t, x, est, se))
    path = _outfile(out_dir, "moments", stamp)
    written.append(path)
    write_report(path, ["kind", "k", "t", "x", "estimate", "stderr"], rows,
                 _base_metadata("moments", cfg, n_reps=args.reps,
                                kinds=kinds, clip_negative=args.clip))
    results["n_replicates"] = res.n_replicates
    results["n_failed"] = res.n_failed
    results["neg_mass_fraction_max"] = float(res.neg_mass_fraction.max())
    if args.fit_window:
        lo, hi = (float(v) for v in args.fit_window.split(":"))
        for kind in kinds:
            if res.series[kind].xs is None:
                fit = fit_lyapunov(res.series[kind], (lo, hi))
                results[f"fit_{kind}"] = {"rate": fit.rate, "stderr": fit.stderr,
                                          "residual": fit.residual}


def _cmd_oracle(args, cfg, out_dir, stamp, results, written):
    times = _parse_times(args.times)
    if times is None:
        times = list(cfg.snapshot_times) or None
    res = solve_second_moment_volterra(cfg, times=times)
    rows = []
    for f in res.fields:
        for x, v in zip(f.xs, f.values):
            rows.append((f.t, x, v))
    path = _outfile(out_dir, "oracle", stamp)
    written.append(path)
    write_report(path, ["t", "x", "f"], rows, _base_metadata("oracle", cfg))
    mass_path = _outfile(out_dir, "oracle", stamp, tag="_mass")
    written.append(mass_path)
    write_report(mass_path, ["t", "l2_mass"],
                 list(zip(res.times_all, res.l2_mass_all)),
                 _base_metadata("oracle-mass", cfg))
    results["boundary_fraction_max"] = res.boundary_fraction_max
    sel = res.times_all >= cfg.t_end / 2
    if np.count_nonzero(sel) >= 5 and np.all(res.l2_mass_all[sel] > 0):
        slope = np.polyfit(res.times_all[sel], np.log(res.l2_mass_all[sel]), 1)[0]
        results["l2_mass_rate_late_window"] = float(slope)


def _cmd_thresholds(args, cfg, out_dir, stamp, results, written):
    lo, hi = threshold_bracket(args.low, args.lip, args.kappa)
    record = {"threshold_lower": lo, "threshold_upper": hi,
              "low": args.low, "lip": args.lip, "kappa": args.kappa,
              "lambda": None, "U_value": None, "fixed_point_bound": None,
              "rng_family": RNG_FAMILY, "rng_version": RNG_VERSION}
    if args.laplace_lambda is not None:
        lam = args.laplace_lambda
        record["lambda"] = lam
        bound = picard_moment_bound(lam, args.lip, args.kappa,
                                    args.u0_l2_sq, n=args.iters)
        record["q"] = bound.q
        record["fixed_point_bound"] = bound.fixed_point
        record["divergent"] = bound.divergent
        if cfg is not None:
            cert = lower_bound_certificate(lam, args.low, args.kappa, cfg.init)
            record["fourier_term"] = cert.fourier_term
            record["q_low"] = cert.q_low
            record["certifies_divergence"] = cert.certifies_divergence
        if args.with_U and cfg is not None:
            vol = solve_second_moment_volterra(cfg)
            u = laplace_U_numeric(vol.fields, lam)
            record["U_value"] = u.value
            record["U_tail_warning"] = u.tail_warning
    path = _outfile(out_dir, "thresholds", stamp, suffix="json")
    written.append(path)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    results.update(record)


def _cmd_support(args, cfg, out_dir, stamp, results, written):
    times = _parse_times(args.times)
    if times is None:
        times = list(cfg.snapshot_times) or None
    res = solve_second_moment_volterra(cfg, times=times)
    fields = [f for f in res.fields if f.t > 0]
    prof = support_profile(fields, q=args.q, tail_m=args.m)
    rates = {t: r for t, r in zip(prof.tail_times, prof.tail_rates)} \
        if prof.tail_rates is not None else {}
    rows = [(t, r, rates.get(t)) for t, r in zip(prof.times, prof.radii)]
    path = _outfile(out_dir, "support", stamp)
    written.append(path)
    write_report(path, ["t", "r_q", "tail_rate"], rows,
                 _base_metadata("support", cfg, q=args.q, m=args.m))
    results["m_hat"] = prof.m_hat
    results["intercept"] = prof.intercept
    results["fit_residual"] = prof.fit_residual


def _cmd_holder(args, cfg, out_dir, stamp, results, written):
    t = args.t if args.t is not None else cfg.t_end
    fields = collect_fields_at(cfg, args.reps, t, threads=args.threads)
    lag_cells = [int(v) for v in _parse_times(args.lags)] if args.lags else None
    rep = holder_increment_exponent(fields, cfg.dx, t, lag_cells=lag_cells)
    rows = list(zip(rep.lags, rep.mean_sq_increments))
    path = _outfile(out_dir, "holder", stamp)
    written.append(path)
    write_report(path, ["lag", "mean_sq_increment"], rows,
                 _base_metadata("holder", cfg, n_reps=args.reps, t=t))
    results["slope"] = rep.slope
    results["excluded_smallest"] = rep.excluded_smallest
    results["classification"] = rep.classification


def _cmd_peaks(args, cfg, out_dir, stamp, results, written):
    series = peak_concentration_ratio(cfg, args.reps, threads=args.threads)
    rows = list(zip(series.times, series.ratios, series.stderrs))
    path = _outfile(out_dir, "peaks", stamp)
    written.append(path)
    write_report(path, ["t", "ratio", "stderr"], rows,
                 _base_metadata("peaks", cfg, n_reps=args.reps))
    results["n_replicates"] = series.n_replicates


def _cmd_rvcheck(args, cfg, out_dir, stamp, results, written):
    t_list = _parse_times(args.t_list)
    res = rv_integral_check(args.q, args.eta, t_list)
    rows = list(zip(res.times, res.integrals, res.bounds, res.ratios))
    path = _outfile(out_dir, "rvcheck", stamp)
    written.append(path)
    write_report(path, ["t", "integral", "bound", "ratio"], rows,
                 _base_metadata("rvcheck", None, q=args.q, eta=args.eta))
    results["max_ratio"] = float(res.ratios.max())


def _cmd_picard(args, cfg, out_dir, stamp, results, written):
    res = picard_iterate(cfg, args.replicate, args.iters)
    rows = [(n + 1, d) for n, d in enumerate(res.l2_diffs)]
    path = _outfile(out_dir, "picard", stamp)
    written.append(path)
    write_report(path, ["n", "l2_diff"], rows,
                 _base_metadata("picard", cfg, replicate=args.replicate,
                                n_iters=args.iters))
    last = res.iterates_at_t_end[-1].values
    dist = math.sqrt(cfg.dx * float(np.sum((res.euler.values - last) ** 2)))
    results["euler_l2_distance"] = dist


_HANDLERS = {
    "simulate": _cmd_simulate,
    "moments": _cmd_moments,
    "oracle": _cmd_oracle,
    "thresholds": _cmd_thresholds,
    "support": _cmd_support,
    "holder": _cmd_holder,
    "peaks": _cmd_peaks,
    "rvcheck": _cmd_rvcheck,
    "picard": _cmd_picard,
}

NEEDS_CONFIG = {"simulate", "moments", "oracle", "support", "holder", "peaks", "picard"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shelab",
                                     description="Stochastic heat equation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="JSON config file (SimConfig keys)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--reps", type=int, default=100, help="Monte Carlo replicates")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override", default=[])
        p.add_argument("--m-guard", type=float, default=DEFAULT_M_GUARD,
                       dest="m_guard",
                       help="require x_max >= K + m_guard*t_end for MC runs")
        p.add_argument("--clip", action="store_true",
                       help="clip negative values at zero (recorded in metadata)")

    p = sub.add_parser("simulate", help="one trajectory to CSV (t, x, u)")
    common(p)
    p.add_argument("--replicate", type=int, default=0)

    p = sub.add_parser("moments", help="Monte Carlo moment series")
    common(p)
    p.add_argument("--kinds", default="sup_sq,l2_sq")
    p.add_argument("--fit-window", dest="fit_window", default=None,
                   metavar="LO:HI", help="report growth-rate fits on this window")

    p = sub.add_parser("oracle", help="deterministic second-moment fields (t, x, f)")
    common(p)
    p.add_argument("--times", default=None, help="comma list; default snapshot_times")

    p = sub.add_parser("thresholds", help="growth-rate bracket and Laplace bounds")
    common(p, config_required=False)
    p.add_argument("--low", type=float, required=True)
    p.add_argument("--lip", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--laplace-lambda", dest="laplace_lambda", type=float, default=None)
    p.add_argument("--u0-l2-sq", dest="u0_l2_sq", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=16)
    p.add_argument("--with-U", dest="with_U", action="store_true",
                   help="also integrate U(lambda) from an oracle run (needs --config)")

    p = sub.add_parser("support", help="effective-support radii and tail rates")
    common(p)
    p.add_argument("--q", type=float, default=0.99)
    p.add_argument("--m", type=float, default=None)
    p.add_argument("--times", default=None)

    p = sub.add_parser("holder", help="mean-square increment exponent at one time")
    common(p)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--lags", default=None, help="comma list of lag cells")

    p = sub.add_parser("peaks", help="peak-concentration ratio series")
    common(p)

    p = sub.add_parser("rvcheck", help="slowly-varying integral ratio check")
    common(p, config_required=False)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--t-list", dest="t_list", required=True,
                   help="comma list of times ('e' allowed)")

    p = sub.add_parser("picard", help="pathwise Picard iteration diagnostics")
    common(p)
    p.add_argument("--iters", type=int, default=9)
    p.add_argument("--replicate", type=int, default=0)
    return parser


def run(args) -> int:
    t_start = time.time()
    stamp = time.strftime("%Y%m%dT%H%M%S")
    written = []
    try:
        cfg = _resolve_config(args)
        if args.command in NEEDS_CONFIG and cfg is None:
            raise ConfigError(f"{args.command} requires --config")
        if cfg is not None and args.command in MC_COMMANDS:
            _check_m_guard(cfg, args.m_guard)
        os.makedirs(args.out, exist_ok=True)
    except (ConfigError, OSError, ValueError) as exc:
        _error_record(args, exc, EXIT_CONFIG)
        return EXIT_CONFIG

    results = {}
    try:
        _HANDLERS[args.command](args, cfg, args.out, stamp, results, written)
    except ConfigError as exc:
        _cleanup(written)
        _error_record(args, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: remove partial outputs
        _cleanup(written)
        _error_record(args, exc, EXIT_RUNTIME)
        return EXIT_RUNTIME

    manifest = {
        "command": args.command,
        "timestamp": stamp,
        "wall_clock_s": round(time.time() - t_start, 3),
        "code_version": __version__,
        "rng_family": RNG_FAMILY,
        "rng_version": RNG_VERSION,
        "threads": args.threads,
        "n_reps": args.reps,
        "overrides": dict(kv.split("=", 1) for kv in (args.set or [])),
        "seed": cfg.seed if cfg is not None else args.seed,
        "config": config_to_dict(cfg) if cfg is not None else None,
        "config_path": getattr(args, "config", None),
        "output_dir": args.out,
        "argv": _manifest_argv(args),
        "outputs": [os.path.basename(p) for p in written],
        "results": results,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for p in written:
        print(p)
    return EXIT_OK


def _manifest_argv(args):
    """Reconstructable argument list (minus --out) for rerunning this experiment."""
    argv = [args.command]
    skip = {"command", "out"}
    for key, value in sorted(vars(args).items()):
        if key in skip or value in (None, False):
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            for v in value:
                argv.extend([flag, str(v)])
        else:
            argv.extend([flag, str(value)])
    return argv


def rerun_from_manifest(manifest_path, out_dir) -> int:
    """Re-execute the experiment a manifest describes, writing into out_dir."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    argv = list(manifest["argv"]) + ["--out", out_dir]
    parser = build_parser()
    return run(parser.parse_args(argv))


def _cleanup(paths):
    for p in paths:
        try:
            os.unlink(p)
        except OSError:
            pass


def _error_record(args, exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit": code,
              "command": getattr(args, "command", None)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
