"""Render shelab CSV reports into figure files.

Reads only the delimited reports (plus `#` metadata headers) that the lab
CLI writes; all numerics stay upstream.  Fit lines and reference slopes are
annotations passed in by the caller, typically copied from the run's
manifest.  Rendering is deterministic: fixed style, Agg backend, no
timestamps or version strings in the output bytes.

Usage:
    render --kind growth  --in moments.csv --out growth.png \
           [--series sup_sq] [--slope V --slope-window LO:HI] \
           [--ref-low SLOPE] [--ref-lip SLOPE]
    render --kind support --in support.csv --out support.png [--mhat V --intercept V]
    render --kind snapshot --in simulate.csv --out snap.png
    render --kind holder  --in holder.csv --out holder.png [--slope V]
    render --kind rvcheck --in rvcheck.csv --out rv.png [--cap 10]
"""

from __future__ import annotations

import argparse
import json
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "shefig",
}

KINDS = ("growth", "support", "snapshot", "holder", "rvcheck")


class SchemaError(ValueError):
    """Input CSV does not carry the columns the figure kind needs."""


def read_report(path):
    """Parse a shelab report: (metadata dict, column list, list of row tuples)."""
    metadata, columns, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(":")
                value = value.strip()
                try:
                    metadata[key.strip()] = json.loads(value)
                except (json.JSONDecodeError, ValueError):
                    metadata[key.strip()] = value
                continue
            if columns is None:
                columns = line.split(",")
                continue
            rows.append(tuple(None if c == "" else _maybe_num(c)
                              for c in line.split(",")))
    if columns is None:
        raise SchemaError(f"{path}: no column header found")
    return metadata, columns, rows


def _maybe_num(text):
    try:
        return float(text)
    except ValueError:
        return text


def column(rows, columns, name):
    if name not in columns:
        raise SchemaError(f"missing required column {name!r} "
                          f"(have {', '.join(columns)})")
    i = columns.index(name)
    return [r[i] for r in rows]


# --- figure kinds -----------------------------------------------------------

def render_growth(meta, columns, rows, args, ax):
    if "l2_mass" in columns:
        t = np.array(column(rows, columns, "t"), dtype=float)
        v = np.array(column(rows, columns, "l2_mass"), dtype=float)
        label = "l2_mass"
    else:
        kinds = column(rows, columns, "kind")
        series = args.series
        if series is None:
            scalar = [k for k in dict.fromkeys(kinds) if k in ("sup_sq", "l2_sq")]
            if not scalar:
                raise SchemaError("no scalar moment kind in input")
            series = scalar[0]
        keep = [i for i, k in enumerate(kinds) if k == series]
        if not keep:
            raise SchemaError(f"kind {series!r} not present in input")
        t = np.array([column(rows, columns, "t")[i] for i in keep], dtype=float)
        v = np.array([column(rows, columns, "estimate")[i] for i in keep],
                     dtype=float)
        label = series
    pos = v > 0
    ax.plot(t[pos], np.log(v[pos]), "o-", ms=3, lw=1, color="#1f4e79",
            label=f"ln {label}")
    anchor_t = t[pos]
    anchor_y = float(np.log(v[pos])[len(anchor_t) // 2])
    anchor_x = float(anchor_t[len(anchor_t) // 2])
    if args.slope is not None:
        lo, hi = (anchor_t[0], anchor_t[-1])
        if args.slope_window:
            lo, hi = (float(s) for s in args.slope_window.split(":"))
        xs = np.linspace(lo, hi, 50)
        sel = (anchor_t >= lo) & (anchor_t <= hi)
        y0 = float(np.mean(np.log(v[pos])[sel] - args.slope * anchor_t[sel]))
        ax.plot(xs, y0 + args.slope * xs, "-", lw=2, color="#c55a11",
                label=f"fit slope {args.slope:.4g}")
    for name, slope, color in (("low", args.ref_low, "#2e7d32"),
                               ("lip", args.ref_lip, "#8e24aa")):
        if slope is not None:
            xs = np.linspace(anchor_t[0], anchor_t[-1], 50)
            ax.plot(xs, anchor_y + slope * (xs - anchor_x), "--", lw=1.2,
                    color=color, label=f"reference slope ({name}) {slope:.4g}")
    ax.set_xlabel("t")
    ax.set_ylabel("ln moment")
    ax.legend(loc="best")


def render_support(meta, columns, rows, args, ax):
    t = np.array(column(rows, columns, "t"), dtype=float)
    r = np.array(column(rows, columns, "r_q"), dtype=float)
    ax.plot(t, r, "o", ms=4, color="#1f4e79", label="r_q(t)")
    if args.mhat is not None:
        b = args.intercept if args.intercept is not None else 0.0
        xs = np.linspace(t.min(), t.max(), 50)
        ax.plot(xs, args.mhat * xs + b, "-", lw=1.5, color="#c55a11",
                label=f"linear fit, slope {args.mhat:.4g}")
    ax.set_xlabel("t")
    ax.set_ylabel("effective support radius")
    ax.legend(loc="best")


def render_snapshot(meta, columns, rows, args, ax):
    t = np.array(column(rows, columns, "t"), dtype=float)
    x = np.array(column(rows, columns, "x"), dtype=float)
    u = np.array(column(rows, columns, "u"), dtype=float)
    for i, tv in enumerate(sorted(set(t.tolist()))):
        sel = t == tv
        ax.plot(x[sel], u[sel], lw=1.2, label=f"t = {tv:g}")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    ax.legend(loc="best")


def render_holder(meta, columns, rows, args, ax):
    lag = np.array(column(rows, columns, "lag"), dtype=float)
    msd = np.array(column(rows, columns, "mean_sq_increment"), dtype=float)
    ax.plot(np.log(lag), np.log(msd), "o", ms=5, color="#1f4e79",
            label="ln mean-square increment")
    if args.slope is not None:
        xs = np.log(lag)
        y0 = float(np.mean(np.log(msd) - args.slope * xs))
        ax.plot(xs, y0 + args.slope * xs, "-", lw=1.5, color="#c55a11",
                label=f"slope {args.slope:.3g}")
    ax.set_xlabel("ln lag")
    ax.set_ylabel("ln E|u(x+h)-u(x)|^2")
    ax.legend(loc="best")


def render_rvcheck(meta, columns, rows, args, ax):
    t = np.array(column(rows, columns, "t"), dtype=float)
    ratio = np.array(column(rows, columns, "ratio"), dtype=float)
    ax.plot(t, ratio, "o-", ms=4, lw=1, color="#1f4e79",
            label="integral / bound")
    ax.axhline(args.cap, ls="--", lw=1.2, color="#c55a11",
               label=f"cap {args.cap:g}")
    ax.set_xlabel("t")
    ax.set_ylabel("ratio")
    ax.set_ylim(0, max(args.cap * 1.2, float(ratio.max()) * 1.2))
    ax.legend(loc="best")


_RENDERERS = {
    "growth": render_growth,
    "support": render_support,
    "snapshot": render_snapshot,
    "holder": render_holder,
    "rvcheck": render_rvcheck,
}


def render(kind, in_path, out_path, args):
    meta, columns, rows = read_report(in_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        _RENDERERS[kind](meta, columns, rows, args, ax)
        ax.set_title(f"shelab {kind}")
        fig.tight_layout()
        fig.savefig(out_path, format="png", metadata={"Software": None})
        plt.close(fig)
    return out_path


def build_parser():
    p = argparse.ArgumentParser(prog="render",
                                description="Render shelab report CSVs to figures")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--series", default=None,
                   help="growth: which moment kind to plot")
    p.add_argument("--slope", type=float, default=None,
                   help="annotate a fitted slope (from the run manifest)")
    p.add_argument("--slope-window", dest="slope_window", default=None,
                   metavar="LO:HI")
    p.add_argument("--ref-low", dest="ref_low", type=float, default=None,
                   help="lower reference slope")
    p.add_argument("--ref-lip", dest="ref_lip", type=float, default=None,
                   help="upper reference slope")
    p.add_argument("--mhat", type=float, default=None,
                   help="support: fitted slope")
    p.add_argument("--intercept", type=float, default=None)
    p.add_argument("--cap", type=float, default=10.0,
                   help="rvcheck: cap line")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(args.kind, args.in_path, args.out_path, args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
