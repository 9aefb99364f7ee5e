"""Command-line surface: describe, fuse, verify, complexity, infer.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage or configuration error. Reports and CSV go to standard output,
diagnostics to standard error. CSV is comma separated with a '.' decimal
point and always carries a header row.
"""

from __future__ import annotations

import argparse
import csv
import sys
from fractions import Fraction

from .costmodel import (
    AttnCostInputs,
    ConvCostInputs,
    infer_cost_pair,
    infer_ratio,
    infer_ratio_simplified,
    measure_fused_depthwise,
    measure_sca,
    repdw_train_cost,
    repvgg_train_cost,
    sca_ratio_simplified,
    train_ratio,
    train_ratio_simplified,
)
from .head import decode_detections
from .netbuild import (
    ArchiveError,
    ConfigError,
    assemble,
    load_ppm,
    load_weights,
    parse_network_config,
    save_weights,
    toy_spec,
)
from .repblock import FusionError
from .tensor import OpCounter, ShapeError, Tensor
from .verify import run_verification

CSV_COLUMNS = ["quantity", "c_in", "c_out", "height", "width", "small_height",
               "small_width", "c_shuffle", "analytic", "measured", "ratio", "assumptions"]


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, Fraction):
        value = float(value)
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _write_csv(rows, columns, out):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])


def _read_spec(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network_config(fh.read())


def _load_network(args):
    """Assemble from spec + seed, then overlay --weights if given."""
    spec = _read_spec(args.spec) if args.spec else toy_spec()
    net = assemble(spec, args.seed)
    if getattr(args, "weights", None):
        with open(args.weights, "rb") as fh:
            blob = fh.read()
        if len(blob) > 6 and blob[6] & 1:
            net = net.fuse()  # archive stores a fused network
        net = load_weights(net, blob)
    return spec, net


# -- describe ---------------------------------------------------------------

def cmd_describe(args) -> int:
    spec, net = _load_network(args)
    fused = net.fuse()
    zero = Tensor.zeros((spec.input_channels, spec.input_size, spec.input_size))
    stats_train: dict = {}
    stats_fused: dict = {}
    net.forward(zero, stats=stats_train)
    fused.forward(zero, stats=stats_fused)
    params_train = {path: mod.param_count() for path, mod in net.modules()}
    params_fused = {path: mod.param_count() for path, mod in fused.modules()}

    rows = []
    for path, _ in net.modules():
        rows.append({
            "path": path,
            "kind": type(dict(net.modules())[path]).__name__,
            "params_training": params_train.get(path, 0),
            "params_fused": params_fused.get(path, 0),
            "multiply_adds_training": stats_train.get(path, OpCounter()).multiply_adds,
            "multiply_adds_fused": stats_fused.get(path, OpCounter()).multiply_adds,
        })
    rows.append({
        "path": "total",
        "kind": "Network",
        "params_training": sum(r["params_training"] for r in rows),
        "params_fused": sum(r["params_fused"] for r in rows),
        "multiply_adds_training": sum(r["multiply_adds_training"] for r in rows),
        "multiply_adds_fused": sum(r["multiply_adds_fused"] for r in rows),
    })

    columns = ["path", "kind", "params_training", "params_fused",
               "multiply_adds_training", "multiply_adds_fused"]
    widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(widths[c]) for c in columns))

    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            _write_csv(rows, columns, fh)
    else:
        print()
        _write_csv(rows, columns, sys.stdout)
    return 0


# -- fuse ---------------------------------------------------------------------

def cmd_fuse(args) -> int:
    _, net = _load_network(args)
    fused = net.fuse()
    blob = save_weights(fused)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    print(f"fused {len(fused.rep_blocks())} blocks; wrote {len(blob)} bytes to {args.output}")
    return 0


# -- verify -------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    spec = _read_spec(args.spec) if args.spec else toy_spec()
    results = run_verification(spec, seed=args.seed, trials=args.trials)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- complexity -----------------------------------------------------------------

def _parse_sweep(text: str):
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"--sweep expects LO:HI, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ConfigError(f"--sweep range must satisfy 1 <= LO <= HI, got {text!r}")
    return lo, hi


def _curve_rows(curve: str, lo: int, hi: int, c_shuffle: float):
    rows = []
    if curve == "lambda-train":
        for c in range(lo, hi + 1):
            rows.append({"quantity": "lambda_train_simplified", "c_in": c, "c_out": c,
                         "c_shuffle": c_shuffle, "ratio": float(train_ratio_simplified(c)),
                         "assumptions": "equal-channels;negligible-shuffle"})
    elif curve == "lambda-infer":
        for c in range(lo, hi + 1):
            rows.append({"quantity": "lambda_infer_simplified", "c_in": c, "c_out": c,
                         "c_shuffle": c_shuffle, "ratio": float(infer_ratio_simplified(c)),
                         "assumptions": "equal-channels;negligible-shuffle"})
    elif curve == "lambda-sca":
        for h in range(lo, hi + 1):
            rows.append({"quantity": "lambda_sca_simplified", "height": h, "width": h,
                         "small_height": h, "small_width": h,
                         "ratio": float(sca_ratio_simplified(h)),
                         "assumptions": "same-size;square"})
    else:
        raise ConfigError(f"unknown curve {curve!r}")
    return rows


def _point_rows(args):
    c_in = args.cin
    c_out = args.cout
    height = args.height
    width = args.width
    assumptions = []
    if args.assume_equal_channels:
        if c_out is not None and c_out != c_in:
            raise ConfigError(f"--assume-equal-channels conflicts with --cout {c_out} "
                              f"(c_in is {c_in})")
        c_out = c_in
        assumptions.append("equal-channels")
    if args.assume_square:
        if width is not None and height is not None and width != height:
            raise ConfigError(f"--assume-square conflicts with --width {width} "
                              f"(height is {height})")
        if height is None:
            raise ConfigError("--assume-square needs --height")
        width = height
        assumptions.append("square")
    if c_out is None:
        raise ConfigError("point mode needs --cout or --assume-equal-channels")
    if height is None or width is None:
        raise ConfigError("point mode needs --height and --width (or --assume-square)")
    p = ConvCostInputs(c_in, c_out, height, width, args.c_shuffle)
    flags = ";".join(assumptions)
    base = {"c_in": c_in, "c_out": c_out, "height": height, "width": width,
            "c_shuffle": args.c_shuffle, "assumptions": flags}
    infer_dense, infer_dw = infer_cost_pair(p)
    rows = [
        dict(base, quantity="train_cost_dense_branches", analytic=repvgg_train_cost(p)),
        dict(base, quantity="train_cost_depthwise_block", analytic=repdw_train_cost(p)),
        dict(base, quantity="lambda_train_full", ratio=train_ratio(p)),
        dict(base, quantity="infer_cost_fused_dense", analytic=infer_dense),
        dict(base, quantity="infer_cost_depthwise_block", analytic=infer_dw),
        dict(base, quantity="lambda_infer_full", ratio=infer_ratio(p)),
    ]
    if args.assume_equal_channels:
        rows.append(dict(base, quantity="lambda_train_simplified",
                         ratio=float(train_ratio_simplified(c_in)),
                         assumptions=flags + ";negligible-shuffle"))
        rows.append(dict(base, quantity="lambda_infer_simplified",
                         ratio=float(infer_ratio_simplified(c_in)),
                         assumptions=flags + ";negligible-shuffle"))
    return rows


def _measure_rows(args):
    rows = []
    ok = True
    if args.measure == "fused-block":
        channels = args.channels or 12
        size = args.size or 16
        report = measure_fused_depthwise(channels, size, size, seed=args.seed)
        rows.append({"quantity": report.quantity, "c_in": channels, "c_out": channels,
                     "height": size, "width": size, "c_shuffle": 1,
                     "analytic": report.analytic, "measured": report.measured,
                     "ratio": report.ratio, "assumptions": ""})
        ok = report.within
        for note in report.notes:
            print(f"note: {note}", file=sys.stderr)
    elif args.measure == "sca":
        channels = args.channels or 4
        size = args.size or 8
        small = args.small_size or size
        q = AttnCostInputs(channels, size, size, small, small)
        m = measure_sca(q, seed=args.seed)
        for report in m.reports():
            rows.append({"quantity": report.quantity, "c_in": channels, "c_out": channels,
                         "height": size, "width": size, "small_height": small,
                         "small_width": small, "analytic": report.analytic,
                         "measured": report.measured, "ratio": report.ratio,
                         "assumptions": ""})
            ok = ok and report.within
        for note in m.notes:
            print(f"note: {note}", file=sys.stderr)
    else:
        raise ConfigError(f"unknown measurement {args.measure!r}")
    return rows, ok


def cmd_complexity(args) -> int:
    modes = sum(1 for m in (args.curve, args.measure, args.cin) if m is not None)
    if modes != 1:
        print("error: pick exactly one of --curve, --measure, or point mode via --cin",
              file=sys.stderr)
        return 2
    ok = True
    if args.curve:
        if not args.sweep:
            print("error: --curve needs --sweep LO:HI", file=sys.stderr)
            return 2
        lo, hi = _parse_sweep(args.sweep)
        rows = _curve_rows(args.curve, lo, hi, args.c_shuffle)
    elif args.measure:
        rows, ok = _measure_rows(args)
    else:
        rows = _point_rows(args)
    _write_csv(rows, CSV_COLUMNS, sys.stdout)
    if not ok:
        print("error: measured counts fall outside the stated tolerance", file=sys.stderr)
        return 1
    return 0


# -- infer ------------------------------------------------------------------------

def cmd_infer(args) -> int:
    if not args.spec:
        print("error: --spec is required", file=sys.stderr)
        return 2
    spec, net = _load_network(args)
    if args.fused and not net.fused:
        net = net.fuse()
    image = load_ppm(args.image)
    if image.shape[1] != spec.input_size or image.shape[2] != spec.input_size:
        print(f"error: image is {image.shape[2]}x{image.shape[1]}, network expects "
              f"{spec.input_size}x{spec.input_size}", file=sys.stderr)
        return 2
    counter = OpCounter() if args.count else None
    preds = net.forward(image, counter)
    detections = decode_detections(preds, conf_thresh=args.conf, iou_thresh=args.iou)
    for d in detections:
        x1, y1, x2, y2 = d.box
        print(f"{d.class_id} {d.score:.4f} {x1:.4f} {y1:.4f} {x2:.4f} {y2:.4f}")
    if counter is not None:
        print(f"# flops={counter.multiply_adds}")
    return 0


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="litedet",
        description="Forward-inference toolbox for lightweight detection components.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="per-module parameter and multiply-add table")
    p.add_argument("--spec", required=True, help="network config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="weight archive to overlay")
    p.add_argument("--output", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("fuse", help="fuse every block and write a fused weight archive")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="training-form archive to fuse (seed-initialised if absent)")
    p.add_argument("--output", required=True, help="fused archive path")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="run the full invariant suite")
    p.add_argument("--spec", help="network config file (a built-in toy network by default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("complexity", help="closed-form cost curves, points, and measurements")
    p.add_argument("--curve", choices=["lambda-train", "lambda-infer", "lambda-sca"])
    p.add_argument("--sweep", help="LO:HI inclusive range for --curve")
    p.add_argument("--measure", choices=["fused-block", "sca"])
    p.add_argument("--cin", type=int, help="point mode: input channels")
    p.add_argument("--cout", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--channels", type=int, help="for --measure")
    p.add_argument("--size", type=int, help="for --measure: square map edge")
    p.add_argument("--small-size", type=int, help="for --measure sca: second map edge")
    p.add_argument("--c-shuffle", type=float, default=1, help="per-channel shuffle cost")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--assume-equal-channels", action="store_true")
    p.add_argument("--assume-square", action="store_true")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("infer", help="run detection on a PPM image")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, default=0,
                   help="weight seed when no archive is given")
    p.add_argument("--image", required=True, help="binary PPM (P6) input")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--fused", action="store_true", help="fuse before running")
    p.add_argument("--count", action="store_true", help="append a # flops= line")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArchiveError, FusionError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
