"""Command-line front end: tables, infer, simulate, analyze.

Exit codes: 0 success, 1 usage error, 2 domain error (deadlock, shape
mismatch), 3 I/O error.  Log level comes from VITPIPE_LOG.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("vitpipe")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _preset_config(args):
    from .config import PRESETS, apply_regime
    try:
        cfg = PRESETS[args.preset]()
    except KeyError:
        raise UsageError(f"unknown preset {args.preset!r} (want one of {sorted(PRESETS)})")
    if getattr(args, "bits", None):
        cfg = apply_regime(cfg, args.bits)
    return cfg


def _parallelism_for(cfg):
    from .resources import deit_tiny_parallelism, scaled_parallelism
    if (cfg.t, cfg.ci) == (196, 192):
        return deit_tiny_parallelism()
    return scaled_parallelism(cfg.t, cfg.ci, cfg.head_dim, cfg.mlp_hidden)


# --- tables -------------------------------------------------------------------

def cmd_tables(args) -> int:
    from . import builder
    from .bundleio import save_int_model
    from .luts import SegmentedLutTable, build_segmented_recip, count_repeated, gelu, table_error

    cfg = _preset_config(args)
    out = Path(args.out)
    calibrate = not args.no_calibration

    if args.samples:
        samples = np.load(args.samples)
        tables = {}
        for name in samples.files:
            vals = np.asarray(samples[name], dtype=np.int64)
            tables[name] = builder.build_requant_table(
                vals, 1.0, float(np.abs(vals).max() or 1) / 7, cfg.act_bits,
                calibrate, name)
        model = None
    elif args.synthetic:
        fm, model, tables = builder.random_pair(cfg, seed=args.seed,
                                                calib=args.calib_images,
                                                calibrate_tables=calibrate)
        out.mkdir(parents=True, exist_ok=True)
        save_int_model(out, model, tables, reference=fm)
    else:
        raise UsageError("need --samples FILE or --synthetic")

    rng = np.random.default_rng(0)
    report = {"calibrated": calibrate, "tables": {}}
    for name, t in sorted(tables.items()):
        if isinstance(t, SegmentedLutTable):
            lo, hi = 1, max(2, t.high.beta)
            xs = np.unique(np.exp(rng.uniform(np.log(lo), np.log(hi), 4000)).astype(np.int64))
            f = lambda r: 1.0 / max(r, t.low.in_scale)
            err = table_error(t, f, xs)
            single = build_segmented_recip(t.high.beta, 6, t.low.out_bits,
                                           in_scale=t.low.in_scale, pivot_frac=1.0)
            err_single = table_error(single.low, f, xs)
            entry = {"kind": "segmented_recip", "mse": err["mse"],
                     "max_abs": err["max_abs"], "single_table_mse": err_single["mse"]}
        else:
            xs = np.linspace(t.alpha, t.beta, 2001).astype(np.int64)
            if "gelu" in name:
                f = gelu
            elif "exp" in name:
                f = math.exp
            elif "rsqrt" in name:
                from .model import LN_EPS
                f = lambda v: 1.0 / math.sqrt(max(v, 0.0) + LN_EPS)
            else:
                f = lambda r: r
            err = table_error(t, f, xs)
            entry = {"kind": "table", "n": t.n, "alpha": t.alpha, "beta": t.beta,
                     "repeated_entries": count_repeated(t),
                     "mse": err["mse"], "max_abs": err["max_abs"]}
        report["tables"][name] = entry

    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        from .luts import save_tables
        save_tables(out / "tables.json", tables)
    with open(out / "calibration_report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    n_rq = sum(1 for k in report["tables"] if "rq" in k or k == "patch.rq")
    log.info("wrote %d tables (%d requant) to %s", len(tables), n_rq, out)
    print(f"tables: {len(tables)} written to {out}")
    return EXIT_OK


# --- infer --------------------------------------------------------------------

def cmd_infer(args) -> int:
    from .bundleio import load_int_model, load_reference
    from .kernels import ShapeError
    from .model import OpCounter
    from .quant import load_array, save_array

    model_dir = Path(args.model)
    if not (model_dir / "model.json").exists():
        raise FileNotFoundError(f"no frozen model at {model_dir}")
    model, _ = load_int_model(model_dir)
    cfg = model.cfg

    if args.input:
        img = load_array(Path(args.input))
    else:
        rng = np.random.default_rng(args.seed)
        img = rng.normal(0.0, 1.0, size=(cfg.img_channels, cfg.img_h, cfg.img_w))
    if tuple(img.shape) != (cfg.img_channels, cfg.img_h, cfg.img_w):
        raise DomainError(f"input shape {img.shape} does not match model "
                          f"({cfg.img_channels},{cfg.img_h},{cfg.img_w})")

    counter = OpCounter()
    try:
        logits = model.forward(img, counter=counter, use_tiled=args.tiled)
    except ShapeError as e:
        raise DomainError(str(e))
    report = {
        "argmax": int(np.argmax(logits)),
        "ops": {"macs": counter.macs, "elementwise": counter.elementwise,
                "total": counter.total, "gops_per_inference": counter.total / 1e9},
    }
    if args.oracle:
        if not (model_dir / "reference").exists():
            raise FileNotFoundError("bundle has no reference/ weights for --oracle")
        fm = load_reference(model_dir, cfg)
        record: dict = {}
        ref_logits = fm.forward(img, record)
        per_block = {}
        x = model.patch_embed(__import__("vitpipe.quant", fromlist=["QuantTensor"])
                              .QuantTensor.quantize(img, 8, model.s_img))
        per_block["patch"] = float(np.abs(x.dequant() - record["patch"][0]).max())
        for b, p in enumerate(model.blocks):
            x = model.mha_block(x, p)
            per_block[f"block{b}.mha"] = float(
                np.abs(x.dequant() - record[f"block{b}.in2"][0]).max())
            x = model.mlp_block(x, p)
            per_block[f"block{b}.mlp"] = float(
                np.abs(x.dequant() - record[f"block{b}.out"][0]).max())
        report["oracle"] = {
            "logits_max_abs_err": float(np.abs(logits - ref_logits).max()),
            "argmax_match": bool(np.argmax(logits) == np.argmax(ref_logits)),
            "per_block_max_err": per_block,
        }
    if args.output:
        save_array(Path(args.output), logits.astype(np.float32))
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=1)
    print(json.dumps(report["ops"]))
    return EXIT_OK


# --- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .resources import attention_graph
    from .sim import export_timeline, load_graph, min_fifo_depth, simulate, summary_dict

    if args.graph:
        graph = load_graph(args.graph)
    else:
        cfg = _preset_config(args)
        graph = attention_graph(_parallelism_for(cfg), deep_depth=args.deep_depth)
    for spec in args.fifo_depth or []:
        try:
            name, depth = spec.split("=")
            graph = graph.with_fifo_depth(name, int(depth))
        except (ValueError, KeyError) as e:
            raise UsageError(f"bad --fifo-depth {spec!r}: {e}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.min_depth:
        depth = min_fifo_depth(graph, args.min_depth, 1, args.deep_depth,
                               images=min(args.images, 3))
        print(f"min viable depth for {args.min_depth}: {depth}")
        with open(out / "min_depth.json", "w") as fh:
            json.dump({"channel": args.min_depth, "min_depth": depth}, fh)
        return EXIT_OK

    result = simulate(graph, images=args.images, horizon=args.horizon)
    summary = summary_dict(result)
    export_timeline(result.trace, out / "timeline.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    print(json.dumps({k: summary[k] for k in
                      ("status", "cycles", "stable_ii", "overlapped")}))
    if result.status == "deadlock":
        log.error("deadlock at cycle %d; blocked: %s", result.cycles,
                  ", ".join(result.blocked))
        raise DomainError(f"deadlock at cycle {result.cycles}")
    if result.status == "horizon":
        raise DomainError(f"horizon {args.horizon} exceeded")
    return EXIT_OK


# --- analyze ------------------------------------------------------------------

def cmd_analyze(args) -> int:
    from .resources import (CostTable, accelerator_ii, balance_report, default_scenarios,
                            deit_tiny_nonlinear_units, lut_dsp_savings, naive_dsp_estimate,
                            residual_path_costs, roofline, stage_ii, stage_table, throughput,
                            AIE_PER_DSP, LUT_PER_DSP, URAM_PER_BRAM)

    cfg = _preset_config(args)
    specs = _parallelism_for(cfg)
    rows = stage_table(specs, cfg.weight_bits)
    balance = balance_report(specs)
    acc_ii = balance["accelerator_ii"]
    tp = throughput(acc_ii, args.clock)
    units = deit_tiny_nonlinear_units(blocks=cfg.blocks, heads=cfg.heads)
    dsp_total, dsp_breakdown = naive_dsp_estimate(units)
    report = {
        "stages": rows,
        "balance": balance,
        "accelerator_ii": acc_ii,
        "clock_hz": args.clock,
        "throughput": tp,
        "buffer_comparison": residual_path_costs(6, 14),
        "naive_dsp": {"total": dsp_total, "units": units, "breakdown": dsp_breakdown},
        "lut_savings": lut_dsp_savings(units),
        "normalization_constants": {"aie_per_dsp": AIE_PER_DSP,
                                    "uram_per_bram": URAM_PER_BRAM,
                                    "lut_per_dsp": LUT_PER_DSP},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    with open(out / "roofline.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "compute_ceiling_ops", "bandwidth_bytes",
                    "intensity_ops_per_byte", "attainable_ops"])
        for sc in default_scenarios():
            w.writerow([sc.name, sc.compute_ceiling, sc.bandwidth, sc.intensity,
                        roofline(sc)])

    header = f"{'stage':<16}{'T/TP':>12}{'CI/CIP':>14}{'CO/COP':>14}{'MOPs':>8}{'P':>6}{'II':>8}{'eta':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        eta = "-" if r["eta"] is None else f"{100 * r['eta']:.1f}%"
        lines.append(f"{r['stage']:<16}{r['t']:>12}{r['ci']:>14}{r['co']:>14}"
                     f"{r['mops']:>8}{r['parallelism']:>6}{r['ii']:>8}{eta:>8}")
    lines.append(f"accelerator II = {acc_ii}, bottleneck = {balance['bottleneck']}, "
                 f"{tp['images_per_s']:.0f} images/s at {args.clock / 1e6:.0f} MHz")
    table_text = "\n".join(lines)
    (out / "report.txt").write_text(table_text + "\n")
    print(table_text)
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def make_parser() -> _Parser:
    p = _Parser(prog="vitpipe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tables", help="build and calibrate lookup tables")
    t.add_argument("--preset", default="deit-tiny")
    t.add_argument("--bits", default="a4w4")
    t.add_argument("--synthetic", action="store_true",
                   help="calibrate a random-weight model (also writes its bundle)")
    t.add_argument("--samples", help="npz of named integer sample arrays")
    t.add_argument("--no-calibration", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--calib-images", type=int, default=8)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_tables)

    i = sub.add_parser("infer", help="run integer inference")
    i.add_argument("--model", required=True, help="frozen model directory")
    i.add_argument("--input", help="raw tensor file (with .json sidecar)")
    i.add_argument("--output", help="logits file to write")
    i.add_argument("--report", help="run report JSON path")
    i.add_argument("--oracle", action="store_true",
                   help="compare against the bundled float reference")
    i.add_argument("--tiled", action="store_true",
                   help="use the explicitly tiled kernels")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(fn=cmd_infer)

    s = sub.add_parser("simulate", help="simulate the block-pair pipeline")
    s.add_argument("--preset", default="deit-tiny")
    s.add_argument("--bits", default="a4w4")
    s.add_argument("--graph", help="graph description JSON instead of a preset")
    s.add_argument("--images", type=int, default=5)
    s.add_argument("--horizon", type=int, default=100_000_000)
    s.add_argument("--deep-depth", type=int, default=512)
    s.add_argument("--fifo-depth", action="append", metavar="NAME=DEPTH")
    s.add_argument("--min-depth", metavar="CHANNEL",
                   help="search the minimal viable depth of a fifo")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    a = sub.add_parser("analyze", help="emit the resource/roofline report")
    a.add_argument("--preset", default="deit-tiny")
    a.add_argument("--bits", default="a4w4")
    a.add_argument("--clock", type=float, default=425e6)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VITPIPE_LOG", "WARNING").upper())
    try:
        args = make_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except DomainError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
