"""``mixstream`` command line: dse, quantize, optimize, simulate.

Exit codes: 0 success, 1 objective failure, 2 input error, 3 infeasible,
4 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import re
import sys
from fractions import Fraction
from pathlib import Path

from . import gp
from .dse import MultiplierModel, TilingPlan, optimize_dataflow, sweep_csv, validate_plan
from .errors import InfeasibleError, MixstreamError, ObjectiveError
from .execsim import traffic_sim, verify_conv
from .netmodel import NetworkDesc, load_network, reference_network
from .quantizer import avg_bits, compression_rate, effective_bits, layer_bits, quantize_layer, read_weight_file
from .sparsefmt import encode, encoded_size, write_encoded_model

EXIT_OK, EXIT_OBJECTIVE, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3, 4

_UNITS = {
    "b": Fraction(1, 8), "bit": Fraction(1, 8), "bits": Fraction(1, 8),
    "": 1, "B": 1,
    "KiB": 1 << 10, "MiB": 1 << 20, "GiB": 1 << 30,
    # decimal-looking suffixes follow the binary convention used in hardware reports
    "KB": 1 << 10, "MB": 1 << 20, "GB": 1 << 30,
}


def parse_size_bits(text: str) -> int:
    """'4MiB' -> bits.  A bare number is bytes; 'b'/'bit' suffixes give bits directly."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z]*)\s*", text)
    if not m or m.group(2) not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use e.g. 4MiB, 512KiB, 1048576, 8388608b")
    bits = Fraction(m.group(1)) * _UNITS[m.group(2)] * 8
    if bits <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return int(bits)


def _positive_int(text: str) -> int:
    v = int(float(text))
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _load_net(spec: str) -> NetworkDesc:
    path = Path(spec)
    if path.exists():
        return load_network(path)
    try:
        return reference_network(spec)
    except (FileNotFoundError, KeyError, ValueError):
        raise FileNotFoundError(f"no network file or bundled network named {spec!r}") from None


def _load_ratios(spec: str | None) -> dict[int, float]:
    """Ratios from a JSON object ``{"layer_id": p}`` (file path or inline)."""
    if spec is None:
        return {}
    path = Path(spec)
    doc = json.loads(path.read_text() if path.exists() else spec)
    if not isinstance(doc, dict):
        raise ValueError("ratios must be a JSON object mapping layer id to p")
    return {int(k): float(v) for k, v in doc.items()}


def _open_out(path: str | None):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", newline="")


def _load_plan(path: str) -> TilingPlan:
    return TilingPlan.from_dict(json.loads(Path(path).read_text()))


# --- dse ------------------------------------------------------------------------

def cmd_dse(args) -> int:
    net = _load_net(args.net)
    ratios = _load_ratios(args.ratios)
    overrides = effective_bits(net, ratios) if ratios else None
    alpha, mults = (None, None) if args.sweep_only else (args.alpha, args.mult_budget)
    res = optimize_dataflow(net, alpha, mults, args.clock, params_on_chip=args.params_on_chip,
                            weight_overrides=overrides, mult_model=MultiplierModel(),
                            main_rule=args.main_rule)
    with _open_out(args.out) as fh:
        fh.write(sweep_csv(res.rows))
    if res.plan is None:
        return EXIT_OK
    validate_plan(net, res.plan)
    summary = sys.stdout if args.out not in (None, "-") else sys.stderr
    rep = res.report
    convs = net.conv_layers
    print(f"network {net.name}: boundary {rep.boundary} "
          f"({'after ' + convs[rep.boundary - 1].name if rep.boundary else 'all layers on main layer'})",
          file=summary)
    print(f"sram {rep.sram_bits} bits ({rep.sram_mib:.3f} MiB), dram {rep.dram_bytes_per_frame} B/frame "
          f"({rep.dram_mib:.3f} MiB), frame rate {float(rep.frame_rate):.4g}/s, multipliers {rep.multipliers}",
          file=summary)
    for j, layer in enumerate(convs):
        grp = "group1" if j < rep.boundary else "main"
        print(f"  {layer.name}: {grp} T_i={res.plan.t_i[j]} T_o={res.plan.t_o[j]}", file=summary)
    if args.plan_out:
        Path(args.plan_out).write_text(json.dumps(res.plan.to_dict(net), indent=1) + "\n")
    return EXIT_OK


# --- quantize -----------------------------------------------------------------------

def _tiles_for(net: NetworkDesc | None, plan: TilingPlan | None, lid: int, t_i: int, t_o: int):
    if plan is None or net is None:
        return t_i, t_o
    for j, layer in enumerate(net.conv_layers):
        if layer.id == lid:
            return plan.t_i[j], plan.t_o[j]
    return t_i, t_o


def headline(avg: float) -> str:
    return f"avg_bits {avg:.4f}\ncompression {32 / avg:.2f}x vs 32-bit"


def cmd_quantize(args) -> int:
    net = _load_net(args.net) if args.net else None
    ratios = _load_ratios(args.ratios)
    plan = _load_plan(args.plan) if args.plan else None
    tensors = read_weight_file(args.weights) if args.weights else {}
    if net is None and not tensors:
        raise ValueError("quantize needs --net and/or --weights")

    def ratio(lid):
        if lid in ratios:
            return ratios[lid]
        if args.p is None:
            raise ValueError(f"no ratio for layer {lid}; pass --p or include it in --ratios")
        return args.p

    if net is not None:
        layers = [(l.id, l.name, l.quantize, l.k * l.k * l.n * l.m) for l in net.conv_layers]
    else:
        layers = [(lid, f"layer{lid}", True, t.size) for lid, t in sorted(tensors.items())]
    all_ratios = {lid: ratio(lid) for lid, _, q, _ in layers if q}
    total = sum(n for *_, n in layers)

    encoded = []
    rows = []
    for lid, name, quant, n in layers:
        sizes = None
        if quant:
            p = all_ratios[lid]
            bits = layer_bits(p)
            comp = compression_rate(p, n, total)
            if lid in tensors:
                ti, to = _tiles_for(net, plan, lid, args.t_i, args.t_o)
                enc = encode(quantize_layer(tensors[lid], p, layer_id=lid), ti, to, args.coord_bits)
                encoded.append(enc)
                sizes = encoded_size(enc)
        else:
            p = ""
            bits = net.precision.q_full if net is not None else 32
            comp = 32 / bits * n / total
        rows.append([lid, name, p, f"{bits:.6g}", n, f"{comp:.6g}",
                     "" if sizes is None else sizes.total])

    if net is not None:
        avg = avg_bits(net, all_ratios)
    else:
        avg = sum(layer_bits(all_ratios[lid]) * n for lid, _, _, n in layers) / total
    with _open_out(args.report) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "name", "p", "bits", "params", "compression", "encoded_bytes"])
        w.writerows(rows)
    summary = sys.stdout if args.report not in (None, "-") else sys.stderr
    print(headline(avg), file=summary)
    if args.out:
        if not encoded:
            raise ValueError("--out needs --weights with at least one quantized layer")
        nbytes = write_encoded_model(args.out, encoded)
        print(f"wrote {args.out} ({nbytes} bytes, {len(encoded)} layers)", file=summary)
    return EXIT_OK


# --- optimize -------------------------------------------------------------------------

def _trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "p", "L", "mean", "var", "ucb"])
    for r in trace:
        w.writerow([r.iter, f"{r.p:.6g}", repr(r.L), f"{r.mean:.9g}", f"{r.var:.9g}", f"{r.ucb:.9g}"])
    return buf.getvalue()


def cmd_optimize(args) -> int:
    if args.layers:
        layer_ids = [int(v) for v in args.layers.split(",")]
    elif args.net:
        layer_ids = [l.id for l in _load_net(args.net).conv_layers if l.quantize]
    else:
        layer_ids = [1]
    if args.trace and len(layer_ids) > 1:
        raise ValueError("--trace takes one layer; use --trace-dir for several")
    if args.objective_cmd:
        make = lambda lid: _layer_command(args.objective_cmd, lid, args.gamma)
    else:
        make = lambda lid: gp.synthetic_objective(args.a_inf, args.c, args.k, args.gamma)
    omega = None if args.omega == "schedule" else float(args.omega)

    chosen, status = {}, EXIT_OK
    for lid in layer_ids:
        try:
            res = gp.optimize(make(lid), args.n_iter, args.seed, length_scale=args.length_scale,
                              signal=args.signal, noise=args.noise, omega=omega)
            trace = res.trace
            chosen[lid] = res.best_p
            print(f"layer {lid}: p*={res.best_p:.4g} L={res.best_L:.6g}", file=sys.stderr)
        except ObjectiveError as exc:
            trace = exc.trace
            status = EXIT_OBJECTIVE
            print(f"layer {lid}: aborted after {len(trace)} samples: {exc}", file=sys.stderr)
        text = _trace_csv(trace)
        if args.trace:
            Path(args.trace).write_text(text)
        elif args.trace_dir:
            Path(args.trace_dir).mkdir(parents=True, exist_ok=True)
            (Path(args.trace_dir) / f"layer_{lid}.csv").write_text(text)
        elif len(layer_ids) == 1:
            sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(json.dumps({str(k): v for k, v in chosen.items()}, indent=1) + "\n")
    return status


def _layer_command(command: str, lid: int, gamma: float):
    obj = gp.CommandObjective(command, gamma)

    def run(p):
        os.environ["MIXSTREAM_LAYER"] = str(lid)
        return obj(p)

    return run


# --- simulate ------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if not args.plan and not args.verify_conv:
        raise ValueError("simulate needs --plan (with --net) and/or --verify-conv")
    status = EXIT_OK
    if args.plan:
        if not args.net:
            raise ValueError("--plan needs --net")
        net = _load_net(args.net)
        plan = validate_plan(net, _load_plan(args.plan))
        ratios = _load_ratios(args.ratios)
        report = traffic_sim(net, plan, args.params_on_chip or None,
                             effective_bits(net, ratios) if ratios else None)
        with _open_out(args.out) as fh:
            fh.write(report.to_csv())
    if args.verify_conv:
        check = verify_conv(args.cases, args.seed)
        if check.first_failure is None:
            print(f"PASS {check.passed}/{check.total}")
        else:
            print(f"FAIL {check.passed}/{check.total} first counterexample: {check.first_failure}")
            status = EXIT_VERIFY
    return status


# --- entry point --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixstream", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dse", help="choose group boundary and tiles; write the boundary sweep CSV")
    d.add_argument("--net", required=True, help="network JSON file or bundled name (simyolov2, ...)")
    d.add_argument("--alpha", type=parse_size_bits, default=None, help="on-chip memory budget, e.g. 4MiB")
    d.add_argument("--mult-budget", type=_positive_int, default=None)
    d.add_argument("--clock", type=float, default=200e6)
    d.add_argument("--params-on-chip", action="store_true")
    d.add_argument("--main-rule", choices=("throughput", "balance"), default="throughput")
    d.add_argument("--ratios", help="per-layer ratios JSON; sizes weights at 1+7p bits")
    d.add_argument("--sweep-only", action="store_true", help="ignore budgets, only report the sweep")
    d.add_argument("--out", help="sweep CSV path (default stdout)")
    d.add_argument("--plan-out", help="write the chosen plan as JSON")
    d.set_defaults(func=cmd_dse)

    q = sub.add_parser("quantize", help="mixed 1/8-bit quantization, encoding and compression report")
    q.add_argument("--net")
    q.add_argument("--weights", help="MPQW weight file")
    q.add_argument("--ratios", help="JSON object {layer_id: p} (file or inline)")
    q.add_argument("--p", type=float, default=None, help="ratio for layers missing from --ratios")
    q.add_argument("--plan", help="plan JSON supplying per-layer tiles")
    q.add_argument("--t-i", type=_positive_int, default=4)
    q.add_argument("--t-o", type=_positive_int, default=4)
    q.add_argument("--coord-bits", type=_positive_int, default=12)
    q.add_argument("--out", help="encoded MPQE model path")
    q.add_argument("--report", help="per-layer CSV path (default stdout)")
    q.set_defaults(func=cmd_quantize)

    o = sub.add_parser("optimize", help="per-layer GP-UCB search for the 8-bit ratio")
    o.add_argument("--net")
    o.add_argument("--layers", help="comma-separated layer ids")
    o.add_argument("--objective-cmd", help="command reading p on stdin, printing 'L' or 'mAP C'")
    o.add_argument("--a-inf", type=float, default=0.75, help="synthetic objective: saturated accuracy")
    o.add_argument("--c", type=float, default=0.3, help="synthetic objective: accuracy drop at p=0")
    o.add_argument("--k", type=float, default=30.0, help="synthetic objective: recovery rate")
    o.add_argument("--gamma", type=float, default=0.01)
    o.add_argument("--n-iter", type=_positive_int, default=30)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--length-scale", type=float, default=0.1)
    o.add_argument("--signal", type=float, default=1.0)
    o.add_argument("--noise", type=float, default=1e-3)
    o.add_argument("--omega", default="2.0", help="exploration weight or 'schedule'")
    o.add_argument("--trace", help="trace CSV for a single layer")
    o.add_argument("--trace-dir", help="directory for layer_<id>.csv traces")
    o.add_argument("--out", help="write chosen ratios as JSON")
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("simulate", help="loop-nest traffic counters and conv bit-exactness check")
    s.add_argument("--net")
    s.add_argument("--plan")
    s.add_argument("--params-on-chip", action="store_true", help="override the plan setting")
    s.add_argument("--ratios")
    s.add_argument("--out", help="counter CSV path (default stdout)")
    s.add_argument("--verify-conv", action="store_true")
    s.add_argument("--cases", type=_positive_int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MIXSTREAM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (MixstreamError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
