"""Command-line entry point: ``agentattn {verify,bench,params}``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
Machine-readable output (JSON lines / CSV / JSON) goes to stdout or --out;
human summaries go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench, verify
from .errors import AgentAttnError
from .model_zoo import build, count_params, load_preset

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {val}")
    return val


def _seed(text):
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in u64")
    return val


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("list must hold positive integers")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise argparse.ArgumentTypeError(f"values must be strictly ascending: {vals}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--dtype", choices=("f32", "f64"), default=None)
        p.add_argument("--out", default=None, help="write the machine-readable report here instead of stdout")

    pv = sub.add_parser("verify", help="run the property suite and oracle checks")
    common(pv)
    pv.add_argument("--trials", type=_positive_int, default=10)
    pv.add_argument("--inject", default=None, help="fault-inject one property (e.g. rowsum)")

    pb = sub.add_parser("bench", help="wall-clock scaling sweep, CSV output")
    common(pb)
    pb.add_argument("--kernel", choices=bench.KERNELS, default="agent")
    pb.add_argument("--Ns", type=_int_list, default=[1024, 2048, 4096, 8192])
    pb.add_argument("--n", type=_positive_int, default=49)
    pb.add_argument("--d", type=_positive_int, default=64)
    pb.add_argument("--heads", type=_positive_int, default=1)
    pb.add_argument("--repeats", type=_positive_int, default=bench.MIN_REPEATS)
    pb.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (capped by AGENTATTN_THREADS)")

    pp = sub.add_parser("params", help="parameter and FLOP accounting for a preset")
    common(pp)
    pp.add_argument("--preset", required=True, help="preset JSON path or shipped preset name")
    return parser


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_verify(args) -> int:
    reports = verify.property_suite(args.seed, args.trials, args.inject)
    reports += verify.oracle_sweep(seed=args.seed, dtype=args.dtype or "f64")
    ordered = [r for r in reports if r.passed] + [r for r in reports if not r.passed]
    _emit(verify.to_jsonl(ordered), args.out)
    failed = [r.name for r in ordered if not r.passed]
    print(f"verify: {len(ordered) - len(failed)}/{len(ordered)} checks passed", file=sys.stderr)
    for name in failed:
        print(f"  FAILED {name}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < bench.MIN_REPEATS:
        raise bench.ConfigError(f"--repeats must be >= {bench.MIN_REPEATS}")
    rows = bench.run_scaling(
        args.kernel, args.Ns, n=args.n, d=args.d, dtype=args.dtype or "f32", repeats=args.repeats,
        seed=args.seed, threads=args.threads, heads=args.heads,
    )
    _emit(bench.rows_to_csv(rows), args.out)
    summary = bench.summarize(rows)
    print(json.dumps({k: {"slope": v["slope"]} for k, v in summary.items()}), file=sys.stderr)
    return EXIT_OK


def cmd_params(args) -> int:
    preset = load_preset(args.preset)
    model = build(preset, seed=args.seed, dtype=args.dtype or "f32")
    report = count_params(model)
    macs = bench.model_macs(preset)
    payload = {
        "preset": preset.name,
        "img_size": preset.img_size,
        "params": report.to_dict(),
        "flops": bench.flops_model_forward(preset),
        "flops_2mac": bench.flops_model_forward(preset, convention="2mac"),
        "macs": macs,
    }
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    print(f"{preset.name}: {report.total / 1e6:.2f}M params, {payload['flops'] / 1e9:.2f}G FLOPs", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "params": cmd_params}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (AgentAttnError, FileNotFoundError, ValueError) as exc:
        print(f"agentattn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"agentattn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # keep the exit-code contract even on internal faults
        print(f"agentattn {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
