"""Command-line surface: compress, restore, plan, analyze, search, bench.

Exit codes: 0 success, 2 usage errors, 3 integrity failures (checksums,
corrupt files), 4 numerical failures.  Diagnostics go to stderr;
results/reports go to stdout or the requested output files.
"""

import argparse
import os
import sys

import numpy as np

from . import analyzer, bench, model_io, pipeline, planner
from .errors import IntegrityError, NumericsError, UsageError
from .numerics import Rng, gaussian_matrix

EXIT_USAGE = 2
EXIT_INTEGRITY = 3
EXIT_NUMERIC = 4

DEFAULT_ALPHA = 1.0 / 16.0
DEFAULT_SCHEDULE = "8+3+2"
DEFAULT_GROUP_SIZE = 128


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_compress(args) -> int:
    backbone = model_io.load_checkpoint(args.backbone)
    aligned = model_io.load_checkpoint(args.aligned)
    delta = model_io.extract_delta(aligned, backbone)
    calibration = None
    if args.calibration:
        calibration = dict(model_io.load_checkpoint(args.calibration).tensors)
    pkg = pipeline.compress_model(
        delta,
        calibration,
        args.schedule,
        args.alpha,
        group_size=args.group_size,
        synthetic_calibration=args.synthetic_calibration,
        seed=args.seed,
        exclude=tuple(args.exclude),
        threads=args.threads,
    )
    pipeline.save_package(pkg, args.output)

    stats = pipeline.package_stats(pkg)
    print(f"wrote {args.output} ({os.path.getsize(args.output)} bytes)")
    print("tensor                     kind        payload_bits  avg_bits")
    for name, entry in pkg.entries.items():
        if isinstance(entry, pipeline.RawEntry):
            print(f"{name:<26} raw16       {16 * entry.data.size:>12}  16.00")
        else:
            bits = sum(
                16 * (g.u.size + g.v.size)
                if g.bits == 16
                else g.u.payload_bits + g.v.payload_bits
                for g in entry.groups
            )
            avg = planner.avg_bitwidth(entry.schedule, entry.h_out, entry.h_in)
            print(f"{name:<26} compressed  {bits:>12}  {avg:.4f}")
    if stats.payload_bits:
        print(
            f"total payload {stats.payload_bits} bits of "
            f"{stats.budget_bits:.0f} budgeted "
            f"({stats.payload_bits / stats.budget_bits:.4f} of budget); "
            f"metadata overhead {100.0 * stats.overhead_ratio:.2f}%"
        )
    return 0


def cmd_restore(args) -> int:
    backbone = model_io.load_checkpoint(args.backbone)
    pkg = pipeline.load_package(args.package)
    delta = pipeline.decompress_package(pkg)
    restored = model_io.restore(backbone, delta, force=args.force)
    model_io.save_checkpoint(restored, args.output)
    print(f"wrote {args.output} ({len(restored.tensors)} tensors)")
    return 0


def cmd_plan(args) -> int:
    schedule = planner.make_schedule(args.schedule, args.alpha, args.h_out, args.h_in)
    print(f"schedule {args.schedule!r} at alpha={args.alpha} "
          f"for {args.h_out}x{args.h_in}:")
    print("bits  r_begin  r_end  ranks")
    for g in schedule.groups:
        print(f"{g.bits:>4}  {g.r_begin:>7}  {g.r_end:>5}  {g.width:>5}")
    print(f"total ranks {schedule.total_ranks}, "
          f"payload {schedule.payload_bits(args.h_out, args.h_in)} bits, "
          f"avg bitwidth {planner.avg_bitwidth(schedule, args.h_out, args.h_in):.6f}")
    return 0


def _analyze_one(delta, x, args, param_kind):
    return analyzer.compare_methods(
        delta, x, args.alpha, param_kind=param_kind, group_size=args.group_size
    )


def cmd_analyze(args) -> int:
    rows = []
    if args.delta:
        delta_ckpt = model_io.load_checkpoint(args.delta)
        calib = dict(model_io.load_checkpoint(args.calibration).tensors) if args.calibration else {}
        for name, tensor in delta_ckpt.tensors.items():
            if tensor.ndim != 2:
                continue
            x = calib.get(name)
            if x is None:
                if not args.synthetic_calibration:
                    raise UsageError(f"no calibration for tensor {name!r}")
                x = pipeline.synthetic_calibration_matrix(args.seed, name, tensor.shape[1])
            rows.extend(_analyze_one(tensor, x, args, name).rows)
    elif args.seeds > 1:
        wins_sign = wins_lowrank = wins_single = 0
        for seed, delta, x in analyzer.longtail_suite(args.seeds, args.size):
            report = _analyze_one(delta, x, args, f"seed{seed}")
            rows.extend(report.rows)
            triple = report.mse("triple")
            wins_sign += triple < report.mse("sign-1bit")
            wins_lowrank += triple < report.mse("low-rank")
            wins_single += triple <= report.mse("single")
        print(f"triple beats sign-1bit on {wins_sign}/{args.seeds} seeds")
        print(f"triple beats low-rank  on {wins_lowrank}/{args.seeds} seeds")
        print(f"triple <= single       on {wins_single}/{args.seeds} seeds")
    else:
        rng = Rng.stream(args.seed, "analyze/delta")
        delta = analyzer.synth_longtail_delta(
            rng, args.size, args.size, args.decay, args.noise
        )
        x = gaussian_matrix(
            Rng.stream(args.seed, "analyze/calibration"), args.size, 512
        )
        rows.extend(_analyze_one(delta, x, args, f"seed{args.seed}").rows)

    report = analyzer.ErrorReport(rows=tuple(rows))
    print(report.format_table())
    if args.output:
        _write_text(args.output, report.to_csv())
        print(f"wrote {args.output}")
    return 0


def cmd_search(args) -> int:
    suite = analyzer.longtail_suite(args.pairs, args.size)
    pairs = [(delta, x) for _, delta, x in suite]
    objective = analyzer.allocation_mse_objective(pairs, args.alpha)
    greedy = planner.make_schedule(DEFAULT_SCHEDULE, args.alpha, args.size, args.size)
    greedy_alloc = planner.Allocation(
        x2=greedy.groups[0].width, x4=greedy.groups[1].width,
        x5=greedy.groups[2].width if len(greedy.groups) > 2 else 0,
    )
    result = planner.genetic_search(
        objective,
        args.alpha,
        args.size,
        args.size,
        planner.GaParams(population=args.population, generations=args.generations),
        Rng.stream(args.seed, "search"),
        seed_allocations=(greedy_alloc,),
    )
    print(f"greedy {DEFAULT_SCHEDULE!r} objective: {objective(greedy_alloc):.6e}")
    print(f"best allocation (ranks at 16/8/4/3/2 bits): {result.best.counts()}")
    print(f"best objective: {result.objective:.6e}")
    print("trace: " + " ".join(f"{v:.6e}" for v in result.trace))
    return 0


def cmd_bench(args) -> int:
    rows = bench.run_bench(
        hidden_sizes=args.hidden,
        batch_sizes=args.batch,
        repeats=args.repeats,
        seed=args.seed,
        alpha=args.alpha,
        spec=args.schedule,
    )
    lines = ["impl,batch,hidden,seconds,peak_bytes,rel_err,speedup"]
    for r in rows:
        lines.append(
            f"{r.impl},{r.batch},{r.hidden},{r.seconds!r},{r.peak_bytes},"
            f"{r.rel_err!r},{r.speedup!r}"
        )
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output:
        _write_text(args.output, text)
        print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltacomp",
        description="Mixed-precision compression of fine-tuned model deltas.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        p.add_argument("--schedule", default=DEFAULT_SCHEDULE)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE,
                       dest="group_size")

    p = sub.add_parser("compress", help="compress aligned - backbone into a package")
    p.add_argument("--backbone", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--calibration", help="DCKP of per-tensor activations")
    p.add_argument("--synthetic-calibration", action="store_true",
                   dest="synthetic_calibration")
    p.add_argument("--exclude", action="append", default=[],
                   help="glob of tensor names to store raw (repeatable)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("restore", help="apply a package to a backbone checkpoint")
    p.add_argument("--backbone", required=True)
    p.add_argument("--package", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--force", action="store_true",
                   help="skip the backbone checksum gate")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("plan", help="print the schedule for given dims")
    p.add_argument("--h-out", type=int, default=4096, dest="h_out")
    p.add_argument("--h-in", type=int, default=4096, dest="h_in")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("analyze", help="compare methods at equal budget")
    p.add_argument("--delta", help="DCKP of delta tensors to analyze")
    p.add_argument("--calibration", help="DCKP of per-tensor activations")
    p.add_argument("--synthetic-calibration", action="store_true",
                   dest="synthetic_calibration")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--decay", type=float, default=1.2)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seeds", type=int, default=1,
                   help="sweep this many suite seeds and print win counts")
    p.add_argument("--output", help="CSV destination")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("search", help="genetic search over bit allocations")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--pairs", type=int, default=2,
                   help="synthetic delta/calibration pairs in the objective")
    p.add_argument("--population", type=int, default=32)
    p.add_argument("--generations", type=int, default=40)
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="fused vs materialized apply sweep")
    p.add_argument("--hidden", type=_int_list, default=[1024, 2048, 4096])
    p.add_argument("--batch", type=_int_list, default=[1, 8, 32])
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--output", help="CSV destination")
    common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericsError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
