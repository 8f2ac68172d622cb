"""``driftlab`` command-line interface.

Exit codes: 0 success, 2 usage or config error (including failed hash
verification), 3 numeric failure such as a diverged training run. The
``DRIFTLAB_SEED`` environment variable (integer or comma list) overrides the
seed list of ``run`` configs.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, benchmark, config, runs, synth
from .autodiff.optim import NonFiniteGradient
from .checkpoint import ChecksumError, load_checkpoint, read_manifest, save_checkpoint
from .imgstats import amplitude_spectrum, channel_moments, highfreq_energy_ratio
from .trainer import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("driftlab")


class UsageError(Exception):
    pass


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(args):
    task = synth.make_task(args.domain, args.n, args.seed, args.size)
    synth.save_dataset(task, args.out)
    print(f"wrote {len(task)} {task.domain.value} pairs to {args.out}")


def cmd_run(args):
    cfg = config.load(args.config)
    if args.seeds:
        doc = dict(cfg.raw, seeds=args.seeds)
        cfg = config.parse(doc, env={})
    out = args.out or cfg.output_dir
    if not out:
        raise UsageError("no output directory: pass --out or set output_dir in the config")
    runs.run_config(cfg, out, jobs=args.jobs, cache_dir=args.cache)
    print(f"{cfg.name}: seeds {list(cfg.seeds)} -> {out}/metrics.csv")


def cmd_stitch(args):
    if args.f0:
        f0 = load_checkpoint(args.f0)
        f1 = load_checkpoint(args.f1 or args.f0)
        seed = f0.cfg.seed if args.data_seed is None else args.data_seed
        val = synth.make_split(args.domain, "val", args.val_size, seed, args.image_size)
        from .analysis import stitching_curve
        curve = stitching_curve(f0, f1, val)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        m0, m1 = read_manifest(args.f0), read_manifest(args.f1 or args.f0)
        h = config.config_hash([m0["content_hash"], m1["content_hash"]])
        runs.write_csv(Path(args.out) / "stitch_curve.csv", runs.header(h, [seed]), runs.STITCH_COLUMNS,
                       runs.stitch_rows(curve))
        print(f"wrote {args.out}/stitch_curve.csv")
        return
    if not args.src:
        raise UsageError("stitch needs --from RUN_DIR or --f0 CHECKPOINT")
    run_dirs = _runs_from(args.src)
    for d in run_dirs:
        out = Path(args.out) / d.name if args.out and len(run_dirs) > 1 else (args.out or d)
        runs.stitch_run(d, out)
        print(f"stitch curves for {d} -> {out}")


def cmd_reestimate(args):
    model = load_checkpoint(args.src)
    datasets = [synth.load_dataset(p) for p in args.data]
    val = synth.load_dataset(args.val) if args.val else None
    new, before, after, touched = runs.reestimate(model, datasets, val, args.layers or None, args.batch_size)
    meta = dict(read_manifest(args.src)["meta"], reestimated_on=[str(p) for p in args.data],
                reestimated_layers=touched)
    out = Path(args.out)
    save_checkpoint(new, out, meta)
    h = read_manifest(out)["content_hash"][:16]
    rows = [(args.layers or "*", before, after, after - before)] if val is not None else []
    runs.write_csv(out / "reestimate.csv", runs.header(h, [model.cfg.seed]), benchmark.REESTIMATE_COLUMNS, rows)
    print(f"re-estimated {len(touched)} layers -> {out}")
    if val is not None:
        print(f"task mIoU {before:.2f} -> {after:.2f} ({after - before:+.2f})")


def cmd_stats(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = [synth.load_dataset(p) for p in args.data]
    names = [Path(p).name for p in args.data]
    h = config.config_hash({"datasets": [[s.domain.value, s.seeds] for s in sets], "size": args.size,
                            "cutoff": args.cutoff})
    seeds = sorted({s.seed for s in sets})
    head = runs.header(h, seeds)
    moments, ratios = [], []
    for name, s in zip(names, sets):
        for space in ("HSV", "RGB"):
            moments.extend(channel_moments(s.images, space).rows(name))
        spec = amplitude_spectrum(s.images, args.size)
        grid = [[float(v) for v in row] for row in spec.values]
        runs.write_csv(out / f"spectrum_{name}.csv", head, [f"u{i}" for i in range(args.size)], grid)
        ratios.append((name, s.domain.value, args.cutoff, highfreq_energy_ratio(spec, args.cutoff)))
    runs.write_csv(out / "moments.csv", head, ["dataset", "colorspace", "channel", "mean", "std"], moments)
    runs.write_csv(out / "highfreq.csv", head, ["dataset", "domain", "cutoff", "ratio"], ratios)
    print(f"wrote statistics for {len(sets)} datasets to {out}")


def cmd_report(args):
    run_dirs = []
    for src in args.src:
        run_dirs.extend(_runs_from(src))
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.csv"
    rows = runs.write_report(run_dirs, out)
    print(f"report over {len(run_dirs)} runs ({len(rows)} rows) -> {out}")


def cmd_bench(args):
    benchmark.run_benchmark(args.out, args.seeds, args.jobs, args.arms or None,
                            progress=lambda msg: print(msg, flush=True))
    print(f"benchmark written to {args.out}")


def _runs_from(src):
    found = runs.find_runs(src)
    if not found:
        raise UsageError(f"no run directories under {src}")
    return found


# ----------------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="driftlab", description="Domain-incremental segmentation forgetting lab.")
    p.add_argument("--version", action="version", version=f"driftlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as PPM/PGM files plus index.json")
    g.add_argument("--domain", required=True, type=synth.DomainId.parse)
    g.add_argument("--n", required=True, type=_positive)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train a task sequence from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", type=_seed_list)
    r.add_argument("--out")
    r.add_argument("--jobs", type=_positive, default=1)
    r.add_argument("--cache", help="directory for reusable task-0 models")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stitch", help="stitch curves of task-0 vs final models")
    s.add_argument("--from", dest="src", help="run directory (or a directory containing runs)")
    s.add_argument("--f0", help="task-0 checkpoint (alternative to --from)")
    s.add_argument("--f1", help="later checkpoint; defaults to --f0")
    s.add_argument("--domain", type=synth.DomainId.parse, default=synth.DomainId.CLEAR)
    s.add_argument("--data-seed", type=int)
    s.add_argument("--val-size", type=_positive, default=64)
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stitch)

    b = sub.add_parser("reestimate-bn", help="re-estimate BN population statistics of a checkpoint")
    b.add_argument("--from", dest="src", required=True, help="checkpoint directory")
    b.add_argument("--data", required=True, nargs="+", help="dataset directories (gen-data output)")
    b.add_argument("--val", help="dataset to evaluate before and after")
    b.add_argument("--layers", help="glob over norm layer names, e.g. 'stem.*'")
    b.add_argument("--batch-size", type=_positive, default=8)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_reestimate)

    t = sub.add_parser("stats", help="HSV/RGB moments and amplitude spectra of datasets")
    t.add_argument("--data", required=True, nargs="+")
    t.add_argument("--size", type=int, default=32)
    t.add_argument("--cutoff", type=float, default=0.5)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_stats)

    rp = sub.add_parser("report", help="mean and std across seeds of zero-shot, test mIoU and forgetting")
    rp.add_argument("--from", dest="src", required=True, nargs="+")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    bn = sub.add_parser("bench", help="run the full acceptance benchmark")
    bn.add_argument("--out", required=True)
    bn.add_argument("--seeds", type=_seed_list, default=list(benchmark.DEFAULT_SEEDS))
    bn.add_argument("--jobs", type=_positive, default=1)
    bn.add_argument("--arms", nargs="+", choices=list(benchmark.ARMS))
    bn.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except config.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, runs.RunError, ChecksumError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteGradient, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
