"""Run directories: checkpoints, CSV artifacts, manifests and reports.

A run directory holds one experiment config trained for one or more seeds::

    config.json      canonical JSON of the config document (hashed)
    manifest.json    tool version, config hash, seeds, per-seed outputs
    timings.json     wall-clock per stage (kept out of the manifest so that
                     everything else regenerates byte-identically)
    metrics.csv      one row per (seed, trained_upto, eval_task)
    history.csv      per-epoch training history
    seed<s>/task<k>_<domain>/   one checkpoint per task
"""

import csv
import io
import json
import logging
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, analysis, config, normalization, synth, trainer
from .checkpoint import ChecksumError, load_checkpoint, read_manifest, verify_checkpoint

log = logging.getLogger(__name__)

RUN_FORMAT = "driftlab-run"
METRIC_COLUMNS = ["run", "method", "seed", "trained_upto", "eval_task", "eval_domain", "miou"]
HISTORY_COLUMNS = ["run", "method", "seed", "task", "epoch", "step", "lr", "train_loss", "val_miou"]
STITCH_COLUMNS = ["cut_name", "zone", "relative_miou"]
REPORT_COLUMNS = ["run", "method", "domain", "metric", "mean", "std", "n"]
MIOU_NOTE = "miou: percent; mean over classes present in ground truth or prediction of the eval set"


class RunError(ValueError):
    """A run directory is missing, malformed or fails hash verification."""


# ----------------------------------------------------------------------------- CSV


def header(cfg_hash, seeds):
    seeds = ",".join(str(s) for s in seeds) if isinstance(seeds, (list, tuple)) else seeds
    return f"driftlab {__version__} config_hash={cfg_hash} seed={seeds}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def csv_text(comments, columns, rows):
    buf = io.StringIO()
    for c in [comments] if isinstance(comments, str) else comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, comments, columns, rows):
    Path(path).write_text(csv_text(comments, columns, rows))


def read_csv(path):
    """Rows of a driftlab CSV as dicts plus the leading comment lines."""
    lines = Path(path).read_text().splitlines()
    comments = [ln[2:] for ln in lines if ln.startswith("# ")]
    body = [ln for ln in lines if not ln.startswith("#")]
    return list(csv.DictReader(body)), comments


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------- training


def run_seed(cfg, seed, out_dir, cache_dir=None, data=None):
    """Train ``cfg`` for one seed, saving checkpoints under ``out_dir/seed<s>``.

    Returns a dict of metric rows, history rows, checkpoint paths (relative to
    ``out_dir``), the trained models and the data used.
    """
    out = Path(out_dir)
    seed_dir = out / f"seed{seed}"
    t = time.perf_counter()
    train, val = data if data is not None else trainer.load_data(cfg, seed)
    res = trainer.run_sequence(cfg, seed, seed_dir, cache_dir, (train, val))
    metrics = [(cfg.name, *r) for r in res.table.rows()]
    history = []
    for k, hist in enumerate(res.histories):
        for h in hist:
            history.append((cfg.name, cfg.method.label, seed, k, h["epoch"], h["step"], float(h["lr"]),
                            float(h["train_loss"]), None if h["val_miou"] is None else float(h["val_miou"])))
    return {
        "seed": seed,
        "metrics": metrics,
        "history": history,
        "checkpoints": [str(Path(p).relative_to(out)) for p in res.checkpoint_dirs],
        "models": res.models,
        "data": (train, val),
        "seconds": time.perf_counter() - t,
    }


def write_run(out_dir, cfg, seed_results, timings=None, extra=None):
    """Write config, manifest, metrics and history for the finished seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [r["seed"] for r in seed_results]
    head = header(cfg.hash, seeds)
    (out / "config.json").write_text(config.canonical_json(cfg.raw) + "\n")
    write_csv(out / "metrics.csv", [head, MIOU_NOTE], METRIC_COLUMNS,
              [row for r in seed_results for row in r["metrics"]])
    write_csv(out / "history.csv", head, HISTORY_COLUMNS, [row for r in seed_results for row in r["history"]])
    manifest = {
        "format": RUN_FORMAT,
        "tool": "driftlab",
        "version": __version__,
        "name": cfg.name,
        "method": cfg.method.label,
        "tasks": [t.domain.value for t in cfg.tasks],
        "config_hash": cfg.hash,
        "seeds": seeds,
        "outputs": {str(r["seed"]): {"checkpoints": r["checkpoints"]} for r in seed_results},
        "timings": "timings.json",
    }
    manifest.update(extra or {})
    write_json(out / "manifest.json", manifest)
    write_json(out / "timings.json", timings or {str(r["seed"]): {"train": r["seconds"]} for r in seed_results})
    return manifest


def _run_worker(args):
    doc, seed, out, cache = args
    cfg = config.parse(doc, env={})
    r = run_seed(cfg, seed, out, cache)
    r.pop("models")
    r.pop("data")
    return r


class _Inline:
    """Stand-in for a pool when only one job is requested."""

    def map(self, fn, items):
        return map(fn, items)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def pool(jobs):
    """Process pool of single-threaded workers (in-process when ``jobs == 1``)."""
    if jobs <= 1:
        return _Inline()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
    return ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn"))


def run_config(cfg, out_dir, jobs=1, cache_dir=None):
    """Train every seed of ``cfg`` into the run directory ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with pool(min(jobs, len(cfg.seeds))) as p:
        results = list(p.map(_run_worker, [(cfg.raw, s, str(out), cache_dir) for s in cfg.seeds]))
    return write_run(out, cfg, results)


# ----------------------------------------------------------------------------- loading


def verify_run(run_dir, checkpoints=True):
    """Check the stored config against its hash and every checkpoint against its manifest."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise RunError(f"{run_dir} is not a run directory (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != RUN_FORMAT:
        raise RunError(f"{mpath} is not a run manifest")
    doc = json.loads((run_dir / "config.json").read_text())
    if config.config_hash(doc) != manifest["config_hash"]:
        raise RunError(f"{run_dir}/config.json does not match config_hash {manifest['config_hash']}; "
                       "the config was edited after the run")
    if checkpoints:
        for out in manifest["outputs"].values():
            for c in out["checkpoints"]:
                try:
                    verify_checkpoint(run_dir / c)
                except (ChecksumError, FileNotFoundError) as e:
                    raise RunError(f"checkpoint {run_dir / c} failed verification: {e}") from None
    return manifest, doc


def find_runs(root):
    """Run directories at or below ``root``, sorted by path."""
    root = Path(root)
    found = []
    for mpath in sorted(root.rglob("manifest.json")):
        try:
            if json.loads(mpath.read_text()).get("format") == RUN_FORMAT:
                found.append(mpath.parent)
        except json.JSONDecodeError:
            continue
    return found


def run_models(run_dir, seed):
    """First and last checkpoint of one seed of a verified run."""
    manifest, doc = verify_run(run_dir)
    ckpts = manifest["outputs"][str(seed)]["checkpoints"]
    return load_checkpoint(run_dir / ckpts[0]), load_checkpoint(run_dir / ckpts[-1]), doc


# ----------------------------------------------------------------------------- analysis


def stitch_rows(curve):
    return [(c, z, float(r)) for c, z, r in curve.entries()]


def stitch_run(run_dir, out_dir=None):
    """Stitch curve of (task-0 model, final model) for every seed of a run."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    manifest, doc = verify_run(run_dir)
    cfg = config.parse(doc, env={})
    curves = {}
    for seed in manifest["seeds"]:
        f0, f1, _ = run_models(run_dir, seed)
        val0 = synth.make_split(cfg.tasks[0].domain, "val", cfg.val_size, cfg.data_seed_for(seed), cfg.image_size)
        curve = analysis.stitching_curve(f0, f1, val0)
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        write_csv(d / "stitch_curve.csv", [header(manifest["config_hash"], [seed]), f"method={manifest['method']}"],
                  STITCH_COLUMNS, stitch_rows(curve))
        curves[seed] = curve
    return curves


def reestimate(model, datasets, val=None, layers=None, batch_size=8):
    """Re-estimate BN statistics on the union of ``datasets``; return the new model and mIoUs."""
    m = model.clone()
    before = analysis.evaluate(m, val) if val is not None else None
    union = synth.concat(datasets)
    batches = (union.images[i:i + batch_size] for i in range(0, len(union), batch_size))
    normalization.reestimate_population_stats(m, batches, layers)
    match = normalization._as_filter(layers)
    touched = [layer.name for layer in m.norm_layers() if layer.has_stats and match(layer.name)]
    after = analysis.evaluate(m, val) if val is not None else None
    return m, before, after, touched


# ----------------------------------------------------------------------------- report


def _grids(rows):
    """Group metric rows into per-(run, method, seed) grids."""
    groups = {}
    for r in rows:
        key = (r["run"], r["method"], int(r["seed"]))
        g = groups.setdefault(key, {"joint": False, "cells": {}, "domains": {}})
        upto = r["trained_upto"]
        if upto == "joint":
            g["joint"] = True
            upto = 0
        q = int(r["eval_task"])
        cell = (int(upto), q)
        value = float(r["miou"])
        if cell in g["cells"] and g["cells"][cell] != value:
            raise RunError(f"conflicting metric rows for {key} cell {cell}")
        g["cells"][cell] = value
        g["domains"][q] = r["eval_domain"]
    return groups


def report_rows(rows):
    """Mean and sample std across seeds of zero-shot, test mIoU and forgetting per domain.

    ``rows`` are dicts with the metrics.csv columns. Joint (offline) runs only
    report test mIoU.
    """
    values = {}
    for (run, method, _seed), g in sorted(_grids(rows).items()):
        cells, dom = g["cells"], g["domains"]
        tasks = sorted(dom)
        last = max(p for p, _ in cells)

        def put(domain, metric, v):
            values.setdefault((run, method, domain, metric), []).append(v)

        if g["joint"]:
            for q in tasks:
                put(dom[q], "test_miou", cells[(0, q)])
            continue
        for q in tasks:
            if q > 0 and (0, q) in cells:
                put(dom[q], "zero_shot", cells[(0, q)])
            if (q, q) in cells:
                put(dom[q], "test_miou", cells[(q, q)])
            if q < last and (q, q) in cells and (last, q) in cells:
                put(dom[q], "forgetting", analysis.forgetting(cells[(q, q)], cells[(last, q)]))
        diag = [cells[(q, q)] for q in tasks if (q, q) in cells]
        put("all", "learning_accuracy", analysis.learning_accuracy(*diag))
    out = []
    for (run, method, domain, metric), vals in values.items():
        mean, std = analysis.aggregate(vals)
        out.append((run, method, domain, metric, mean, std, len(vals)))
    return out


def collect_metrics(run_dirs):
    rows, hashes, seeds = [], [], set()
    for d in run_dirs:
        manifest, _ = verify_run(d)
        hashes.append(manifest["config_hash"])
        seeds.update(manifest["seeds"])
        rows.extend(read_csv(Path(d) / "metrics.csv")[0])
    return rows, hashes, sorted(seeds)


def write_report(run_dirs, out_path):
    rows, hashes, seeds = collect_metrics(run_dirs)
    combined = config.config_hash(sorted(hashes)) if len(hashes) > 1 else hashes[0]
    report = report_rows(rows)
    write_csv(out_path, header(combined, seeds), REPORT_COLUMNS, report)
    return report
