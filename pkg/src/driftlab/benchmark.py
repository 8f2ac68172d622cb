"""The acceptance benchmark: a fixed set of method arms over several seeds.

Arms that share a task-0 setup reuse one task-0 model per seed. Phase 1
trains those models into a content-addressed cache, phase 2 trains and
analyses every (arm, seed) pair against it. Each arm ends up as a run
directory under ``arms/``; the benchmark root gets aggregate CSVs and a
manifest.
"""

import copy
import json
import logging
import time
from pathlib import Path

from . import __version__, analysis, augment, config, rng, runs, synth, trainer
from .imgstats import amplitude_spectrum, highfreq_energy_ratio

log = logging.getLogger(__name__)

BENCH_FORMAT = "driftlab-benchmark"
EWC_LAMBDA = 1e5
REPLAY_MEMORY = 64
DEFAULT_SEEDS = (0, 1, 2)


def _two_task(domain, norm="BatchNorm", aug="None", method=None, freeze=None):
    second = {"domain": domain}
    if freeze:
        second["freeze"] = freeze
    doc = {"model": {"norm": norm}, "tasks": ["Clear", second], "augment": aug}
    if method:
        doc["method"] = method
    return doc


ARMS = {
    "FT-Night": _two_task("NightLike"),
    "Distort-Night": _two_task("NightLike", aug="Distort"),
    "CN-Night": _two_task("NightLike", norm="ContinualNorm"),
    "Combined-Night": _two_task("NightLike", norm="ContinualNorm", aug="Distort"),
    "EWC-Night": _two_task("NightLike", method={"name": "EWC", "lambda": EWC_LAMBDA}),
    "EWC0-Night": _two_task("NightLike", method={"name": "EWC", "lambda": 0.0}),
    "Replay-Night": _two_task("NightLike", method={"name": "Replay", "memory_size": REPLAY_MEMORY}),
    "Freeze-Night": _two_task("NightLike", freeze={"upto": "stem", "norm_stats": True}),
    "FT-Fog": _two_task("FogLike"),
    "Distort-Fog": _two_task("FogLike", aug="Distort"),
    "FT-Rain-Night": {"model": {"norm": "BatchNorm"}, "tasks": ["Clear", "RainLike", "NightLike"]},
    "Combined-Rain-Night": {"model": {"norm": "ContinualNorm"}, "tasks": ["Clear", "RainLike", "NightLike"],
                            "augment": "Distort"},
}
# arms whose BN statistics are re-estimated on the union of their tasks
REESTIMATE_ARMS = ("FT-Night", "Distort-Night")
REESTIMATE_COLUMNS = ["layers", "miou_before", "miou_after", "delta"]


def arm_doc(name, seeds, overrides=None):
    doc = copy.deepcopy(ARMS[name])
    doc["name"] = name
    doc["seeds"] = [int(s) for s in seeds]
    doc.update(copy.deepcopy(overrides or {}))
    return doc


def arm_config(name, seeds, overrides=None):
    return config.parse(arm_doc(name, seeds, overrides), env={})


# ----------------------------------------------------------------------------- workers


def _task0_job(args):
    name, seed, root, overrides, seeds = args
    cfg = arm_config(name, seeds, overrides)
    train, val = trainer.load_data(cfg, seed)
    t = time.perf_counter()
    trainer._train_first(cfg, seed, train, val, Path(root) / "cache")
    return name, seed, time.perf_counter() - t


def _arm_job(args):
    name, seed, root, overrides, seeds = args
    cfg = arm_config(name, seeds, overrides)
    out = Path(root) / "arms" / name
    r = runs.run_seed(cfg, seed, out, Path(root) / "cache")
    models, (train, val) = r.pop("models"), r.pop("data")
    t = time.perf_counter()
    curve = analysis.stitching_curve(models[0], models[-1], val[0])
    r["stitch"] = runs.stitch_rows(curve)
    if name in REESTIMATE_ARMS:
        _, before, after, _ = runs.reestimate(models[-1], train, val[0])
        r["reestimate"] = ("*", before, after, after - before)
    r["analysis_seconds"] = time.perf_counter() - t
    return name, r


def run_benchmark(out_dir, seeds=DEFAULT_SEEDS, jobs=1, arms=None, overrides=None, progress=None):
    """Train and analyse every arm for every seed; write all artifacts under ``out_dir``.

    ``overrides`` patches each arm's config document (tests use it to shrink
    the budget). Returns the benchmark manifest.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    arms = list(arms or ARMS)
    seeds = [int(s) for s in seeds]
    t_start = time.perf_counter()
    timings = {"task0": {}, "arms": {}}

    firsts = {}
    for name in arms:
        cfg = arm_config(name, seeds, overrides)
        for seed in seeds:
            firsts.setdefault((trainer.task0_key(cfg, seed), seed), (name, seed, str(root), overrides, seeds))
    phase1 = sorted(firsts.values(), key=lambda a: (a[1], a[0]))
    phase2 = [(name, seed, str(root), overrides, seeds) for seed in seeds for name in arms]
    results = {name: {} for name in arms}
    with runs.pool(jobs) as p:
        for name, seed, dt in p.map(_task0_job, phase1):
            timings["task0"][f"{name}/seed{seed}"] = dt
            if progress:
                progress(f"task0 via {name} seed {seed}: {dt:.0f}s")
        for name, r in p.map(_arm_job, phase2):
            results[name][r["seed"]] = r
            timings["arms"][f"{name}/seed{r['seed']}"] = {"train": r["seconds"], "analysis": r["analysis_seconds"]}
            if progress:
                progress(f"{name} seed {r['seed']}: {r['seconds']:.0f}s + {r['analysis_seconds']:.0f}s")

    for name in arms:
        write_arm(root / "arms" / name, arm_config(name, seeds, overrides), [results[name][s] for s in seeds])
    manifest = write_aggregate(root, arms, seeds, overrides)
    timings["total_seconds"] = time.perf_counter() - t_start
    runs.write_json(root / "timings.json", timings)
    return manifest


def write_arm(out, cfg, seed_results):
    runs.write_run(out, cfg, seed_results, timings={
        str(r["seed"]): {"train": r["seconds"], "analysis": r["analysis_seconds"]} for r in seed_results})
    for r in seed_results:
        head = [runs.header(cfg.hash, [r["seed"]]), f"method={cfg.method.label}"]
        runs.write_csv(out / f"seed{r['seed']}" / "stitch_curve.csv", head, runs.STITCH_COLUMNS, r["stitch"])
        if "reestimate" in r:
            runs.write_csv(out / f"seed{r['seed']}" / "reestimate.csv", head, REESTIMATE_COLUMNS,
                           [r["reestimate"]])


def bench_hash(arms, seeds, overrides):
    return config.config_hash({"arms": {n: arm_doc(n, seeds, overrides) for n in arms}})


def write_aggregate(root, arms, seeds, overrides=None):
    """Benchmark-level CSVs (metrics, stitch curves, re-estimation, report) and manifest."""
    root = Path(root)
    h = bench_hash(arms, seeds, overrides)
    head = runs.header(h, seeds)
    run_dirs = [root / "arms" / n for n in arms]
    metric_rows, _, _ = runs.collect_metrics(run_dirs)
    runs.write_csv(root / "metrics.csv", [head, runs.MIOU_NOTE], runs.METRIC_COLUMNS,
                   [[r[c] for c in runs.METRIC_COLUMNS] for r in metric_rows])
    stitch, reest = [], []
    for n in arms:
        for s in seeds:
            d = root / "arms" / n / f"seed{s}"
            for r in runs.read_csv(d / "stitch_curve.csv")[0]:
                stitch.append((n, s, r["cut_name"], r["zone"], r["relative_miou"]))
            if (d / "reestimate.csv").exists():
                for r in runs.read_csv(d / "reestimate.csv")[0]:
                    reest.append((n, s, r["miou_before"], r["miou_after"], r["delta"]))
    runs.write_csv(root / "stitch_curves.csv", head, ["run", "seed"] + runs.STITCH_COLUMNS, stitch)
    runs.write_csv(root / "reestimate.csv", head, ["run", "seed", "miou_before", "miou_after", "delta"], reest)
    runs.write_csv(root / "report.csv", head, runs.REPORT_COLUMNS, runs.report_rows(metric_rows))
    manifest = {
        "format": BENCH_FORMAT,
        "tool": "driftlab",
        "version": __version__,
        "config_hash": h,
        "seeds": seeds,
        "arms": {n: f"arms/{n}" for n in arms},
        "overrides": overrides or {},
        "timings": "timings.json",
    }
    runs.write_json(root / "manifest.json", manifest)
    return manifest


# ----------------------------------------------------------------------------- reading results


class BenchResults:
    """Read-only view over a finished benchmark directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        if self.manifest.get("format") != BENCH_FORMAT:
            raise runs.RunError(f"{self.root} is not a benchmark directory")
        self.seeds = self.manifest["seeds"]
        rows = runs.read_csv(self.root / "metrics.csv")[0]
        self.grids = {}
        for r in rows:
            g = self.grids.setdefault((r["run"], int(r["seed"])), {})
            g[(int(r["trained_upto"]), int(r["eval_task"]))] = float(r["miou"])

    @property
    def arms(self):
        return list(self.manifest["arms"])

    def cell(self, arm, seed, p, q):
        return self.grids[(arm, seed)][(p, q)]

    def last(self, arm, seed):
        return max(p for p, _ in self.grids[(arm, seed)])

    def forgetting(self, arm, seed, q=0):
        return analysis.forgetting(self.cell(arm, seed, q, q), self.cell(arm, seed, self.last(arm, seed), q))

    def mean_forgetting(self, arm, q=0):
        return analysis.aggregate([self.forgetting(arm, s, q) for s in self.seeds])[0]

    def learning_accuracy(self, arm, seed):
        k = self.last(arm, seed)
        return analysis.learning_accuracy(*[self.cell(arm, seed, i, i) for i in range(k + 1)])

    def stitch(self, arm, seed):
        rows = runs.read_csv(self.root / "arms" / arm / f"seed{seed}" / "stitch_curve.csv")[0]
        return [(r["cut_name"], r["zone"], float(r["relative_miou"])) for r in rows]

    def reestimate_delta(self, arm, seed):
        rows = runs.read_csv(self.root / "arms" / arm / f"seed{seed}" / "reestimate.csv")[0]
        return float(rows[0]["delta"])

    def checkpoints(self):
        """(path, seed) for every checkpoint in the benchmark, arms and task-0 cache alike."""
        out = []
        for mpath in sorted(self.root.rglob("manifest.json")):
            m = json.loads(mpath.read_text())
            if m.get("format") == "driftlab-checkpoint":
                out.append((mpath.parent, int(m["seed"])))
        return out


def blur_stream_ratios(n=64, seed=0, size=32):
    """High-frequency ratio of the augmented task-0 stream with and without the blur preset."""
    task = synth.make_split("Clear", "train", n, seed, size)
    out = {}
    for name, policy in (("baseline", augment.BASELINE), ("baseline+Gaus", augment.BASELINE + augment.PRESETS["Gaus"])):
        gens = (rng.stream(seed, "augment", "task0", 0, i) for i in range(n))
        images, _ = augment.apply_policy(policy, task.images, task.masks, gens)
        out[name] = highfreq_energy_ratio(amplitude_spectrum(images), 0.5)
    return out
