"""Experiment configuration: JSON schema, validation and typed views."""

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from . import augment
from .autodiff.optim import OptimConfig
from .model import ModelConfig
from .normalization import NormKind
from .synth import DomainId

SEED_ENV = "DRIFTLAB_SEED"
SCHEMA_PATH = Path(__file__).with_name("config.schema.json")


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def load_schema():
    return json.loads(SCHEMA_PATH.read_text())


def validate(doc):
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc) -> str:
    return hashlib.sha1(canonical_json(doc).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class MethodSpec:
    name: str = "FineTune"
    lam: float = 0.0
    memory_size: int = 64
    fisher_batches: int = 32

    def __post_init__(self):
        if self.name not in ("FineTune", "EWC", "Replay", "Offline"):
            raise ConfigError(f"unknown method {self.name!r}", "method/name")
        if self.lam < 0:
            raise ConfigError("EWC lambda must be >= 0", "method/lambda")
        if self.name == "Replay" and self.memory_size < 1:
            raise ConfigError("replay memory_size must be positive", "method/memory_size")

    @property
    def label(self):
        if self.name == "EWC":
            return f"EWC({self.lam:g})"
        if self.name == "Replay":
            return f"Replay({self.memory_size})"
        return self.name


@dataclass(frozen=True)
class TaskSpec:
    domain: DomainId
    optim: OptimConfig
    policy: augment.AugmentPolicy
    freeze_upto: str | None = None
    freeze_norm_stats: bool = True


@dataclass(frozen=True)
class SequenceConfig:
    name: str
    model: ModelConfig
    tasks: tuple
    method: MethodSpec
    train_size: int = 200
    val_size: int = 64
    image_size: int = 32
    data_seed: int | None = None
    eval_every: int = 5
    seeds: tuple = (0,)
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def hash(self):
        return config_hash(self.raw)

    def with_seed(self, seed):
        return SequenceConfig(
            self.name, ModelConfig(self.model.class_count, self.model.widths, self.model.norm_kind,
                                   int(seed), self.model.in_channels),
            self.tasks, self.method, self.train_size, self.val_size, self.image_size,
            self.data_seed, self.eval_every, (int(seed),), self.output_dir, self.raw,
        )

    def data_seed_for(self, seed):
        return int(seed) if self.data_seed is None else int(self.data_seed)


def _per_task(value, k):
    if isinstance(value, list):
        return value[min(k, len(value) - 1)]
    return value


def parse(doc, env=None) -> SequenceConfig:
    """Validate ``doc`` and build a :class:`SequenceConfig`.

    ``DRIFTLAB_SEED`` in ``env`` (default ``os.environ``) replaces the seed list.
    """
    validate(doc)
    doc = copy.deepcopy(doc)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seeds"] = [int(s) for s in env[SEED_ENV].split(",")]
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer or comma list", SEED_ENV) from None
    m = doc.get("model", {})
    try:
        norm = NormKind.parse(m.get("norm", "BatchNorm"))
        model = ModelConfig(m.get("class_count", 5), tuple(m.get("widths", (16, 32, 64, 64))), norm, 0)
    except ValueError as e:
        raise ConfigError(str(e), "model") from None

    o = doc.get("optim", {})
    base_aug = augment.resolve(doc.get("augment", "None"))
    baseline = doc.get("baseline_augment", True)
    tasks = []
    for k, t in enumerate(doc["tasks"]):
        t = {"domain": t} if isinstance(t, str) else t
        merged = {key: _per_task(o[key], k) for key in o}
        merged.update(t.get("optim", {}))
        try:
            optim = OptimConfig(
                base_lr=merged.get("base_lr", 0.05 if k == 0 else 0.005),
                momentum=merged.get("momentum", 0.9),
                weight_decay=merged.get("weight_decay", 3e-3),
                power=merged.get("power", 0.9),
                total_steps=merged.get("steps", 1500 if k == 0 else 1000),
                batch_size=merged.get("batch_size", 8),
            )
        except ValueError as e:
            raise ConfigError(str(e), f"tasks/{k}/optim") from None
        try:
            if "augment" in t:
                policy = augment.resolve(t["augment"])
            else:
                policy = base_aug if k == 0 else augment.PRESETS["None"]
        except ValueError as e:
            raise ConfigError(str(e), f"tasks/{k}/augment") from None
        if baseline:
            policy = augment.BASELINE + policy
        freeze = t.get("freeze") or {}
        tasks.append(TaskSpec(DomainId.parse(t["domain"]), optim, policy,
                              freeze.get("upto"), freeze.get("norm_stats", True)))

    meth = doc.get("method", {})
    method = MethodSpec(meth.get("name", "FineTune"), float(meth.get("lambda", 0.0)),
                        int(meth.get("memory_size", 64)), int(meth.get("fisher_batches", 32)))
    if method.name == "Replay":
        bs = tasks[-1].optim.batch_size
        if bs % 2:
            raise ConfigError("replay needs an even batch size", "optim/batch_size")
        if method.memory_size < bs // 2:
            raise ConfigError(f"replay memory_size must be >= batch_size/2 = {bs // 2}", "method/memory_size")
    if tasks[0].domain is not DomainId.CLEAR:
        raise ConfigError("task 0 must be the Clear domain", "tasks/0/domain")
    d = doc.get("data", {})
    return SequenceConfig(
        name=doc.get("name", "run"),
        model=model,
        tasks=tuple(tasks),
        method=method,
        train_size=d.get("train_size", 200),
        val_size=d.get("val_size", 64),
        image_size=d.get("image_size", 32),
        data_seed=d.get("seed"),
        eval_every=doc.get("eval_every", 5),
        seeds=tuple(doc.get("seeds", [0])),
        output_dir=doc.get("output_dir"),
        raw=doc,
    )


def load(path, env=None) -> SequenceConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"not valid JSON ({e.msg} at line {e.lineno})", str(path)) from None
    return parse(doc, env)
