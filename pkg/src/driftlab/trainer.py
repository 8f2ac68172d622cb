"""Domain-incremental training: per-task SGD, EWC, replay, freezing and joint training."""

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, augment, rng, synth
from .analysis import MetricsTable, evaluate
from .autodiff import SGD, Tensor, ops, poly_lr
from .autodiff.optim import NonFiniteGradient
from .checkpoint import load_checkpoint, save_checkpoint
from .model import SegNet, to_input

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; ``last_state`` holds the last good weights."""

    def __init__(self, message, step, last_state):
        super().__init__(message)
        self.step = step
        self.last_state = last_state


# ----------------------------------------------------------------------------- EWC


@dataclass
class FisherInfo:
    fisher: dict  # name -> diagonal Fisher estimate (ndarray, >= 0)
    anchor: dict  # name -> parameter snapshot theta*


def ewc_prepare(model: SegNet, task, batch_size=8, batches=32, seed=0, tag="fisher") -> FisherInfo:
    """Empirical diagonal Fisher: mean squared mini-batch gradient of the task loss.

    Runs with norms in Inference mode so running statistics are left alone.
    """
    params = model.named_params()
    acc = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
    g = rng.stream(seed, "fisher", tag)
    n = len(task)
    order = np.concatenate([g.permutation(n) for _ in range(-(-batches * batch_size // n))])
    model.eval()
    grad_flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = True
    try:
        for b in range(batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            model.zero_grad()
            loss = ops.softmax_cross_entropy(model(to_input(task.images[idx])), task.masks[idx])
            loss.backward()
            for k, p in params.items():
                acc[k] += np.square(p.grad, dtype=np.float64)
    finally:
        for k, p in params.items():
            p.requires_grad = grad_flags[k]
        model.zero_grad()
    fisher = {k: (v / batches).astype(params[k].dtype) for k, v in acc.items()}
    anchor = {k: p.data.copy() for k, p in params.items()}
    return FisherInfo(fisher, anchor)


def ewc_loss(model: SegNet, fishers, lam) -> Tensor:
    """(lam / 2) * sum_i F_i (theta_i - theta*_i)^2, summed over ``fishers``."""
    if lam < 0:
        raise ValueError(f"EWC lambda must be >= 0, got {lam}")
    if isinstance(fishers, FisherInfo):
        fishers = [fishers]
    params = model.named_params()
    total = None
    for info in fishers:
        for k, p in params.items():
            diff = ops.sub(p, Tensor(info.anchor[k]))
            term = ops.sum(ops.mul(ops.mul(diff, diff), Tensor(info.fisher[k])))
            total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return ops.mul_scalar(total, lam / 2.0)


def ewc_penalty(params, fishers, lam) -> float:
    """Value of :func:`ewc_loss` computed directly on arrays (no tape)."""
    total = 0.0
    for info in fishers:
        for k, p in params.items():
            d = p.data.astype(np.float64) - info.anchor[k]
            total += float(np.sum(info.fisher[k] * d * d))
    return lam / 2.0 * total


def ewc_prox_terms(fishers, names):
    """Summed Fisher and Fisher-weighted anchor per parameter, for :func:`ewc_prox`."""
    f_tot, f_anchor = {}, {}
    for k in names:
        f_tot[k] = sum(info.fisher[k].astype(np.float64) for info in fishers)
        f_anchor[k] = sum(info.fisher[k].astype(np.float64) * info.anchor[k] for info in fishers)
    return f_tot, f_anchor


def ewc_prox(params, terms, lam, lr):
    """Proximal step on the EWC penalty, in place.

    Minimises ``(lam/2) sum_j F_j (t - a_j)^2 + |t - theta|^2 / (2 lr)`` exactly:
    ``theta <- (theta + lr lam sum_j F_j a_j) / (1 + lr lam sum_j F_j)``. Unlike
    an explicit gradient step this stays stable for any ``lam``; for small
    ``lr * lam * F`` the two agree to first order.
    """
    if lam == 0 or lr == 0:
        return
    f_tot, f_anchor = terms
    for k, p in params.items():
        s = lr * lam
        p.data = ((p.data + s * f_anchor[k]) / (1.0 + s * f_tot[k])).astype(p.data.dtype)


# ----------------------------------------------------------------------------- replay


def replay_step_batch(current, memory, batch_size, g, current_idx=None):
    """Half current-task samples, half uniformly drawn memory samples.

    ``current_idx`` selects the current half (drawn uniformly when omitted).
    Returns ``(images, masks)``.
    """
    if batch_size % 2:
        raise ValueError("replay batch size must be even")
    if len(current) == 0:
        raise ValueError("current task is empty")
    if memory is None or len(memory) == 0:
        raise ValueError("replay memory is empty")
    half = batch_size // 2
    if current_idx is None:
        current_idx = g.choice(len(current), size=half, replace=len(current) < half)
    if len(memory) < half:
        warnings.warn(f"replay memory ({len(memory)}) smaller than half batch ({half}); "
                      "sampling with replacement", RuntimeWarning, stacklevel=2)
    mem_idx = g.choice(len(memory), size=half, replace=len(memory) < half)
    images = np.concatenate([current.images[current_idx], memory.images[mem_idx]])
    masks = np.concatenate([current.masks[current_idx], memory.masks[mem_idx]])
    return images, masks


def build_memory(tasks, size, seed, tag="memory"):
    """Uniform subset of the union of earlier tasks' training sets."""
    pool = synth.concat(tasks)
    g = rng.stream(seed, tag)
    idx = np.sort(g.choice(len(pool), size=min(size, len(pool)), replace=False))
    return pool.subset(idx)


# ----------------------------------------------------------------------------- training


@dataclass
class MethodState:
    fishers: list = field(default_factory=list)
    lam: float = 0.0
    memory: object = None
    use_ewc: bool = False


def train_task(model: SegNet, task, optim, policy=None, method_state=None, *, seed=0, tag="task",
               val=None, eval_every=5):
    """Run ``optim.total_steps`` SGD steps on ``task``; return the per-epoch history.

    Mini-batches come from a fresh permutation each epoch (incomplete tail dropped).
    With a replay memory, half of each batch is current data. History rows hold
    the epoch, last step, learning rate, mean train loss and (every
    ``eval_every`` epochs and at the end) the validation mIoU.
    """
    if model.cfg.class_count != task.class_count:
        raise ValueError(f"model has {model.cfg.class_count} classes, task has {task.class_count}")
    policy = policy if policy is not None else augment.PRESETS["None"]
    ms = method_state or MethodState()
    bs = optim.batch_size
    cur_bs = bs // 2 if ms.memory is not None else bs
    per_epoch = max(len(task) // cur_bs, 1)
    history = []
    if optim.total_steps == 0:
        return history
    sgd = SGD(model.trainable_params(), optim)
    trainable = model.trainable_params()
    prox = ewc_prox_terms(ms.fishers, trainable) if ms.use_ewc else None
    mix = rng.stream(seed, "replay", tag)
    step = 0
    epoch = 0
    last_good = {k: v.copy() for k, v in model.state_dict().items()}
    while step < optim.total_steps:
        order = rng.stream(seed, "shuffle", tag, epoch).permutation(len(task))
        losses = []
        for b in range(per_epoch):
            if step >= optim.total_steps:
                break
            idx = order[b * cur_bs:(b + 1) * cur_bs]
            if ms.memory is not None:
                images, masks = replay_step_batch(task, ms.memory, bs, mix, idx)
            else:
                images, masks = task.images[idx], task.masks[idx]
            gens = (rng.stream(seed, "augment", tag, step, i) for i in range(len(images)))
            images, masks = augment.apply_policy(policy, images, masks, gens)

            model.train()
            sgd.zero_grad()
            loss = ops.softmax_cross_entropy(model(to_input(images)), masks)
            value = float(loss.data)
            if ms.use_ewc:
                value += ewc_penalty(trainable, ms.fishers, ms.lam)
            if not np.isfinite(value):
                raise TrainingDiverged(f"{tag}: loss became {value} at step {step}", step, last_good)
            loss.backward()
            lr = poly_lr(step, optim)
            try:
                sgd.step(lr)
            except NonFiniteGradient as e:
                raise TrainingDiverged(f"{tag}: {e}", step, last_good) from None
            if ms.use_ewc:
                ewc_prox(trainable, prox, ms.lam, lr)
            losses.append(value)
            step += 1
        epoch += 1
        last_good = {k: v.copy() for k, v in model.state_dict().items()}
        row = {"epoch": epoch, "step": step, "lr": poly_lr(min(step, optim.total_steps), optim),
               "train_loss": float(np.mean(losses)), "val_miou": None}
        if val is not None and (epoch % eval_every == 0 or step >= optim.total_steps):
            row["val_miou"] = evaluate(model, val)
        history.append(row)
        log.debug("%s epoch %d loss %.4f val %s", tag, epoch, row["train_loss"], row["val_miou"])
    model.eval()
    return history


# ----------------------------------------------------------------------------- sequences


@dataclass
class SequenceResult:
    table: MetricsTable
    models: list
    histories: list
    checkpoint_dirs: list = field(default_factory=list)


def load_data(cfg, seed):
    ds = cfg.data_seed_for(seed)
    train, val = [], []
    for t in cfg.tasks:
        train.append(synth.make_split(t.domain, "train", cfg.train_size, ds, cfg.image_size))
        val.append(synth.make_split(t.domain, "val", cfg.val_size, ds, cfg.image_size))
    return train, val


def task0_key(cfg, seed):
    """Hash of everything that determines the task-0 model of a run."""
    t = cfg.tasks[0]
    payload = {
        "version": __version__,
        "model": cfg.with_seed(seed).model.to_dict(),
        "domain": t.domain.value,
        "optim": t.optim.__dict__,
        "policy": t.policy.to_list(),
        "data": [cfg.train_size, cfg.val_size, cfg.image_size, cfg.data_seed_for(seed)],
        "eval_every": cfg.eval_every,
        "offline": cfg.method.name == "Offline",
    }
    if cfg.method.name == "Offline":
        payload["tasks"] = [x.domain.value for x in cfg.tasks]
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _train_first(cfg, seed, train, val, cache_dir):
    t0 = cfg.tasks[0]
    key = task0_key(cfg, seed)
    cdir = Path(cache_dir) / key if cache_dir else None
    if cdir is not None and (cdir / "manifest.json").exists():
        model = load_checkpoint(cdir)
        history = json.loads((cdir / "history.json").read_text())
        return model, history
    model = SegNet(cfg.with_seed(seed).model)
    if cfg.method.name == "Offline":
        data = synth.concat(train)
    else:
        data = train[0]
    history = train_task(model, data, t0.optim, t0.policy, seed=seed, tag="task0",
                         val=val[0], eval_every=cfg.eval_every)
    if cdir is not None:
        save_checkpoint(model, cdir, {"task0_key": key})
        (cdir / "history.json").write_text(json.dumps(history) + "\n")
    return model, history


def run_sequence(cfg, seed=None, out_dir=None, cache_dir=None, data=None) -> SequenceResult:
    """Train the task sequence of ``cfg`` for one seed and fill the metrics grid.

    ``cache_dir`` lets runs that share an identical task-0 setup reuse the
    trained task-0 model. ``out_dir`` receives one checkpoint per task.
    """
    seed = cfg.seeds[0] if seed is None else int(seed)
    train, val = data if data is not None else load_data(cfg, seed)
    names = [t.domain.value for t in cfg.tasks]
    joint = cfg.method.name == "Offline"
    table = MetricsTable.empty(names, cfg.method.label, seed, joint)
    model, hist = _train_first(cfg, seed, train, val, cache_dir)
    models = [model.clone()]
    histories = [hist]
    for q, v in enumerate(val):
        table.set(0, q, evaluate(model, v))
    ckpts = []

    def persist(k, m):
        if out_dir is not None:
            path = Path(out_dir) / f"task{k}_{names[k] if not joint else 'joint'}"
            save_checkpoint(m, path, {"task": k, "method": cfg.method.label, "seed": seed,
                                      "config_hash": cfg.hash})
            ckpts.append(str(path))

    persist(0, model)
    if joint:
        return SequenceResult(table, models, histories, ckpts)

    state = MethodState()
    for k in range(1, len(cfg.tasks)):
        t = cfg.tasks[k]
        if t.freeze_upto:
            model.freeze_prefix(t.freeze_upto, t.freeze_norm_stats)
        if cfg.method.name == "EWC":
            state.fishers.append(ewc_prepare(model, train[k - 1], t.optim.batch_size,
                                             cfg.method.fisher_batches, seed, f"task{k - 1}"))
            state.lam = cfg.method.lam
            state.use_ewc = True
        elif cfg.method.name == "Replay":
            state.memory = build_memory(train[:k], cfg.method.memory_size, seed, f"memory{k}")
        hist = train_task(model, train[k], t.optim, t.policy, state, seed=seed, tag=f"task{k}",
                          val=val[k], eval_every=cfg.eval_every)
        histories.append(hist)
        for q, v in enumerate(val):
            table.set(k, q, evaluate(model, v))
        models.append(model.clone())
        persist(k, model)
    return SequenceResult(table, models, histories, ckpts)
