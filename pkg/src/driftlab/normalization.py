"""Batch, group and continual normalization plus population-stat re-estimation."""

import enum
import fnmatch
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.tensor import make_result

EPS = 1e-5
EMA_MOMENTUM = 0.1


class Mode(enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"
    STATS_ONLY = "stats_only"


@dataclass(frozen=True)
class NormKind:
    """``batch``, ``group`` or ``continual``; ``groups=None`` means min(8, C)."""

    kind: str = "batch"
    groups: int | None = None

    def __post_init__(self):
        if self.kind not in ("batch", "group", "continual"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.groups is not None and self.groups < 1:
            raise ValueError("groups must be positive")

    def groups_for(self, channels):
        g = self.groups if self.groups is not None else min(8, channels)
        if channels % g:
            raise ValueError(f"groups={g} does not divide channel count {channels}")
        return g

    @classmethod
    def parse(cls, text):
        """Accept ``BatchNorm``, ``GroupNorm(4)``, ``ContinualNorm`` and lowercase short forms."""
        m = re.fullmatch(r"\s*(\w+?)(?:norm)?\s*(?:\((\d+)\))?\s*", text, flags=re.I)
        if not m:
            raise ValueError(f"cannot parse norm kind {text!r}")
        kind = m.group(1).lower()
        aliases = {"batch": "batch", "bn": "batch", "group": "group", "gn": "group",
                   "continual": "continual", "cn": "continual"}
        if kind not in aliases:
            raise ValueError(f"cannot parse norm kind {text!r}")
        groups = int(m.group(2)) if m.group(2) else None
        return cls(aliases[kind], groups)

    def __str__(self):
        name = {"batch": "BatchNorm", "group": "GroupNorm", "continual": "ContinualNorm"}[self.kind]
        return name if self.groups is None else f"{name}({self.groups})"


@dataclass
class NormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Tensor
    beta: Tensor
    eps: float = EPS
    momentum: float = EMA_MOMENTUM
    mode: Mode = Mode.TRAIN
    # cumulative averaging (m_t = 1/t) during re-estimation
    cumulative: bool = False
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels, dtype=np.float32, **kw):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            **kw,
        )

    @property
    def channels(self):
        return self.running_mean.shape[0]

    def reset_stats(self):
        self.running_mean[...] = 0
        self.running_var[...] = 1
        self.num_batches = 0


def update_running_stats(state: NormState, batch_mean, batch_var):
    """EMA update (or cumulative mean when ``state.cumulative``); ``batch_var`` is unbiased."""
    if state.mode is Mode.INFERENCE:
        raise RuntimeError("running statistics are read-only in Inference mode")
    state.num_batches += 1
    m = 1.0 / state.num_batches if state.cumulative else state.momentum
    dt = state.running_mean.dtype
    state.running_mean[...] = (1 - m) * state.running_mean + m * np.asarray(batch_mean, dtype=dt)
    state.running_var[...] = (1 - m) * state.running_var + m * np.asarray(batch_var, dtype=dt)


def _normalize_backward(g, xhat, inv_std, axes, count):
    # d/dx of (x - mean) * inv_std for moments taken over ``axes``
    gsum = g.sum(axis=axes, keepdims=True)
    gxsum = (g * xhat).sum(axis=axes, keepdims=True)
    return (inv_std / count) * (count * g - gsum - xhat * gxsum)


def batch_norm_forward(x: Tensor, state: NormState) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batch norm expects NCHW with C={state.channels}, got {x.shape}")
    gamma, beta = state.gamma, state.beta
    c = state.channels
    data = x.data
    dt = data.dtype

    if state.mode is Mode.INFERENCE:
        inv_std = (1.0 / np.sqrt(state.running_var.astype(dt) + dt.type(state.eps))).astype(dt)
        xhat = (data - state.running_mean.astype(dt).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            gx = g * (gamma.data * inv_std).reshape(1, c, 1, 1)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), backward)

    count = data.shape[0] * data.shape[2] * data.shape[3]
    if count < 2:
        raise ValueError("degenerate batch: batch norm needs N*H*W >= 2 in Train mode")
    axes = (0, 2, 3)
    mu = data.mean(axis=axes, keepdims=True)
    centred = data - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = centred * inv_std
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    update_running_stats(state, mu.reshape(c), var.reshape(c) * (count / (count - 1)))

    if state.mode is Mode.STATS_ONLY:
        return Tensor(out)

    def backward(g):
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        gx = _normalize_backward(dxhat, xhat, inv_std, axes, count)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), backward)


def group_norm_forward(x: Tensor, groups: int, gamma: Tensor | None = None,
                       beta: Tensor | None = None, eps: float = EPS) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"groups={groups} does not divide channel count {c}")
    data = x.data
    dt = data.dtype
    grouped = data.reshape(n, groups, -1)
    count = grouped.shape[2]
    mu = grouped.mean(axis=2, keepdims=True)
    centred = grouped - mu
    var = (centred * centred).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat_g = centred * inv_std
    xhat = xhat_g.reshape(n, c, h, w)
    affine = gamma is not None
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1) if affine else xhat

    def backward(g):
        dxhat = g * gamma.data.reshape(1, c, 1, 1) if affine else g
        gx = _normalize_backward(dxhat.reshape(n, groups, -1), xhat_g, inv_std, 2, count)
        gx = gx.reshape(n, c, h, w)
        if not affine:
            return (gx,)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    parents = (x, gamma, beta) if affine else (x,)
    return make_result(out, parents, backward)


def continual_norm_forward(x: Tensor, state: NormState, groups: int) -> Tensor:
    """Group normalization without affine, then batch normalization owning affine and stats."""
    return batch_norm_forward(group_norm_forward(x, groups, eps=state.eps), state)


class NormLayer:
    """A normalization layer of a given :class:`NormKind` over ``channels`` channels."""

    def __init__(self, name, kind: NormKind, channels, dtype=np.float32):
        self.name = name
        self.kind = kind
        self.channels = channels
        self.groups = kind.groups_for(channels) if kind.kind != "batch" else None
        self.state = NormState.create(channels, dtype=dtype)
        # pinned layers stay in Inference mode regardless of model.train()
        self.pinned = False
        if kind.kind == "group":
            self.state.mode = Mode.TRAIN  # GN ignores mode; stats unused

    @property
    def has_stats(self):
        return self.kind.kind != "group"

    @property
    def mode(self):
        return self.state.mode

    def set_mode(self, mode: Mode):
        self.state.mode = Mode.INFERENCE if self.pinned and mode is Mode.TRAIN else mode

    def params(self):
        return {f"{self.name}.weight": self.state.gamma, f"{self.name}.bias": self.state.beta}

    def buffers(self):
        if not self.has_stats:
            return {}
        return {
            f"{self.name}.running_mean": self.state.running_mean,
            f"{self.name}.running_var": self.state.running_var,
        }

    def __call__(self, x):
        if self.kind.kind == "batch":
            return batch_norm_forward(x, self.state)
        if self.kind.kind == "continual":
            return continual_norm_forward(x, self.state, self.groups)
        return group_norm_forward(x, self.groups, self.state.gamma, self.state.beta, self.state.eps)


def _as_filter(layer_filter):
    if layer_filter is None:
        return lambda name: True
    if callable(layer_filter):
        return layer_filter
    patterns = [layer_filter] if isinstance(layer_filter, str) else list(layer_filter)
    return lambda name: any(fnmatch.fnmatchcase(name, p) for p in patterns)


def reestimate_population_stats(model, batches, layer_filter=None):
    """Re-estimate running statistics of the selected stat-bearing norm layers.

    Selected layers are reset to (mean 0, var 1) and then accumulate a cumulative
    average of batch moments over one pass through ``batches`` (iterable of NCHW
    arrays or (image, mask) pairs). Unselected layers run in Inference mode. No
    weight is touched. The model is left in Inference mode.
    """
    match = _as_filter(layer_filter)
    layers = [layer for layer in model.norm_layers() if layer.has_stats]
    selected = [layer for layer in layers if match(layer.name)]
    if not selected:
        available = ", ".join(layer.name for layer in layers) or "<none>"
        raise ValueError(f"layer filter matches no batch-norm layer; available: {available}")
    chosen = {id(layer) for layer in selected}

    it = iter(batches)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("re-estimation stream is empty") from None

    model.eval()
    for layer in selected:
        layer.state.reset_stats()
        layer.state.cumulative = True
        layer.state.mode = Mode.STATS_ONLY
    try:
        with no_grad():
            for batch in _chain(first, it):
                x = batch[0] if isinstance(batch, tuple) else batch
                model.forward(x)
    finally:
        for layer in layers:
            if id(layer) in chosen:
                layer.state.cumulative = False
            layer.state.mode = Mode.INFERENCE
    return model


def _chain(first, rest):
    yield first
    yield from rest
