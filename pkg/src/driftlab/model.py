"""Micro encoder-decoder segmentation network built as an ordered graph of named layers.

Layout for the default widths (16, 32, 64, 64) and 32x32 input::

    stem   conv3x3 s1 -> norm -> relu          16 x 32 x 32
    enc1   conv3x3 s2 -> norm -> relu          32 x 16 x 16
    enc2   conv3x3 s2 -> norm -> relu          64 x  8 x  8
    enc3   conv3x3 s2 -> norm -> relu          64 x  4 x  4
    dec1   up2x -> conv3x3 -> norm -> relu     64 x  8 x  8
    dec2   up2x -> conv3x3 -> norm -> relu     32 x 16 x 16
    head   conv1x1 (+bias) -> up2x             classes x 32 x 32

Every block boundary is a cut point. Rough correspondence to the ResNet-50
DeepLabV3+ layer names: stem ~ conv1/bn1, enc1 ~ layer1, enc2 ~ layer2,
enc3 ~ layer3/4 + ASPP, dec1/dec2 ~ decoder. This is a documented analogy only.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .autodiff import Tensor, no_grad, ops
from .normalization import Mode, NormKind, NormLayer


@dataclass(frozen=True)
class ModelConfig:
    class_count: int = 5
    widths: tuple = (16, 32, 64, 64)
    norm_kind: NormKind = field(default_factory=NormKind)
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if isinstance(self.norm_kind, str):
            object.__setattr__(self, "norm_kind", NormKind.parse(self.norm_kind))
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError("widths must list 4 positive channel counts (stem, enc1, enc2, enc3)")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    @property
    def decoder_widths(self):
        # decoder mirrors the encoder resolutions it returns to
        return (self.widths[2], self.widths[1])

    def to_dict(self):
        return {
            "class_count": self.class_count,
            "widths": list(self.widths),
            "norm": str(self.norm_kind),
            "seed": self.seed,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            class_count=d.get("class_count", 5),
            widths=tuple(d.get("widths", (16, 32, 64, 64))),
            norm_kind=NormKind.parse(d.get("norm", "BatchNorm")),
            seed=d.get("seed", 0),
            in_channels=d.get("in_channels", 3),
        )


class Conv:
    def __init__(self, name, cin, cout, k, stride, padding, bias, seed, dtype=np.float32):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = cin * k * k
        g = rng.stream(seed, "init", name)
        w = g.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def params(self):
        p = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p

    def buffers(self):
        return {}

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self):
        return ("Conv", self.weight.shape, self.stride, self.padding, self.bias is not None)


class _Stateless:
    kind = ""

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def buffers(self):
        return {}

    def describe(self):
        return (self.kind,)


class ReLU(_Stateless):
    kind = "ReLU"

    def __call__(self, x):
        return ops.relu(x)


class Upsample(_Stateless):
    kind = "Upsample"

    def __call__(self, x):
        return ops.bilinear_upsample2x(x)


def _describe(layer):
    if isinstance(layer, NormLayer):
        return ("Norm", str(layer.kind), layer.channels)
    return layer.describe()


class ArchitectureMismatch(ValueError):
    pass


def to_input(images, dtype=np.float32):
    """uint8 NHWC images (or one HWC image) -> float NCHW tensor scaled to [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(dtype).transpose(0, 3, 1, 2) / dtype(127.5) - dtype(1.0)
    return Tensor(np.ascontiguousarray(x))


class SegNet:
    """Ordered graph of named layers grouped into blocks that end at cut points."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        s = cfg.seed
        nk = cfg.norm_kind
        w0, w1, w2, w3 = cfg.widths
        d1, d2 = cfg.decoder_widths

        def conv_block(name, cin, cout, stride, upsample=False):
            layers = [Upsample(f"{name}.up")] if upsample else []
            layers += [
                Conv(f"{name}.conv", cin, cout, 3, stride, 1, False, s),
                NormLayer(f"{name}.norm", nk, cout),
                ReLU(f"{name}.relu"),
            ]
            return name, layers

        self.blocks = [
            conv_block("stem", cfg.in_channels, w0, 1),
            conv_block("enc1", w0, w1, 2),
            conv_block("enc2", w1, w2, 2),
            conv_block("enc3", w2, w3, 2),
            conv_block("dec1", w3, d1, 1, upsample=True),
            conv_block("dec2", d1, d2, 1, upsample=True),
            ("head", [Conv("head.conv", d2, cfg.class_count, 1, 1, 0, True, s), Upsample("head.up")]),
        ]
        self.cut_points = [name for name, _ in self.blocks[:-1]]
        self.zones = {c: ("encoder" if c in ("stem", "enc1", "enc2", "enc3") else "decoder")
                      for c in self.cut_points}
        self.layers = [layer for _, layers in self.blocks for layer in layers]
        names = [layer.name for layer in self.layers]
        assert len(set(names)) == len(names)
        self.frozen = set()
        self.training = True
        self.train()

    # ------------------------------------------------------------------ params

    def named_params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def named_buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def trainable_params(self):
        out = {}
        for layer in self.layers:
            if layer.name not in self.frozen:
                out.update(layer.params())
        return out

    def state_dict(self):
        sd = {k: v.data for k, v in self.named_params().items()}
        sd.update(self.named_buffers())
        return sd

    def load_state_dict(self, sd):
        params = self.named_params()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(sd) != expected:
            missing = sorted(expected - set(sd))
            extra = sorted(set(sd) - expected)
            raise KeyError(f"state dict mismatch; missing={missing} unexpected={extra}")
        for k, t in params.items():
            if sd[k].shape != t.shape:
                raise ValueError(f"{k}: shape {sd[k].shape} != {t.shape}")
            t.data = np.array(sd[k], dtype=t.dtype)
        for k, b in buffers.items():
            b[...] = sd[k]

    def clone(self):
        other = SegNet(self.cfg)
        other.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        other.frozen = set(self.frozen)
        for a, b in zip(self.norm_layers(), other.norm_layers()):
            b.pinned = a.pinned
        return other

    def param_count(self):
        return int(sum(t.data.size for t in self.named_params().values()))

    def norm_layers(self):
        return [layer for layer in self.layers if isinstance(layer, NormLayer)]

    def zero_grad(self):
        for t in self.named_params().values():
            t.grad = None

    def architecture(self):
        return [(layer.name, _describe(layer)) for layer in self.layers]

    def check_compatible(self, other):
        for (na, da), (nb, db) in zip(self.architecture(), other.architecture()):
            if na != nb or da != db:
                raise ArchitectureMismatch(f"architectures diverge at layer {na!r} ({da} vs {nb!r} {db})")
        if len(self.layers) != len(other.layers):
            raise ArchitectureMismatch("architectures have different layer counts")

    # ------------------------------------------------------------------ modes

    def train(self):
        self.training = True
        for layer in self.norm_layers():
            layer.set_mode(Mode.TRAIN)
        return self

    def eval(self):
        self.training = False
        for layer in self.norm_layers():
            layer.set_mode(Mode.INFERENCE)
        return self

    def freeze_prefix(self, upto_cut, freeze_norm_stats=True):
        """Exclude every layer up to and including block ``upto_cut`` from updates."""
        if upto_cut not in self.cut_points:
            raise KeyError(f"unknown cut {upto_cut!r}; cut points: {', '.join(self.cut_points)}")
        for name, layers in self.blocks:
            for layer in layers:
                self.frozen.add(layer.name)
                for t in layer.params().values():
                    t.requires_grad = False
                if freeze_norm_stats and isinstance(layer, NormLayer):
                    layer.pinned = True
                    layer.set_mode(layer.mode)
            if name == upto_cut:
                break

    # ------------------------------------------------------------------ forward

    def _block_index(self, cut):
        if cut not in self.cut_points:
            raise KeyError(f"unknown cut {cut!r}; cut points: {', '.join(self.cut_points)}")
        return self.cut_points.index(cut)

    def run_blocks(self, x, start=0, stop=None):
        """Run blocks ``start`` (inclusive) .. ``stop`` (exclusive) on tensor ``x``."""
        stop = len(self.blocks) if stop is None else stop
        for _, layers in self.blocks[start:stop]:
            for layer in layers:
                x = layer(x)
        return x

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = to_input(x) if np.asarray(x).dtype == np.uint8 else Tensor(np.asarray(x))
        return self.run_blocks(x)

    __call__ = forward

    def forward_with_taps(self, x, taps=()):
        taps = set(taps)
        unknown = taps - set(self.cut_points)
        if unknown:
            raise KeyError(
                f"unknown tap(s) {sorted(unknown)}; cut points: {', '.join(self.cut_points)}"
            )
        if not isinstance(x, Tensor):
            x = to_input(x) if np.asarray(x).dtype == np.uint8 else Tensor(np.asarray(x))
        acts = {}
        for name, layers in self.blocks:
            for layer in layers:
                x = layer(x)
            if name in taps:
                acts[name] = x
        return x, acts

    def predict(self, images, batch_size=32):
        """Argmax masks (N, H, W) in Inference mode; ties go to the lowest class."""
        was_training = self.training
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.forward(to_input(images[i:i + batch_size]))
                out.append(logits.data.argmax(axis=1).astype(np.uint8))
        if was_training:
            self.train()
        return np.concatenate(out, axis=0)


def build_micro_segnet(cfg: ModelConfig) -> SegNet:
    return SegNet(cfg)


def freeze_prefix(model: SegNet, upto_cut: str, freeze_norm_stats: bool = True):
    model.freeze_prefix(upto_cut, freeze_norm_stats)


def forward_with_taps(model: SegNet, batch, taps=()):
    return model.forward_with_taps(batch, taps)


def stitch_forward(f1: SegNet, f0: SegNet, cut: str, batch) -> Tensor:
    """Run ``f1`` through ``cut`` and ``f0`` after it, all norms in Inference mode."""
    f0.check_compatible(f1)
    idx = f1._block_index(cut)
    f1.eval()
    f0.eval()
    x = batch if isinstance(batch, Tensor) else to_input(batch)
    with no_grad():
        mid = f1.run_blocks(x, 0, idx + 1)
        return f0.run_blocks(mid, idx + 1)


def stitch_predict(f1: SegNet, f0: SegNet, cut: str, images, batch_size=32):
    out = []
    for i in range(0, len(images), batch_size):
        logits = stitch_forward(f1, f0, cut, images[i:i + batch_size])
        out.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out, axis=0)
