"""Pixel-level and geometric augmentation pipelines.

Every transform works on float64 HxWx3 images in 8-bit units and returns
float64; :func:`apply_policy` quantizes once at the end of the pipeline so
chained transforms do not accumulate rounding bias. Geometric transforms
(flip, scale) move image and mask together; pixel transforms never touch
the mask.
"""

from dataclasses import dataclass, field

import numpy as np

from .imgstats import hsv_to_rgb, rgb_to_hsv, to_gray

GEOMETRIC = frozenset({"HFlip", "RandomScale"})


# ----------------------------------------------------------------------------- pixel ops


def _brightness(img, f):
    return img * f


def _contrast(img, f):
    m = to_gray(img).mean()
    return m + f * (img - m)


def _saturation(img, f):
    gray = to_gray(img)[..., None]
    return gray + f * (img - gray)


def _hue(img, offset):
    hsv = rgb_to_hsv(np.clip(img, 0, 255))
    hsv[..., 0] = (hsv[..., 0] + offset) % 180.0
    return hsv_to_rgb(hsv)


def color_jitter(img, b, c, s, h, rng):
    """Random brightness/contrast/saturation/hue in a per-call shuffled order."""
    if min(b, c, s, h) < 0 or h > 0.5:
        raise ValueError("jitter factors must be >= 0 and hue <= 0.5")
    img = np.asarray(img, dtype=np.float64)
    steps = [
        (_brightness, rng.uniform(max(0.0, 1 - b), 1 + b), b > 0),
        (_contrast, rng.uniform(max(0.0, 1 - c), 1 + c), c > 0),
        (_saturation, rng.uniform(max(0.0, 1 - s), 1 + s), s > 0),
        (_hue, rng.uniform(-h, h) * 180.0, h > 0),
    ]
    for i in rng.permutation(len(steps)):
        fn, value, active = steps[i]
        if active:
            img = np.clip(fn(img, value), 0, 255)
    return img


def channel_shuffle(img, p, rng):
    if not 0 <= p <= 1:
        raise ValueError("probability must lie in [0, 1]")
    if rng.random() < p:
        return np.asarray(img)[..., rng.permutation(3)]
    return img


def blur_sigma(k):
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel(k):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"blur kernel size must be odd and positive, got {k}")
    sigma = blur_sigma(k)
    x = np.arange(k) - (k - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img, k, rng=None):
    """Separable Gaussian blur with mirror padding (edge pixel not repeated)."""
    img = np.asarray(img, dtype=np.float64)
    kern = gaussian_kernel(k)
    r = k // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = img.shape[axis]
        acc = np.zeros_like(img)
        for t, wt in enumerate(kern):
            acc += wt * np.take(padded, np.arange(t, t + n), axis=axis)
        out = acc
    return out


def gauss_noise(img, var, rng):
    img = np.asarray(img, dtype=np.float64)
    return np.clip(img + rng.normal(0.0, np.sqrt(var), size=img.shape), 0, 255)


# ----------------------------------------------------------------------------- geometry


def hflip(img, mask):
    return img[:, ::-1], mask[:, ::-1]


def _sample_coords(n, scale, offset):
    # output pixel i samples the source at (i + 0.5) / scale + offset - 0.5
    src = (np.arange(n) + 0.5) / scale + offset - 0.5
    return np.clip(src, 0, n - 1)


def random_scale(img, mask, scale, rng):
    """Zoom by ``scale`` about a random window; bilinear image, nearest mask."""
    h, w = mask.shape
    span_y, span_x = h / scale, w / scale
    oy = rng.uniform(0, max(h - span_y, 0.0)) if scale >= 1 else (h - span_y) / 2
    ox = rng.uniform(0, max(w - span_x, 0.0)) if scale >= 1 else (w - span_x) / 2
    sy = _sample_coords(h, scale, oy)
    sx = _sample_coords(w, scale, ox)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    ny = np.minimum(np.floor(sy + 0.5).astype(np.int64), h - 1)
    nx = np.minimum(np.floor(sx + 0.5).astype(np.int64), w - 1)
    return out, mask[ny][:, nx]


# ----------------------------------------------------------------------------- policies


@dataclass(frozen=True)
class Transform:
    op: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.op not in _DEFAULTS:
            raise ValueError(f"unknown augmentation op {self.op!r}; choose from {sorted(_DEFAULTS)}")
        merged = {**_DEFAULTS[self.op], **self.params}
        unknown = set(self.params) - set(_DEFAULTS[self.op])
        if unknown:
            raise ValueError(f"{self.op}: unknown parameters {sorted(unknown)}")
        object.__setattr__(self, "params", merged)
        _validate(self.op, merged)

    def to_dict(self):
        return {"op": self.op, "params": dict(self.params)}


_DEFAULTS = {
    "ColorJitter": {"brightness": 0.2, "contrast": 0.5, "saturation": 0.5, "hue": 0.2},
    "ChannelShuffle": {"p": 0.5},
    "GaussianBlur": {"kmin": 3, "kmax": 5},
    "GaussNoise": {"vmin": 30.0, "vmax": 60.0},
    "HFlip": {"p": 0.5},
    "RandomScale": {"smin": 1.0, "smax": 1.25},
}


def _validate(op, p):
    if "p" in p and not 0 <= p["p"] <= 1:
        raise ValueError(f"{op}: probability {p['p']} outside [0, 1]")
    if op == "GaussianBlur":
        if p["kmin"] % 2 == 0 or p["kmax"] % 2 == 0 or p["kmin"] > p["kmax"] or p["kmin"] < 1:
            raise ValueError(f"{op}: kmin/kmax must be odd with kmin <= kmax")
    if op == "GaussNoise" and not 0 <= p["vmin"] <= p["vmax"]:
        raise ValueError(f"{op}: need 0 <= vmin <= vmax")
    if op == "RandomScale" and not 0 < p["smin"] <= p["smax"]:
        raise ValueError(f"{op}: need 0 < smin <= smax")
    if op == "ColorJitter":
        if min(p.values()) < 0 or p["hue"] > 0.5:
            raise ValueError(f"{op}: factors must be >= 0 and hue <= 0.5")


@dataclass(frozen=True)
class AugmentPolicy:
    transforms: tuple = ()
    name: str = "custom"

    @classmethod
    def from_list(cls, items, name="custom"):
        out = []
        for item in items:
            if isinstance(item, Transform):
                out.append(item)
            else:
                out.append(Transform(item["op"], dict(item.get("params", {}))))
        return cls(tuple(out), name)

    def to_list(self):
        return [t.to_dict() for t in self.transforms]

    def __add__(self, other):
        return AugmentPolicy(self.transforms + other.transforms, f"{self.name}+{other.name}")

    def __len__(self):
        return len(self.transforms)


BASELINE = AugmentPolicy((Transform("HFlip"), Transform("RandomScale")), "Baseline")

PRESETS = {
    "None": AugmentPolicy((), "None"),
    "Distort": AugmentPolicy((Transform("ColorJitter"), Transform("ChannelShuffle", {"p": 0.5})), "Distort"),
    "Gaus": AugmentPolicy((Transform("GaussianBlur", {"kmin": 3, "kmax": 5}),), "Gaus"),
    "Noise": AugmentPolicy((Transform("GaussNoise", {"vmin": 30.0, "vmax": 60.0}),), "Noise"),
    # substitute for a learned policy: the jitter magnitudes doubled
    "StrongColor": AugmentPolicy(
        (
            Transform("ColorJitter", {"brightness": 0.4, "contrast": 1.0, "saturation": 1.0, "hue": 0.4}),
            Transform("ChannelShuffle", {"p": 0.5}),
        ),
        "StrongColor",
    ),
}


def preset(name) -> AugmentPolicy:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown augmentation preset {name!r}; choose from {sorted(PRESETS)}") from None


def resolve(spec) -> AugmentPolicy:
    """Policy from a preset name, a list of {op, params}, or a policy."""
    if isinstance(spec, AugmentPolicy):
        return spec
    if spec is None:
        return PRESETS["None"]
    if isinstance(spec, str):
        return preset(spec)
    return AugmentPolicy.from_list(spec)


def _apply_one(t, img, mask, rng):
    p = t.params
    if t.op == "HFlip":
        return hflip(img, mask) if rng.random() < p["p"] else (img, mask)
    if t.op == "RandomScale":
        return random_scale(img, mask, rng.uniform(p["smin"], p["smax"]), rng)
    if t.op == "ColorJitter":
        return color_jitter(img, p["brightness"], p["contrast"], p["saturation"], p["hue"], rng), mask
    if t.op == "ChannelShuffle":
        return channel_shuffle(img, p["p"], rng), mask
    if t.op == "GaussianBlur":
        k = int(rng.choice(np.arange(p["kmin"], p["kmax"] + 1, 2)))
        return gaussian_blur(img, k), mask
    return gauss_noise(img, rng.uniform(p["vmin"], p["vmax"]), rng), mask


def apply_sample(policy, img, mask, rng):
    """One image through the policy; returns uint8 image and mask."""
    x = np.asarray(img, dtype=np.float64)
    for t in policy.transforms:
        x, mask = _apply_one(t, x, mask, rng)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8), np.ascontiguousarray(mask)


def apply_policy(policy, images, masks, rngs):
    """Apply ``policy`` to a batch; ``rngs`` yields one generator per sample.

    An empty policy returns the inputs unchanged.
    """
    if not len(policy):
        return images, masks
    out_i = np.empty_like(images)
    out_m = np.empty_like(masks)
    for k, g in zip(range(len(images)), rngs):
        out_i[k], out_m[k] = apply_sample(policy, images[k], masks[k], g)
    return out_i, out_m
