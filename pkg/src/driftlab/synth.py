"""Procedural segmentation scenes with weather-analog domain shifts.

A Clear scene is a smooth textured background (class 0) with 2-6 coloured
objects drawn from disk (1), rectangle (2), triangle (3) and stripe (4). Each
class has a preferred hue, so a model trained on Clear can lean on colour; the
other domains re-render the same geometry with shifted pixel statistics:

    NightLike  value x0.3, saturation x0.6, hue +30, additive noise (sigma 6)
    FogLike    35 % blend toward light grey (235), contrast x0.8
    RainLike   brightness x1.2, Gaussian noise sigma 18, 3-8 bright diagonal streaks
    SnowLike   brightness x1.35, 100-300 white speckles, contrast x0.7

Masks are identical across domains for a given seed.
"""

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .imgstats import hsv_to_rgb, rgb_to_hsv, to_gray

CLASS_NAMES = ("background", "disk", "rectangle", "triangle", "stripe")
CLASS_COUNT = len(CLASS_NAMES)
# preferred hue per object class on the 0-180 scale
CLASS_HUES = {1: 0.0, 2: 45.0, 3: 90.0, 4: 135.0}
HUE_SPREAD = 12.0
VAL_SEED_OFFSET = 1_000_000
MIN_SIZE = 16


class DomainId(str, enum.Enum):
    CLEAR = "Clear"
    NIGHT = "NightLike"
    FOG = "FogLike"
    RAIN = "RainLike"
    SNOW = "SnowLike"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for d in cls:
            if d.value.lower() == str(value).lower() or d.name.lower() == str(value).lower():
                return d
        raise ValueError(f"unknown domain {value!r}; choose from {[d.value for d in cls]}")


# ----------------------------------------------------------------------------- clear render


def _background(g, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    hue = g.uniform(0, 180)
    sat = g.uniform(15, 60)
    base_v = g.uniform(120, 175)
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = g.uniform(0.5, 3.0, size=2)
        phase = g.uniform(0, 2 * np.pi)
        tex += g.uniform(6, 14) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    tex += g.uniform(-20, 20) * (yy - 0.5) + g.uniform(-20, 20) * (xx - 0.5)
    hsv = np.stack([np.full((size, size), hue), np.full((size, size), sat), base_v + tex], axis=-1)
    hsv[..., 2] = np.clip(hsv[..., 2], 0, 255)
    return hsv_to_rgb(hsv)


def _object_color(g, cls):
    hue = (CLASS_HUES[cls] + g.uniform(-HUE_SPREAD, HUE_SPREAD)) % 180.0
    return hsv_to_rgb(np.array([hue, g.uniform(150, 240), g.uniform(150, 245)]))


def _shape_mask(g, cls, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    s = size / 32.0
    if cls == 1:
        r = g.uniform(6.0, 10.0) * s
        cy, cx = g.uniform(r, size - r, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:
        h, w = g.uniform(9.0, 18.0, size=2) * s
        y0 = g.uniform(0, size - h)
        x0 = g.uniform(0, size - w)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if cls == 3:
        # upright isosceles triangle
        base = g.uniform(14.0, 24.0) * s
        height = g.uniform(12.0, 20.0) * s
        cx = g.uniform(base / 2, size - base / 2)
        y0 = g.uniform(0, size - height)
        rel = (yy - y0) / height
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * base / 2)
    # stripe: a band across the image at a random angle
    angle = g.uniform(0, np.pi)
    width = g.uniform(5.0, 7.0) * s
    off = g.uniform(-0.3, 0.3) * size
    dist = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle) - off
    return np.abs(dist) <= width / 2


def _render_clear(seed, size):
    g = rng.stream(seed, "scene")
    img = _background(g, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    count = int(g.integers(2, 7))
    classes = g.integers(1, CLASS_COUNT, size=count)
    for cls in classes:
        cls = int(cls)
        region = _shape_mask(g, cls, size)
        colour = _object_color(g, cls)
        shade = 1.0 + g.uniform(-0.08, 0.08) * ((np.mgrid[0:size, 0:size][0] / size) - 0.5)
        img[region] = (colour[None, :] * shade[region][:, None])
        mask[region] = cls
    return np.clip(img, 0, 255), mask


# ----------------------------------------------------------------------------- domains


def _contrast(img, factor):
    m = to_gray(img).mean()
    return m + factor * (img - m)


def _night(img, g):
    hsv = rgb_to_hsv(img)
    hsv[..., 2] *= 0.3
    hsv[..., 1] *= 0.6
    hsv[..., 0] = (hsv[..., 0] + 30.0) % 180.0
    out = hsv_to_rgb(hsv)
    return out + g.normal(0, 6.0, size=out.shape)


def _fog(img, g):
    out = 0.65 * img + 0.35 * 235.0
    return _contrast(out, 0.8)


def _rain(img, g):
    size = img.shape[0]
    out = img * 1.2 + g.normal(0, 18.0, size=img.shape)
    for _ in range(int(g.integers(3, 9))):
        length = int(g.integers(size // 4, size // 2 + 1))
        y = int(g.integers(0, size))
        x = int(g.integers(0, size))
        for t in range(length):
            yy, xx = y + t, x + t // 2
            if 0 <= yy < size and 0 <= xx < size:
                out[yy, xx] = 0.3 * out[yy, xx] + 0.7 * 235.0
    return out


def _snow(img, g):
    size = img.shape[0]
    out = np.clip(img * 1.35, 0, 255)
    n = int(g.integers(100, 301))
    ys = g.integers(0, size, size=n)
    xs = g.integers(0, size, size=n)
    out[ys, xs] = 255.0
    return _contrast(out, 0.7)


_TRANSFORMS = {
    DomainId.NIGHT: _night,
    DomainId.FOG: _fog,
    DomainId.RAIN: _rain,
    DomainId.SNOW: _snow,
}


def apply_domain(clear_img, domain, seed):
    """Apply a domain transform to a float Clear render; returns uint8."""
    domain = DomainId.parse(domain)
    img = np.asarray(clear_img, dtype=np.float64)
    if domain is not DomainId.CLEAR:
        img = _TRANSFORMS[domain](img, rng.stream(seed, "domain", domain.value))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(seed, domain=DomainId.CLEAR, size=32):
    """Return ``(image uint8 HxWx3, mask uint8 HxW)`` for one seed and domain."""
    if size < MIN_SIZE:
        raise ValueError(f"scene size must be >= {MIN_SIZE}, got {size}")
    clear, mask = _render_clear(int(seed), size)
    return apply_domain(clear, domain, int(seed)), mask


# ----------------------------------------------------------------------------- datasets


@dataclass
class TaskDataset:
    domain: DomainId
    images: np.ndarray  # N x H x W x 3 uint8
    masks: np.ndarray  # N x H x W uint8
    seeds: list = field(default_factory=list)
    class_count: int = CLASS_COUNT

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ValueError("images and masks differ in length")
        if len(self.masks) and self.masks.max() >= self.class_count:
            raise ValueError("mask value outside class range")

    def __len__(self):
        return len(self.images)

    @property
    def seed(self):
        return self.seeds[0] if self.seeds else None

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return TaskDataset(self.domain, self.images[idx], self.masks[idx],
                           [self.seeds[i] for i in idx], self.class_count)

    def batches(self, batch_size):
        for i in range(0, len(self), batch_size):
            yield self.images[i:i + batch_size], self.masks[i:i + batch_size]


def make_task(domain, n, seed, size=32) -> TaskDataset:
    """``n`` scenes from seeds ``seed .. seed + n - 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    domain = DomainId.parse(domain)
    seeds = list(range(int(seed), int(seed) + n))
    pairs = [generate_scene(s, domain, size) for s in seeds]
    return TaskDataset(domain, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), seeds)


def domain_base_seed(domain, data_seed=0):
    """Scene-seed block for a domain; each domain draws distinct scenes."""
    order = list(DomainId).index(DomainId.parse(domain))
    return int(data_seed) * 10_000_000 + order * 100_000


def make_split(domain, split, n, data_seed=0, size=32) -> TaskDataset:
    """Train or val split of a domain; val seeds live in a disjoint block."""
    base = domain_base_seed(domain, data_seed)
    if split == "val":
        base += VAL_SEED_OFFSET
    elif split != "train":
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    return make_task(domain, n, base, size)


def concat(tasks):
    tasks = list(tasks)
    return TaskDataset(
        tasks[0].domain,
        np.concatenate([t.images for t in tasks]),
        np.concatenate([t.masks for t in tasks]),
        [s for t in tasks for s in t.seeds],
        tasks[0].class_count,
    )


# ----------------------------------------------------------------------------- files


def write_ppm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_netpbm(path, magic, channels):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file")
    w, h = int(tokens[1]), int(tokens[2])
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(data, dtype=np.uint8, offset=pos, count=int(np.prod(shape))).reshape(shape)


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def save_dataset(task: TaskDataset, out_dir, size=None):
    """Write images as PPM, masks as PGM, plus ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for img, mask, seed in zip(task.images, task.masks, task.seeds):
        stem = f"{task.domain.value}_{seed:08d}"
        write_ppm(out / f"{stem}.ppm", img)
        write_pgm(out / f"{stem}.pgm", mask)
        entries.append({"seed": seed, "image": f"{stem}.ppm", "mask": f"{stem}.pgm"})
    index = {
        "domain": task.domain.value,
        "size": int(task.images.shape[1]),
        "class_names": list(CLASS_NAMES),
        "seeds": [e["seed"] for e in entries],
        "pairs": entries,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out / "index.json"


def load_dataset(path) -> TaskDataset:
    path = Path(path)
    index_path = path / "index.json" if path.is_dir() else path
    index = json.loads(index_path.read_text())
    root = index_path.parent
    images = np.stack([read_ppm(root / e["image"]) for e in index["pairs"]])
    masks = np.stack([read_pgm(root / e["mask"]) for e in index["pairs"]])
    return TaskDataset(DomainId.parse(index["domain"]), images, masks,
                       [e["seed"] for e in index["pairs"]], len(index["class_names"]))


def load_real_dataset(root):
    """Placeholder for Cityscapes/ACDC-style data.

    Expected layout (not loaded by this package)::

        root/leftImg8bit/{train,val}/<city>/*_leftImg8bit.png
        root/gtFine/{train,val}/<city>/*_gtFine_labelTrainIds.png
        root/acdc/rgb_anon/{night,rain,fog,snow}/{train,val}/...
        root/acdc/gt/{night,rain,fog,snow}/{train,val}/..._gt_labelTrainIds.png
    """
    raise NotImplementedError(f"real-data experiments are out of scope (root={root})")
