"""Dataset statistics: HSV channel moments and mean log-amplitude spectra."""

from dataclasses import dataclass

import numpy as np


LUMA = np.array([0.299, 0.587, 0.114])


# ----------------------------------------------------------------------------- colour


def rgb_to_hsv(image):
    """Hexcone RGB -> HSV on 8-bit scales: H in [0, 180), S and V in [0, 255].

    Accepts uint8 or float arrays with a trailing channel axis; returns float64.
    """
    rgb = np.asarray(image, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, 255.0 * delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        v == r,
        (g - b) / safe,
        np.where(v == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta > 0, (h * 30.0) % 180.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    """Inverse of :func:`rgb_to_hsv`; returns float64 RGB in [0, 255]."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h = (hsv[..., 0] % 180.0) / 30.0
    s = hsv[..., 1] / 255.0
    v = hsv[..., 2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def to_gray(image):
    return np.asarray(image, dtype=np.float64) @ LUMA


# ----------------------------------------------------------------------------- moments


@dataclass
class ChannelMoments:
    colorspace: str
    channels: tuple
    mean: np.ndarray
    std: np.ndarray

    def rows(self, dataset_name):
        return [(dataset_name, self.colorspace, ch, float(m), float(s))
                for ch, m, s in zip(self.channels, self.mean, self.std)]


def channel_moments(images, colorspace="HSV") -> ChannelMoments:
    """Mean/std per channel pooled over every pixel of every image."""
    images = list(images) if not isinstance(images, np.ndarray) else images
    if len(images) == 0:
        raise ValueError("channel_moments needs a nonempty dataset")
    cs = colorspace.upper()
    if cs not in ("HSV", "RGB"):
        raise ValueError(f"unknown colorspace {colorspace!r}")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        px = rgb_to_hsv(img) if cs == "HSV" else np.asarray(img, dtype=np.float64)
        px = px.reshape(-1, 3)
        total += px.sum(axis=0)
        total_sq += (px * px).sum(axis=0)
        count += px.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    names = ("Hue", "Saturation", "Value") if cs == "HSV" else ("Red", "Green", "Blue")
    return ChannelMoments(cs, names, mean, np.sqrt(var))


# ----------------------------------------------------------------------------- spectra


def _fft1(x):
    # iterative radix-2 Cooley-Tukey along the last axis
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    x = x[..., rev]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        x = x.reshape(x.shape[:-1] + (n // size, size))
        even = x[..., :half]
        odd = x[..., half:] * tw
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(x.shape[:-2] + (n,))
        size *= 2
    return x


def fft2(img):
    """Unnormalized 2-D DFT of a real or complex square image."""
    return _fft1(np.swapaxes(_fft1(img), -1, -2)).swapaxes(-1, -2)


def fftshift2(a):
    s0, s1 = a.shape[-2:]
    return np.roll(np.roll(a, s0 // 2, axis=-2), s1 // 2, axis=-1)


def resize_bilinear(gray, size):
    """Bilinear resize (half-pixel centres) of a 2-D array to ``size`` x ``size``."""
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    if (h, w) == (size, size):
        return gray
    y0, y1, fy = coords(h, size)
    x0, x1, fx = coords(w, size)
    top = gray[y0][:, x0] * (1 - fx) + gray[y0][:, x1] * fx
    bot = gray[y1][:, x0] * (1 - fx) + gray[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


@dataclass
class AmplitudeSpectrum:
    size: int
    values: np.ndarray  # mean log(1 + |F|), DC at (size//2, size//2)


def amplitude_spectrum(images, size=32) -> AmplitudeSpectrum:
    """Mean over images of log(1+|DFT(gray)|), DC-centred."""
    if size < 2 or size & (size - 1):
        raise ValueError(f"spectrum size must be a power of two, got {size}")
    images = list(images) if not isinstance(images, np.ndarray) else images
    if len(images) == 0:
        raise ValueError("amplitude_spectrum needs a nonempty dataset")
    logs = [np.log1p(np.abs(fft2(resize_bilinear(to_gray(img), size)))) for img in images]
    # fixed-order pairwise reduction keeps the average reproducible
    while len(logs) > 1:
        logs = [logs[i] + logs[i + 1] if i + 1 < len(logs) else logs[i] for i in range(0, len(logs), 2)]
    return AmplitudeSpectrum(size, fftshift2(logs[0] / len(images)))


def highfreq_energy_ratio(spec: AmplitudeSpectrum, cutoff_radius_fraction=0.5) -> float:
    """Share of spectrum mass outside radius ``fraction * size / 2`` from DC."""
    if not 0 < cutoff_radius_fraction < 1:
        raise ValueError("cutoff fraction must lie in (0, 1)")
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s]
    r = np.hypot(yy - s // 2, xx - s // 2)
    total = spec.values.sum()
    if total <= 0:
        return 0.0
    return float(spec.values[r > cutoff_radius_fraction * s / 2].sum() / total)


__all__ = [
    "AmplitudeSpectrum",
    "ChannelMoments",
    "amplitude_spectrum",
    "channel_moments",
    "fft2",
    "highfreq_energy_ratio",
    "hsv_to_rgb",
    "resize_bilinear",
    "rgb_to_hsv",
    "to_gray",
]
