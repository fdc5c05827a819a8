"""Modality-specific input corruptions.

Sequence inputs are ``(T, F)`` arrays of standardized values; image inputs are
``(H, W)`` arrays in ``[0, 1]``. Every corruption returns a new array of the
same shape and never modifies its argument.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

SEQ_KINDS = ("drop_initial", "gaussian_noise", "time_reverse")
IMG_KINDS = (
    "random_crop",
    "hflip",
    "vflip",
    "gaussian_blur",
    "solarize",
    "invert",
    "color_jitter",
)

# separable binomial approximation of a Gaussian, sums to one
_BLUR_1D = np.array([0.25, 0.5, 0.25])


@dataclass(frozen=True)
class CorruptionParams:
    noise_std: float = 0.1
    drop_fraction: float = 0.25
    crop_area: float = 0.75
    solarize_threshold: float = 0.5
    jitter_contrast: tuple = (0.8, 1.2)
    jitter_brightness: tuple = (-0.1, 0.1)

    def validate(self):
        if not 0.0 <= self.drop_fraction <= 0.5:
            raise ParameterError(f"drop_fraction must lie in [0, 0.5], got {self.drop_fraction}")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")
        if not 0.0 < self.crop_area <= 1.0:
            raise ParameterError("crop_area must lie in (0, 1]")
        if not 0.0 <= self.solarize_threshold <= 1.0:
            raise ParameterError("solarize_threshold must lie in [0, 1]")
        lo, hi = self.jitter_contrast
        if not 0 < lo <= hi:
            raise ParameterError("jitter_contrast must satisfy 0 < lo <= hi")
        lo, hi = self.jitter_brightness
        if lo > hi:
            raise ParameterError("jitter_brightness must satisfy lo <= hi")


DEFAULT_PARAMS = CorruptionParams()


def drop_initial(seq, fraction):
    if not 0.0 <= fraction <= 0.5:
        raise ParameterError(f"drop fraction must lie in [0, 0.5], got {fraction}")
    k = int(np.floor(fraction * seq.shape[0]))
    out = np.zeros_like(seq)
    out[k:] = seq[k:]
    return out


def time_reverse(seq):
    return seq[::-1].copy()


def gaussian_noise(seq, std, rng):
    return seq + rng.normal(0.0, std, size=seq.shape)


def corrupt_seq(seq, kind, params=DEFAULT_PARAMS, rng=None):
    """Apply one sequence corruption of the given kind."""
    seq = np.asarray(seq, dtype=np.float64)
    if kind == "drop_initial":
        return drop_initial(seq, params.drop_fraction)
    if kind == "gaussian_noise":
        if params.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")
        return gaussian_noise(seq, params.noise_std, _rng(rng))
    if kind == "time_reverse":
        return time_reverse(seq)
    raise ParameterError(f"unknown sequence corruption {kind!r}")


def invert(img):
    return 1.0 - img


def solarize(img, threshold):
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError("solarize threshold must lie in [0, 1]")
    return np.where(img >= threshold, 1.0 - img, img)


def gaussian_blur(img):
    padded = np.pad(img, 1, mode="edge")
    rows = (_BLUR_1D[0] * padded[:-2] + _BLUR_1D[1] * padded[1:-1]
            + _BLUR_1D[2] * padded[2:])
    return (_BLUR_1D[0] * rows[:, :-2] + _BLUR_1D[1] * rows[:, 1:-1]
            + _BLUR_1D[2] * rows[:, 2:])


def random_crop(img, area, rng):
    """Crop a window covering ``area`` of the image, resize back (nearest)."""
    if not 0.0 < area <= 1.0:
        raise ParameterError("crop area must lie in (0, 1]")
    h, w = img.shape
    side = np.sqrt(area)
    ch = min(h, max(1, int(round(h * side))))
    cw = min(w, max(1, int(round(w * side))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[top:top + ch, left:left + cw]
    ri = (np.arange(h) * ch) // h
    ci = (np.arange(w) * cw) // w
    return crop[np.ix_(ri, ci)].copy()


def color_jitter(img, contrast, brightness, rng):
    a = rng.uniform(*contrast)
    b = rng.uniform(*brightness)
    return np.clip(a * img + b, 0.0, 1.0)


def corrupt_img(img, kind, params=DEFAULT_PARAMS, rng=None):
    """Apply one image corruption of the given kind; output stays in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if kind == "random_crop":
        out = random_crop(img, params.crop_area, _rng(rng))
    elif kind == "hflip":
        out = img[:, ::-1].copy()
    elif kind == "vflip":
        out = img[::-1].copy()
    elif kind == "gaussian_blur":
        out = gaussian_blur(img)
    elif kind == "solarize":
        out = solarize(img, params.solarize_threshold)
    elif kind == "invert":
        out = invert(img)
    elif kind == "color_jitter":
        params.validate()
        out = color_jitter(img, params.jitter_contrast, params.jitter_brightness, _rng(rng))
    else:
        raise ParameterError(f"unknown image corruption {kind!r}")
    return np.clip(out, 0.0, 1.0)


def parse_kind(spec):
    """Split a ``"seq:time_reverse"`` style identifier into (modality, kind)."""
    modality, _, kind = spec.partition(":")
    if modality == "seq" and kind in SEQ_KINDS:
        return modality, kind
    if modality == "img" and kind in IMG_KINDS:
        return modality, kind
    raise ParameterError(f"unknown corruption identifier {spec!r}")


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)
