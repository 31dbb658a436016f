"""Image perturbations: crop-and-resize, Gaussian blur, JPEG compression,
additive Gaussian noise, and their random combination.

All ops take NCHW float32 batches in [-1, 1] and preserve shape and
range.  Crop and noise consume the supplied rng; blur and JPEG are
deterministic functions of their strength.  Crop/resize and blur are
separable linear maps, so the training-graph variants differentiate
exactly; JPEG backpropagates straight-through (identity backward).

Text forms, used in config files and on the command line:

    crop:24          fixed strength          (square crop side, pixels)
    blur:5           odd Gaussian kernel size
    jpeg:80          quality 1..100
    noise:0.2        Gaussian std in [-1,1]-image units
    crop:15..32      strength drawn uniformly from the range per application
    noise:0..0.4@0.8 optional application probability suffix
    combo:crop:15..32,blur:1..7,jpeg:80..100,noise:0..0.4
                     sub-perturbations, each applied with probability 0.5
                     (default), in fixed order crop, blur, jpeg, noise
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "PerturbationSpec", "parse_spec", "format_spec", "default_combo",
    "crop_resize", "gaussian_blur", "jpeg_compress", "additive_noise",
    "apply_spec", "apply_spec_graph", "draw_concrete",
]

_KIND_ORDER = {"crop": 0, "blur": 1, "jpeg": 2, "noise": 3}


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation (fixed strength or strength range) or a combo."""

    kind: str
    strength: float | None = None
    low: float | None = None
    high: float | None = None
    prob: float = 1.0
    subs: tuple = ()

    def __post_init__(self):
        if self.kind not in ("crop", "blur", "jpeg", "noise", "combo"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"application probability must be in [0,1], got {self.prob}")
        if self.kind == "combo":
            if not self.subs:
                raise ValueError("combo needs at least one sub-perturbation")
            for s in self.subs:
                if s.kind == "combo":
                    raise ValueError("combos do not nest")
        else:
            has_fixed = self.strength is not None
            has_range = self.low is not None and self.high is not None
            if has_fixed == has_range:
                raise ValueError(f"{self.kind}: give either a strength or a range")
            if has_range and self.low > self.high:
                raise ValueError(f"{self.kind}: range lower bound exceeds upper")

    def ordered_subs(self) -> tuple:
        return tuple(sorted(self.subs, key=lambda s: _KIND_ORDER[s.kind]))


def _validate_strength(kind: str, strength: float, image_size: int | None) -> None:
    if kind == "crop":
        if strength < 1 or (image_size is not None and strength > image_size):
            raise ValueError(f"crop size {strength} out of range [1, {image_size}]")
    elif kind == "blur":
        k = int(strength)
        if k < 0 or (k > 1 and k % 2 == 0):
            raise ValueError(f"blur kernel must be odd and >= 1 (or 0/1 for identity), "
                             f"got {strength}")
    elif kind == "jpeg":
        if not 1 <= strength <= 100:
            raise ValueError(f"jpeg quality {strength} out of range [1, 100]")
    elif kind == "noise":
        if strength < 0:
            raise ValueError(f"noise std must be >= 0, got {strength}")


def _is_neutral(kind: str, strength: float, image_size: int) -> bool:
    if kind == "crop":
        return int(strength) == image_size
    if kind == "blur":
        return int(strength) <= 1
    if kind == "jpeg":
        return int(strength) == 100
    return strength == 0.0


def _parse_strength(kind: str, text: str) -> float:
    value = float(text)
    if kind in ("crop", "blur", "jpeg") and value != int(value):
        raise ValueError(f"{kind} strength must be an integer, got {text}")
    return value


def _parse_leaf(text: str, default_prob: float) -> PerturbationSpec:
    prob = default_prob
    if "@" in text:
        text, _, ptext = text.rpartition("@")
        prob = float(ptext)
    kind, sep, stext = text.partition(":")
    if not sep or kind not in _KIND_ORDER:
        raise ValueError(f"bad perturbation spec {text!r}")
    if ".." in stext:
        lo_text, _, hi_text = stext.partition("..")
        lo = _parse_strength(kind, lo_text)
        hi = _parse_strength(kind, hi_text)
        return PerturbationSpec(kind, low=lo, high=hi, prob=prob)
    return PerturbationSpec(kind, strength=_parse_strength(kind, stext), prob=prob)


def parse_spec(text: str) -> PerturbationSpec:
    """Parse the textual spec form; see module docstring for the grammar."""
    text = text.strip()
    if text.startswith("combo:"):
        body = text[len("combo:"):]
        parts = []
        # sub-specs are comma-separated and each starts with a kind name
        for piece in body.split(","):
            piece = piece.strip()
            if not piece:
                raise ValueError(f"empty sub-perturbation in {text!r}")
            parts.append(_parse_leaf(piece, default_prob=0.5))
        return PerturbationSpec("combo", subs=tuple(parts))
    return _parse_leaf(text, default_prob=1.0)


def _format_strength(kind: str, value: float) -> str:
    if kind in ("crop", "blur", "jpeg"):
        return str(int(value))
    return f"{value:g}"


def format_spec(spec: PerturbationSpec) -> str:
    if spec.kind == "combo":
        return "combo:" + ",".join(
            _format_leaf(s, default_prob=0.5) for s in spec.subs)
    return _format_leaf(spec, default_prob=1.0)


def _format_leaf(spec: PerturbationSpec, default_prob: float) -> str:
    if spec.strength is not None:
        body = f"{spec.kind}:{_format_strength(spec.kind, spec.strength)}"
    else:
        body = (f"{spec.kind}:{_format_strength(spec.kind, spec.low)}"
                f"..{_format_strength(spec.kind, spec.high)}")
    if spec.prob != default_prob:
        body += f"@{spec.prob:g}"
    return body


def default_combo(image_size: int) -> PerturbationSpec:
    """Combined perturbation with ranges scaled to the image size.

    The crop lower bound keeps the 60/128 proportion of the full-scale
    recipe; blur/jpeg/noise ranges are resolution-independent.
    """
    crop_lo = max(1, round(image_size * 60 / 128))
    return PerturbationSpec("combo", subs=(
        PerturbationSpec("crop", low=crop_lo, high=image_size, prob=0.5),
        PerturbationSpec("blur", low=1, high=7, prob=0.5),
        PerturbationSpec("jpeg", low=80, high=100, prob=0.5),
        PerturbationSpec("noise", low=0.0, high=0.4, prob=0.5),
    ))


# ---------------------------------------------------------------------------
# linear-map builders


def _bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix (out_size, in_size).

    Pixel centers convention: src = (i + 0.5) * in/out - 0.5.  For
    out == in this is exactly the identity."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        j0 = math.floor(src)
        t = src - j0
        ja = min(max(j0, 0), in_size - 1)
        jb = min(max(j0 + 1, 0), in_size - 1)
        m[i, ja] += 1.0 - t
        m[i, jb] += t
    return m


def _reflect_index(i: int, n: int) -> int:
    # edge-including mirror (scipy 'reflect'); this choice makes the blur
    # matrix doubly stochastic, which preserves the global image mean
    if n == 1:
        return 0
    i = i % (2 * n)
    return i if i < n else 2 * n - 1 - i


def _blur_matrix(size: int, kernel_size: int, dtype=np.float64) -> np.ndarray:
    """1-D Gaussian blur with reflect padding as a (size, size) matrix."""
    k = int(kernel_size)
    if k <= 1:
        return np.eye(size, dtype=dtype)
    sigma = k / 3.0
    half = k // 2
    offsets = np.arange(-half, half + 1)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    taps /= taps.sum()
    m = np.zeros((size, size), dtype=dtype)
    for i in range(size):
        for o, w in zip(offsets, taps):
            m[i, _reflect_index(i + int(o), size)] += w
    return m


# ---------------------------------------------------------------------------
# the ops


def _check_batch(img: np.ndarray) -> tuple:
    if img.ndim != 4:
        raise ValueError(f"expected an NCHW batch, got shape {img.shape}")
    return img.shape


def crop_resize(img: np.ndarray, crop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-random square crop, bilinear resize back to full size.

    Crop positions are drawn per sample."""
    n, c, h, w = _check_batch(img)
    crop_size = int(crop_size)
    if not 1 <= crop_size <= min(h, w):
        raise ValueError(f"crop size {crop_size} out of range [1, {min(h, w)}]")
    left, right = _crop_matrices(n, h, w, crop_size, rng, img.dtype)
    out = np.matmul(np.matmul(left[:, None], img), right[:, None].transpose(0, 1, 3, 2))
    return out.astype(img.dtype, copy=False)


def _crop_matrices(n: int, h: int, w: int, crop_size: int,
                   rng: np.random.Generator, dtype) -> tuple:
    rows = _bilinear_matrix(h, crop_size)
    cols = _bilinear_matrix(w, crop_size)
    i0 = rng.integers(0, h - crop_size + 1, size=n)
    j0 = rng.integers(0, w - crop_size + 1, size=n)
    left = np.zeros((n, h, h), dtype=dtype)
    right = np.zeros((n, w, w), dtype=dtype)
    for s in range(n):
        left[s, :, i0[s]:i0[s] + crop_size] = rows
        right[s, :, j0[s]:j0[s] + crop_size] = cols
    return left, right


def gaussian_blur(img: np.ndarray, kernel_size: int) -> np.ndarray:
    """Separable Gaussian blur, sigma = kernel/3, reflect padding,
    kernel normalized to sum 1.  Kernel 0 or 1 is the identity."""
    n, c, h, w = _check_batch(img)
    k = int(kernel_size)
    if k < 0 or (k > 1 and k % 2 == 0):
        raise ValueError(f"blur kernel must be odd (or 0/1 for identity), got {kernel_size}")
    if k <= 1:
        return img
    bv = _blur_matrix(h, k, img.dtype)
    bh = _blur_matrix(w, k, img.dtype)
    out = np.matmul(np.matmul(bv, img), bh.T)
    return out.astype(img.dtype, copy=False)


# ITU-T T.81 Annex K luminance quantization table
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)


def _quant_table(quality: int) -> np.ndarray:
    q = int(quality)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    table = np.floor((_JPEG_LUMA * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantization round trip, no chroma subsampling.

    The luminance table (scaled by the conventional quality factor)
    quantizes all channels; pixel values are never sampled to 8 bits, so
    quality 100 reproduces the input up to coefficient rounding."""
    n, c, h, w = _check_batch(img)
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality {quality} out of range [1, 100]")
    if h % 8 or w % 8:
        raise ValueError(f"jpeg needs multiple-of-8 image sides, got {h}x{w}")
    x = (img.astype(np.float64) + 1.0) * 127.5
    if c == 3:
        flat = x.transpose(0, 2, 3, 1)
        ycc = flat @ _RGB_TO_YCC.T
        planes = ycc.transpose(0, 3, 1, 2)
    elif c == 1:
        planes = x - 0.0
    else:
        raise ValueError(f"jpeg supports 1 or 3 channels, got {c}")
    if c == 3:
        planes[:, 0] -= 128.0  # Cb/Cr are already centered
    else:
        planes = planes - 128.0

    blocks = planes.reshape(n, c, h // 8, 8, w // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    table = _quant_table(quality)
    coef = np.round(coef / table) * table
    blocks = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    planes = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    if c == 3:
        planes[:, 0] += 128.0
        rgb = planes.transpose(0, 2, 3, 1) @ _YCC_TO_RGB.T
        x = rgb.transpose(0, 3, 1, 2)
    else:
        x = planes + 128.0
    out = x / 127.5 - 1.0
    return np.clip(out, -1.0, 1.0).astype(img.dtype, copy=False)


def additive_noise(img: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gaussian pixel noise, clamped back into [-1, 1]."""
    _check_batch(img)
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    if std == 0.0:
        return img
    noise = rng.normal(0.0, std, size=img.shape)
    return np.clip(img + noise, -1.0, 1.0).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# spec application


def draw_concrete(spec: PerturbationSpec, rng: np.random.Generator) -> list:
    """Resolve a spec into concrete (kind, strength) applications.

    Probability gates and range draws consume the rng; combos emit their
    surviving sub-perturbations in crop, blur, jpeg, noise order."""
    if spec.kind == "combo":
        out = []
        for sub in spec.ordered_subs():
            out.extend(draw_concrete(sub, rng))
        return out
    if spec.prob < 1.0 and rng.random() >= spec.prob:
        return []
    if spec.strength is not None:
        return [(spec.kind, spec.strength)]
    if spec.kind == "noise":
        strength = float(rng.uniform(spec.low, spec.high))
    elif spec.kind == "blur":
        # odd sizes only; 0/1 both mean identity
        lo = int(spec.low)
        hi = int(spec.high)
        odd = [k for k in range(lo, hi + 1) if k <= 1 or k % 2 == 1]
        strength = float(odd[rng.integers(0, len(odd))])
    else:
        strength = float(rng.integers(int(spec.low), int(spec.high) + 1))
    return [(spec.kind, strength)]


def _apply_concrete(img: np.ndarray, kind: str, strength: float,
                    rng: np.random.Generator) -> np.ndarray:
    if kind == "crop":
        return crop_resize(img, int(strength), rng)
    if kind == "blur":
        return gaussian_blur(img, int(strength))
    if kind == "jpeg":
        return jpeg_compress(img, int(strength))
    return additive_noise(img, strength, rng)


def apply_spec(spec: PerturbationSpec, img: np.ndarray,
               rng: np.random.Generator) -> np.ndarray:
    """Draw strengths and apply a spec to an image batch.

    Exactly-neutral strengths (full-frame crop, kernel <= 1, quality 100,
    std 0) are skipped outright so a neutral pipeline is a bit-exact
    identity, which the training loop and study harnesses rely on."""
    size = _check_batch(img)[2]
    for kind, strength in draw_concrete(spec, rng):
        _validate_strength(kind, strength, size)
        if _is_neutral(kind, strength, size):
            continue
        img = _apply_concrete(img, kind, strength, rng)
    return img


def apply_spec_graph(spec: PerturbationSpec, img: Tensor,
                     rng: np.random.Generator) -> Tensor:
    """Tape-recorded version of :func:`apply_spec` for immunized training.

    Crop and blur go through exact separable linear ops; noise adds a
    constant draw then clamps; JPEG applies straight-through (identity
    backward)."""
    n, c, h, w = img.shape
    for kind, strength in draw_concrete(spec, rng):
        _validate_strength(kind, strength, h)
        if _is_neutral(kind, strength, h):
            continue
        if kind == "crop":
            left, right = _crop_matrices(n, h, w, int(strength), rng, img.data.dtype)
            img = ad.sep_image_op(img, left, right)
        elif kind == "blur":
            img = ad.sep_image_op(img, _blur_matrix(h, int(strength), img.data.dtype),
                                  _blur_matrix(w, int(strength), img.data.dtype))
        elif kind == "jpeg":
            img = ad.straight_through(img, lambda d, q=int(strength): jpeg_compress(d, q))
        else:
            noise = rng.normal(0.0, strength, size=img.shape).astype(img.data.dtype)
            img = ad.clamp(ad.add(img, Tensor(noise, dtype=None)), -1.0, 1.0)
    return img
