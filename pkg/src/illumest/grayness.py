"""Grayness Index illuminant estimation.

Under a locally uniform light, ``log I_c = log W_c + log L_c`` per channel.
A zero-sum Laplacian-of-Gaussian removes the constant ``log L_c`` term, so at
an achromatic surface point the filtered log responses of R, G and B agree.
Pixels are ranked by how far their three responses are from agreeing and the
most gray ones vote for the illuminant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import defaults
from .imaging import LinearImage, normalize_illuminant


class InsufficientGrayEvidence(RuntimeError):
    """Too few usable pixels survive filtering to form an estimate."""


@dataclass(frozen=True)
class GiConfig:
    sigma: float = defaults.GI_SIGMA
    top_fraction: float = defaults.GI_TOP_FRACTION
    min_pixels: int = defaults.GI_MIN_PIXELS
    epsilon: float = defaults.GI_EPSILON

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must be in (0, 1]")
        if self.min_pixels < 1:
            raise ValueError("min_pixels must be a positive integer")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class LogResponseMap:
    """Per-pixel LoG responses of the log image, ``d[..., c]`` per channel."""

    d: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.d.shape[0]

    @property
    def width(self) -> int:
        return self.d.shape[1]


@dataclass(frozen=True)
class GraynessMap:
    """``g`` is 0 for a perfectly gray pixel and grows with chromatic contrast."""

    g: np.ndarray
    valid: np.ndarray


def log_kernel(sigma: float) -> np.ndarray:
    """Discrete Laplacian-of-Gaussian of radius ``ceil(3 sigma)``.

    The sampled kernel is shifted by its mean so the entries sum to zero,
    which is what makes per-channel constant offsets vanish.
    """
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    s2 = sigma * sigma
    k = (r2 - 2 * s2) / (2 * math.pi * s2 ** 3) * np.exp(-r2 / (2 * s2))
    k = k - k.mean()
    # fold the rounding residual of the shift into the center tap
    k[radius, radius] -= math.fsum(k.ravel())
    return k


def log_of_gaussian_response(
    img: LinearImage, sigma: float, epsilon: float = defaults.GI_EPSILON
) -> LogResponseMap:
    """Filter ``log(max(I_c, epsilon))`` with a LoG kernel, per channel.

    Responses are only trusted where the whole kernel window lies inside the
    image and covers valid, strictly positive source pixels; elsewhere the
    response is set to 0 and marked invalid.

    Raises:
        ValueError: ``sigma <= 0`` or the image is smaller than the kernel.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    kernel = log_kernel(sigma)
    size = kernel.shape[0]
    radius = size // 2
    if img.height < size or img.width < size:
        raise ValueError(f"image {img.height}x{img.width} smaller than LoG support {size}x{size}")

    logs = np.log(np.maximum(img.data, epsilon))
    d = np.empty_like(logs)
    for c in range(3):
        # kernel is symmetric, so correlation equals convolution
        d[..., c] = ndimage.correlate(logs[..., c], kernel, mode="constant", cval=0.0)

    source_ok = img.mask & np.all(img.data > 0, axis=-1)
    valid = ndimage.minimum_filter(source_ok.astype(np.uint8), size=size, mode="constant", cval=0) > 0
    valid[:radius, :] = False
    valid[-radius:, :] = False
    valid[:, :radius] = False
    valid[:, -radius:] = False
    d[~valid] = 0.0
    return LogResponseMap(d, valid)


def grayness_index(d: LogResponseMap, epsilon: float = defaults.GI_EPSILON) -> GraynessMap:
    """Contrast-normalized disagreement between the three channel responses.

    ``g = ||(Dr-Dg, Dg-Db, Dr-Db)|| / (|Dr| + |Dg| + |Db| + epsilon)``.
    Pixels where every ``|D_c| < epsilon`` have no log-domain contrast and are
    marked invalid rather than scored as gray.
    """
    r, gr, b = d.d[..., 0], d.d[..., 1], d.d[..., 2]
    num = np.sqrt((r - gr) ** 2 + (gr - b) ** 2 + (r - b) ** 2)
    den = np.abs(r) + np.abs(gr) + np.abs(b) + epsilon
    flat = np.all(np.abs(d.d) < epsilon, axis=-1)
    valid = d.valid & ~flat
    g = np.where(valid, num / den, 0.0)
    return GraynessMap(g, valid)


def grayness_map(img: LinearImage, cfg: GiConfig | None = None) -> GraynessMap:
    cfg = cfg or GiConfig()
    return grayness_index(log_of_gaussian_response(img, cfg.sigma, cfg.epsilon), cfg.epsilon)


def select_gray_pixels(gmap: GraynessMap, top_fraction: float, min_pixels: int) -> np.ndarray:
    """Row-major flat indices of the grayest valid pixels.

    Keeps ``max(min_pixels, ceil(top_fraction * valid_count))`` pixels; equal
    scores are ordered by row-major position so the choice is reproducible.
    """
    flat_valid = np.flatnonzero(gmap.valid)
    if flat_valid.size < min_pixels:
        raise InsufficientGrayEvidence(
            f"insufficient gray evidence: {flat_valid.size} candidate pixels, need {min_pixels}"
        )
    n = max(min_pixels, math.ceil(top_fraction * flat_valid.size))
    n = min(n, flat_valid.size)
    scores = gmap.g.ravel()[flat_valid]
    order = np.argsort(scores, kind="stable")
    return flat_valid[order[:n]]


def estimate_gi(img: LinearImage, cfg: GiConfig | None = None) -> np.ndarray:
    """Estimate the illuminant direction from the grayest pixels.

    Each selected pixel contributes its own unit-norm color, so bright pixels
    do not outvote dim ones.

    Raises:
        InsufficientGrayEvidence: fewer than ``cfg.min_pixels`` candidates.
    """
    cfg = cfg or GiConfig()
    gmap = grayness_map(img, cfg)
    idx = select_gray_pixels(gmap, cfg.top_fraction, cfg.min_pixels)
    pix = img.data.reshape(-1, 3)[idx]
    chroma = pix / np.linalg.norm(pix, axis=1, keepdims=True)
    return normalize_illuminant(chroma.sum(axis=0))
