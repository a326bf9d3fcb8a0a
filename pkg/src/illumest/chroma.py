"""Log-chroma coordinates, wrapped chroma histograms and FFT convolution.

In ``u = log(g/r)``, ``v = log(g/b)`` a global illuminant is an additive
offset, so illuminant estimation becomes locating a translation on a 2D
histogram.  Histograms are toroidal: a bin index is taken modulo ``n``, and
the absolute chroma is only known up to multiples of the period
``n * bin_size``.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import defaults
from ._io import atomic_write_text
from .imaging import LinearImage

# relative tolerance on the imaginary residue of an inverse FFT
_IMAG_TOL = 1e-9
_DEGENERATE_MOMENT = 1e-12


class Feature(str, enum.Enum):
    INTENSITY = "intensity"
    GRADIENT = "gradient-magnitude"


FEATURES = (Feature.INTENSITY, Feature.GRADIENT)


class DegeneratePosterior(ValueError):
    """The circular mean of a distribution is undefined."""


@dataclass(frozen=True)
class HistogramGeometry:
    """Bin layout of an ``n x n`` wrapped histogram.

    ``origin`` is the ``(u, v)`` center of bin ``(0, 0)``.  The default origin
    puts chroma ``(0, 0)`` (gray) at bin ``(n/2, n/2)``.
    """

    n: int = defaults.HIST_BINS
    bin_size: float = defaults.HIST_BIN_SIZE
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not self.bin_size > 0:
            raise ValueError("bin_size must be > 0")
        if self.origin is None:
            half = -(self.n // 2) * self.bin_size
            object.__setattr__(self, "origin", (half, half))
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def period(self) -> float:
        return self.n * self.bin_size

    def fractional_index(self, u, v):
        """Unwrapped fractional bin coordinates of ``(u, v)``."""
        return (
            (np.asarray(u) - self.origin[0]) / self.bin_size,
            (np.asarray(v) - self.origin[1]) / self.bin_size,
        )

    def bin_index(self, u, v):
        """Wrapped bin indices; halves round up so the rule is platform-stable."""
        fu, fv = self.fractional_index(u, v)
        iu = np.floor(np.asarray(fu) + 0.5).astype(np.int64) % self.n
        iv = np.floor(np.asarray(fv) + 0.5).astype(np.int64) % self.n
        return iu, iv

    def bin_center(self, iu, iv) -> tuple:
        return (self.origin[0] + np.asarray(iu) * self.bin_size,
                self.origin[1] + np.asarray(iv) * self.bin_size)


@dataclass(frozen=True)
class ChromaHistogram:
    """Mass over wrapped ``(u, v)`` bins; axis 0 indexes ``u``, axis 1 ``v``."""

    geometry: HistogramGeometry
    mass: np.ndarray
    feature: Feature = Feature.INTENSITY
    normalized: bool = field(default=True)

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        n = self.geometry.n
        if mass.shape != (n, n):
            raise ValueError(f"mass shape {mass.shape} does not match geometry n={n}")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise ValueError("histogram mass must be finite and nonnegative")
        object.__setattr__(self, "mass", mass)


def rgb_to_uv(rgb) -> np.ndarray:
    """``(log(g/r), log(g/b))`` for one triple or an ``(..., 3)`` array.

    Raises:
        ValueError: any component is not strictly positive.
    """
    a = np.asarray(rgb, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError("log-chroma needs strictly positive RGB")
    lg = np.log(a)
    return np.stack([lg[..., 1] - lg[..., 0], lg[..., 1] - lg[..., 2]], axis=-1)


def uv_to_rgb(uv) -> np.ndarray:
    """Unit-norm RGB direction with the given log-chroma (green fixed at 1)."""
    uv = np.asarray(uv, dtype=np.float64)
    rgb = np.stack([np.exp(-uv[..., 0]), np.ones(uv.shape[:-1]), np.exp(-uv[..., 1])], axis=-1)
    return rgb / np.linalg.norm(rgb, axis=-1, keepdims=True)


def gradient_magnitude(img: LinearImage) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel central-difference gradient magnitude and its validity.

    A pixel is usable only when it and its four neighbours are valid in the
    source, so masked pixels never leak into the result.
    """
    data, mask = img.data, img.mask
    h, w = mask.shape
    mag = np.zeros_like(data)
    ok = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return mag, ok
    gx = 0.5 * (data[1:-1, 2:] - data[1:-1, :-2])
    gy = 0.5 * (data[2:, 1:-1] - data[:-2, 1:-1])
    mag[1:-1, 1:-1] = np.sqrt(gx ** 2 + gy ** 2)
    ok[1:-1, 1:-1] = (mask[1:-1, 1:-1] & mask[1:-1, 2:] & mask[1:-1, :-2]
                      & mask[2:, 1:-1] & mask[:-2, 1:-1])
    return mag, ok


def build_histogram(
    img: LinearImage,
    geom: HistogramGeometry | None = None,
    feature: Feature | str = Feature.INTENSITY,
    dark_threshold: float = defaults.DARK_THRESHOLD,
    weighted: bool = True,
) -> ChromaHistogram:
    """Accumulate a normalized wrapped chroma histogram from valid pixels.

    For ``intensity`` each valid pixel with every channel above
    ``dark_threshold`` adds ``||I(p)||`` (or 1 if ``weighted`` is False).
    For ``gradient-magnitude`` the pixel values are first replaced by the
    per-channel gradient magnitude, and pixels with a zero channel are
    skipped.

    Raises:
        ValueError: no pixel contributes.
    """
    geom = geom or HistogramGeometry()
    feature = Feature(feature)
    if feature is Feature.INTENSITY:
        values = img.data
        use = img.mask & np.all(values > dark_threshold, axis=-1)
    else:
        values, ok = gradient_magnitude(img)
        use = ok & np.all(values > 0, axis=-1)
    pix = values[use]
    if pix.shape[0] == 0:
        raise ValueError(f"no pixels contribute to the {feature.value} histogram")
    uv = rgb_to_uv(pix)
    iu, iv = geom.bin_index(uv[:, 0], uv[:, 1])
    weight = np.linalg.norm(pix, axis=1) if weighted else np.ones(pix.shape[0])
    mass = np.zeros(geom.n * geom.n)
    np.add.at(mass, iu * geom.n + iv, weight)
    mass = mass.reshape(geom.n, geom.n)
    return ChromaHistogram(geom, mass / mass.sum(), feature)


def _as_map(h) -> np.ndarray:
    return h.mass if isinstance(h, ChromaHistogram) else np.asarray(h, dtype=np.float64)


def circular_convolve_fft(h: ChromaHistogram | np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Toroidal convolution ``out[i,j] = sum_ab h[a,b] * filt[i-a, j-b]`` via FFT.

    Raises:
        ValueError: shapes differ.
        ArithmeticError: the inverse transform has a non-negligible imaginary
            part (cannot happen for real inputs barring numerical failure).
    """
    a = _as_map(h)
    f = np.asarray(filt, dtype=np.float64)
    if a.shape != f.shape:
        raise ValueError(f"filter shape {f.shape} does not match histogram {a.shape}")
    out = np.fft.ifft2(np.fft.fft2(a) * np.fft.fft2(f))
    scale = max(1.0, float(np.abs(out.real).max()))
    if np.abs(out.imag).max() > _IMAG_TOL * scale:
        raise ArithmeticError("imaginary residue in circular convolution")
    return out.real


def circular_correlate_fft(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``out[d] = sum_i g[i] * h[i-d]``, the adjoint of convolving with ``h``."""
    out = np.fft.ifft2(np.fft.fft2(g) * np.conj(np.fft.fft2(h)))
    return out.real


def _wrap_nearest_zero(x: np.ndarray | float, period: float):
    """Representative of ``x`` modulo ``period`` in ``[-period/2, period/2)``."""
    return x - period * np.floor(np.asarray(x) / period + 0.5)


def circular_centroid(p: np.ndarray, geom: HistogramGeometry) -> np.ndarray:
    """Decode a wrapped distribution to a single ``(u, v)``.

    Each axis uses the phase of its first circular moment; the result is the
    torus representative nearest gray ``(0, 0)``.

    Raises:
        DegeneratePosterior: zero mass, or a first moment so small its phase
            is meaningless (e.g. a uniform map).
    """
    p = np.asarray(p, dtype=np.float64)
    n = geom.n
    total = p.sum()
    if not total > 0:
        raise DegeneratePosterior("degenerate posterior: zero total mass")
    theta = 2 * np.pi * np.arange(n) / n
    phasor = np.exp(1j * theta)
    coords = []
    for axis in (0, 1):
        marginal = p.sum(axis=1 - axis) / total
        moment = np.dot(marginal, phasor)
        if abs(moment) < _DEGENERATE_MOMENT:
            raise DegeneratePosterior("degenerate posterior: first circular moment vanishes")
        coords.append(np.angle(moment) * n / (2 * np.pi))
    u = geom.origin[0] + coords[0] * geom.bin_size
    v = geom.origin[1] + coords[1] * geom.bin_size
    return np.array([_wrap_nearest_zero(u, geom.period), _wrap_nearest_zero(v, geom.period)])


# ---------------------------------------------------------------------------
# text dump


def format_histogram(h: ChromaHistogram) -> str:
    g = h.geometry
    lines = [f"# chroma-histogram feature={h.feature.value}",
             f"{g.n} {g.bin_size!r} {g.origin[0]!r} {g.origin[1]!r}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in h.mass]
    return "\n".join(lines) + "\n"


def dump_histogram(h: ChromaHistogram, path: str | os.PathLike) -> None:
    """Write ``n bin_size u0 v0`` then ``n`` rows of ``n`` masses."""
    atomic_write_text(path, format_histogram(h))


def load_histogram(path: str | os.PathLike) -> ChromaHistogram:
    lines = Path(path).read_text().splitlines()
    feature = Feature.INTENSITY
    if lines and lines[0].startswith("#"):
        tag = lines.pop(0)
        if "feature=" in tag:
            feature = Feature(tag.split("feature=", 1)[1].strip())
    n_s, bs, u0, v0 = lines[0].split()
    geom = HistogramGeometry(int(n_s), float(bs), (float(u0), float(v0)))
    mass = np.array([[float(x) for x in ln.split()] for ln in lines[1:1 + geom.n]])
    return ChromaHistogram(geom, mass, feature)
