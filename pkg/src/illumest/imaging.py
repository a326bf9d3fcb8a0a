"""Linear RGB image container, file I/O and diagonal white-balance correction.

Images are held as float64 arrays of shape ``(height, width, 3)`` with values
normalized to ``[0, 1]`` plus a boolean validity mask.  Nothing here applies
or undoes a display gamma unless asked to.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from . import defaults
from ._io import atomic_write_bytes


class ImageError(ValueError):
    """Raised for unreadable, malformed or unsupported image files."""


@dataclass(frozen=True)
class PreprocessConfig:
    """How raw file counts become a :class:`LinearImage`.

    Attributes:
        black_level: Sensor offset in raw counts; a scalar or one value per
            channel.
        white_point: Raw count treated as full scale.  ``None`` uses the
            file's maximum code value (``2**bits - 1`` or the PPM maxval).
        saturation_fraction: Normalized level at or above which a channel is
            considered clipped.
        dark_threshold: Pixels whose channels are all below this normalized
            level are masked out.
        gamma: Optional decoding exponent applied as ``v ** gamma`` after
            normalization, for files that are not already linear.
        allow_8bit: 8-bit files are only accepted when the caller vouches
            that they hold linear data.
    """

    black_level: float | Sequence[float] = 0.0
    white_point: float | None = None
    saturation_fraction: float = defaults.SATURATION_FRACTION
    dark_threshold: float = defaults.DARK_THRESHOLD
    gamma: float | None = None
    allow_8bit: bool = False

    def __post_init__(self):
        if not 0.0 < self.saturation_fraction <= 1.0:
            raise ValueError(f"saturation_fraction must be in (0, 1], got {self.saturation_fraction}")
        if np.any(np.asarray(self.black_level, dtype=float) < 0):
            raise ValueError("black_level must be >= 0")
        if np.asarray(self.black_level).size not in (1, 3):
            raise ValueError("black_level must be a scalar or have one value per channel")
        if self.dark_threshold < 0:
            raise ValueError("dark_threshold must be >= 0")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def black_levels(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.black_level, dtype=np.float64), (3,)).copy()


def compute_mask(
    data: np.ndarray,
    saturation_fraction: float = defaults.SATURATION_FRACTION,
    dark_threshold: float = defaults.DARK_THRESHOLD,
) -> np.ndarray:
    """True where a pixel is neither clipped in any channel nor dark in all."""
    saturated = np.any(data >= saturation_fraction, axis=-1)
    dark = np.all(data < dark_threshold, axis=-1)
    return ~(saturated | dark)


@dataclass(frozen=True)
class LinearImage:
    """Row-major linear RGB raster with a per-pixel validity mask.

    ``data`` has shape ``(height, width, 3)``; ``mask`` has shape
    ``(height, width)`` and is True for pixels usable in estimation.  Both
    arrays are made read-only on construction.
    """

    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageError(f"expected (height, width, 3) data, got shape {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ImageError("zero-dimension image")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ImageError("image values must be finite and >= 0")
        if self.mask is None:
            mask = compute_mask(data)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ImageError(f"mask shape {mask.shape} does not match image {data.shape[:2]}")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def valid_pixels(self) -> np.ndarray:
        """``(k, 3)`` array of the valid pixels in row-major order."""
        return self.data[self.mask]


def normalize_illuminant(rgb: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return ``rgb`` scaled to unit Euclidean norm.

    Raises:
        ValueError: if any component is negative or non-finite, or all are 0.
    """
    v = np.asarray(rgb, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise ValueError(f"illuminant must be finite and nonnegative, got {v}")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("illuminant must have at least one positive component")
    return v / norm


# ---------------------------------------------------------------------------
# file formats


def _read_ppm(raw: bytes) -> tuple[np.ndarray, int]:
    if not raw.startswith(b"P6"):
        raise ImageError("only binary RGB PPM (P6) is supported")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise ImageError("truncated PPM header")
        c = raw[pos:pos + 1]
        if c == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace() and raw[end:end + 1] != b"#":
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageError(f"malformed PPM header: {tokens}") from exc
    if width <= 0 or height <= 0:
        raise ImageError("zero-dimension image")
    if not 0 < maxval < 65536:
        raise ImageError(f"unsupported PPM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * 3
    body = raw[pos:pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ImageError("truncated PPM raster")
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width, 3)
    return arr.astype(np.float64), maxval


def _read_png(raw: bytes) -> tuple[np.ndarray, int]:
    arr = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageError("could not decode PNG")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected a 3-channel RGB PNG, got shape {arr.shape}")
    if arr.dtype == np.uint16:
        maxval = 65535
    elif arr.dtype == np.uint8:
        maxval = 255
    else:
        raise ImageError(f"unsupported bit depth {arr.dtype}")
    return arr[:, :, ::-1].astype(np.float64), maxval


def read_raw(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read raw counts and the format's maximum code value."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if raw.startswith(b"P6"):
        return _read_ppm(raw)
    if raw.startswith(b"\x89PNG"):
        return _read_png(raw)
    raise ImageError(f"{path}: unsupported format (expected PPM P6 or PNG)")


def load_image(path: str | os.PathLike, cfg: PreprocessConfig | None = None) -> LinearImage:
    """Load a PPM or PNG file into a normalized :class:`LinearImage`.

    Black level is subtracted per channel and clamped at zero, then values
    are divided by ``white_point - black_level`` and clipped to 1.

    Raises:
        ImageError: unreadable file, unsupported format or bit depth, or
            zero-dimension image.
    """
    cfg = cfg or PreprocessConfig()
    counts, maxval = read_raw(path)
    if maxval <= 255 and not cfg.allow_8bit:
        raise ImageError(f"{path}: unsupported bit depth (8-bit input needs allow_8bit)")
    white = float(maxval if cfg.white_point is None else cfg.white_point)
    black = cfg.black_levels()
    span = white - black
    if np.any(span <= 0):
        raise ImageError(f"white point {white} must exceed black level {black}")
    data = np.clip((counts - black) / span, 0.0, 1.0)
    if cfg.gamma is not None:
        data = data ** cfg.gamma
    mask = compute_mask(data, cfg.saturation_fraction, cfg.dark_threshold)
    return LinearImage(data, mask)


def encode_png16(data: np.ndarray) -> bytes:
    counts = np.round(np.clip(data, 0.0, 1.0) * 65535.0).astype(np.uint16)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(counts[:, :, ::-1]))
    if not ok:
        raise ImageError("PNG encoding failed")
    return buf.tobytes()


def save_png16(img: LinearImage | np.ndarray, path: str | os.PathLike) -> None:
    """Write a 16-bit RGB PNG, values clipped to [0, 1]; the write is atomic."""
    data = img.data if isinstance(img, LinearImage) else np.asarray(img, dtype=np.float64)
    atomic_write_bytes(path, encode_png16(data))


def save_ppm16(counts: np.ndarray, path: str | os.PathLike, maxval: int = 65535) -> None:
    """Write integer raw counts as a 16-bit binary PPM."""
    counts = np.asarray(counts)
    h, w, _ = counts.shape
    header = f"P6\n{w} {h}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + counts.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# processing


def apply_white_balance(
    img: LinearImage,
    est: Sequence[float] | np.ndarray,
    out_max: float = 1.0,
    tolerance: float = defaults.ILLUMINANT_TOLERANCE,
) -> LinearImage:
    """Divide each channel by the illuminant (von Kries correction).

    Gains are anchored on green, ``gain_c = est_g / est_c``, so a neutral
    estimate leaves the image unchanged.  The mask is carried over as is.

    Raises:
        ValueError: if any illuminant component is at or below ``tolerance``.
    """
    e = normalize_illuminant(est)
    if np.any(e <= tolerance):
        raise ValueError(f"illuminant component too small for division: {e}")
    anchor = e[1] if e[1] > 0 else e.max()
    out = np.clip(img.data * (anchor / e), 0.0, out_max)
    return LinearImage(out, img.mask)


def downsample(img: LinearImage, factor: int) -> LinearImage:
    """Box-average ``factor x factor`` blocks over valid pixels only.

    Edge blocks that do not fill a whole block are averaged over the pixels
    they contain.  A block is valid when at least half of its source pixels
    are; blocks without any valid pixel keep the plain average of all.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img
    h, w = img.height, img.width
    if factor > h and factor > w:
        raise ValueError(f"factor {factor} exceeds both image dimensions {h}x{w}")
    oh, ow = -(-h // factor), -(-w // factor)
    ph, pw = oh * factor - h, ow * factor - w
    mask = img.mask.astype(np.float64)
    present = np.pad(np.ones((h, w)), ((0, ph), (0, pw)))
    data = np.pad(img.data, ((0, ph), (0, pw), (0, 0)))
    mask = np.pad(mask, ((0, ph), (0, pw)))

    def blocks(a):
        return a.reshape(oh, factor, ow, factor, *a.shape[2:]).sum(axis=(1, 3))

    n_src = blocks(present)
    n_valid = blocks(mask)
    sum_valid = blocks(data * mask[..., None])
    sum_all = blocks(data)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(
            (n_valid > 0)[..., None],
            sum_valid / np.maximum(n_valid, 1)[..., None],
            sum_all / n_src[..., None],
        )
    return LinearImage(out, 2 * n_valid >= n_src)
