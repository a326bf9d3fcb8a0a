"""Learned illuminant estimation on wrapped log-chroma histograms.

The model convolves one histogram per feature channel with a learned filter,
adds a learned bias map, and reads the illuminant off the softmax of that
score map.  All convolutions run in the Fourier domain; training is
full-batch gradient descent with momentum on a bilinear-smeared
cross-entropy.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import defaults
from ._io import atomic_write_bytes
from .chroma import (
    FEATURES,
    ChromaHistogram,
    Feature,
    HistogramGeometry,
    build_histogram,
    circular_centroid,
    circular_convolve_fft,
    rgb_to_uv,
    uv_to_rgb,
)
from .imaging import LinearImage

log = logging.getLogger(__name__)

MAGIC = b"FFCCMDL1"
_HEADER = struct.Struct("<IdddBI")


class ModelNotTrained(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = defaults.LEARNING_RATE
    momentum: float = defaults.MOMENTUM
    epochs: int = defaults.EPOCHS
    l2_filter: float = defaults.L2_FILTER
    l2_bias: float = defaults.L2_BIAS
    # zero initialization draws nothing from the seed; kept so runs record it
    seed: int = defaults.SEED

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if self.l2_filter < 0 or self.l2_bias < 0:
            raise ValueError("regularization weights must be >= 0")


@dataclass(frozen=True, eq=False)
class FfccModel:
    """Per-channel filters ``(channels, n, n)`` and a bias map ``(n, n)``."""

    geometry: HistogramGeometry
    filters: np.ndarray
    bias: np.ndarray
    trained: bool = False
    loss_trace: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        n = self.geometry.n
        filters = np.array(self.filters, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if filters.ndim != 3 or filters.shape[1:] != (n, n):
            raise ValueError(f"filters must have shape (channels, {n}, {n}), got {filters.shape}")
        if bias.shape != (n, n):
            raise ValueError(f"bias must have shape ({n}, {n}), got {bias.shape}")
        if not (np.all(np.isfinite(filters)) and np.all(np.isfinite(bias))):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "bias", bias)

    def __eq__(self, other):
        if not isinstance(other, FfccModel):
            return NotImplemented
        return (self.geometry == other.geometry and self.trained == other.trained
                and np.array_equal(self.filters, other.filters) and np.array_equal(self.bias, other.bias))

    __hash__ = None

    @classmethod
    def zeros(cls, geometry: HistogramGeometry, channels: int = len(FEATURES)) -> "FfccModel":
        n = geometry.n
        return cls(geometry, np.zeros((channels, n, n)), np.zeros((n, n)))


@dataclass(frozen=True)
class LabeledSample:
    histograms: tuple[ChromaHistogram, ...]
    truth_uv: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        geoms = {h.geometry for h in self.histograms}
        if len(geoms) != 1:
            raise ValueError("sample histograms must share one geometry")
        truth = np.asarray(self.truth_uv, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(truth)):
            raise ValueError("truth_uv must be finite")
        object.__setattr__(self, "truth_uv", truth)

    @property
    def geometry(self) -> HistogramGeometry:
        return self.histograms[0].geometry


def image_histograms(
    img: LinearImage,
    geom: HistogramGeometry,
    dark_threshold: float = defaults.DARK_THRESHOLD,
) -> tuple[ChromaHistogram, ...]:
    """Intensity and gradient histograms for one image.

    An image without usable gradients (e.g. perfectly flat) gets an all-zero
    gradient histogram, which contributes nothing to the score.
    """
    hists = [build_histogram(img, geom, Feature.INTENSITY, dark_threshold)]
    try:
        hists.append(build_histogram(img, geom, Feature.GRADIENT, dark_threshold))
    except ValueError:
        hists.append(ChromaHistogram(geom, np.zeros((geom.n, geom.n)), Feature.GRADIENT, normalized=False))
    return tuple(hists)


def _check_geometry(model: FfccModel, hists: Sequence[ChromaHistogram]) -> None:
    if len(hists) != model.filters.shape[0]:
        raise ValueError(f"model has {model.filters.shape[0]} channels, got {len(hists)} histograms")
    for h in hists:
        if h.geometry != model.geometry:
            raise ValueError("histogram geometry does not match the model")


def score(model: FfccModel, hists: Sequence[ChromaHistogram]) -> np.ndarray:
    """``sum_k hist_k (*) filter_k + bias`` with toroidal convolution."""
    _check_geometry(model, hists)
    s = model.bias.copy()
    for h, f in zip(hists, model.filters):
        s += circular_convolve_fft(h, f)
    return s


def posterior(s: np.ndarray) -> np.ndarray:
    """Softmax over all cells of a score map."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def estimate_ffcc(
    model: FfccModel, img: LinearImage, dark_threshold: float = defaults.DARK_THRESHOLD
) -> np.ndarray:
    """Unit-norm illuminant from the circular mean of the model's posterior.

    Raises:
        ModelNotTrained: ``model.trained`` is False.
        DegeneratePosterior: the posterior has no usable circular mean.
    """
    if not model.trained:
        raise ModelNotTrained("model has not been trained")
    hists = image_histograms(img, model.geometry, dark_threshold)
    p = posterior(score(model, hists))
    return uv_to_rgb(circular_centroid(p, model.geometry))


def truth_weights(truth_uv, geom: HistogramGeometry) -> np.ndarray:
    """Bilinear weights of the truth's fractional bin over its 2x2 neighbours."""
    fu, fv = geom.fractional_index(truth_uv[0], truth_uv[1])
    iu, iv = int(np.floor(fu)), int(np.floor(fv))
    au, av = float(fu - iu), float(fv - iv)
    w = np.zeros((geom.n, geom.n))
    n = geom.n
    for du, wu in ((0, 1 - au), (1, au)):
        for dv, wv in ((0, 1 - av), (1, av)):
            w[(iu + du) % n, (iv + dv) % n] += wu * wv
    return w


def loss(
    model: FfccModel,
    sample: LabeledSample,
    l2_filter: float = 0.0,
    l2_bias: float = 0.0,
) -> float:
    """``-log(sum_c w_c P_c)`` over the truth's bilinear neighbourhood plus L2."""
    s = score(model, sample.histograms)
    w = truth_weights(sample.truth_uv, model.geometry)
    data = float(logsumexp(s) - logsumexp(s, b=w))
    reg = l2_filter * float(np.sum(model.filters ** 2)) + l2_bias * float(np.sum(model.bias ** 2))
    return max(data, 0.0) + reg


class _Batch:
    """Pre-transformed histograms and truth weights for a training set."""

    def __init__(self, samples: Sequence[LabeledSample]):
        geom = samples[0].geometry
        for s in samples:
            if s.geometry != geom:
                raise ValueError("all samples must share one histogram geometry")
        self.geometry = geom
        self.h = np.stack([[h.mass for h in s.histograms] for s in samples])
        self.hf = np.fft.fft2(self.h)
        self.w = np.stack([truth_weights(s.truth_uv, geom) for s in samples])

    def __len__(self):
        return self.h.shape[0]


def objective(
    filters: np.ndarray, bias: np.ndarray, batch: _Batch, l2_filter: float, l2_bias: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over the batch and its gradients w.r.t. filters and bias.

    The derivative w.r.t. the score map is ``P - T``, with ``T`` the posterior
    restricted to the truth neighbourhood and renormalized.  Backpropagating
    through a convolution is a correlation with the same histogram, done in
    the Fourier domain.
    """
    n_samples = len(batch)
    sf = np.einsum("bkij,kij->bij", batch.hf, np.fft.fft2(filters))
    s = np.fft.ifft2(sf).real + bias
    lse = logsumexp(s, axis=(1, 2), keepdims=True)
    lse_w = logsumexp(s, axis=(1, 2), b=batch.w, keepdims=True)
    data = float(np.sum(lse - lse_w)) / n_samples
    p = np.exp(s - lse)
    t = batch.w * np.exp(s - lse_w)
    g = (p - t) / n_samples
    gf = np.fft.fft2(g)
    grad_filters = np.fft.ifft2(np.einsum("bij,bkij->kij", gf, np.conj(batch.hf))).real
    grad_bias = g.sum(axis=0)
    value = (data + l2_filter * float(np.sum(filters ** 2)) + l2_bias * float(np.sum(bias ** 2)))
    grad_filters += 2 * l2_filter * filters
    grad_bias = grad_bias + 2 * l2_bias * bias
    return value, grad_filters, grad_bias


def train(
    samples: Sequence[LabeledSample],
    cfg: TrainConfig | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> FfccModel:
    """Fit filters and bias by full-batch heavy-ball gradient descent.

    Parameters start at zero (uniform posterior).  The loss recorded for an
    epoch is the objective at the parameters entering that epoch; the full
    trace is kept on the returned model as ``loss_trace``.

    Raises:
        ValueError: fewer than two samples or mixed geometries.
        TrainingDiverged: the objective becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    if len(samples) < 2:
        raise ValueError("training needs at least two samples")
    batch = _Batch(samples)
    geom = batch.geometry
    channels = batch.h.shape[1]
    filters = np.zeros((channels, geom.n, geom.n))
    bias = np.zeros((geom.n, geom.n))
    vel_f = np.zeros_like(filters)
    vel_b = np.zeros_like(bias)
    trace: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        # overflow shows up as a non-finite loss, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            value, gf, gb = objective(filters, bias, batch, cfg.l2_filter, cfg.l2_bias)
        if not np.isfinite(value) or not (np.all(np.isfinite(gf)) and np.all(np.isfinite(gb))):
            raise TrainingDiverged(f"training diverged at epoch {epoch}: loss={value}")
        trace.append(value)
        if on_epoch is not None:
            on_epoch(epoch, value)
        vel_f = cfg.momentum * vel_f - cfg.learning_rate * gf
        vel_b = cfg.momentum * vel_b - cfg.learning_rate * gb
        filters = filters + vel_f
        bias = bias + vel_b
    log.debug("trained %d epochs, final loss %.6g", cfg.epochs, trace[-1])
    return FfccModel(geom, filters, bias, trained=True, loss_trace=tuple(trace))


def make_sample(
    img: LinearImage,
    truth_rgb,
    geom: HistogramGeometry,
    source_path: str = "",
    dark_threshold: float = defaults.DARK_THRESHOLD,
) -> LabeledSample:
    return LabeledSample(image_histograms(img, geom, dark_threshold), rgb_to_uv(truth_rgb), source_path)


# ---------------------------------------------------------------------------
# model file


def encode_model(model: FfccModel) -> bytes:
    g = model.geometry
    header = _HEADER.pack(g.n, g.bin_size, g.origin[0], g.origin[1], int(model.trained), model.filters.shape[0])
    return (MAGIC + header
            + model.filters.astype("<f8").tobytes(order="C")
            + model.bias.astype("<f8").tobytes(order="C"))


def decode_model(raw: bytes) -> FfccModel:
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    off = len(MAGIC)
    try:
        n, bin_size, u0, v0, trained, channels = _HEADER.unpack_from(raw, off)
    except struct.error as exc:
        raise ModelFormatError("truncated model header") from exc
    off += _HEADER.size
    need = (channels + 1) * n * n * 8
    if len(raw) - off != need:
        raise ModelFormatError(f"model body has {len(raw) - off} bytes, expected {need}")
    values = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    filters = values[:channels * n * n].reshape(channels, n, n)
    bias = values[channels * n * n:].reshape(n, n)
    return FfccModel(HistogramGeometry(n, bin_size, (u0, v0)), filters, bias, bool(trained))


def save_model(model: FfccModel, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_model(model))


def load_model(path: str | os.PathLike) -> FfccModel:
    return decode_model(Path(path).read_bytes())
