"""Angular error, summary statistics and k-fold cross-validation."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from ._io import atomic_write_text
from .imaging import LinearImage, normalize_illuminant

Estimator = Callable[[Any], np.ndarray]
Trainer = Callable[[Sequence[Any]], Estimator]


def angular_error(a, b) -> float:
    """Recovery angular error in degrees between two illuminant directions.

    Inputs are renormalized, so any positive scale is accepted.
    """
    a = normalize_illuminant(a)
    b = normalize_illuminant(b)
    return math.degrees(math.acos(min(1.0, max(-1.0, float(np.dot(a, b))))))


def _quantile(sorted_vals: Sequence[float], q: float) -> float:
    # linear interpolation between order statistics at position (k-1)*q
    pos = (len(sorted_vals) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    frac = pos - lo
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * frac


@dataclass(frozen=True)
class Aggregates:
    mean: float
    median: float
    trimean: float
    best25_mean: float
    worst25_mean: float


def aggregate(errors: Sequence[float]) -> Aggregates:
    """Mean, median, trimean and best/worst-quarter means of ``errors``.

    Quartiles interpolate linearly between order statistics; the best and
    worst quarters each hold ``ceil(k/4)`` values.

    Raises:
        ValueError: empty input.
    """
    vals = sorted(float(e) for e in errors)
    k = len(vals)
    if k == 0:
        raise ValueError("cannot aggregate an empty error list")
    q1, q2, q3 = (_quantile(vals, q) for q in (0.25, 0.5, 0.75))
    quarter = math.ceil(k / 4)
    return Aggregates(
        mean=math.fsum(vals) / k,
        median=q2,
        trimean=(q1 + 2 * q2 + q3) / 4,
        best25_mean=math.fsum(vals[:quarter]) / quarter,
        worst25_mean=math.fsum(vals[-quarter:]) / quarter,
    )


@dataclass(frozen=True)
class EvaluationReport:
    """Per-image angular errors (degrees) and their aggregates."""

    per_image: tuple[tuple[str, float], ...]
    stats: Aggregates = field(init=False)

    def __post_init__(self):
        per_image = tuple((str(p), float(e)) for p, e in self.per_image)
        for p, e in per_image:
            if not 0.0 <= e <= 180.0:
                raise ValueError(f"angular error out of range for {p}: {e}")
        object.__setattr__(self, "per_image", per_image)
        object.__setattr__(self, "stats", aggregate([e for _, e in per_image]))

    @property
    def mean(self) -> float:
        return self.stats.mean

    @property
    def median(self) -> float:
        return self.stats.median

    @property
    def trimean(self) -> float:
        return self.stats.trimean

    @property
    def best25_mean(self) -> float:
        return self.stats.best25_mean

    @property
    def worst25_mean(self) -> float:
        return self.stats.worst25_mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "angular_error_deg"])
        for p, e in self.per_image:
            w.writerow([p, f"{e:.10f}"])
        buf.write("\n")
        w.writerow(["statistic", "value"])
        for name in ("mean", "median", "trimean", "best25_mean", "worst25_mean"):
            w.writerow([name, f"{getattr(self.stats, name):.10f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "per_image": [{"image": p, "angular_error_deg": e} for p, e in self.per_image],
            "aggregates": {
                "mean": self.mean,
                "median": self.median,
                "trimean": self.trimean,
                "best25_mean": self.best25_mean,
                "worst25_mean": self.worst25_mean,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# ground truth


class GroundTruthTable(dict):
    """Image identifier -> unit-norm ground-truth illuminant."""

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "GroundTruthTable":
        """Read an ``image,r,g,b`` CSV; illuminants are normalized on load.

        Raises:
            ValueError: bad header, duplicate identifier or invalid illuminant.
        """
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["image", "r", "g", "b"]:
                raise ValueError(f"{path}: expected header image,r,g,b, got {header}")
            for lineno, row in enumerate(reader, 2):
                if not row or not "".join(row).strip():
                    continue
                if len(row) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 columns")
                key = row[0].strip()
                if key in table:
                    raise ValueError(f"{path}:{lineno}: duplicate image id {key!r}")
                rgb = [float(x) for x in row[1:]]
                if min(rgb) <= 0:
                    raise ValueError(f"{path}:{lineno}: illuminant components must be positive")
                table[key] = normalize_illuminant(rgb)
        return table

    def to_csv(self) -> str:
        lines = ["image,r,g,b"]
        for key, rgb in self.items():
            lines.append(f"{key},{float(rgb[0])!r},{float(rgb[1])!r},{float(rgb[2])!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_csv())


# ---------------------------------------------------------------------------
# estimators and protocols


def gray_world_baseline(img: LinearImage) -> np.ndarray:
    """Normalized mean color of the valid pixels."""
    pix = img.valid_pixels()
    if pix.shape[0] == 0:
        raise ValueError("gray world needs at least one valid pixel")
    return normalize_illuminant(pix.mean(axis=0))


@dataclass(frozen=True)
class Sample:
    """An image with its ground truth, as consumed by :func:`evaluate`."""

    source_path: str
    truth: np.ndarray
    image: LinearImage


def evaluate(samples: Sequence[Sample], estimator: Estimator) -> EvaluationReport:
    return EvaluationReport(tuple(
        (s.source_path, angular_error(estimator(s), s.truth)) for s in samples
    ))


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` split into ``k`` contiguous folds.

    Fold sizes differ by at most one.

    Raises:
        ValueError: ``k < 2`` or ``k > n``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} folds exceeds dataset size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def cross_validate(
    samples: Sequence[Sample], k: int, trainer: Trainer, seed: int = 0
) -> EvaluationReport:
    """k-fold cross-validation with errors pooled before aggregation.

    ``trainer`` receives the training samples of a fold and returns an
    estimator applied to each held-out sample.  Per-image rows come back in
    the original dataset order, so a learning-free method yields the same
    report as :func:`evaluate`.
    """
    folds = kfold_indices(len(samples), k, seed)
    errors: dict[int, float] = {}
    for held_out in folds:
        held = set(held_out.tolist())
        train_set = [s for i, s in enumerate(samples) if i not in held]
        estimator = trainer(train_set)
        for i in held_out:
            s = samples[i]
            errors[int(i)] = angular_error(estimator(s), s.truth)
    return EvaluationReport(tuple((samples[i].source_path, errors[i]) for i in range(len(samples))))


def resolve_image(data_dir: str | os.PathLike, image_id: str) -> Path:
    """File for a ground-truth identifier, trying common extensions if absent."""
    base = Path(data_dir) / image_id
    if base.is_file():
        return base
    for ext in (".png", ".ppm", ".PNG", ".PPM"):
        cand = base.with_name(base.name + ext)
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"no image file for id {image_id!r} in {data_dir}")
