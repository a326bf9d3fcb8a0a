"""Synthetic Lambertian scenes with known illuminant.

Scenes are grids of square patches.  Each patch has a constant reflectance,
either achromatic or drawn from a palette.  Surface texture varies pigment
density per pixel: the albedo is ``rho ** t`` with log-normal ``t``, so
achromatic patches stay achromatic while colored patches change saturation
as well as brightness.  The image is ``albedo * light`` plus optional
Gaussian sensor noise.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import defaults
from ._io import atomic_write_bytes, read_key_value
from .evaluation import GroundTruthTable
from .imaging import LinearImage, compute_mask, encode_png16, normalize_illuminant

GRAY_LEVELS = (0.2, 0.8)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    gray_fraction: float = 0.3
    albedo_palette: tuple[tuple[float, float, float], ...] = ((0.7, 0.3, 0.2), (0.2, 0.5, 0.7))
    illuminant: tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture_amplitude: float = 0.2
    noise_sigma: float = 0.0
    seed: int = defaults.SEED
    patch_size: int = 16

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene must be at least 1x1")
        if not 0.0 <= self.gray_fraction <= 1.0:
            raise ValueError("gray_fraction must be in [0, 1]")
        if len(self.albedo_palette) == 0:
            raise ValueError("albedo_palette must not be empty")
        pal = np.asarray(self.albedo_palette, dtype=float)
        if pal.ndim != 2 or pal.shape[1] != 3 or np.any(pal <= 0) or np.any(pal > 1):
            raise ValueError("palette entries must be RGB triples in (0, 1]")
        if len(self.illuminant) != 3 or min(self.illuminant) <= 0:
            raise ValueError("illuminant must be an all-positive RGB triple")
        if self.texture_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("texture_amplitude and noise_sigma must be >= 0")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass(frozen=True)
class Scene:
    """A rendered scene and the fields it was built from.

    ``image.data == albedo * light`` exactly when ``noise_sigma`` is 0.
    ``light`` is the illuminant scaled to a peak of 1; ``illuminant`` is its
    unit-norm direction.
    """

    image: LinearImage
    illuminant: np.ndarray
    light: np.ndarray
    albedo: np.ndarray
    gray_mask: np.ndarray


def render(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    ph = -(-spec.height // spec.patch_size)
    pw = -(-spec.width // spec.patch_size)
    n_patches = ph * pw
    n_gray = int(round(spec.gray_fraction * n_patches))
    is_gray = np.zeros(n_patches, dtype=bool)
    is_gray[rng.permutation(n_patches)[:n_gray]] = True

    palette = np.asarray(spec.albedo_palette, dtype=np.float64)
    picks = rng.integers(0, len(palette), size=n_patches)
    levels = rng.uniform(*GRAY_LEVELS, size=n_patches)
    rho = palette[picks]
    rho[is_gray] = levels[is_gray, None]

    def expand(a):
        a = a.reshape(ph, pw, *a.shape[1:])
        a = np.repeat(np.repeat(a, spec.patch_size, axis=0), spec.patch_size, axis=1)
        return a[:spec.height, :spec.width]

    rho_px = expand(rho)
    gray_px = expand(is_gray)
    t = np.exp(spec.texture_amplitude * rng.standard_normal((spec.height, spec.width)))
    albedo = rho_px ** t[..., None]

    light = np.asarray(spec.illuminant, dtype=np.float64)
    light = light / light.max()
    data = albedo * light
    if spec.noise_sigma > 0:
        data = data + spec.noise_sigma * rng.standard_normal(data.shape)
    data = np.clip(data, 0.0, 1.0)
    return Scene(LinearImage(data, compute_mask(data)), normalize_illuminant(light), light, albedo, gray_px)


def generate(spec: SceneSpec) -> tuple[LinearImage, np.ndarray]:
    """Render ``spec``; returns the image and the unit-norm illuminant."""
    scene = render(spec)
    return scene.image, scene.illuminant


def sample_cap(rng: np.random.Generator, cap_degrees: float) -> np.ndarray:
    """Uniform direction within ``cap_degrees`` of the gray axis."""
    axis = np.full(3, 1 / math.sqrt(3))
    e1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
    e2 = np.cross(axis, e1)
    cos_t = rng.uniform(math.cos(math.radians(cap_degrees)), 1.0)
    sin_t = math.sqrt(max(0.0, 1 - cos_t * cos_t))
    phi = rng.uniform(0.0, 2 * math.pi)
    return cos_t * axis + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)


@dataclass(frozen=True)
class SpecRanges:
    """Bounds from which :func:`generate_dataset` draws each scene."""

    width: int = 128
    height: int = 128
    patch_size: int = 16
    gray_fraction_min: float = 0.1
    gray_fraction_max: float = 0.5
    colors_min: int = 2
    colors_max: int = 6
    albedo_min: float = 0.05
    albedo_max: float = 0.9
    texture_amplitude: float = 0.2
    noise_sigma: float = 0.0
    cap_degrees: float = defaults.CAP_DEGREES

    def __post_init__(self):
        if not 0 <= self.gray_fraction_min <= self.gray_fraction_max <= 1:
            raise ValueError("need 0 <= gray_fraction_min <= gray_fraction_max <= 1")
        if not 1 <= self.colors_min <= self.colors_max:
            raise ValueError("need 1 <= colors_min <= colors_max")
        if not 0 < self.albedo_min <= self.albedo_max <= 1:
            raise ValueError("need 0 < albedo_min <= albedo_max <= 1")
        if not 0 <= self.cap_degrees < 35:
            raise ValueError("cap_degrees must be in [0, 35) to keep lights positive")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SpecRanges":
        """Read ``key=value`` overrides; unknown keys are an error."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in read_key_value(path).items():
            if key not in types:
                raise ValueError(f"{path}: unknown key {key!r}")
            kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
        return cls(**kwargs)


def sample_spec(rng: np.random.Generator, ranges: SpecRanges) -> SceneSpec:
    n_colors = int(rng.integers(ranges.colors_min, ranges.colors_max + 1))
    palette = rng.uniform(ranges.albedo_min, ranges.albedo_max, size=(n_colors, 3))
    return SceneSpec(
        width=ranges.width,
        height=ranges.height,
        patch_size=ranges.patch_size,
        gray_fraction=float(rng.uniform(ranges.gray_fraction_min, ranges.gray_fraction_max)),
        albedo_palette=tuple(tuple(float(x) for x in c) for c in palette),
        illuminant=tuple(float(x) for x in sample_cap(rng, ranges.cap_degrees)),
        texture_amplitude=ranges.texture_amplitude,
        noise_sigma=ranges.noise_sigma,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_specs(count: int, ranges: SpecRanges | None = None, seed: int = defaults.SEED) -> list[SceneSpec]:
    """``count`` scene specs, each drawn from its own child seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ranges = ranges or SpecRanges()
    children = np.random.SeedSequence(seed).spawn(count)
    return [sample_spec(np.random.default_rng(c), ranges) for c in children]


def generate_dataset(
    out_dir: str | os.PathLike,
    count: int,
    ranges: SpecRanges | None = None,
    seed: int = defaults.SEED,
) -> GroundTruthTable:
    """Write ``img_%05d.png`` files and ``gt.csv`` under ``out_dir``.

    Raises:
        OSError: the directory cannot be created or written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = GroundTruthTable()
    for i, spec in enumerate(sample_specs(count, ranges, seed)):
        image, illum = generate(spec)
        name = f"img_{i:05d}.png"
        atomic_write_bytes(out / name, encode_png16(image.data))
        table[name] = illum
    table.write_csv(out / "gt.csv")
    return table


def color_dominated_spec(
    hue_rgb: Sequence[float], illuminant: Sequence[float], seed: int, size: int = 128, n_shades: int = 3
) -> SceneSpec:
    """A scene with no gray patches, painted in shades of a single hue."""
    base = np.asarray(hue_rgb, dtype=float)
    shades = tuple(tuple(float(x) for x in base * s) for s in np.linspace(1.0, 0.5, n_shades))
    return SceneSpec(width=size, height=size, gray_fraction=0.0, albedo_palette=shades,
                     illuminant=tuple(illuminant), seed=seed)
