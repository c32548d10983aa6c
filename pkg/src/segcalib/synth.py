"""Synthetic segmentation subjects with a known per-voxel posterior.

Each subject is built from a union of random ellipses. The crisp indicator
``m`` is blurred to produce the posterior ``q``; labels are Bernoulli draws
from ``q`` and the image is the crisp indicator plus Gaussian noise. Because
``q`` is the exact sampling distribution of the labels, a predictor that
reports ``q`` as its confidence is perfectly calibrated by construction,
which provides the ground truth that real datasets cannot.

Generation is deterministic: subject ``i`` of a config draws from a Philox
stream keyed by (config.seed, i), so subjects can be produced in any order
or concurrently without changing their content. The draw order within one
subject is fixed: shape count, then per shape (axes, rotation, center),
then the label uniforms, then the image noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DataError, GenerationError, ParameterError
from .grids import Subject
from .seeding import TAG_DATASET, derive_rng

_MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Defaults give a learnable task with genuine
    boundary uncertainty (foreground/background contrast 1.0, noise 0.3,
    label blur 1.5 voxels)."""

    grid_size: int = 64
    n_shapes: tuple[int, int] = (1, 3)
    intensity_fg: float = 1.0
    intensity_bg: float = 0.0
    noise_sigma: float = 0.3
    blur_sigma: float = 1.5
    seed: int = 0
    axis_range: tuple[float, float] = (5.0, 14.0)
    margin: float = 2.0
    mask_dilate_radius: int = 0

    def __post_init__(self):
        if self.grid_size < 8:
            raise ParameterError("grid_size must be >= 8")
        lo, hi = self.n_shapes
        if not (1 <= lo <= hi):
            raise ParameterError(f"invalid n_shapes range {self.n_shapes}")
        if self.intensity_fg == self.intensity_bg:
            raise ParameterError("intensity_fg must differ from intensity_bg")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ParameterError("noise_sigma and blur_sigma must be >= 0")
        if not (0 < self.axis_range[0] <= self.axis_range[1]):
            raise ParameterError(f"invalid axis_range {self.axis_range}")
        if self.mask_dilate_radius < 0:
            raise ParameterError("mask_dilate_radius must be >= 0")


@dataclass(frozen=True)
class LatentShape:
    """An ellipse: center (row, col), semi-axes, rotation in radians."""

    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float

    def __post_init__(self):
        if self.axes[0] <= 0 or self.axes[1] <= 0:
            raise ParameterError("ellipse axes must be strictly positive")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def _mirror_indices(n: int, radius: int) -> np.ndarray:
    # Mirror boundary with the edge sample repeated: ... b a | a b c d | d c ...
    pos = np.arange(-radius, n + radius)
    folded = pos % (2 * n)
    return np.where(folded >= n, 2 * n - 1 - folded, folded)


def _blur_axis(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    n = values.shape[axis]
    padded = np.take(values, _mirror_indices(n, radius), axis=axis)
    out = np.zeros_like(values)
    window = [slice(None)] * values.ndim
    for i, weight in enumerate(kernel):
        window[axis] = slice(i, i + n)
        out += weight * padded[tuple(window)]
    return out


def gaussian_blur(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with a kernel truncated at ceil(3 sigma).

    The kernel is renormalised after truncation, so constant grids are
    preserved exactly. Boundaries are mirrored. ``sigma = 0`` is the
    identity.
    """
    arr = np.asarray(grid, dtype=np.float64)
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return arr.copy()
    kernel = _gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(arr, kernel, 0), kernel, 1)


def binary_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate a binary grid by ``radius`` applications of a 3x3 maximum."""
    out = np.asarray(mask, dtype=np.float64)
    for _ in range(radius):
        padded = np.pad(out, 1, mode="constant")
        stacked = [
            padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        ]
        out = np.maximum.reduce(stacked)
    return out


def _sample_shape(rng: np.random.Generator, config: SynthConfig) -> Optional[LatentShape]:
    lo, hi = config.axis_range
    axes = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    rotation = float(rng.uniform(0.0, math.pi))
    reach = max(axes) + config.margin
    low, high = reach, config.grid_size - 1 - reach
    if high <= low:
        return None
    center = (float(rng.uniform(low, high)), float(rng.uniform(low, high)))
    return LatentShape(center=center, axes=axes, rotation=rotation)


def rasterize_shapes(shapes: list[LatentShape], grid_size: int) -> np.ndarray:
    """Crisp {0,1} indicator of the union of ellipses at voxel centers."""
    rows, cols = np.meshgrid(
        np.arange(grid_size, dtype=np.float64),
        np.arange(grid_size, dtype=np.float64),
        indexing="ij",
    )
    mask = np.zeros((grid_size, grid_size), dtype=np.float64)
    for shape in shapes:
        dy = rows - shape.center[0]
        dx = cols - shape.center[1]
        cos_t, sin_t = math.cos(shape.rotation), math.sin(shape.rotation)
        u = dy * cos_t + dx * sin_t
        v = -dy * sin_t + dx * cos_t
        inside = (u / shape.axes[0]) ** 2 + (v / shape.axes[1]) ** 2 <= 1.0
        mask[inside] = 1.0
    return mask


def render_subject(config: SynthConfig, subject_index: int) -> Subject:
    """Generate one subject, deterministic in (config.seed, subject_index)."""
    rng = derive_rng(config.seed, TAG_DATASET, subject_index)
    n_shapes = int(rng.integers(config.n_shapes[0], config.n_shapes[1] + 1))

    shapes: list[LatentShape] = []
    tries = 0
    while len(shapes) < n_shapes:
        tries += 1
        if tries > _MAX_PLACEMENT_TRIES:
            raise GenerationError(
                f"could not place {n_shapes} shapes on a {config.grid_size} grid "
                f"with axis_range {config.axis_range} and margin {config.margin}"
            )
        shape = _sample_shape(rng, config)
        if shape is not None:
            shapes.append(shape)

    indicator = rasterize_shapes(shapes, config.grid_size)
    posterior = np.clip(gaussian_blur(indicator, config.blur_sigma), 0.0, 1.0)
    labels = (rng.random(indicator.shape) < posterior).astype(np.float64)
    noise = rng.normal(0.0, config.noise_sigma, size=indicator.shape)
    image = (
        config.intensity_bg
        + (config.intensity_fg - config.intensity_bg) * indicator
        + noise
    )
    if config.mask_dilate_radius > 0:
        eval_mask = binary_dilate(indicator, config.mask_dilate_radius)
    else:
        eval_mask = np.ones_like(indicator)

    return Subject(
        id=f"synth-{subject_index:04d}",
        image=image,
        labels=labels,
        eval_mask=eval_mask,
        reference_posterior=posterior,
    )


def generate_subjects(config: SynthConfig, n_subjects: int) -> list[Subject]:
    """Generate ``n_subjects`` independent subjects from one config."""
    if n_subjects < 1:
        raise ParameterError("n_subjects must be >= 1")
    return [render_subject(config, i) for i in range(n_subjects)]


def oracle_confidence(subject: Subject) -> np.ndarray:
    """The generating posterior read as a class-1 confidence map.

    By construction labels were sampled from this map, so it is the
    perfectly calibrated predictor for the subject.
    """
    if subject.reference_posterior is None:
        raise DataError(f"subject {subject.id} has no reference posterior")
    return np.array(subject.reference_posterior)
