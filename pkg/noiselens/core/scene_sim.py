"""Procedural noiseless space scenes and the parametric target-sensor stand-in.

Images are float arrays in [0, 1] with pixel centers at integer coordinates, so a
source at ``x`` covers the continuous interval ``[x, x + 1)`` in box coordinates.
"""
import logging
import math

import numpy as np

from noiselens.core.exceptions import ShapeError
from noiselens.engine.tensor import DTYPE, Tensor
from noiselens.models.scene_models import Annotation, NoiseStatistics, PointSource

logger = logging.getLogger(__name__)

STRUCTURED_WAVES = (2, 4)
BOX_EDGE_TOLERANCE = 1e-6


def magnitude_to_flux_ratio(delta_m):
    """Brightness ratio for a visual-magnitude difference: 5 magnitudes is 100x."""
    return 10.0 ** (0.4 * delta_m)


def _frame(image):
    data = image.numpy() if isinstance(image, Tensor) else np.asarray(image, dtype=DTYPE)
    if data.ndim < 2:
        raise ShapeError(f"Expected an image with trailing (H, W) axes, got {data.shape}")
    return data


def source_annotation(spec, source):
    """Annotation box of side 6·psf_sigma around ``source``, clipped to the frame."""
    half = spec.box_side / 2.0
    x_center, y_center = source.x + 0.5, source.y + 0.5
    left = max(0.0, x_center - half)
    right = min(float(spec.width), x_center + half)
    top = max(0.0, y_center - half)
    bottom = min(float(spec.height), y_center + half)
    return Annotation(
        cx=(left + right) / 2.0 / spec.width,
        cy=(top + bottom) / 2.0 / spec.height,
        w=(right - left) / spec.width,
        h=(bottom - top) / spec.height,
        magnitude=source.magnitude,
        is_object=True,
    )


def render_sources(spec, sources):
    """Render an explicit list of point sources.

    Args:
        spec (SceneSpec): Frame size, PSF width, background and flux calibration.
        sources (list[PointSource]): Sources in pixel coordinates.

    Returns:
        tuple: ``(image, annotations)`` where image is a Tensor [1, H, W] clipped to [0, 1]
        and annotations hold one entry per ``is_object`` source, in input order.
    """
    image = np.full((spec.height, spec.width), spec.background_level, dtype=np.float64)
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]
    inv_two_var = 1.0 / (2.0 * spec.psf_sigma ** 2)
    annotations = []
    for source in sources:
        peak = spec.amplitude(source.magnitude)
        image += peak * np.exp(-((xs - source.x) ** 2 + (ys - source.y) ** 2) * inv_two_var)
        if source.is_object:
            annotations.append(source_annotation(spec, source))
    image = np.clip(image, 0.0, 1.0).astype(DTYPE)
    return Tensor(image[None]), annotations


def sample_sources(spec, rng):
    """Draw the object and star population of one scene."""
    sources = []
    for is_object, (lo, hi), (bright, dim) in (
        (True, spec.object_count_range, spec.object_magnitude_range),
        (False, spec.star_count_range, spec.star_magnitude_range),
    ):
        count = int(rng.integers(lo, hi + 1))
        xs = rng.uniform(0.0, spec.width - 1.0, size=count)
        ys = rng.uniform(0.0, spec.height - 1.0, size=count)
        mags = rng.uniform(bright, dim, size=count)
        sources.extend(
            PointSource(float(x), float(y), float(m), is_object) for x, y, m in zip(xs, ys, mags)
        )
    return sources


def render_scene(spec, seed):
    """Render one noiseless scene with its RSO annotations.

    Args:
        spec (SceneSpec): Scene description.
        seed (int): Seed for source placement and magnitudes.

    Returns:
        tuple: ``(image, annotations)``; identical inputs give bit-identical outputs.
    """
    rng = np.random.default_rng(seed)
    return render_sources(spec, sample_sources(spec, rng))


def structured_pattern(model, height, width):
    """Fixed low-frequency field of the sensor: a sum of 2-4 plane waves.

    Depends only on ``model.structured_phase_seed`` and the frame size, so every frame
    from the same sensor shares it.
    """
    rng = np.random.default_rng(model.structured_phase_seed)
    count = int(rng.integers(STRUCTURED_WAVES[0], STRUCTURED_WAVES[1] + 1))
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    field = np.zeros((height, width), dtype=np.float64)
    for _ in range(count):
        period = rng.uniform(model.structured_period, 2.0 * model.structured_period)
        angle = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        weight = rng.uniform(0.5, 1.0)
        k = 2.0 * math.pi / period
        field += weight * np.sin(k * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
    peak = np.abs(field).max()
    if peak > 0:
        field *= model.structured_amplitude / peak
    return field


def apply_sensor_noise(image, model, seed):
    """Degrade a clean frame with the target-sensor noise model.

    Args:
        image: Tensor or array with trailing (H, W) axes, values in [0, 1].
        model (SensorNoiseModel): Noise parameters.
        seed (int): Seed for the per-frame noise draws.

    Returns:
        Tensor: Same shape as ``image``, clipped to [0, 1]. The all-zero model returns an
        exact copy.
    """
    data = _frame(image)
    if model.is_identity:
        return Tensor(data.copy())

    rng = np.random.default_rng(seed)
    clean = data.astype(np.float64)
    height, width = data.shape[-2:]
    noisy = clean + structured_pattern(model, height, width)
    noisy = noisy + rng.normal(0.0, 1.0, size=data.shape) * model.read_noise_sigma
    shot_std = np.sqrt(np.clip(model.shot_noise_gain * clean, 0.0, None))
    noisy = noisy + rng.normal(0.0, 1.0, size=data.shape) * shot_std
    hot = rng.random(size=data.shape) < model.hot_pixel_prob
    dead = rng.random(size=data.shape) < model.dead_pixel_prob
    noisy[hot] = 1.0
    noisy[dead] = 0.0
    return Tensor(np.clip(noisy, 0.0, 1.0).astype(DTYPE))


def annotation_pixel_bounds(annotation, height, width):
    """Pixel rectangle ``(x0, y0, x1, y1)`` (exclusive ends) covered by a box."""
    x0 = math.floor((annotation.cx - annotation.w / 2.0) * width + BOX_EDGE_TOLERANCE)
    x1 = math.ceil((annotation.cx + annotation.w / 2.0) * width - BOX_EDGE_TOLERANCE)
    y0 = math.floor((annotation.cy - annotation.h / 2.0) * height + BOX_EDGE_TOLERANCE)
    y1 = math.ceil((annotation.cy + annotation.h / 2.0) * height - BOX_EDGE_TOLERANCE)
    return max(0, x0), max(0, y0), min(width, x1), min(height, y1)


def make_blank_context(target_image, annotations, dataset_mean):
    """Uniform frame of ``dataset_mean`` with the labeled-object regions copied in.

    Args:
        target_image: Labeled target-domain image (trailing (H, W) axes).
        annotations (list[Annotation]): Labels of ``target_image``; stars are ignored.
        dataset_mean (float): Average intensity of the target data set.

    Returns:
        Tensor: The blank context, shaped like ``target_image``.
    """
    data = _frame(target_image)
    height, width = data.shape[-2:]
    blank = np.full(data.shape, dataset_mean, dtype=DTYPE)
    for annotation in annotations:
        if not annotation.is_object:
            continue
        x0, y0, x1, y1 = annotation_pixel_bounds(annotation, height, width)
        blank[..., y0:y1, x0:x1] = data[..., y0:y1, x0:x1]
    return Tensor(blank)


def dataset_mean(images):
    """Mean intensity over a collection of images, accumulated in float64."""
    total, count = 0.0, 0
    for image in images:
        data = _frame(image).astype(np.float64)
        total += data.sum()
        count += data.size
    if count == 0:
        raise ShapeError("dataset_mean needs at least one image")
    return total / count


def flat_frame_statistics(model, level=0.5, count=16, size=64, seed=0):
    """Empirical additive-noise statistics of a sensor on flat frames.

    Each frame is a uniform ``level`` image degraded by ``model``; the returned mean and
    std describe ``noisy - level`` pooled over all frames and pixels.
    """
    flat = np.full((1, size, size), level, dtype=DTYPE)
    residuals = []
    for index in range(count):
        noisy = apply_sensor_noise(flat, model, seed + index).numpy()
        residuals.append(noisy.astype(np.float64) - level)
    residuals = np.concatenate([r.ravel() for r in residuals])
    stats = NoiseStatistics(float(residuals.mean()), float(residuals.std()), int(residuals.size))
    logger.debug("Flat-frame noise at level %.3f: mean=%.5f std=%.5f", level, stats.mean, stats.std)
    return stats
