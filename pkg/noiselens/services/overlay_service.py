import io
import logging
import os

import numpy as np
from PIL import Image, ImageDraw

from noiselens.engine.tensor import Tensor
from noiselens.utils.helpers import atomic_write_bytes

logger = logging.getLogger(__name__)

TRUTH_COLOR = (255, 0, 0)
DETECTION_COLOR = (0, 255, 0)


def _pixel_rectangle(box, height, width):
    cx, cy, w, h = box
    left = (cx - w / 2.0) * width
    top = (cy - h / 2.0) * height
    right = (cx + w / 2.0) * width - 1
    bottom = (cy + h / 2.0) * height - 1
    return [left, top, max(left, right), max(top, bottom)]


def to_display(image, stretch=True):
    """8-bit RGB rendering of a [0, 1] frame; ``stretch`` maps min..max to 0..255."""
    array = image.numpy() if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    array = np.asarray(array, dtype=np.float64).reshape(array.shape[-2:])
    if stretch:
        lo, hi = float(array.min()), float(array.max())
        array = (array - lo) / (hi - lo) if hi > lo else np.zeros_like(array)
    gray = np.rint(np.clip(array, 0.0, 1.0) * 255).astype(np.uint8)
    return Image.fromarray(gray).convert("RGB")


def render_overlay(image, truths, detections, scale=4):
    """
    Draw true boxes in red and predicted boxes in green on a frame.

    Args:
        image: Tensor or array [1, H, W] with values in [0, 1]
        truths (list[Annotation]): Labeled boxes; stars are skipped
        detections (list[Detection]): Predicted boxes
        scale (int): Nearest-neighbour upscaling factor for legibility

    Returns:
        PIL.Image.Image: RGB overlay
    """
    canvas = to_display(image)
    if scale > 1:
        canvas = canvas.resize((canvas.width * scale, canvas.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    for truth in truths:
        if getattr(truth, "is_object", True):
            draw.rectangle(_pixel_rectangle(truth.box, canvas.height, canvas.width), outline=TRUTH_COLOR)
    for detection in detections:
        draw.rectangle(_pixel_rectangle(detection.box, canvas.height, canvas.width), outline=DETECTION_COLOR)
    return canvas


def save_overlay(path, image, truths, detections, scale=4):
    buffer = io.BytesIO()
    render_overlay(image, truths, detections, scale).save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())
    return path


def write_overlays(directory, images, truths_per_image, detections_per_image, count, names=None, scale=4):
    """Write the first ``count`` overlays as ``<name>-overlay.png``."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index in range(min(count, len(images))):
        stem = names[index] if names else f"frame-{index:05d}"
        path = os.path.join(directory, f"{stem}-overlay.png")
        paths.append(
            save_overlay(path, images[index], truths_per_image[index], detections_per_image[index], scale)
        )
    logger.info(f"Wrote {len(paths)} overlay(s) to {directory}")
    return paths
