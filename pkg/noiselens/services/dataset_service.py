"""Datasets on disk: 16-bit grayscale PNG frames with one JSON sidecar each.

``<stem>.png`` holds the image scaled linearly to [0, 65535]; ``<stem>.json`` holds
``{image, height, width, objects: [{cx, cy, w, h, magnitude}]}`` with normalized boxes.
"""
import glob
import io
import json
import logging
import os
import shutil

import numpy as np
from PIL import Image, UnidentifiedImageError

from noiselens.core.datasets import LabeledDataset
from noiselens.core.exceptions import ImageFormatError, InvalidAnnotationError
from noiselens.engine.tensor import DTYPE, Tensor
from noiselens.models.scene_models import Annotation
from noiselens.models.schemas import load_annotation_document
from noiselens.utils.helpers import atomic_write_bytes, atomic_write_json

logger = logging.getLogger(__name__)

MAX_VALUE = 65535
SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")


def encode_image(image):
    """[0, 1] image (Tensor or array, [H, W] or [1, H, W]) to PNG bytes."""
    array = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    if array.ndim == 3 and array.shape[0] == 1:
        array = array[0]
    if array.ndim != 2:
        raise ImageFormatError(f"Expected a single-channel image, got shape {array.shape}")
    values = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ImageFormatError("Image values must lie in [0, 1]")
    quantized = np.rint(values * MAX_VALUE).astype(np.uint16)
    buffer = io.BytesIO()
    Image.fromarray(quantized).save(buffer, format="PNG")
    return buffer.getvalue()


def write_image(path, image):
    """Write a 16-bit grayscale PNG atomically."""
    atomic_write_bytes(path, encode_image(image))
    return path


def read_image(path):
    """Read a 16-bit grayscale PNG as a Tensor [1, H, W] in [0, 1].

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ImageFormatError: If the file is unreadable, not grayscale or not 16-bit.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode not in SIXTEEN_BIT_MODES:
                raise ImageFormatError(f"{path}: expected 16-bit grayscale, got mode {mode}")
            array = np.asarray(img).astype(np.int64)
    except (UnidentifiedImageError, OSError) as e:
        raise ImageFormatError(f"{path}: unreadable image ({e})") from e
    if array.ndim != 2:
        raise ImageFormatError(f"{path}: expected a single channel, got shape {array.shape}")
    if array.min() < 0 or array.max() > MAX_VALUE:
        raise ImageFormatError(f"{path}: pixel values exceed the 16-bit range")
    return Tensor((array.astype(np.float64) / MAX_VALUE).astype(DTYPE)[None])


def annotation_document(image_name, height, width, annotations):
    """Sidecar dict for an image; star (non-object) annotations are not stored."""
    return {
        "image": image_name,
        "height": int(height),
        "width": int(width),
        "objects": [
            {"cx": a.cx, "cy": a.cy, "w": a.w, "h": a.h, "magnitude": a.magnitude}
            for a in annotations
            if a.is_object
        ],
    }


def write_annotations(path, image_name, height, width, annotations):
    atomic_write_json(path, annotation_document(image_name, height, width, annotations))
    return path


def read_annotations(path, expected_shape=None):
    """Load and validate a sidecar; returns ``(document, list[Annotation])``."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidAnnotationError(f"{path}: not valid JSON ({e})") from e
    document = load_annotation_document(data)
    if expected_shape is not None and (document["height"], document["width"]) != tuple(expected_shape):
        raise InvalidAnnotationError(
            f"{path}: declares {document['height']}x{document['width']}, image is "
            f"{expected_shape[0]}x{expected_shape[1]}"
        )
    annotations = [
        Annotation(o["cx"], o["cy"], o["w"], o["h"], o.get("magnitude", 0.0)) for o in document["objects"]
    ]
    return document, annotations


def sidecar_path(image_path):
    return os.path.splitext(image_path)[0] + ".json"


def list_images(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Dataset directory not found: {directory}")
    return sorted(glob.glob(os.path.join(directory, "*.png")))


def write_sample(directory, stem, image, annotations):
    """Write ``<stem>.png`` and, when ``annotations`` is not None, ``<stem>.json``."""
    os.makedirs(directory, exist_ok=True)
    image_name = f"{stem}.png"
    write_image(os.path.join(directory, image_name), image)
    if annotations is not None:
        height, width = image.shape[-2:]
        write_annotations(os.path.join(directory, f"{stem}.json"), image_name, height, width, annotations)
    return os.path.join(directory, image_name)


def write_dataset(directory, images, annotations=None, prefix="frame", start=0):
    """Write a batch of images [N, 1, H, W] and their annotation lists."""
    paths = []
    for i, image in enumerate(images):
        labels = annotations[i] if annotations is not None else None
        paths.append(write_sample(directory, f"{prefix}-{start + i:05d}", image, labels))
    logger.info(f"Wrote {len(paths)} image(s) to {directory}")
    return paths


def load_dataset(directory, split="train", seed=0, require_labels=False):
    """Read every PNG in ``directory`` (sorted by name) into a LabeledDataset.

    A directory without any sidecars is an unlabeled dataset; one with some sidecars
    missing is an error.
    """
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"No PNG images in {directory}")
    images, annotations = [], []
    missing = [p for p in paths if not os.path.exists(sidecar_path(p))]
    labeled = len(missing) < len(paths)
    if missing and (labeled or require_labels):
        raise InvalidAnnotationError(f"Missing annotation file for {os.path.basename(missing[0])}")
    for path in paths:
        image = read_image(path)
        images.append(image.numpy())
        if labeled:
            _, labels = read_annotations(sidecar_path(path), image.shape[1:])
            annotations.append(labels)
    dataset = LabeledDataset(
        np.stack(images),
        annotations if labeled else None,
        split=split,
        name=os.path.basename(os.path.normpath(directory)),
        seed=seed,
    )
    dataset.paths = paths
    logger.info(f"Loaded {len(paths)} image(s) from {directory} ({'labeled' if labeled else 'unlabeled'})")
    return dataset


def copy_sidecar(image_path, out_directory):
    """Copy an image's annotation file byte for byte; returns the new path or None."""
    source = sidecar_path(image_path)
    if not os.path.exists(source):
        return None
    os.makedirs(out_directory, exist_ok=True)
    target = os.path.join(out_directory, os.path.basename(source))
    shutil.copyfile(source, target)
    return target
