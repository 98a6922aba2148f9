"""Training and evaluation data sources.

Every source is tagged with a split. Sources hand out items by integer index and
batches by step number, deterministically for a fixed seed. Training entry points
call ``ensure_trainable`` so validation data never produces gradients.
"""
import logging

import numpy as np

from noiselens.core.exceptions import DataLeakError, ShapeError
from noiselens.core.losses import compose_fake
from noiselens.core.scene_sim import apply_sensor_noise, dataset_mean, make_blank_context, render_scene
from noiselens.engine.tensor import DTYPE, Tensor
from noiselens.utils.helpers import derive_seed, make_rng

logger = logging.getLogger(__name__)

SPLITS = {"train": 0, "validation": 1, "test": 2}
TARGET_STREAM = 0
CONTEXT_STREAM = 1


def _check_split(split):
    if split not in SPLITS:
        raise ValueError(f"Unknown split '{split}', expected one of {sorted(SPLITS)}")
    return split


def sample_noise_field(rng, shape, noise):
    """z ~ N(mu_z, sigma_z²) shaped like the images."""
    return rng.normal(noise.mu_z, noise.sigma_z, size=shape).astype(DTYPE)


def sample_context_noise(rng, contexts, noise):
    """z = c + w with w ~ N(mu_w, sigma_w²)."""
    w = rng.normal(noise.mu_w, noise.sigma_w, size=contexts.shape)
    return (contexts.astype(np.float64) + w).astype(DTYPE)


class Source:
    """Base class: ``item(index)`` plus a default ``batch(step, size)``."""

    split = "train"

    def item(self, index):
        raise NotImplementedError

    def batch(self, step, size):
        """Images [size, 1, H, W] and their annotation lists for one step."""
        items = [self.item(step * size + i) for i in range(size)]
        images = np.stack([image for image, _ in items]).astype(DTYPE)
        return images, [annotations for _, annotations in items]

    def take(self, count, start=0):
        """The first ``count`` items from ``start``, in index order."""
        items = [self.item(start + i) for i in range(count)]
        return np.stack([image for image, _ in items]).astype(DTYPE), [a for _, a in items]

    @property
    def labeled(self):
        return True


class LabeledDataset(Source):
    """In-memory images [N, 1, H, W] with annotation lists and a split tag."""

    def __init__(self, images, annotations, split="train", name="dataset", seed=0, labeled=True):
        images = np.asarray(images, dtype=DTYPE)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"Expected images [N, 1, H, W], got {images.shape}")
        if annotations is not None and len(annotations) != images.shape[0]:
            raise ShapeError(f"{len(annotations)} annotation lists for {images.shape[0]} images")
        if images.shape[0] == 0:
            raise ShapeError(f"Dataset '{name}' is empty")
        self.images = images
        self.annotations = list(annotations) if annotations is not None else [[] for _ in images]
        self.split = _check_split(split)
        self.name = name
        self.seed = seed
        self._labeled = labeled and annotations is not None
        self._orders = {}

    def __len__(self):
        return self.images.shape[0]

    @property
    def labeled(self):
        return self._labeled

    def _order(self, epoch):
        if epoch not in self._orders:
            self._orders = {epoch: make_rng(self.seed, epoch).permutation(len(self))}
        return self._orders[epoch]

    def item(self, index):
        epoch, position = divmod(index, len(self))
        chosen = int(self._order(epoch)[position])
        return self.images[chosen], self.annotations[chosen]

    def as_arrays(self):
        return self.images, self.annotations


class ProceduralSource(Source):
    """Rendered scenes, optionally degraded by a sensor model.

    ``stream`` separates independent populations drawn from the same base seed, e.g.
    target-domain frames versus noiseless contexts, so they are never paired.
    """

    def __init__(self, scene, sensor=None, seed=0, split="train", stream=TARGET_STREAM, name=None):
        self.scene = scene
        self.sensor = sensor
        self.seed = seed
        self.split = _check_split(split)
        self.stream = stream
        self.name = name or ("target" if sensor is not None else "sim")

    def item_seed(self, index):
        return derive_seed(self.seed, self.stream, SPLITS[self.split], index)

    def item(self, index):
        seed = self.item_seed(index)
        image, annotations = render_scene(self.scene, seed)
        if self.sensor is not None:
            image = apply_sensor_noise(image, self.sensor, derive_seed(seed, 1))
        return image.numpy(), annotations

    def materialize(self, count):
        images, annotations = self.take(count)
        return LabeledDataset(images, annotations, self.split, self.name, self.seed)


class DirectorySource(Source):
    """Images and JSON sidecars from a data directory, loaded on first use."""

    def __init__(self, directory, split="train", seed=0):
        self.directory = directory
        self.split = _check_split(split)
        self.seed = seed
        self._dataset = None

    @property
    def dataset(self):
        if self._dataset is None:
            from noiselens.services.dataset_service import load_dataset

            self._dataset = load_dataset(self.directory, split=self.split, seed=self.seed)
        return self._dataset

    def __len__(self):
        return len(self.dataset)

    @property
    def labeled(self):
        return self.dataset.labeled

    def item(self, index):
        return self.dataset.item(index)


class GeneratedSource(Source):
    """Context scenes composed with generator noise: x̂ = clip(c + G(z), 0, 1).

    Labels are those of the contexts. ``context_noise`` selects z = c + w instead of a
    pure noise field.
    """

    def __init__(self, contexts, generator, noise, seed=0, context_noise=False, name="generated"):
        self.contexts = contexts
        self.generator = generator
        self.noise = noise
        self.seed = seed
        self.context_noise = context_noise
        self.name = name

    @property
    def split(self):
        return self.contexts.split

    def compose(self, contexts, rng):
        if self.context_noise:
            z = sample_context_noise(rng, contexts, self.noise)
        else:
            z = sample_noise_field(rng, contexts.shape, self.noise)
        n_tilde = self.generator(Tensor(z))
        return compose_fake(Tensor(contexts), n_tilde).numpy()

    def item(self, index):
        context, annotations = self.contexts.item(index)
        fake = self.compose(context[None], make_rng(self.seed, 1, index))
        return fake[0], annotations

    def batch(self, step, size):
        contexts, annotations = self.contexts.batch(step, size)
        return self.compose(contexts, make_rng(self.seed, 0, step)), annotations


class MixedSource(Source):
    """Per-item weighted mixture of sources, e.g. target frames plus generated frames."""

    def __init__(self, sources, weights=None, seed=0, name="mixed"):
        if not sources:
            raise ValueError("MixedSource needs at least one source")
        weights = np.ones(len(sources)) if weights is None else np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(sources),) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("MixedSource weights must be non-negative, one per source")
        self.sources = list(sources)
        self.weights = weights / weights.sum()
        self.seed = seed
        self.name = name

    @property
    def split(self):
        splits = {source.split for source in self.sources}
        return "validation" if "validation" in splits else splits.pop()

    @property
    def labeled(self):
        return all(source.labeled for source in self.sources)

    def choose(self, index):
        return int(make_rng(self.seed, index).choice(len(self.sources), p=self.weights))

    def item(self, index):
        return self.sources[self.choose(index)].item(index)


def ensure_trainable(*sources):
    """Refuse any source tagged as the validation split."""
    for source in sources:
        if source is not None and source.split == "validation":
            name = getattr(source, "name", type(source).__name__)
            raise DataLeakError(f"Source '{name}' is a validation split and cannot be trained on")


def estimate_dataset_mean(source, count=64):
    """Average intensity of the first ``count`` items of a source."""
    images, _ = source.take(count)
    return dataset_mean(images)


def blank_contexts(images, annotations, mean):
    """Blank contexts for a batch of labeled target images."""
    return np.stack(
        [make_blank_context(image, labels, mean).numpy() for image, labels in zip(images, annotations)]
    )
