"""Generator, discriminator and task network built on the tensor engine."""
import logging

import numpy as np

from noiselens.core.exceptions import ConfigError, ShapeError
from noiselens.engine import Module, concat, conv2d, conv_transpose2d, instance_norm, matmul, softmax
from noiselens.engine.tensor import DTYPE, Tensor, as_tensor
from noiselens.models.detection_models import Detection
from noiselens.models.network_models import DiscriminatorConfig, GeneratorConfig, TaskConfig
from noiselens.utils.helpers import derive_seed, make_rng

logger = logging.getLogger(__name__)

LEAK = 0.2
TASK_LEAK = 0.1
CONFIDENCE_PRIOR_LOGIT = -2.0


def _conv_block(module, prefix, rng, in_channels, out_channels, kernel_size, normalized):
    module.normal_parameter(f"{prefix}.kernel", (out_channels, in_channels, kernel_size, kernel_size), rng)
    if normalized:
        module.ones_parameter(f"{prefix}.norm_scale", (out_channels,))
        module.zeros_parameter(f"{prefix}.norm_shift", (out_channels,))
    else:
        module.zeros_parameter(f"{prefix}.bias", (out_channels,))


def _apply_block(module, prefix, x, stride, padding, normalized, transpose=False):
    kernel = module.parameter(f"{prefix}.kernel")
    op = conv_transpose2d if transpose else conv2d
    if normalized:
        y = op(x, kernel, stride=stride, padding=padding)
        return instance_norm(
            y, module.parameter(f"{prefix}.norm_scale"), module.parameter(f"{prefix}.norm_shift")
        )
    return op(x, kernel, stride=stride, padding=padding, bias=module.parameter(f"{prefix}.bias"))


class SelfAttention(Module):
    """Spatial self-attention with 1x1 query/key/value projections and a residual gate.

    ``out = x + gamma * o`` where ``o[:, i] = sum_j softmax_j(q_i . k_j) v[:, j]``.
    """

    def __init__(self, channels, reduction=8, rng=None, prefix="attention"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.inner = max(1, channels // reduction)
        self.prefix = prefix
        self.normal_parameter(f"{prefix}.query", (self.inner, channels, 1, 1), rng)
        self.zeros_parameter(f"{prefix}.query_bias", (self.inner,))
        self.normal_parameter(f"{prefix}.key", (self.inner, channels, 1, 1), rng)
        self.normal_parameter(f"{prefix}.value", (channels, channels, 1, 1), rng)
        self.zeros_parameter(f"{prefix}.value_bias", (channels,))
        self.zeros_parameter(f"{prefix}.gamma", ())

    def _project(self, x, name, biased=True):
        bias = self.parameter(f"{self.prefix}.{name}_bias") if biased else None
        return conv2d(x, self.parameter(f"{self.prefix}.{name}"), bias=bias)

    def forward(self, x, return_weights=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"Attention expects [N, {self.channels}, H, W], got {x.shape}")
        n, channels, height, width = x.shape
        positions = height * width
        query = self._project(x, "query")
        # a key bias shifts every score in a row equally, which softmax ignores
        key = self._project(x, "key", biased=False)
        value = self._project(x, "value")
        attended, weights = [], []
        for i in range(n):
            q = query[i].reshape(self.inner, positions).transpose()
            k = key[i].reshape(self.inner, positions)
            attention = softmax(matmul(q, k), axis=-1)
            v = value[i].reshape(channels, positions)
            attended.append(matmul(v, attention.transpose()).reshape(1, channels, height, width))
            weights.append(attention.numpy())
        out = x + self.parameter(f"{self.prefix}.gamma") * concat(attended, axis=0)
        return (out, weights) if return_weights else out


class Generator(Module):
    """U-net mapping a noise field z to additive sensor noise ñ of the same shape."""

    kind = "generator"

    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        rng = make_rng(seed, 0)
        k = cfg.kernel_size
        previous = cfg.in_channels
        for layer in range(1, cfg.depth + 1):
            channels = cfg.channels(layer)
            _conv_block(self, f"encoder.{layer}", rng, previous, channels, k, normalized=layer > 1)
            previous = channels
        for layer in range(cfg.depth, 1, -1):
            in_channels = cfg.channels(layer) * (1 if layer == cfg.depth else 2)
            # conv_transpose kernels are [C_in, C_out, k, k]
            self.normal_parameter(f"decoder.{layer}.kernel", (in_channels, cfg.channels(layer - 1), k, k), rng)
            self.ones_parameter(f"decoder.{layer}.norm_scale", (cfg.channels(layer - 1),))
            self.zeros_parameter(f"decoder.{layer}.norm_shift", (cfg.channels(layer - 1),))
        final_in = cfg.channels(1) * (1 if cfg.depth == 1 else 2)
        self.normal_parameter("output.kernel", (final_in, 1, k, k), rng)
        self.zeros_parameter("output.bias", (1,))

        self.attention = None
        if cfg.use_attention:
            self.attention = SelfAttention(
                cfg.channels(cfg.attention_after_layer),
                cfg.attention_reduction,
                rng=make_rng(seed, 1),
            )
            for name, param in self.attention.named_parameters():
                self._params[name] = param

    def forward(self, z):
        cfg = self.config
        z = as_tensor(z)
        if z.ndim != 4 or z.shape[1] != cfg.in_channels:
            raise ShapeError(f"Generator expects [N, 1, H, W], got {z.shape}")
        cfg.check_input(z.shape[2], z.shape[3])

        skips = []
        h = z
        for layer in range(1, cfg.depth + 1):
            h = _apply_block(self, f"encoder.{layer}", h, cfg.stride, cfg.padding, normalized=layer > 1)
            h = h.leaky_relu(LEAK)
            if self.attention is not None and layer == cfg.attention_after_layer:
                h = self.attention(h)
            skips.append(h)

        for layer in range(cfg.depth, 1, -1):
            if layer != cfg.depth:
                h = concat([h, skips[layer - 1]], axis=1)
            h = _apply_block(
                self, f"decoder.{layer}", h.relu(), cfg.stride, cfg.padding, normalized=True, transpose=True
            )
        if cfg.depth > 1:
            h = concat([h, skips[0]], axis=1)
        out = conv_transpose2d(
            h.relu(),
            self.parameter("output.kernel"),
            stride=cfg.stride,
            padding=cfg.padding,
            bias=self.parameter("output.bias"),
        )
        return out.tanh() * cfg.noise_range

    def zero_output(self):
        """Zero the output layer so the generator emits ñ = 0 exactly."""
        self.parameter("output.kernel").data[...] = 0.0
        self.parameter("output.bias").data[...] = 0.0


class Discriminator(Module):
    """PatchGAN discriminator returning a grid of real/fake logits."""

    kind = "discriminator"

    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        cfg = self.config
        rng = make_rng(seed, 0)
        previous = cfg.in_channels
        for index, channels in enumerate(cfg.layer_channels):
            _conv_block(self, f"layer.{index + 1}", rng, previous, channels, cfg.kernel_size, normalized=index > 0)
            previous = channels
        self.normal_parameter("output.kernel", (1, previous, cfg.kernel_size, cfg.kernel_size), rng)
        self.zeros_parameter("output.bias", (1,))

    def forward(self, x, context=None):
        cfg = self.config
        x = as_tensor(x)
        if cfg.conditional and context is None:
            raise ConfigError("Conditional discriminator needs the context image")
        if not cfg.conditional and context is not None:
            raise ConfigError("Unconditional discriminator does not take a context image")
        h = concat([x, as_tensor(context)], axis=1) if context is not None else x
        if h.ndim != 4 or h.shape[1] != cfg.in_channels:
            raise ShapeError(f"Discriminator expects {cfg.in_channels} input channel(s), got {h.shape}")
        for index, stride in enumerate(cfg.layer_strides):
            h = _apply_block(self, f"layer.{index + 1}", h, stride, 1, normalized=index > 0)
            h = h.leaky_relu(LEAK)
        return conv2d(h, self.parameter("output.kernel"), stride=1, padding=1, bias=self.parameter("output.bias"))


class TaskNetwork(Module):
    """Single-class grid detector: per cell (confidence, cx, cy, w, h)."""

    kind = "task"

    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or TaskConfig()
        cfg = self.config
        rng = make_rng(seed, 0)
        previous = 1
        for index, channels in enumerate(cfg.channels):
            _conv_block(self, f"block.{index + 1}", rng, previous, channels, cfg.kernel_size, normalized=True)
            previous = channels
        self.normal_parameter("head.kernel", (5, previous, 1, 1), rng)
        bias = np.zeros(5, dtype=DTYPE)
        bias[0] = CONFIDENCE_PRIOR_LOGIT
        self.add_parameter("head.bias", bias)

    def forward(self, x):
        cfg = self.config
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"Task network expects [N, 1, H, W], got {x.shape}")
        cfg.check_input(x.shape[2], x.shape[3])
        h = x
        padding = cfg.kernel_size // 2
        for index, stride in enumerate(cfg.strides):
            h = _apply_block(self, f"block.{index + 1}", h, stride, padding, normalized=True)
            h = h.leaky_relu(TASK_LEAK)
        raw = conv2d(h, self.parameter("head.kernel"), bias=self.parameter("head.bias"))
        raw = raw.transpose(0, 2, 3, 1)
        centers = raw[..., 0:3].sigmoid()
        sizes = (raw[..., 3:5].tanh() * cfg.box_log_range).exp() * cfg.box_prior
        return concat([centers, sizes], axis=3)


def generator_forward(z, generator):
    return generator(z)


def attention_forward(x, attention):
    return attention(x)


def discriminator_forward(x, context, discriminator):
    return discriminator(x, context)


def task_forward(x, task_network):
    return task_network(x)


def decode_detections(raw, confidence_threshold):
    """Turn a task-network grid into per-image detections sorted by confidence.

    Args:
        raw: Tensor or array [N, S, S, 5] of activated predictions.
        confidence_threshold (float): Cells with confidence >= threshold are kept.

    Returns:
        list[list[Detection]]: One list per image, highest confidence first.
    """
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError(f"confidence_threshold must lie in [0, 1], got {confidence_threshold}")
    grid = raw.numpy() if isinstance(raw, Tensor) else np.asarray(raw, dtype=DTYPE)
    if grid.ndim != 4 or grid.shape[1] != grid.shape[2] or grid.shape[3] != 5:
        raise ShapeError(f"Expected [N, S, S, 5] predictions, got {grid.shape}")
    size = grid.shape[1]
    results = []
    for image in grid:
        confidence = image[..., 0].ravel()
        order = np.argsort(-confidence, kind="stable")
        detections = []
        for flat in order:
            conf = float(confidence[flat])
            if conf < confidence_threshold:
                break
            row, col = divmod(int(flat), size)
            _, cx, cy, w, h = (float(v) for v in image[row, col])
            detections.append(Detection((col + cx) / size, (row + cy) / size, w, h, confidence=conf))
        results.append(detections)
    return results


def grid_cell(annotation, grid_size):
    col = min(int(annotation.cx * grid_size), grid_size - 1)
    row = min(int(annotation.cy * grid_size), grid_size - 1)
    return row, col


def encode_targets(targets, grid_size):
    """Map per-image annotations to grid targets.

    Only ``is_object`` annotations take part. When two objects fall in one cell the
    first keeps it and the rest are dropped.

    Returns:
        tuple: ``(target [N, S, S, 5] float32, mask [N, S, S] bool, dropped count)``.
    """
    target = np.zeros((len(targets), grid_size, grid_size, 5), dtype=DTYPE)
    mask = np.zeros((len(targets), grid_size, grid_size), dtype=bool)
    dropped = 0
    for n, annotations in enumerate(targets):
        for annotation in annotations or ():
            if not annotation.is_object:
                continue
            row, col = grid_cell(annotation, grid_size)
            if mask[n, row, col]:
                dropped += 1
                continue
            mask[n, row, col] = True
            target[n, row, col] = (
                1.0,
                annotation.cx * grid_size - col,
                annotation.cy * grid_size - row,
                annotation.w,
                annotation.h,
            )
    if dropped:
        logger.debug("Dropped %d annotation(s) sharing a grid cell", dropped)
    return target, mask, dropped


def build_models(run_config, seed):
    """Generator, discriminator and task network for a run, seeded independently."""
    return {
        "generator": Generator(run_config.generator, seed=derive_seed(seed, 1)),
        "discriminator": Discriminator(run_config.discriminator, seed=derive_seed(seed, 2)),
        "task": TaskNetwork(run_config.task, seed=derive_seed(seed, 3)),
    }
