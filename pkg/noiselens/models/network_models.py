from dataclasses import dataclass

from noiselens.core.exceptions import ConfigError


@dataclass(frozen=True)
class GeneratorConfig:
    """U-net generator shape.

    Encoder layer i (1-based) has ``min(base_channels * 2**(i-1), max_channels)`` filters.
    The self-attention block sits on the output of encoder layer ``attention_after_layer``.
    """

    in_channels: int = 1
    base_channels: int = 32
    depth: int = 4
    attention_after_layer: int = 3
    use_attention: bool = True
    attention_reduction: int = 8
    kernel_size: int = 4
    stride: int = 2
    max_channels: int = 256
    noise_range: float = 0.5

    def __post_init__(self):
        if self.in_channels != 1:
            raise ConfigError("Generator takes a single-channel noise field")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be positive")
        if not 1 <= self.attention_after_layer <= self.depth:
            raise ConfigError(
                f"attention_after_layer must lie in [1, {self.depth}], "
                f"got {self.attention_after_layer}"
            )
        if self.attention_reduction < 1:
            raise ConfigError("attention_reduction must be >= 1")
        if self.stride < 1 or (self.kernel_size - self.stride) % 2:
            raise ConfigError("kernel_size - stride must be a non-negative even number")
        if self.noise_range <= 0:
            raise ConfigError("noise_range must be positive")

    @property
    def padding(self):
        return (self.kernel_size - self.stride) // 2

    def channels(self, layer):
        return min(self.base_channels * 2 ** (layer - 1), self.max_channels)

    def check_input(self, height, width):
        factor = self.stride ** self.depth
        if height % factor or width % factor:
            raise ConfigError(
                f"Input {height}x{width} is not divisible by stride**depth = {factor}"
            )


@dataclass(frozen=True)
class DiscriminatorConfig:
    """PatchGAN discriminator; ``in_channels`` 2 means conditioned on the context image."""

    in_channels: int = 1
    layer_channels: tuple = (32, 64, 128)
    layer_strides: tuple = (2, 2, 2)
    kernel_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layer_channels", tuple(self.layer_channels))
        object.__setattr__(self, "layer_strides", tuple(self.layer_strides))
        if self.in_channels not in (1, 2):
            raise ConfigError("Discriminator in_channels must be 1 (unconditional) or 2")
        if not self.layer_channels or len(self.layer_channels) != len(self.layer_strides):
            raise ConfigError("layer_channels and layer_strides must be non-empty and equal length")

    @property
    def conditional(self):
        return self.in_channels == 2

    def output_size(self, size):
        """Side length of the logit grid for a square input of side ``size``."""
        for stride in self.layer_strides:
            size = (size + 2 - self.kernel_size) // stride + 1
        return size + 2 - self.kernel_size + 1


@dataclass(frozen=True)
class TaskConfig:
    """Single-class grid detector: conv backbone then a 1x1 head to an S x S x 5 grid."""

    grid_size: int = 8
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 1)
    kernel_size: int = 3
    box_prior: float = 0.1
    box_log_range: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        if self.grid_size < 1:
            raise ConfigError("grid_size must be positive")
        if not self.channels or len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must be non-empty and equal length")
        if self.kernel_size % 2 == 0:
            raise ConfigError("Task kernel_size must be odd")
        if self.box_prior <= 0 or self.box_log_range <= 0:
            raise ConfigError("box_prior and box_log_range must be positive")

    def check_input(self, height, width):
        factor = 1
        for stride in self.strides:
            factor *= stride
        if height != width or height != self.grid_size * factor:
            raise ConfigError(
                f"Task network maps {self.grid_size * factor}px square inputs to a "
                f"{self.grid_size}x{self.grid_size} grid, got {height}x{width}"
            )
