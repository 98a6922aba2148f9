from dataclasses import dataclass

from noiselens.core.exceptions import ConfigError, InvalidAnnotationError

BOX_TOLERANCE = 1e-6


def _ordered(name, pair):
    lo, hi = pair
    if lo > hi:
        raise ConfigError(f"{name} must be ordered [min, max], got {list(pair)}")


@dataclass(frozen=True)
class SceneSpec:
    """Procedural description of a noiseless space scene.

    Magnitudes follow the astronomical convention: a larger m_V is dimmer, so the
    "bright" end of a magnitude range is its smaller number.
    """

    height: int = 64
    width: int = 64
    object_count_range: tuple = (1, 3)
    object_magnitude_range: tuple = (10.0, 13.0)
    reference_magnitude: float = 10.0
    reference_magnitude_flux: float = 0.6
    psf_sigma: float = 1.0
    star_count_range: tuple = (0, 4)
    star_magnitude_range: tuple = (11.0, 14.0)
    background_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "object_count_range", tuple(self.object_count_range))
        object.__setattr__(self, "object_magnitude_range", tuple(self.object_magnitude_range))
        object.__setattr__(self, "star_count_range", tuple(self.star_count_range))
        object.__setattr__(self, "star_magnitude_range", tuple(self.star_magnitude_range))
        if self.height < 1 or self.width < 1:
            raise ConfigError("Scene height and width must be positive")
        _ordered("object_count_range", self.object_count_range)
        _ordered("star_count_range", self.star_count_range)
        _ordered("object_magnitude_range", self.object_magnitude_range)
        _ordered("star_magnitude_range", self.star_magnitude_range)
        if min(self.object_count_range) < 0 or min(self.star_count_range) < 0:
            raise ConfigError("Source counts must be non-negative")
        if self.psf_sigma <= 0:
            raise ConfigError("psf_sigma must be positive")
        if not 0 <= self.background_level < 1:
            raise ConfigError("background_level must lie in [0, 1)")
        if self.reference_magnitude_flux < 0:
            raise ConfigError("reference_magnitude_flux must be non-negative")
        if self.background_level + self.brightest_amplitude() > 1 + 1e-9:
            raise ConfigError(
                "background_level plus the brightest source amplitude exceeds 1 "
                f"({self.background_level} + {self.brightest_amplitude():.4f})"
            )

    def amplitude(self, magnitude):
        """Peak amplitude of a point source of visual magnitude ``magnitude``."""
        return self.reference_magnitude_flux * 100.0 ** (
            (self.reference_magnitude - magnitude) / 5.0
        )

    def brightest_amplitude(self):
        candidates = []
        if self.object_count_range[1] > 0:
            candidates.append(self.object_magnitude_range[0])
        if self.star_count_range[1] > 0:
            candidates.append(self.star_magnitude_range[0])
        return self.amplitude(min(candidates)) if candidates else 0.0

    @property
    def box_side(self):
        """Annotation box side in pixels."""
        return 6.0 * self.psf_sigma


@dataclass(frozen=True)
class Annotation:
    """Normalized center-format box plus the object's visual magnitude."""

    cx: float
    cy: float
    w: float
    h: float
    magnitude: float = 0.0
    is_object: bool = True

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InvalidAnnotationError(f"Box extent must be positive, got w={self.w}, h={self.h}")
        left, right = self.cx - self.w / 2, self.cx + self.w / 2
        top, bottom = self.cy - self.h / 2, self.cy + self.h / 2
        if (
            left < -BOX_TOLERANCE
            or top < -BOX_TOLERANCE
            or right > 1 + BOX_TOLERANCE
            or bottom > 1 + BOX_TOLERANCE
        ):
            raise InvalidAnnotationError(
                f"Box ({self.cx:.4f}, {self.cy:.4f}, {self.w:.4f}, {self.h:.4f}) "
                "leaves the unit square"
            )

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class PointSource:
    """A rendered source in pixel coordinates (pixel centers at integer positions)."""

    x: float
    y: float
    magnitude: float
    is_object: bool = True


@dataclass(frozen=True)
class SensorNoiseModel:
    """Parametric target-sensor noise: structured pattern, read/shot noise, bad pixels.

    The structured pattern is a fixed property of the sensor and depends only on
    ``structured_phase_seed``; read/shot noise and bad pixels are redrawn per frame.
    """

    read_noise_sigma: float = 0.0
    shot_noise_gain: float = 0.0
    hot_pixel_prob: float = 0.0
    dead_pixel_prob: float = 0.0
    structured_amplitude: float = 0.0
    structured_period: float = 32.0
    structured_phase_seed: int = 0

    def __post_init__(self):
        for name in ("hot_pixel_prob", "dead_pixel_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        for name in ("read_noise_sigma", "shot_noise_gain", "structured_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.structured_period < 16:
            raise ConfigError("structured_period must be at least 16 pixels")

    @property
    def is_identity(self):
        return (
            self.read_noise_sigma == 0
            and self.shot_noise_gain == 0
            and self.hot_pixel_prob == 0
            and self.dead_pixel_prob == 0
            and self.structured_amplitude == 0
        )


@dataclass(frozen=True)
class NoiseStatistics:
    """Mean and standard deviation of additive noise over a sample of frames."""

    mean: float
    std: float
    samples: int
