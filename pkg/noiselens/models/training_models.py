from dataclasses import dataclass, field

from noiselens.core.exceptions import ConfigError
from noiselens.models.network_models import DiscriminatorConfig, GeneratorConfig, TaskConfig
from noiselens.models.scene_models import SceneSpec, SensorNoiseModel

TRAIN_MODES = ("satgan", "pix2pix", "detector")
CONFIDENCE_TARGETS = ("iou", "one")
MIX_COMPONENTS = ("target", "sim", "generated")
DETECTOR_SOURCES = MIX_COMPONENTS + ("mixed",)


@dataclass(frozen=True)
class LossWeights:
    """alpha: l1 reproduction; beta: fake-image task term; lam: discriminator; gamma: task."""

    alpha: float = 100.0
    beta: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight {name} must be non-negative")


@dataclass(frozen=True)
class NoiseFieldSpec:
    """Generator input statistics: z ~ N(mu_z, sigma_z²), or z = c + w with w ~ N(mu_w, sigma_w²)."""

    mu_z: float = 0.0
    sigma_z: float = 1.0
    mu_w: float = 0.0
    sigma_w: float = 0.05

    def __post_init__(self):
        if self.sigma_z < 0 or self.sigma_w < 0:
            raise ConfigError("Noise-field standard deviations must be non-negative")


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Invalid optimizer settings")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "satgan"
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoiseFieldSpec = field(default_factory=NoiseFieldSpec)
    image_size: int = 64
    batch_size: int = 2
    steps_per_epoch: int = 50
    epochs: int = 10
    generator_optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    discriminator_optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    task_optimizer: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(lr=1e-3, beta1=0.9))
    seed: int = 0
    checkpoint_interval: int = 1
    task_pretrain_steps: int = 500
    coord_weight: float = 5.0
    noobj_weight: float = 0.5
    confidence_target: str = "iou"
    target_labeled: bool = True
    validation_size: int = 64

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got '{self.mode}'")
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs, batch_size and steps_per_epoch must be >= 1")
        if self.image_size < 1 or self.validation_size < 1:
            raise ConfigError("image_size and validation_size must be positive")
        if self.checkpoint_interval < 0 or self.task_pretrain_steps < 0:
            raise ConfigError("checkpoint_interval and task_pretrain_steps must be >= 0")
        if self.confidence_target not in CONFIDENCE_TARGETS:
            raise ConfigError(f"confidence_target must be one of {CONFIDENCE_TARGETS}")
        if self.mode == "pix2pix" and not self.target_labeled:
            raise ConfigError("pix2pix needs labeled target images to build blank contexts")
        if self.mode == "detector" and not self.target_labeled:
            raise ConfigError("detector training needs labeled images")


@dataclass(frozen=True)
class DataSettings:
    """Where training images come from; ``None`` means procedural generation."""

    target_dir: str = None
    context_dir: str = None
    validation_dir: str = None
    detector_source: str = "target"
    generator_checkpoint: str = None
    # source name -> relative weight, read when detector_source is "mixed"
    detector_mix: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.detector_source not in DETECTOR_SOURCES:
            raise ConfigError(f"detector_source must be one of {', '.join(DETECTOR_SOURCES)}")
        mix = {str(name): float(weight) for name, weight in (self.detector_mix or {}).items()}
        object.__setattr__(self, "detector_mix", mix)
        if self.detector_source == "mixed":
            unknown = sorted(set(mix) - set(MIX_COMPONENTS))
            if not mix or unknown:
                raise ConfigError(
                    f"detector_mix keys must come from {', '.join(MIX_COMPONENTS)}; got {sorted(mix)}"
                )
            if any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
                raise ConfigError("detector_mix weights must be non-negative with a positive sum")
        if "generated" in self.components and not self.generator_checkpoint:
            raise ConfigError("detector_source 'generated' needs data.generator_checkpoint")

    @property
    def components(self):
        """Plain sources the detector draws from, with their weights."""
        if self.detector_source == "mixed":
            return {name: weight for name, weight in self.detector_mix.items() if weight > 0}
        return {self.detector_source: 1.0}


@dataclass(frozen=True)
class EvaluationSettings:
    iou_threshold: float = 0.5
    threshold_count: int = 101
    magnitude_bin_width: float = 0.5

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("iou_threshold must lie in (0, 1]")
        if self.threshold_count < 2 or self.magnitude_bin_width <= 0:
            raise ConfigError("threshold_count must be >= 2 and magnitude_bin_width positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, one section per module."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    sensor: SensorNoiseModel = field(default_factory=SensorNoiseModel)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def __post_init__(self):
        size = self.train.image_size
        if (self.scene.height, self.scene.width) != (size, size):
            raise ConfigError(
                f"scene is {self.scene.height}x{self.scene.width} but train.image_size is {size}"
            )
        expected = 2 if self.train.mode == "pix2pix" else 1
        if self.discriminator.in_channels != expected:
            raise ConfigError(
                f"mode '{self.train.mode}' needs a discriminator with {expected} input channel(s)"
            )


@dataclass
class EpochReport:
    epoch: int
    loss_g: float
    loss_d: float
    loss_t: float
    precision: float
    recall: float
    f1_star: float
    wall_time: float = field(default=0.0, compare=False)

    CSV_HEADER = ("epoch", "L_G", "L_D", "L_T", "precision", "recall", "f1_star")

    def csv_row(self):
        return (
            self.epoch,
            self.loss_g,
            self.loss_d,
            self.loss_t,
            self.precision,
            self.recall,
            self.f1_star,
        )


@dataclass
class StepMetrics:
    """Losses of one training step; components not computed in a mode stay at 0."""

    loss_g: float = 0.0
    loss_d: float = 0.0
    loss_t: float = 0.0
    dropped_annotations: int = 0


@dataclass
class TaskGapRecord:
    """Task-network F1* on generated validation fakes versus the target split."""

    epoch: int
    f1_fake: float
    f1_target: float

    CSV_HEADER = ("epoch", "f1_fake", "f1_target", "gap")

    @property
    def gap(self):
        return self.f1_fake - self.f1_target

    def csv_row(self):
        return (self.epoch, self.f1_fake, self.f1_target, self.gap)


@dataclass
class TrainingResult:
    run_dir: str
    mode: str
    reports: list
    models: dict
    task_gaps: list = field(default_factory=list)


@dataclass
class Sim2RealResult:
    """Detectors trained on target, noiseless-sim and generated data, scored on one target split."""

    seed: int
    evaluations: dict
    reports: dict
    generated_noise: object = None
    target_noise: object = None

    SOURCES = ("target", "generated", "sim")
    CSV_HEADER = ("source", "precision", "recall", "f1_star")
    MIN_GENERATED_MARGIN = 0.03

    def f1_star(self, source):
        return self.evaluations[source].f1_star

    @property
    def ordering_holds(self):
        """F1* on target > generated > sim."""
        return self.f1_star("target") > self.f1_star("generated") > self.f1_star("sim")

    @property
    def generated_margin(self):
        return self.f1_star("generated") - self.f1_star("sim")

    @property
    def replicates(self):
        """Ordering holds and generated data beats noiseless sim by at least ``MIN_GENERATED_MARGIN``."""
        return self.ordering_holds and self.generated_margin >= self.MIN_GENERATED_MARGIN

    def csv_rows(self):
        rows = []
        for source in self.SOURCES:
            evaluation = self.evaluations[source]
            rows.append((source, evaluation.best.precision, evaluation.best.recall, evaluation.f1_star))
        return rows
