"""marshmallow schemas for run-config files and annotation sidecars.

Only keys present in a document are passed to the dataclass constructors, so the
dataclasses stay the single home of every default. Unknown keys are rejected.
"""
import copy
import json
import logging

from marshmallow import RAISE, Schema, ValidationError, fields, post_load, validate

from noiselens.core.exceptions import ConfigError, InvalidAnnotationError
from noiselens.models.network_models import DiscriminatorConfig, GeneratorConfig, TaskConfig
from noiselens.models.scene_models import SceneSpec, SensorNoiseModel
from noiselens.models.training_models import (
    TRAIN_MODES,
    DataSettings,
    EvaluationSettings,
    LossWeights,
    NoiseFieldSpec,
    OptimizerSettings,
    RunConfig,
    TrainConfig,
)

logger = logging.getLogger(__name__)

UNKNOWN_FIELD = "Unknown field."


def pair_field(inner):
    return fields.List(inner, validate=validate.Length(equal=2))


class StrictSchema(Schema):
    class Meta:
        unknown = RAISE

    model = None

    @post_load
    def make_object(self, data, **kwargs):
        return self.model(**data) if self.model is not None else data


class SceneSchema(StrictSchema):
    model = SceneSpec

    height = fields.Int(validate=validate.Range(min=1))
    width = fields.Int(validate=validate.Range(min=1))
    object_count_range = pair_field(fields.Int())
    object_magnitude_range = pair_field(fields.Float())
    reference_magnitude = fields.Float()
    reference_magnitude_flux = fields.Float()
    psf_sigma = fields.Float()
    star_count_range = pair_field(fields.Int())
    star_magnitude_range = pair_field(fields.Float())
    background_level = fields.Float()
    seed = fields.Int()


class SensorSchema(StrictSchema):
    model = SensorNoiseModel

    read_noise_sigma = fields.Float()
    shot_noise_gain = fields.Float()
    hot_pixel_prob = fields.Float()
    dead_pixel_prob = fields.Float()
    structured_amplitude = fields.Float()
    structured_period = fields.Float()
    structured_phase_seed = fields.Int()


class LossWeightsSchema(StrictSchema):
    model = LossWeights

    alpha = fields.Float()
    beta = fields.Float()
    lam = fields.Float(data_key="lambda")
    gamma = fields.Float()


class NoiseFieldSchema(StrictSchema):
    model = NoiseFieldSpec

    mu_z = fields.Float()
    sigma_z = fields.Float()
    mu_w = fields.Float()
    sigma_w = fields.Float()


class OptimizerSchema(StrictSchema):
    model = OptimizerSettings

    lr = fields.Float()
    beta1 = fields.Float()
    beta2 = fields.Float()
    eps = fields.Float()


class TrainSchema(StrictSchema):
    model = TrainConfig

    mode = fields.Str(validate=validate.OneOf(TRAIN_MODES))
    weights = fields.Nested(LossWeightsSchema)
    noise = fields.Nested(NoiseFieldSchema)
    image_size = fields.Int()
    batch_size = fields.Int()
    steps_per_epoch = fields.Int()
    epochs = fields.Int()
    generator_optimizer = fields.Nested(OptimizerSchema)
    discriminator_optimizer = fields.Nested(OptimizerSchema)
    task_optimizer = fields.Nested(OptimizerSchema)
    seed = fields.Int()
    checkpoint_interval = fields.Int()
    task_pretrain_steps = fields.Int()
    coord_weight = fields.Float()
    noobj_weight = fields.Float()
    confidence_target = fields.Str()
    target_labeled = fields.Bool()
    validation_size = fields.Int()


class GeneratorSchema(StrictSchema):
    model = GeneratorConfig

    in_channels = fields.Int()
    base_channels = fields.Int()
    depth = fields.Int()
    attention_after_layer = fields.Int()
    use_attention = fields.Bool()
    attention_reduction = fields.Int()
    kernel_size = fields.Int()
    stride = fields.Int()
    max_channels = fields.Int()
    noise_range = fields.Float()


class DiscriminatorSchema(StrictSchema):
    model = DiscriminatorConfig

    in_channels = fields.Int()
    layer_channels = fields.List(fields.Int(validate=validate.Range(min=1)))
    layer_strides = fields.List(fields.Int(validate=validate.Range(min=1)))
    kernel_size = fields.Int()


class TaskSchema(StrictSchema):
    model = TaskConfig

    grid_size = fields.Int()
    channels = fields.List(fields.Int(validate=validate.Range(min=1)))
    strides = fields.List(fields.Int(validate=validate.Range(min=1)))
    kernel_size = fields.Int()
    box_prior = fields.Float()
    box_log_range = fields.Float()


class EvaluationSchema(StrictSchema):
    model = EvaluationSettings

    iou_threshold = fields.Float()
    threshold_count = fields.Int()
    magnitude_bin_width = fields.Float()


class DataSchema(StrictSchema):
    model = DataSettings

    target_dir = fields.Str(allow_none=True)
    context_dir = fields.Str(allow_none=True)
    validation_dir = fields.Str(allow_none=True)
    detector_source = fields.Str()
    generator_checkpoint = fields.Str(allow_none=True)
    detector_mix = fields.Dict(keys=fields.Str(), values=fields.Float())


class RunConfigSchema(StrictSchema):
    model = RunConfig

    scene = fields.Nested(SceneSchema)
    sensor = fields.Nested(SensorSchema)
    train = fields.Nested(TrainSchema)
    generator = fields.Nested(GeneratorSchema)
    discriminator = fields.Nested(DiscriminatorSchema)
    task = fields.Nested(TaskSchema)
    evaluation = fields.Nested(EvaluationSchema)
    data = fields.Nested(DataSchema)


class AnnotatedObjectSchema(StrictSchema):
    cx = fields.Float(required=True)
    cy = fields.Float(required=True)
    w = fields.Float(required=True)
    h = fields.Float(required=True)
    magnitude = fields.Float()


class AnnotationFileSchema(StrictSchema):
    image = fields.Str(required=True)
    height = fields.Int(required=True, validate=validate.Range(min=1))
    width = fields.Int(required=True, validate=validate.Range(min=1))
    objects = fields.List(fields.Nested(AnnotatedObjectSchema), required=True)


def _format_errors(messages, prefix=""):
    parts = []
    for key, value in messages.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            parts.extend(_format_errors(value, path))
        else:
            text = value[0] if isinstance(value, list) and value else value
            parts.append(f"{path}: {text}")
    return parts


def _unknown_paths(messages, prefix=()):
    for key, value in messages.items():
        if isinstance(value, dict):
            yield from _unknown_paths(value, prefix + (key,))
        else:
            yield prefix + (key,) if value == [UNKNOWN_FIELD] else None


def _without(data, paths):
    data = copy.deepcopy(data)
    for path in paths:
        node = data
        for key in path[:-1]:
            node = node[key]
        node.pop(path[-1], None)
    return data


def load_run_config(data, strict=True):
    """Validate a decoded run-config document and build a RunConfig.

    Args:
        data (dict): Parsed JSON document; missing sections take their defaults.
        strict (bool): When False, unknown keys are dropped with a warning instead of
            failing the load.

    Returns:
        RunConfig: The resolved configuration.

    Raises:
        ConfigError: On unknown keys, wrong types or invalid values.
    """
    if not isinstance(data, dict):
        raise ConfigError("Run config must be a JSON object")
    try:
        return RunConfigSchema().load(data)
    except ValidationError as e:
        paths = list(_unknown_paths(e.messages))
        if not strict and paths and None not in paths:
            for path in paths:
                logger.warning("Ignoring unknown config key %s", ".".join(map(str, path)))
            return load_run_config(_without(data, paths), strict=True)
        raise ConfigError("; ".join(_format_errors(e.messages))) from e
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_run_config_text(text, strict=True):
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"Run config is not valid JSON: {e}") from e
    return load_run_config(data, strict)


def dump_run_config(run_config):
    """Fully resolved config as a JSON-ready dict, defaults included."""
    return RunConfigSchema().dump(run_config)


def load_annotation_document(data):
    """Validate an annotation sidecar; returns the plain dict."""
    try:
        return AnnotationFileSchema().load(data)
    except ValidationError as e:
        raise InvalidAnnotationError(
            "Invalid annotation file: " + "; ".join(_format_errors(e.messages))
        ) from e
