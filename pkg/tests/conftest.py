import os
import sys
import shutil
import tempfile

import numpy as np
import pytest

# Add the parent directory to sys.path to fix import issues
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

os.environ.setdefault('NOISELENS_ENV', 'test')

from noiselens.engine import Tape, backward
from noiselens.models.network_models import DiscriminatorConfig, GeneratorConfig, TaskConfig
from noiselens.models.scene_models import SceneSpec, SensorNoiseModel
from noiselens.models.training_models import RunConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow experiment tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running experiment test')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir():
    """Temporary directory removed after the test."""
    path = tempfile.mkdtemp()
    yield path
    shutil.rmtree(path, ignore_errors=True)


@pytest.fixture
def small_scene():
    """16x16 scene with one or two objects and no stars."""
    return SceneSpec(
        height=16,
        width=16,
        object_count_range=(1, 2),
        object_magnitude_range=(10.0, 11.0),
        star_count_range=(0, 0),
        seed=3,
    )


@pytest.fixture
def toy_sensor():
    return SensorNoiseModel(read_noise_sigma=0.02, shot_noise_gain=0.01, structured_amplitude=0.0)


def small_generator_config(**overrides):
    values = dict(base_channels=4, depth=2, attention_after_layer=2, attention_reduction=4, max_channels=16)
    values.update(overrides)
    return GeneratorConfig(**values)


def small_discriminator_config(**overrides):
    values = dict(layer_channels=(4, 8), layer_strides=(2, 2))
    values.update(overrides)
    return DiscriminatorConfig(**values)


def small_task_config(**overrides):
    values = dict(grid_size=4, channels=(4, 8), strides=(2, 2), box_prior=0.3)
    values.update(overrides)
    return TaskConfig(**values)


def small_run_config(scene, sensor, **train_overrides):
    """RunConfig for 16x16 images and tiny networks."""
    mode = train_overrides.get('mode', 'satgan')
    train_values = dict(
        image_size=16,
        batch_size=2,
        steps_per_epoch=2,
        epochs=2,
        task_pretrain_steps=2,
        validation_size=4,
    )
    train_values.update(train_overrides)
    return RunConfig(
        scene=scene,
        sensor=sensor,
        train=TrainConfig(**train_values),
        generator=small_generator_config(),
        discriminator=small_discriminator_config(in_channels=2 if mode == 'pix2pix' else 1),
        task=small_task_config(),
    )


@pytest.fixture
def run_config(small_scene, toy_sensor):
    return small_run_config(small_scene, toy_sensor)


FLOAT32_EPS = float(np.finfo(np.float32).eps)


def _loss_at(loss_fn, param, index, value):
    param.data.flat[index] = value
    return loss_fn().item(), float(param.data.flat[index])


def gradcheck(loss_fn, params, samples=20, step=4e-3, rtol=1e-2, seed=0, max_draws=None):
    """Compare tape gradients with central differences on sampled parameter entries.

    Each entry is compared relatively, with the half-step central difference. Entries
    whose gradient is lost in float32 rounding of the loss are redrawn, as are entries
    within ``step`` of a kink: there the full- and half-step estimates disagree, or
    the one-sided slopes do.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values.
    Returns the list of (analytic, numeric) pairs that were checked, ``samples`` long.
    """
    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params], dtype=np.float64)
    checked = []
    for _ in range(max_draws or 20 * samples):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        param = params[which]
        index = int(rng.integers(param.size))
        original = param.data.flat[index]
        centre = loss_fn().item()
        estimates = []
        for h in (step, step / 2):
            plus, upper = _loss_at(loss_fn, param, index, original + h)
            minus, lower = _loss_at(loss_fn, param, index, original - h)
            param.data.flat[index] = original
            width = (upper - lower) / 2
            estimates.append(((plus - minus) / (2 * width), (plus - centre) / width, (centre - minus) / width))
        (coarse, _, _), (numeric, forward, backward_) = estimates

        noise = 4 * FLOAT32_EPS * (abs(centre) + 1e-6) / (step / 2)
        expected = float(analytic[which].flat[index])
        scale = max(abs(expected), abs(numeric))
        if scale < 10 * noise:
            continue
        if abs(coarse - numeric) > rtol * scale + noise or abs(forward - backward_) > 0.25 * scale + noise:
            continue
        assert abs(expected - numeric) <= rtol * scale + noise, (
            f"{param.name}[{index}]: analytic {expected:.6g} vs numeric {numeric:.6g}"
        )
        checked.append((expected, numeric))
        if len(checked) == samples:
            return checked
    raise AssertionError(f"only {len(checked)} of {samples} sampled entries were smooth and above float32 noise")
