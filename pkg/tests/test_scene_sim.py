import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noiselens.core.exceptions import ConfigError, InvalidAnnotationError
from noiselens.core.scene_sim import (
    apply_sensor_noise,
    dataset_mean,
    flat_frame_statistics,
    magnitude_to_flux_ratio,
    make_blank_context,
    render_scene,
    render_sources,
    sample_sources,
    structured_pattern,
)
from noiselens.models.scene_models import Annotation, PointSource, SceneSpec, SensorNoiseModel


def test_empty_scene_is_uniform_background():
    spec = SceneSpec(height=8, width=8, object_count_range=(0, 0), star_count_range=(0, 0))
    image, annotations = render_scene(spec, seed=1)
    assert image.shape == (1, 8, 8)
    assert np.allclose(image.numpy(), 0.1)
    assert annotations == []


def test_reference_magnitude_peak():
    """A source at the reference magnitude peaks at background + reference flux."""
    spec = SceneSpec(height=32, width=32)
    image, annotations = render_sources(spec, [PointSource(16.0, 16.0, spec.reference_magnitude)])
    assert abs(image.numpy().max() - (spec.background_level + spec.reference_magnitude_flux)) < 1e-5
    assert len(annotations) == 1
    box = annotations[0]
    assert np.isclose(box.w * 32, 6.0) and np.isclose(box.h * 32, 6.0)
    assert np.isclose(box.cx, 16.5 / 32) and np.isclose(box.cy, 16.5 / 32)


def test_five_magnitudes_is_hundredfold():
    spec = SceneSpec(height=32, width=48, background_level=0.0)
    image, _ = render_sources(spec, [PointSource(8.0, 16.0, 10.0), PointSource(40.0, 16.0, 15.0)])
    data = image.numpy()[0].astype(np.float64)
    ratio = data[16, 8] / data[16, 40]
    assert abs(ratio / 100.0 - 1.0) < 0.01


def test_magnitude_to_flux_ratio():
    assert np.isclose(magnitude_to_flux_ratio(5), 100.0)
    assert magnitude_to_flux_ratio(0) == 1.0
    assert np.isclose(magnitude_to_flux_ratio(2.5), 10.0)


def test_render_scene_is_reproducible(small_scene):
    first_image, first_boxes = render_scene(small_scene, seed=42)
    second_image, second_boxes = render_scene(small_scene, seed=42)
    assert np.array_equal(first_image.numpy(), second_image.numpy())
    assert first_boxes == second_boxes


def test_annotations_enumerate_objects_only():
    """Stars are rendered but never annotated; every object gets exactly one box."""
    spec = SceneSpec(height=32, width=32, object_count_range=(2, 3), star_count_range=(2, 4))
    for seed in range(5):
        sources = sample_sources(spec, np.random.default_rng(seed))
        _, annotations = render_scene(spec, seed)
        objects = [s for s in sources if s.is_object]
        assert len(annotations) == len(objects)
        assert [a.magnitude for a in annotations] == [s.magnitude for s in objects]


def test_boxes_clipped_at_frame_edge():
    spec = SceneSpec(height=16, width=16)
    _, annotations = render_sources(spec, [PointSource(0.0, 15.0, 11.0)])
    box = annotations[0]
    assert box.cx - box.w / 2 >= 0.0
    assert box.cy + box.h / 2 <= 1.0 + 1e-9
    assert box.w * 16 < 6.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_scenes_and_degradations_stay_in_unit_range(seed):
    spec = SceneSpec(height=16, width=16, object_count_range=(0, 3), star_count_range=(0, 3))
    sensor = SensorNoiseModel(read_noise_sigma=0.2, shot_noise_gain=0.1, hot_pixel_prob=0.05,
                              dead_pixel_prob=0.05, structured_amplitude=0.3)
    image, _ = render_scene(spec, seed)
    noisy = apply_sensor_noise(image, sensor, seed).numpy()
    for data in (image.numpy(), noisy):
        assert data.min() >= 0.0 and data.max() <= 1.0


def test_zero_sensor_model_is_identity(small_scene):
    image, _ = render_scene(small_scene, seed=5)
    out = apply_sensor_noise(image, SensorNoiseModel(), seed=9)
    assert np.array_equal(out.numpy(), image.numpy())


def test_read_noise_standard_deviation():
    flat = np.full((1, 128, 128), 0.5, dtype=np.float32)
    out = apply_sensor_noise(flat, SensorNoiseModel(read_noise_sigma=0.05), seed=0).numpy()
    assert abs(out.astype(np.float64).std() - 0.05) <= 0.005


def test_hot_pixel_count():
    flat = np.full((1, 128, 128), 0.5, dtype=np.float32)
    out = apply_sensor_noise(flat, SensorNoiseModel(hot_pixel_prob=0.01), seed=0).numpy()
    assert abs(int((out == 1.0).sum()) - 164) <= 40


def test_dead_pixels_are_zero():
    flat = np.full((1, 64, 64), 0.5, dtype=np.float32)
    out = apply_sensor_noise(flat, SensorNoiseModel(dead_pixel_prob=0.1), seed=0).numpy()
    dead = out == 0.0
    assert 0 < dead.sum() < out.size
    assert np.all(out[~dead] == 0.5)


def test_structured_pattern_depends_only_on_phase_seed():
    model = SensorNoiseModel(structured_amplitude=0.1, structured_phase_seed=4)
    first = structured_pattern(model, 32, 32)
    assert np.array_equal(first, structured_pattern(model, 32, 32))
    assert np.isclose(np.abs(first).max(), 0.1)
    other = structured_pattern(SensorNoiseModel(structured_amplitude=0.1, structured_phase_seed=5), 32, 32)
    assert not np.array_equal(first, other)


def test_flat_frame_statistics_track_read_noise():
    stats = flat_frame_statistics(SensorNoiseModel(read_noise_sigma=0.05), count=4, size=64)
    assert abs(stats.mean) < 0.005
    assert abs(stats.std - 0.05) < 0.005
    assert stats.samples == 4 * 64 * 64


def test_blank_context_without_annotations():
    target = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    blank = make_blank_context(target, [], 0.25).numpy()
    assert np.all(blank == np.float32(0.25))


def test_blank_context_full_frame_copy():
    target = np.random.default_rng(1).uniform(size=(1, 8, 8)).astype(np.float32)
    blank = make_blank_context(target, [Annotation(0.5, 0.5, 1.0, 1.0)], 0.25).numpy()
    assert np.array_equal(blank, target)


def test_blank_context_copies_exactly_the_box():
    target = np.random.default_rng(2).uniform(0.6, 1.0, size=(1, 16, 16)).astype(np.float32)
    box = Annotation(cx=(3 + 2.5) / 16, cy=(7 + 2.5) / 16, w=5 / 16, h=5 / 16)
    blank = make_blank_context(target, [box], 0.5).numpy()
    differs = blank != np.float32(0.5)
    assert int(differs.sum()) == 25
    assert np.array_equal(blank[0, 7:12, 3:8], target[0, 7:12, 3:8])


def test_blank_context_ignores_stars():
    target = np.ones((1, 8, 8), dtype=np.float32)
    star = Annotation(0.5, 0.5, 0.5, 0.5, is_object=False)
    assert np.all(make_blank_context(target, [star], 0.1).numpy() == np.float32(0.1))


def test_dataset_mean():
    images = [np.zeros((1, 2, 2)), np.ones((1, 2, 2))]
    assert dataset_mean(images) == 0.5


def test_invalid_scene_and_sensor_configs():
    with pytest.raises(ConfigError):
        SceneSpec(object_count_range=(3, 1))
    with pytest.raises(ConfigError):
        SceneSpec(background_level=0.5, reference_magnitude_flux=0.6)
    with pytest.raises(ConfigError):
        SceneSpec(psf_sigma=0.0)
    with pytest.raises(ConfigError):
        SensorNoiseModel(hot_pixel_prob=1.5)
    with pytest.raises(ConfigError):
        SensorNoiseModel(read_noise_sigma=-0.1)


def test_invalid_annotations():
    with pytest.raises(InvalidAnnotationError):
        Annotation(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(InvalidAnnotationError):
        Annotation(0.95, 0.5, 0.2, 0.1)
