import json
import os
from unittest.mock import patch

import pytest

from noiselens.config import DevelopmentConfig, ProductionConfig, TestingConfig, get_config
from noiselens.core.exceptions import ConfigError, InvalidAnnotationError
from noiselens.models.schemas import (
    dump_run_config,
    load_annotation_document,
    load_run_config,
    load_run_config_text,
)
from noiselens.models.training_models import RunConfig


def test_get_config_follows_environment():
    for env, expected in (("dev", DevelopmentConfig), ("prod", ProductionConfig), ("test", TestingConfig)):
        with patch.dict(os.environ, {"NOISELENS_ENV": env}):
            assert get_config() is expected
    assert TestingConfig.LOG_DIR is None
    assert TestingConfig.STRICT_CONFIG


def test_get_config_rejects_unknown_environment():
    with patch.dict(os.environ, {"NOISELENS_ENV": "staging"}):
        with pytest.raises(ConfigError, match="staging"):
            get_config()


def test_empty_document_gives_defaults():
    assert load_run_config({}) == RunConfig()
    assert load_run_config_text("   ") == RunConfig()


def test_partial_sections_keep_other_defaults():
    config = load_run_config({"train": {"epochs": 3, "weights": {"lambda": 0.5}}, "scene": {"seed": 9}})
    assert config.train.epochs == 3
    assert config.train.weights.lam == 0.5
    assert config.train.weights.alpha == RunConfig().train.weights.alpha
    assert config.scene.seed == 9
    assert config.scene.height == RunConfig().scene.height


def test_dump_is_fully_resolved(run_config):
    document = dump_run_config(run_config)
    assert document["train"]["weights"]["lambda"] == run_config.train.weights.lam
    assert document["scene"]["object_count_range"] == [1, 2]
    assert load_run_config(json.loads(json.dumps(document))) == run_config


def test_unknown_keys_are_rejected_in_strict_mode():
    with pytest.raises(ConfigError) as e:
        load_run_config({"train": {"epochs": 2, "warp_speed": 9}})
    assert "train.warp_speed" in str(e.value)


def test_unknown_keys_are_dropped_when_lenient():
    config = load_run_config({"train": {"epochs": 2, "warp_speed": 9}, "colour": "red"}, strict=False)
    assert config.train.epochs == 2
    # type errors still fail
    with pytest.raises(ConfigError):
        load_run_config({"train": {"epochs": "many", "warp_speed": 9}}, strict=False)


def test_invalid_values_become_config_errors():
    bad_documents = [
        [],
        {"train": {"mode": "cyclegan"}},
        {"train": {"epochs": 0}},
        {"scene": {"height": 32}},
        {"train": {"mode": "pix2pix"}},
        {"scene": {"object_count_range": [1]}},
        {"sensor": {"hot_pixel_prob": 2.0}},
        {"data": {"detector_source": "mixed"}},
        {"data": {"detector_source": "mixed", "detector_mix": {"satnet": 1.0}}},
        {"data": {"detector_source": "mixed", "detector_mix": {"target": 1.0, "sim": -1.0}}},
        {"data": {"detector_source": "mixed", "detector_mix": {"target": 1.0, "generated": 1.0}}},
    ]
    for document in bad_documents:
        with pytest.raises(ConfigError):
            load_run_config(document)
    with pytest.raises(ConfigError):
        load_run_config_text("{broken")


def test_mixed_detector_source_round_trips():
    document = {"data": {"detector_source": "mixed", "detector_mix": {"target": 1, "sim": 3, "generated": 0}}}
    config = load_run_config(document)
    assert config.data.detector_mix == {"target": 1.0, "sim": 3.0, "generated": 0.0}
    assert config.data.components == {"target": 1.0, "sim": 3.0}
    assert load_run_config(dump_run_config(config)) == config


def test_pix2pix_config_needs_conditional_discriminator():
    config = load_run_config({"train": {"mode": "pix2pix"}, "discriminator": {"in_channels": 2}})
    assert config.discriminator.in_channels == 2


def test_annotation_document_schema():
    document = load_annotation_document(
        {"image": "a.png", "height": 4, "width": 4, "objects": [{"cx": 0.5, "cy": 0.5, "w": 0.5, "h": 0.5}]}
    )
    assert document["objects"][0]["cx"] == 0.5
    with pytest.raises(InvalidAnnotationError):
        load_annotation_document({"image": "a.png", "height": 0, "width": 4, "objects": []})
