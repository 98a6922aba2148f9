import json
import os
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from noiselens.cli import main
from noiselens.config import TestingConfig
from noiselens.core.networks import Generator
from noiselens.models.detection_models import Detection
from noiselens.models.schemas import dump_run_config
from noiselens.models.scene_models import NoiseStatistics
from noiselens.models.training_models import EpochReport, Sim2RealResult
from noiselens.services.dataset_service import list_images, load_dataset, read_image
from noiselens.services.metrics_service import write_epoch_metrics
from noiselens.utils.logger import get_operation_logs

from conftest import small_generator_config


@pytest.fixture
def config_path(temp_dir, run_config):
    path = os.path.join(temp_dir, "run.json")
    with open(path, "w") as f:
        json.dump(dump_run_config(run_config), f)
    return path


@pytest.fixture
def scenes(temp_dir, config_path):
    out = os.path.join(temp_dir, "scenes")
    assert main(["simulate", "--config", config_path, "--out", out, "--count", "3", "--seed", "4"]) == 0
    return out


def _files(directory):
    return {
        name: open(os.path.join(directory, name), "rb").read()
        for name in sorted(os.listdir(directory))
        if name != "operations.json"
    }


def test_simulate_is_deterministic(temp_dir, config_path, scenes):
    again = os.path.join(temp_dir, "again")
    assert main(["simulate", "--config", config_path, "--out", again, "--count", "3", "--seed", "4"]) == 0
    files = _files(scenes)
    assert sorted(files) == [f"frame-{i:05d}.{ext}" for i in range(3) for ext in ("json", "png")]
    assert files == _files(again)

    other = os.path.join(temp_dir, "other")
    main(["simulate", "--config", config_path, "--out", other, "--count", "3", "--seed", "5"])
    assert files != _files(other)

    log = get_operation_logs(scenes)
    assert log[0]["operation"] == "simulate"
    assert log[0]["details"]["seed"] == 4


def test_simulate_degrade_adds_sensor_noise(temp_dir, config_path, scenes):
    noisy = os.path.join(temp_dir, "noisy")
    assert main(["simulate", "--config", config_path, "--out", noisy, "--count", "3", "--seed", "4",
                 "--degrade"]) == 0
    clean = read_image(os.path.join(scenes, "frame-00000.png")).numpy()
    assert not np.array_equal(read_image(os.path.join(noisy, "frame-00000.png")).numpy(), clean)


def test_degrade_and_blank_keep_annotations(temp_dir, config_path, scenes):
    degraded = os.path.join(temp_dir, "degraded")
    assert main(["degrade", "--config", config_path, "--input", scenes, "--out", degraded]) == 0
    assert _files(degraded).keys() == _files(scenes).keys()

    blanks = os.path.join(temp_dir, "blanks")
    assert main(["blank", "--input", degraded, "--out", blanks, "--mean", "0.25"]) == 0
    dataset = load_dataset(blanks)
    assert dataset.labeled
    images, truths = dataset.as_arrays()
    assert len(images) == 3
    assert all(len(t) >= 1 for t in truths)
    # at most two object boxes are copied from a 16x16 frame
    filled = np.isclose(images, 0.25, atol=1.0 / 65535).reshape(3, -1).mean(axis=1)
    assert np.all(filled > 0.5)


@pytest.mark.parametrize("context_noise", [False, True])
def test_generate_with_silent_generator_reproduces_contexts(temp_dir, config_path, scenes, context_noise):
    """With G(z) = 0 every fake is its context and annotations pass through untouched."""
    generator = Generator(small_generator_config(), seed=1)
    generator.zero_output()
    out = os.path.join(temp_dir, "fakes")
    argv = ["generate", "--config", config_path, "--checkpoint", "g.ckpt", "--input", scenes, "--out", out]
    if context_noise:
        argv.append("--context-noise")

    with patch("noiselens.cli.commands.load_checkpoint", return_value=generator) as loader:
        assert main(argv) == 0
    loader.assert_called_once_with("g.ckpt", kind="generator")

    for path in list_images(scenes):
        name = os.path.basename(path)
        assert np.array_equal(read_image(os.path.join(out, name)).numpy(), read_image(path).numpy())
        sidecar = name.replace(".png", ".json")
        with open(os.path.join(scenes, sidecar), "rb") as a, open(os.path.join(out, sidecar), "rb") as b:
            assert a.read() == b.read()


def test_evaluate_perfect_detector(temp_dir, config_path, scenes):
    _, truths = load_dataset(scenes).as_arrays()
    perfect = [[Detection(t.cx, t.cy, t.w, t.h, 0.95) for t in boxes] for boxes in truths]
    out = os.path.join(temp_dir, "eval")

    with patch("noiselens.cli.commands.load_checkpoint"), \
            patch("noiselens.cli.commands.predict_detections", return_value=perfect):
        code = main(["evaluate", "--config", config_path, "--checkpoint", "t.ckpt", "--input", scenes,
                     "--out", out, "--overlays", "2"])
    assert code == 0

    with open(os.path.join(out, "summary.json")) as f:
        summary = json.load(f)
    assert summary["precision"] == 1.0 and summary["recall"] == 1.0 and summary["f1_star"] == 1.0
    assert summary["truths"] == sum(len(t) for t in truths)
    with open(os.path.join(out, "pr_curve.csv")) as f:
        rows = f.read().splitlines()
    assert rows[0] == "threshold,tp,fp,fn,precision,recall,f1"
    assert len(rows) == 102
    assert os.path.exists(os.path.join(out, "recall_by_magnitude.csv"))
    assert sorted(os.listdir(os.path.join(out, "overlays"))) == ["frame-00000-overlay.png", "frame-00001-overlay.png"]


def test_train_from_config(temp_dir, config_path, capsys):
    out = os.path.join(temp_dir, "run")
    assert main(["train", "--config", config_path, "--out", out, "--seed", "2"]) == 0
    assert capsys.readouterr().out.startswith("satgan: 2 epoch(s)")
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    entry = get_operation_logs(out, operation_type="train")[0]
    assert entry["status"] == "success"
    assert len(entry["details"]["config_hash"]) == 64


def test_report_command(temp_dir):
    runs = []
    for name, values in (("first", [0.2, 0.6]), ("second", [0.5, 0.4])):
        run = os.path.join(temp_dir, name)
        os.makedirs(run)
        reports = [EpochReport(i, 0.0, 0.0, 0.0, v, v, v) for i, v in enumerate(values, start=1)]
        write_epoch_metrics(os.path.join(run, "metrics.csv"), reports)
        runs.append(run)
    out = os.path.join(temp_dir, "report")
    assert main(["report", "--runs", *runs, "--out", out]) == 0
    with open(os.path.join(out, "best_epochs.csv")) as f:
        lines = f.read().splitlines()
    assert lines[1].startswith("first,2,")
    assert lines[2].startswith("second,1,")


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["simulate", "--out", "x"]) == 2
    assert capsys.readouterr().err.startswith("error: ")


def test_invalid_config_exits_2(temp_dir, capsys):
    path = os.path.join(temp_dir, "bad.json")
    with open(path, "w") as f:
        json.dump({"train": {"epochs": 2, "warp_speed": 9}}, f)
    out = os.path.join(temp_dir, "out")
    assert main(["simulate", "--config", path, "--out", out, "--count", "1"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ") and "warp_speed" in err
    assert len(err.strip().splitlines()) == 1
    assert get_operation_logs(out, status="failed")[0]["details"]["type"] == "ConfigError"


def test_missing_files_exit_3(temp_dir):
    out = os.path.join(temp_dir, "out")
    assert main(["simulate", "--config", os.path.join(temp_dir, "none.json"), "--out", out, "--count", "1"]) == 3
    assert main(["degrade", "--input", os.path.join(temp_dir, "none"), "--out", out]) == 3


def test_data_errors_exit_4(temp_dir, config_path):
    bare = os.path.join(temp_dir, "bare")
    main(["simulate", "--config", config_path, "--out", bare, "--count", "2"])
    for path in os.listdir(bare):
        if path.endswith(".json"):
            os.remove(os.path.join(bare, path))
    assert main(["blank", "--input", bare, "--out", os.path.join(temp_dir, "out")]) == 4


def test_checkpoint_errors_exit_5(temp_dir, scenes, capsys):
    broken = os.path.join(temp_dir, "broken.ckpt")
    with open(broken, "wb") as f:
        f.write(b"definitely not a checkpoint")
    code = main(["generate", "--checkpoint", broken, "--input", scenes, "--out", os.path.join(temp_dir, "out")])
    assert code == 5
    assert capsys.readouterr().err.startswith("error: ")


def test_seed_falls_back_to_environment_default(temp_dir):
    out = os.path.join(temp_dir, "defaults")
    with patch.object(TestingConfig, "DEFAULT_SEED", 9):
        assert main(["simulate", "--out", out, "--count", "1"]) == 0
    assert get_operation_logs(out)[0]["details"]["seed"] == 9


def _comparison(seed, target, generated, sim):
    scores = {"target": target, "generated": generated, "sim": sim}
    noise = NoiseStatistics(0.0, 0.05, 100)
    return Sim2RealResult(
        seed=seed,
        evaluations={name: SimpleNamespace(f1_star=value) for name, value in scores.items()},
        reports={},
        generated_noise=noise,
        target_noise=noise,
    )


def test_sim2real_counts_a_seed_only_with_the_generated_margin(temp_dir, config_path, capsys):
    outcomes = {0: _comparison(0, 0.9, 0.52, 0.5), 1: _comparison(1, 0.9, 0.6, 0.5)}
    out = os.path.join(temp_dir, "sim2real")
    with patch(
        "noiselens.cli.commands.run_sim2real_comparison", side_effect=lambda config, path, seed: outcomes[seed]
    ):
        assert main(["sim2real", "--config", config_path, "--out", out, "--seeds", "0", "1"]) == 0

    assert "on 1 of 2 seed(s)" in capsys.readouterr().out
    table = pd.read_csv(os.path.join(out, "sim2real_seeds.csv"))
    assert list(table["ordering_holds"]) == [True, True]
    assert list(table["replicates"]) == [False, True]
    assert get_operation_logs(out, operation_type="sim2real")[0]["details"]["replicated"] == 1
