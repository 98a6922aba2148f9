"""Miniature sim2real comparison and noise-statistics measurements."""
import dataclasses
import logging
import os

import numpy as np

from noiselens.core.datasets import sample_noise_field
from noiselens.core.evaluation import evaluate_detector
from noiselens.core.scene_sim import flat_frame_statistics
from noiselens.core.training import RunSources, run_training
from noiselens.engine.tensor import Tensor
from noiselens.models.scene_models import NoiseStatistics
from noiselens.models.training_models import Sim2RealResult
from noiselens.services.metrics_service import write_report, write_rows
from noiselens.utils.helpers import make_rng
from noiselens.utils.logger import log_operation

logger = logging.getLogger(__name__)

DETECTOR_SOURCES = ("target", "sim", "generated")


def generated_noise_statistics(generator, noise, count=100, size=64, seed=0):
    """Mean and std of ñ = G(z) pooled over ``count`` independent noise fields."""
    values = []
    for index in range(count):
        z = sample_noise_field(make_rng(seed, index), (1, 1, size, size), noise)
        values.append(generator(Tensor(z)).numpy().astype(np.float64).ravel())
    pooled = np.concatenate(values)
    return NoiseStatistics(float(pooled.mean()), float(pooled.std()), int(pooled.size))


def relative_error(measured, reference):
    if reference == 0:
        return abs(measured)
    return abs(measured - reference) / abs(reference)


def _with_mode(run_config, mode, **data_changes):
    train = dataclasses.replace(run_config.train, mode=mode)
    discriminator = dataclasses.replace(run_config.discriminator, in_channels=1)
    data = dataclasses.replace(run_config.data, **data_changes) if data_changes else run_config.data
    return dataclasses.replace(run_config, train=train, discriminator=discriminator, data=data)


def run_sim2real_comparison(run_config, out_dir, seed=None, noise_samples=100):
    """Train SATGAN, then three identical detectors on target, sim and generated data.

    Layout of ``out_dir``: ``satgan/`` (the generator run), ``detector-<source>/`` per
    training source, ``sim2real.csv`` with the F1* of each detector on the held-out
    target split, ``noise_statistics.csv`` and the cross-run report CSVs.

    Args:
        run_config (RunConfig): Scene, sensor, networks and schedule; ``train.mode`` is
            overridden per stage.
        out_dir (str): Output directory.
        seed (int): Overrides ``run_config.train.seed``; every stage uses the same seed.
        noise_samples (int): Noise fields used for the ñ statistics.

    Returns:
        Sim2RealResult
    """
    seed = run_config.train.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)

    satgan_dir = os.path.join(out_dir, "satgan")
    satgan = run_training(_with_mode(run_config, "satgan"), satgan_dir, seed=seed)
    generator = satgan.models["generator"]
    checkpoint = os.path.join(satgan_dir, "checkpoints", "generator-latest.ckpt")

    evaluations, reports, run_dirs = {}, {}, []
    for name in DETECTOR_SOURCES:
        config = _with_mode(
            run_config,
            "detector",
            detector_source=name,
            generator_checkpoint=checkpoint if name == "generated" else run_config.data.generator_checkpoint,
        )
        run_dir = os.path.join(out_dir, f"detector-{name}")
        result = run_training(config, run_dir, seed=seed)
        validation = RunSources(config, seed).validation
        images, truths = validation.as_arrays()
        evaluations[name] = evaluate_detector(result.models["task"], images, truths, config.evaluation)
        reports[name] = result.reports
        run_dirs.append(run_dir)

    size = run_config.train.image_size
    generated_noise = generated_noise_statistics(generator, run_config.train.noise, noise_samples, size, seed)
    target_noise = flat_frame_statistics(
        run_config.sensor, level=run_config.scene.background_level, count=noise_samples, size=size, seed=seed
    )
    outcome = Sim2RealResult(seed, evaluations, reports, generated_noise, target_noise)

    write_rows(os.path.join(out_dir, "sim2real.csv"), Sim2RealResult.CSV_HEADER, outcome.csv_rows())
    write_rows(
        os.path.join(out_dir, "noise_statistics.csv"),
        ("source", "mean", "std", "samples"),
        [
            ("generated", generated_noise.mean, generated_noise.std, generated_noise.samples),
            ("target_sensor", target_noise.mean, target_noise.std, target_noise.samples),
        ],
    )
    write_report(run_dirs, out_dir)
    log_operation(
        out_dir,
        "sim2real",
        "success",
        {
            "seed": seed,
            "f1_star": {name: e.f1_star for name, e in evaluations.items()},
            "ordering_holds": outcome.ordering_holds,
            "replicates": outcome.replicates,
        },
    )
    logger.info(
        "sim2real seed %d: F1* target=%.4f generated=%.4f sim=%.4f",
        seed, outcome.f1_star("target"), outcome.f1_star("generated"), outcome.f1_star("sim"),
    )
    return outcome
