"""Subcommand implementations.

Each command takes the parsed arguments and the environment config, does its work and
returns a details dict that ends up in the output directory's operation log.
"""
import json
import logging
import os

import numpy as np

from noiselens.core.datasets import (
    CONTEXT_STREAM,
    TARGET_STREAM,
    ProceduralSource,
    sample_context_noise,
    sample_noise_field,
)
from noiselens.core.evaluation import evaluate_detections, hallucination_audit, predict_detections
from noiselens.core.exceptions import ShapeError
from noiselens.core.experiments import relative_error, run_sim2real_comparison
from noiselens.core.losses import compose_fake
from noiselens.core.scene_sim import apply_sensor_noise, dataset_mean, make_blank_context
from noiselens.core.training import run_training
from noiselens.engine.tensor import Tensor
from noiselens.models.schemas import dump_run_config, load_run_config_text
from noiselens.models.training_models import RunConfig, Sim2RealResult
from noiselens.services.checkpoint_service import load_checkpoint
from noiselens.services.dataset_service import (
    copy_sidecar,
    list_images,
    load_dataset,
    read_image,
    write_image,
    write_sample,
)
from noiselens.services.metrics_service import (
    write_hallucination,
    write_pr_curve,
    write_recall_by_magnitude,
    write_report,
    write_rows,
)
from noiselens.services.overlay_service import write_overlays
from noiselens.utils.helpers import atomic_write_json, derive_seed, generate_operation_param_hash, make_rng

logger = logging.getLogger(__name__)


def load_config(args, settings):
    """``(RunConfig, raw text or None)`` from ``--config``; defaults without one."""
    if not getattr(args, "config", None):
        return RunConfig(), None
    if not os.path.exists(args.config):
        raise FileNotFoundError(2, "Config file not found", args.config)
    with open(args.config, "r") as f:
        text = f.read()
    return load_run_config_text(text, strict=settings.STRICT_CONFIG), text


def resolve_seed(args, settings, from_config):
    """``--seed`` first, then the run config, then ``NOISELENS_DEFAULT_SEED``."""
    if args.seed is not None:
        return args.seed
    return from_config if args.config else settings.DEFAULT_SEED


def simulate(args, settings):
    """Noiseless context scenes plus annotations."""
    run_config, _ = load_config(args, settings)
    seed = resolve_seed(args, settings, run_config.scene.seed)
    stream = TARGET_STREAM if args.degrade else CONTEXT_STREAM
    sensor = run_config.sensor if args.degrade else None
    source = ProceduralSource(run_config.scene, sensor, seed, args.split, stream)
    for index in range(args.count):
        image, annotations = source.item(args.start + index)
        write_sample(args.out, f"frame-{args.start + index:05d}", image, annotations)
    logger.info(f"Simulated {args.count} scene(s) into {args.out}")
    return {"count": args.count, "seed": seed, "split": args.split, "degraded": args.degrade}


def degrade(args, settings):
    """Apply the configured sensor model to every image in a directory."""
    run_config, _ = load_config(args, settings)
    seed = resolve_seed(args, settings, run_config.sensor.structured_phase_seed)
    paths = list_images(args.input)
    for index, path in enumerate(paths):
        noisy = apply_sensor_noise(read_image(path), run_config.sensor, derive_seed(seed, index))
        write_image(os.path.join(args.out, os.path.basename(path)), noisy)
        copy_sidecar(path, args.out)
    logger.info(f"Degraded {len(paths)} image(s) from {args.input}")
    return {"count": len(paths), "seed": seed}


def blank(args, settings):
    """Blank contexts: labeled boxes of target images filled with the dataset mean."""
    dataset = load_dataset(args.input, split="test", require_labels=True)
    images, annotations = dataset.as_arrays()
    mean = dataset_mean(images) if args.mean is None else args.mean
    for path, image, labels in zip(dataset.paths, images, annotations):
        write_image(os.path.join(args.out, os.path.basename(path)), make_blank_context(image, labels, mean))
        copy_sidecar(path, args.out)
    return {"count": len(dataset), "mean": mean}


def train(args, settings):
    run_config, text = load_config(args, settings)
    seed = resolve_seed(args, settings, run_config.train.seed)
    result = run_training(run_config, args.out, seed=seed, config_text=text)
    last = result.reports[-1]
    print(
        f"{result.mode}: {len(result.reports)} epoch(s), "
        f"final L_G={last.loss_g:.4f} L_D={last.loss_d:.4f} L_T={last.loss_t:.4f} F1*={last.f1_star:.4f}"
    )
    return {
        "mode": result.mode,
        "seed": seed,
        "epochs": len(result.reports),
        "config_hash": generate_operation_param_hash(dump_run_config(run_config)),
    }


def generate(args, settings):
    """x̂ = clip(c + G(z), 0, 1) for every context; annotation files are copied unchanged."""
    run_config, _ = load_config(args, settings)
    seed = resolve_seed(args, settings, run_config.train.seed)
    generator = load_checkpoint(args.checkpoint, kind="generator")
    noise = run_config.train.noise
    paths = list_images(args.input)
    for index, path in enumerate(paths):
        context = read_image(path).numpy()[None]
        rng = make_rng(seed, index)
        if args.context_noise:
            z = sample_context_noise(rng, context, noise)
        else:
            z = sample_noise_field(rng, context.shape, noise)
        fake = compose_fake(Tensor(context), generator(Tensor(z)))
        write_image(os.path.join(args.out, os.path.basename(path)), fake.numpy()[0])
        copy_sidecar(path, args.out)
    logger.info(f"Generated {len(paths)} image(s) into {args.out}")
    return {"count": len(paths), "seed": seed, "checkpoint": args.checkpoint}


def _stems(paths):
    return [os.path.splitext(os.path.basename(p))[0] for p in paths]


def evaluate(args, settings):
    """PR curve, recall by magnitude and optional overlays / hallucination audit."""
    run_config, _ = load_config(args, settings)
    task = load_checkpoint(args.checkpoint, kind="task")
    dataset = load_dataset(args.input, split="test", require_labels=True)
    images, truths = dataset.as_arrays()
    detections = predict_detections(task, images)
    result = evaluate_detections(
        detections, truths, run_config.evaluation, tuple(run_config.scene.object_magnitude_range)
    )
    os.makedirs(args.out, exist_ok=True)
    write_pr_curve(os.path.join(args.out, "pr_curve.csv"), result.curve)
    write_recall_by_magnitude(os.path.join(args.out, "recall_by_magnitude.csv"), result.magnitude_bins)
    best = result.best
    summary = {
        "images": result.image_count,
        "truths": result.truth_count,
        "threshold": best.threshold,
        "precision": best.precision,
        "recall": best.recall,
        "f1_star": best.f1,
    }
    atomic_write_json(os.path.join(args.out, "summary.json"), summary)

    if args.overlays:
        kept = [[d for d in dets if d.confidence >= best.threshold] for dets in detections]
        write_overlays(
            os.path.join(args.out, "overlays"), images, truths, kept, args.overlays, _stems(dataset.paths),
            scale=settings.OVERLAY_SCALE,
        )

    if args.contexts:
        contexts = load_dataset(args.contexts, split="test", require_labels=True)
        if _stems(contexts.paths) != _stems(dataset.paths):
            raise ShapeError("--contexts must hold the same file names as the evaluated images")
        context_images, context_truths = contexts.as_arrays()
        records = hallucination_audit(
            task, context_images, images, context_truths, best.threshold, run_config.evaluation.iou_threshold
        )
        write_hallucination(os.path.join(args.out, "hallucination.csv"), records)
        summary["hallucinations_on_contexts"] = sum(r.on_context for r in records)
        summary["hallucinations_on_fakes"] = sum(r.on_fake for r in records)

    print(json.dumps(summary, sort_keys=True))
    return summary


def report(args, settings):
    paths = write_report(args.runs, args.out)
    return {"runs": list(args.runs), "files": paths}


def sim2real(args, settings):
    """Miniature sim2real comparison over one or more seeds."""
    run_config, _ = load_config(args, settings)
    seeds = args.seeds or [resolve_seed(args, settings, run_config.train.seed)]
    rows, held = [], 0
    for seed in seeds:
        outcome = run_sim2real_comparison(run_config, os.path.join(args.out, f"seed-{seed}"), seed=seed)
        held += int(outcome.replicates)
        rows.append(
            (
                seed,
                outcome.f1_star("target"),
                outcome.f1_star("generated"),
                outcome.f1_star("sim"),
                outcome.ordering_holds,
                outcome.generated_margin,
                outcome.replicates,
                relative_error(outcome.generated_noise.mean, outcome.target_noise.mean),
                relative_error(outcome.generated_noise.std, outcome.target_noise.std),
            )
        )
    write_rows(
        os.path.join(args.out, "sim2real_seeds.csv"),
        (
            "seed", "f1_target", "f1_generated", "f1_sim", "ordering_holds", "generated_margin", "replicates",
            "noise_mean_error", "noise_std_error",
        ),
        rows,
    )
    print(
        f"ordering held with a generated-sim margin of at least {Sim2RealResult.MIN_GENERATED_MARGIN:g} "
        f"on {held} of {len(seeds)} seed(s)"
    )
    return {"seeds": list(seeds), "replicated": held, "mean_margin": float(np.mean([r[5] for r in rows]))}


COMMANDS = {
    "simulate": simulate,
    "degrade": degrade,
    "blank": blank,
    "train": train,
    "generate": generate,
    "evaluate": evaluate,
    "report": report,
    "sim2real": sim2real,
}
