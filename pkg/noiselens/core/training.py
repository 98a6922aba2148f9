"""Training loops: SATGAN, the pix2pix baseline and standalone detector training.

One SATGAN step is three sequential sub-updates, each on its own tape:

1. the discriminator on real target images versus detached fakes,
2. the generator on its adversarial and reproduction terms plus the task term on
   fakes, with discriminator and task network frozen,
3. the task network on fakes (labels y_c) and, when available, labeled target images.
"""
import logging
import math
import os
import time

import numpy as np

from noiselens.core.datasets import (
    CONTEXT_STREAM,
    TARGET_STREAM,
    DirectorySource,
    GeneratedSource,
    MixedSource,
    ProceduralSource,
    blank_contexts,
    ensure_trainable,
    estimate_dataset_mean,
    sample_context_noise,
    sample_noise_field,
)
from noiselens.core.evaluation import evaluate_detector
from noiselens.core.exceptions import ConfigError, InvalidAnnotationError, ShapeError
from noiselens.core.losses import (
    compose_fake,
    discriminator_loss,
    generator_loss,
    weighted_task_loss,
    yolo_loss_terms,
)
from noiselens.core.networks import TaskNetwork, build_models
from noiselens.engine import Adam, Tape, Tensor, backward, frozen
from noiselens.models.schemas import dump_run_config
from noiselens.models.training_models import EpochReport, StepMetrics, TaskGapRecord, TrainingResult
from noiselens.services.checkpoint_service import load_checkpoint, save_checkpoint
from noiselens.services.metrics_service import write_epoch_metrics, write_task_gaps
from noiselens.utils.helpers import atomic_write_json, atomic_write_text, derive_seed, make_rng
from noiselens.utils.logger import log_operation

logger = logging.getLogger(__name__)

STEP_STREAM = 7
DATA_STREAM = 10
FAKE_STREAM = 11
MIX_STREAM = 12

NAN = float("nan")


def build_optimizers(models, train_config):
    """One Adam per network, configured from the run's optimizer settings."""
    settings = {
        "generator": train_config.generator_optimizer,
        "discriminator": train_config.discriminator_optimizer,
        "task": train_config.task_optimizer,
    }
    optimizers = {}
    for kind, module in models.items():
        s = settings[kind]
        optimizers[kind] = Adam(module.parameters(), lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps)
    return optimizers


def _yolo_options(train_config):
    return {
        "coord_weight": train_config.coord_weight,
        "noobj_weight": train_config.noobj_weight,
        "confidence_target": train_config.confidence_target,
    }


def _update(optimizer, loss, tape):
    optimizer.zero_grad()
    backward(loss, tape)
    optimizer.step()
    optimizer.zero_grad()


def _check_labels(labels, count, what):
    if labels is None:
        raise InvalidAnnotationError(f"{what} labels are required")
    if len(labels) != count:
        raise InvalidAnnotationError(f"{len(labels)} {what} label lists for a batch of {count}")


def train_step_satgan(batch, models, optimizers, config, rng, perm=None):
    """One SATGAN iteration.

    Args:
        batch (dict): ``c`` contexts [N, 1, H, W], ``y_c`` their labels, ``x`` target
            images of the same shape and optionally ``y`` target labels.
        models (dict): ``generator``, ``discriminator`` and ``task`` modules.
        optimizers (dict): Adam per model kind.
        config (TrainConfig): Weights, noise field and task-loss options.
        rng (numpy.random.Generator): Source of z and of the reproduction pairing.
        perm: Optional pairing of fakes with target images for the l1 term.

    Returns:
        StepMetrics
    """
    generator, discriminator, task = models["generator"], models["discriminator"], models["task"]
    weights = config.weights
    contexts = np.asarray(batch["c"], dtype=np.float32)
    targets = np.asarray(batch["x"], dtype=np.float32)
    if contexts.shape != targets.shape:
        raise ShapeError(f"contexts {contexts.shape} and target images {targets.shape} differ")
    _check_labels(batch.get("y_c"), contexts.shape[0], "context")
    y_c = batch["y_c"]
    y = batch.get("y") if config.target_labeled else None
    if y is not None:
        _check_labels(y, targets.shape[0], "target")

    z = Tensor(sample_noise_field(rng, contexts.shape, config.noise))
    perm = rng.permutation(contexts.shape[0]) if perm is None else np.asarray(perm)
    c, x = Tensor(contexts), Tensor(targets)

    # (1) discriminator
    x_hat_detached = compose_fake(c, generator(z)).detach()
    with Tape() as tape:
        loss_d = discriminator_loss(discriminator(x), discriminator(x_hat_detached))
        _update(optimizers["discriminator"], loss_d, tape)

    # (2) generator
    semantic_weight = weights.gamma * weights.beta
    with Tape() as tape, frozen(discriminator, task):
        x_hat = compose_fake(c, generator(z))
        loss_g = generator_loss(discriminator(x_hat), x_hat, Tensor(targets[perm]), weights)
        objective = loss_g
        if semantic_weight > 0:
            f_fake = yolo_loss_terms(task(x_hat), y_c, **_yolo_options(config))["total"]
            objective = loss_g + f_fake * semantic_weight
        _update(optimizers["generator"], objective, tape)
    x_hat_for_task = x_hat.detach()

    # (3) task network
    with Tape() as tape, frozen(generator):
        fake_terms = yolo_loss_terms(task(x_hat_for_task), y_c, **_yolo_options(config))
        real_total, dropped = None, fake_terms["dropped"]
        if y is not None:
            real_terms = yolo_loss_terms(task(x), y, **_yolo_options(config))
            real_total, dropped = real_terms["total"], dropped + real_terms["dropped"]
        loss_t = weighted_task_loss(real_total, fake_terms["total"], weights)
        _update(optimizers["task"], loss_t, tape)

    return StepMetrics(loss_g.item(), loss_d.item(), loss_t.item(), dropped)


def train_step_pix2pix(batch, models, optimizers, config, rng):
    """One paired pix2pix iteration: z = blank_context + w, conditional discriminator."""
    generator, discriminator = models["generator"], models["discriminator"]
    if not discriminator.config.conditional:
        raise ConfigError("pix2pix needs a discriminator with 2 input channels")
    blank = np.asarray(batch["blank_context"], dtype=np.float32)
    targets = np.asarray(batch["x"], dtype=np.float32)
    if blank.shape != targets.shape:
        raise ShapeError(f"Unpaired batch: blank contexts {blank.shape} vs target images {targets.shape}")

    z = Tensor(sample_context_noise(rng, blank, config.noise))
    c, x = Tensor(blank), Tensor(targets)

    x_hat_detached = compose_fake(c, generator(z)).detach()
    with Tape() as tape:
        loss_d = discriminator_loss(discriminator(x, c), discriminator(x_hat_detached, c))
        _update(optimizers["discriminator"], loss_d, tape)

    with Tape() as tape, frozen(discriminator):
        x_hat = compose_fake(c, generator(z))
        loss_g = generator_loss(discriminator(x_hat, c), x_hat, x, config.weights)
        _update(optimizers["generator"], loss_g, tape)

    return StepMetrics(loss_g.item(), loss_d.item())


def evaluate_step_losses(models, batch, config, z, perm=None):
    """L_G, L_D and L_T for a batch and a fixed noise field, without any update."""
    generator, discriminator = models["generator"], models["discriminator"]
    weights = config.weights
    z = z if isinstance(z, Tensor) else Tensor(z)
    if config.mode == "pix2pix":
        c, x = Tensor(batch["blank_context"]), Tensor(batch["x"])
        x_hat = compose_fake(c, generator(z))
        loss_d = discriminator_loss(discriminator(x, c), discriminator(x_hat, c))
        loss_g = generator_loss(discriminator(x_hat, c), x_hat, x, weights)
        return StepMetrics(loss_g.item(), loss_d.item())

    _check_labels(batch.get("y_c"), len(batch["c"]), "context")
    task = models["task"]
    c, targets = Tensor(batch["c"]), np.asarray(batch["x"], dtype=np.float32)
    perm = np.arange(targets.shape[0]) if perm is None else np.asarray(perm)
    x = Tensor(targets)
    x_hat = compose_fake(c, generator(z))
    loss_d = discriminator_loss(discriminator(x), discriminator(x_hat))
    loss_g = generator_loss(discriminator(x_hat), x_hat, Tensor(targets[perm]), weights)
    fake_terms = yolo_loss_terms(task(x_hat), batch["y_c"], **_yolo_options(config))
    y = batch.get("y") if config.target_labeled else None
    real_total = None
    if y is not None:
        real_total = yolo_loss_terms(task(x), y, **_yolo_options(config))["total"]
    loss_t = weighted_task_loss(real_total, fake_terms["total"], weights)
    return StepMetrics(loss_g.item(), loss_d.item(), loss_t.item(), fake_terms["dropped"])


def task_step(task, optimizer, images, labels, config):
    """One detector update on labeled images; returns f_T before the update."""
    _check_labels(labels, len(images), "training")
    with Tape() as tape:
        terms = yolo_loss_terms(task(Tensor(images)), labels, **_yolo_options(config))
        _update(optimizer, terms["total"], tape)
    return terms["total"].item(), terms["dropped"]


def pretrain_task(task, optimizer, source, config, steps=None):
    """Warm up the task network on labeled context images alone."""
    ensure_trainable(source)
    steps = config.task_pretrain_steps if steps is None else steps
    losses = []
    for step in range(steps):
        images, labels = source.batch(step, config.batch_size)
        loss, _ = task_step(task, optimizer, images, labels, config)
        losses.append(loss)
    if losses:
        logger.info(f"Task pretraining: {steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return losses


def discriminator_accuracy(discriminator, real, fake, context=None):
    """Fraction of patch logits on the correct side of 0.5 for real and fake images."""
    ctx = None if context is None else Tensor(context)
    real_logits = discriminator(Tensor(real), ctx).numpy()
    fake_logits = discriminator(Tensor(fake), ctx).numpy()
    correct = np.count_nonzero(real_logits > 0) + np.count_nonzero(fake_logits <= 0)
    return correct / (real_logits.size + fake_logits.size)


def validation_metrics(task, validation, settings):
    """(precision, recall, F1*) of the task network at its best threshold."""
    if validation is None:
        return NAN, NAN, NAN
    images, truths = validation.as_arrays()
    result = evaluate_detector(task, images, truths, settings)
    return result.best.precision, result.best.recall, result.f1_star


def _source_length(source):
    try:
        return len(source)
    except TypeError:
        return None


def train_detector(source, run_config, validation=None, seed=None, task=None, on_epoch_end=None):
    """Train a task network on ``source`` alone.

    Args:
        source: Labeled training source (dataset, procedural, generated or mixed).
        run_config (RunConfig): Task network, schedule and evaluation settings.
        validation (LabeledDataset): Fixed target-domain split evaluated after each epoch.
        seed (int): Overrides ``run_config.train.seed``.
        task (TaskNetwork): Network to continue training; a fresh one otherwise.
        on_epoch_end: Called as ``on_epoch_end(report, task)`` after every epoch.

    Returns:
        tuple: ``(task network, list[EpochReport])``.
    """
    config = run_config.train
    seed = config.seed if seed is None else seed
    if _source_length(source) == 0:
        raise ShapeError("Cannot train a detector on an empty dataset")
    if not source.labeled:
        raise InvalidAnnotationError("Detector training needs labeled images")
    ensure_trainable(source)

    task = task or TaskNetwork(run_config.task, seed=derive_seed(seed, 3))
    s = config.task_optimizer
    optimizer = Adam(task.parameters(), lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps)

    reports = []
    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        losses = []
        for step in range(config.steps_per_epoch):
            global_step = (epoch - 1) * config.steps_per_epoch + step
            images, labels = source.batch(global_step, config.batch_size)
            losses.append(task_step(task, optimizer, images, labels, config)[0])
        precision, recall, f1 = validation_metrics(task, validation, run_config.evaluation)
        report = EpochReport(
            epoch=epoch,
            loss_g=NAN,
            loss_d=NAN,
            loss_t=float(np.mean(losses)),
            precision=precision,
            recall=recall,
            f1_star=f1,
            wall_time=time.monotonic() - started,
        )
        reports.append(report)
        logger.info(f"Detector epoch {epoch}: L_T={report.loss_t:.4f} F1*={f1:.4f}")
        if on_epoch_end is not None:
            on_epoch_end(report, task)
    return task, reports


def checkpoint_roundtrip(models, path):
    """Save then reload models; ``path`` is a file for one model, a directory for a dict."""
    if isinstance(models, dict):
        os.makedirs(path, exist_ok=True)
        restored = {}
        for kind, module in models.items():
            target = os.path.join(path, f"{kind}.ckpt")
            save_checkpoint(module, target)
            restored[kind] = load_checkpoint(target, config=module.config, kind=module.kind)
        return restored
    save_checkpoint(models, path)
    return load_checkpoint(path, config=models.config, kind=models.kind)


class RunSources:
    """Training and validation data for one run, per the ``data`` config section."""

    def __init__(self, run_config, seed):
        data, scene = run_config.data, run_config.scene
        self.data_seed = derive_seed(seed, DATA_STREAM)
        if data.target_dir:
            self.target = DirectorySource(data.target_dir, "train", self.data_seed)
        else:
            self.target = ProceduralSource(scene, run_config.sensor, self.data_seed, "train", TARGET_STREAM)
        if data.context_dir:
            self.context = DirectorySource(data.context_dir, "train", self.data_seed)
        else:
            self.context = ProceduralSource(scene, None, self.data_seed, "train", CONTEXT_STREAM, "sim")

        size = run_config.train.validation_size
        if data.validation_dir:
            self.validation = DirectorySource(data.validation_dir, "validation", self.data_seed).dataset
        else:
            self.validation = ProceduralSource(
                scene, run_config.sensor, self.data_seed, "validation", TARGET_STREAM
            ).materialize(size)
        self.validation_contexts = None
        if not data.context_dir:
            self.validation_contexts = ProceduralSource(
                scene, None, self.data_seed, "validation", CONTEXT_STREAM, "sim"
            ).materialize(size)

    def manifest(self, seed):
        def describe(source):
            return {
                "type": type(source).__name__,
                "name": getattr(source, "name", None),
                "split": source.split,
                "directory": getattr(source, "directory", None),
                "seed": getattr(source, "seed", None),
            }

        return {
            "seed": seed,
            "data_seed": self.data_seed,
            "model_seeds": {kind: derive_seed(seed, i) for i, kind in enumerate(("generator", "discriminator", "task"), 1)},
            "step_stream": STEP_STREAM,
            "target": describe(self.target),
            "context": describe(self.context),
            "validation": {"type": type(self.validation).__name__, "size": len(self.validation)},
        }


class RunRecorder:
    """Writes metrics and checkpoints into a run directory as epochs complete."""

    def __init__(self, run_dir, run_config):
        self.run_dir = run_dir
        self.interval = run_config.train.checkpoint_interval
        self.epochs = run_config.train.epochs
        self.checkpoint_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        self.reports = []
        self.task_gaps = []

    def epoch_finished(self, report, models):
        self.reports.append(report)
        write_epoch_metrics(os.path.join(self.run_dir, "metrics.csv"), self.reports)
        final = report.epoch == self.epochs
        if final or (self.interval and report.epoch % self.interval == 0):
            for kind, module in models.items():
                extra = {"epoch": report.epoch}
                save_checkpoint(module, os.path.join(self.checkpoint_dir, f"{kind}-epoch-{report.epoch:03d}.ckpt"), extra)
                save_checkpoint(module, os.path.join(self.checkpoint_dir, f"{kind}-latest.ckpt"), extra)

    def gap_measured(self, record):
        self.task_gaps.append(record)
        write_task_gaps(os.path.join(self.run_dir, "task_gap.csv"), self.task_gaps)


def _mean_metrics(metrics):
    return (
        float(np.mean([m.loss_g for m in metrics])),
        float(np.mean([m.loss_d for m in metrics])),
        float(np.mean([m.loss_t for m in metrics])),
    )


def _train_satgan(run_config, sources, seed, recorder):
    config = run_config.train
    ensure_trainable(sources.target, sources.context)
    models = build_models(run_config, seed)
    optimizers = build_optimizers(models, config)
    if config.task_pretrain_steps:
        pretrain_task(models["task"], optimizers["task"], sources.context, config)

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        metrics = []
        for step in range(config.steps_per_epoch):
            global_step = (epoch - 1) * config.steps_per_epoch + step
            c, y_c = sources.context.batch(global_step, config.batch_size)
            x, y = sources.target.batch(global_step, config.batch_size)
            batch = {"c": c, "y_c": y_c, "x": x, "y": y if config.target_labeled else None}
            metrics.append(
                train_step_satgan(batch, models, optimizers, config, make_rng(seed, STEP_STREAM, global_step))
            )
        precision, recall, f1 = validation_metrics(models["task"], sources.validation, run_config.evaluation)
        loss_g, loss_d, loss_t = _mean_metrics(metrics)
        report = EpochReport(epoch, loss_g, loss_d, loss_t, precision, recall, f1, time.monotonic() - started)
        logger.info(f"SATGAN epoch {epoch}: L_G={loss_g:.4f} L_D={loss_d:.4f} L_T={loss_t:.4f} F1*={f1:.4f}")
        if sources.validation_contexts is not None:
            fakes = GeneratedSource(
                sources.validation_contexts, models["generator"], config.noise, derive_seed(seed, FAKE_STREAM)
            )
            images, truths = fakes.take(len(sources.validation_contexts))
            f1_fake = evaluate_detector(models["task"], images, truths, run_config.evaluation).f1_star
            recorder.gap_measured(TaskGapRecord(epoch, f1_fake, f1))
        recorder.epoch_finished(report, models)
    return models


def _train_pix2pix(run_config, sources, seed, recorder):
    config = run_config.train
    ensure_trainable(sources.target)
    models = build_models(run_config, seed)
    models.pop("task")
    optimizers = build_optimizers(models, config)
    mean = estimate_dataset_mean(sources.target, count=config.validation_size)
    logger.info(f"pix2pix blank-context fill value {mean:.5f}")

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        metrics = []
        for step in range(config.steps_per_epoch):
            global_step = (epoch - 1) * config.steps_per_epoch + step
            x, y = sources.target.batch(global_step, config.batch_size)
            batch = {"blank_context": blank_contexts(x, y, mean), "x": x}
            metrics.append(
                train_step_pix2pix(batch, models, optimizers, config, make_rng(seed, STEP_STREAM, global_step))
            )
        loss_g, loss_d, _ = _mean_metrics(metrics)
        report = EpochReport(epoch, loss_g, loss_d, NAN, NAN, NAN, NAN, time.monotonic() - started)
        logger.info(f"pix2pix epoch {epoch}: L_G={loss_g:.4f} L_D={loss_d:.4f}")
        recorder.epoch_finished(report, models)
    return models


def _component_source(name, run_config, sources, seed):
    if name == "target":
        return sources.target
    if name == "sim":
        return sources.context
    generator = load_checkpoint(run_config.data.generator_checkpoint, kind="generator")
    return GeneratedSource(sources.context, generator, run_config.train.noise, derive_seed(seed, FAKE_STREAM))


def detector_source(run_config, sources, seed):
    """The training source selected by ``data.detector_source``.

    ``mixed`` draws each item from one of the ``data.detector_mix`` sources with
    probability proportional to its weight.
    """
    data = run_config.data
    if data.detector_source != "mixed":
        return _component_source(data.detector_source, run_config, sources, seed)
    names = list(data.components)
    mixed = MixedSource(
        [_component_source(name, run_config, sources, seed) for name in names],
        weights=[data.components[name] for name in names],
        seed=derive_seed(seed, MIX_STREAM),
    )
    logger.info(f"Detector source mix: {', '.join(f'{n}={data.components[n]:g}' for n in names)}")
    return mixed


def _train_detector_run(run_config, sources, seed, recorder):
    source = detector_source(run_config, sources, seed)
    task, _ = train_detector(
        source,
        run_config,
        validation=sources.validation,
        seed=seed,
        on_epoch_end=lambda report, network: recorder.epoch_finished(report, {"task": network}),
    )
    return {"task": task}


MODE_RUNNERS = {
    "satgan": _train_satgan,
    "pix2pix": _train_pix2pix,
    "detector": _train_detector_run,
}


def run_training(run_config, run_dir, seed=None, config_text=None):
    """Run a full training job and populate ``run_dir``.

    Writes ``config.json`` (the given text, or the resolved config), ``config.resolved.json``,
    ``seeds.json``, ``metrics.csv``, ``task_gap.csv`` for SATGAN runs and
    ``checkpoints/<kind>-epoch-NNN.ckpt`` plus ``<kind>-latest.ckpt``.

    Returns:
        TrainingResult
    """
    seed = run_config.train.seed if seed is None else seed
    mode = run_config.train.mode
    os.makedirs(run_dir, exist_ok=True)
    resolved = dump_run_config(run_config)
    if config_text is not None:
        atomic_write_text(os.path.join(run_dir, "config.json"), config_text)
    else:
        atomic_write_json(os.path.join(run_dir, "config.json"), resolved)
    atomic_write_json(os.path.join(run_dir, "config.resolved.json"), resolved)

    started = time.monotonic()
    sources = RunSources(run_config, seed)
    atomic_write_json(os.path.join(run_dir, "seeds.json"), sources.manifest(seed))
    recorder = RunRecorder(run_dir, run_config)
    logger.info(f"Starting {mode} run in {run_dir} (seed {seed})")
    try:
        models = MODE_RUNNERS[mode](run_config, sources, seed, recorder)
    except Exception as e:
        log_operation(run_dir, "train", "failed", {"mode": mode, "seed": seed, "error": str(e)})
        raise

    last = recorder.reports[-1]
    log_operation(
        run_dir,
        "train",
        "success",
        {
            "mode": mode,
            "seed": seed,
            "epochs": len(recorder.reports),
            "final_f1_star": None if math.isnan(last.f1_star) else last.f1_star,
            "elapsed_seconds": round(time.monotonic() - started, 3),
        },
    )
    return TrainingResult(run_dir, mode, recorder.reports, models, recorder.task_gaps)

