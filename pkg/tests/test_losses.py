import math

import numpy as np
import pytest

from noiselens.core.datasets import sample_context_noise
from noiselens.core.exceptions import ShapeError
from noiselens.core.losses import (
    NLL_MAX,
    NLL_MIN,
    compose_fake,
    discriminator_loss,
    generator_loss,
    nll_fake,
    nll_real,
    task_loss,
    total_loss,
    weighted_task_loss,
    yolo_loss_terms,
    yolo_task_loss,
)
from noiselens.core.networks import build_models
from noiselens.core.training import evaluate_step_losses
from noiselens.engine import frozen
from noiselens.engine.tensor import Tensor
from noiselens.models.scene_models import Annotation
from noiselens.models.training_models import LossWeights

from conftest import gradcheck, small_run_config


def _logits(shape, seed, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0.0, scale, size=shape), requires_grad=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _clamped_log(p):
    return np.log(np.clip(p, 1e-7, 1.0 - 1e-7))


def test_nll_is_clamped():
    assert np.isclose(nll_real(Tensor([1000.0])).item(), NLL_MIN)
    assert np.isclose(nll_real(Tensor([-1000.0])).item(), NLL_MAX)
    assert np.isclose(nll_fake(Tensor([1000.0])).item(), NLL_MAX)
    assert np.isclose(nll_real(Tensor([0.0])).item(), math.log(2.0))


def test_compose_fake_examples():
    c = Tensor(np.full((1, 1, 4, 4), 0.5))
    assert np.array_equal(compose_fake(c, Tensor(np.zeros((1, 1, 4, 4)))).numpy(), c.numpy())
    assert np.allclose(compose_fake(c, Tensor(np.full((1, 1, 4, 4), 0.2))).numpy(), 0.7)
    clipped = compose_fake(c, Tensor(np.full((1, 1, 4, 4), 0.8))).numpy()
    assert np.all(clipped == 1.0)
    with pytest.raises(ShapeError):
        compose_fake(c, Tensor(np.zeros((1, 1, 4, 5))))


def test_composition_identity_on_dyadic_values():
    """x̂ - c recovers ñ bit for bit wherever the sum was not clipped."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.integers(0, 1025, size=(1, 1, 8, 8)) / 1024.0
        n_tilde = rng.integers(-512, 513, size=(1, 1, 8, 8)) / 1024.0
        x_hat = compose_fake(Tensor(c), Tensor(n_tilde)).numpy()
        unclipped = (c + n_tilde >= 0.0) & (c + n_tilde <= 1.0)
        assert np.array_equal((x_hat - c.astype(np.float32))[unclipped], n_tilde.astype(np.float32)[unclipped])


def test_composition_identity_with_generator_output(small_scene, toy_sensor):
    """Fakes are exactly the float32 sum of context and generated noise."""
    generator = build_models(small_run_config(small_scene, toy_sensor), 0)["generator"]
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, size=(1, 1, 16, 16)).astype(np.float32)
        n_tilde = generator(Tensor(rng.normal(size=(1, 1, 16, 16)))).numpy()
        x_hat = compose_fake(Tensor(c), Tensor(n_tilde)).numpy()
        total = c + n_tilde
        unclipped = (total >= 0.0) & (total <= 1.0)
        assert np.array_equal(x_hat[unclipped], total[unclipped])
        residual = (x_hat - c).astype(np.float64) - n_tilde
        assert np.all(np.abs(residual[unclipped]) <= np.spacing(np.float32(1.0)))


def test_generator_loss_examples():
    x = Tensor(np.random.default_rng(2).uniform(size=(2, 1, 4, 4)))
    weights = LossWeights(alpha=100.0)
    assert np.isclose(generator_loss(Tensor(np.zeros((2, 1, 3, 3))), x, x, weights).item(), math.log(2.0), atol=1e-6)

    shifted = Tensor(x.numpy() + np.float32(0.1))
    value = generator_loss(Tensor(np.full((2, 1, 3, 3), 30.0)), shifted, x, weights).item()
    assert abs(value - 10.0) < 1e-3

    with pytest.raises(ShapeError):
        generator_loss(Tensor(np.zeros((2, 1, 3, 3))), x, Tensor(np.zeros((1, 1, 4, 4))), weights)


def test_generator_loss_skips_l1_without_target():
    logits = Tensor(np.zeros((1, 1, 3, 3)))
    x_hat = Tensor(np.ones((1, 1, 4, 4)))
    assert np.isclose(generator_loss(logits, x_hat, None, LossWeights()).item(), math.log(2.0))
    assert np.isclose(
        generator_loss(logits, x_hat, Tensor(np.zeros((1, 1, 4, 4))), LossWeights(alpha=0.0)).item(),
        math.log(2.0),
    )


def test_generator_loss_is_monotone_in_logits():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    low = generator_loss(Tensor(np.zeros((1, 1, 3, 3))), x, x, LossWeights()).item()
    high = generator_loss(Tensor(np.ones((1, 1, 3, 3))), x, x, LossWeights()).item()
    assert high < low


def test_generator_loss_gradients():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 0.8, size=(2, 1, 4, 4))
    # keep |x̂ - x| away from the l1 kink
    x_hat = Tensor(x + rng.choice([-1.0, 1.0], size=x.shape) * rng.uniform(0.05, 0.15, size=x.shape), requires_grad=True)
    logits = _logits((2, 1, 3, 3), 4)
    target = Tensor(x)
    weights = LossWeights(alpha=2.0)
    checked = gradcheck(lambda: generator_loss(logits, x_hat, target, weights), [x_hat, logits], samples=20)
    assert len(checked) == 20


def test_discriminator_loss_examples():
    zeros = Tensor(np.zeros((2, 1, 3, 3)))
    assert np.isclose(discriminator_loss(zeros, zeros).item(), 2 * math.log(2.0), atol=1e-6)
    perfect = discriminator_loss(Tensor(np.full((2, 1, 3, 3), 40.0)), Tensor(np.full((2, 1, 3, 3), -40.0)))
    assert perfect.item() < 1e-6


def test_discriminator_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(5)
    real = rng.normal(0, 3, size=(3, 1, 5, 5))
    fake = rng.normal(0, 3, size=(3, 1, 5, 5))
    expected = -_clamped_log(_sigmoid(real)).mean() - _clamped_log(1.0 - _sigmoid(fake)).mean()
    assert abs(discriminator_loss(Tensor(real), Tensor(fake)).item() - expected) < 1e-5


def test_discriminator_loss_gradients():
    real, fake = _logits((2, 1, 3, 3), 6), _logits((2, 1, 3, 3), 7)
    gradcheck(lambda: discriminator_loss(real, fake), [real, fake], samples=20)


def _prediction(shape, seed):
    rng = np.random.default_rng(seed)
    pred = np.empty(shape)
    pred[..., 0] = rng.uniform(0.1, 0.9, size=shape[:-1])
    pred[..., 1:3] = rng.uniform(0.1, 0.9, size=shape[:-1] + (2,))
    pred[..., 3:5] = rng.uniform(0.05, 0.4, size=shape[:-1] + (2,))
    return pred


def _targets():
    return [
        [Annotation(0.30, 0.60, 0.20, 0.10, magnitude=11.0), Annotation(0.80, 0.15, 0.10, 0.20)],
        [Annotation(0.55, 0.45, 0.15, 0.15), Annotation(0.10, 0.10, 0.1, 0.1, is_object=False)],
    ]


def _iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _reference_yolo(pred, targets, coord_weight=5.0, noobj_weight=0.5):
    """Cell-by-cell loop over the grid."""
    n, size = pred.shape[0], pred.shape[1]
    total = 0.0
    for b in range(n):
        cells = {}
        for a in targets[b]:
            if a.is_object:
                cells.setdefault((min(int(a.cy * size), size - 1), min(int(a.cx * size), size - 1)), a)
        for row in range(size):
            for col in range(size):
                p = [float(v) for v in pred[b, row, col]]
                if (row, col) not in cells:
                    total += noobj_weight * p[0] ** 2
                    continue
                a = cells[(row, col)]
                tx, ty = a.cx * size - col, a.cy * size - row
                total += coord_weight * ((p[1] - tx) ** 2 + (p[2] - ty) ** 2)
                total += coord_weight * ((math.sqrt(p[3]) - math.sqrt(a.w)) ** 2 + (math.sqrt(p[4]) - math.sqrt(a.h)) ** 2)
                box = ((col + p[1]) / size, (row + p[2]) / size, p[3], p[4])
                total += (p[0] - _iou(box, a.box)) ** 2
    return total / n


def test_yolo_loss_matches_reference_loop():
    pred = _prediction((2, 4, 4, 5), 8).astype(np.float32)
    expected = _reference_yolo(pred, _targets())
    assert abs(yolo_task_loss(Tensor(pred), _targets()).item() - expected) < 1e-5


def test_yolo_loss_perfect_and_empty():
    targets = _targets()
    pred = np.zeros((2, 4, 4, 5), dtype=np.float32)
    pred[..., 3:5] = 0.1
    for b, annotations in enumerate(targets):
        for a in annotations:
            if not a.is_object:
                continue
            row, col = int(a.cy * 4), int(a.cx * 4)
            pred[b, row, col] = (1.0, a.cx * 4 - col, a.cy * 4 - row, a.w, a.h)
    assert yolo_task_loss(Tensor(pred), targets).item() < 1e-6

    empty = np.zeros((1, 4, 4, 5), dtype=np.float32)
    empty[..., 3:5] = 0.1
    assert yolo_task_loss(Tensor(empty), [[]]).item() == 0.0


def test_yolo_loss_terms_breakdown():
    pred = Tensor(_prediction((2, 4, 4, 5), 9))
    crowded = [[Annotation(0.30, 0.60, 0.1, 0.1), Annotation(0.31, 0.61, 0.1, 0.1)], []]
    terms = yolo_loss_terms(pred, crowded)
    assert terms["dropped"] == 1
    parts = sum(terms[k].item() for k in ("coord", "size", "object", "noobj"))
    assert np.isclose(terms["total"].item(), parts, rtol=1e-5)
    with pytest.raises(ShapeError):
        yolo_loss_terms(pred, crowded[:1])
    with pytest.raises(ValueError):
        yolo_loss_terms(pred, crowded, confidence_target="half")


def test_yolo_loss_gradients():
    pred = Tensor(_prediction((2, 4, 4, 5), 10), requires_grad=True)
    targets = _targets()
    gradcheck(lambda: yolo_task_loss(pred, targets, confidence_target="one"), [pred], samples=30)


def test_task_and_total_loss_arithmetic():
    weights = LossWeights(beta=0.5, lam=0.1, gamma=0.01)
    assert weighted_task_loss(0.0, 0.0, weights) == 0.0
    assert weighted_task_loss(1.0, 2.0, weights) == 2.0
    assert weighted_task_loss(None, 2.0, weights) == 1.0
    assert total_loss(1.0, 1.0, 1.0, LossWeights(lam=1.0, gamma=1.0)) == 3.0
    assert np.isclose(total_loss(0.5, 1.4, 2.0, weights), 0.66)
    assert total_loss(0.5, 1.4, 123.0, LossWeights(lam=1.0, gamma=0.0)) == 0.5 + 1.4


def test_task_loss_skips_real_term_without_labels():
    pred = Tensor(_prediction((2, 4, 4, 5), 11))
    weights = LossWeights(beta=0.5)
    fake_only = task_loss(None, None, pred, _targets(), weights).item()
    both = task_loss(pred, _targets(), pred, _targets(), weights).item()
    f = yolo_task_loss(pred, _targets()).item()
    assert np.isclose(fake_only, 0.5 * f, rtol=1e-6)
    assert np.isclose(both, 1.5 * f, rtol=1e-6)


def test_satgan_generator_objective_gradients(small_scene, toy_sensor):
    """Generator sub-step objective: adversarial + l1 + γβ·f_T on fakes, D and T frozen."""
    config = small_run_config(small_scene, toy_sensor, confidence_target="one")
    models = build_models(config, 0)
    generator, discriminator, task = models["generator"], models["discriminator"], models["task"]
    generator.parameter("attention.gamma").data[...] = 0.5
    rng = np.random.default_rng(12)
    c = Tensor(rng.uniform(0.3, 0.7, size=(2, 1, 16, 16)))
    x = Tensor(c.numpy() + np.float32(0.2))
    z = Tensor(rng.normal(size=(2, 1, 16, 16)))
    y_c = [[Annotation(0.3, 0.3, 0.2, 0.2)], [Annotation(0.7, 0.6, 0.2, 0.2)]]
    weights = LossWeights(alpha=1.0, beta=1.0, gamma=1.0)

    def objective():
        x_hat = compose_fake(c, generator(z))
        loss_g = generator_loss(discriminator(x_hat), x_hat, x, weights)
        f_fake = yolo_task_loss(task(x_hat), y_c, confidence_target="one")
        return loss_g + f_fake * (weights.gamma * weights.beta)

    with frozen(discriminator, task):
        checked = gradcheck(objective, generator.parameters(), samples=24, seed=1)
    assert any(abs(analytic) > 0 for analytic, _ in checked)
    assert all(p.grad is None for p in discriminator.parameters())
    assert all(p.grad is None for p in task.parameters())


def test_satgan_discriminator_objective_gradients(small_scene, toy_sensor):
    """Discriminator sub-step objective through D's weights, fakes held fixed."""
    models = build_models(small_run_config(small_scene, toy_sensor), 0)
    discriminator = models["discriminator"]
    rng = np.random.default_rng(14)
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 16, 16)))
    x_hat = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 16, 16)))

    def objective():
        return discriminator_loss(discriminator(x), discriminator(x_hat))

    checked = gradcheck(objective, discriminator.parameters(), samples=24, seed=2)
    assert any(abs(analytic) > 0 for analytic, _ in checked)


def test_satgan_task_objective_gradients(small_scene, toy_sensor):
    """Task sub-step objective through T's weights on labeled images."""
    config = small_run_config(small_scene, toy_sensor, confidence_target="one")
    task = build_models(config, 0)["task"]
    rng = np.random.default_rng(15)
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 16, 16)))
    y = [[Annotation(0.3, 0.3, 0.2, 0.2)], [Annotation(0.7, 0.6, 0.2, 0.2)]]

    def objective():
        return yolo_task_loss(task(x), y, confidence_target="one")

    checked = gradcheck(objective, task.parameters(), samples=24, seed=3)
    assert any(abs(analytic) > 0 for analytic, _ in checked)


def test_pix2pix_losses_match_independent_computation(small_scene, toy_sensor):
    """γ = 0, conditional D and z = c + w reproduce the two-player objective exactly."""
    config = small_run_config(small_scene, toy_sensor, mode="pix2pix", weights=LossWeights(alpha=1.0, gamma=0.0))
    models = build_models(config, 3)
    models.pop("task")
    generator, discriminator = models["generator"], models["discriminator"]
    rng = np.random.default_rng(13)
    blank = rng.uniform(0.0, 0.5, size=(2, 1, 16, 16)).astype(np.float32)
    x = rng.uniform(0.0, 1.0, size=(2, 1, 16, 16)).astype(np.float32)
    z = sample_context_noise(rng, blank, config.train.noise)

    metrics = evaluate_step_losses(models, {"blank_context": blank, "x": x}, config.train, z)

    x_hat = compose_fake(Tensor(blank), generator(Tensor(z))).numpy().astype(np.float64)
    d_real = discriminator(Tensor(x), Tensor(blank)).numpy().astype(np.float64)
    d_fake = discriminator(Tensor(x_hat), Tensor(blank)).numpy().astype(np.float64)
    expected_d = -_clamped_log(_sigmoid(d_real)).mean() - _clamped_log(1.0 - _sigmoid(d_fake)).mean()
    expected_g = np.abs(x_hat - x).mean() - _clamped_log(_sigmoid(d_fake)).mean()

    assert metrics.loss_d == pytest.approx(expected_d, rel=1e-6, abs=1e-6)
    assert metrics.loss_g == pytest.approx(expected_g, rel=1e-6, abs=1e-6)
    assert total_loss(metrics.loss_g, metrics.loss_d, 5.0, config.train.weights) == pytest.approx(
        metrics.loss_g + metrics.loss_d
    )
