"""Adversarial, reproduction and detection losses.

Cross-entropies are computed in logit space: ``-log sigmoid(l) = softplus(-l)``. Clamping
the probability to [1e-7, 1 - 1e-7] is the same as clamping that value to
``[-log(1 - 1e-7), -log(1e-7)]``.
"""
import logging
import math

import numpy as np

from noiselens.core.evaluation import box_iou
from noiselens.core.exceptions import ShapeError
from noiselens.core.networks import encode_targets
from noiselens.engine import softplus
from noiselens.engine.tensor import DTYPE, Tensor, as_tensor

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
NLL_MIN = -math.log1p(-PROB_EPS)
NLL_MAX = -math.log(PROB_EPS)


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def nll_real(logits):
    """Elementwise -log D for logits D is asked to call real."""
    return softplus(-as_tensor(logits)).clip(NLL_MIN, NLL_MAX)


def nll_fake(logits):
    """Elementwise -log(1 - D) for logits D is asked to call fake."""
    return softplus(as_tensor(logits)).clip(NLL_MIN, NLL_MAX)


def compose_fake(c, n_tilde):
    """x̂ = clip(c + ñ, 0, 1)."""
    c, n_tilde = as_tensor(c), as_tensor(n_tilde)
    _require_same_shape(c, n_tilde, "compose_fake")
    return (c + n_tilde).clip(0.0, 1.0)


def generator_loss(d_logits_fake, x_hat, x, weights):
    """α·mean|x̂ - x| - mean log D(x̂); the l1 term is skipped when α is 0 or x is None."""
    adversarial = nll_real(d_logits_fake).mean()
    if x is None or weights.alpha == 0:
        return adversarial
    x_hat, x = as_tensor(x_hat), as_tensor(x)
    _require_same_shape(x_hat, x, "generator_loss")
    return (x_hat - x).abs().mean() * weights.alpha + adversarial


def discriminator_loss(d_logits_real, d_logits_fake):
    """-mean log D(x) - mean log(1 - D(x̂)) over batch and patch grid."""
    return nll_real(d_logits_real).mean() + nll_fake(d_logits_fake).mean()


def _absolute_boxes(grid):
    """Cell-relative (cx, cy, w, h) of a [N, S, S, >=5] array to absolute boxes."""
    size = grid.shape[1]
    rows = np.arange(size, dtype=np.float64)[None, :, None]
    cols = np.arange(size, dtype=np.float64)[None, None, :]
    g = grid.astype(np.float64)
    return np.stack(
        [(cols + g[..., 1]) / size, (rows + g[..., 2]) / size, g[..., 3], g[..., 4]], axis=-1
    )


def yolo_loss_terms(pred, targets, coord_weight=5.0, noobj_weight=0.5, confidence_target="iou"):
    """Per-term breakdown of the grid detection loss.

    Args:
        pred (Tensor): Activated predictions [N, S, S, 5] (confidence, cx, cy, w, h).
        targets (list[list[Annotation]]): Annotations per image; stars are ignored.
        coord_weight (float): Weight of the center and size terms.
        noobj_weight (float): Weight of the confidence term on empty cells.
        confidence_target (str): ``'iou'`` regresses object-cell confidence onto the
            IoU of the (detached) predicted box with its truth; ``'one'`` onto 1.

    Returns:
        dict: ``coord``, ``size``, ``object``, ``noobj`` tensors (already weighted and
        divided by N), ``total`` and the ``dropped`` annotation count.
    """
    pred = as_tensor(pred)
    if pred.ndim != 4 or pred.shape[1] != pred.shape[2] or pred.shape[3] != 5:
        raise ShapeError(f"Expected [N, S, S, 5] predictions, got {pred.shape}")
    n, size = pred.shape[0], pred.shape[1]
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} annotation lists for a batch of {n}")

    target, mask, dropped = encode_targets(targets, size)
    obj = Tensor(mask.astype(DTYPE))
    noobj = Tensor((~mask).astype(DTYPE))

    if confidence_target == "iou":
        conf_goal = np.zeros(mask.shape, dtype=DTYPE)
        if mask.any():
            predicted = _absolute_boxes(pred.numpy())[mask]
            truth = _absolute_boxes(target)[mask]
            conf_goal[mask] = box_iou(predicted, truth)
    elif confidence_target == "one":
        conf_goal = mask.astype(DTYPE)
    else:
        raise ValueError(f"Unknown confidence_target '{confidence_target}'")

    confidence = pred[..., 0]
    center_error = (pred[..., 1] - Tensor(target[..., 1])).square() + (
        pred[..., 2] - Tensor(target[..., 2])
    ).square()
    # sqrt of a zero target on empty cells is masked out below
    size_error = (pred[..., 3].sqrt() - Tensor(np.sqrt(target[..., 3]))).square() + (
        pred[..., 4].sqrt() - Tensor(np.sqrt(target[..., 4]))
    ).square()

    scale = 1.0 / n
    terms = {
        "coord": (center_error * obj).sum() * (coord_weight * scale),
        "size": (size_error * obj).sum() * (coord_weight * scale),
        "object": ((confidence - Tensor(conf_goal)).square() * obj).sum() * scale,
        "noobj": (confidence.square() * noobj).sum() * (noobj_weight * scale),
    }
    terms["total"] = terms["coord"] + terms["size"] + terms["object"] + terms["noobj"]
    terms["dropped"] = dropped
    return terms


def yolo_task_loss(pred, targets, coord_weight=5.0, noobj_weight=0.5, confidence_target="iou"):
    """Grid detection loss f_T, normalized by batch size."""
    return yolo_loss_terms(pred, targets, coord_weight, noobj_weight, confidence_target)["total"]


def weighted_task_loss(f_real, f_fake, weights):
    """f_T(T(x), y) + β·f_T(T(x̂), y_c); ``f_real`` None means unlabeled target data."""
    if f_real is None:
        return f_fake * weights.beta
    return f_real + f_fake * weights.beta


def task_loss(pred_real, y, pred_fake, y_c, weights, **yolo_options):
    """Task-network loss on real and fake images; the real term is skipped without y."""
    f_fake = yolo_task_loss(pred_fake, y_c, **yolo_options)
    f_real = None
    if y is not None and pred_real is not None:
        f_real = yolo_task_loss(pred_real, y, **yolo_options)
    return weighted_task_loss(f_real, f_fake, weights)


def total_loss(loss_g, loss_d, loss_t, weights):
    """L_G + λ·L_D + γ·L_T; accepts floats or scalar tensors."""
    return loss_g + loss_d * weights.lam + loss_t * weights.gamma
