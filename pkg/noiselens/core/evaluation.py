"""Detection metrics: IoU matching, precision/recall curves, F1* and magnitude analysis."""
import logging
import math

import numpy as np

from noiselens.core.exceptions import ShapeError
from noiselens.core.networks import decode_detections
from noiselens.engine.tensor import DTYPE, Tensor
from noiselens.models.detection_models import (
    DetectorEvaluation,
    HallucinationRecord,
    MagnitudeBin,
    MatchResult,
    PRPoint,
)

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_THRESHOLD_COUNT = 101
DEFAULT_BIN_WIDTH = 0.5


def box_iou(a, b):
    """Elementwise IoU of center-format boxes ``[..., 4]``; 0 where the union is empty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_lo, a_hi = a[..., :2] - a[..., 2:4] / 2.0, a[..., :2] + a[..., 2:4] / 2.0
    b_lo, b_hi = b[..., :2] - b[..., 2:4] / 2.0, b[..., :2] + b[..., 2:4] / 2.0
    extent = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    intersection = extent[..., 0] * extent[..., 1]
    a_side, b_side = np.clip(a_hi - a_lo, 0.0, None), np.clip(b_hi - b_lo, 0.0, None)
    union = a_side[..., 0] * a_side[..., 1] + b_side[..., 0] * b_side[..., 1] - intersection
    with np.errstate(invalid="ignore", divide="ignore"):
        result = np.where(union > 0, intersection / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(result, 0.0, 1.0)


def iou(a, b):
    """Intersection over union of two (cx, cy, w, h) boxes."""
    return float(box_iou(_as_box(a), _as_box(b)))


def _as_box(box):
    return box.box if hasattr(box, "box") else tuple(box)


def _objects(truths):
    return [t for t in truths if getattr(t, "is_object", True)]


def _by_confidence(detections):
    return sorted(detections, key=lambda d: -d.confidence)


def match_detections(detections, truths, iou_threshold=DEFAULT_IOU_THRESHOLD):
    """Greedy confidence-ordered matching of one image's detections to its truths.

    Each detection, from most to least confident, takes the unmatched truth with the
    highest IoU when that IoU reaches ``iou_threshold``.

    Returns:
        MatchResult: counts plus ``pairs`` of (detection index, truth index) into the
        inputs as given.
    """
    truths = _objects(truths)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    truth_boxes = np.array([t.box for t in truths], dtype=np.float64).reshape(-1, 4)
    matched = np.zeros(len(truths), dtype=bool)
    pairs = []
    for det_index in order:
        if matched.all():
            break
        overlaps = box_iou(np.asarray(detections[det_index].box)[None, :], truth_boxes)
        overlaps[matched] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            matched[best] = True
            pairs.append((det_index, best))
    tp = len(pairs)
    return MatchResult(
        true_positives=tp,
        false_positives=len(detections) - tp,
        false_negatives=len(truths) - tp,
        pairs=pairs,
    )


def default_thresholds(count=DEFAULT_THRESHOLD_COUNT):
    """``count`` evenly spaced confidence thresholds from 1 down to 0."""
    return [float(t) for t in np.linspace(1.0, 0.0, count)]


def _scored_detections(detections_per_image, truths_per_image, iou_threshold):
    if len(detections_per_image) != len(truths_per_image):
        raise ShapeError(
            f"{len(detections_per_image)} detection lists for {len(truths_per_image)} images"
        )
    confidences, hits = [], []
    truth_count = 0
    for detections, truths in zip(detections_per_image, truths_per_image):
        ordered = _by_confidence(detections)
        result = match_detections(ordered, truths, iou_threshold)
        matched = {det for det, _ in result.pairs}
        confidences.extend(d.confidence for d in ordered)
        hits.extend(i in matched for i in range(len(ordered)))
        truth_count += result.true_positives + result.false_negatives
    return np.asarray(confidences, dtype=np.float64), np.asarray(hits, dtype=bool), truth_count


def pr_curve(detections_per_image, truths_per_image, iou_threshold=DEFAULT_IOU_THRESHOLD,
             thresholds=None):
    """Precision/recall at each confidence threshold, aggregated over a data set.

    Matching is done once per image over all detections in confidence order; the
    detections kept at threshold t are a prefix of that order, so their greedy matches
    are exactly the matches of that prefix.

    Args:
        detections_per_image (list[list[Detection]]): All candidate detections.
        truths_per_image (list[list[Annotation]]): Ground truth per image.
        iou_threshold (float): Minimum IoU for a match.
        thresholds (list[float]): Confidence thresholds, non-increasing. Defaults to
            ``default_thresholds()``.

    Returns:
        list[PRPoint]: One point per threshold, in the given order.
    """
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    if any(b > a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted in descending order")
    confidences, hits, truth_count = _scored_detections(
        detections_per_image, truths_per_image, iou_threshold
    )
    curve = []
    for threshold in thresholds:
        kept = confidences >= threshold
        tp = int(np.count_nonzero(hits & kept))
        fp = int(np.count_nonzero(kept)) - tp
        curve.append(PRPoint.from_counts(threshold, tp, fp, truth_count - tp))
    return curve


def best_point(curve):
    """The point of maximal F1; ties go to the highest threshold."""
    if not curve:
        raise ValueError("f1_star needs a nonempty curve")
    return max(curve, key=lambda p: (p.f1, p.threshold))


def f1_star(curve):
    """Maximum F1 over a precision/recall curve."""
    return best_point(curve).f1


def magnitude_bins(lo, hi, width=DEFAULT_BIN_WIDTH):
    """Bin edges of ``width`` covering [lo, hi]."""
    if width <= 0 or hi < lo:
        raise ValueError("magnitude_bins needs width > 0 and lo <= hi")
    count = max(1, int(math.ceil((hi - lo) / width - 1e-9)))
    return [lo + width * i for i in range(count + 1)]


def object_match_outcomes(detections_per_image, truths_per_image, confidence_threshold,
                          iou_threshold=DEFAULT_IOU_THRESHOLD):
    """(magnitude, matched) for every labeled object at one operating threshold."""
    outcomes = []
    for detections, truths in zip(detections_per_image, truths_per_image):
        objects = _objects(truths)
        kept = [d for d in detections if d.confidence >= confidence_threshold]
        result = match_detections(kept, objects, iou_threshold)
        matched = {truth for _, truth in result.pairs}
        outcomes.extend((obj.magnitude, i in matched) for i, obj in enumerate(objects))
    return outcomes


def recall_vs_magnitude(outcomes, bin_edges):
    """Recall and support per magnitude bin.

    Bins are half-open ``[lo, hi)`` except the last, which includes its upper edge.
    Objects outside every bin land in a trailing overflow bin, emitted only when it is
    populated. Empty bins report NaN recall.
    """
    edges = list(bin_edges)
    if len(edges) < 2:
        raise ValueError("recall_vs_magnitude needs at least two bin edges")
    counts = np.zeros(len(edges) - 1, dtype=int)
    matched = np.zeros(len(edges) - 1, dtype=int)
    overflow_count = overflow_matched = 0
    for magnitude, hit in outcomes:
        index = int(np.searchsorted(edges, magnitude, side="right")) - 1
        if magnitude == edges[-1]:
            index = len(edges) - 2
        if 0 <= index < len(edges) - 1:
            counts[index] += 1
            matched[index] += int(hit)
        else:
            overflow_count += 1
            overflow_matched += int(hit)

    bins = [
        MagnitudeBin(
            lo=float(edges[i]),
            hi=float(edges[i + 1]),
            recall=float(matched[i] / counts[i]) if counts[i] else float("nan"),
            support=int(counts[i]),
        )
        for i in range(len(edges) - 1)
    ]
    if overflow_count:
        bins.append(
            MagnitudeBin(
                lo=float("-inf"),
                hi=float("inf"),
                recall=overflow_matched / overflow_count,
                support=overflow_count,
                overflow=True,
            )
        )
    return bins


def predict_grids(task_network, images, batch_size=16):
    """Run the task network over images [N, 1, H, W] without recording gradients."""
    data = images.numpy() if isinstance(images, Tensor) else np.asarray(images, dtype=DTYPE)
    outputs = []
    for start in range(0, data.shape[0], batch_size):
        outputs.append(task_network(Tensor(data[start:start + batch_size])).numpy())
    return np.concatenate(outputs, axis=0)


def predict_detections(task_network, images, batch_size=16):
    """Every grid cell of every image as a detection (threshold 0)."""
    return decode_detections(predict_grids(task_network, images, batch_size), 0.0)


def evaluate_detections(detections_per_image, truths_per_image, settings=None, magnitude_range=None):
    """PR curve, F1* point and recall-vs-magnitude for precomputed detections.

    Args:
        detections_per_image (list[list[Detection]]): Threshold-0 detections.
        truths_per_image (list[list[Annotation]]): Labels per image.
        settings (EvaluationSettings): IoU threshold, threshold count and bin width.
        magnitude_range (tuple): (bright, dim) range for the magnitude bins; inferred
            from the data when omitted.

    Returns:
        DetectorEvaluation
    """
    iou_threshold = settings.iou_threshold if settings else DEFAULT_IOU_THRESHOLD
    count = settings.threshold_count if settings else DEFAULT_THRESHOLD_COUNT
    width = settings.magnitude_bin_width if settings else DEFAULT_BIN_WIDTH

    curve = pr_curve(detections_per_image, truths_per_image, iou_threshold, default_thresholds(count))
    best = best_point(curve)
    outcomes = object_match_outcomes(
        detections_per_image, truths_per_image, best.threshold, iou_threshold
    )
    bins = []
    if outcomes:
        if magnitude_range is None:
            mags = [m for m, _ in outcomes]
            magnitude_range = (min(mags), max(mags))
        bins = recall_vs_magnitude(outcomes, magnitude_bins(*magnitude_range, width))
    return DetectorEvaluation(
        curve=curve,
        best=best,
        magnitude_bins=bins,
        image_count=len(truths_per_image),
        truth_count=best.true_positives + best.false_negatives,
    )


def evaluate_detector(task_network, images, truths_per_image, settings=None, magnitude_range=None):
    detections = predict_detections(task_network, images)
    return evaluate_detections(detections, truths_per_image, settings, magnitude_range)


def hallucination_counts(detections_per_image, truths_per_image, confidence_threshold,
                         iou_threshold=DEFAULT_IOU_THRESHOLD):
    """Per image, detections at or above the threshold matched to no labeled object."""
    counts = []
    for detections, truths in zip(detections_per_image, truths_per_image):
        kept = [d for d in detections if d.confidence >= confidence_threshold]
        counts.append(match_detections(kept, truths, iou_threshold).false_positives)
    return counts


def hallucination_audit(task_network, contexts, fakes, context_truths, confidence_threshold,
                        iou_threshold=DEFAULT_IOU_THRESHOLD):
    """Compare unmatched detections on contexts c and on their fakes x̂ (labels y_c)."""
    if len(contexts) != len(fakes) or len(contexts) != len(context_truths):
        raise ShapeError("contexts, fakes and labels must have the same length")
    on_context = hallucination_counts(
        predict_detections(task_network, contexts), context_truths, confidence_threshold, iou_threshold
    )
    on_fake = hallucination_counts(
        predict_detections(task_network, fakes), context_truths, confidence_threshold, iou_threshold
    )
    records = [
        HallucinationRecord(i, len(_objects(truths)), c, f)
        for i, (truths, c, f) in enumerate(zip(context_truths, on_context, on_fake))
    ]
    logger.info(
        "Hallucination audit: %d unmatched on contexts, %d on fakes over %d images",
        sum(on_context), sum(on_fake), len(records),
    )
    return records
