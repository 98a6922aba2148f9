from dataclasses import dataclass, field


@dataclass(frozen=True)
class Detection:
    """A predicted box (normalized, center format) with its confidence."""

    cx: float
    cy: float
    w: float
    h: float
    confidence: float

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)


def f1_score(precision, recall):
    total = precision + recall
    return 0.0 if total == 0 else 2.0 * precision * recall / total


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, threshold, tp, fp, fn):
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
        return cls(
            threshold=float(threshold),
            true_positives=int(tp),
            false_positives=int(fp),
            false_negatives=int(fn),
            precision=precision,
            recall=recall,
            f1=f1_score(precision, recall),
        )

    def csv_row(self):
        return (
            self.threshold,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.precision,
            self.recall,
            self.f1,
        )


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list = field(default_factory=list)


@dataclass(frozen=True)
class MagnitudeBin:
    lo: float
    hi: float
    recall: float
    support: int
    overflow: bool = False


@dataclass
class DetectorEvaluation:
    """PR curve of a detector on a labeled split plus its magnitude breakdown."""

    curve: list
    best: PRPoint
    magnitude_bins: list = field(default_factory=list)
    image_count: int = 0
    truth_count: int = 0

    @property
    def f1_star(self):
        return self.best.f1


@dataclass(frozen=True)
class HallucinationRecord:
    """Unmatched detections on a context image and on its generated counterpart."""

    index: int
    truths: int
    on_context: int
    on_fake: int
