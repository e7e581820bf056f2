"""Scoring predicted masks and label maps against reference rasters.

Undefined ratios (zero denominators) are reported as NaN and skipped by
aggregates; they are never replaced by zero.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .labeling import CLASS_NAMES
from .raster import BinaryMask, LabelRaster, check_same_grid

logger = logging.getLogger(__name__)

UNDEFINED = math.nan

# NYC 2017 8-class land cover codes onto prediction classes
NYC_LANDCOVER_MAPPING = {
    1: 2,  # tree canopy -> vegetation
    2: 2,  # grass/shrub -> vegetation
    3: 0,  # bare soil -> bare land
    4: 4,  # water
    5: 1,  # buildings
    6: 3,  # roads
    7: 0,  # other impervious -> bare land
    8: 0,  # railroads -> bare land
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    iou: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else UNDEFINED


def confusion_counts(pred: BinaryMask, truth: BinaryMask) -> ConfusionCounts:
    """2x2 tally over cells valid in both masks."""
    check_same_grid(pred.spec, truth.spec)
    both = pred.valid & truth.valid
    p, t = pred.bits[both], truth.bits[both]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall."""
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        return UNDEFINED
    return 2 * precision * recall / (precision + recall)


def metrics(c: ConfusionCounts) -> ClassMetrics:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    # 2TP/(2TP+FP+FN) equals 2PR/(P+R) and stays defined when TP = 0
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        accuracy=_ratio(c.tp + c.tn, c.total),
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
    )


class UnmappedTruthCode(UserWarning):
    pass


@dataclass
class Evaluation:
    rows: dict[str, tuple[ConfusionCounts, ClassMetrics]]
    unmapped_codes: list[int] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        vals = [getattr(m, attr) for _, m in self.rows.values()]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else UNDEFINED


def remap_truth(truth: LabelRaster, class_mapping: Mapping[int, int] | None) -> tuple[LabelRaster, list[int]]:
    """Apply ``class_mapping`` to truth codes; unmapped codes become background (-2)."""
    if class_mapping is None:
        return truth, []
    out = np.full(truth.codes.shape, -2, dtype=np.int32)
    out[~truth.valid] = truth.codes[~truth.valid]
    present = np.unique(truth.codes[truth.valid])
    unmapped = [int(c) for c in present if int(c) not in class_mapping]
    for src, dst in class_mapping.items():
        out[truth.codes == src] = dst
    if unmapped:
        logger.warning("truth codes %s have no class mapping; treated as background", unmapped)
    return LabelRaster(truth.spec, out), unmapped


def evaluate_label_map(pred: LabelRaster, truth: LabelRaster,
                       class_mapping: Mapping[int, int] | None = None,
                       classes: Mapping[int, str] | None = None) -> Evaluation:
    """One-vs-rest metrics for every prediction class.

    ``truth`` must already sit on ``pred``'s grid (see
    :func:`lidarlabel.raster.resample_nearest`).
    """
    check_same_grid(pred.spec, truth.spec)
    truth, unmapped = remap_truth(truth, class_mapping)
    classes = classes or CLASS_NAMES
    rows = {}
    for code, name in classes.items():
        counts = confusion_counts(pred.mask(code), truth.mask(code))
        rows[name] = (counts, metrics(counts))
    return Evaluation(rows, unmapped)


WHITE, BLUE, RED, BLACK = (255, 255, 255), (0, 0, 255), (255, 0, 0), (0, 0, 0)


def error_map(pred: BinaryMask, truth: BinaryMask) -> np.ndarray:
    """RGB error image: white correct, blue missed (FN), red false alarm (FP), black invalid."""
    check_same_grid(pred.spec, truth.spec)
    both = pred.valid & truth.valid
    rgb = np.zeros(pred.bits.shape + (3,), dtype=np.uint8)
    rgb[both & (pred.bits == truth.bits)] = WHITE
    rgb[both & ~pred.bits & truth.bits] = BLUE
    rgb[both & pred.bits & ~truth.bits] = RED
    return rgb


CSV_COLUMNS = ("class", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "accuracy", "iou")


def _fmt(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.6f}"


def metrics_csv(ev: Evaluation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, (c, m) in ev.rows.items():
        w.writerow([name, c.tp, c.fp, c.fn, c.tn, _fmt(m.precision), _fmt(m.recall),
                    _fmt(m.f1), _fmt(m.accuracy), _fmt(m.iou)])
    return buf.getvalue()


def format_table(ev: Evaluation) -> str:
    head = f"{'class':<12}| {'P':>5} {'R':>5} {'F1':>5} {'acc':>5} {'IoU':>5}"
    lines = [head, "-" * len(head)]
    for name, (_, m) in ev.rows.items():
        cells = " ".join(" n/a " if math.isnan(v) else f"{v:5.2f}".replace("0.", " .", 1)
                         for v in (m.precision, m.recall, m.f1, m.accuracy, m.iou))
        lines.append(f"{name:<12}| {cells}")
    return "\n".join(lines)
