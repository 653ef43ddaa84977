"""Segmentation scores, exact rank-sum testing, lesion labeling and severity grading."""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import pdist

METRIC_NAMES = ("f1", "iou", "recall", "spec", "prec")
MAX_EXACT_SAMPLE = 12


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, pred.size - tp - fp - fn, fp, fn)


@dataclass(frozen=True)
class Scores:
    """The five scores on a 0..100 scale.

    ``vacuous`` names the scores whose denominator was zero; those are set
    to 100.
    """

    f1: float
    iou: float
    recall: float
    spec: float
    prec: float
    vacuous: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 100.0, True
    return 100.0 * num / den, False


def metrics(c: ConfusionCounts) -> Scores:
    values = {
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "recall": _ratio(c.tp, c.tp + c.fn),
        "spec": _ratio(c.tn, c.fp + c.tn),
        "prec": _ratio(c.tp, c.tp + c.fp),
    }
    vacuous = tuple(name for name in METRIC_NAMES if values[name][1])
    return Scores(*(values[name][0] for name in METRIC_NAMES), vacuous=vacuous)


def format_mean_std(values) -> str:
    """'79.82±1.89' style summary; std is the sample standard deviation."""
    arr = np.asarray(values, dtype=float)
    std = arr.std(ddof=1) if arr.size > 1 else 0.0
    return f"{arr.mean():.2f}±{std:.2f}"


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per (run, dataset, class) with the five scores and vacuity flags."""
    fields = ["run", "dataset", "class", *METRIC_NAMES, *(f"vacuous_{m}" for m in METRIC_NAMES)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def score_row(run: str, dataset: str, cls: str, scores: Scores) -> dict:
    row = {"run": run, "dataset": dataset, "class": cls}
    row.update({m: f"{getattr(scores, m):.6f}" for m in METRIC_NAMES})
    row.update({f"vacuous_{m}": int(m in scores.vacuous) for m in METRIC_NAMES})
    return row


# ----------------------------------------------------------------------
# Wilcoxon rank-sum


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _subset_sum_counts(weights: list[int], k: int) -> dict[int, int]:
    """Number of size-k subsets of ``weights`` (a multiset, by position) per total."""
    table: list[dict[int, int]] = [dict() for _ in range(k + 1)]
    table[0][0] = 1
    for wgt in weights:
        for size in range(k, 0, -1):
            prev = table[size - 1]
            cur = table[size]
            for total, count in prev.items():
                cur[total + wgt] = cur.get(total + wgt, 0) + count
    return table[k]


def wilcoxon_rank_sum(a, b, alternative: str = "two-sided") -> float:
    """Exact p-value of the rank-sum statistic of ``a`` in the pooled sample.

    Every one of the C(n+m, n) ways to assign pooled positions to ``a`` is
    counted (through a subset-sum table over mid-ranks, so ties are exact).
    Two-sided p counts assignments at least as far from the null mean as
    the observed one.
    """
    a = list(map(float, a))
    b = list(map(float, b))
    n, m = len(a), len(b)
    if not (1 <= n <= MAX_EXACT_SAMPLE and 1 <= m <= MAX_EXACT_SAMPLE):
        raise ValueError(
            f"exact rank-sum test supports 1..{MAX_EXACT_SAMPLE} scores per group, got {n} and {m};"
            " use a large-sample normal approximation instead")
    if alternative not in ("two-sided", "less", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    doubled = [int(round(2 * r)) for r in midranks(a + b)]
    observed = sum(doubled[:n])
    counts = _subset_sum_counts(doubled, n)
    total = math.comb(n + m, n)
    if alternative == "less":
        hits = sum(c for s, c in counts.items() if s <= observed)
    elif alternative == "greater":
        hits = sum(c for s, c in counts.items() if s >= observed)
    else:
        centre = n * (n + m + 1)  # doubled null mean
        dev = abs(observed - centre)
        hits = sum(c for s, c in counts.items() if abs(s - centre) >= dev)
    return float(Fraction(hits, total))


# ----------------------------------------------------------------------
# lesions and severity


_EIGHT = np.ones((3, 3), dtype=int)


def connected_components(mask) -> tuple[np.ndarray, list[int]]:
    """8-connected labeling; labels 1..K ordered by each region's first pixel in row-major scan."""
    labels, count = ndimage.label(np.asarray(mask).astype(bool), structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return labels, [int(s) for s in sizes]


class SeverityLabel(str, enum.Enum):
    NON_INFECTED = "non-infected"
    MILD = "mild"
    INTERMEDIATE = "intermediate"
    SEVERE = "severe"
    UNCLASSIFIED = "moderate-unclassified"


def component_diameters_mm(labels: np.ndarray, count: int, spacing_mm: float) -> list[float]:
    """Largest centre-to-centre distance per component plus one pixel, in millimetres."""
    out = []
    for k in range(1, count + 1):
        pts = np.argwhere(labels == k).astype(float)
        if len(pts) > 2:
            # extreme pairs always lie on the region boundary
            boundary = pts[_boundary_mask(labels == k)[labels == k]]
            pts = boundary if len(boundary) >= 2 else pts
        span = pdist(pts).max() if len(pts) > 1 else 0.0
        out.append((span + 1.0) * spacing_mm)
    return out


def _boundary_mask(region: np.ndarray) -> np.ndarray:
    return region & ~ndimage.binary_erosion(region, structure=_EIGHT, border_value=0)


def severity(infection, lung, pixel_spacing_mm: float | None = None) -> SeverityLabel:
    """Grade one slice by lesion burden relative to the lung field.

    Fractions are strict: exactly 25% is not intermediate, exactly 50% is
    not severe. In label maps with GGO=1 and CON=2 only GGO regions count
    toward the lesion-number and size rule; binary maps count every region.
    """
    infection = np.asarray(infection)
    lung = np.asarray(lung).astype(bool)
    if infection.shape != lung.shape:
        raise ValueError(f"infection {infection.shape} and lung {lung.shape} masks differ in shape")
    lesion = infection > 0
    area = int(lesion.sum())
    if area == 0:
        return SeverityLabel.NON_INFECTED
    lung_area = int(lung.sum())
    if lung_area == 0:
        raise ValueError("severity needs a non-empty lung mask when lesions are present")
    fraction = area / lung_area
    if fraction > 0.5:
        return SeverityLabel.SEVERE
    if fraction > 0.25:
        return SeverityLabel.INTERMEDIATE
    ggo = infection == 1 if infection.max() > 1 else lesion
    labels, sizes = connected_components(ggo)
    if len(sizes) >= 3:
        return SeverityLabel.UNCLASSIFIED
    if pixel_spacing_mm is None:
        warnings.warn("pixel spacing unknown; lesion diameter rule skipped", stacklevel=2)
        return SeverityLabel.MILD
    if all(d < 30.0 for d in component_diameters_mm(labels, len(sizes), pixel_spacing_mm)):
        return SeverityLabel.MILD
    return SeverityLabel.UNCLASSIFIED
