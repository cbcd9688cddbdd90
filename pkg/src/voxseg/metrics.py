"""Segmentation evaluation: per-class DSC, Hausdorff distance, aggregation
and a two-tailed paired t-test.

DSC is the volume-overlap score 2|G n P| / (|G| + |P|) in percent.  HD is
the symmetric max-of-min Euclidean distance between the two voxel
coordinate sets, in voxel units; a class present on one side only gets an
infinite HD and a missing-class flag.  Aggregates run over foreground
classes, excluding infinite entries from the HD mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .volumes import LabelVolume


def _class_coords(vol: LabelVolume, class_id: int) -> np.ndarray:
    return np.argwhere(vol.data == class_id)


def _check_dims(truth: LabelVolume, pred: LabelVolume):
    if truth.dims != pred.dims:
        raise ShapeError(f"volume dims differ: {truth.dims} vs {pred.dims}")


def dsc(truth: LabelVolume, pred: LabelVolume, class_id: int) -> float:
    """Dice similarity coefficient in percent; two empty sets score 100."""
    _check_dims(truth, pred)
    g = truth.data == class_id
    p = pred.data == class_id
    g_count = int(g.sum())
    p_count = int(p.sum())
    if g_count + p_count == 0:
        return 100.0
    inter = int(np.logical_and(g, p).sum())
    return (200.0 * inter) / (g_count + p_count)


def _directed_max_min_sq(a: np.ndarray, b: np.ndarray, block: int = 4096) -> int:
    """max over a of min over b of squared Euclidean distance (exact ints)."""
    worst = 0
    for start in range(0, len(a), block):
        chunk = a[start : start + block]
        diff = chunk[:, None, :] - b[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        worst = max(worst, int(d2.min(axis=1).max()))
    return worst


def hausdorff(truth: LabelVolume, pred: LabelVolume, class_id: int) -> float:
    """Symmetric Hausdorff distance in voxels; one-sided absence gives inf."""
    _check_dims(truth, pred)
    g = _class_coords(truth, class_id)
    p = _class_coords(pred, class_id)
    if len(g) == 0 and len(p) == 0:
        return 0.0
    if len(g) == 0 or len(p) == 0:
        return math.inf
    fwd = _directed_max_min_sq(g, p)
    bwd = _directed_max_min_sq(p, g)
    return math.sqrt(float(max(fwd, bwd)))


@dataclass
class MetricReport:
    """Per-class scores plus aggregates over classes with finite entries."""

    per_class: list  # (class_id, dsc_percent, hd_voxels)
    mean_dsc: float
    std_dsc: float
    mean_hd: float
    std_hd: float
    missing_in_pred: list = field(default_factory=list)
    missing_in_truth: list = field(default_factory=list)

    @property
    def num_infinite_hd(self) -> int:
        return sum(1 for _, _, hd in self.per_class if math.isinf(hd))

    def lines(self):
        out = [f"{cid} {d:.6f} {hd:.6f}" for cid, d, hd in self.per_class]
        out.append(
            f"mean_dsc {self.mean_dsc:.6f} std_dsc {self.std_dsc:.6f} "
            f"mean_hd {self.mean_hd:.6f} std_hd {self.std_hd:.6f} "
            f"missing_classes {len(self.missing_in_pred) + len(self.missing_in_truth)}"
        )
        return out


def evaluate(truth: LabelVolume, pred: LabelVolume, num_classes: int) -> MetricReport:
    """Score classes 1..L-1 (background excluded) and aggregate.

    Means and standard deviations run across structures; infinite HDs are
    excluded from the HD aggregates but counted and flagged.
    """
    _check_dims(truth, pred)
    per_class = []
    missing_pred = []
    missing_truth = []
    for cid in range(1, num_classes):
        d = dsc(truth, pred, cid)
        hd = hausdorff(truth, pred, cid)
        per_class.append((cid, d, hd))
        in_truth = bool((truth.data == cid).any())
        in_pred = bool((pred.data == cid).any())
        if in_truth and not in_pred:
            missing_pred.append(cid)
        if in_pred and not in_truth:
            missing_truth.append(cid)
    dscs = np.array([d for _, d, _ in per_class], dtype=np.float64)
    hds = np.array([hd for _, _, hd in per_class if math.isfinite(hd)], dtype=np.float64)
    return MetricReport(
        per_class=per_class,
        mean_dsc=float(dscs.mean()) if len(dscs) else 0.0,
        std_dsc=float(dscs.std()) if len(dscs) else 0.0,
        mean_hd=float(hds.mean()) if len(hds) else math.inf,
        std_hd=float(hds.std()) if len(hds) else math.nan,
        missing_in_pred=missing_pred,
        missing_in_truth=missing_truth,
    )


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta function."""
    max_iter = 300
    tiny = 1e-300
    eps = 3e-16
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the symmetric continued-fraction evaluation."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: int) -> float:
    """Two-tailed tail probability of Student's t."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b):
    """Two-tailed paired t-test; returns (t statistic, p value).

    Identical inputs (zero-variance, zero-mean differences) give p = 1 by
    convention; zero-variance nonzero differences give an infinite t.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired_t_test: incompatible shapes {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise ShapeError("paired_t_test needs at least 2 pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(student_t_sf2(t, n - 1))
