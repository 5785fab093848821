"""Segmentation and functional metrics: Dice, surface distances, ejection fraction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import Volume

COLUMNS = ["dice", "msd_mm", "hsd_mm", "corr_ef", "seconds"]


class EmptyMaskError(ValueError):
    def __init__(self, which: str):
        super().__init__(f"{which}: mask is empty")
        self.which = which


class DegenerateVarianceError(ValueError):
    pass


def _mask(v) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else v
    return np.asarray(data) >= 0.5


def _spacing(*vols) -> np.ndarray:
    for v in vols:
        if isinstance(v, Volume):
            return np.asarray(v.spacing, dtype=np.float64)
    return np.ones(3)


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    ma, mb = _mask(a), _mask(b)
    _check_dims(ma, mb)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    The volume border counts as background.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    interior = m[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(m, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(np.asarray(mask, dtype=bool) & ~interior)


def _surfaces(a, b):
    ma, mb = _mask(a), _mask(b)
    _check_dims(ma, mb)
    if not ma.any():
        raise EmptyMaskError("a")
    if not mb.any():
        raise EmptyMaskError("b")
    sp = _spacing(a, b)
    return surface_voxels(ma) * sp, surface_voxels(mb) * sp


def _aggregate(da, db):
    # a + b == b + a exactly, so the result is symmetric in (a, b)
    mean = (float(da.sum()) + float(db.sum())) / (da.size + db.size)
    return mean, float(max(da.max(), db.max()))


def surface_distances(a, b) -> tuple[float, float]:
    """(MSD, HSD) in mm between the 6-connected surfaces of two masks.

    MSD averages nearest-surface distances over the union of both surfaces;
    HSD is the largest of them.
    """
    sa, sb = _surfaces(a, b)
    da, _ = cKDTree(sb).query(sa)
    db, _ = cKDTree(sa).query(sb)
    return _aggregate(da, db)


def surface_distances_bruteforce(a, b) -> tuple[float, float]:
    """All-pairs reference for ``surface_distances``."""
    sa, sb = _surfaces(a, b)
    pair = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=-1))
    return _aggregate(pair.min(axis=1), pair.min(axis=0))


def cavity_volume(label) -> float:
    vox = float(np.prod(_spacing(label)))
    return int(_mask(label).sum()) * vox


def ejection_fraction(ed, es) -> float:
    v_ed = cavity_volume(ed)
    if v_ed == 0:
        raise EmptyMaskError("ed")
    return (v_ed - cavity_volume(es)) / v_ed


def pearson_corr(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_corr needs two equal-length sequences")
    if x.size < 2:
        raise DegenerateVarianceError("need at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise DegenerateVarianceError("zero variance in an input")
    return float((dx * dy).sum() / math.sqrt(sxx * syy))


def bootstrap_corr_std(xs, ys, n: int = 1000, seed: int = 0) -> float:
    """Std of the correlation over ``n`` paired resamples; degenerate draws are skipped."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n):
        idx = rng.integers(0, x.size, x.size)
        try:
            vals.append(pearson_corr(x[idx], y[idx]))
        except DegenerateVarianceError:
            continue
    return float(np.std(vals)) if vals else float("nan")


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    msd_mm: float
    hsd_mm: float
    seconds: float = 0.0


@dataclass
class MetricReport:
    """Per-case rows plus EF pairs; aggregates are computed on demand."""

    cases: list[CaseMetrics] = field(default_factory=list)
    ef_pred: list[float] = field(default_factory=list)
    ef_true: list[float] = field(default_factory=list)
    bootstrap: int = 1000
    seed: int = 0

    def add_case(self, case_id, pred, truth, seconds=0.0) -> CaseMetrics:
        try:
            msd, hsd = surface_distances(pred, truth)
        except EmptyMaskError:
            msd = hsd = float("inf")
        row = CaseMetrics(str(case_id), dice(pred, truth), msd, hsd, float(seconds))
        self.cases.append(row)
        return row

    def add_ef(self, predicted: float, true: float) -> None:
        self.ef_pred.append(float(predicted))
        self.ef_true.append(float(true))

    def mean_std(self, name: str) -> tuple[float, float]:
        vals = np.array([getattr(c, name) for c in self.cases], dtype=np.float64)
        if vals.size == 0:
            return float("nan"), float("nan")
        with np.errstate(invalid="ignore"):
            return float(vals.mean()), float(vals.std())

    @property
    def corr_ef(self) -> float:
        try:
            return pearson_corr(self.ef_pred, self.ef_true)
        except DegenerateVarianceError:
            return float("nan")

    def corr_ef_std(self) -> float:
        if len(self.ef_pred) < 2 or not self.bootstrap:
            return float("nan")
        return bootstrap_corr_std(self.ef_pred, self.ef_true, self.bootstrap, self.seed)

    def summary(self) -> dict:
        out = {}
        for name in ("dice", "msd_mm", "hsd_mm", "seconds"):
            out[name], out[name + "_std"] = self.mean_std(name)
        out["corr_ef"] = self.corr_ef
        out["corr_ef_std"] = self.corr_ef_std()
        return out

    def write_csv(self, path) -> None:
        """Per-case rows, then ``mean`` and ``std`` footer rows."""
        s = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case"] + COLUMNS)
            for c in self.cases:
                w.writerow([c.case_id, fmt(c.dice), fmt(c.msd_mm), fmt(c.hsd_mm), "", fmt(c.seconds)])
            w.writerow(["mean", fmt(s["dice"]), fmt(s["msd_mm"]), fmt(s["hsd_mm"]),
                        fmt(s["corr_ef"]), fmt(s["seconds"])])
            w.writerow(["std", fmt(s["dice_std"]), fmt(s["msd_mm_std"]), fmt(s["hsd_mm_std"]),
                        fmt(s["corr_ef_std"]), fmt(s["seconds_std"])])


def fmt(v: float) -> str:
    return f"{v:.6f}"
