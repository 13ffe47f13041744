"""Overlap and surface metrics for binary masks.

Conventions (the reference scans come with none):

* both masks empty -> dice = jaccard = 1; exactly one empty -> dice = jaccard = 0
* a ratio with an empty denominator (e.g. sensitivity with no positives) is 1
* a surface voxel is a foreground voxel with at least one 6-connected
  background neighbour; voxels outside the array count as background
* surface distances are Euclidean between voxel centres, in mm
* HD95 is the max of the two directed nearest-rank 95th percentiles
* HD95 and NSD are undefined when either mask is empty (reported as missing)
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

OVERLAP_KEYS = ("dice", "jaccard", "specificity", "sensitivity")
METRIC_KEYS = ("dice", "jaccard", "hd95", "nsd", "specificity", "sensitivity")


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary_pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(pred), np.asarray(true)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    for name, m in (("pred", p), ("true", t)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} mask is not binary")
    return p.astype(bool), t.astype(bool)


def confusion(pred, true) -> ConfusionCounts:
    p, t = _binary_pair(pred, true)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def overlap_metrics(pred, true) -> dict[str, float]:
    c = confusion(pred, true)
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "jaccard": _ratio(c.tp, c.tp + c.fp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
    }


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~eroded


def surface_points(mask, spacing) -> np.ndarray:
    """Surface voxel centres in mm, shape (n, 3)."""
    return surface_indices(mask) * np.asarray(spacing, dtype=np.float64)


def surface_indices(mask) -> np.ndarray:
    return np.argwhere(surface(mask))


def nearest_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """For each src voxel index, the distance in mm to the nearest dst voxel.

    A KD-tree proposes the neighbourhood; the final value is recomputed from
    integer index offsets scaled by the spacing over every candidate at (or
    within rounding of) the proposed distance. Distances that sit exactly on
    a tolerance therefore compare exactly, as in an all-pairs minimum.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * sp)
    approx, _ = tree.query(src * sp)
    radii = approx * (1 + 1e-9) + 1e-12
    out = np.empty(len(src))
    for i, cand in enumerate(tree.query_ball_point(src * sp, radii)):
        diff = (src[i] - dst[cand]) * sp
        out[i] = np.sqrt((diff**2).sum(axis=-1)).min()
    return out


def nearest_rank(values: np.ndarray, q: int = 95) -> float:
    v = np.sort(values)
    k = -(-q * len(v) // 100)  # ceil(q·n/100), 1-based
    return float(v[max(k, 1) - 1])


def _surfaces(pred, true):
    p, t = _binary_pair(pred, true)
    if not p.any() or not t.any():
        raise EmptyMaskError("surface metric undefined for an empty mask")
    return surface_indices(p), surface_indices(t)


def hd95(pred, true, spacing=(1.0, 1.0, 1.0)) -> float:
    sp, st = _surfaces(pred, true)
    return max(nearest_rank(nearest_distances(sp, st, spacing)), nearest_rank(nearest_distances(st, sp, spacing)))


def nsd(pred, true, tau: float = 1.0, spacing=(1.0, 1.0, 1.0)) -> float:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    sp, st = _surfaces(pred, true)
    hit_p = np.count_nonzero(nearest_distances(sp, st, spacing) <= tau)
    hit_t = np.count_nonzero(nearest_distances(st, sp, spacing) <= tau)
    return (hit_p + hit_t) / (len(sp) + len(st))


def case_metrics(pred, true, spacing=(1.0, 1.0, 1.0), tau: float | None = None) -> dict[str, float | None]:
    """All six metrics for one case; HD95/NSD are None when undefined."""
    tau = min(spacing) if tau is None else tau
    out: dict[str, float | None] = dict(overlap_metrics(pred, true))
    try:
        out["hd95"] = hd95(pred, true, spacing)
        out["nsd"] = nsd(pred, true, tau, spacing)
    except EmptyMaskError:
        out["hd95"] = None
        out["nsd"] = None
    return out


def mean_sd(values) -> tuple[float | None, float | None, int]:
    """Mean and sample SD over the non-missing values, reduced in list order."""
    vals = [float(v) for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    n = len(vals)
    if n == 0:
        return None, None, 0
    mean = math.fsum(vals) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return mean, sd, n


@dataclass
class MetricsReport:
    cases: dict[str, dict[str, float | None]] = field(default_factory=dict)
    tau: float = 1.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: str = ""

    def add(self, case_id: str, pred, true, spacing=None) -> dict:
        spacing = tuple(spacing or self.spacing)
        row = case_metrics(pred, true, spacing, self.tau)
        self.cases[case_id] = row
        return row

    def aggregate(self) -> dict[str, dict[str, float | None]]:
        agg = {}
        for key in METRIC_KEYS:
            m, s, n = mean_sd(self.cases[c][key] for c in self.cases)
            agg[key] = {"mean": m, "sd": s, "n": n}
        return agg

    def values(self, key: str) -> list[float | None]:
        return [self.cases[c][key] for c in self.cases]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "tau_mm": self.tau,
            "spacing": list(self.spacing),
            "cases": self.cases,
            "aggregate": self.aggregate(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(cases=d["cases"], tau=d["tau_mm"], spacing=tuple(d["spacing"]), label=d.get("label", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", *METRIC_KEYS])
        for cid, row in self.cases.items():
            w.writerow([cid, *("" if row[k] is None else repr(float(row[k])) for k in METRIC_KEYS)])
        agg = self.aggregate()
        w.writerow(["mean±sd", *("" if agg[k]["mean"] is None else f"{agg[k]['mean']!r}±{agg[k]['sd']!r}"
                                 for k in METRIC_KEYS)])
        return buf.getvalue()
