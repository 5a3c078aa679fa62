"""Overlap and boundary-distance metrics, computed per slice and averaged per patient.

Percentages lie in [0, 100]. Distances are Euclidean in pixels unless a
spacing is supplied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

REGIONS = ("CG", "PZ")
METRIC_NAMES = ("dsc", "sen", "spc", "avgd", "maxd")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _pair(S, G):
    S = np.asarray(S, dtype=bool)
    G = np.asarray(G, dtype=bool)
    if S.shape != G.shape:
        raise ValueError(f"mask shapes differ: {S.shape} vs {G.shape}")
    return S, G


def confusion(S, G):
    S, G = _pair(S, G)
    tp = int(np.count_nonzero(S & G))
    fp = int(np.count_nonzero(S & ~G))
    fn = int(np.count_nonzero(~S & G))
    return ConfusionCounts(tp, fp, fn, S.size - tp - fp - fn)


def dsc(S, G):
    c = confusion(S, G)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 100.0
    return 200.0 * c.tp / denom


def sensitivity(S, G):
    c = confusion(S, G)
    if c.tp + c.fn == 0:
        return 100.0
    return 100.0 * c.tp / (c.tp + c.fn)


def true_negative_rate(S, G):
    c = confusion(S, G)
    if c.tn + c.fp == 0:
        return 100.0
    return 100.0 * c.tn / (c.tn + c.fp)


def specificity(S, G):
    """``(1 - |FP| / |S|) * 100``; an empty prediction scores 100."""
    c = confusion(S, G)
    size = c.tp + c.fp
    if size == 0:
        return 100.0
    return 100.0 * (1.0 - c.fp / size)


def boundary(mask):
    """Coordinates (row, col) of foreground pixels with a background 4-neighbour.

    Pixels on the frame edge count as boundary.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior)


def avg_max_distance(S, G, spacing=None):
    """Directed distances from the boundary of S to the boundary of G.

    Returns ``(AvgD, MaxD)``, or ``(nan, nan)`` when either boundary is empty.
    """
    S, G = _pair(S, G)
    bs, bg = boundary(S), boundary(G)
    if len(bs) == 0 or len(bg) == 0:
        return math.nan, math.nan
    scale = np.ones(2) if spacing is None else np.asarray(spacing, dtype=float)
    d, _ = cKDTree(bg * scale).query(bs * scale)
    return float(d.mean()), float(d.max())


def hausdorff(S, G, spacing=None):
    """Symmetric Hausdorff distance between the two boundaries."""
    return max(avg_max_distance(S, G, spacing)[1], avg_max_distance(G, S, spacing)[1])


@dataclass
class MetricsRecord:
    values: dict = field(default_factory=dict)  # region -> {metric: value}
    level: str = "slice"
    n_slices: int = 1

    def get(self, region, metric):
        return self.values[region][metric]


def slice_metrics(pred, truth, spacing=None):
    """Metrics for one slice; ``pred``/``truth`` map region name to a mask."""
    values = {}
    for region in REGIONS:
        S, G = pred[region], truth[region]
        avgd, maxd = avg_max_distance(S, G, spacing)
        values[region] = {
            "dsc": dsc(S, G),
            "sen": sensitivity(S, G),
            "spc": specificity(S, G),
            "avgd": avgd,
            "maxd": maxd,
        }
    return MetricsRecord(values, "slice", 1)


def aggregate_patient(records):
    """Unweighted mean over slices; undefined (NaN) entries are skipped.

    Returns None when no slice is available.
    """
    if not records:
        log.warning("patient has no evaluable slices; excluded")
        return None
    values = {}
    for region in REGIONS:
        values[region] = {}
        for m in METRIC_NAMES:
            vals = [r.values[region][m] for r in records if not math.isnan(r.values[region][m])]
            if not vals:
                log.info("no defined %s %s value for patient; left undefined", region, m)
                values[region][m] = math.nan
            else:
                values[region][m] = float(np.mean(vals))
    return MetricsRecord(values, "patient", len(records))


METRICS_CSV_HEADER = ("dataset", "condition", "fold", "patient", "region", "level", "dsc", "sen", "spc", "avgd", "maxd")


def _fmt(v):
    return "nan" if math.isnan(v) else f"{v:.6f}"


def csv_rows(record, dataset, condition, fold, patient):
    for region in REGIONS:
        vals = record.values[region]
        yield [dataset, condition, str(fold), patient, region, record.level] + [_fmt(vals[m]) for m in METRIC_NAMES]
