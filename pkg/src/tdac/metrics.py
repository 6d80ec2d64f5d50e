"""Segmentation metrics: Dice, IoU, weighted coverage and boundary F-score.

All functions take binary masks (any array convertible to {0, 1}).  When both
masks are empty the overlap scores are 1 by convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, astuple, fields

import numpy as np
from scipy import ndimage

from .fields import check_mask

BOUNDARY_TOLERANCES = (1, 2, 3, 4, 5)
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class MetricsReport:
    dice: float
    miou: float
    wcov: float
    boundf: float


def _pair(x, g):
    x = check_mask(x).astype(bool)
    g = check_mask(g).astype(bool)
    if x.shape != g.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {g.shape}")
    return x, g


def dice_score(x, g):
    x, g = _pair(x, g)
    total = int(x.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & g)) / total


def iou_score(x, g):
    x, g = _pair(x, g)
    union = int(np.count_nonzero(x | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(x & g)) / union


def connected_components(mask):
    """Label 8-connected foreground regions.

    Labels run from 1 in row-major order of each region's first pixel.

    Returns
    -------
    labels : ndarray of int
    count : int
    """
    m = check_mask(mask).astype(bool)
    labels, count = ndimage.label(m, structure=_EIGHT)
    return labels, int(count)


def wcov_score(x, g):
    """Area-weighted best IoU of every ground-truth region against the predicted regions.

    Normalized by the total ground-truth foreground area, so ``wcov(G, G) == 1``.
    Returns 0 when ``g`` has no foreground.
    """
    x, g = _pair(x, g)
    g_area = int(g.sum())
    if g_area == 0:
        return 0.0
    g_lab, n_g = connected_components(g)
    x_lab, n_x = connected_components(x)
    if n_x == 0:
        return 0.0
    total = 0.0
    for j in range(1, n_g + 1):
        rg = g_lab == j
        area = int(rg.sum())
        # only predicted regions touching rg can have non-zero IoU
        best = 0.0
        for k in np.unique(x_lab[rg]):
            if k == 0:
                continue
            rx = x_lab == k
            best = max(best, int(np.count_nonzero(rx & rg)) / int(np.count_nonzero(rx | rg)))
        total += area * best
    return total / g_area


def mask_boundary(mask):
    """Foreground pixels removed by a one-pixel (4-neighbour) erosion.

    The image frame is treated as foreground, so regions touching the border
    have no boundary along it.
    """
    m = check_mask(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=1)


def boundary_f_at(x, g, theta):
    """Boundary F-score with matching tolerance ``theta`` pixels (Euclidean)."""
    x, g = _pair(x, g)
    bx, bg = mask_boundary(x), mask_boundary(g)
    return _boundary_f(bx, bg, theta)


def _boundary_f(bx, bg, theta, dist_to_g=None, dist_to_x=None):
    nx, ng = int(bx.sum()), int(bg.sum())
    if nx == 0 and ng == 0:
        return 1.0
    if nx == 0 or ng == 0:
        return 0.0
    if dist_to_g is None:
        dist_to_g = ndimage.distance_transform_edt(~bg)
    if dist_to_x is None:
        dist_to_x = ndimage.distance_transform_edt(~bx)
    precision = int(np.count_nonzero(dist_to_g[bx] <= theta)) / nx
    recall = int(np.count_nonzero(dist_to_x[bg] <= theta)) / ng
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def boundf_score(x, g, tolerances=BOUNDARY_TOLERANCES):
    """Mean boundary F-score over matching tolerances of 1 to 5 pixels."""
    x, g = _pair(x, g)
    bx, bg = mask_boundary(x), mask_boundary(g)
    if bx.any() and bg.any():
        dg = ndimage.distance_transform_edt(~bg)
        dx = ndimage.distance_transform_edt(~bx)
    else:
        dg = dx = None
    scores = [_boundary_f(bx, bg, t, dg, dx) for t in tolerances]
    return sum(scores) / len(scores)


def evaluate_masks(x, g):
    return MetricsReport(
        dice=dice_score(x, g), miou=iou_score(x, g), wcov=wcov_score(x, g), boundf=boundf_score(x, g)
    )


def aggregate(reports):
    """Field-wise mean of a sequence of :class:`MetricsReport`."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    arr = np.array([astuple(r) for r in reports], dtype=np.float64)
    return MetricsReport(*[float(v) for v in arr.mean(axis=0)])


def write_metrics_csv(path, image_ids, reports, aggregate_id="mean"):
    """One row per image plus a trailing aggregate row."""
    reports = list(reports)
    names = [f.name for f in fields(MetricsReport)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", *names])
        for image_id, r in zip(image_ids, reports):
            w.writerow([image_id, *(repr(v) for v in astuple(r))])
        w.writerow([aggregate_id, *(repr(v) for v in astuple(aggregate(reports)))])
