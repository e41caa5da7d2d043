"""Segmentation evaluators: overlap scores and boundary distances.

Boundary pixels are foreground pixels with at least one background neighbour
under 4-connectivity (pixels outside the image count as background). Surface
distances pool both directed nearest-boundary distance lists; the 95th
percentile uses the nearest-rank definition. Distances are in pixels.

Empty-mask conventions: both masks empty gives perfect overlap and zero
distance; exactly one empty gives zero overlap and the image diagonal as a
flagged distance sentinel.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats


@dataclass
class MetricsReport:
    dc: float
    ji: float
    hd95: float
    asd: float
    empty_sentinel: bool = False


def _check_masks(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if p.ndim != 2:
        raise ValueError(f"masks must be 2-d, got shape {p.shape}")
    return p > 0, t > 0


def dice(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _check_masks(pred, target)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def jaccard(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _check_masks(pred, target)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour (outside is background)."""
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def _surface_distances(pred: np.ndarray, target: np.ndarray) -> np.ndarray | None:
    """Pooled symmetric boundary distance multiset, or None for empty masks."""
    pb = boundary_pixels(pred)
    tb = boundary_pixels(target)
    if not pb.any() or not tb.any():
        return None
    # exact Euclidean distance transform of the complement gives, per pixel,
    # the distance to the nearest boundary pixel of the other mask
    dist_to_t = ndimage.distance_transform_edt(~tb)
    dist_to_p = ndimage.distance_transform_edt(~pb)
    return np.concatenate([dist_to_t[pb], dist_to_p[tb]])


def _diagonal(shape) -> float:
    return float(np.hypot(shape[0], shape[1]))


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def hd95(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _check_masks(pred, target)
    if not p.any() and not t.any():
        return 0.0
    dists = _surface_distances(p, t)
    if dists is None:
        return _diagonal(p.shape)
    return nearest_rank_percentile(dists, 95.0)


def asd(pred: np.ndarray, target: np.ndarray) -> float:
    p, t = _check_masks(pred, target)
    if not p.any() and not t.any():
        return 0.0
    dists = _surface_distances(p, t)
    if dists is None:
        return _diagonal(p.shape)
    # canonical summation order keeps the mean exactly symmetric in (pred, target)
    return float(np.sort(dists).mean())


def evaluate_pair(pred: np.ndarray, target: np.ndarray) -> MetricsReport:
    p, t = _check_masks(pred, target)
    sentinel = p.any() != t.any()
    return MetricsReport(
        dc=dice(p, t),
        ji=jaccard(p, t),
        hd95=hd95(p, t),
        asd=asd(p, t),
        empty_sentinel=sentinel,
    )


def mean_ci90(values) -> tuple[float, float]:
    """Mean and 90% confidence half-width (Student t) of a sample."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.size < 2:
        return mean, 0.0
    sem = v.std(ddof=1) / np.sqrt(v.size)
    half = float(stats.t.ppf(0.95, v.size - 1) * sem)
    return mean, half


def write_metrics_csv(path, rows: list) -> None:
    """Write per-image rows plus mean and 90% CI summary rows.

    ``rows`` is a list of (image_id, MetricsReport).
    """
    fields = ("dc", "ji", "hd95", "asd")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image_id",) + fields)
        for image_id, rep in rows:
            writer.writerow(
                [image_id] + [format(getattr(rep, f), ".6g") for f in fields]
            )
        if rows:
            for stat_name, pick in (("mean", 0), ("ci90", 1)):
                writer.writerow(
                    [stat_name]
                    + [
                        format(
                            mean_ci90([getattr(rep, f) for _, rep in rows])[pick],
                            ".6g",
                        )
                        for f in fields
                    ]
                )
