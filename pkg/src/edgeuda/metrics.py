"""Segmentation evaluation: Dice, symmetric Hausdorff distance, entropy.

Hausdorff distances are computed over exact integer squared pixel distances
(sqrt applied once at the end), so results match a brute-force pairwise
oracle bit for bit.  Empty-mask conventions: Dice of two empty masks is 1.0,
one empty mask gives 0.0; Hausdorff of two empty masks is 0.0, exactly one
empty is undefined and reported as NaN, excluded from aggregates but counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import EPS


def _as_mask(name: str, m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d mask, got shape {m.shape}")
    return m.astype(bool)


def dice(pred_mask, true_mask) -> float:
    """2|P n T| / (|P|+|T|); both masks empty -> 1.0."""
    p = _as_mask("pred_mask", pred_mask)
    t = _as_mask("true_mask", true_mask)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / (np_ + nt)


def _directed_min_sq(a_pts: np.ndarray, b_pts: np.ndarray) -> np.ndarray:
    """Per point of a: min squared distance to b.  Exact int64 arithmetic."""
    out = np.empty(len(a_pts), dtype=np.int64)
    # cap the (chunk, |b|) difference buffer at a few million entries
    chunk = max(1, 4_000_000 // len(b_pts))
    for s in range(0, len(a_pts), chunk):
        d = a_pts[s : s + chunk, None, :] - b_pts[None, :, :]
        out[s : s + chunk] = (d * d).sum(axis=2).min(axis=1)
    return out


def hausdorff(pred_mask, true_mask, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance between mask pixel sets, in pixels.

    Uses pixel-center coordinates and Euclidean distance.  ``percentile``
    below 100 gives the robust variant (e.g. 95 for HD95); the default is the
    classical maximum.  Returns NaN when exactly one mask is empty.
    """
    p = _as_mask("pred_mask", pred_mask)
    t = _as_mask("true_mask", true_mask)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must be in (0, 100]")
    pp = np.argwhere(p)
    tt = np.argwhere(t)
    if len(pp) == 0 and len(tt) == 0:
        return 0.0
    if len(pp) == 0 or len(tt) == 0:
        return math.nan
    d_pt = _directed_min_sq(pp, tt)
    d_tp = _directed_min_sq(tt, pp)
    if percentile >= 100.0:
        return math.sqrt(int(max(d_pt.max(), d_tp.max())))
    return float(
        max(
            np.percentile(np.sqrt(d_pt.astype(np.float64)), percentile),
            np.percentile(np.sqrt(d_tp.astype(np.float64)), percentile),
        )
    )


def pixel_entropy(softmax: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy of [N,C,H,W] (or [C,H,W]) softmax outputs."""
    s = np.asarray(softmax, dtype=np.float64)
    if s.ndim == 3:
        s = s[None]
    if s.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] softmax, got shape {softmax.shape}")
    return -(s * np.log(np.clip(s, EPS, 1.0))).sum(axis=1)


def mean_prediction_entropy(softmax: np.ndarray) -> float:
    return float(pixel_entropy(softmax).mean())


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate evaluation over a labeled sample set.

    Per-class tuples cover foreground classes 1..C-1 in order; ``hd_*`` means
    exclude undefined cases (NaN when a column had no defined case at all).
    """

    dice_per_class: tuple[float, ...]
    dice_whole: float
    hd_per_class: tuple[float, ...]
    hd_whole: float
    mean_entropy: float
    n_undefined_hd: int
    n_samples: int


def _mean_defined(values: list[float]) -> tuple[float, int]:
    defined = [v for v in values if not math.isnan(v)]
    if not defined:
        return math.nan, len(values)
    return sum(defined) / len(defined), len(values) - len(defined)


def evaluate(model, samples, *, batch: int = 8, hd_percentile: float = 100.0) -> MetricsReport:
    """Run the inference path over labeled samples and aggregate metrics.

    ``model`` is either a callable images[N,1,H,W] -> (class map, edge_prob,
    softmax) or an object with such an ``infer`` method.  Whole-tumor masks
    are the union of all foreground classes.
    """
    infer_fn = model if callable(model) else model.infer
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    if any(s.label is None for s in samples):
        raise ValueError("evaluate requires labeled samples")

    classes = None
    dice_rows: list[list[float]] = []
    hd_rows: list[list[float]] = []
    entropies: list[float] = []
    for start in range(0, len(samples), batch):
        part = samples[start : start + batch]
        images = np.stack([s.image for s in part])[:, None, :, :]
        class_map, _, softmax = infer_fn(images)
        if classes is None:
            classes = softmax.shape[1]
        entropies.extend(pixel_entropy(softmax).mean(axis=(1, 2)).tolist())
        for s, pred in zip(part, class_map):
            drow, hrow = [], []
            for k in range(1, classes):
                drow.append(dice(pred == k, s.label == k))
                hrow.append(hausdorff(pred == k, s.label == k, hd_percentile))
            drow.append(dice(pred > 0, s.label > 0))
            hrow.append(hausdorff(pred > 0, s.label > 0, hd_percentile))
            dice_rows.append(drow)
            hd_rows.append(hrow)

    n_cols = classes  # classes-1 foreground columns plus whole
    dice_cols = [[row[j] for row in dice_rows] for j in range(n_cols)]
    hd_cols = [[row[j] for row in hd_rows] for j in range(n_cols)]
    dice_means = [sum(col) / len(col) for col in dice_cols]
    hd_means, undefined = [], 0
    for col in hd_cols:
        m, u = _mean_defined(col)
        hd_means.append(m)
        undefined += u
    return MetricsReport(
        dice_per_class=tuple(dice_means[:-1]),
        dice_whole=dice_means[-1],
        hd_per_class=tuple(hd_means[:-1]),
        hd_whole=hd_means[-1],
        mean_entropy=sum(entropies) / len(entropies),
        n_undefined_hd=undefined,
        n_samples=len(samples),
    )


METRICS_CSV_HEADER = (
    "epoch,dice_c1,dice_c2,dice_c3,dice_whole,hd_c1,hd_c2,hd_c3,hd_whole,mean_entropy,n_undefined_hd"
)


def metrics_csv_row(epoch: int, report: MetricsReport) -> str:
    if len(report.dice_per_class) != 3:
        raise ValueError("CSV layout is fixed to 3 foreground classes")
    values = [
        *report.dice_per_class,
        report.dice_whole,
        *report.hd_per_class,
        report.hd_whole,
        report.mean_entropy,
    ]
    cells = [str(int(epoch))] + [repr(float(v)) for v in values] + [str(report.n_undefined_hd)]
    return ",".join(cells)


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (epoch, MetricsReport)."""
    lines = [METRICS_CSV_HEADER] + [metrics_csv_row(e, r) for e, r in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
