"""Self-supervised semantic edge labels: Canny applied to rendered label maps.

Segmentation labels are categorical, so they are first rendered to evenly
spaced gray levels (class k at k/(C-1)); every inter-class interface then has
a nonzero intensity step and the classical Canny pipeline recovers it.  Edge
maps are binary uint8 arrays in {0,1} with the label map's spatial shape.

Because the input is a rendered label map rather than a real image, the
output marks semantic contours only, never texture edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .pgm import edges_to_gray, write_pgm

_TAN22_5 = math.sqrt(2.0) - 1.0


@dataclass(frozen=True)
class CannyConfig:
    """Gaussian smoothing and hysteresis settings.

    Thresholds are fractions of the maximum gradient magnitude remaining
    after non-maximum suppression.  The defaults are tuned for rendered
    label maps, where the weakest interface steps 1/(classes-1) against a
    full-range strongest edge and there is no noise to reject: light
    smoothing, permissive thresholds.
    """

    gaussian_sigma: float = 0.8
    kernel_size: int = 5
    low_threshold: float = 0.05
    high_threshold: float = 0.2

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 3")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if not (0.0 < self.low_threshold < self.high_threshold <= 1.0):
            raise ValueError("need 0 < low_threshold < high_threshold <= 1")


def render_label_intensity(label: np.ndarray, classes: int) -> np.ndarray:
    """Class-index map -> gray image with class k at level k/(classes-1)."""
    if classes < 2:
        raise ValueError("need at least 2 classes to render label intensities")
    label = np.asarray(label)
    if label.min() < 0 or label.max() >= classes:
        raise ValueError(f"labels out of range [0,{classes})")
    return label.astype(np.float64) / (classes - 1)


def _convolve1d_reflect(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # summed center-out in symmetric pairs, not as one dot product: axis
    # reversal then permutes addends only within a commuting pair, so
    # symmetric kernels give bitwise-identical output on a flipped axis and
    # antisymmetric kernels give its exact negation
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    win = sliding_window_view(padded, len(kernel), axis=axis)
    out = kernel[r] * win[..., r]
    for s in range(1, r + 1):
        out = out + (kernel[r - s] * win[..., r - s] + kernel[r + s] * win[..., r + s])
    return out


def _separable2d(img: np.ndarray, k_rows: np.ndarray, k_cols: np.ndarray) -> np.ndarray:
    # both pass orders averaged: float addition commutes, so the result
    # commutes bitwise with 90-degree rotations of the input
    a = _convolve1d_reflect(_convolve1d_reflect(img, k_rows, 0), k_cols, 1)
    b = _convolve1d_reflect(_convolve1d_reflect(img, k_cols, 1), k_rows, 0)
    return 0.5 * (a + b)


def _gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
_SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])

# neighbor offsets along the gradient for the four quantized directions
_NMS_OFFSETS = {"horiz": (0, 1), "vert": (1, 0), "diag_pos": (1, 1), "diag_neg": (1, -1)}


def _nonmax_suppress(m2: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels whose squared magnitude is >= both neighbors along the
    nearest of the four quantized gradient directions."""
    h, w = m2.shape
    padded = np.pad(m2, 1)

    def neighbor(di: int, dj: int) -> np.ndarray:
        return padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]

    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= _TAN22_5 * ax
    vert = ~horiz & (ax <= _TAN22_5 * ay)
    diag_pos = ~horiz & ~vert & (gx * gy > 0)

    def pick(di: int, dj: int) -> np.ndarray:
        return np.where(
            horiz,
            neighbor(0, dj),
            np.where(vert, neighbor(di, 0), np.where(diag_pos, neighbor(di, dj), neighbor(di, -dj))),
        )

    n1 = pick(1, 1)
    n2 = pick(-1, -1)
    keep = (m2 >= n1) & (m2 >= n2) & (m2 > 0)
    return np.where(keep, m2, 0.0)


def canny(image: np.ndarray, cfg: CannyConfig = CannyConfig()) -> np.ndarray:
    """Classical Canny on a float image: Gaussian smoothing, Sobel gradients,
    4-direction non-maximum suppression, then double-threshold hysteresis
    (weak pixels survive iff 8-connected to a strong pixel)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"canny expects a 2-d image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValueError("canny input contains non-finite values")

    g = _gaussian_kernel(cfg.gaussian_sigma, cfg.kernel_size)
    smoothed = _separable2d(image, g, g)
    gx = _separable2d(smoothed, _SOBEL_SMOOTH, _SOBEL_DIFF)
    gy = _separable2d(smoothed, _SOBEL_DIFF, _SOBEL_SMOOTH)
    m2 = gx * gx + gy * gy  # squared magnitude; monotone, so thresholds square

    nms = _nonmax_suppress(m2, gx, gy)
    peak = nms.max()
    if peak <= 0.0:
        return np.zeros(image.shape, dtype=np.uint8)
    strong = nms >= cfg.high_threshold**2 * peak
    weak = nms >= cfg.low_threshold**2 * peak
    components, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    seeded = np.unique(components[strong])
    seeded = seeded[seeded > 0]
    return np.isin(components, seeded).astype(np.uint8)


def edge_labels_for_batch(
    labels: np.ndarray, cfg: CannyConfig = CannyConfig(), classes: int | None = None
) -> np.ndarray:
    """Render then Canny each label map of a [N,H,W] batch independently."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"expected labels [N,H,W], got shape {labels.shape}")
    if classes is None:
        classes = max(2, int(labels.max()) + 1)
    return np.stack([canny(render_label_intensity(lab, classes), cfg) for lab in labels])


def save_edge_pgm(path, edges: np.ndarray) -> None:
    """Write a binary edge map as PGM P5 with edge pixels at 255."""
    write_pgm(path, edges_to_gray(edges))
