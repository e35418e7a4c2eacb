"""Synthetic cross-modality segmentation phantoms.

One latent anatomy (nested ellipses: background 0, core 1, enhancing 2,
edema 3) is rendered under two appearance models whose class-intensity
orderings are inverted, so a segmenter fit on one modality collapses on the
other while the label statistics stay identical across domains.  Everything
is a pure function of seeds: sample i of a stream is reproducible without
generating samples 0..i-1.
"""

from __future__ import annotations

import os
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .edgelabel import CannyConfig, canny, render_label_intensity
from .pgm import float_to_gray, gray_to_edges, gray_to_float, read_pgm, write_pgm

CLASSES = 4

# sub-seed salts so train/eval streams for each domain never collide
_STREAM_SALTS = {
    ("source", False): 0,
    ("target", False): 1,
    ("source", True): 2,
    ("target", True): 3,
}

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class Phantom:
    """Latent anatomy: class labels plus the brain-tissue mask."""

    label: np.ndarray  # int64 [H,W], values in [0,4)
    brain: np.ndarray  # bool [H,W]
    geometry_seed: object

    def validate(self) -> None:
        if self.label.min() < 0 or self.label.max() >= CLASSES:
            raise ValueError("phantom labels out of range [0,4)")
        if ((self.label > 0) & ~self.brain).any():
            raise ValueError("tumor classes must lie inside the brain mask")


@dataclass(frozen=True)
class ModalityModel:
    """Appearance model for one imaging domain.

    class_means orders (background, core, enhancing, edema) for brain tissue;
    pixels outside the brain render at outside_mean.  contrast_signs exposes
    each class's polarity against background, the quantity the domain gap
    inverts.
    """

    class_means: tuple[float, float, float, float]
    outside_mean: float
    noise_sigma: float = 0.06
    bias_amplitude: float = 0.10

    def __post_init__(self):
        if len(self.class_means) != CLASSES:
            raise ValueError(f"need {CLASSES} class means")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise_sigma and bias_amplitude must be >= 0")

    @property
    def contrast_signs(self) -> tuple[int, ...]:
        bg = self.class_means[0]
        return tuple(int(np.sign(m - bg)) for m in self.class_means)

    @property
    def intensity_ordering(self) -> tuple[int, ...]:
        """Class indices sorted from darkest to brightest mean."""
        return tuple(int(k) for k in np.argsort(self.class_means, kind="stable"))


# enhancing tumor saturates one end of the range and the orderings invert;
# with zero noise/bias the raw range is exactly [-1,1] in both domains
SOURCE_MODALITY = ModalityModel((-0.35, -0.80, 1.00, 0.30), -1.00)
TARGET_MODALITY = ModalityModel((0.35, 0.80, -1.00, -0.30), 1.00)


@dataclass
class Sample:
    """One 2-d slice: image in [-1,1], optional label and edge map."""

    image: np.ndarray
    label: np.ndarray | None
    edge: np.ndarray | None
    domain: str

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass
class SampleBatch:
    """Stacked samples: images [N,1,H,W], labels/edges [N,H,W] when present."""

    images: np.ndarray
    labels: np.ndarray | None
    edges: np.ndarray | None
    domain: str

    @property
    def size(self) -> int:
        return self.images.shape[0]


def generate_phantom(seed, h: int, w: int, tumor_probability: float = 1.0) -> Phantom:
    """Random brain ellipse with a nested tumor complex, deterministic in seed."""
    if h < 32 or w < 32 or h % 8 or w % 8:
        raise ValueError("phantom dims must be >= 32 and divisible by 8")
    rng = np.random.default_rng(seed)
    ii = np.arange(h, dtype=np.float64)[:, None]
    jj = np.arange(w, dtype=np.float64)[None, :]

    def ellipse(ci, cj, ai, aj, theta):
        di, dj = ii - ci, jj - cj
        u = di * np.cos(theta) + dj * np.sin(theta)
        v = -di * np.sin(theta) + dj * np.cos(theta)
        return (u / ai) ** 2 + (v / aj) ** 2 <= 1.0

    ci = h / 2 + rng.uniform(-h / 16, h / 16)
    cj = w / 2 + rng.uniform(-w / 16, w / 16)
    ai = rng.uniform(0.33, 0.42) * h
    aj = rng.uniform(0.33, 0.42) * w
    brain = ellipse(ci, cj, ai, aj, rng.uniform(0, np.pi))

    label = np.zeros((h, w), dtype=np.int64)
    if rng.random() < tumor_probability:
        s = min(h, w)
        jit = s / 64.0
        theta = rng.uniform(0, np.pi)
        # rings shrink by an absolute per-axis margin, not a ratio, and the
        # nested centers jitter less than that margin: every class shell stays
        # thicker than the edge detector's smoothing scale, so no interface
        # ever merges with its neighbor
        edema_ax = rng.uniform(0.16, 0.26, size=2) * s
        # keep the complex inside the brain's inscribed circle so the brain
        # rim never clips the edema ring thin
        budget = max(min(ai, aj) - edema_ax.max() - 2.0 * jit, 0.0)
        phi = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0, budget)
        eci = ci + r * np.cos(phi)
        ecj = cj + r * np.sin(phi)
        edema = ellipse(eci, ecj, edema_ax[0], edema_ax[1], theta) & brain
        enh_ax = np.maximum(edema_ax - rng.uniform(4.0, 5.5, size=2) * jit, 6.6 * jit)
        enh = (
            ellipse(
                eci + rng.uniform(-0.75, 0.75) * jit,
                ecj + rng.uniform(-0.75, 0.75) * jit,
                enh_ax[0],
                enh_ax[1],
                theta,
            )
            & edema
        )
        core_ax = np.maximum(enh_ax - rng.uniform(4.0, 5.5, size=2) * jit, 2.6 * jit)
        core = (
            ellipse(
                eci + rng.uniform(-0.75, 0.75) * jit,
                ecj + rng.uniform(-0.75, 0.75) * jit,
                core_ax[0],
                core_ax[1],
                theta,
            )
            & enh
        )
        label[edema] = 3
        label[enh] = 2
        label[core] = 1
    return Phantom(label=label, brain=brain, geometry_seed=seed)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Affine map of [min,max] onto [-1,1]; constant images map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return -1.0 + 2.0 * (image - lo) / (hi - lo)


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency random field scaled to peak magnitude 1."""
    ii = (np.arange(h) + 0.5) / h
    jj = (np.arange(w) + 0.5) / w
    field = np.zeros((h, w))
    for p in range(3):
        for q in range(3):
            if p == 0 and q == 0:
                continue
            c = rng.normal()
            field += c * np.outer(np.cos(np.pi * p * ii), np.cos(np.pi * q * jj))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def render(phantom: Phantom, modality: ModalityModel, seed) -> np.ndarray:
    """Class means + Gaussian noise + multiplicative bias field, normalized."""
    rng = np.random.default_rng(seed)
    img = np.full(phantom.label.shape, modality.outside_mean, dtype=np.float64)
    img[phantom.brain] = modality.class_means[0]
    for k in range(1, CLASSES):
        img[phantom.label == k] = modality.class_means[k]
    if modality.noise_sigma > 0:
        img = img + rng.normal(0.0, modality.noise_sigma, img.shape)
    if modality.bias_amplitude > 0:
        img = img * (1.0 + modality.bias_amplitude * _smooth_field(rng, *img.shape))
    return normalize_intensity(img)


def apply_augment(sample: Sample, quarter_turns: int, crop_offset: tuple[int, int] | None) -> Sample:
    """Rotate by 90-degree multiples, optionally crop 4 pixels and reflect-pad
    back; the same transform hits image, label, and edge map."""

    def tf(a):
        if a is None:
            return None
        out = np.rot90(a, quarter_turns)
        if crop_offset is not None:
            oi, oj = crop_offset
            hh, ww = out.shape
            if not (0 <= oi <= 4 and 0 <= oj <= 4):
                raise ValueError("crop offsets must lie in [0,4]")
            out = np.pad(out[oi : oi + hh - 4, oj : oj + ww - 4], 2, mode="reflect")
        return np.ascontiguousarray(out)

    return Sample(tf(sample.image), tf(sample.label), tf(sample.edge), sample.domain)


def augment(sample: Sample, seed, crop_probability: float = 0.5) -> Sample:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    crop = None
    if rng.random() < crop_probability:
        crop = (int(rng.integers(5)), int(rng.integers(5)))
    return apply_augment(sample, k, crop)


def sample_at(
    seed: int,
    index: int,
    *,
    domain: str,
    hw: int = 64,
    held_out: bool = False,
    with_label: bool | None = None,
    with_edge: bool | None = None,
    augment_data: bool = True,
    tumor_probability: float = 1.0,
    canny_cfg: CannyConfig = CannyConfig(),
) -> Sample:
    """Sample `index` of the (seed, domain, held_out) stream, stateless.

    Training target samples carry no label; held-out samples keep labels in
    both domains so target performance stays measurable.
    """
    salt = _STREAM_SALTS[(domain, held_out)]
    modality = SOURCE_MODALITY if domain == "source" else TARGET_MODALITY
    if with_label is None:
        with_label = domain == "source" or held_out
    if with_edge is None:
        with_edge = with_label and not held_out
    root = [int(seed), salt, int(index)]
    phantom = generate_phantom(root + [0], hw, hw, tumor_probability)
    image = render(phantom, modality, root + [1])
    label = phantom.label if with_label else None
    edge = None
    if with_edge:
        edge = canny(render_label_intensity(phantom.label, CLASSES), canny_cfg)
    sample = Sample(image, label, edge, domain)
    if augment_data:
        sample = augment(sample, root + [2])
    return sample


def sample_stream(seed: int, *, domain: str, **kwargs):
    """Infinite deterministic stream of samples for one domain."""
    index = 0
    while True:
        yield sample_at(seed, index, domain=domain, **kwargs)
        index += 1


def stack_samples(samples: Sequence[Sample]) -> SampleBatch:
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    domain = samples[0].domain
    if any(s.domain != domain for s in samples):
        raise ValueError("cannot stack samples from mixed domains")
    images = np.stack([s.image for s in samples])[:, None, :, :]
    labels = None
    if all(s.label is not None for s in samples):
        labels = np.stack([s.label for s in samples])
    edges = None
    if all(s.edge is not None for s in samples):
        edges = np.stack([s.edge for s in samples])
    return SampleBatch(images, labels, edges, domain)


def unpaired_batches(source_stream, target_stream, batch: int, seed: int = 0):
    """Draw a batch from each domain independently and stack.

    Iterators are consumed in order; finite sequences are sampled with
    replacement using `seed`.  Source batches carry labels and edges, target
    batches images only (by stream construction).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = np.random.default_rng([int(seed)])

    def draw(stream):
        if isinstance(stream, Sequence):
            if not stream:
                raise ValueError("empty dataset")
            return [stream[int(i)] for i in rng.integers(len(stream), size=batch)]
        return [next(stream) for _ in range(batch)]

    return stack_samples(draw(source_stream)), stack_samples(draw(target_stream))


def training_batches(
    seed: int,
    step: int,
    batch: int,
    *,
    hw: int = 64,
    augment_data: bool = True,
    tumor_probability: float = 1.0,
    canny_cfg: CannyConfig = CannyConfig(),
) -> tuple[SampleBatch, SampleBatch]:
    """Unpaired source/target batches for one training step.

    Pure in (seed, step): resuming at step t regenerates the same batches
    without replaying steps 0..t-1.
    """
    base = step * batch
    kwargs = dict(
        hw=hw,
        augment_data=augment_data,
        tumor_probability=tumor_probability,
        canny_cfg=canny_cfg,
    )
    src = [sample_at(seed, base + j, domain="source", **kwargs) for j in range(batch)]
    tgt = [sample_at(seed, base + j, domain="target", **kwargs) for j in range(batch)]
    return stack_samples(src), stack_samples(tgt)


def eval_samples(
    seed: int,
    n: int,
    *,
    domain: str,
    hw: int = 64,
    tumor_probability: float = 1.0,
) -> list[Sample]:
    """Held-out labeled samples, unaugmented, disjoint from training streams."""
    return [
        sample_at(
            seed,
            i,
            domain=domain,
            hw=hw,
            held_out=True,
            with_label=True,
            augment_data=False,
            tumor_probability=tumor_probability,
        )
        for i in range(n)
    ]


def save_pgm_dataset(dirpath, samples: Sequence[Sample]) -> list[str]:
    """Write samples as PGM files plus a tab-separated manifest.

    Per sample: NNNNN.img.pgm always, NNNNN.lab.pgm (class index as gray
    level) and NNNNN.edge.pgm when present.  Returns manifest line fields.
    """
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        names = [f"{i:05d}.img.pgm"]
        write_pgm(os.path.join(dirpath, names[0]), float_to_gray(s.image))
        if s.label is not None:
            names.append(f"{i:05d}.lab.pgm")
            write_pgm(os.path.join(dirpath, names[-1]), s.label.astype(np.uint8))
        if s.edge is not None:
            names.append(f"{i:05d}.edge.pgm")
            write_pgm(os.path.join(dirpath, names[-1]), np.where(s.edge > 0, 255, 0).astype(np.uint8))
        lines.append("\t".join(names))
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return lines


def load_pgm_dataset(dirpath) -> list[Sample]:
    """Load a PGM dataset directory written by save_pgm_dataset.

    Reads the manifest when present, otherwise globs *.img.pgm and picks up
    sibling .lab.pgm / .edge.pgm files.  Samples without a label are treated
    as target-domain.
    """
    manifest = os.path.join(dirpath, MANIFEST_NAME)
    if os.path.exists(manifest):
        with open(manifest, encoding="utf-8") as fh:
            rows = [line.split("\t") for line in fh.read().splitlines() if line.strip()]
    else:
        rows = []
        for name in sorted(os.listdir(dirpath)):
            if not name.endswith(".img.pgm"):
                continue
            stem = name[: -len(".img.pgm")]
            row = [name]
            for suffix in (".lab.pgm", ".edge.pgm"):
                if os.path.exists(os.path.join(dirpath, stem + suffix)):
                    row.append(stem + suffix)
            rows.append(row)
    if not rows:
        raise ValueError(f"no samples found in {dirpath}")

    samples = []
    for row in rows:
        image = gray_to_float(read_pgm(os.path.join(dirpath, row[0])))
        label = edge = None
        for name in row[1:]:
            arr = read_pgm(os.path.join(dirpath, name))
            if arr.shape != image.shape:
                raise ValueError(f"size mismatch between {row[0]} and {name}")
            if name.endswith(".lab.pgm"):
                if arr.max() >= CLASSES:
                    raise ValueError(f"label file {name} has values outside [0,4)")
                label = arr.astype(np.int64)
            elif name.endswith(".edge.pgm"):
                edge = gray_to_edges(arr)
            else:
                raise ValueError(f"unrecognized manifest entry {name}")
        domain = "source" if label is not None else "target"
        samples.append(Sample(image, label, edge, domain))
    return samples
