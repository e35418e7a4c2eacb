"""Scalar training objectives: supervised CE terms, the two adversarial
games, self-entropy, and the per-network composite objectives.

Sign convention: both discriminators minimize a standard binary cross-entropy
with source mapped to 1 and target to 0; the task networks minimize a fooling
term on their target-domain outputs.  By default the fooling term is the
non-saturating ``-log sigmoid(logit)`` form, which has the same fixed points
as literally maximizing the discriminator loss but far better gradients early
in training; the literal form is available for comparison.

All probabilities are clamped to [1e-12, 1 - 1e-12] before any log, so every
loss here is finite on any valid input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, clamp, log, mean, mul, scale, sigmoid, softmax_channels

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the edge-adversarial, feature-adversarial, and entropy terms.

    Defaults are tuned for the synthetic benchmark: the feature term needs a
    much larger weight than the edge term because feature alignment is the
    bottleneck (edges are nearly domain-invariant already), and at smaller
    beta the feature discriminator wins outright and target performance
    never recovers within the step budget.
    """

    alpha: float = 0.1
    beta: float = 0.6
    lam: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be nonnegative")


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """Class-index map [N,H,W] -> one-hot float array [N,C,H,W]."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0,{classes}), got range "
                         f"[{labels.min()},{labels.max()}]")
    n, h, w = labels.shape
    out = np.zeros((n, classes, h, w))
    nn, hh, ww = np.indices((n, h, w))
    out[nn, labels, hh, ww] = 1.0
    return out


def seg_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of softmaxed logits against class labels."""
    c = logits.data.shape[1]
    oh = Tensor(one_hot(labels, c))
    p = clamp(softmax_channels(logits), EPS, 1.0)
    # mean over N*C*H*W picks one channel per pixel, so rescale by C to get
    # the mean over pixels
    return scale(mean(mul(oh, log(p))), -float(c))


def _as_edge_channel(edge_label: np.ndarray) -> np.ndarray:
    e = np.asarray(edge_label, dtype=np.float64)
    if e.ndim == 3:
        e = e[:, None]
    if not np.isin(e, (0.0, 1.0)).all():
        raise ValueError("edge labels must be binary")
    return e


def edge_ce(edge_prob: Tensor, edge_label: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of edge probabilities against binary labels."""
    e = _as_edge_channel(edge_label)
    if e.shape != edge_prob.data.shape:
        raise ValueError(f"edge label shape {e.shape} != prediction {edge_prob.data.shape}")
    p = clamp(edge_prob, EPS, 1.0 - EPS)
    pos = mul(Tensor(e), log(p))
    neg = mul(Tensor(1.0 - e), log(1.0 - p))
    return scale(mean(pos + neg), -1.0)


def disc_bce(logit_source: Tensor, logit_target: Tensor) -> Tensor:
    """Discriminator BCE with convention source -> 1, target -> 0."""
    ps = clamp(sigmoid(logit_source), EPS, 1.0)
    qt = clamp(1.0 - sigmoid(logit_target), EPS, 1.0)
    return scale(mean(log(ps)) + mean(log(qt)), -1.0)


def adversarial_generator_term(logit_target: Tensor) -> Tensor:
    """Non-saturating fooling term: push the discriminator's target logits
    toward the source label.  Decreases monotonically in the logit."""
    pt = clamp(sigmoid(logit_target), EPS, 1.0)
    return scale(mean(log(pt)), -1.0)


def adversarial_generator_literal(logit_source: Tensor, logit_target: Tensor) -> Tensor:
    """The literal alternative: minimize the negated discriminator BCE."""
    return scale(disc_bce(logit_source, logit_target), -1.0)


def self_entropy(softmax_out: Tensor) -> Tensor:
    """Pixel-wise averaged Shannon entropy of per-pixel class distributions.

    Zero for one-hot outputs, ln(C) for uniform ones; minimizing it pushes
    predictions toward confident one-hot maps.
    """
    if softmax_out.data.ndim != 4:
        raise ValueError("self_entropy expects softmax output [N,C,H,W]")
    c = softmax_out.data.shape[1]
    p = clamp(softmax_out, EPS, 1.0)
    return scale(mean(mul(softmax_out, log(p))), -float(c))


OBJECTIVE_NAMES = ("contour", "edge_disc", "encoder", "decoder", "feat_disc")


def composite_objectives(terms: dict, weights: LossWeights) -> dict:
    """Assemble the five per-network objectives from precomputed terms.

    Required ``terms`` keys: ``edge_ce``, ``edge_disc``, ``seg_ce``,
    ``feat_disc``; ``edge_adv`` when alpha > 0, ``feat_adv`` when beta > 0,
    ``entropy`` when lam > 0.  Gradient routing (detaching, freezing) is the
    trainer's job; this only builds the weighted sums.
    """

    def get(name: str) -> Tensor:
        if name not in terms:
            raise KeyError(f"composite_objectives: missing term {name!r}")
        return terms[name]

    contour = get("edge_ce")
    if weights.alpha > 0:
        contour = contour + scale(get("edge_adv"), weights.alpha)
    encoder = get("seg_ce")
    if weights.beta > 0:
        encoder = encoder + scale(get("feat_adv"), weights.beta)
    decoder = get("seg_ce")
    if weights.lam > 0:
        ent = scale(get("entropy"), weights.lam)
        encoder = encoder + ent
        decoder = decoder + ent
    return {
        "contour": contour,
        "edge_disc": get("edge_disc"),
        "encoder": encoder,
        "decoder": decoder,
        "feat_disc": get("feat_disc"),
    }
