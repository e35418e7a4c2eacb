"""The five networks: contour net, segmentation encoder/decoder, and the two
domain discriminators.

Forward passes are plain functions over a :class:`NetworkParams` collection,
so the trainer can freeze, step, and checkpoint each network independently.
Widths are deliberately small (everything trains in minutes on one CPU core)
and configurable through :class:`ArchSpec`.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,  # noqa: F401  (re-exported for callers building net inputs)
    conv2d,
    flatten,
    leaky_relu,
    linear,
    relu,
    sigmoid,
    upsample_nearest,
)

ARCH_TAGS = ("contour", "encoder", "decoder", "edge_disc", "feat_disc")

# fixed per-network seed offsets so each net draws from its own substream
_SEED_OFFSET = {tag: i + 1 for i, tag in enumerate(ARCH_TAGS)}


@dataclass(frozen=True)
class ArchSpec:
    """Channel widths and layer geometry for all five networks.

    ``image_hw`` is the training image side length; the discriminators end in
    fully connected layers, so their parameter shapes are tied to it.
    """

    image_hw: int = 64
    classes: int = 4
    feature_channels: int = 64
    contour_width: int = 12
    encoder_widths: tuple[int, int] = (16, 32)
    decoder_widths: tuple[int, int, int] = (24, 12, 8)
    edge_disc_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    feat_disc_widths: tuple[int, int, int] = (64, 64, 64)
    disc_fc_width: int = 64
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.image_hw < 32 or self.image_hw % 16 != 0:
            raise ValueError("image_hw must be a multiple of 16, at least 32")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def feat_hw(self) -> int:
        """Spatial size of encoder features (three stride-2 stages)."""
        return self.image_hw // 8

    @property
    def edge_disc_flat(self) -> int:
        return self.edge_disc_widths[-1] * (self.image_hw // 16) ** 2

    @property
    def feat_disc_flat(self) -> int:
        return self.feat_disc_widths[-1] * (self.feat_hw // 4) ** 2


class NetworkParams:
    """Ordered name -> parameter tensor map for one network.

    Reads go through ``__getitem__`` and bump ``reads``; tests use the counter
    to prove the inference path never touches discriminator weights.
    """

    def __init__(self, arch_tag: str, tensors: "OrderedDict[str, Tensor]"):
        if arch_tag not in ARCH_TAGS:
            raise ValueError(f"unknown arch tag {arch_tag!r}")
        self.arch_tag = arch_tag
        self._tensors = tensors
        self.reads = 0

    def __getitem__(self, name: str) -> Tensor:
        self.reads += 1
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def param_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def reset_reads(self) -> None:
        self.reads = 0

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self._tensors.items())

    def load_state(self, arrays) -> None:
        for name, t in self._tensors.items():
            if name not in arrays:
                raise KeyError(f"{self.arch_tag}: missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"{self.arch_tag}.{name}: checkpoint shape {arr.shape} != {t.data.shape}"
                )
            t.data = arr.copy()


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        w = _kaiming_uniform(self.rng, (cout, cin, k, k), cin * k * k)
        self.tensors[f"{name}_w"] = Tensor(w, requires_grad=True)
        self.tensors[f"{name}_b"] = Tensor(np.zeros(cout), requires_grad=True)

    def fc(self, name: str, kin: int, mout: int) -> None:
        w = _kaiming_uniform(self.rng, (mout, kin), kin)
        self.tensors[f"{name}_w"] = Tensor(w, requires_grad=True)
        self.tensors[f"{name}_b"] = Tensor(np.zeros(mout), requires_grad=True)


def _rng_for(tag: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SEED_OFFSET[tag]])


def init_contour(arch: ArchSpec, seed: int) -> NetworkParams:
    w = arch.contour_width
    b = _Builder(_rng_for("contour", seed))
    b.conv("down1", 1, w)
    b.conv("down2", w, w)
    b.conv("down3", w, 2 * w)
    b.conv("down4", 2 * w, 2 * w)
    b.conv("res1", 2 * w, 2 * w)
    b.conv("res2", 2 * w, 2 * w)
    b.conv("up1", 2 * w, w)
    b.conv("up2", w, w)
    b.conv("head", w, 1, k=1)
    return NetworkParams("contour", b.tensors)


def init_encoder(arch: ArchSpec, seed: int) -> NetworkParams:
    e1, e2 = arch.encoder_widths
    b = _Builder(_rng_for("encoder", seed))
    b.conv("conv1", 2, e1)
    b.conv("conv2", e1, e2)
    b.conv("conv3", e2, arch.feature_channels)
    return NetworkParams("encoder", b.tensors)


def init_decoder(arch: ArchSpec, seed: int) -> NetworkParams:
    d1, d2, d3 = arch.decoder_widths
    b = _Builder(_rng_for("decoder", seed))
    b.conv("up1", arch.feature_channels, d1)
    b.conv("up2", d1, d2)
    b.conv("up3", d2, d3)
    b.conv("head", d3, arch.classes, k=1)
    return NetworkParams("decoder", b.tensors)


def init_edge_disc(arch: ArchSpec, seed: int) -> NetworkParams:
    w1, w2, w3, w4 = arch.edge_disc_widths
    b = _Builder(_rng_for("edge_disc", seed))
    b.conv("conv1", 1, w1)
    b.conv("conv2", w1, w2)
    b.conv("conv3", w2, w3)
    b.conv("conv4", w3, w4)
    b.fc("fc1", arch.edge_disc_flat, arch.disc_fc_width)
    b.fc("fc2", arch.disc_fc_width, 1)
    return NetworkParams("edge_disc", b.tensors)


def init_feat_disc(arch: ArchSpec, seed: int) -> NetworkParams:
    w1, w2, w3 = arch.feat_disc_widths
    b = _Builder(_rng_for("feat_disc", seed))
    b.conv("conv1", arch.feature_channels, w1)
    b.conv("conv2", w1, w2)
    b.conv("conv3", w2, w3)
    b.fc("fc1", arch.feat_disc_flat, arch.disc_fc_width)
    b.fc("fc2", arch.disc_fc_width, 1)
    return NetworkParams("feat_disc", b.tensors)


def init_all(arch: ArchSpec, seed: int) -> dict[str, NetworkParams]:
    return {
        "contour": init_contour(arch, seed),
        "encoder": init_encoder(arch, seed),
        "decoder": init_decoder(arch, seed),
        "edge_disc": init_edge_disc(arch, seed),
        "feat_disc": init_feat_disc(arch, seed),
    }


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _check_image(x: Tensor, channels: int, div: int, who: str) -> None:
    if x.data.ndim != 4 or x.data.shape[1] != channels:
        raise ShapeError(f"{who} expects [N,{channels},H,W], got {x.data.shape}")
    _, _, h, w = x.data.shape
    if h % div or w % div:
        raise ShapeError(f"{who} needs H,W divisible by {div}, got {h}x{w}")


def contour_forward(params: NetworkParams, image: Tensor) -> Tensor:
    """Single-channel image -> per-pixel edge probability in (0,1).

    Encoder-decoder: four convs down to 1/4 resolution, two residual-style
    convs, two upsample+conv stages back up, then a 1x1 conv and a sigmoid.
    """
    _check_image(image, 1, 4, "contour_forward")
    x = relu(conv2d(image, params["down1_w"], params["down1_b"], stride=1, padding=1))
    x = relu(conv2d(x, params["down2_w"], params["down2_b"], stride=2, padding=1))
    x = relu(conv2d(x, params["down3_w"], params["down3_b"], stride=1, padding=1))
    x = relu(conv2d(x, params["down4_w"], params["down4_b"], stride=2, padding=1))
    x = relu(x + conv2d(x, params["res1_w"], params["res1_b"], stride=1, padding=1))
    x = relu(x + conv2d(x, params["res2_w"], params["res2_b"], stride=1, padding=1))
    x = relu(conv2d(upsample_nearest(x, 2), params["up1_w"], params["up1_b"], stride=1, padding=1))
    x = relu(conv2d(upsample_nearest(x, 2), params["up2_w"], params["up2_b"], stride=1, padding=1))
    return sigmoid(conv2d(x, params["head_w"], params["head_b"], stride=1, padding=0))


def encoder_forward(params: NetworkParams, x: Tensor) -> Tensor:
    """Image stacked with its edge map (2 channels) -> features at 1/8 scale.

    The two-channel contract is enforced here: segmentation is always
    edge-conditioned.
    """
    _check_image(x, 2, 8, "encoder_forward")
    x = relu(conv2d(x, params["conv1_w"], params["conv1_b"], stride=2, padding=1))
    x = relu(conv2d(x, params["conv2_w"], params["conv2_b"], stride=2, padding=1))
    return relu(conv2d(x, params["conv3_w"], params["conv3_b"], stride=2, padding=1))


def decoder_forward(params: NetworkParams, features: Tensor) -> Tensor:
    """Encoder features -> class logits at input resolution (x8 upsampling)."""
    if features.data.ndim != 4:
        raise ShapeError(f"decoder_forward expects NCHW features, got {features.data.shape}")
    x = relu(
        conv2d(upsample_nearest(features, 2), params["up1_w"], params["up1_b"], stride=1, padding=1)
    )
    x = relu(conv2d(upsample_nearest(x, 2), params["up2_w"], params["up2_b"], stride=1, padding=1))
    x = relu(conv2d(upsample_nearest(x, 2), params["up3_w"], params["up3_b"], stride=1, padding=1))
    return conv2d(x, params["head_w"], params["head_b"], stride=1, padding=0)


def _disc_tail(params: NetworkParams, x: Tensor, slope: float) -> Tensor:
    x = leaky_relu(linear(flatten(x), params["fc1_w"], params["fc1_b"]), slope)
    return linear(x, params["fc2_w"], params["fc2_b"])


def edge_disc_forward(params: NetworkParams, edge_map: Tensor, slope: float = 0.2) -> Tensor:
    """Edge map [N,1,H,W] -> one raw domain logit per image."""
    _check_image(edge_map, 1, 16, "edge_disc_forward")
    x = leaky_relu(conv2d(edge_map, params["conv1_w"], params["conv1_b"], stride=2, padding=1), slope)
    x = leaky_relu(conv2d(x, params["conv2_w"], params["conv2_b"], stride=2, padding=1), slope)
    x = leaky_relu(conv2d(x, params["conv3_w"], params["conv3_b"], stride=2, padding=1), slope)
    x = leaky_relu(conv2d(x, params["conv4_w"], params["conv4_b"], stride=2, padding=1), slope)
    return _disc_tail(params, x, slope)


def feat_disc_forward(params: NetworkParams, features: Tensor, slope: float = 0.2) -> Tensor:
    """Encoder features [N,F,h,w] -> one raw domain logit per image."""
    if features.data.ndim != 4:
        raise ShapeError(f"feat_disc_forward expects NCHW features, got {features.data.shape}")
    x = leaky_relu(conv2d(features, params["conv1_w"], params["conv1_b"], stride=2, padding=1), slope)
    x = leaky_relu(conv2d(x, params["conv2_w"], params["conv2_b"], stride=2, padding=1), slope)
    x = leaky_relu(conv2d(x, params["conv3_w"], params["conv3_b"], stride=1, padding=1), slope)
    return _disc_tail(params, x, slope)
