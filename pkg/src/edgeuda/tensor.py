"""Dense float64 tensors with taped reverse-mode differentiation.

Everything runs in double precision on top of numpy.  Operations executed
inside a ``with Tape():`` block record themselves on that tape (a Wengert
list); :func:`backward` replays the tape back to front and accumulates
gradients into the leaf tensors that require them.  There is no broadcasting
beyond the bias add inside ``linear``/``conv2d``: elementwise ops demand
identical shapes, which keeps the correctness surface small.

Tensors are treated as immutable: no op writes into an existing ``data``
buffer, and the optimizer replaces ``data`` wholesale.  Backward closures
therefore capture the forward-time arrays and stay valid even if parameters
are stepped before the backward pass runs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "active_tape",
    "backward",
    "frozen",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "relu",
    "leaky_relu",
    "sigmoid",
    "log",
    "clamp",
    "mean",
    "flatten",
    "linear",
    "conv2d",
    "upsample_nearest",
    "concat_channels",
    "softmax_channels",
    "sgd_momentum_step",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    """The tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeEntry:
    """One recorded op: its inputs, its output, and the backward rule.

    ``needs`` snapshots each input's ``requires_grad`` at record time; the
    backward pass honors the snapshot, so freezing a tensor during the
    forward keeps it frozen for that graph no matter when backward runs.
    """

    __slots__ = ("inputs", "needs", "output", "backward_fn", "name", "tape", "index")

    def __init__(self, inputs, needs, output, backward_fn, name, tape, index):
        self.inputs = inputs
        self.needs = needs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of executed ops.

    Entries are appended in execution order, so each entry's inputs were
    produced by strictly earlier entries (or are leaves): the list is
    topologically sorted by construction and ``backward`` can walk it once,
    back to front.  Tapes are thread-local; independent training runs in
    separate threads never share one.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def release(self) -> None:
        """Drop all recorded entries and unlink their tensors.

        Entries, their output tensors, and the backward closures form
        reference cycles that only the cyclic GC would reclaim; at ~100 MB of
        captured arrays per training step that is an OOM, not a cleanup.
        Callers that are done with a tape (no more backward passes through
        it) release it explicitly so everything frees by refcount.
        """
        for entry in self.entries:
            entry.output.node = None
            entry.inputs = ()
            entry.output = None
            entry.backward_fn = None
        self.entries.clear()


class Tensor:
    """A dense float64 array plus reverse-mode bookkeeping.

    ``node`` is the tape entry that produced this tensor (None for leaves).
    For leaves with ``requires_grad``, ``grad`` accumulates across
    :func:`backward` calls until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut loose from any tape (no grad flows through)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; Tensor-Tensor ops require identical shapes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out.node = None
    return out


def _apply(name: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Finite-check the result, wrap it, and record on the active tape."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = _wrap(out_data)
    tape = active_tape()
    if tape is None:
        return out
    needs = tuple(t.requires_grad for t in inputs)
    if any(needs):
        out.requires_grad = True
        entry = TapeEntry(tuple(inputs), needs, out, backward_fn, name, tape, len(tape.entries))
        out.node = entry
        tape.entries.append(entry)
    return out


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``.grad``.

    Walks the loss's tape once, in reverse recording order; entries off the
    loss's dependency cone receive no output gradient and are skipped.
    Repeated calls without zeroing add up (two calls double the grads).
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    tape, last = loss.node.tape, loss.node.index
    pending: dict[TapeEntry, np.ndarray] = {loss.node: seed}
    for entry in reversed(tape.entries[: last + 1]):
        g = pending.pop(entry, None)
        if g is None:
            continue
        input_grads = entry.backward_fn(g)
        for inp, need, ig in zip(entry.inputs, entry.needs, input_grads, strict=True):
            if ig is None or not need:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, ig)
            else:
                prev = pending.get(inp.node)
                pending[inp.node] = ig if prev is None else prev + ig


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


@contextmanager
def frozen(*tensor_groups):
    """Temporarily clear ``requires_grad`` on the given tensors.

    Used to freeze a discriminator while a generator objective backpropagates
    through it: gradients still flow through the frozen ops to earlier
    tensors, but the frozen leaves accumulate nothing.  What counts is the
    flag at recording time, so ops executed inside the block stay frozen
    even if backward runs after the block exits.
    """
    ts = [t for group in tensor_groups for t in group]
    saved = [t.requires_grad for t in ts]
    for t in ts:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, s in zip(ts, saved):
            t.requires_grad = s


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _apply("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _apply("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    xa, xb = a.data, b.data
    return _apply("mul", xa * xb, (a, b), lambda g: (g * xb, g * xa))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _apply("scale", a.data * s, (a,), lambda g: (g * s,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("shift", a.data + c, (a,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _apply("relu", np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd, s = x.data, float(slope)
    out = np.where(xd > 0, xd, s * xd)
    return _apply("leaky_relu", out, (x,), lambda g: (g * np.where(xd > 0, 1.0, s),))


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) never overflows, so both branches are stable
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    """Natural log; input must be strictly positive (callers clamp first)."""
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log requires strictly positive input; clamp first")
    return _apply("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was in range."""
    xd = x.data
    lo, hi = float(lo), float(hi)
    inside = (xd >= lo) & (xd <= hi)
    return _apply("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a 0-d scalar tensor."""
    xd = x.data
    n = xd.size
    out = np.asarray(xd.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, xd.shape),)

    return _apply("mean", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, K]."""
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError("flatten expects at least 2 dimensions")
    out = xd.reshape(xd.shape[0], -1)
    return _apply("flatten", out, (x,), lambda g: (g.reshape(xd.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along channels; backward splits."""
    ad, bd = a.data, b.data
    if ad.ndim != 4 or bd.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if ad.shape[0] != bd.shape[0] or ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {ad.shape} and {bd.shape}")
    ca = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _apply("concat_channels", out, (a, b), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums over each block."""
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be >= 1")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("upsample_nearest expects an NCHW tensor")
    n, c, h, w = xd.shape
    out = np.broadcast_to(xd[:, :, :, None, :, None], (n, c, h, f, w, f))
    out = np.ascontiguousarray(out).reshape(n, c, h * f, w * f)

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _apply("upsample_nearest", out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,K] @ weight[M,K]^T + bias[M] -> [N,M]."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or wd.ndim != 2 or bd.ndim != 1:
        raise ShapeError("linear expects x[N,K], weight[M,K], bias[M]")
    if xd.shape[1] != wd.shape[1] or bd.shape[0] != wd.shape[0]:
        raise ShapeError(
            f"linear: x{xd.shape}, weight{wd.shape}, bias{bd.shape} are inconsistent"
        )
    out = xd @ wd.T + bd

    def bwd(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _apply("linear", out, (x, weight, bias), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, odd kernels, zero padding.

    Output spatial size is (H + 2*padding - kh)//stride + 1.  Implemented as
    im2col + one GEMM; the backward rule reuses the materialized columns for
    the weight gradient and scatter-adds for the input gradient.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or wd.ndim != 4 or bd.ndim != 1:
        raise ShapeError("conv2d expects x[N,C,H,W], weight[Co,Ci,kh,kw], bias[Co]")
    n, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    stride, padding = int(stride), int(padding)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if bd.shape[0] != cout:
        raise ShapeError(f"conv2d: bias length {bd.shape[0]} != {cout} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output dims for input {h}x{w}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = (cols @ wmat.T + bd).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gb = gm.sum(axis=0)
        gw = (gm.T @ cols).reshape(wd.shape)
        # scatter-add in channels-last layout so both sides of the += keep a
        # contiguous inner axis, then transpose once
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[
                    :, :, :, :, i, j
                ]
        gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw, gb

    return _apply("conv2d", out, (x, weight, bias), bwd)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an NCHW tensor."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("softmax_channels expects an NCHW tensor")
    if xd.shape[1] < 2:
        raise ShapeError("softmax_channels needs at least 2 channels")
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _apply("softmax_channels", s, (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float):
    """v <- momentum*v + g;  p <- p - lr*v.

    ``velocities`` is a mutable list of arrays owned by the caller, updated in
    place (by element replacement).  Parameter data buffers are replaced, not
    mutated, so any recorded tape stays valid.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for i, (p, g) in enumerate(zip(params, grads, strict=True)):
        v = momentum * velocities[i] + g
        velocities[i] = v
        p.data = p.data - lr * v
    return params
