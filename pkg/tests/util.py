"""Shared oracles for the test suite.

Everything here is deliberately naive: loops instead of vectorization,
brute force instead of clever algorithms.  These functions are the
independent reference implementations the library is checked against,
so they must stay obviously correct even if slow.
"""

import numpy as np

from edgeuda.tensor import Tape, backward, zero_grads


def numeric_grad(fn, leaves, eps=1e-6):
    """Central finite differences of a scalar-valued ``fn`` w.r.t. each leaf.

    ``fn`` takes no arguments and rereads ``leaf.data`` on every call, so
    perturbing the arrays in place and re-running gives the FD estimate.
    """
    grads = []
    for t in leaves:
        t.data = np.ascontiguousarray(t.data)  # reshape below must be a view
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn()
            flat[i] = orig - eps
            fm = fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def gradcheck(build, leaves, eps=1e-6, tol=1e-3):
    """Compare taped gradients against central differences.

    ``build`` runs the forward pass and returns the scalar loss tensor.
    Returns the worst relative error over all leaf elements; asserts it
    is below ``tol``.  Error is |ad - fd| / max(1, |ad|, |fd|) so tiny
    gradients are judged on an absolute scale.
    """
    zero_grads(leaves)
    with Tape():
        loss = build()
    backward(loss)
    numeric = numeric_grad(lambda: build().item(), leaves, eps=eps)
    worst = 0.0
    for t, ng in zip(leaves, numeric):
        ag = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.maximum(np.abs(ag), np.abs(ng)), 1.0)
        worst = max(worst, float(np.max(np.abs(ag - ng) / denom)))
    assert worst < tol, f"gradcheck failed: max relative error {worst:.3e}"
    return worst


def directional_gradcheck(build, leaves, rng, eps=1e-6, tol=1e-3):
    """FD check along one random direction through all leaves at once.

    For parameter sets too large to probe element by element: draws a
    unit direction v, compares v . grad against the central difference
    of the loss along v.  Two forward passes instead of two per element.
    """
    direction = [rng.standard_normal(t.data.shape) for t in leaves]
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
    direction = [d / norm for d in direction]

    zero_grads(leaves)
    with Tape():
        loss = build()
    backward(loss)
    analytic = sum(
        float((t.grad * d).sum())
        for t, d in zip(leaves, direction)
        if t.grad is not None
    )

    saved = [t.data for t in leaves]
    for t, d in zip(leaves, direction):
        t.data = t.data + eps * d
    fp = build().item()
    for t, s, d in zip(leaves, saved, direction):
        t.data = s - eps * d
    fm = build().item()
    for t, s in zip(leaves, saved):
        t.data = s

    fd = (fp - fm) / (2.0 * eps)
    err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
    assert err < tol, f"directional gradcheck failed: relative error {err:.3e}"
    return err


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Quadruple-loop cross-correlation, the reference for conv2d."""
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for im in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[im, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[im, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


def naive_dice(a, b):
    """2|A n B| / (|A| + |B|) with the both-empty = 1 convention."""
    a = a.astype(bool)
    b = b.astype(bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)

def naive_hausdorff(a, b):
    """Max over both directions of the farthest nearest neighbor, by loops."""
    pa = np.argwhere(a.astype(bool))
    pb = np.argwhere(b.astype(bool))
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float("nan")

    def directed(src, dst):
        worst = 0.0
        for p in src:
            best = min(float(((p - q) ** 2).sum()) for q in dst)
            worst = max(worst, best)
        return worst

    return float(np.sqrt(max(directed(pa, pb), directed(pb, pa))))


def class_boundary(label):
    """Morphological inter-class boundary of an integer label map.

    A pixel is boundary if any 4-neighbor holds a different class.  This
    is the geometric oracle the gradient-based edge extractor is checked
    against: both should trace the same interfaces to within a pixel or so.
    """
    lab = np.asarray(label)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return edge.astype(np.uint8)
