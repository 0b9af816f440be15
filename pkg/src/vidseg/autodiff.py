"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the layer primitives the segmentation networks need:
2-D convolution, max pooling, nearest-neighbor upsampling, transposed
convolution, center-crop channel concatenation, relu and sigmoid, plus a
finite-difference gradient checker.

Everything is double precision. Forward functions are pure; calling
``backward`` on a result accumulates gradients into the ``grad`` buffers of
the participating tensors, which must not be shared across threads while
that happens.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape.

    Results of the ops in this module remember their inputs and how to push
    an upstream gradient back to them; ``backward`` walks that graph in
    reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def _needs_grad(self):
        return self.requires_grad or bool(self._parents)

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this tensor.

        ``grad`` seeds the pass; it defaults to 1 for scalar outputs and is
        required otherwise (e.g. a loss gradient over a probability map).
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward on non-scalar output of shape {self.data.shape} "
                    "requires an explicit seed gradient"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} != output shape {self.data.shape}"
                )

        order = _toposort(self)
        _accumulate(self, grad)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Nodes reachable from ``root`` in reverse topological order (iterative)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _make_node(data, parents, backward):
    """Wrap an op result; records the graph only while gradients are enabled."""
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_padding(padding):
    """Normalize to ((top, bottom), (left, right)); ints pad symmetrically."""
    if isinstance(padding, int):
        if padding < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    if min(pt, pb, pl, pr) < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    return (pt, pb), (pl, pr)


def _windows(x, kh, kw, sh, sw):
    # (N, C, H, W) -> (N, C, Ho, Wo, kh, kw) strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _corr_forward(x, w, stride, pads):
    """Cross-correlate x:(N,Cin,H,W) with w:(Cout,Cin,kh,kw) -> (N,Cout,Ho,Wo)."""
    (pt, pb), (pl, pr) = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Cout
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_input_grad(go, w, stride, pads, in_hw):
    """Adjoint of _corr_forward with respect to its input.

    go: (N,Cout,Ho,Wo); w: (Cout,Cin,kh,kw); returns (N,Cin,H,W) for the
    unpadded input size ``in_hw``.
    """
    n, _, ho, wo = go.shape
    _, cin, kh, kw = w.shape
    (pt, pb), (pl, pr) = pads
    h, wid = in_hw
    hp, wp = h + pt + pb, wid + pl + pr
    # dilate by the stride, pad by kernel-1, correlate with the flipped kernel
    gz = np.zeros(
        (n, go.shape[1], (ho - 1) * stride + 1 + 2 * (kh - 1), (wo - 1) * stride + 1 + 2 * (kw - 1))
    )
    gz[:, :, kh - 1 : kh - 1 + (ho - 1) * stride + 1 : stride,
       kw - 1 : kw - 1 + (wo - 1) * stride + 1 : stride] = go
    win = _windows(gz, kh, kw, 1, 1)
    wf = w[:, :, ::-1, ::-1]
    part = np.tensordot(win, wf, axes=([1, 4, 5], [0, 2, 3]))  # N,covh,covw,Cin
    covh, covw = (ho - 1) * stride + kh, (wo - 1) * stride + kw
    dxp = np.zeros((n, cin, hp, wp))
    dxp[:, :, :covh, :covw] = part.transpose(0, 3, 1, 2)
    return dxp[:, :, pt : pt + h, pl : pl + wid]


def _corr_weight_grad(x, go, stride, pads, kh, kw):
    """Gradient of _corr_forward with respect to w: returns (Cout,Cin,kh,kw)."""
    (pt, pb), (pl, pr) = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(x, kh, kw, stride, stride)
    return np.tensordot(go, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x, w, b, stride: int = 1, padding=0):
    """2-D cross-correlation with per-output-channel bias.

    x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout,). ``padding`` is an int
    for symmetric zero padding or ((top,bottom),(left,right)).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {w.shape[1]} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pads = _norm_padding(padding)
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    if h + sum(pads[0]) < kh or wid + sum(pads[1]) < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded input {h + sum(pads[0])}x{wid + sum(pads[1])}"
        )

    out = _corr_forward(x.data, w.data, stride, pads) + b.data[None, :, None, None]
    xd, wd = x.data, w.data

    def backward(go):
        if x._needs_grad():
            _accumulate(x, _corr_input_grad(go, wd, stride, pads, (h, wid)))
        if w._needs_grad():
            _accumulate(w, _corr_weight_grad(xd, go, stride, pads, kh, kw))
        if b._needs_grad():
            _accumulate(b, go.sum(axis=(0, 2, 3)))

    return _make_node(out, (x, w, b), backward)


def transposed_conv2d(x, w, b, stride: int = 1):
    """Transposed convolution: the adjoint of ``conv2d`` with zero padding.

    x: (N,Cin,H,W), w: (Cin,Cout,kh,kw), b: (Cout,). Output spatial size is
    (H-1)*stride + kh. For a shared weight array,
    <conv2d(x, w), y> == <x, transposed_conv2d(y, w)> holds exactly.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {w.shape[0]} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} output channels")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    n, cin, h, wid = x.shape
    _, cout, kh, kw = w.shape
    out_hw = ((h - 1) * stride + kh, (wid - 1) * stride + kw)
    zero = ((0, 0), (0, 0))
    out = _corr_input_grad(x.data, w.data, stride, zero, out_hw) + b.data[None, :, None, None]
    xd, wd = x.data, w.data

    def backward(go):
        if x._needs_grad():
            _accumulate(x, _corr_forward(go, wd, stride, zero))
        if w._needs_grad():
            _accumulate(w, _corr_weight_grad(go, xd, stride, zero, kh, kw))
        if b._needs_grad():
            _accumulate(b, go.sum(axis=(0, 2, 3)))

    return _make_node(out, (x, w, b), backward)


def maxpool2d(x, window: int = 2, stride: int = 2):
    """Max pooling; gradient flows only to each window's argmax.

    Ties go to the first element in row-major scan order within the window.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} exceeds spatial extent {h}x{w}")
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")

    win = _windows(x.data, window, window, stride, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(go):
        if not x._needs_grad():
            return
        dx = np.zeros((n, c, h, w))
        if stride == window and h % window == 0 and w % window == 0:
            # non-overlapping windows: scatter via a dense one-hot block layout
            blocks = np.zeros((n, c, ho, wo, window * window))
            np.put_along_axis(blocks, idx[..., None], go[..., None], axis=-1)
            dx = (
                blocks.reshape(n, c, ho, wo, window, window)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
        else:
            ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
            rows = hi * stride + idx // window
            cols = wi * stride + idx % window
            np.add.at(dx, (ni, ci, rows, cols), go)
        _accumulate(x, dx)

    return _make_node(out, (x,), backward)


def upsample_nearest(x, factor: int = 2):
    """Replicate each cell into a factor x factor block."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest needs a 4-D input, got {x.shape}")
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(go):
        if x._needs_grad():
            _accumulate(x, go.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make_node(out, (x,), backward)


def crop_concat(skip, up):
    """Center-crop ``skip`` to ``up``'s spatial size, then stack channels.

    Output channels are [skip_cropped, up]. Odd margins use floor offsets.
    """
    skip, up = _as_tensor(skip), _as_tensor(up)
    if skip.data.ndim != 4 or up.data.ndim != 4:
        raise ShapeError(f"crop_concat needs 4-D inputs, got {skip.shape} and {up.shape}")
    n1, c1, h1, w1 = skip.shape
    n2, c2, h2, w2 = up.shape
    if n1 != n2:
        raise ShapeError(f"batch mismatch: {n1} vs {n2}")
    if h1 < h2 or w1 < w2:
        raise ShapeError(f"skip {h1}x{w1} is smaller than upsampled {h2}x{w2}")
    oh, ow = (h1 - h2) // 2, (w1 - w2) // 2
    out = np.concatenate(
        [skip.data[:, :, oh : oh + h2, ow : ow + w2], up.data], axis=1
    )

    def backward(go):
        if skip._needs_grad():
            ds = np.zeros((n1, c1, h1, w1))
            ds[:, :, oh : oh + h2, ow : ow + w2] = go[:, :c1]
            _accumulate(skip, ds)
        if up._needs_grad():
            _accumulate(up, go[:, c1:].copy())

    return _make_node(out, (skip, up), backward)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward(go):
        if x._needs_grad():
            _accumulate(x, go * mask)

    return _make_node(out, (x,), backward)


def _sigmoid(z):
    # piecewise form never exponentiates a large positive argument
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    out = _sigmoid(x.data)

    def backward(go):
        if x._needs_grad():
            _accumulate(x, go * out * (1.0 - out))

    return _make_node(out, (x,), backward)


def elementwise(x, kind: str):
    """Dispatch to an activation by name ('relu' or 'sigmoid')."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def grad_check(fn, inputs, eps: float = 1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps the given tensors to a scalar Tensor. Every coordinate of
    every input is perturbed by +/- eps; the relative error at a coordinate
    is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    tensors = []
    for x in inputs:
        t = x if isinstance(x, Tensor) else Tensor(x)
        t.requires_grad = True
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")
        tensors.append(t)

    out = fn(*tensors)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check closure must produce a scalar Tensor")
    for t in tensors:
        t.grad = None
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        for idx in np.ndindex(t.data.shape):
            orig = t.data[idx]
            t.data[idx] = orig + eps
            fp = float(fn(*tensors).data)
            t.data[idx] = orig - eps
            fm = float(fn(*tensors).data)
            t.data[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(ana[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def tensor_sum(x):
    """Sum all entries to a scalar (handy target for gradient checks)."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def backward(go):
        if x._needs_grad():
            _accumulate(x, np.broadcast_to(go, x.data.shape).astype(np.float64))

    return _make_node(out, (x,), backward)
