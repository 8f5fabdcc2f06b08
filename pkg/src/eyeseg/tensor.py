"""Dense tensors with reverse-mode automatic differentiation.

The operator set is exactly what the segmentation network needs: 2-D
convolutions (full / depthwise / pointwise), batch normalization, ReLU
variants, bilinear resampling, global average pooling, channel softmax,
sigmoid, a bias-free linear map, and a handful of elementwise helpers used
by the loss and the gradient-check probes.

All math runs in float64. Every op that participates in differentiation
records its inputs and a backward rule on the output tensor; ``backward``
on a scalar walks the recorded graph in reverse topological order exactly
once per node. Leaves (tensors created directly with ``requires_grad``)
accumulate into ``.grad`` across calls; interior nodes hold the value from
the most recent pass.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class AutodiffError(RuntimeError):
    """Misuse of the backward machinery (non-scalar loss, detached leaf)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference-mode forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={tuple(self.shape)}{flag}{op})"

    def backward(self):
        """Accumulate gradients on every reachable requires_grad leaf.

        Returns the number of op nodes whose backward rule ran (each runs
        exactly once). Raises for a non-scalar loss or a loss that is not
        connected to any gradient-tracked tensor.
        """
        if self.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.is_leaf() and not self.requires_grad:
            raise AutodiffError("loss is detached: no inputs require gradients")
        tape = Tape.trace(self)
        flowing = {id(self): np.ones_like(self.data)}
        visited_ops = 0
        for node in reversed(tape.nodes):
            grad = flowing.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf():
                if node.requires_grad:
                    node.grad = grad if node.grad is None else node.grad + grad
                continue
            visited_ops += 1
            node.grad = grad
            parent_grads = node._backward_fn(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None:
                    continue
                if not (parent.requires_grad or parent._parents):
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pgrad
                else:
                    flowing[key] = pgrad
        return visited_ops


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    ``nodes`` lists every reachable tensor with inputs before consumers;
    ``ops`` is the subset that was produced by an operation.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @property
    def ops(self):
        return [n for n in self.nodes if not n.is_leaf()]

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def _needs_grad(t):
    return t.requires_grad or bool(t._parents)


def _make(data, parents, backward_fn, op):
    record = _grad_enabled and any(_needs_grad(p) for p in parents)
    out = Tensor(data)
    if record:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    """Elementwise sum of two same-shape tensors (residuals, stream ensemble)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), backward, "mul")


def sum_all(x):
    """Sum every element down to a scalar tensor."""
    x = _as_tensor(x)

    def backward(g):
        return (np.full_like(x.data, float(g)),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum_all")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def relu6(x):
    x = _as_tensor(x)
    mask = (x.data > 0) & (x.data < 6)

    def backward(g):
        return (g * mask,)

    return _make(np.clip(x.data, 0.0, 6.0), (x,), backward, "relu6")


def sigmoid(x):
    x = _as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def softmax_channels(x):
    """Softmax over the channel axis of a [B,C,H,W] tensor, per pixel."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"softmax_channels expects [B,C,H,W], got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - dot),)

    return _make(probs, (x,), backward, "softmax_channels")


def linear(x, weight):
    """Bias-free linear map: [B,Cin] times weight [Cout,Cin] -> [B,Cout]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")

    def backward(g):
        gx = g @ weight.data if _needs_grad(x) else None
        gw = g.T @ x.data if _needs_grad(weight) else None
        return gx, gw

    return _make(x.data @ weight.data.T, (x, weight), backward, "linear")


def mul_channelwise(x, scale):
    """Scale each channel of x [B,C,H,W] by a per-channel gate [B,C]."""
    x, scale = _as_tensor(x), _as_tensor(scale)
    if x.data.ndim != 4 or scale.shape != x.shape[:2]:
        raise ShapeError(f"mul_channelwise: {x.shape} vs scale {scale.shape}")
    s4 = scale.data[:, :, None, None]

    def backward(g):
        gx = g * s4 if _needs_grad(x) else None
        gs = (g * x.data).sum(axis=(2, 3)) if _needs_grad(scale) else None
        return gx, gs

    return _make(x.data * s4, (x, scale), backward, "mul_channelwise")


def global_avg_pool(x):
    """Mean over the spatial dims: [B,C,H,W] -> [B,C]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / area,)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# convolutions


def _out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _window_view(x, kh, kw, stride, pad):
    """Padded sliding windows of x: [B,C,H,W] -> [B,C,OH,OW,kh,kw]."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(dcols, in_shape, kh, kw, stride, pad):
    """Adjoint of _window_view: dcols [B,C,OH,OW,kh,kw] -> grad wrt x."""
    b, c, h, w = in_shape
    oh, ow = dcols.shape[2], dcols.shape[3]
    buf = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        ystop = i + stride * (oh - 1) + 1
        for j in range(kw):
            xstop = j + stride * (ow - 1) + 1
            buf[:, :, i:ystop:stride, j:xstop:stride] += dcols[:, :, :, :, i, j]
    if pad:
        return buf[:, :, pad:pad + h, pad:pad + w]
    return buf


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation of x [B,Cin,H,W] with weight [Cout,Cin,kH,kW].

    No bias term; batch normalization follows every convolution in this
    network. Output spatial dims follow floor((n + 2p - k) / stride) + 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    _validate_conv(x, weight, stride, padding, grouped=False)
    kh, kw = weight.shape[2], weight.shape[3]
    cols = _window_view(x.data, kh, kw, stride, padding)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gw = None
        if _needs_grad(weight):
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if _needs_grad(x):
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            gx = _scatter_windows(dcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return _make(out, (x, weight), backward, "conv2d")


def depthwise_conv2d(x, weight, stride=1, padding=1):
    """Per-channel convolution: x [B,C,H,W] with weight [C,1,kH,kW]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _validate_conv(x, weight, stride, padding, grouped=True)
    kh, kw = weight.shape[2], weight.shape[3]
    kern = weight.data[:, 0]
    cols = _window_view(x.data, kh, kw, stride, padding)
    out = np.einsum("bcyxij,cij->bcyx", cols, kern)

    def backward(g):
        gw = None
        if _needs_grad(weight):
            gw = np.einsum("bcyx,bcyxij->cij", g, cols)[:, None]
        gx = None
        if _needs_grad(x):
            dcols = np.einsum("bcyx,cij->bcyxij", g, kern)
            gx = _scatter_windows(dcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return _make(out, (x, weight), backward, "depthwise_conv2d")


def pointwise_conv2d(x, weight):
    """1x1 convolution: a per-pixel linear map over channels."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be [Cout,Cin,1,1], got {weight.shape}")
    _validate_conv(x, weight, 1, 0, grouped=False)
    w2 = weight.data[:, :, 0, 0]
    out = np.tensordot(x.data, w2, axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gw = None
        if _needs_grad(weight):
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        gx = None
        if _needs_grad(x):
            gx = np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2)
        return gx, gw

    return _make(out, (x, weight), backward, "pointwise_conv2d")


def _validate_conv(x, weight, stride, padding, grouped):
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be [B,C,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv weight must be 4-d, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    if grouped:
        if weight.shape[1] != 1 or weight.shape[0] != x.shape[1]:
            raise ShapeError(
                f"depthwise weight [C,1,kh,kw] must match input channels: "
                f"input {x.shape}, weight {weight.shape}")
    elif weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    kh, kw = weight.shape[2], weight.shape[3]
    if _out_dim(x.shape[2], kh, stride, padding) < 1 or _out_dim(x.shape[3], kw, stride, padding) < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape} at stride {stride}")
    _check_finite(x.data, "conv input")


# ---------------------------------------------------------------------------
# resampling


def _resize_matrix(n_in, n_out):
    """Dense [n_out, n_in] matrix of half-pixel-center bilinear weights."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_resize(x, out_h, out_w):
    """Bilinear resample of x [B,C,H,W] to [B,C,out_h,out_w].

    Half-pixel centers: source coordinate s = (d + 0.5) * in/out - 0.5,
    clamped to [0, in-1]. Separable, so it is two small matrix products;
    the backward pass applies the transposed weights.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear input must be [B,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad target size {out_h}x{out_w}")
    wy = _resize_matrix(x.shape[2], out_h)
    wx = _resize_matrix(x.shape[3], out_w)
    out = np.matmul(np.matmul(wy, x.data), wx.T)

    def backward(g):
        return (np.matmul(np.matmul(wy.T, g), wx),)

    return _make(out, (x,), backward, "bilinear_resize")


def bilinear_upsample(x, scale):
    """Upsample each spatial dim by an integer factor (1 is the identity)."""
    if int(scale) != scale or scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear input must be [B,C,H,W], got {x.shape}")
    return bilinear_resize(x, x.shape[2] * int(scale), x.shape[3] * int(scale))


# ---------------------------------------------------------------------------
# batch normalization


class BNState:
    """Running statistics for one batch-norm layer.

    Stores the batch-biased variance so that stats recalibrated from a
    single pass reproduce train-mode outputs exactly in eval mode.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.count = 0
        self.momentum = momentum
        self.eps = eps

    def reset(self):
        self.mean = np.zeros_like(self.mean)
        self.var = np.ones_like(self.var)
        self.count = 0


def batch_norm(x, gamma, beta, state, mode):
    """Per-channel normalization of x [B,C,H,W] with learnable affine.

    Train mode normalizes by batch statistics and folds them into the
    running stats with ``state.momentum``; eval mode uses the stored stats
    and fails if none were ever recorded.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        if n < 2:
            raise ValueError(f"train-mode batch_norm needs >=2 values per channel, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.mean = (1.0 - m) * state.mean + m * mean
        state.var = (1.0 - m) * state.var + m * var
        state.count += 1
    else:
        if state.count < 1:
            raise ValueError("eval-mode batch_norm before any statistics were recorded")
        mean, var = state.mean, state.var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if _needs_grad(gamma) else None
        gbeta = g.sum(axis=(0, 2, 3)) if _needs_grad(beta) else None
        gx = None
        if _needs_grad(x):
            scale = (gamma.data * inv_std)[:, None, None]
            if mode == "train":
                gmean = g.mean(axis=(0, 2, 3))[:, None, None]
                gproj = (g * xhat).mean(axis=(0, 2, 3))[:, None, None]
                gx = scale * (g - gmean - xhat * gproj)
            else:
                gx = scale * g
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")
