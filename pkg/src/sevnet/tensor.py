"""Dense tensors with reverse-mode automatic differentiation.

Every primitive the video networks need lives here: grouped 3D
convolution, batch normalization, activations, average pooling, the
affine classification head, dropout and the two classification losses.

Arrays are laid out batch-outermost: feature maps are (N, C, T, H, W)
with the channel axis fixed at axis 1. Ops build a graph of `Tensor`
nodes; `backward(scalar)` walks it in reverse topological order and
accumulates gradients into every reachable tensor with
``requires_grad=True``. Calling backward twice without clearing grads
accumulates, by design.

Ops preserve the dtype of their inputs. Gradient checks run everything
in float64; training normally runs in float32.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Conv3dSpec",
    "conv_output_extent",
    "no_grad",
    "count_multiplies",
    "backward",
    "add",
    "mul",
    "concat",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "sigmoid",
    "elementwise",
    "conv3d",
    "batch_norm3d",
    "avg_pool3d",
    "global_avg_pool3d",
    "pool3d",
    "linear",
    "dropout",
    "softmax_cross_entropy",
    "multilabel_bce",
    "loss",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when an operation rejects its operands' shapes."""


# ---------------------------------------------------------------------------
# graph machinery
# ---------------------------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _MulCounter:
    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


_active_counter: _MulCounter | None = None


@contextmanager
def count_multiplies():
    """Count the scalar multiplies executed by conv/affine kernels in scope.

    Only the multiply-accumulate kernels (convolution and the affine
    head) report; normalization, activations, pooling and dropout do
    not. The tally reflects what the kernels actually execute, including
    multiplies against zero padding.
    """
    global _active_counter
    prev = _active_counter
    counter = _MulCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


def _tally(n: int) -> None:
    if _active_counter is not None:
        _active_counter.count += int(n)


class Tensor:
    """A dense numeric array plus the edges needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # convenience arithmetic used by tests and composites
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into t.grad for every reachable tensor.

    ``root`` must hold a single element. Gradients sum over all paths;
    a second call without resetting grads adds another full pass.
    """
    if root.data.size != 1:
        raise ShapeError(
            f"backward requires a scalar root, got shape {root.data.shape}"
        )

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg


# ---------------------------------------------------------------------------
# pointwise / structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), vjp)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.data.shape),)

    return _make(data, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size / max(data.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.data.shape) / denom,)

    return _make(data, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (data > 0),)

    return _make(data, (x,), vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = _sigmoid(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), vjp)


def elementwise(kind: str, x: Tensor) -> Tensor:
    """Pointwise map by name: 'relu' or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class Conv3dSpec:
    """Static description of one grouped 3D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.groups < 1:
            raise ShapeError(f"groups must be positive, got {self.groups}")
        if self.in_channels % self.groups != 0:
            raise ShapeError(
                f"groups={self.groups} does not divide in_channels={self.in_channels}"
            )
        if self.out_channels % self.groups != 0:
            raise ShapeError(
                f"groups={self.groups} does not divide out_channels={self.out_channels}"
            )
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ShapeError(f"bad kernel/stride: {self.kernel}/{self.stride}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    @property
    def kernel_volume(self) -> int:
        kt, kh, kw = self.kernel
        return kt * kh * kw

    def output_shape(self, in_shape) -> tuple[int, ...]:
        """Output shape for an (N, C, T, H, W) input, validating extents."""
        n, c, *spatial = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"channel axis: expected {self.in_channels} channels, got {c}"
            )
        names = ("time", "height", "width")
        out = []
        for name, x, k, s, p in zip(
            names, spatial, self.kernel, self.stride, self.padding
        ):
            o = conv_output_extent(x, k, s, p)
            if o < 1:
                raise ShapeError(
                    f"{name} axis: extent {x} too small for kernel {k} "
                    f"(stride {s}, padding {p})"
                )
            out.append(o)
        return (n, self.out_channels, *out)


def _is_pointwise(w_shape, stride) -> bool:
    return w_shape[2:] == (1, 1, 1) and stride == (1, 1, 1)


# above this, the unrolled-window buffer would thrash memory and the
# kernel falls back to the per-offset accumulation path
_MAX_COL_BYTES = 1 << 29


def _col_bytes(out_sizes, cin_g, kernel, n, itemsize) -> int:
    kt, kh, kw = kernel
    return n * out_sizes[0] * out_sizes[1] * out_sizes[2] * cin_g * kt * kh * kw * itemsize


def _im2col(xp, groups, kernel, stride, out_sizes):
    n, cin = xp.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_sizes
    cin_g = cin // groups
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=(2, 3, 4))
    windows = windows[:, :, ::st, ::sh, ::sw]
    v = windows.reshape(n, groups, cin_g, to, ho, wo, kt, kh, kw)
    v = v.transpose(0, 1, 3, 4, 5, 2, 6, 7, 8)
    return np.ascontiguousarray(v).reshape(
        n, groups, to * ho * wo, cin_g * kt * kh * kw
    )


def _conv3d_forward(xp, w, stride, out_sizes, groups):
    n = xp.shape[0]
    cout, cin_g, kt, kh, kw = w.shape
    og = cout // groups
    if _is_pointwise(w.shape, tuple(stride)):
        # channel mixing only: one batched matmul over contiguous views
        nout = xp.shape[2] * xp.shape[3] * xp.shape[4]
        xv = np.ascontiguousarray(xp).reshape(n, groups, cin_g, nout)
        wk = w.reshape(groups, og, cin_g)
        return np.matmul(wk, xv).reshape(n, cout, *xp.shape[2:])
    st, sh, sw = stride
    to, ho, wo = out_sizes
    nout = to * ho * wo
    kernel = (kt, kh, kw)
    if _col_bytes(out_sizes, cin_g, kernel, n, xp.itemsize) <= _MAX_COL_BYTES:
        cols = _im2col(xp, groups, kernel, stride, out_sizes)
        wmat = w.reshape(groups, og, cin_g * kt * kh * kw)
        acc = cols @ wmat.transpose(0, 2, 1)
        return acc.transpose(0, 1, 3, 2).reshape(n, cout, to, ho, wo)
    xg = xp.reshape(n, groups, cin_g, *xp.shape[2:])
    wg = w.reshape(groups, og, cin_g, kt, kh, kw)
    acc = np.zeros((n, groups, nout, og), dtype=xp.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                xs = xg[:, :, :, i : i + st * to : st, j : j + sh * ho : sh,
                        k : k + sw * wo : sw]
                xm = xs.transpose(0, 1, 3, 4, 5, 2).reshape(n, groups, nout, cin_g)
                acc += xm @ wg[:, :, :, i, j, k].transpose(0, 2, 1)
    return acc.transpose(0, 1, 3, 2).reshape(n, cout, to, ho, wo)


def _conv3d_backward(xp, w, g, stride, out_sizes, groups):
    n = xp.shape[0]
    cout, cin_g, kt, kh, kw = w.shape
    og = cout // groups
    if _is_pointwise(w.shape, tuple(stride)):
        nout = xp.shape[2] * xp.shape[3] * xp.shape[4]
        xv = np.ascontiguousarray(xp).reshape(n, groups, cin_g, nout)
        gv = g.reshape(n, groups, og, nout)
        wk = w.reshape(groups, og, cin_g)
        dw = np.matmul(gv, xv.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        dxp = np.matmul(wk.transpose(0, 2, 1), gv).reshape(xp.shape)
        return dxp, dw
    st, sh, sw = stride
    to, ho, wo = out_sizes
    nout = to * ho * wo
    kernel = (kt, kh, kw)
    if _col_bytes(out_sizes, cin_g, kernel, n, xp.itemsize) <= _MAX_COL_BYTES:
        cols = _im2col(xp, groups, kernel, stride, out_sizes)
        wmat = w.reshape(groups, og, cin_g * kt * kh * kw)
        gm = g.reshape(n, groups, og, nout).transpose(0, 1, 3, 2)
        dw = (
            np.matmul(cols.transpose(0, 1, 3, 2), gm)
            .sum(axis=0)
            .transpose(0, 2, 1)
            .reshape(w.shape)
        )
        dcols = np.matmul(gm, wmat)  # (n, G, nout, cin_g*kvol)
        dcols = dcols.reshape(n, groups, to, ho, wo, cin_g, kt, kh, kw)
        dcols = dcols.transpose(0, 1, 5, 2, 3, 4, 6, 7, 8)
        dxp = np.zeros_like(xp)
        dxg = dxp.reshape(n, groups, cin_g, *xp.shape[2:])
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    dxg[:, :, :, i : i + st * to : st, j : j + sh * ho : sh,
                        k : k + sw * wo : sw] += dcols[..., i, j, k]
        return dxp, dw
    xg = xp.reshape(n, groups, cin_g, *xp.shape[2:])
    gm = (
        g.reshape(n, groups, og, nout).transpose(0, 1, 3, 2).copy()
    )  # (n, G, nout, og)
    dw = np.zeros_like(w)
    dwg = dw.reshape(groups, og, cin_g, kt, kh, kw)
    dxp = np.zeros_like(xp)
    dxg = dxp.reshape(n, groups, cin_g, *xp.shape[2:])
    wg = w.reshape(groups, og, cin_g, kt, kh, kw)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                xs = xg[:, :, :, i : i + st * to : st, j : j + sh * ho : sh,
                        k : k + sw * wo : sw]
                xm = xs.transpose(0, 1, 3, 4, 5, 2).reshape(n, groups, nout, cin_g)
                # (n,G,cin_g,nout) @ (n,G,nout,og) summed over batch
                dwg[:, :, :, i, j, k] = (
                    (xm.transpose(0, 1, 3, 2) @ gm).sum(axis=0).transpose(0, 2, 1)
                )
                contrib = gm @ wg[:, :, :, i, j, k]  # (n, G, nout, cin_g)
                contrib = contrib.transpose(0, 1, 3, 2).reshape(
                    n, groups, cin_g, to, ho, wo
                )
                dxg[:, :, :, i : i + st * to : st, j : j + sh * ho : sh,
                    k : k + sw * wo : sw] += contrib
    return dxp, dw


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (0, 0, 0),
    groups: int = 1,
) -> Tensor:
    """Grouped 3D cross-correlation over (N, Cin, T, H, W).

    The weight is (Cout, Cin/groups, kt, kh, kw); output extents follow
    floor((X + 2p - k) / s) + 1 per axis.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5, got rank {xd.ndim}")
    if wd.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got rank {wd.ndim}")
    n, cin, t, h, w_ = xd.shape
    cout, cin_g, kt, kh, kw = wd.shape
    if cout % groups != 0:
        raise ShapeError(
            f"channel axis: groups={groups} does not divide out_channels={cout}"
        )
    if cin != groups * cin_g:
        raise ShapeError(
            f"channel axis: input has {cin} channels but weight expects "
            f"{groups * cin_g} (groups={groups} x {cin_g})"
        )
    names = ("time", "height", "width")
    out_sizes = []
    for name, size, k, s, p in zip(names, (t, h, w_), (kt, kh, kw), stride, padding):
        o = conv_output_extent(size, k, s, p)
        if o < 1:
            raise ShapeError(
                f"{name} axis: extent {size} too small for kernel {k} "
                f"(stride {s}, padding {p})"
            )
        out_sizes.append(o)
    to, ho, wo = out_sizes
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(
                f"channel axis: bias shape {bias.data.shape} != ({cout},)"
            )

    pt, ph, pw = padding
    if pt or ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    else:
        xp = xd
    out = _conv3d_forward(xp, wd, stride, (to, ho, wo), groups)
    _tally(n * cout * to * ho * wo * cin_g * kt * kh * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    def vjp(g):
        dxp, dw = _conv3d_backward(xp, wd, g, stride, (to, ho, wo), groups)
        if pt or ph or pw:
            dx = dxp[:, :, pt : pt + t, ph : ph + h, pw : pw + w_]
        else:
            dx = dxp
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3, 4))
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the (N, T, H, W) axes.

    Training mode normalizes by batch statistics and updates the running
    estimates in place (exponential moving average, unbiased variance).
    Inference mode normalizes by the running estimates.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"batch_norm3d input must be rank 5, got rank {xd.ndim}")
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"channel axis: scale/shift sized {gamma.data.shape}/{beta.data.shape} "
            f"but input has {c} channels"
        )
    axes = (0, 2, 3, 4)
    br = (1, c, 1, 1, 1)
    m = xd.size // c

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        var_unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var_unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(br)) * inv.reshape(br)
    out = gamma.data.reshape(br) * xhat + beta.data.reshape(br)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(br)
        if training:
            dx = inv.reshape(br) * (
                dxhat
                - dxhat.mean(axis=axes).reshape(br)
                - xhat * (dxhat * xhat).mean(axis=axes).reshape(br)
            )
        else:
            dx = dxhat * inv.reshape(br)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def avg_pool3d(
    x: Tensor,
    kernel: tuple[int, int, int],
    stride: tuple[int, int, int] | None = None,
) -> Tensor:
    """Average pooling over (T, H, W) windows, no padding."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"avg_pool3d input must be rank 5, got rank {xd.ndim}")
    stride = stride or kernel
    kt, kh, kw = kernel
    st, sh, sw = stride
    names = ("time", "height", "width")
    for name, size, k in zip(names, xd.shape[2:], kernel):
        if k > size:
            raise ShapeError(f"{name} axis: pool kernel {k} exceeds extent {size}")
    n, c, t, h, w_ = xd.shape
    to = conv_output_extent(t, kt, st, 0)
    ho = conv_output_extent(h, kh, sh, 0)
    wo = conv_output_extent(w_, kw, sw, 0)
    kvol = kt * kh * kw
    out = np.zeros((n, c, to, ho, wo), dtype=xd.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                out += xd[:, :, i : i + st * to : st, j : j + sh * ho : sh,
                          k : k + sw * wo : sw]
    out /= kvol

    def vjp(g):
        gk = g / kvol
        dx = np.zeros_like(xd)
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    dx[:, :, i : i + st * to : st, j : j + sh * ho : sh,
                       k : k + sw * wo : sw] += gk
        return (dx,)

    return _make(out, (x,), vjp)


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Reduce (T, H, W) to (1, 1, 1) by averaging."""
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(
            f"global_avg_pool3d input must be rank 5, got rank {x.data.ndim}"
        )
    m = x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape) / m,)

    return _make(out, (x,), vjp)


def pool3d(kind: str, x: Tensor, kernel=None, stride=None) -> Tensor:
    """Pooling by name: 'average' (needs kernel) or 'global_average'."""
    if kind == "average":
        if kernel is None:
            raise ValueError("average pooling requires a kernel")
        return avg_pool3d(x, kernel, stride)
    if kind == "global_average":
        return global_avg_pool3d(x)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# affine head, dropout, losses
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ W.T + b for x (N, C), W (K, C), b (K)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError(
            f"linear expects rank-2 operands, got {xd.ndim} and {wd.ndim}"
        )
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"feature axis: input has {xd.shape[1]} features, weight expects "
            f"{wd.shape[1]}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (wd.shape[0],):
            raise ShapeError(
                f"output axis: bias shape {bias.data.shape} != ({wd.shape[0]},)"
            )
    out = xd @ wd.T
    _tally(xd.shape[0] * wd.shape[0] * wd.shape[1])
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        dx = g @ wd
        dw = g.T @ xd
        if bias is not None:
            return dx, dw, g.sum(axis=0)
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, vjp)


def dropout(
    x: Tensor, rate: float, *, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out = x.data * mask

    def vjp(g):
        return (g * mask,)

    return _make(out, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of shifted softmax against integer class targets."""
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got rank {z.ndim}")
    t = np.asarray(targets)
    n, k = z.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} != ({n},)")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("single-label targets must be integer class indices")
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"class index out of range [0, {k})")

    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    probs = np.exp(zs - lse)
    nll = lse[:, 0] - zs[np.arange(n), t]
    out = np.asarray(nll.mean(), dtype=z.dtype)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), t] -= 1.0
        grad *= float(g) / n
        return (grad,)

    return _make(out, (logits,), vjp)


def multilabel_bce(logits: Tensor, targets) -> Tensor:
    """Mean per-class sigmoid cross-entropy against 0/1 target vectors."""
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got rank {z.ndim}")
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"targets shape {y.shape} != logits shape {z.shape}")
    per_elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per_elem.mean(), dtype=z.dtype)

    def vjp(g):
        return ((_sigmoid(z) - y) * (float(g) / z.size),)

    return _make(out, (logits,), vjp)


def loss(kind: str, logits: Tensor, targets) -> Tensor:
    """Classification loss by name."""
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(logits, targets)
    if kind == "multilabel_bce":
        return multilabel_bce(logits, targets)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# tensor dump format
# ---------------------------------------------------------------------------

def save_tensor(path, array) -> None:
    """Write a little-endian float64 dump: u32 rank, u64 extents, raw data."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) < 4:
            raise ValueError(f"{path}: truncated tensor dump header")
        (rank,) = struct.unpack("<I", raw)
        raw = f.read(8 * rank)
        if len(raw) < 8 * rank:
            raise ValueError(f"{path}: truncated tensor dump extents")
        shape = struct.unpack(f"<{rank}Q", raw)
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(f.read(), dtype="<f8")
        if data.size != count:
            raise ValueError(
                f"{path}: expected {count} values for shape {shape}, got {data.size}"
            )
    return data.reshape(shape).copy()
