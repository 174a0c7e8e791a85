"""Dense float64 arrays with a reverse-mode differentiation tape.

Only the operations needed by the segmentation networks and the training
objective are provided. Binary operations require identical shapes; the
single exception is a 0-d tensor (or Python number) combined with a tensor.

Every op records its parents and a vector-Jacobian closure on the output
node. Node ids increase monotonically with creation time, so sorting the
ancestors of a root by id yields a topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "tensor", "parameter", "no_grad", "is_grad_enabled",
    "backward", "build_tape",
    "add", "sub", "mul", "div", "neg", "scalar_mul", "square", "abs_", "sqrt",
    "exp", "log_safe", "relu", "sigmoid", "reduce", "sum_", "mean",
    "reshape", "concat", "index_select", "repeat_channels", "channel_slice",
    "conv3d", "upsample_nearest", "downsample_nearest", "softmax_channels",
    "group_norm",
    "DimensionError", "NonFiniteError", "GradientAccumulationError",
]

_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradientAccumulationError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op",
                 "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if not self.is_leaf else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


@dataclass
class Tape:
    """Nodes reachable from a root, in creation (topological) order."""
    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def build_tape(root: Tensor) -> Tape:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        for p in node._parents:
            assert p._id < node._id, "tape cycle"
            stack.append(p)
    return Tape(sorted(seen.values(), key=lambda n: n._id))


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Leaves must have ``grad is None`` beforehand; a second call without
    resetting raises instead of silently accumulating.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("root does not depend on any tensor requiring grad")
    tape = build_tape(root)
    stale = [n for n in tape.leaves() if n.grad is not None]
    if stale:
        names = ", ".join(str(n.name or n._id) for n in stale[:5])
        raise GradientAccumulationError(
            f"{len(stale)} leaves already hold gradients ({names}); reset them first")
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "add")
    return _make(x.data + y.data, (x, y),
                 lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)), "add")


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "sub")
    return _make(x.data - y.data, (x, y),
                 lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)), "sub")


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "mul")
    return _make(x.data * y.data, (x, y),
                 lambda g: (_unbroadcast(g * y.data, x.shape),
                            _unbroadcast(g * x.data, y.shape)), "mul")


def div(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_shapes(x, y, "div")
    out = x.data / y.data

    def vjp(g):
        gx = g / y.data
        return (_unbroadcast(gx, x.shape), _unbroadcast(-gx * out, y.shape))

    return _make(out, (x, y), vjp, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scalar_mul(x: Tensor, a: float) -> Tensor:
    a = float(a)
    return _make(x.data * a, (x,), lambda g: (g * a,), "scalar_mul")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,), "abs")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log_safe(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Natural log of ``max(x, eps)``; zero gradient where the floor is active."""
    if not eps > 0:
        raise ValueError(f"log_safe needs eps > 0, got {eps}")
    live = x.data > eps
    clamped = np.where(live, x.data, eps)
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log_safe")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None or axes == "all":
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if not axes:
        raise ValueError("reduce: axis set must be non-empty (use 'all' for a full reduction)")
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return axes


def reduce(x: Tensor, kind: str = "sum", axes=None) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if kind == "sum":
        scale = 1.0
    elif kind == "mean":
        scale = 1.0 / count
    else:
        raise ValueError(f"reduce kind must be 'sum' or 'mean', got {kind!r}")
    out = x.data.sum(axis=ax) * scale
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept) * scale, x.shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, f"reduce_{kind}")


def sum_(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "sum", axes)


def mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "mean", axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, vjp, "concat")


def index_select(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), vjp, "index_select")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), vjp, "channel_slice")


def repeat_channels(x: Tensor, count: int) -> Tensor:
    """Tile a single-channel ``[N,1,...]`` tensor to ``count`` channels."""
    if x.ndim < 2 or x.shape[1] != 1:
        raise DimensionError(f"repeat_channels: axis 1 must have extent 1, got {x.shape}")
    return _make(np.repeat(x.data, count, axis=1), (x,),
                 lambda g: (g.sum(axis=1, keepdims=True),), "repeat_channels")


# ---------------------------------------------------------------------------
# volumetric ops, layout [N, C, D, H, W]

def _check_5d(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{op}: expected [N,C,D,H,W], got {x.ndim} axes {x.shape}")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """3D cross-correlation with cubic odd kernels."""
    _check_5d(x, "conv3d")
    if kernel.ndim != 5:
        raise DimensionError(f"conv3d: kernel must be [Cout,Cin,k,k,k], got {kernel.shape}")
    n, cin, d, h, w = x.shape
    cout, kcin, k, k2, k3 = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv3d: input channels (axis 1) {cin} != kernel in-channels (axis 1) {kcin}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise DimensionError(f"conv3d: kernel spatial axes 2-4 must be equal and odd, got {kernel.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
    if padding == "same":
        p = k // 2
    elif padding == "valid":
        p = 0
        bad = [ax for ax, e in zip("DHW", (d, h, w)) if e < k]
        if bad:
            raise DimensionError(f"conv3d: spatial axes {bad} smaller than kernel {k} under valid padding")
    else:
        raise ValueError(f"conv3d: padding must be 'same' or 'valid', got {padding!r}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({cout},)")

    if k == 1 and stride == 1:
        return _pointwise_conv(x, kernel, bias)
    xp = _pad3(x.data, p)
    dp, hp, wp = xp.shape[2:]
    cols = _im2col(xp, k, stride)  # [N, Do, Ho, Wo, Cin*k^3]
    do, ho, wo = cols.shape[1:4]
    kk = cin * k ** 3
    cols = cols.reshape(-1, kk)
    wmat = kernel.data.reshape(cout, kk)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, do, ho, wo, cout).transpose(0, 4, 1, 2, 3))

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad and stride == 1:
            # full correlation of the output gradient with the flipped, transposed kernel
            gcols = _im2col(_pad3(g, k - 1 - p), k, 1).reshape(-1, cout * k ** 3)
            wflip = kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(cin, -1)
            gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, d, h, w, cin).transpose(0, 4, 1, 2, 3))
        elif x.requires_grad:
            # [Cin, k, k, k, N, Do, Ho, Wo]; scatter into a channel-major padded buffer
            gc = (wmat.T @ g2.T).reshape(cin, k, k, k, n, do, ho, wo)
            gxp = np.zeros((cin, n, dp, hp, wp))
            span = [(e - 1) * stride + 1 for e in (do, ho, wo)]
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, :, a:a + span[0]:stride, b:b + span[1]:stride, c:c + span[2]:stride] += gc[:, a, b, c]
            gx = np.ascontiguousarray(gxp[:, :, p:p + d, p:p + h, p:p + w].transpose(1, 0, 2, 3, 4))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, vjp, "conv3d")


def _pad3(v: np.ndarray, p: int) -> np.ndarray:
    return np.pad(v, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else v


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Rows of k^3 patches: [N, Do, Ho, Wo, C*k^3] from a padded [N, C, D, H, W] array."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    if stride != 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    n, c, do, ho, wo = win.shape[:5]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n, do, ho, wo, c * k ** 3)


def _pointwise_conv(x: Tensor, kernel: Tensor, bias: Tensor | None) -> Tensor:
    n, cin = x.shape[:2]
    cout = kernel.shape[0]
    wmat = kernel.data.reshape(cout, cin)
    xm = x.data.reshape(n, cin, -1)
    out = wmat @ xm
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape((n, cout) + x.shape[2:])

    def vjp(g):
        gm = g.reshape(n, cout, -1)
        gk = (gm @ xm.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = (wmat.T @ gm).reshape(x.shape) if x.requires_grad else None
        if bias is None:
            return (gx, gk)
        return (gx, gk, gm.sum(axis=(0, 2)))

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, vjp, "conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _check_5d(x, "upsample_nearest")
    if factor != 2:
        raise ValueError(f"upsample_nearest supports factor 2 only, got {factor}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    n, c, d, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), vjp, "upsample_nearest")


def downsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Keep the first voxel of each ``factor``-cube (top-left-corner sampling)."""
    _check_5d(x, "downsample_nearest")
    bad = [ax for ax, e in zip("DHW", x.shape[2:]) if e % factor]
    if bad:
        raise DimensionError(f"downsample_nearest: axes {bad} not divisible by {factor}")
    sl = (slice(None), slice(None)) + (slice(None, None, factor),) * 3

    def vjp(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), vjp, "downsample_nearest")


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] < 2:
        raise DimensionError(f"softmax_channels needs at least 2 channels on axis 1, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax_channels: non-finite logits")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax_channels")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over (channels-in-group, spatial) per sample, then per-channel affine."""
    if x.ndim < 3:
        raise DimensionError(f"group_norm expects [N,C,...], got {x.shape}")
    if not eps > 0:
        raise ValueError(f"group_norm needs eps > 0, got {eps}")
    n, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels (axis 1) not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    spatial = x.shape[2:]
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    cshape = (1, c) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def vjp(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(cshape)).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape), ggamma, gbeta)

    return _make(out, (x, gamma, beta), vjp, "group_norm")

