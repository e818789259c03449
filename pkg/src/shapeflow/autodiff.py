"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors hold contiguous float32 buffers. Every operation validates that its
output is finite and, when gradients are enabled, records itself on an
implicit tape (parent links + a vjp closure). The tape is rebuilt on every
forward pass.

Backward rules are themselves expressed with tensor primitives, so gradients
can be re-recorded (``create_graph=True``) and differentiated again. This is
what lets predicted surface normals (gradients of a decoded field w.r.t.
query coordinates) participate in a training loss.
"""

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "backward",
    "grad",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "pow_scalar",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sin",
    "cos",
    "sigmoid",
    "softplus",
    "tsum",
    "mean",
    "broadcast_to",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "slice_axis",
    "gather_rows",
    "scatter_rows",
    "activation",
    "silu",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "bce_with_logits",
    "detach",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_grad_enabled = True
_tid_counter = 0


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _next_tid():
    global _tid_counter
    _tid_counter += 1
    return _tid_counter


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float32 array with an optional gradient slot and tape links."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_tid")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._tid = _next_tid()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _make(data, op, parents, vjp):
    """Create an op output, recording it when any parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float32 else data.astype(np.float32)
    out.grad = None
    out._tid = _next_tid()
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def detach(x):
    return _as_tensor(x).detach()


# ---------------------------------------------------------------------------
# broadcasting helper: reduce a gradient back to a parent's shape
# ---------------------------------------------------------------------------


def _reduce_to(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = _reduce_to(div(g, b), a.shape)
        gb = _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), vjp)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def matmul(a, b):
    """Matrix product; batched when operands carry leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")

    def vjp(g):
        ga = _reduce_to(matmul(g, swapaxes(b, -1, -2)), a.shape)
        gb = _reduce_to(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def pow_scalar(a, p):
    a = _as_tensor(a)
    p = float(p)
    return _make(
        a.data**np.float32(p),
        "pow",
        (a,),
        lambda g: (mul(g, mul(p, pow_scalar(a, p - 1.0))),),
    )


def exp(a):
    a = _as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = _as_tensor(a)
    out = _make(np.sqrt(a.data), "sqrt", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (div(g, mul(2.0, out)),)
    return out


def tanh(a):
    a = _as_tensor(a)
    out = _make(np.tanh(a.data), "tanh", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def sin(a):
    a = _as_tensor(a)
    return _make(np.sin(a.data), "sin", (a,), lambda g: (mul(g, cos(a)),))


def cos(a):
    a = _as_tensor(a)
    return _make(np.cos(a.data), "cos", (a,), lambda g: (neg(mul(g, sin(a))),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    out = _make(_sigmoid_np(a.data), "sigmoid", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a):
    """log(1 + exp(x)), computed without overflow."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(data, "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


def tsum(a, axis=None, keepdims=False):
    """Sum reduction (named to avoid shadowing the builtin)."""
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)
    data = np.asarray(data, dtype=np.float32)

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.ndim for ax in axes)
        if keepdims:
            return (broadcast_to(g, a.shape),)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _make(data, "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(data, "broadcast", (a,), lambda g: (_reduce_to(g, a.shape),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make(
        np.ascontiguousarray(a.data.reshape(shape)),
        "reshape",
        (a,),
        lambda g: (reshape(g, old),),
    )


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        "transpose",
        (a,),
        lambda g: (transpose(g, inv),),
    )


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2 % a.ndim], axes[ax1 % a.ndim]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(
            slice_axis(g, ax, int(offsets[i]), int(offsets[i + 1])) for i in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, "concat", tuple(tensors), vjp)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    ax = axis % a.ndim
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))
    before, after = start, a.shape[ax] - stop
    return _make(
        np.ascontiguousarray(a.data[idx]),
        "slice",
        (a,),
        lambda g: (_pad_axis(g, ax, before, after),),
    )


def _pad_axis(a, axis, before, after):
    a = _as_tensor(a)
    pads = [(0, 0)] * a.ndim
    pads[axis] = (before, after)
    stop = before + a.shape[axis]
    return _make(
        np.pad(a.data, pads),
        "pad",
        (a,),
        lambda g: (slice_axis(g, axis, before, stop),),
    )


def gather_rows(a, indices):
    """Select rows along axis 0 by integer index."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    return _make(
        np.ascontiguousarray(a.data[idx]),
        "gather",
        (a,),
        lambda g: (scatter_rows(g, idx, n),),
    )


def scatter_rows(g, indices, n):
    """Add rows of g into a zero tensor of n rows (adjoint of gather_rows)."""
    g = _as_tensor(g)
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((n,) + g.shape[1:], dtype=np.float32)
    np.add.at(data, idx, g.data)
    return _make(data, "scatter", (g,), lambda gg: (gather_rows(gg, idx),))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def silu(a):
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


def gelu(a):
    """tanh-approximation GELU."""
    a = _as_tensor(a)
    inner = mul(np.float32(np.sqrt(2.0 / np.pi)), add(a, mul(0.044715, pow_scalar(a, 3.0))))
    return mul(mul(0.5, a), add(1.0, tanh(inner)))


def activation(kind, x):
    """Elementwise nonlinearity chosen by name."""
    fns = {"silu": silu, "sigmoid": sigmoid, "gelu": gelu}
    if kind not in fns:
        raise ValueError(f"unknown activation '{kind}'")
    return fns[kind](x)


def softmax_rows(a):
    """Softmax over the last axis (rows), shift-stabilized."""
    a = _as_tensor(a)
    shift = Tensor(a.data.max(axis=-1, keepdims=True))  # constant; softmax is shift-invariant
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row zero-mean unit-variance normalization followed by affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(add(var, float(eps))))
    return add(mul(y, gamma), beta)


def bce_with_logits(logits, targets):
    """Elementwise y*softplus(-x) + (1-y)*softplus(x); stable for any logit."""
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    return add(
        mul(targets, softplus(neg(logits))),
        mul(sub(1.0, targets), softplus(logits)),
    )


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_from(root):
    """Reachable tape nodes in topological order (deterministic postorder)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._tid in visited:
            continue
        visited.add(node._tid)
        stack.append((node, True))
        for p in node._parents:
            if p._tid not in visited:
                stack.append((p, False))
    return order


def _backprop(root, create_graph):
    seed = Tensor(np.ones_like(root.data))
    gradmap = {root._tid: seed}
    order = _topo_from(root)
    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        for node in reversed(order):
            g = gradmap.get(node._tid)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                prev = gradmap.get(p._tid)
                gradmap[p._tid] = pg if prev is None else add(prev, pg)
    return order, gradmap


@contextmanager
def _nullcontext():
    yield


def backward(loss, create_graph=False):
    """Populate .grad on every reachable requires_grad tensor.

    Gradients accumulate across calls; disconnected tensors keep grad None
    (read as zero).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, gradmap = _backprop(loss, create_graph)
    for node in order:
        if not node.requires_grad:
            continue
        g = gradmap.get(node._tid)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.data.copy()
        else:
            node.grad = node.grad + g.data


def grad(output, wrt, create_graph=False):
    """Return d(output)/d(each tensor in wrt) as tensors.

    Does not touch .grad slots. Tensors not reachable from the output get a
    zero gradient. With create_graph=True the returned tensors stay on the
    tape and can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    _, gradmap = _backprop(output, create_graph)
    out = []
    for t in targets:
        g = gradmap.get(t._tid)
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# independent gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of a scalar function, in float64.

    `f` maps a float64 ndarray to a float; `x` may be a Tensor or ndarray.
    The arithmetic here is deliberately independent of the tensor engine.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
