"""Dense n-d arrays with tape-based reverse-mode differentiation.

Every array the models touch is a Tensor: a numpy buffer plus an optional
node id on a Tape. Operations on tracked tensors append an entry (inputs,
output, local backward rule) to the tape in execution order, so the tape is
topologically sorted by construction and `backward` is a single reverse
sweep. Two precisions are supported: float64 for oracle/test work and
float32 for training throughput.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "pow_const",
    "sigmoid", "tanh", "elu", "softplus", "relu_concat_elu",
    "sum_", "matmul", "dense", "conv2d", "transposed_conv2d",
    "concat", "reshape", "pad", "slice_", "downshift", "rightshift",
    "log_sum_exp", "stop_gradient", "normed_kernel", "finite_diff_check",
]


class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.entries = []          # (out_node, in_nodes, backward_fn)
        self.leaves = {}           # node id -> leaf tensor
        self._n_nodes = 0

    def _new_node(self):
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, data) -> "Tensor":
        """Create a tracked leaf (a differentiable parameter or input)."""
        t = Tensor(np.asarray(data, dtype=self.dtype), tape=self, node=self._new_node())
        self.leaves[t.node] = t
        return t

    def record(self, out_data, inputs, backward_fn) -> "Tensor":
        out = Tensor(out_data, tape=self, node=self._new_node())
        self.entries.append((out.node, tuple(t.node for t in inputs), backward_fn))
        return out


class Tensor:
    """Immutable dense array, optionally tracked on a single tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _resolve(args):
    """Lift array-likes to constants and find the common tape.

    Raises if two tracked arguments live on different tapes (a tensor joins
    at most one active tape).
    """
    tape = None
    out = []
    for a in args:
        t = as_tensor(a)
        if t.tracked:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
        out.append(t)
    if tape is not None:
        out = [t if t.tracked or t.data.dtype == tape.dtype
               else Tensor(t.data.astype(tape.dtype)) for t in out]
    return tape, out


def _emit(tape, out_data, tracked_inputs, backward_fn) -> Tensor:
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, tracked_inputs, backward_fn)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse a numpy broadcast)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    tape, (a, b) = _resolve((a, b))
    out = a.data + b.data
    tracked = [t for t in (a, b) if t.tracked]

    def bwd(g):
        return tuple(_unbroadcast(g, t.data.shape) for t in tracked)

    return _emit(tape, out, tracked, bwd)


def sub(a, b):
    tape, (a, b) = _resolve((a, b))
    out = a.data - b.data
    tracked = [t for t in (a, b) if t.tracked]

    def bwd(g):
        grads = []
        if a.tracked:
            grads.append(_unbroadcast(g, a.data.shape))
        if b.tracked:
            grads.append(_unbroadcast(-g, b.data.shape))
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def mul(a, b):
    tape, (a, b) = _resolve((a, b))
    out = a.data * b.data
    tracked = [t for t in (a, b) if t.tracked]

    def bwd(g):
        grads = []
        if a.tracked:
            grads.append(_unbroadcast(g * b.data, a.data.shape))
        if b.tracked:
            grads.append(_unbroadcast(g * a.data, b.data.shape))
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def div(a, b):
    tape, (a, b) = _resolve((a, b))
    out = a.data / b.data
    tracked = [t for t in (a, b) if t.tracked]

    def bwd(g):
        grads = []
        if a.tracked:
            grads.append(_unbroadcast(g / b.data, a.data.shape))
        if b.tracked:
            grads.append(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def neg(a):
    tape, (a,) = _resolve((a,))
    return _emit(tape, -a.data, [a] if a.tracked else [], lambda g: (-g,))


def exp(a):
    tape, (a,) = _resolve((a,))
    out = np.exp(a.data)
    return _emit(tape, out, [a] if a.tracked else [], lambda g: (g * out,))


def log(a):
    tape, (a,) = _resolve((a,))
    if a.data.dtype == np.float64 and a.data.size and a.data.min() <= 0.0:
        raise ValueError("log of non-positive value (64-bit mode)")
    out = np.log(a.data)
    return _emit(tape, out, [a] if a.tracked else [], lambda g: (g / a.data,))


def sqrt(a):
    tape, (a,) = _resolve((a,))
    out = np.sqrt(a.data)
    return _emit(tape, out, [a] if a.tracked else [], lambda g: (g * 0.5 / out,))


def pow_const(a, p: float):
    tape, (a,) = _resolve((a,))
    out = a.data ** p
    return _emit(tape, out, [a] if a.tracked else [],
                 lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a):
    tape, (a,) = _resolve((a,))
    # stable two-branch evaluation
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(tape, out, [a] if a.tracked else [],
                 lambda g: (g * out * (1.0 - out),))


def tanh(a):
    tape, (a,) = _resolve((a,))
    out = np.tanh(a.data)
    return _emit(tape, out, [a] if a.tracked else [],
                 lambda g: (g * (1.0 - out * out),))


def elu(a):
    tape, (a,) = _resolve((a,))
    x = a.data
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(x > 0, x, ex - 1.0)

    def bwd(g):
        return (g * np.where(x > 0, 1.0, ex),)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def softplus(a):
    """log(1 + e^x), evaluated stably."""
    tape, (a,) = _resolve((a,))
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def relu_concat_elu(a, axis=-1):
    """elu applied to [x, -x] concatenated along `axis` (doubles that extent)."""
    return elu(concat([a, neg(a)], axis=axis))


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    tape, (a,) = _resolve((a,))
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def reshape(a, shape):
    tape, (a,) = _resolve((a,))
    out = a.data.reshape(shape)
    return _emit(tape, out, [a] if a.tracked else [],
                 lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis=-1):
    tape, ts = _resolve(tuple(tensors))
    out = np.concatenate([t.data for t in ts], axis=axis)
    tracked = [t for t in ts if t.tracked]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.tracked:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.append(g[tuple(idx)])
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def slice_(a, key):
    tape, (a,) = _resolve((a,))
    out = a.data[key]

    def bwd(g):
        gin = np.zeros_like(a.data)
        gin[key] = g
        return (gin,)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def pad(a, spec):
    """Zero-pad; spec is ((before, after), ...) per axis, like np.pad."""
    tape, (a,) = _resolve((a,))
    out = np.pad(a.data, spec)

    def bwd(g):
        idx = tuple(slice(b, g.shape[i] - e) for i, (b, e) in enumerate(spec))
        return (g[idx],)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def downshift(a):
    """Insert a zero row at the top, drop the bottom row (axis 1 of BHWC)."""
    tape, (a,) = _resolve((a,))
    x = a.data
    out = np.concatenate([np.zeros_like(x[:, :1]), x[:, :-1]], axis=1)

    def bwd(g):
        return (np.concatenate([g[:, 1:], np.zeros_like(g[:, :1])], axis=1),)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def rightshift(a):
    """Insert a zero column at the left, drop the rightmost (axis 2 of BHWC)."""
    tape, (a,) = _resolve((a,))
    x = a.data
    out = np.concatenate([np.zeros_like(x[:, :, :1]), x[:, :, :-1]], axis=2)

    def bwd(g):
        return (np.concatenate([g[:, :, 1:], np.zeros_like(g[:, :, :1])], axis=2),)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def log_sum_exp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; propagates -inf where every entry is -inf."""
    tape, (a,) = _resolve((a,))
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - m_safe).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = m_safe + np.log(s)
    out_k = np.where(np.isfinite(m), out_k, m)  # all -inf stays -inf
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        w = np.exp(x - out_k)  # softmax weights
        return (g * w,)

    return _emit(tape, out, [a] if a.tracked else [], bwd)


def stop_gradient(a) -> Tensor:
    """Detach from the tape: same values, treated as a constant downstream."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def matmul(a, b):
    """a @ b with b 2-d; a may carry leading batch axes."""
    tape, (a, b) = _resolve((a, b))
    if b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d rhs, got {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data
    tracked = [t for t in (a, b) if t.tracked]

    def bwd(g):
        grads = []
        if a.tracked:
            grads.append(g @ b.data.T)
        if b.tracked:
            ga = a.data.reshape(-1, a.data.shape[-1])
            gg = g.reshape(-1, g.shape[-1])
            grads.append(ga.T @ gg)
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def dense(x, w, b=None):
    """Affine map rows(x) @ w + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"dense: input extent {x.data.shape} does not match weights {w.data.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _conv_out_extent(size, k, s, lo, hi):
    padded = size + lo + hi
    if padded < k:
        raise ValueError(f"conv2d: padded extent {padded} smaller than kernel {k}")
    return (padded - k) // s + 1


def _conv_forward(x, k, stride, padding):
    (pt, pb), (pl, pr) = padding
    kh, kw, ci, co = k.shape
    B, H, W, C = x.shape
    if C != ci:
        raise ValueError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    ho = _conv_out_extent(H, kh, stride, pt, pb)
    wo = _conv_out_extent(W, kw, stride, pl, pr)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((B, ho, wo, co), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            view = xp[:, di:di + stride * (ho - 1) + 1:stride,
                      dj:dj + stride * (wo - 1) + 1:stride, :]
            out += view @ k[di, dj]
    return out, xp, (ho, wo)


def _conv_grad_input(g, k, stride, padding, in_hw, dtype):
    """Adjoint of the convolution w.r.t. its input; also the deconv forward."""
    (pt, pb), (pl, pr) = padding
    kh, kw, ci, co = k.shape
    B, ho, wo, _ = g.shape
    H, W = in_hw
    gxp = np.zeros((B, H + pt + pb, W + pl + pr, ci), dtype=dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride, :] += g @ k[di, dj].T
    return gxp[:, pt:pt + H, pl:pl + W, :]


def _conv_grad_kernel(xp, g, kshape, stride):
    kh, kw, ci, co = kshape
    _, ho, wo, _ = g.shape
    gk = np.zeros(kshape, dtype=g.dtype)
    for di in range(kh):
        for dj in range(kw):
            view = xp[:, di:di + stride * (ho - 1) + 1:stride,
                      dj:dj + stride * (wo - 1) + 1:stride, :]
            gk[di, dj] = np.tensordot(view, g, axes=([0, 1, 2], [0, 1, 2]))
    return gk


def conv2d(x, kernel, stride=1, padding=((0, 0), (0, 0))):
    """Cross-correlation of NHWC input with [kh, kw, cin, cout] kernel.

    `padding` is explicit per edge: ((top, bottom), (left, right)). Output
    spatial extent is floor((in + lo + hi - k) / stride) + 1.
    """
    tape, (x, kernel) = _resolve((x, kernel))
    out, xp, _ = _conv_forward(x.data, kernel.data, stride, padding)
    tracked = [t for t in (x, kernel) if t.tracked]

    def bwd(g):
        grads = []
        if x.tracked:
            grads.append(_conv_grad_input(g, kernel.data, stride, padding,
                                          x.data.shape[1:3], g.dtype))
        if kernel.tracked:
            grads.append(_conv_grad_kernel(xp, g, kernel.data.shape, stride))
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def transposed_conv2d(y, kernel, stride, padding, out_hw):
    """Exact adjoint of conv2d(·, kernel, stride, padding) with input extent out_hw.

    Maps [B, ho, wo, cout] back to [B, H, W, cin] such that
    <conv2d(u), v> == <u, transposed_conv2d(v)> for all u, v.
    """
    tape, (y, kernel) = _resolve((y, kernel))
    kh, kw, ci, co = kernel.data.shape
    B, ho, wo, c = y.data.shape
    if c != co:
        raise ValueError(f"transposed_conv2d: input channels {y.data.shape} do not match kernel {kernel.data.shape}")
    H, W = out_hw
    (pt, pb), (pl, pr) = padding
    if _conv_out_extent(H, kh, stride, pt, pb) != ho or _conv_out_extent(W, kw, stride, pl, pr) != wo:
        raise ValueError(
            f"transposed_conv2d: geometry mismatch, conv of {out_hw} would give "
            f"{(_conv_out_extent(H, kh, stride, pt, pb), _conv_out_extent(W, kw, stride, pl, pr))} not {(ho, wo)}")
    out = _conv_grad_input(y.data, kernel.data, stride, padding, out_hw, y.data.dtype)
    tracked = [t for t in (y, kernel) if t.tracked]

    def bwd(g):
        grads = []
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        if y.tracked:
            gy = np.zeros_like(y.data)
            for di in range(kh):
                for dj in range(kw):
                    view = gp[:, di:di + stride * (ho - 1) + 1:stride,
                              dj:dj + stride * (wo - 1) + 1:stride, :]
                    gy += view @ kernel.data[di, dj]
            grads.append(gy)
        if kernel.tracked:
            gk = np.zeros_like(kernel.data)
            for di in range(kh):
                for dj in range(kw):
                    view = gp[:, di:di + stride * (ho - 1) + 1:stride,
                              dj:dj + stride * (wo - 1) + 1:stride, :]
                    gk[di, dj] = np.tensordot(view, y.data, axes=([0, 1, 2], [0, 1, 2]))
            grads.append(gk)
        return tuple(grads)

    return _emit(tape, out, tracked, bwd)


def normed_kernel(v, g):
    """Weight-normalized kernel g * v / ||v||, norm over all but the last axis."""
    v = as_tensor(v)
    axes = tuple(range(v.data.ndim - 1))
    nrm = sqrt(sum_(mul(v, v), axis=axes, keepdims=True))
    return mul(v, div(g, nrm))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar root; returns {leaf node id -> gradient}.

    Leaves the root does not reach receive zero gradients. Nodes used more
    than once accumulate (multivariate chain rule).
    """
    if root.tape is not tape:
        raise ValueError("root is not on this tape")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    grads = {root.node: np.ones_like(root.data)}
    for out_node, in_nodes, bwd in reversed(tape.entries):
        g = grads.get(out_node)
        if g is None:
            continue
        in_grads = bwd(g)
        for nid, gi in zip(in_nodes, in_grads):
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
        if out_node not in tape.leaves:
            del grads[out_node]

    return {nid: Tensor(grads[nid]) if nid in grads else Tensor(np.zeros_like(t.data))
            for nid, t in tape.leaves.items()}


def grads_for(tape: Tape, root: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient arrays of `root` for a name -> leaf-tensor map."""
    gm = backward(tape, root)
    return {name: gm[t.node].data for name, t in params.items()}


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params: dict[str, np.ndarray], epsilon=1e-4) -> float:
    """Max relative error between f's analytic gradients and central differences.

    `f(params) -> (value, grads)` must be deterministic given its inputs
    (seed any internal randomness per call). Relative error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    _, grads = f(params)
    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            p = {k: (v.copy() if k == name else v) for k, v in params.items()}
            p[name].reshape(-1)[i] = orig + epsilon
            up, _ = f(p)
            p[name].reshape(-1)[i] = orig - epsilon
            dn, _ = f(p)
            fd = (up - dn) / (2.0 * epsilon)
            err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
