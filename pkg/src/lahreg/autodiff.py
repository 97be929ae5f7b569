"""Dense float64 tensors with reverse-mode gradients.

Only the operations the attention blocks, the encoder/decoder and the
contrastive loss need are provided. Every op that receives at least one
tensor with ``requires_grad`` records its inputs and a backward closure;
:func:`backward` walks that record in reverse topological order.
"""

import json
import struct

import numpy as np

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# elementwise -----------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    """Elementwise square root; the gradient at 0 is taken as 0."""
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), bw)


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# shape -----------------------------------------------------------------------


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(tensors):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_rows needs at least one tensor")
    widths = {t.shape[1:] for t in ts}
    if len(widths) != 1:
        raise ValueError(f"concat_rows width mismatch: {sorted(widths)}")
    cuts = np.cumsum([t.shape[0] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=0),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=0)),
    )


def concat_cols(tensors):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_cols needs at least one tensor")
    if len({t.shape[0] for t in ts}) != 1 or any(t.ndim != 2 for t in ts):
        raise ValueError("concat_cols needs 2-D tensors with equal row counts")
    cuts = np.cumsum([t.shape[1] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=1),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=1)),
    )


def slice_cols(a, start, stop):
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), bw)


def gather_rows(a, index):
    """Rows ``a[index]``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError("gather_rows index out of bounds")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw)


# reductions ------------------------------------------------------------------


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def min_cols(a):
    """Row-wise minimum over columns; gradient to the first minimizer."""
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError("min_cols expects a non-empty 2-D tensor")
    idx = a.data.argmin(axis=1)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _result(a.data[rows, idx], (a,), bw)


def max_pool_rows(x):
    """Column-wise max over rows.

    Returns
    -------
    (Tensor, ndarray)
        The ``1 x C`` maxima and, per column, the first row attaining it.
    """
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("max_pool_rows expects a non-empty 2-D tensor")
    idx = x.data.argmax(axis=0)
    cols = np.arange(x.shape[1])

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx, cols] = g.reshape(-1)
        return (full,)

    return _result(x.data[idx, cols][None, :], (x,), bw), idx


def segment_argmax(values, segment_ids, n_segments):
    """First row index attaining the column max inside every segment."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("every segment needs at least one row")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sorted_vals = values[order]
    seg_max = np.maximum.reduceat(sorted_vals, starts, axis=0)
    hit = sorted_vals == seg_max[seg[order]]
    rows = np.where(hit, order[:, None], np.iinfo(np.int64).max)
    return np.minimum.reduceat(rows, starts, axis=0)


def segment_max(x, segment_ids, n_segments):
    """Column-wise max of the rows of each segment, shape ``(n_segments, C)``.

    The gradient goes to the first (lowest-index) maximizing row.
    """
    if x.ndim != 2:
        raise ValueError("segment_max expects a 2-D tensor")
    arg = segment_argmax(x.data, segment_ids, n_segments)
    cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)

    def bw(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g
        return (full,)

    return _result(x.data[arg, cols], (x,), bw)


# linear algebra and normalization ----------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, W, b=None):
    """``x @ W + b`` with ``W`` of shape (C_in, C_out)."""
    out = matmul(x, W)
    if b is None:
        return out
    if b.shape[-1] != W.shape[1]:
        raise ValueError("bias width does not match weight output width")
    return add(out, b)


def softmax_rows(x):
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("softmax_rows expects a 2-D tensor with non-empty rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        # centring g first keeps the result exactly zero for row-constant g
        gc = g - g.max(axis=1, keepdims=True)
        return (s * (gc - (gc * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), bw)


def layer_norm_rows(x, gain, bias, eps=LN_EPS):
    """Normalize each row to zero mean and unit variance, then scale/shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("layer_norm_rows expects a 2-D tensor with non-empty rows")
    C = x.shape[1]
    if gain.data.size != C or bias.data.size != C:
        raise ValueError("gain/bias width does not match input width")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.data.reshape(1, C)

    def bw(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        dg = (g * xhat).sum(axis=0).reshape(gain.shape)
        db = g.sum(axis=0).reshape(bias.shape)
        return dx, dg, db

    return _result(xhat * gv + bias.data.reshape(1, C), (x, gain, bias), bw)


def l2_normalize_rows(x, eps=1e-12):
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom

    def bw(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (np.where(norms > eps, (g - y * inner) / denom, g / denom),)

    return _result(y, (x,), bw)


# gradients -------------------------------------------------------------------


class Tape:
    """Operations reachable from an output, in execution order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every participating leaf.

    Returns the :class:`Tape` that was traversed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    return tape


def finite_diff_check(f, x, eps=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. The error for each
    coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f(*xs) if isinstance(x, (list, tuple)) else f(xs[0]))
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = _scalar(f, x, xs)
            flat[k] = orig - eps
            lo = _scalar(f, x, xs)
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[k] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def _scalar(f, x, xs):
    out = f(*xs) if isinstance(x, (list, tuple)) else f(xs[0])
    return float(out.data)


# optimization ----------------------------------------------------------------


class Adam:
    """Adam over a dict of parameter tensors, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# checkpoints -----------------------------------------------------------------

_MAGIC = b"LAHPARAM"


def save_params(path, arrays, metadata=None):
    """Write named float64 arrays as ``magic | u64 header length | JSON | data``.

    The JSON header lists ``name``, ``shape`` and byte ``offset`` (relative
    to the first data byte) per array, plus an optional free-form
    ``metadata`` object. All numbers are little-endian.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = arrays[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        data = np.ascontiguousarray(data, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {"version": 1, "dtype": "<f8", "arrays": entries}
    if metadata is not None:
        header["metadata"] = metadata
    header = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_params(path, with_metadata=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    base = 16 + hlen
    out = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    if with_metadata:
        return out, header.get("metadata")
    return out
