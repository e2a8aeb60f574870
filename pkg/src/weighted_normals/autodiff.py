"""Minimal tensor-level reverse-mode automatic differentiation on numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
vector-Jacobian product (VJP) closure.  The graph is implicit in those
parent links; :meth:`Tensor.backward` orders it topologically and visits
each node once in reverse.

Shapes are explicit.  Binary elementwise ops demand identical shapes; the
only broadcast is the bias add in :func:`add_bias` (and the row scaling in
:func:`scale_rows`, which is a named op rather than implicit broadcasting).
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, NumericError, ParseError, ShapeError

_CHECKED = True
_GRAD_ENABLED = True


def set_checked(flag: bool) -> bool:
    """Toggle finiteness checks at tensor creation; returns the old setting."""
    global _CHECKED
    old, _CHECKED = _CHECKED, bool(flag)
    return old


@contextlib.contextmanager
def checked(flag: bool = True):
    old = set_checked(flag)
    try:
        yield
    finally:
        set_checked(old)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=(), _vjp=None, op="leaf"):
        self.data = _as_float_array(data, dtype)
        if _CHECKED and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values produced by '{op}'")
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = op
        self.grad = np.zeros_like(self.data) if (requires_grad and _vjp is None) else None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise InvalidInput(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp, op=op)
    return Tensor(data, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- linear algebra


def matmul(x, w) -> Tensor:
    """``(..., d) @ (d, e) -> (..., e)``; the right operand must be 2-D."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _make(x.data @ w.data, (x, w), vjp, "matmul")


def add_bias(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add_bias(out, b)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- structure


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, key) -> Tensor:
    """Basic/advanced numpy indexing ``a[key]``."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), vjp, "take")


def gather(x, idx) -> Tensor:
    """Neighbor gather: ``x (B, N, d)``, ``idx (B, N, k)`` -> ``(B, N, k, d)``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape[:2] != x.shape[:2]:
        raise ShapeError(f"gather: x {x.shape} and idx {idx.shape} do not match")
    bsz, n, d = x.shape
    flat = (idx + (np.arange(bsz) * n)[:, None, None]).reshape(-1)
    out = x.data.reshape(bsz * n, d)[flat].reshape(idx.shape + (d,))

    def vjp(g):
        return (_scatter_rows(flat, g.reshape(-1, d), bsz * n).reshape(bsz, n, d),)

    return _make(out, (x,), vjp, "gather")


def _scatter_rows(rows: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[rows[i]] += values[i]`` via bincount (much faster than ``np.add.at``)."""
    d = values.shape[1]
    cols = (rows[:, None] * d + np.arange(d)).reshape(-1)
    out = np.bincount(cols, weights=values.reshape(-1), minlength=n_rows * d)
    return out.reshape(n_rows, d).astype(values.dtype, copy=False)


def gather_max(x, idx) -> Tensor:
    """Fused ``max_pool(gather(x, idx), axis=2)``: ``(B, N, d)`` -> ``(B, N, d)``.

    For every point, the channel-wise maximum over its neighbors' rows.  The
    gradient goes to the first maximal neighbor in ``idx`` order.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape[:2] != x.shape[:2]:
        raise ShapeError(f"gather_max: x {x.shape} and idx {idx.shape} do not match")
    bsz, n, d = x.shape
    flat = (idx + (np.arange(bsz) * n)[:, None, None]).reshape(bsz * n, -1)
    rows = x.data.reshape(bsz * n, d)
    vals = rows[flat]  # (B*N, k, d)
    arg = np.argmax(vals, axis=1)  # (B*N, d)
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    src = np.take_along_axis(flat, arg, axis=1)  # source row for every (point, channel)

    def vjp(g):
        cols = (src * d + np.arange(d)).reshape(-1)
        acc = np.bincount(cols, weights=g.reshape(-1), minlength=bsz * n * d)
        return (acc.reshape(bsz, n, d).astype(g.dtype, copy=False),)

    return _make(out.reshape(bsz, n, d), (x,), vjp, "gather_max")


def expand(a, axis: int, reps: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``reps`` times along it."""
    a = as_tensor(a)
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), reps, axis=ax)
    return _make(out, (a,), lambda g: (g.sum(axis=ax),), "expand")


def scale_rows(f, w) -> Tensor:
    """``f (..., N, d) * w (..., N)[..., None]``: each row scaled by its weight."""
    f, w = as_tensor(f), as_tensor(w)
    if f.shape[:-1] != w.shape:
        raise ShapeError(f"scale_rows: weights {w.shape} do not match rows of {f.shape}")
    return _make(f.data * w.data[..., None], (f, w),
                 lambda g: (g * w.data[..., None], np.sum(g * f.data, axis=-1)), "scale_rows")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_pool(a, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), vjp, "max_pool")


def mean_pool(a, axis: int) -> Tensor:
    return mean(a, axis=axis)


# ---------------------------------------------------------------- vector ops


def l2_normalize(a, eps: float = 1e-8) -> Tensor:
    """Divide by ``max(|a|, eps)`` along the last axis."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = a.data / denom

    def vjp(g):
        radial = np.sum(out * g, axis=-1, keepdims=True)
        return (np.where(big, (g - out * radial) / denom, g / denom),)

    return _make(out, (a,), vjp, "l2_normalize")


def dot(a, b) -> Tensor:
    """Row-wise inner product over the last axis."""
    return sum(mul(a, b), axis=-1)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    return dot(l2_normalize(a, eps), l2_normalize(b, eps))


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable tensors, in insertion order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise InvalidInput(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self, prefix: str | tuple = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def load_arrays(self, arrays: dict):
        for name, value in arrays.items():
            if name not in self._params:
                raise InvalidInput(f"unknown parameter {name!r}")
            p = self._params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(self.dtype, copy=True)
            p.grad = np.zeros_like(p.data)

    def count(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))


class Adam:
    """Adam with bias correction over a subset of a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, names, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            p = self.store[n]
            g = p.grad
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[n] / bc1
            v_hat = self.v[n] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            out[f"{prefix}/m/{n}"] = self.m[n]
            out[f"{prefix}/v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict, t: int):
        self.t = int(t)
        for n in self.names:
            self.m[n] = np.array(arrays[f"{prefix}/m/{n}"], copy=True)
            self.v[n] = np.array(arrays[f"{prefix}/v/{n}"], copy=True)


def adam_step(optimizer: Adam):
    optimizer.step()


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tolerance:g}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name:40s} {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(builder, params, tolerance=1e-4, h=1e-5, floor=None) -> GradCheckReport:
    """Compare backward gradients with central finite differences.

    ``builder()`` must rebuild and return the scalar loss from the current
    parameter values.  ``params`` maps names to leaf tensors (a
    :class:`ParamStore` works).

    The relative-error denominator is floored so that entries inside the
    difference quotient's round-off band (about ``eps * |L| / h``) are judged
    by absolute error.  By default the floor is that band times 1e5, and never
    below 1e-6.
    """
    items = list(params.items())
    for _, p in items:
        p.grad = np.zeros_like(p.data)
    loss = builder()
    loss.backward()
    if floor is None:
        band = np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h
        floor = max(1e-6, 1e5 * band)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in items:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = builder().item()
            flat[i] = orig - h
            f_minus = builder().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        err = relative_error(analytic, numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report


# ---------------------------------------------------------------- serialization

MAGIC = b"WNTENSORS"
FORMAT_VERSION = 1


def save_tensors(path, arrays: dict, meta: dict | None = None):
    """Write named arrays as a little-endian blob behind a JSON text header.

    Layout: ``WNTENSORS <version> <header-bytes>\\n`` then the UTF-8 header
    (one JSON object: tensor table with name/dtype/shape/offset/nbytes plus
    free-form ``meta``) then the raw blob.  Offsets are relative to the blob.
    """
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_VERSION, "tensors": table, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + f" {FORMAT_VERSION} {len(header)}\n".encode("ascii"))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    first = data[:nl].split(b" ") if nl > 0 else []
    if len(first) != 3 or first[0] != MAGIC:
        raise ParseError("not a tensor file", path=path, line=1)
    version, hlen = int(first[1]), int(first[2])
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", path=path, line=1)
    start = nl + 1
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    blob = data[start + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ParseError(f"tensor {entry['name']!r} is truncated", path=path)
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]

