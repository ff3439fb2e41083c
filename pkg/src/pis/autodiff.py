"""Minimal dense-tensor reverse-mode differentiation with an Adam step.

Values are float64 numpy arrays.  Every operation records a backward
rule on a per-call tape (the closure graph hanging off each Tensor);
`backward(loss)` runs reverse accumulation from a scalar loss.  A tape
is single-threaded; independent tapes can run on independent threads.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array plus the backward rule that produced it."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_rule", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_rule = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad}{tag})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _result(value, parents, rule):
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_rule = rule
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # Copy: g may be a view into another tensor's gradient.
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.value + b.value, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.value - b.value, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)

    def rule(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _result(a.value * b.value, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)

    def rule(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value ** 2), b.shape))

    return _result(a.value / b.value, (a, b), rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} and {b.shape}")

    def rule(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _result(a.value @ b.value, (a, b), rule)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.value))
    return _result(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _result(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return _result(y, (a,), lambda g: _accumulate(a, g * 0.5 / y))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _result(y, (a,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tensors, rule)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        g_arr = np.asarray(g)
        if axis is not None and not keepdims:
            g_arr = np.expand_dims(g_arr, axis)
        _accumulate(a, np.broadcast_to(g_arr, a.shape).copy())

    return _result(a.value.sum(axis=axis, keepdims=keepdims), (a,), rule)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.value.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


class ScatterPlan:
    """Precomputed sort order turning scatter-add into contiguous reductions.

    Build once per index array and reuse across gathers: sorting dominates
    the cost and ``np.add.reduceat`` then runs at memcpy speed.
    """

    def __init__(self, index: np.ndarray, n_rows: int):
        idx = np.asarray(index, dtype=np.int64)
        self.index = idx
        self.n_rows = n_rows
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
        self.starts = np.concatenate([[0], boundaries])
        self.row_ids = sorted_idx[self.starts]

    def scatter_add(self, g: np.ndarray, out_shape) -> np.ndarray:
        acc = np.zeros(out_shape, dtype=np.float64)
        acc[self.row_ids] = np.add.reduceat(g[self.order], self.starts, axis=0)
        return acc


def gather_rows(a, index, plan: ScatterPlan | None = None) -> Tensor:
    """Rows of a 2-D (or 1-D) tensor by integer index; scatter-add backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def rule(g):
        if not a.requires_grad:
            return
        if plan is not None:
            acc = plan.scatter_add(g, a.value.shape)
        else:
            acc = np.zeros_like(a.value)
            np.add.at(acc, idx, g)
        _accumulate(a, acc)

    return _result(a.value[idx], (a,), rule)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by segment_ids."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment ids cover {seg.shape[0]} rows but tensor has {a.shape[0]}")
    out_shape = (num_segments,) + a.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out, seg, a.value)
    return _result(out, (a,), lambda g: _accumulate(a, g[seg]))


def matrix_inverse(a) -> Tensor:
    """Inverse of a symmetric positive definite matrix via Cholesky.

    Asymmetry beyond 1e-10 (relative to the largest entry) or indefiniteness
    is an error; regularization is the caller's job.
    """
    a = as_tensor(a)
    m = a.value
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix_inverse expects a square matrix, got {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > 1e-10 * scale:
        raise ShapeError("matrix_inverse input is not symmetric within 1e-10")
    try:
        cho = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(m).min())
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (smallest eigenvalue ~ {smallest:.3e})") from None
    inv = scipy.linalg.cho_solve(cho, np.eye(m.shape[0]), check_finite=False)
    inv = (inv + inv.T) / 2.0

    def rule(g):
        _accumulate(a, -(inv.T @ g @ inv.T))

    return _result(inv, (a,), rule)


def trace(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace expects a square matrix, got {a.shape}")
    n = a.shape[0]
    return _result(np.trace(a.value), (a,), lambda g: _accumulate(a, g * np.eye(n)))


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss into every reachable leaf."""
    if loss.value.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        raise NonFiniteError("loss is not finite")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad)


def zero_gradients(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
            self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}; step aborted")
        self.step_count += 1
        correct1 = 1.0 - self.beta1 ** self.step_count
        correct2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for i, p in enumerate(self.params):
            key = p.name or f"param{i}"
            out[f"adam.m.{key}"] = self.m[i]
            out[f"adam.v.{key}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam.step"][0])
        for i, p in enumerate(self.params):
            key = p.name or f"param{i}"
            self.m[i] = arrays[f"adam.m.{key}"].copy()
            self.v[i] = arrays[f"adam.v.{key}"].copy()


# ---------------------------------------------------------------------------
# Checkpoint container (flat little-endian binary)
# ---------------------------------------------------------------------------

def save_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """u32 count, then per entry: u32 name length, name, u32 rank, dims, f64 values."""
    chunks = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        a = np.asarray(arr, dtype=np.float64)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.astype("<f8").tobytes())
    return b"".join(chunks)


def load_arrays(data: bytes) -> dict[str, np.ndarray]:
    offset = 0

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, data, offset)
        offset += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += n * 8
        out[name] = values.reshape(dims)
    return out
