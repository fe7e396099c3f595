"""Dense numpy-backed tensors with a reverse-mode differentiation tape.

Every value is a row-major contiguous array in a single floating dtype
(32- or 64-bit, a global run setting via :func:`set_default_precision`).
Tensors are immutable after construction; recording happens onto the
thread-local active :class:`Tape`, so independent tapes may run on
independent threads but a single tape must never see concurrent writers.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "GraphError",
    "ShapeError",
    "set_default_precision",
    "default_precision",
    "default_dtype",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "bmm",
    "reshape",
    "transpose",
    "narrow",
    "concat",
    "broadcast_to",
    "reduce_sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "erf",
    "sin",
    "cos",
    "atan2",
    "softmax_lastaxis",
    "l2norm_lastaxis",
    "take_rows",
    "fd_gradient",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _contig(a) -> np.ndarray:
    """C-contiguous view/copy that, unlike ascontiguousarray, keeps 0-d shapes."""
    a = np.asarray(a)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


class GraphError(RuntimeError):
    """Raised on tape/graph contract violations (mixed dtypes, non-scalar loss, ...)."""


_PRECISION = threading.local()


def set_default_precision(bits: int) -> None:
    """Set the global floating precision for newly created tensors (32 or 64)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _PRECISION.bits = bits


def default_precision() -> int:
    return getattr(_PRECISION, "bits", 64)


def default_dtype() -> np.dtype:
    return np.dtype(np.float32 if default_precision() == 32 else np.float64)


class Tensor:
    """Immutable dense array value. Participates in tape recording when one is active."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = _contig(data)
        if arr.dtype not in (np.float32, np.float64):
            raise GraphError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars and ndarrays lift to constants
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, dtype=None) -> Tensor:
    """Build a tensor from array-like data, cast to the run precision by default."""
    return Tensor(np.array(values, dtype=dtype or default_dtype(), copy=True))


def constant(values, dtype=None) -> Tensor:
    return tensor(values, dtype=dtype)


class _Node:
    __slots__ = ("out", "parents", "fwd", "vjp")

    def __init__(self, out, parents, fwd, vjp):
        self.out = out
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp


_TAPES = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_TAPES, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops; backward visits nodes in exact reverse order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_TAPES, "stack", None)
        if stack is None:
            stack = _TAPES.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.stack.pop()

    def replay_matches(self) -> bool:
        """Recompute every node from its recorded parents; True iff bit-identical."""
        for node in self.nodes:
            redo = node.fwd(*(p.data for p in node.parents))
            if redo.dtype != node.out.data.dtype or not np.array_equal(
                redo, node.out.data, equal_nan=True
            ):
                return False
        return True

    def gradients(
        self,
        loss: Tensor,
        wrt: Sequence[Tensor],
        seed: Optional[np.ndarray] = None,
    ) -> list[np.ndarray]:
        """Adjoints of ``loss`` w.r.t. each tensor in ``wrt``.

        ``loss`` must be a single-element tensor unless ``seed`` supplies an
        explicit output adjoint of matching shape. Leaves that the loss never
        touched get zero gradients.
        """
        if seed is None:
            if loss.data.size != 1:
                raise GraphError(
                    f"backward needs a scalar loss, got shape {loss.data.shape}"
                )
            seed = np.ones_like(loss.data)
        else:
            seed = np.asarray(seed, dtype=loss.data.dtype)
            if seed.shape != loss.data.shape:
                raise GraphError("seed adjoint shape must match the loss shape")

        adjoint: dict[int, np.ndarray] = {id(loss): seed}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                acc = adjoint.get(key)
                adjoint[key] = pg if acc is None else acc + pg
        return [
            adjoint.get(id(t), np.zeros_like(t.data)) for t in wrt
        ]


def _lift(x, like: Optional[Tensor]) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise GraphError(
                f"mixed precisions on one graph: {dt} vs {t.data.dtype}"
            )
    return dt


def _record(out_data: np.ndarray, parents: tuple, fwd, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(out, parents, fwd, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b)
    out = a.data + b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x + y,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b)
    out = a.data - b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x - y,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b)
    out = a.data * b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x * y,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x / y,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda x: -x, lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b), _lift(b, a)
    _check_dtypes(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul needs 2-d operands with matching inner extents, "
            f"got {a.shape} x {b.shape}"
        )
    out = a.data @ b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x @ y,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B, m, k] x [B, k, n] -> [B, m, n]."""
    _check_dtypes(a, b)
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm needs [B,m,k] x [B,k,n], got {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _record(
        out,
        (a, b),
        lambda x, y: x @ y,
        lambda g: (
            g @ b.data.transpose(0, 2, 1),
            a.data.transpose(0, 2, 1) @ g,
        ),
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _contig(a.data.reshape(shape))
    return _record(
        out,
        (a,),
        lambda x: _contig(x.reshape(shape)),
        lambda g: (g.reshape(a.data.shape),),
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = _contig(a.data.transpose(axes))
    return _record(
        out,
        (a,),
        lambda x: _contig(x.transpose(axes)),
        lambda g: (_contig(g.transpose(inv)),),
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = tuple(
        slice(start, start + length) if ax == axis else slice(None)
        for ax in range(a.ndim)
    )

    def _vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    out = _contig(a.data[idx])
    return _record(out, (a,), lambda x: _contig(x[idx]), _vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    _check_dtypes(*parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _vjp(g):
        return tuple(
            _contig(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    out = np.concatenate([p.data for p in parts], axis=axis)
    return _record(out, parts, lambda *xs: np.concatenate(xs, axis=axis), _vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _contig(np.broadcast_to(a.data, shape))
    return _record(
        out,
        (a,),
        lambda x: _contig(np.broadcast_to(x, shape)),
        lambda g: (_unbroadcast(g, a.data.shape),),
    )


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def _vjp(g):
        if axis is None:
            gg = g.reshape((1,) * a.data.ndim)
        elif not keepdims:
            gg = np.expand_dims(g, axis)
        else:
            gg = g
        return (_contig(np.broadcast_to(gg, a.data.shape)),)

    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)
    return _record(
        out,
        (a,),
        lambda x: np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype),
        _vjp,
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), np.exp, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), np.log, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), np.sqrt, lambda g: (g * (0.5 / out),))


def erf(a: Tensor) -> Tensor:
    dt = a.data.dtype
    coef = np.asarray(2.0 / np.sqrt(np.pi), dtype=dt)

    def _fwd(x):
        return np.asarray(_erf(x), dtype=dt)

    return _record(
        _fwd(a.data),
        (a,),
        _fwd,
        lambda g: (g * coef * np.exp(-a.data * a.data),),
    )


def sin(a: Tensor) -> Tensor:
    return _record(np.sin(a.data), (a,), np.sin, lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _record(np.cos(a.data), (a,), np.cos, lambda g: (g * -np.sin(a.data),))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise atan2. Gradients at the origin are defined as zero."""
    _check_dtypes(y, x)
    tiny = np.finfo(y.data.dtype).tiny

    def _vjp(g):
        denom = np.maximum(x.data * x.data + y.data * y.data, tiny)
        return (g * x.data / denom, g * -y.data / denom)

    out = np.arctan2(y.data, x.data)
    return _record(out, (y, x), np.arctan2, _vjp)


def softmax_lastaxis(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    if a.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")

    def _fwd(x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    out = _fwd(a.data)

    def _vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (a,), _fwd, _vjp)


def l2norm_lastaxis(a: Tensor) -> Tensor:
    """Euclidean norm along the last axis; zero rows get zero gradient."""

    def _fwd(x):
        return np.sqrt((x * x).sum(axis=-1))

    out = _fwd(a.data)

    def _vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (a.data * (g / safe)[..., None],)

    return _record(out, (a,), _fwd, _vjp)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradient scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take_rows needs integer indices")

    def _vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (full,)

    out = _contig(table.data[idx])
    return _record(out, (table,), lambda x: _contig(x[idx]), _vjp)


# ---------------------------------------------------------------------------
# finite differences (shared oracle helper)


def fd_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.copy()
    for i in range(x.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        flat[i] = (fp - fm) / (2.0 * step)
    return grad
