"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` only when one of
their inputs requires a gradient; outside a tape everything runs as plain
numpy. Typical use::

    with Tape() as tape:
        loss = softmax_cross_entropy(model(x), y)
    backward(loss, tape)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError

_PRECISIONS = {32: np.float32, 64: np.float64}
_dtype = np.float32


def set_precision(bits: int) -> None:
    """Select the global float width (32 for training runs, 64 for verification)."""
    global _dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _PRECISIONS[bits]


def get_precision() -> int:
    return 64 if _dtype is np.float64 else 32


def get_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of primitive ops; replayed in reverse by :func:`backward`."""

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple, fn: Callable) -> Tensor:
    """fn(upstream_grad) -> tuple of grads aligned with parents (None to skip)."""
    if Tape._active and any(p.requires_grad for p in parents):
        out.requires_grad = True
        Tape._active[-1].records.append((out, parents, fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf reachable on ``tape``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for out, parents, _ in tape.records:
        produced.add(id(out))
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
            if k not in produced:
                leaves[k] = p
    for k, t in leaves.items():
        g = grads[k].astype(t.data.dtype, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b for x of shape (B, d_in), W (d_in, d_out), b (d_out,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"affine expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    out = Tensor(x.data @ W.data + b.data, dtype=x.data.dtype)

    def fn(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _record(out, (x, W, b), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), dtype=x.data.dtype)
    return _record(out, (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), dtype=x.data.dtype)
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def add(a, b) -> Tensor:
    """Sum of two tensors of identical shape (used to combine scalar losses)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)
    return _record(out, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.data.dtype.type(c), dtype=x.data.dtype)
    return _record(out, (x,), lambda g: (g * c,))


def _check_logits(logits: Tensor):
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D (B, K), got shape {logits.shape}")


def softmax(logits) -> np.ndarray:
    """Row softmax of an array or tensor (no tape)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label], max-shift stabilised."""
    _check_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    rows, grad = _kernels.xent_rows(logits.data, labels)
    out = Tensor(rows.mean(), dtype=logits.data.dtype)
    inv = 1.0 / bsz
    return _record(out, (logits,), lambda g: (grad * (g * inv),))


def kl_divergence(p_logits: Tensor, q_logits) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q)); q is treated as a constant."""
    _check_logits(p_logits)
    q = q_logits.data if isinstance(q_logits, Tensor) else np.asarray(q_logits)
    if q.shape != p_logits.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q.shape}")
    rows, grad = _kernels.kl_rows(p_logits.data, q.astype(p_logits.data.dtype, copy=False))
    out = Tensor(rows.mean(), dtype=p_logits.data.dtype)
    inv = 1.0 / p_logits.shape[0]
    return _record(out, (p_logits,), lambda g: (grad * (g * inv),))


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    state: list,
) -> None:
    """SGD with heavy-ball momentum and coupled L2 decay, in place.

    ``state`` is a list of velocity buffers aligned with ``params``; it is
    filled with zeros on first use.
    """
    if not state:
        state.extend(np.zeros_like(p.data) for p in params)
    if len(state) != len(params):
        raise ContractError(f"{len(state)} velocity buffers for {len(params)} parameters")
    for i, (p, v) in enumerate(zip(params, state)):
        if p.grad is None:
            raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
        _kernels.sgd_update(p.data, p.grad, v, lr, momentum, weight_decay)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
