"""Dense float64 tensors with tape-based reverse-mode autodiff.

Just enough array machinery to define, train, and differentiate the toy
diffusion transformer: elementwise arithmetic with last-axis broadcasting,
(optionally stacked) matrix products, layer normalization, row softmax,
silu, reductions, and a reverse-mode `grad_of`.

Every public operation checks its result for NaN/Inf and raises
`NonFiniteError` instead of propagating garbage. Recording happens only
when an input participates in the graph (`requires_grad` or derived from
such a tensor) and grad mode is on; `no_grad()` turns recording off for
inference-heavy code paths.
"""

from __future__ import annotations

import contextlib
import ctypes
from typing import Callable, Iterable, Sequence

import numpy as np

# The training loop churns through multi-MB temporaries; with glibc's default
# thresholds every one of them is mmap'd in and returned to the OS on free,
# and the page faults dominate the step time. Keeping big blocks on the heap
# is a 5-10x win. Best effort: other allocators just skip this.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 28)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):
    pass


class TensorError(Exception):
    """Base class for numerics failures."""


class ShapeMismatchError(TensorError):
    """Operands have incompatible shapes."""


class NonFiniteError(TensorError):
    """An operation produced (or was given) NaN or Inf."""


class GradientError(TensorError):
    """grad_of was called with an unusable loss."""


_grad_enabled = True
# Monotone recording counter: every node gets a sequence number larger than
# all of its inputs', which makes descending order a valid reverse-topo walk.
_seq_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d float64 array, optionally tracked on the autodiff tape.

    `data` exposes the flat row-major buffer; `array` is the shaped view
    used by the operations. Tensors are immutable after construction except
    for in-place optimizer updates on leaf parameters.
    """

    __slots__ = ("array", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None,
                 _validate: bool = True):
        global _seq_counter
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        _seq_counter += 1
        self._seq = _seq_counter

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def tolist(self):
        return self.array.tolist()

    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Tensor":
        return Tensor(self.array)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.float64(-1.0)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _tracked(*inputs: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._backward is not None for t in inputs)


def _node(out_array: np.ndarray, inputs: tuple, backward,
          check: bool = True) -> Tensor:
    # check=False only for value-preserving ops (reshape, transpose, slices)
    # whose inputs were already validated
    if check and not np.all(np.isfinite(out_array)):
        raise NonFiniteError("operation produced a non-finite value")
    if backward is not None and _tracked(*inputs):
        return Tensor(out_array, requires_grad=True,
                      _parents=inputs, _backward=backward, _validate=False)
    return Tensor(out_array, _validate=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.array + b.array
    except ValueError:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}") from None

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.array - b.array
    except ValueError:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}") from None

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.array * b.array
    except ValueError:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}") from None

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.array, a.shape))
        acc(b, _unbroadcast(g * a.array, b.shape))

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b.

    Supports 2-D operands, and stacked leading axes on either side as long
    as the other operand is 2-D (the stacked side is collapsed into a single
    GEMM). Raises ShapeMismatchError naming both shapes on inner-extent or
    rank problems.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: {a.shape} vs {b.shape} (rank < 2)")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul: {a.shape} vs {b.shape} (leading axes)")

    if a.ndim > 2 and b.ndim == 2:
        m = a.shape[-1]
        out = (a.array.reshape(-1, m) @ b.array).reshape(
            a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.array @ b.array

    def backward(g, acc):
        if a.requires_grad or a._backward is not None:
            if b.ndim == 2:
                ga = (g.reshape(-1, b.shape[-1]) @ b.array.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.array, -1, -2), a.shape)
            acc(a, ga)
        if b.requires_grad or b._backward is not None:
            if b.ndim == 2 and a.ndim > 2:
                # collapse stacked axes into one GEMM instead of reducing a
                # large stacked gradient afterwards
                gb = a.array.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.array, -1, -2) @ g, b.shape)
            acc(b, gb)

    return _node(out, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with b broadcast over the leading axes of the result."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim < 2 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"affine: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"affine: bias {b.shape} vs width {w.shape[1]}")
    k, n = w.shape
    out = x.array.reshape(-1, k) @ w.array
    out += b.array
    out = out.reshape(x.shape[:-1] + (n,))

    def backward(g, acc):
        gf = g.reshape(-1, n)
        if x.requires_grad or x._backward is not None:
            acc(x, (gf @ w.array.T).reshape(x.shape))
        if w.requires_grad or w._backward is not None:
            acc(w, x.array.reshape(-1, k).T @ gf)
        if b.requires_grad or b._backward is not None:
            acc(b, gf.sum(axis=0))

    return _node(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    x = _as_tensor(x)
    # exp overflow on the far-negative tail still yields the correct
    # sigmoid limit (1/inf == 0), so silence the warning instead of paying
    # for a branch-free stable formulation
    with np.errstate(over="ignore"):
        sig = np.asarray(np.exp(-x.array))
    sig += 1.0
    np.reciprocal(sig, out=sig)
    out = x.array * sig

    def backward(g, acc):
        u = 1.0 - sig
        u *= x.array
        u += 1.0
        u *= sig
        u *= g
        acc(x, u)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (up to eps).

    No learned affine here; scale and shift live with the caller.
    """
    x = _as_tensor(x)
    n = x.shape[-1] if x.ndim > 0 else 0
    if n < 2:
        raise ShapeMismatchError(f"layer_norm: last axis must be >= 2, got {x.shape}")
    if eps < 0:
        raise ValueError("layer_norm: eps must be nonnegative")
    out, inv = _norm_forward(x.array, eps)

    def backward(g, acc):
        acc(x, _norm_backward(g, out, inv))

    return _node(out, (x,), backward)


def _norm_forward(arr: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = arr.mean(axis=-1, keepdims=True)
    out = arr - mu
    var = (out * out).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out *= inv
    return out, inv


def _norm_backward(g: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    gm = g.sum(axis=-1, keepdims=True)
    gy = np.einsum("...i,...i->...", g, y)[..., None]
    gm /= n
    gy /= n
    gx = g - gm
    gx -= y * gy
    gx *= inv
    return gx


def scale_shift_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                     eps: float = 1e-6) -> Tensor:
    """Fused (1 + gamma) * layer_norm(x) + beta.

    gamma and beta broadcast over every axis but the last; this is the
    modulated-normalization core, fused into one node to keep the training
    loop off the allocator.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[-1] if x.ndim > 0 else 0
    if n < 2:
        raise ShapeMismatchError(
            f"scale_shift_norm: last axis must be >= 2, got {x.shape}")
    if gamma.shape[-1] != n or beta.shape[-1] != n:
        raise ShapeMismatchError(
            f"scale_shift_norm: state {x.shape} vs gamma {gamma.shape}, "
            f"beta {beta.shape}")
    y, inv = _norm_forward(x.array, eps)
    scale = 1.0 + gamma.array
    out = y * scale
    out += beta.array

    def backward(g, acc):
        if beta.requires_grad or beta._backward is not None:
            acc(beta, _unbroadcast(g, beta.shape))
        if gamma.requires_grad or gamma._backward is not None:
            if gamma.ndim == 3 and gamma.shape[-2] == 1 and g.ndim == 3:
                gg = np.einsum("btc,btc->bc", g, y)[:, None, :]
            else:
                gg = _unbroadcast(g * y, gamma.shape)
            acc(gamma, gg)
        if x.requires_grad or x._backward is not None:
            acc(x, _norm_backward(g * scale, y, inv))

    return _node(out, (x, gamma, beta), backward)


def add_scaled(base: Tensor, branch: Tensor, alpha: Tensor) -> Tensor:
    """Fused base + branch * alpha (the modulated residual connection).

    alpha broadcasts over every axis but the last; base and branch must
    share a shape.
    """
    base, branch, alpha = (_as_tensor(base), _as_tensor(branch),
                           _as_tensor(alpha))
    if base.shape != branch.shape:
        raise ShapeMismatchError(
            f"add_scaled: base {base.shape} vs branch {branch.shape}")
    if alpha.shape[-1] != base.shape[-1]:
        raise ShapeMismatchError(
            f"add_scaled: alpha {alpha.shape} vs state {base.shape}")
    out = branch.array * alpha.array
    out += base.array

    def backward(g, acc):
        acc(base, g)
        if branch.requires_grad or branch._backward is not None:
            acc(branch, g * alpha.array)
        if alpha.requires_grad or alpha._backward is not None:
            if alpha.ndim == 3 and alpha.shape[-2] == 1 and g.ndim == 3:
                ga = np.einsum("btc,btc->bc", g, branch.array)[:, None, :]
            else:
                ga = _unbroadcast(g * branch.array, alpha.shape)
            acc(alpha, ga)

    return _node(out, (base, branch, alpha), backward)


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax of (scale * x) along the last axis, stabilized by
    max-subtraction. The scale parameter folds a pre-multiplication (e.g.
    attention's 1/sqrt(head_dim)) into the same node."""
    x = _as_tensor(x)
    arr = x.array if scale == 1.0 else scale * x.array
    out = np.exp(arr - arr.max(axis=-1, keepdims=True))
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g, acc):
        dot = np.einsum("...i,...i->...", g, out)[..., None]
        gx = out * (g - dot)
        if scale != 1.0:
            gx *= scale
        acc(x, gx)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.array.sum())

    def backward(g, acc):
        acc(x, np.broadcast_to(g, x.shape))

    return _node(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.array.mean())

    def backward(g, acc):
        acc(x, np.broadcast_to(g / x.size, x.shape))

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.array.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {shape}") from None

    def backward(g, acc):
        acc(x, g.reshape(x.shape))

    return _node(out, (x,), backward, check=False)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.array, a, b)

    def backward(g, acc):
        acc(x, np.swapaxes(g, a, b))

    return _node(out, (x,), backward, check=False)


def split_last(x: Tensor, parts: int) -> list[Tensor]:
    """Split the last axis into `parts` equal slices."""
    x = _as_tensor(x)
    n = x.shape[-1]
    if n % parts != 0:
        raise ShapeMismatchError(f"split_last: {n} not divisible by {parts}")
    width = n // parts
    pieces = []
    for i in range(parts):
        sl = x.array[..., i * width:(i + 1) * width]

        def backward(g, acc, i=i):
            gx = np.zeros(x.shape)
            gx[..., i * width:(i + 1) * width] = g
            acc(x, gx)

        pieces.append(_node(np.ascontiguousarray(sl), (x,), backward,
                            check=False))
    return pieces


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along the last axis."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeMismatchError("concat_last: no operands")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatchError(
                f"concat_last: {ts[0].shape} vs {t.shape}")
    out = np.concatenate([t.array for t in ts], axis=-1)
    offsets = np.cumsum([0] + [t.shape[-1] for t in ts])

    def backward(g, acc):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            acc(t, g[..., lo:hi])

    return _node(out, tuple(ts), backward, check=False)


def embed_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-D table; gradients scatter-add back into it."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embed_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embed_rows: index out of range for table with {table.shape[0]} rows")
    out = table.array[idx]

    def backward(g, acc):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        acc(table, gt)

    return _node(out, (table,), backward, check=False)


# ---------------------------------------------------------------------------
# reverse mode


def comp_graph(root: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Reachable recorded nodes of `root`'s graph in recording order, plus leaves."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    leaves: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is None:
            leaves.append(t)
        else:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    leaves.sort(key=lambda t: t._seq)
    return nodes, leaves


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar loss for the given leaf tensors.

    Parameters the loss does not reach map to zero tensors of matching shape.
    """
    params = list(params)
    if loss.array.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}

    def acc(t: Tensor, g: np.ndarray):
        if not (t.requires_grad or t._backward is not None):
            return
        prev = grads.get(id(t))
        grads[id(t)] = g if prev is None else prev + g

    nodes, _ = comp_graph(loss)
    # inputs always carry smaller sequence numbers, so descending recording
    # order is a valid reverse-topological schedule
    for node in sorted(nodes, key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, acc)

    out: dict[Tensor, Tensor] = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = Tensor(g) if g is not None else Tensor(np.zeros(p.shape))
    return out
