"""Minimal tape-based reverse-mode automatic differentiation over float64 arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires gradients.  Calling
:func:`backward` walks the tape in reverse and accumulates gradients into the
``grad`` field of leaf tensors.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DEFAULT_SLOPE = 0.2
EPS_NORM = 1e-12
EXP_GUARD = 50.0

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "gascn_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf."""


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def validate(self) -> "Tensor":
        """Raise :class:`NonFiniteError` if any entry is NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data.reshape(-1)))[0])
            label = self.name or "tensor"
            raise NonFiniteError(f"{label} has a non-finite value at flat index {bad}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Operations are appended in execution order, so inputs always precede the
    operations consuming them.
    """

    ops: list[_Op] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and record ``backward_fn`` on the active tape.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per input.  Custom differentiable kernels use this directly.
    """
    out = Tensor(out_data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape.ops.append(_Op(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor reachable on ``tape``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = pending.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad += gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    row_bcast = a.data.ndim == 2 and b.data.ndim in (1, 2) and b.data.size == a.shape[1] and b.shape != a.shape
    if not row_bcast and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data + (b.data.reshape(1, -1) if row_bcast else b.data)

    def _back(g):
        gb = g.sum(axis=0).reshape(b.shape) if row_bcast else g
        return g, gb

    return record((a, b), out, _back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return record((a,), a.data * c, lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    # Branch-free forms; boolean-mask indexing is several times slower here.
    out = x.data * slope
    np.maximum(x.data, out, out=out)
    pos = x.data > 0

    def _back(g):
        gx = pos.astype(np.float64)
        gx *= 1.0 - slope
        gx += slope
        gx *= g
        return (gx,)

    return record((x,), out, _back)


def exp_elementwise(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data >= EXP_GUARD):
        raise FloatingPointError(f"exp input exceeds the overflow guard ({EXP_GUARD})")
    out = np.exp(x.data)
    return record((x,), out, lambda g: (g * out,))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record((a, b), a.data @ b.data, _back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows, as a single tape entry."""
    if b is None:
        return matmul(x, w)
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.data.size != w.shape[1]:
        raise ShapeError(f"linear: cannot apply {w.shape} weights and {b.shape} bias to {x.shape}")
    out = x.data @ w.data
    out += b.data.reshape(1, -1)

    def _back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0).reshape(b.shape) if b.requires_grad else None
        return gx, gw, gb

    return record((x, w, b), out, _back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _back(g):
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return record(parts, np.concatenate([p.data for p in parts], axis=1), _back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return record((x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def repeat_rows(v: Tensor, m: int) -> Tensor:
    """Tile a row vector ``m`` times into an ``m x d`` matrix."""
    v = as_tensor(v)
    row = v.data.reshape(1, -1)
    return record((v,), np.repeat(row, m, axis=0), lambda g: (g.sum(axis=0).reshape(v.shape),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def _back(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return record((x,), x.data[start:stop], _back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by ``index`` (repeats allowed); backward scatter-adds."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather_rows: index out of range")

    def _back(g):
        return (_scatter_rows(g, index, x.shape[0]),)

    return record((x,), x.data[index], _back)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return record((x,), np.array(x.data.sum()), lambda g: (np.full_like(x.data, g.item()),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return record((x,), np.array(x.data.mean()), lambda g: (np.full_like(x.data, g.item() / n),))


# ----------------------------------------------------------- graph reductions


def _is_sorted(index: np.ndarray) -> bool:
    return index.size < 2 or bool(np.all(index[1:] >= index[:-1]))


def _uniform_width(dest: np.ndarray, n_nodes: int) -> int:
    """Segment width when ``dest`` is ``repeat(arange(n_nodes), w)``, else 0."""
    n_edges = dest.shape[0]
    if n_nodes == 0 or n_edges % n_nodes:
        return 0
    w = n_edges // n_nodes
    if w and np.array_equal(dest[::w], np.arange(n_nodes)) and _is_sorted(dest):
        return w
    return 0


def _segment_sum(values: np.ndarray, dest: np.ndarray, n_nodes: int) -> np.ndarray:
    """Sum rows of ``values`` into their destination segment, in edge order."""
    if values.shape[0] == 0:
        return np.zeros((n_nodes,) + values.shape[1:])
    w = _uniform_width(dest, n_nodes)
    if w:
        return values.reshape((n_nodes, w) + values.shape[1:]).sum(axis=1)
    n_edges = dest.shape[0]
    sel = sparse.csr_matrix((np.ones(n_edges), (dest, np.arange(n_edges))), shape=(n_nodes, n_edges))
    return np.asarray(sel @ values).reshape((n_nodes,) + values.shape[1:])


def _segment_max(values: np.ndarray, dest: np.ndarray, n_nodes: int) -> np.ndarray:
    out = np.full(n_nodes, -np.inf)
    w = _uniform_width(dest, n_nodes)
    if w:
        return values.reshape(n_nodes, w).max(axis=1)
    np.maximum.at(out, dest, values)
    return out


def _scatter_rows(g: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    return _segment_sum(g, index, n_rows)


def _check_dest(dest: np.ndarray, n_edges: int, n_nodes: int) -> np.ndarray:
    dest = np.asarray(dest, dtype=np.intp)
    if dest.shape != (n_edges,):
        raise ShapeError(f"dest has shape {dest.shape}, expected ({n_edges},)")
    if n_edges and (dest.min() < 0 or dest.max() >= n_nodes):
        raise IndexError("edge destination index out of range")
    return dest


def segment_softmax(scores: Tensor, dest: np.ndarray, n_nodes: int) -> Tensor:
    """Softmax of edge scores within each destination node's incoming edge set."""
    scores = as_tensor(scores)
    s = scores.data.reshape(-1)
    dest = _check_dest(dest, s.shape[0], n_nodes)
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("segment_softmax received non-finite scores")
    seg_max = _segment_max(s, dest, n_nodes)
    e = np.exp(s - seg_max[dest])
    denom = _segment_sum(e, dest, n_nodes)
    y = e / denom[dest]

    def _back(g):
        g = g.reshape(-1)
        dot = _segment_sum(g * y, dest, n_nodes)
        return ((y * (g - dot[dest])).reshape(scores.shape),)

    return record((scores,), y.reshape(scores.shape), _back)


def segment_weighted_sum(alpha: Tensor, z: Tensor, dest: np.ndarray, n_nodes: int) -> Tensor:
    """``out[i] = sum over edges e into i of alpha[e] * z[e]``."""
    alpha, z = as_tensor(alpha), as_tensor(z)
    a = alpha.data.reshape(-1)
    if z.data.ndim != 2 or z.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_weighted_sum: alpha {alpha.shape} vs z {z.shape}")
    dest = _check_dest(dest, a.shape[0], n_nodes)
    out = _segment_sum(a[:, None] * z.data, dest, n_nodes)

    def _back(g):
        ge = g[dest]
        ga = np.einsum("ij,ij->i", ge, z.data).reshape(alpha.shape)
        return ga, ge * a[:, None]

    return record((alpha, z), out, _back)


def edge_aggregate(alpha: Tensor, z: Tensor, src: np.ndarray, dest: np.ndarray, n_nodes: int) -> Tensor:
    """Fused ``segment_weighted_sum(alpha, gather_rows(z, src), dest, n_nodes)``."""
    alpha, z = as_tensor(alpha), as_tensor(z)
    a = alpha.data.reshape(-1)
    src = np.asarray(src, dtype=np.intp)
    dest = _check_dest(dest, a.shape[0], n_nodes)
    if src.shape != dest.shape or (src.size and (src.min() < 0 or src.max() >= z.shape[0])):
        raise IndexError("edge source index out of range")
    adj = sparse.csr_matrix((a, (dest, src)), shape=(n_nodes, z.shape[0]))
    out = np.asarray(adj @ z.data)
    width = _uniform_width(dest, n_nodes)

    def _back(g):
        ga = None
        if alpha.requires_grad:
            if width:
                zs = z.data[src].reshape(n_nodes, width, -1)
                ga = np.einsum("nwd,nd->nw", zs, g).reshape(alpha.shape)
            else:
                ga = np.einsum("ij,ij->i", g[dest], z.data[src]).reshape(alpha.shape)
        gz = np.asarray(adj.T @ g) if z.requires_grad else None
        return ga, gz

    return record((alpha, z), out, _back)


def column_max_pool(x: Tensor) -> Tensor:
    """Per-column maximum; gradient goes to the first (lowest-index) argmax row."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"column_max_pool needs a non-empty matrix, got {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def _back(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g
        return (full,)

    return record((x,), x.data[arg, cols], _back)


def l2_normalize_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=1)
    small = np.flatnonzero(norms < EPS_NORM)
    if small.size:
        raise FloatingPointError(f"l2_normalize_rows: row {int(small[0])} has near-zero norm")
    y = x.data / norms[:, None]

    def _back(g):
        dot = np.einsum("ij,ij->i", g, y)
        return ((g - y * dot[:, None]) / norms[:, None],)

    return record((x,), y, _back)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int
    kinks: list[tuple[int, ...]] = field(default_factory=list)
    worst_index: tuple[int, ...] | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.kinks)} kink(s) flagged" if self.kinks else ""
        return f"{status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} entries (tol {self.tol:g}){extra}"


def _eval_scalar(f, x: Tensor) -> float:
    out = f(x)
    return float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    The relative error per entry is ``|ad - fd| / max(|ad|, |fd|, floor)``.
    Entries whose one-sided differences disagree and do not shrink when the step
    is halved are treated as kinks (ReLU corners, pooling or nearest-neighbour
    switches); they are reported but excluded from the pass decision.
    """
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    backward(tape, out)
    analytic = x.grad.copy()
    base = x.data.copy()

    def at(idx, delta):
        x.data[idx] = base[idx] + delta
        try:
            return _eval_scalar(f, x)
        finally:
            x.data[idx] = base[idx]

    f0 = _eval_scalar(f, x)
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst, worst_idx, kinks = 0.0, None, []
    for idx in indices:
        idx = tuple(int(i) for i in np.atleast_1d(idx))
        fp, fm = at(idx, step), at(idx, -step)
        fd = (fp - fm) / (2 * step)
        ad = analytic[idx]
        err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
        if err > tol:
            jump = abs((fp - f0) - (f0 - fm)) / step
            half = step / 2
            jump_half = abs((at(idx, half) - f0) - (f0 - at(idx, -half))) / half
            if jump_half > 0.75 * jump and jump > tol * max(abs(fd), floor):
                kinks.append(idx)
                continue
        if err > worst:
            worst, worst_idx = err, idx
    x.zero_grad()
    return GradCheckReport(worst, worst <= tol, tol, len(indices), kinks, worst_idx)
