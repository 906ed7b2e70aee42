"""Dense tensor engine with a reverse-mode gradient tape.

Design notes:

* Data lives in row-major numpy arrays; float32 is the training default and
  float64 is used for gradient checks.  Binary ops require matching dtypes.
* Every differentiable op appends one node to the active ``Tape``.  Nodes are
  recorded in topological order (inputs always precede outputs), so the
  backward pass is a single reverse sweep that visits each node once.
* Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
  scalars, or a trailing-axes broadcast (bias-add style).  Anything else is a
  shape error naming the op and the offending shapes.
* Determinism contract: identical inputs give bit-identical outputs; there is
  no internal threading and no nondeterministic reduction order.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

INVERSE_SIGMOID_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""


class AllocationMeter:
    """Counts tensor materializations; used by the benchmark.

    Counts are a function of shapes and config only, so they are bit-identical
    across runs.  Self-attention score matrices are tracked separately because
    they are the quantity whose growth distinguishes decoder designs.
    """

    def __init__(self):
        self.enabled = False
        self.total_elements = 0
        self.total_bytes = 0
        self.peak_sa_score_elements = 0
        self.sa_score_elements = 0

    def reset(self):
        self.total_elements = 0
        self.total_bytes = 0
        self.peak_sa_score_elements = 0
        self.sa_score_elements = 0

    def add(self, array: np.ndarray):
        if self.enabled:
            self.total_elements += array.size
            self.total_bytes += array.nbytes

    def note_sa_scores(self, elements: int):
        if self.enabled:
            self.sa_score_elements += elements
            self.peak_sa_score_elements = max(self.peak_sa_score_elements, elements)


ALLOC = AllocationMeter()


class Tape:
    """Ordered record of the ops of one forward pass.

    ``nodes`` is append-only and topologically ordered; ``backward`` consumes
    the tape, after which tensors that referenced it re-register on a fresh
    tape the next time they participate in an op.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.leaf_ids: dict[int, "Tensor"] = {}
        self.consumed = False
        self._next_id = 0

    def new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def register_leaf(self, t: "Tensor") -> int:
        nid = self.new_id()
        self.leaf_ids[nid] = t
        return nid

    def record(self, op: str, input_ids: list[int], output_id: int,
               backward_fn: Callable[[np.ndarray], list[tuple[int, np.ndarray]]]):
        self.nodes.append(TapeNode(op, input_ids, output_id, backward_fn))


class TapeNode:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op, input_ids, output_id, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        self._prev = getattr(_state, "grad_disabled", False)
        _state.grad_disabled = True
        return self

    def __exit__(self, *exc):
        _state.grad_disabled = self._prev
        return False


def _recording_enabled() -> bool:
    return not getattr(_state, "grad_disabled", False)


class Tensor:
    """A dense array plus optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "_tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def active_tape(self) -> Optional[Tape]:
        if self._tape is not None and not self._tape.consumed:
            return self._tape
        return None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _find_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    """Locate (or create) the single tape this op should record onto."""
    tape = None
    for t in inputs:
        at = t.active_tape()
        if at is None:
            continue
        if tape is None:
            tape = at
        elif tape is not at:
            raise ValueError("inputs belong to two different live tapes")
    if tape is None and any(t.requires_grad for t in inputs):
        tape = Tape()
    return tape


def _apply(op: str, inputs: list[Tensor], out_data: np.ndarray,
           backward_builder) -> Tensor:
    """Wrap an op result and record it on the tape when gradients are needed.

    ``backward_builder(input_ids, output_id, tape)`` must return the backward
    closure mapping the upstream gradient to (input_id, gradient) pairs.
    """
    out = Tensor(out_data)
    ALLOC.add(out_data)
    if not _recording_enabled():
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    tape = _find_tape(inputs)
    input_ids = []
    for t in inputs:
        if t.requires_grad and t.active_tape() is None:
            t._tape = tape
            t.node_id = tape.register_leaf(t)
        input_ids.append(t.node_id if t.active_tape() is tape else None)
    out.requires_grad = True
    out._tape = tape
    out.node_id = tape.new_id()
    tape.record(op, input_ids, out.node_id, backward_builder(input_ids))
    return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns grads for requires-grad leaves.

    The tape is consumed: subsequent forward passes start a fresh tape.
    Detached tensors and constants never appear in the result.
    """
    if loss.shape not in ((), (1,)):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.active_tape()
    if tape is None:
        return {}
    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        for nid, gin in node.backward_fn(g):
            if nid is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gin
            else:
                grads[nid] = gin
    result = {}
    for nid, leaf in tape.leaf_ids.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        result[nid] = Tensor(g)
    tape.consumed = True
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_check(op: str, a: Tensor, b: Tensor):
    """Allow equal shapes, scalars, or trailing-axes broadcast; else raise."""
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _dtype_check(op: str, a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after trailing/scalar broadcast."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _dtype_check("add", a, b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def build(ids):
        ash, bsh = a.shape, b.shape

        def bwd(g):
            return [(ids[0], _unbroadcast(g, ash)),
                    (ids[1], _unbroadcast(g, bsh))]
        return bwd
    return _apply("add", [a, b], out, build)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _dtype_check("sub", a, b)
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def build(ids):
        ash, bsh = a.shape, b.shape

        def bwd(g):
            return [(ids[0], _unbroadcast(g, ash)),
                    (ids[1], _unbroadcast(-g, bsh))]
        return bwd
    return _apply("sub", [a, b], out, build)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _dtype_check("mul", a, b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def build(ids):
        ad, bd = a.data, b.data

        def bwd(g):
            return [(ids[0], _unbroadcast(g * bd, ad.shape)),
                    (ids[1], _unbroadcast(g * ad, bd.shape))]
        return bwd
    return _apply("mul", [a, b], out, build)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.data

    def build(ids):
        def bwd(g):
            return [(ids[0], -g)]
        return bwd
    return _apply("neg", [a], out, build)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _dtype_check("div", a, b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def build(ids):
        ad, bd = a.data, b.data

        def bwd(g):
            return [(ids[0], _unbroadcast(g / bd, ad.shape)),
                    (ids[1], _unbroadcast(-g * ad / (bd * bd), bd.shape))]
        return bwd
    return _apply("div", [a, b], out, build)


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Elementwise clip; gradient passes through strictly inside the bounds."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def build(ids):
        inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi

        def bwd(g):
            return [(ids[0], g * inside)]
        return bwd
    return _apply("clamp", [a], out, build)


def matmul(a, b) -> Tensor:
    """Matrix product.  2-D x 2-D, or batched with exactly equal batch dims,
    or one operand 2-D (shared across the other's batch)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _dtype_check("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    def build(ids):
        ad, bd = a.data, b.data

        def bwd(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            if ga.shape != ad.shape:
                ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
            if gb.shape != bd.shape:
                gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
            return [(ids[0], ga), (ids[1], gb)]
        return bwd
    return _apply("matmul", [a, b], out, build)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def build(ids):
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            parts = np.split(g, splits, axis=axis)
            return list(zip(ids, parts))
        return bwd
    return _apply("concat", list(tensors), out, build)


def slice_(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=a.dtype)

    def build(ids):
        shape = a.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] = g
            return [(ids[0], full)]
        return bwd
    return _apply("slice", [a], out, build)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather along axis 0 with an integer index array (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def build(ids):
        shape = a.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return [(ids[0], full)]
        return bwd
    return _apply("take-rows", [a], out, build)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape).copy()

    def build(ids):
        orig = a.shape

        def bwd(g):
            return [(ids[0], g.reshape(orig))]
        return bwd
    return _apply("reshape", [a], out, build)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def build(ids):
        inverse = tuple(np.argsort(axes))

        def bwd(g):
            return [(ids[0], g.transpose(inverse))]
        return bwd
    return _apply("transpose", [a], out, build)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Replicate along a new axis 0: shape S -> (n,) + S.  Backward sums copies."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def build(ids):
        def bwd(g):
            return [(ids[0], g.sum(axis=0))]
        return bwd
    return _apply("tile-rows", [a], out, build)


def replicate_rows(a: Tensor, n: int) -> Tensor:
    """Insert a replication axis after axis 0: (N, ...) -> (N, n, ...).

    Every copy is bit-identical to its source row; backward sums over the
    replication axis.
    """
    a = _as_tensor(a)
    expanded = a.data[:, None]
    out = np.broadcast_to(expanded, (a.shape[0], n) + a.shape[1:]).copy()

    def build(ids):
        def bwd(g):
            return [(ids[0], g.sum(axis=1))]
        return bwd
    return _apply("replicate-rows", [a], out, build)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def build(ids):
        mask = a.data > 0

        def bwd(g):
            return [(ids[0], g * mask)]
        return bwd
    return _apply("relu", [a], out, build)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)

    def build(ids):
        s = out

        def bwd(g):
            return [(ids[0], g * s * (1.0 - s))]
        return bwd
    return _apply("sigmoid", [a], out, build)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(a) -> Tensor:
    """Logit with inputs clamped to [eps, 1-eps]; clamping is silent by design
    so boundary points stay usable.  Gradient is zero in the clamped region."""
    a = _as_tensor(a)
    eps = INVERSE_SIGMOID_EPS
    clamped = np.clip(a.data, eps, 1.0 - eps)
    out = np.log(clamped) - np.log1p(-clamped)

    def build(ids):
        inside = (a.data > eps) & (a.data < 1.0 - eps)
        denom = clamped * (1.0 - clamped)

        def bwd(g):
            return [(ids[0], g * inside / denom)]
        return bwd
    return _apply("inverse-sigmoid", [a], out, build)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def build(ids):
        ad = a.data

        def bwd(g):
            return [(ids[0], g / ad)]
        return bwd
    return _apply("log", [a], out, build)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = np.power(a.data, exponent)

    def build(ids):
        ad = a.data

        def bwd(g):
            return [(ids[0], g * exponent * np.power(ad, exponent - 1.0))]
        return bwd
    return _apply("power", [a], out, build)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sin(a.data)

    def build(ids):
        cos_a = np.cos(a.data)

        def bwd(g):
            return [(ids[0], g * cos_a)]
        return bwd
    return _apply("sin", [a], out, build)


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = np.cos(a.data)

    def build(ids):
        sin_a = np.sin(a.data)

        def bwd(g):
            return [(ids[0], -g * sin_a)]
        return bwd
    return _apply("cos", [a], out, build)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def build(ids):
        s = out

        def bwd(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            return [(ids[0], s * (g - inner))]
        return bwd
    return _apply("softmax", [a], out, build)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along one axis (no affine part;
    compose with mul/add parameters for gain and shift)."""
    a = _as_tensor(a)
    mean = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a.data - mean) * inv

    def build(ids):
        y, istd = out, inv
        k = a.shape[axis]

        def bwd(g):
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * y).mean(axis=axis, keepdims=True)
            return [(ids[0], istd * (g - gm - y * gy))]
        _ = k
        return bwd
    return _apply("layer-norm", [a], out, build)


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def build(ids):
        shape = a.shape

        def bwd(g):
            if axis is None:
                return [(ids[0], np.broadcast_to(g, shape).copy())]
            ge = np.expand_dims(g, axis)
            return [(ids[0], np.broadcast_to(ge, shape).copy())]
        return bwd
    return _apply("sum", [a], out, build)


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis), dtype=a.dtype)

    def build(ids):
        shape = a.shape
        count = a.size if axis is None else shape[axis]

        def bwd(g):
            if axis is None:
                return [(ids[0], np.broadcast_to(g / count, shape).copy())]
            ge = np.expand_dims(g / count, axis)
            return [(ids[0], np.broadcast_to(ge, shape).copy())]
        return bwd
    return _apply("mean", [a], out, build)


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference over all elements (scalar output)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"l1-distance: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    def build(ids):
        sign = np.sign(diff) / diff.size

        def bwd(g):
            return [(ids[0], g * sign), (ids[1], -g * sign)]
        return bwd
    return _apply("l1-distance", [a, b], out, build)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis; denominators floored at eps so
    the op stays smooth near zero-length vectors."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes differ {a.shape} vs {b.shape}")
    dot = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data ** 2).sum(axis=-1))
    nb = np.sqrt((b.data ** 2).sum(axis=-1))
    denom = np.maximum(na * nb, eps)
    out = dot / denom

    def build(ids):
        ad, bd = a.data, b.data
        na_s = np.maximum(na, math.sqrt(eps))
        nb_s = np.maximum(nb, math.sqrt(eps))

        def bwd(g):
            ge = g[..., None]
            cos = out[..., None]
            ga = ge * (bd / denom[..., None] - cos * ad / (na_s ** 2)[..., None])
            gb = ge * (ad / denom[..., None] - cos * bd / (nb_s ** 2)[..., None])
            return [(ids[0], ga), (ids[1], gb)]
        return bwd
    return _apply("cosine", [a, b], out, build)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable form)."""
    x = _as_tensor(logits)
    t = _as_tensor(targets, like=x)
    if x.shape != t.shape:
        raise ShapeError(f"bce-with-logits: shapes differ {x.shape} vs {t.shape}")
    xd = x.data
    out = np.maximum(xd, 0) - xd * t.data + np.log1p(np.exp(-np.abs(xd)))

    def build(ids):
        p = _sigmoid_np(xd)
        td = t.data

        def bwd(g):
            return [(ids[0], g * (p - td)), (ids[1], -g * xd)]
        return bwd
    return _apply("bce-with-logits", [x, t], out, build)


def bilinear_sample(grid: Tensor, coords: Tensor) -> Tensor:
    """Sample a (H, W, C) grid at continuous (row, col) positions.

    ``coords`` is (M, 2) in pixel/cell units; positions are clamped to the
    grid interior, so sampling is defined (with zero positional gradient) on
    and beyond the border.  Differentiable w.r.t. both grid and coords.
    """
    grid = _as_tensor(grid)
    coords = _as_tensor(coords)
    if grid.data.ndim != 3 or coords.data.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(
            f"bilinear-sample: need (H,W,C) grid and (M,2) coords, got {grid.shape} and {coords.shape}")
    H, W, _ = grid.shape
    r = np.clip(coords.data[:, 0], 0.0, H - 1.0)
    c = np.clip(coords.data[:, 1], 0.0, W - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r0 = np.minimum(r0, H - 2) if H > 1 else r0 * 0
    c0 = np.minimum(c0, W - 2) if W > 1 else c0 * 0
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[:, None]
    g = grid.data
    v00 = g[r0, c0]
    v01 = g[r0, c1]
    v10 = g[r1, c0]
    v11 = g[r1, c1]
    out = (v00 * (1 - fr) * (1 - fc) + v01 * (1 - fr) * fc
           + v10 * fr * (1 - fc) + v11 * fr * fc)

    def build(ids):
        inside_r = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < H - 1.0)
        inside_c = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < W - 1.0)

        def bwd(gout):
            ggrid = np.zeros_like(g)
            np.add.at(ggrid, (r0, c0), gout * (1 - fr) * (1 - fc))
            np.add.at(ggrid, (r0, c1), gout * (1 - fr) * fc)
            np.add.at(ggrid, (r1, c0), gout * fr * (1 - fc))
            np.add.at(ggrid, (r1, c1), gout * fr * fc)
            dr = ((v10 - v00) * (1 - fc) + (v11 - v01) * fc) * gout
            dc = ((v01 - v00) * (1 - fr) + (v11 - v10) * fr) * gout
            gcoords = np.stack([dr.sum(axis=1) * inside_r,
                                dc.sum(axis=1) * inside_c], axis=1)
            return [(ids[0], ggrid), (ids[1], gcoords)]
        return bwd
    return _apply("bilinear-sample", [grid, coords], out, build)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         is_self_attention: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv).  Composed from
    primitives, so the gradient comes for free.  Score matrices of
    self-attention are reported to the allocation meter.
    """
    q = _as_tensor(q)
    k = _as_tensor(k)
    v = _as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} != key dim {k.shape[-1]}")
    kt = transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = mul(matmul(q, kt), _as_tensor(1.0 / math.sqrt(d), like=q))
    if is_self_attention:
        ALLOC.note_sa_scores(scores.size)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# generic dispatcher

_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "clamp": clamp,
    "concat": concat,
    "slice": slice_,
    "take-rows": take_rows,
    "reshape": reshape,
    "transpose": transpose,
    "tile-rows": tile_rows,
    "replicate-rows": replicate_rows,
    "relu": relu,
    "sigmoid": sigmoid,
    "inverse-sigmoid": inverse_sigmoid,
    "log": log,
    "power": power,
    "sin": sin,
    "cos": cos,
    "softmax": softmax,
    "layer-norm": layer_norm,
    "scaled-dot-attention": scaled_dot_attention,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "l1-distance": l1_distance,
    "cosine": cosine_similarity,
    "bce-with-logits": bce_with_logits,
    "bilinear-sample": bilinear_sample,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op kind.  Unknown kinds and shape mismatches raise with a
    message naming the op."""
    fn = _OPS.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown op kind {op_kind!r}; known: {sorted(_OPS)}")
    if op_kind == "concat":
        return fn(inputs[0] if len(inputs) == 1 else list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def op_kinds() -> list[str]:
    return sorted(_OPS)
