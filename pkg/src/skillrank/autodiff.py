"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tensors that belong to
it (define-by-run).  Tensors without a tape are plain constants: operations
on them compute values without recording anything, which is what inference
and finite-difference probes use.

Only the operations the assessment model needs are provided.  Shapes must
agree exactly; the few ops that combine differently shaped operands
(``linear`` bias rows, ``repeat_axis``, scalar ops) say so in their names.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-6

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """An n-dimensional float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node", "name")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def tanh(self):
        return activation("tanh", self)

    def sigmoid(self):
        return activation("sigmoid", self)

    def relu(self):
        return activation("relu", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass(frozen=True)
class RecordedOp:
    kind: str
    inputs: tuple[Optional[int], ...]
    out: int
    backward: BackwardFn


class Tape:
    """Ordered record of operations for one forward evaluation.

    Node ids are allocated in creation order, so the op list is already in
    topological order and a single reverse sweep suffices.
    """

    def __init__(self):
        self.ops: list[RecordedOp] = []
        self.leaves: dict[int, tuple[Optional[str], tuple[int, ...]]] = {}
        self._next = 0

    def __len__(self) -> int:
        return len(self.ops)

    def _alloc(self) -> int:
        node = self._next
        self._next += 1
        return node

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        node = self._alloc()
        t = Tensor(value, self, node, name)
        self.leaves[node] = (name, t.shape)
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: BackwardFn) -> Tensor:
        node = self._alloc()
        self.ops.append(RecordedOp(kind, tuple(t.node if t.tape is self else None for t in inputs),
                                   node, backward))
        return Tensor(out, self, node)


def _tape_of(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (x,), x.data + c, lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    return _emit("mul_scalar", (x,), x.data * c, lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "tanh":
        y = np.tanh(xd)
        return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(xd)
        return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))
    if kind == "relu":
        mask = xd > 0
        return _emit("relu", (x,), np.where(mask, xd, 0.0), lambda g: (g * mask,))
    raise ValueError(f"unknown activation {kind!r}")


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` applied to every row of ``x[..., in]``.

    The bias, when given, is added to each row; that is the only shape
    expansion this op performs.
    """
    if weight.ndim != 2 or x.shape[-1:] != weight.shape[1:]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    need_gx = x.tape is not None

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if need_gx else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", inputs, out, backward)


# -- reductions --------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


softmax_stable = softmax


def _spatial_check(op: str, x: Tensor) -> None:
    if x.ndim < 3:
        raise ShapeError(f"{op}: expected [..., C, H, W], got {x.shape}")


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the trailing H, W axes."""
    _spatial_check("spatial_avg_pool", x)
    shape = x.shape
    n = shape[-1] * shape[-2]
    out = x.data.mean(axis=(-2, -1))
    return _emit("avg_pool", (x,), out,
                 lambda g: (np.broadcast_to((g / n)[..., None, None], shape).copy(),))


def spatial_max_pool(x: Tensor) -> Tensor:
    """Per-channel max over H, W; ties go to the lowest flat index."""
    _spatial_check("spatial_max_pool", x)
    shape = x.shape
    flat = x.data.reshape(shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, idx, g[..., None], axis=-1)
        return (gf.reshape(shape),)

    return _emit("max_pool", (x,), out, backward)


def check_simplex(alpha: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if alpha.size and (alpha.min() < -tol or np.abs(alpha.sum(axis=-1) - 1.0).max() > tol):
        raise ValueError("attention weights are not on the simplex")


def weighted_spatial_sum(x: Tensor, alpha: Tensor) -> Tensor:
    """Convex combination of the H*W location vectors of ``x[..., C, H, W]``.

    ``alpha[..., H*W]`` must be a probability vector (checked to 1e-6).
    Terms are accumulated location by location in flat order.
    """
    _spatial_check("weighted_spatial_sum", x)
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    if alpha.shape != lead + (h * w,):
        raise ShapeError(f"weighted_spatial_sum: weights {alpha.shape} do not match {x.shape}")
    check_simplex(alpha.data)
    xl = np.swapaxes(x.data.reshape(lead + (c, h * w)), -1, -2)  # [..., L, C]
    ad = alpha.data
    # cumulative sums accumulate strictly in index order (plain sums may pair
    # terms up), so the last row is the location-ordered sum
    out = np.cumsum(xl * ad[..., None], axis=-2)[..., -1, :]

    def backward(g):
        gx = ad[..., None, :] * g[..., :, None]
        galpha = (xl * g[..., None, :]).sum(axis=-1)
        return gx.reshape(x.shape), galpha

    return _emit("weighted_sum", (x, alpha), out, backward)


# -- structure ---------------------------------------------------------------

def concat(axis: int, a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    if a.shape[:ax] + a.shape[ax + 1:] != b.shape[:ax] + b.shape[ax + 1:]:
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    k = a.shape[ax]

    def backward(g):
        return np.split(g, [k], axis=ax)

    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=ax), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``[start, start + length)`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis size {x.shape[ax]}")
    sl = (slice(None),) * ax + (slice(start, start + length),)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[sl] = g
        return (gx,)

    return _emit("narrow", (x,), x.data[sl], backward)


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {tuple(sizes)} do not add up to {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(x, axis, start, n))
        start += n
    return tuple(out)


def take(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of ``x`` along axis 0 (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take", (x,), x.data[idx], backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def repeat_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of size ``n`` at ``axis`` by copying ``x``."""
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return _emit("repeat", (x,), out, lambda g: (g.sum(axis=ax),))


def unfold(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract sliding patches: ``[..., C, H, W] -> [..., H', W', C*kh*kw]``.

    Patch entries are ordered (channel, kernel row, kernel column), matching
    a ``[C_out, C_in, kh, kw]`` kernel flattened row-major.
    """
    _spatial_check("unfold", x)
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh < 1 or kw < 1 or stride < 1 or hp < kh or wp < kw:
        raise ShapeError(f"unfold: {kh}x{kw} kernel does not fit a {h}x{w} map with padding {padding}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    if padding:
        pad = [(0, 0)] * (xd.ndim - 2) + [(padding, padding), (padding, padding)]
        xd = np.pad(xd, pad)
    cols = np.empty(lead + (c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j, :, :] = xd[..., i:i + stride * ho:stride, j:j + stride * wo:stride]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 3, nl + 4, nl, nl + 1, nl + 2)
    out = cols.transpose(perm).reshape(lead + (ho, wo, c * kh * kw))

    def backward(g):
        gc = g.reshape(lead + (ho, wo, c, kh, kw))
        gc = gc.transpose(tuple(range(nl)) + (nl + 2, nl + 3, nl + 4, nl, nl + 1))
        gx = np.zeros(lead + (c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gx[..., i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[..., i, j, :, :]
        if padding:
            gx = gx[..., padding:padding + h, padding:padding + w]
        return (gx,)

    return _emit("unfold", (x,), out, backward)


# -- reverse sweep -----------------------------------------------------------

class Gradients(Mapping[int, np.ndarray]):
    """Leaf gradients from one reverse sweep, keyed by node id."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            if key.tape is not self._tape:
                raise KeyError("tensor is not on this tape")
            g = self._grads.get(key.node)
            return np.zeros(key.shape) if g is None else g
        return self._grads[key]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def named(self) -> dict[str, np.ndarray]:
        """Gradients of every named leaf; unreachable leaves get zeros."""
        out = {}
        for node, (name, shape) in self._tape.leaves.items():
            if name is None:
                continue
            g = self._grads.get(node)
            out[name] = np.zeros(shape) if g is None else g
        return out


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Gradient of the scalar ``loss`` with respect to every leaf of ``tape``.

    The tape is not modified, so repeated calls return identical results.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for op in reversed(tape.ops):
        if op.out > loss.node:
            continue
        g = grads.pop(op.out, None)
        if g is None:
            continue
        for node, gi in zip(op.inputs, op.backward(g)):
            if node is None or gi is None:
                continue
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi
    return Gradients(tape, {n: g for n, g in grads.items() if n in tape.leaves})


# -- finite-difference verification -------------------------------------------

@dataclass
class GradCheckResult:
    """Worst relative error per parameter tensor."""

    errors: dict[str, float]
    step: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               step: float = 1e-5, corrupt: Optional[Mapping[str, float]] = None) -> GradCheckResult:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a dict of named tensors to a scalar tensor.  Every coordinate
    of every parameter is perturbed by ``+-step``.  ``corrupt`` scales the
    analytic gradient of the named parameters; it exists so the checker
    itself can be shown to catch a wrong gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in base.items()}
    grads = backward(tape, f(leaves)).named()
    errors = {}
    for name, value in base.items():
        analytic = grads[name] * (corrupt or {}).get(name, 1.0)
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - step
            lo = f({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
        errors[name] = float(relative_error(analytic, numeric).max()) if value.size else 0.0
    return GradCheckResult(errors, step)
