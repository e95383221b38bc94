"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Operations on tensors that require gradients
are recorded on the active :class:`Tape`; outside a tape nothing is
recorded and the same code runs as plain inference.

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss, [x])
"""

from __future__ import annotations

import logging
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import opcount
from .errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
MASK_FILL = -1e30
LN_EPS = 1e-5

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float array, optionally participating in gradient tracking.

    Leaf tensors created with ``requires_grad=True`` are parameters. Tensors
    produced by operations under a tape belong to that tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()) if self.data.size == 1 else self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Records are appended in execution order, so the list is already
    topologically sorted; ``backward`` walks it in reverse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not None and loss._tape is not self:
            raise ContractError("loss was recorded on a different tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._tape is None:
                    leaves[key] = p
        if params is None:
            params = list(leaves.values())
        result: dict[Tensor, np.ndarray] = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g
            result[p] = g
        return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss`` on the tape it was recorded on."""
    if loss._tape is None:
        raise ContractError("loss is not on any tape (was it computed inside `with Tape()`?)")
    return loss._tape.backward(loss, params)


def record_op(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a primitive with the given backward rule.

    ``fn`` maps the output gradient to one gradient (or None) per parent.
    Kernel modules use this to register custom primitives.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    tracked = False
    for p in parents:
        if p.requires_grad:
            if p._tape is not None and p._tape is not tape:
                raise ContractError("tensor belongs to a different tape")
            tracked = True
    if tracked:
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(parents), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    opcount.record("add", out.size)
    return record_op(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    opcount.record("add", out.size)
    return record_op(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    opcount.record("mul", out.size)
    return record_op(out, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    opcount.record("div", out.size)
    return record_op(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    opcount.record("mul", out.size)
    return record_op(out, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    opcount.record("exp", out.size)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)
    opcount.record("exp", out.size)
    return record_op(out, (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, 0.0).astype(a.dtype, copy=False)
    opcount.record("cmp", out.size)
    return record_op(out, (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    opcount.record("exp", out.size)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    opcount.record("add", a.size)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {orig} into {shape}") from None
    return record_op(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return record_op(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[k] != tensors[0].shape[k] for k in range(ndim) if k != axis):
            raise DimensionError(
                f"concat on axis {axis}: shapes {[tt.shape for tt in tensors]} disagree off-axis"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for k in range(len(tensors)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(idx)])
        return parts

    return record_op(out, tensors, bw)


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; the backward pass scatter-adds.

    With a 2-D table and integer ids this is an embedding lookup.
    """
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.ndim
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take: index out of range for extent {n} on axis {axis}")
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim))))
        return (full,)

    return record_op(out, (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


def scatter_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """Place row ``k`` of ``a`` at row ``idx[k]`` of a zero array with ``n_rows`` rows.

    Rows hit more than once are summed; the backward pass gathers.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, idx, a.data)
    return record_op(out, (a,), lambda g: (g[idx],))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents disagree for shapes {a.shape} and {b.shape}") from None
    opcount.record("madd", out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def bw(g):
        opcount.record("madd", 2 * out.size * ad.shape[-1])
        return (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g))

    return record_op(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalizers


def masked_softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with disallowed entries forced to exactly 0.

    ``mask`` is boolean, broadcastable to ``a``, True where an entry may
    receive weight. Masked logits get an additive -1e30 before
    exponentiation and the outputs are zeroed afterwards. Rows with no
    allowed entry come back as all zeros and are logged.
    """
    ad = a.data
    if np.isnan(ad).any():
        raise NumericError("NaN in softmax input")
    if mask is None:
        z = ad - ad.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        keep = None
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), ad.shape)
        z = np.where(keep, ad, ad + MASK_FILL)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z) * keep
        denom = e.sum(axis=-1, keepdims=True)
        empty = denom == 0
        if empty.any():
            logger.warning("masked_softmax_rows: %d all-masked row(s) returned as zeros", int(empty.sum()))
            denom = np.where(empty, 1.0, denom)
        out = e / denom
    opcount.record("exp", ad.size)
    opcount.record("cmp", ad.size)
    opcount.record("div", ad.size)

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        ga = out * (g - inner)
        return (ga,)

    return record_op(out.astype(ad.dtype, copy=False), (a,), bw)


def softmax(a: Tensor) -> Tensor:
    return masked_softmax_rows(a, None)


def log_softmax(a: Tensor) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    opcount.record("exp", ad.size)
    sm = np.exp(out)
    return record_op(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise logits."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits if logits.ndim == 2 else reshape(logits, (1, -1))
    if flat.shape[0] != targets.size:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows vs {targets.size} targets")
    lp = log_softmax(flat)
    picked = take(reshape(lp, (-1,)), np.arange(targets.size) * flat.shape[1] + targets)
    return scale(sum_(picked), -1.0 / targets.size)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last extent {d} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    opcount.record("madd", 4 * xd.size)

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when off."""
    if not training or rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    opcount.record("mul", x.size)
    return record_op(x.data * keep, (x,), lambda g: (g * keep,))


def sinusoidal_positions(n: int, d: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Fixed sine/cosine position table, sines in the first half of the channels."""
    half = d // 2
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = pos * freq[None, :]
    table = np.zeros((n, d), dtype=np.float64)
    table[:, :half] = np.sin(ang)
    table[:, half : 2 * half] = np.cos(ang)
    return Tensor(table.astype(dtype))


# ---------------------------------------------------------------- gradient checking


def finite_diff_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between tape and central-difference gradients.

    ``f`` takes no arguments and reads the parameters it closes over. When
    ``max_coords`` is set, each parameter with more coordinates is probed at
    a seeded random sample of that many coordinates (at least 200).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
    grads = tape.backward(loss, params) if loss.requires_grad else {p: np.zeros_like(p.data) for p in params}
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for k, p in enumerate(params):
        g_ad = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max(max_coords, 200):
            coords = np.sort(rng.choice(flat.size, size=max(max_coords, 200), replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value while probing {p.name or k}[{c}]")
            g_fd = (fp - fm) / (2 * eps)
            ga = float(g_ad[c])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
        report[p.name or f"param{k}"] = worst
    return report


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error of tape gradients against central differences."""
    report = finite_diff_report(f, params, eps, max_coords, seed)
    return max(report.values(), default=0.0)
