"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` is an append-only list of nodes. Every op that touches a
traced tensor appends one node holding its input handles and a closure over
the values the backward rule needs. ``Tape.backward`` walks the nodes once,
in reverse, and leaves the tape untouched so it can be replayed.

Data is stored row-major (C order) as little-endian float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_array(x) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.array(x, dtype=np.float64, order="C", copy=None)


class Tensor:
    """Immutable N-d array, optionally bound to a tape via ``grad_id``."""

    __slots__ = ("data", "tape", "grad_id")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, grad_id: int | None = None):
        arr = as_array(data)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def traced(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", grad_id={self.grad_id}" if self.traced else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None
    shape: tuple[int, ...]
    name: str | None = None


@dataclass
class Tape:
    """Records ops in execution order; inputs always precede their consumers."""

    nodes: list[Node] = field(default_factory=list)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        arr = value.data if isinstance(value, Tensor) else value
        t = Tensor(arr, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), None, t.shape, name))
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], out, backward: BackwardFn) -> Tensor:
        t = Tensor(out, self, len(self.nodes))
        self.nodes.append(Node(kind, tuple(-1 if x.tape is None else x.grad_id for x in inputs),
                               backward, t.shape))
        return t

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.grad_id + 1)
        grads[loss.grad_id] = np.ones(loss.shape)
        for idx in range(loss.grad_id, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for src, ig in zip(node.inputs, in_grads):
                if src < 0 or ig is None:
                    continue
                if grads[src] is None:
                    grads[src] = np.array(ig, dtype=np.float64, copy=True)
                else:
                    grads[src] += ig
        leaves = {i: grads[i] if grads[i] is not None else np.zeros(n.shape)
                  for i, n in enumerate(self.nodes[: loss.grad_id + 1]) if n.kind == "leaf"}
        return Gradients(leaves, {self.nodes[i].name: i for i in leaves if self.nodes[i].name})


class Gradients(Mapping):
    """Leaf gradients, addressable by tensor, grad_id or watched name."""

    def __init__(self, by_id: dict[int, np.ndarray], names: dict[str, int]):
        self._by_id = by_id
        self._names = names

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            key = key.grad_id
        elif isinstance(key, str):
            key = self._names[key]
        return self._by_id[key]

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)

    def by_name(self) -> dict[str, np.ndarray]:
        return {n: self._by_id[i] for n, i in self._names.items()}


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    tape = tape or loss.tape
    if tape is None:
        raise ValueError("loss is not traced")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = x.tape
    return tape


def make_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap a forward result; record a node only if some input is traced."""
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # scalar, equal shape, or trailing-aligned size-1 axes (per-channel scale/shift)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return make_op("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return make_op("reciprocal", (x,), out, lambda g: (-g * out * out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("log", (x,), np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient is defined as 0 at exactly 0."""
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    return make_op("sqrt", (x,), out, lambda g: (np.where(out > 0, g / (2.0 * safe), 0.0),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op("sum", (x,), out, bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes, keepdims), 1.0 / n)


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    axes = _norm_axes(axis, x.ndim)
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    perm = keep + axes
    moved = x.data.transpose(perm)
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    kept_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape))
    if keepdims:
        out = out.reshape(kept_shape)
    shape = x.shape

    def bw(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
        gm = gflat.reshape(moved.shape)
        return (gm.transpose(np.argsort(perm)).reshape(shape),)

    return make_op("amax", (x,), out, bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat shape mismatch along axis {ax}: "
                             f"{[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_op("concat", parts, np.concatenate([p.data for p in parts], axis=ax), bw)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``C×H×W`` (or ``N×C×H×W``) maps along the channel axis."""
    parts = [_wrap(p) for p in parts]
    hw = {p.shape[-2:] for p in parts}
    if len(hw) != 1:
        raise ValueError(f"spatial mismatch in concat_channels: {[p.shape for p in parts]}")
    return concat(parts, axis=-3)


def slice_axis(x: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not 0 <= lo < hi <= n:
        raise IndexError(f"slice [{lo}, {hi}) out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(lo, hi)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_op("slice", (x,), x.data[idx], bw)


def slice_rows(f: Tensor, row_lo: int, row_hi: int) -> Tensor:
    """Height slice of a ``C×H×W`` or ``N×C×H×W`` map."""
    return slice_axis(f, -2, row_lo, row_hi)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-d tensor; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return make_op("take_rows", (x,), x.data[index], bw)


def pick(x: Tensor, rows, cols) -> Tensor:
    """Elementwise gather ``x[rows[i], cols[i]]`` from a 2-d tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return make_op("pick", (x,), x.data[rows, cols], bw)


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<I")


def tensor_to_bytes(x) -> bytes:
    """Little-endian ``rank:u32, extents:u64*rank`` header + float64 payload."""
    arr = as_array(x.data if isinstance(x, Tensor) else x)
    head = _HEADER.pack(arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns the array and the next offset."""
    if len(buf) < offset + 4:
        raise ValueError("truncated tensor header")
    (rank,) = _HEADER.unpack_from(buf, offset)
    if rank > 8:
        raise ValueError(f"implausible tensor rank {rank}")
    offset += 4
    if len(buf) < offset + 8 * rank:
        raise ValueError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    end = offset + 8 * n
    if len(buf) < end:
        raise ValueError(f"truncated tensor payload: need {end - offset} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


# ---------------------------------------------------------------------------
# randomness and gradient checking


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator seeded from an integer key tuple (stable across platforms)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               coords: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the check to a subset of coordinates.
    """
    x0 = as_array(point).copy()
    tape = Tape()
    leaf = tape.watch(x0)
    out = fn(leaf)
    analytic = tape.backward(out)[leaf]
    if coords is None:
        coords = np.ndindex(*x0.shape)
    worst = 0.0
    for c in coords:
        xp = x0.copy()
        xp[c] += eps
        xm = x0.copy()
        xm[c] -= eps
        num = (fn(Tensor(xp)).item() - fn(Tensor(xm)).item()) / (2 * eps)
        a = analytic[c]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      per_tensor: int | None = None, rng: np.random.Generator | None = None,
                      ) -> dict[str, float]:
    """Central-difference check of ``loss_fn`` w.r.t. every named parameter.

    ``per_tensor`` samples that many coordinates from each parameter instead of
    sweeping all of them. Returns the max relative error per name.
    """
    rng = rng or make_rng(0)
    tape = Tape()
    leaves = {k: tape.watch(v, k) for k, v in params.items()}
    grads = tape.backward(loss_fn(leaves)).by_name()
    base = {k: Tensor(v) for k, v in params.items()}
    errors = {}
    for name, value in params.items():
        value = as_array(value)
        if per_tensor is None or per_tensor >= value.size:
            flat = range(value.size)
        else:
            flat = rng.choice(value.size, size=per_tensor, replace=False)
        worst = 0.0
        for fi in flat:
            c = np.unravel_index(int(fi), value.shape)
            vals = []
            for step in (eps, -eps):
                moved = value.copy()
                moved[c] += step
                vals.append(loss_fn({**base, name: Tensor(moved)}).item())
            num = (vals[0] - vals[1]) / (2 * eps)
            a = grads[name][c]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        errors[name] = worst
    return errors
