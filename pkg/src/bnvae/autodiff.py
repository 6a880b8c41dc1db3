"""Float64 tensors with a define-by-run tape for reverse-mode gradients.

A :class:`Tape` is created per training step. Leaves are registered with
``tape.leaf(array)``; every op whose operands include a taped tensor records
itself. Ops on plain (untaped) tensors just compute values, which is the fast
path used for evaluation and finite differences.

Broadcasting is restricted to the leading-batch form: operand shapes must be
equal, one operand must be a scalar, or the lower-rank shape must equal the
trailing dims of the higher-rank one.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "RandomSource",
    "GradCheckResult",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "square",
    "sqrt",
    "sum",
    "mean",
    "concat",
    "stack",
    "slice",
    "reshape",
    "scale",
    "maximum",
    "clip",
    "gather_rows",
    "gaussian_noise",
    "gradient_check",
    "forward_op",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, exp(neg(log(other))))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Gradients:
    """Result of :meth:`Tape.backward`; missing entries read as zeros."""

    def __init__(self, slots: list, shapes: list):
        self._slots = slots
        self._shapes = shapes

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None:
            return np.zeros(t.shape)
        g = self._slots[t.node]
        if g is None:
            return np.zeros(self._shapes[t.node])
        return np.broadcast_to(g, self._shapes[t.node]).astype(np.float64, copy=False)

    def node(self, node_id: int) -> np.ndarray:
        g = self._slots[node_id]
        return np.zeros(self._shapes[node_id]) if g is None else g


class Tape:
    """Ordered record of ops; node ids are positions, so order is topological."""

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, value) -> Tensor:
        return self._record(np.array(value, dtype=np.float64), (), None)

    def _record(self, value: np.ndarray, parents: tuple[int, ...], backward) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        node = len(self._parents)
        self._parents.append(parents)
        self._backward.append(backward)
        self._shapes.append(value.shape)
        return Tensor(value, self, node)

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        slots: list = [None] * len(self._parents)
        slots[loss.node] = np.ones(self._shapes[loss.node])
        for node in range(loss.node, -1, -1):
            g = slots[node]
            fn = self._backward[node]
            if g is None or fn is None:
                continue
            for parent, pg in zip(self._parents[node], fn(g)):
                if parent < 0 or pg is None:
                    continue
                slots[parent] = pg if slots[parent] is None else slots[parent] + pg
        return Gradients(slots, self._shapes)


def _tape_of(*ts: Tensor) -> Tape | None:
    for t in ts:
        if t.tape is not None:
            return t.tape
    return None


def _result(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    for t in inputs:
        if t.tape is not None and t.tape is not tape:
            raise TapeError("operands recorded on different tapes")
    parents = tuple(t.node if t.tape is tape else -1 for t in inputs)
    return tape._record(value, parents, backward)


# -- broadcasting ----------------------------------------------------------------


def _check_broadcast(kind: str, a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"{kind}: shapes {a} and {b} do not conform (leading-batch broadcast only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# -- primitive ops --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.tape is not None else None,
            _unbroadcast(g * ad, bd.shape) if b.tape is not None else None,
        )

    return _result(ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """2-D by 2-D matrix product; a leading batch dim on ``a`` is allowed."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.tape is not None else None
        gb = None
        if b.tape is not None:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow; inputs must stay below ~709")
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError(f"log: nonpositive input (min {ad.min():.3g})")
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _result(out, (a,), lambda g: (0.5 * g / out,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def concat(ts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in ts], axis=axis), ts, backward)


def slice(a, idx) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(np.asarray(out), (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


_kink_monitor: list | None = None


@contextlib.contextmanager
def _watch_kinks():
    global _kink_monitor
    prev, _kink_monitor = _kink_monitor, []
    try:
        yield _kink_monitor
    finally:
        _kink_monitor = prev


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a.shape, b.shape)
    diff = a.data - b.data
    if _kink_monitor is not None and diff.size:
        _kink_monitor.append(float(np.abs(diff).min()))
    pick_a = diff >= 0
    sa, sb = a.shape, b.shape
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def gather_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]``; backward scatters additively into rows."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table of {table.shape[0]} rows")
    rows, width = table.shape

    def backward(g):
        full = np.zeros((rows, width))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return _result(table.data[ids], (table,), backward)


_FORWARD_KINDS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "square": square,
    "sum-axis": sum,
    "mean-axis": mean,
    "concat": concat,
    "slice": slice,
    "scalar-scale": scale,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by its kind name."""
    try:
        fn = _FORWARD_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_FORWARD_KINDS)}")
    return fn(*operands, **kwargs)


# -- randomness -------------------------------------------------------------------


class RandomSource:
    """Seeded Philox stream; ``stream`` picks an independent substream."""

    algorithm = "philox"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.draws = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return out

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.draws += out.size
        return out

    def integers(self, high: int, shape=None) -> np.ndarray:
        out = self._gen.integers(0, high, shape)
        self.draws += np.size(out)
        return out

    def choice(self, n: int, p: np.ndarray) -> int:
        self.draws += 1
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def gaussian_noise(shape, source: RandomSource) -> Tensor:
    return Tensor(source.normal(shape))


# -- finite-difference checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    skipped: bool = False
    reason: str = ""

    def passed(self, tol: float) -> bool:
        return self.skipped or self.max_rel_error < tol


def gradient_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    kink_tol: float | None = None,
    names: Iterable[str] | None = None,
) -> GradCheckResult:
    """Compare tape gradients of ``fn`` to central differences.

    The error for each named parameter is ``|a - cd| / max(|a|, |cd|, floor)``
    measured in the Euclidean norm over that parameter's entries; the result
    is the max over parameters. ``floor = 1e-6 * max(1, |loss|)`` keeps
    round-off from dominating gradients that are numerically zero. If ``fn`` evaluates a ``maximum`` within
    ``kink_tol`` (default ``10 * h``) of its tie point, the check is skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    kink_tol = 10 * h if kink_tol is None else kink_tol
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    with _watch_kinks() as gaps:
        loss = fn(leaves)
    if gaps and min(gaps) < kink_tol:
        return GradCheckResult(
            math.nan, skipped=True, reason=f"hinge kink within {min(gaps):.2e} of evaluation point"
        )
    floor = 1e-6 * max(1.0, abs(float(loss.data)))
    if loss.tape is None:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    else:
        g = tape.backward(loss)
        grads = {k: g[leaves[k]] for k in params}

    def value(p):
        return float(fn({k: Tensor(v) for k, v in p.items()}).data)

    per: dict[str, float] = {}
    for name in names if names is not None else params:
        base = params[name]
        cd = np.zeros_like(base)
        flat = base.reshape(-1)
        cflat = cd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = value(params)
            flat[i] = old - h
            fm = value(params)
            flat[i] = old
            cflat[i] = (fp - fm) / (2 * h)
        a = grads[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(cd), floor)
        per[name] = float(np.linalg.norm(a - cd) / denom)
    return GradCheckResult(max(per.values()) if per else 0.0, per)
