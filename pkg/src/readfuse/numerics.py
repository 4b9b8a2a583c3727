"""Dense arrays with reverse-mode differentiation, gradient checking and Adadelta.

Graphs are recorded define-by-run: every operation on a :class:`Tensor` returns
a new node holding its forward value, its parents and a closure that pushes the
output gradient back to them.  :func:`backward` walks the recorded graph in
reverse topological order and returns a gradient for every named leaf reachable
from the scalar output.

Floating dtype follows the inputs (float32 by default); gradient checks upcast
to float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float32
MASK_FILL = -1e9


class GraphError(Exception):
    """Base class for evaluation errors; carries the offending op name."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    try:
        return _state.grad
    except AttributeError:
        _state.grad = True
        return True


def _check_finite() -> bool:
    try:
        return _state.finite
    except AttributeError:
        _state.finite = True
        return True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents or backward closures."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _check_finite()
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(DTYPE)
    return a


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{label})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _check_finite() and not np.isfinite(data).all():
        raise NonFiniteError(op, f"non-finite value in output of shape {data.shape}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    y = _binary("add", np.add, a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", y, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    y = _binary("sub", np.subtract, a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", y, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    y = _binary("mul", np.multiply, a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node("mul", y, (a, b), bw)


def neg(a) -> Tensor:
    a = tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    return _node("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = tensor(a)
    on = a.data > 0
    return _node("relu", a.data * on, (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    # split on sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _node("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = tensor(a)
    if (a.data <= 0).any():
        raise GraphError("log", "argument must be strictly positive")
    x = a.data
    return _node("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        y = np.exp(a.data)
    return _node("exp", y, (a,), lambda g: (g * y,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    a = tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return _node("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra and shape ----------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; supports (..., n, k) @ (k, m) and batched (..., n, k) @ (..., k, m)."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM instead of numpy's per-matrix loop
        y = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        try:
            y = np.matmul(ad, bd)
        except ValueError as exc:
            raise ShapeError("matmul", f"incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = (g[..., None] * ad).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _node("matmul", y, (a, b), bw)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node("concat", y, ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    try:
        y = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", f"incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % y.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _node("stack", y, ts, bw)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return _node("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    """Basic slicing (ints, slices, None, Ellipsis)."""
    a = tensor(a)
    y = a.data[idx]

    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _node("slice", y, (a,), bw)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", y, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row-max stabilized softmax; entries where ``mask`` is 0 receive no mass."""
    a = tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask > 0, x, MASK_FILL).astype(x.dtype, copy=False)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    if mask is not None:
        e = e * (mask > 0)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node("softmax", y, (a,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for table with {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node("embedding", table.data[ids], (table,), bw)


def gather(a, index) -> Tensor:
    """Pick one entry per row along the last axis: ``a[..., index[...]]``."""
    a = tensor(a)
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError("gather", f"index shape {index.shape} does not match {a.shape[:-1]}")
    idx = index[..., None]
    y = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def bw(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _node("gather", y, (a,), bw)


# -- graph evaluation --------------------------------------------------------


def evaluate(fn: Callable[..., Mapping[str, Tensor] | Tensor], bindings: Mapping[str, object],
             requires_grad: bool = True) -> dict[str, Tensor]:
    """Bind named inputs as leaves, run ``fn`` and return its named outputs."""
    leaves = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
              for k, v in bindings.items()}
    out = fn(**leaves)
    if isinstance(out, Tensor):
        out = {"output": out}
    return dict(out)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], {id(root)}
    stack_ = [(root, iter(root.parents))]
    while stack_:
        node, it = stack_[-1]
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack_.append((p, iter(p.parents)))
                break
        else:
            stack_.pop()
            order.append(node)
    return order


def backward(output: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar; returns ``{leaf name: gradient}``."""
    if output.data.size != 1:
        raise ShapeError("backward", f"output must be scalar, got shape {output.shape}")
    grads: dict[str, np.ndarray] = {}
    if not output.requires_grad:
        return grads
    order = _topological(output)
    acc = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.name is not None:
                grads[node.name] = grads[node.name] + g if node.name in grads else g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + pg
            else:
                acc[key] = pg
    return grads


def finite_difference_check(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                            parameters: Mapping[str, np.ndarray], epsilon: float = 1e-4,
                            sample_count: int = 100, seed: int = 0,
                            dtype=np.float64, floor: float = 1e-7) -> float:
    """Compare :func:`backward` against central differences on sampled coordinates.

    ``loss_fn`` receives a dict of named leaf tensors and must return a scalar
    tensor.  Coordinates are drawn by first picking a parameter uniformly, then
    a position within it.  Returns the worst relative error
    ``|a - n| / max(|a|, |n|)``.  Pairs where both sides are below ``floor``
    count as 0: at that size a central difference is mostly rounding noise.
    """
    params = {k: np.array(v, dtype=dtype) for k, v in parameters.items()}

    def run(p, grad):
        leaves = {k: Tensor(v, requires_grad=grad, name=k) for k, v in p.items()}
        with finite_checks(True):
            return loss_fn(leaves)

    analytic = backward(run(params, True))
    rng = np.random.default_rng(seed)
    names = sorted(params)
    worst = 0.0
    with no_grad():
        for _ in range(sample_count):
            name = names[rng.integers(len(names))]
            arr = params[name]
            flat = int(rng.integers(arr.size))
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = run(params, False).item()
            arr[idx] = orig - epsilon
            down = run(params, False).item()
            arr[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[name][idx]) if name in analytic else 0.0
            scale = max(abs(a), abs(numeric))
            err = 0.0 if scale < floor else abs(a - numeric) / scale
            worst = max(worst, err)
    return worst


# -- optimisation --------------------------------------------------------------


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                  state: AdadeltaState) -> tuple[dict[str, np.ndarray], AdadeltaState]:
    """Zeiler's Adadelta update, applied in place; parameters without a gradient are skipped."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("adadelta", f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        eg = state.sq_grad.get(name)
        if eg is None:
            eg = state.sq_grad[name] = np.zeros_like(p)
            state.sq_update[name] = np.zeros_like(p)
        ex = state.sq_update[name]
        eg *= rho
        eg += (1 - rho) * g * g
        delta = np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1 - rho) * delta * delta
        p -= delta.astype(p.dtype, copy=False)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def init_uniform(shape, rng: np.random.Generator, scale: float = 0.08) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)
