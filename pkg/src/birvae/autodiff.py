"""Dense float64 tensors with reverse-mode differentiation, Adam, and a seeded RNG.

Only the operations the encoder, decoder and loss terms need are provided.
Each op records its operands and a closure mapping the output adjoint to one
adjoint per operand; :func:`backward` walks the graph in reverse topological
order and accumulates into the ``grad`` of trainable leaves.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericalError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def Parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    t = Tensor(data, requires_grad=True, name=name)
    t.grad = np.zeros_like(t.data)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op: str, a: Tensor, b: Tensor, f) -> np.ndarray:
    try:
        return f(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ----------------------------------------------------------------------------
# operations

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, bias) -> Tensor:
    """``x @ w + bias`` with the bias broadcast over rows."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not fit weight {w.shape}")
    if bias.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not fit weight {w.shape}")

    def fn(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0))

    return _result(x.data @ w.data + bias.data, (x, w, bias), fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("add", a, b, np.add)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("sub", a, b, np.subtract)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("mul", a, b, np.multiply)
    return _result(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def clamp_min(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; no gradient flows through clamped entries."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(x.data.sum() / n, (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def pairwise_sqdist(a, b) -> Tensor:
    """``D[i, j] = ||a[i] - b[j]||^2`` computed from explicit differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: {a.shape} and {b.shape} differ in width")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        if b.requires_grad:
            gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _result(out, (a, b), fn)


def mse(a, b) -> Tensor:
    """Per-row sum of squared differences, averaged over rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    rows = a.shape[0]

    def fn(g):
        d = (2.0 / rows) * g * diff
        return d, -d

    return _result(np.einsum("ij,ij->", diff, diff) / rows, (a, b), fn)


# ----------------------------------------------------------------------------
# graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its operands."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every trainable leaf."""
    if root.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            adjoint[key] = adjoint[key] + gp if key in adjoint else gp


def nonfinite_grads(params: Iterable[Tensor]) -> list[str]:
    bad = []
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad.append(p.name or f"param[{i}]")
    return bad


# ----------------------------------------------------------------------------
# optimiser

class Adam:
    """Adam with bias correction; one moment pair per parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        bad = nonfinite_grads(self.params)
        if bad:
            raise NumericalError(f"non-finite gradient in {', '.join(bad)} at step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ----------------------------------------------------------------------------
# randomness

class Rng:
    """Seeded PCG64 stream; the same seed gives the same draws on every platform."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) & 0xFFFFFFFFFFFFFFFF
        else:
            self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
            self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, a pure function of this stream's seed."""
        return [Rng(child) for child in self._seq.spawn(n)]


def sample_normal(rng: Rng, shape, mean: float = 0.0, sigma: float = 1.0) -> Tensor:
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    return Tensor(mean + sigma * rng.standard_normal(shape))
