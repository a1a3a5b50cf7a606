"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Single-precision tensors, a dynamically built backward graph, and just the
operations a small acoustic network needs: matmul, temporal convolution,
pointwise nonlinearities, reductions and log-softmax, plus SGD with momentum.

Tensors are immutable after construction and safe to share across threads.
A backward graph belongs to one thread; run independent graphs in parallel
instead of sharing one.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


class Tensor:
    """Immutable row-major float32 array with a fixed shape."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, order="C")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array without copying.
        out = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.setflags(write=False)
        out._data = arr
        return out

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._adopt(np.zeros(shape, dtype=np.float32))

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """Backward-graph record: parent variables plus the gradient rule."""

    __slots__ = ("parents", "grad_fn", "name")

    def __init__(self, parents, grad_fn, name):
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name


class Variable:
    """A tensor value paired with an accumulated gradient and graph node."""

    __slots__ = ("value", "_grad", "requires_grad", "node")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self._grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        """Accumulated gradient; zeros until backward has contributed."""
        if self._grad is None:
            return Tensor.zeros(self.value.shape)
        return Tensor._adopt(self._grad)

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, contribution: np.ndarray):
        """Add an externally computed gradient of the same shape."""
        contribution = np.asarray(contribution, dtype=np.float32)
        if contribution.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {contribution.shape} != value shape {self.value.shape}"
            )
        if self._grad is None:
            self._grad = contribution.copy()
        else:
            self._grad = self._grad + contribution

    def backward(self, grad=None):
        backward(self, grad)

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        op = self.node.name if self.node is not None else "leaf"
        return f"Variable(shape={self.shape}, op={op})"

    # Operator sugar; scalars are plain Python numbers.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(value_arr, parents, grad_fn, name) -> Variable:
    out = Variable(Tensor._adopt(value_arr))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(tuple(parents), grad_fn, name)
    return out


def _as_variable(x) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(Tensor(x))


def backward(root: Variable, grad=None):
    """Propagate gradients from root through the graph.

    With no seed, root must be a scalar (size 1) and the seed is 1. A seed of
    the root's shape starts backpropagation from a non-scalar value, which is
    how externally computed losses (e.g. the sequence criteria) inject their
    emission gradients. Repeated calls accumulate into .grad.
    """
    if grad is None:
        if root.value.size != 1:
            raise ContractError(
                f"backward() needs a scalar root, got shape {root.value.shape}"
            )
        seed = np.ones(root.value.shape, dtype=np.float32)
    else:
        seed = np.asarray(grad, dtype=np.float32)
        if seed.shape != root.value.shape:
            raise DimensionError(
                f"seed shape {seed.shape} != root shape {root.value.shape}"
            )

    # Iterative post-order over the graph; recursion would cap deep chains.
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        var, expanded = stack.pop()
        if expanded:
            order.append(var)
            continue
        if id(var) in visited:
            continue
        visited.add(id(var))
        stack.append((var, True))
        if var.node is not None:
            for parent in var.node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

    table = {id(root): seed}
    for var in reversed(order):
        g = table.pop(id(var), None)
        if g is None:
            continue
        if var.requires_grad:
            var.accumulate_grad(g)
        if var.node is None:
            continue
        parent_grads = var.node.grad_fn(g)
        for parent, pg in zip(var.node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in table:
                table[key] = table[key] + pg
            else:
                table[key] = pg


def matmul(a: Variable, b: Variable) -> Variable:
    """Matrix product of an m-by-k and a k-by-n variable."""
    a, b = _as_variable(a), _as_variable(b)
    av, bv = a.value.data, b.value.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} x {bv.shape}")
    out = av @ bv

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _make(out, (a, b), grad_fn, "matmul")


def conv1d(x: Variable, kernel: Variable, stride: int = 1, padding: int = 0) -> Variable:
    """Temporal cross-correlation of a T-by-Cin input with a K-by-Cin-by-Cout kernel.

    Output length is floor((T + 2*padding - K) / stride) + 1.
    """
    x, kernel = _as_variable(x), _as_variable(kernel)
    xv, kv = x.value.data, kernel.value.data
    if xv.ndim != 2 or kv.ndim != 3 or xv.shape[1] != kv.shape[1]:
        raise DimensionError(f"conv1d shapes {xv.shape} x {kv.shape}")
    if stride < 1:
        raise DimensionError(f"conv1d stride must be >= 1, got {stride}")
    t, cin = xv.shape
    k, _, cout = kv.shape
    t_out = (t + 2 * padding - k) // stride + 1
    if k > t + 2 * padding or t_out < 1:
        raise DimensionError(
            f"conv1d kernel {k} does not fit input length {t} with padding {padding}"
        )

    xp = np.pad(xv, ((padding, padding), (0, 0))) if padding else xv
    # im2col: (t_out, k) window indices into the padded time axis.
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    patches = xp[idx].reshape(t_out, k * cin)
    kmat = kv.reshape(k * cin, cout)
    out = patches @ kmat

    def grad_fn(g):
        gk = (patches.T @ g).reshape(k, cin, cout)
        gpatches = (g @ kmat.T).reshape(t_out, k, cin)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, gpatches)
        gx = gxp[padding : padding + t] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), grad_fn, "conv1d")


def relu(x: Variable) -> Variable:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = _as_variable(x)
    mask = x.value.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.value.data, 0.0), (x,), grad_fn, "relu")


def sigmoid(x: Variable) -> Variable:
    x = _as_variable(x)
    xv = x.value.data.astype(np.float64)
    s = (1.0 / (1.0 + np.exp(-xv))).astype(np.float32)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), grad_fn, "sigmoid")


def log(x: Variable) -> Variable:
    x = _as_variable(x)
    xv = x.value.data

    def grad_fn(g):
        return (g / xv,)

    return _make(np.log(xv), (x,), grad_fn, "log")


def _elementwise_pair(a, b, opname):
    """Split an elementwise pair into (variable, variable) or (variable, scalar)."""
    if isinstance(a, Variable) and isinstance(b, Variable):
        if a.value.shape != b.value.shape:
            raise DimensionError(
                f"{opname} shapes {a.value.shape} != {b.value.shape}"
            )
        return a, b, None
    if isinstance(a, Variable):
        return a, None, float(b)
    return b, None, float(a)


def add(a, b) -> Variable:
    """Elementwise sum of equal-shape variables, or variable + scalar."""
    x, y, c = _elementwise_pair(a, b, "add")
    if y is not None:
        def grad_fn(g):
            return g, g

        return _make(x.value.data + y.value.data, (x, y), grad_fn, "add")

    def grad_fn(g):
        return (g,)

    return _make(x.value.data + np.float32(c), (x,), grad_fn, "add")


def sub(a, b) -> Variable:
    """Elementwise difference; either operand may be a scalar."""
    if isinstance(a, Variable) and isinstance(b, Variable):
        if a.value.shape != b.value.shape:
            raise DimensionError(f"sub shapes {a.value.shape} != {b.value.shape}")

        def grad_fn(g):
            return g, -g

        return _make(a.value.data - b.value.data, (a, b), grad_fn, "sub")
    if isinstance(a, Variable):
        def grad_fn(g):
            return (g,)

        return _make(a.value.data - np.float32(b), (a,), grad_fn, "sub")

    def grad_fn(g):
        return (-g,)

    return _make(np.float32(a) - b.value.data, (b,), grad_fn, "sub")


def mul(a, b) -> Variable:
    """Elementwise product of equal-shape variables, or scalar scaling."""
    x, y, c = _elementwise_pair(a, b, "mul")
    if y is not None:
        xv, yv = x.value.data, y.value.data

        def grad_fn(g):
            return g * yv, g * xv

        return _make(xv * yv, (x, y), grad_fn, "mul")

    def grad_fn(g):
        return (g * np.float32(c),)

    return _make(x.value.data * np.float32(c), (x,), grad_fn, "mul")


def reduce_sum(x: Variable) -> Variable:
    """Sum of all elements, as a scalar variable."""
    x = _as_variable(x)
    shape = x.value.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(np.float32),)

    return _make(np.sum(x.value.data, dtype=np.float32), (x,), grad_fn, "reduce_sum")


def reduce_mean(x: Variable) -> Variable:
    """Mean of all elements, as a scalar variable."""
    x = _as_variable(x)
    shape = x.value.shape
    n = x.value.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, shape).astype(np.float32),)

    return _make(
        np.asarray(np.mean(x.value.data), dtype=np.float32), (x,), grad_fn, "reduce_mean"
    )


def log_softmax(x: Variable) -> Variable:
    """Row-wise log-softmax over the last axis, max-subtracted for stability."""
    x = _as_variable(x)
    xv = x.value.data
    if not np.all(np.isfinite(xv)):
        from .errors import NumericError

        raise NumericError("log_softmax input contains non-finite values")
    m = np.max(xv, axis=-1, keepdims=True)
    shifted = (xv - m).astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = (shifted - lse).astype(np.float32)
    softmax = np.exp(out)

    def grad_fn(g):
        return (g - softmax * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), grad_fn, "log_softmax")


class SGD:
    """Stochastic gradient descent with classical momentum.

    step() applies v <- momentum*v + grad; w <- w - lr*v and leaves the
    gradients in place for the caller to zero.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ContractError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros(p.value.shape, dtype=np.float32) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            np.multiply(v, self.momentum, out=v)
            v += p.grad.data
            p.value = Tensor._adopt(p.value.data - self.lr * v)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
