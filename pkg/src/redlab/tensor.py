"""Dense tensors with tape-based reverse-mode autodiff.

Every op is a :class:`Function` subclass with a ``forward`` over raw numpy
arrays and a ``backward`` that maps the upstream gradient to one gradient per
tensor input.  Graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

PRECISIONS = {"train": np.float32, "verify": np.float64}

_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # Internal constructor: takes ownership of arr without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._ctx = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded primitive.  Subclasses implement forward/backward on arrays."""

    def __init__(self):
        self.parents: tuple = ()
        self.saved: dict = {}

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad=needs)
        if needs:
            fn.parents = inputs
            result._ctx = fn
        return result

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @property
    def kind(self) -> str:
        return type(self).__name__


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to_vector(grad, n):
    return grad.reshape(-1, n).sum(axis=0)


class Add(Function):
    def forward(self, a, b):
        self.saved["bcast"] = _check_broadcast(a, b, "add")
        return a + b

    def backward(self, grad):
        gb = _reduce_to_vector(grad, grad.shape[-1]) if self.saved["bcast"] else grad
        return grad, gb


class Sub(Function):
    def forward(self, a, b):
        self.saved["bcast"] = _check_broadcast(a, b, "sub")
        return a - b

    def backward(self, grad):
        gb = _reduce_to_vector(grad, grad.shape[-1]) if self.saved["bcast"] else grad
        return grad, -gb


class Mul(Function):
    def forward(self, a, b):
        self.saved["bcast"] = _check_broadcast(a, b, "mul")
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        ga = grad * b
        gb = grad * a
        if self.saved["bcast"]:
            gb = _reduce_to_vector(gb, b.shape[0])
        return ga, gb


class Scale(Function):
    def forward(self, a, factor):
        self.saved["factor"] = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.saved["factor"]),)


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch ``add``/``mul``/``sub`` by name."""
    try:
        fn = {"add": add, "mul": mul, "sub": sub}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and shape


class MatMul(Function):
    """``a[..., m, k] @ b[k, n]`` (shared weight) or batched with equal leading dims."""

    def forward(self, a, b):
        if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
        self.saved["a"], self.saved["b"] = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        if b.ndim == 2:
            ga = np.matmul(grad, b.T)
            k, n = b.shape
            gb = np.matmul(a.reshape(-1, k).T, grad.reshape(-1, n))
        else:
            ga = np.matmul(grad, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return ga, gb


class Reshape(Function):
    def forward(self, a, shape):
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


class Transpose(Function):
    def forward(self, a, axes):
        self.saved["axes"] = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        inv = np.argsort(self.saved["axes"])
        return (np.ascontiguousarray(np.transpose(grad, inv)),)


class Sum(Function):
    def forward(self, a):
        self.saved["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


def sum_all(a: Tensor) -> Tensor:
    return Sum.apply(a)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


class Softmax(Function):
    def forward(self, a, mask=None):
        if a.shape[-1] == 0:
            raise ShapeError("softmax over an empty axis")
        x = a if mask is None else np.where(mask, a, -np.inf)
        x = x - x.max(axis=-1, keepdims=True)
        e = np.exp(x)
        y = e / e.sum(axis=-1, keepdims=True)
        self.saved["y"] = y
        return y

    def backward(self, grad):
        y = self.saved["y"]
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Function):
    """tanh approximation, as used by GPT-2/BERT code bases."""

    def forward(self, a):
        c = a.dtype.type(_GELU_C)
        k = a.dtype.type(0.044715)
        half = a.dtype.type(0.5)
        t = np.tanh(c * (a + k * a**3))
        self.saved["a"], self.saved["t"] = a, t
        return half * a * (1 + t)

    def backward(self, grad):
        a, t = self.saved["a"], self.saved["t"]
        c = a.dtype.type(_GELU_C)
        k = a.dtype.type(0.044715)
        half = a.dtype.type(0.5)
        dt = (1 - t * t) * c * (1 + 3 * k * a * a)
        return (grad * (half * (1 + t) + half * a * dt),)


class ReLU(Function):
    def forward(self, a):
        self.saved["mask"] = a > 0
        return np.where(self.saved["mask"], a, a.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.saved["mask"], grad, grad.dtype.type(0)),)


class LayerNorm(Function):
    """Normalise over the last axis; affine params are optional inputs."""

    def forward(self, x, weight=None, bias=None, eps=1e-5):
        if x.shape[-1] == 0:
            raise ShapeError("layer_norm over an empty axis")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        self.saved.update(xhat=xhat, inv=inv, weight=weight)
        out = xhat
        if weight is not None:
            out = out * weight
        if bias is not None:
            out = out + bias
        return out

    def backward(self, grad):
        xhat, inv, w = self.saved["xhat"], self.saved["inv"], self.saved["weight"]
        n = xhat.shape[-1]
        grads = []
        gx = grad * w if w is not None else grad
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads.append(dx)
        if w is not None:
            grads.append(_reduce_to_vector(grad * xhat, n))
        if len(self.parents) == 3:
            grads.append(_reduce_to_vector(grad, n))
        return tuple(grads)


class CrossEntropy(Function):
    """Mean cross-entropy of ``logits[N, C]`` against integer labels."""

    def forward(self, logits, labels):
        if logits.ndim != 2:
            raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
        n, c = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match {n} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValueError(f"cross_entropy: label out of range [0, {c})")
        z = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logz
        self.saved.update(p=np.exp(logp), labels=labels)
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        p, labels = self.saved["p"], self.saved["labels"]
        n = p.shape[0]
        g = p.copy()
        g[np.arange(n), labels] -= 1
        return (g * (grad / n),)


class Embedding(Function):
    """Row gather ``weight[ids]``; ids is a constant integer array."""

    def forward(self, weight, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
            raise ValueError(f"embedding: id out of range [0, {weight.shape[0]})")
        self.saved.update(ids=ids, rows=weight.shape[0])
        return weight[ids]

    def backward(self, grad):
        ids = self.saved["ids"]
        d = grad.shape[-1]
        g = np.zeros((self.saved["rows"], d), dtype=grad.dtype)
        np.add.at(g, ids.reshape(-1), grad.reshape(-1, d))
        return (g,)


class MeanPool(Function):
    """Average ``x[B, T, d]`` over positions where ``mask[B, T]`` is true."""

    def forward(self, x, mask=None):
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        w = mask.astype(x.dtype)
        denom = np.maximum(w.sum(axis=1, keepdims=True), 1)
        w = w / denom
        self.saved["w"] = w
        return np.einsum("bt,btd->bd", w, x)

    def backward(self, grad):
        w = self.saved["w"]
        return (w[:, :, None] * grad[:, None, :],)


def softmax(a: Tensor, mask=None) -> Tensor:
    return Softmax.apply(a, mask=mask)


def gelu(a: Tensor) -> Tensor:
    return GELU.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def layer_norm(x: Tensor, weight=None, bias=None, eps=1e-5) -> Tensor:
    if weight is None and bias is not None:
        raise ValueError("layer_norm: bias without weight is not supported")
    inputs = [x] + [t for t in (weight, bias) if t is not None]
    return LayerNorm.apply(*inputs, eps=eps)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return CrossEntropy.apply(logits, labels=np.asarray(labels))


def embedding(weight: Tensor, ids) -> Tensor:
    return Embedding.apply(weight, ids=np.asarray(ids))


def mean_pool(x: Tensor, mask=None) -> Tensor:
    return MeanPool.apply(x, mask=mask)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    pending = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._ctx is None:
            continue
        grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


@dataclass(frozen=True)
class GraphNode:
    op: str
    inputs: tuple
    output: int


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple

    def __len__(self):
        return len(self.nodes)


def trace(root: Tensor) -> ComputeGraph:
    """Recorded ops reachable from ``root`` in execution order.

    Ids are positions in the topological order, so two identical runs yield
    equal graphs regardless of object identity.
    """
    order = _topo_order(root)
    ids = {id(t): i for i, t in enumerate(order)}
    nodes = []
    for t in order:
        if t._ctx is None:
            continue
        ins = tuple(ids.get(id(p), -1) for p in t._ctx.parents)
        nodes.append(GraphNode(t._ctx.kind, ins, ids[id(t)]))
    return ComputeGraph(tuple(nodes))
