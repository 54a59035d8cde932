"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays; a Graph records every primitive application in
insertion order, which is also the topological order used by backward().
There is no implicit broadcasting: every primitive demands exactly
conforming shapes, except ``scale`` which multiplies by a python scalar.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape contract."""


class GraphError(RuntimeError):
    """Raised on structural misuse of a Graph (non-scalar loss, strict log, ...)."""


class Tensor:
    """A dense real-valued array, optionally a differentiable graph leaf.

    ``node_id`` is set once the tensor participates in a Graph; plain data
    (constants) keep ``node_id=None``. ``grad`` accumulates additively across
    backward passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "frozen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.frozen = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        t.frozen = self.frozen
        return t

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


class _Node:
    """One recorded primitive application."""

    __slots__ = ("op", "input_ids", "backward", "shape", "leaf")

    def __init__(self, op, input_ids, backward, shape, leaf=None):
        self.op = op
        self.input_ids = input_ids
        self.backward = backward  # fn(out_grad) -> tuple of input grads (or None)
        self.shape = shape
        self.leaf = leaf  # Tensor, for leaf nodes only


class Graph:
    """Append-only record of primitive applications plus the tape walker.

    A graph (and the tensors it produced) belongs to one execution context;
    independent graphs may run concurrently. With ``grad_enabled=False`` the
    graph still records op/shape entries (cheap) but no backward closures.
    """

    def __init__(self, dtype=np.float32, grad_enabled: bool = True, strict: bool = True):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError("graph dtype must be float32 or float64")
        self.grad_enabled = grad_enabled
        self.strict = strict
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}

    # ---- graph construction -------------------------------------------------

    def _new_tensor(self, data: np.ndarray) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.frozen = False
        return t

    def _leaf_id(self, t: Tensor) -> int | None:
        """Register a differentiable input the first time it is seen."""
        if not t.requires_grad:
            return None
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None, t.data.shape, leaf=t))
            self._leaf_ids[key] = nid
        return nid

    def _record(self, op: str, inputs, out: np.ndarray, backward) -> Tensor:
        ids = tuple(self._leaf_id(t) if t.node_id is None else t.node_id for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward if self.grad_enabled else None, out.shape))
        res = self._new_tensor(out)
        res.node_id = nid
        return res

    def _coerce(self, t, op: str) -> Tensor:
        if not isinstance(t, Tensor):
            t = Tensor(np.asarray(t, dtype=self.dtype))
        if t.data.dtype != self.dtype:
            if t.requires_grad:
                raise GraphError(
                    f"{op}: parameter dtype {t.data.dtype} does not match graph dtype {self.dtype}"
                )
            t = self._new_tensor(t.data.astype(self.dtype))
        return t

    # ---- primitives ----------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = self._coerce(a, "matmul"), self._coerce(b, "matmul")
        A, B = a.data, b.data
        ok = (
            A.ndim == B.ndim
            and A.ndim in (2, 3)
            and A.shape[-1] == B.shape[-2]
            and (A.ndim == 2 or A.shape[0] == B.shape[0])
        )
        if not ok:
            raise ShapeError(f"matmul: shapes {A.shape} x {B.shape} do not conform")
        out = A @ B

        def backward(g):
            if A.ndim == 2:
                return g @ B.T, A.T @ g
            return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

        return self._record("matmul", (a, b), out, backward)

    def _elementwise_pair(self, op, a, b):
        a, b = self._coerce(a, op), self._coerce(b, op)
        if a.data.shape != b.data.shape:
            raise ShapeError(f"{op}: shapes {a.data.shape} vs {b.data.shape} differ")
        return a, b

    def add(self, a, b) -> Tensor:
        a, b = self._elementwise_pair("add", a, b)
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def sub(self, a, b) -> Tensor:
        a, b = self._elementwise_pair("sub", a, b)
        return self._record("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a, b) -> Tensor:
        a, b = self._elementwise_pair("mul", a, b)
        A, B = a.data, b.data
        return self._record("mul", (a, b), A * B, lambda g: (g * B, g * A))

    def scale(self, a, c: float) -> Tensor:
        a = self._coerce(a, "scale")
        c = float(c)
        return self._record("scale", (a,), a.data * c, lambda g: (g * c,))

    def sum(self, a) -> Tensor:
        a = self._coerce(a, "sum")
        out = np.asarray(a.data.sum(), dtype=self.dtype)
        shape = a.data.shape
        return self._record("sum", (a,), out, lambda g: (np.full(shape, g, dtype=g.dtype),))

    def mean(self, a) -> Tensor:
        a = self._coerce(a, "mean")
        out = np.asarray(a.data.mean(), dtype=self.dtype)
        shape, n = a.data.shape, a.data.size
        return self._record("mean", (a,), out, lambda g: (np.full(shape, g / n, dtype=g.dtype),))

    def transpose(self, a, axes=None) -> Tensor:
        a = self._coerce(a, "transpose")
        if a.data.ndim < 2:
            raise ShapeError(f"transpose: rank {a.data.ndim} < 2")
        if axes is None:
            axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
        axes = tuple(axes)
        if sorted(axes) != list(range(a.data.ndim)):
            raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.data.ndim}")
        inv = tuple(np.argsort(axes))
        return self._record(
            "transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
            lambda g: (g.transpose(inv),),
        )

    def reshape(self, a, shape) -> Tensor:
        a = self._coerce(a, "reshape")
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.data.size:
            raise ShapeError(f"reshape: {a.data.shape} -> {shape} changes element count")
        old = a.data.shape
        return self._record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))

    def concat(self, parts, axis: int = 0) -> Tensor:
        parts = [self._coerce(p, "concat") for p in parts]
        if not parts:
            raise ShapeError("concat: empty input list")
        axis = axis % parts[0].data.ndim
        base = list(parts[0].data.shape)
        for p in parts:
            s = list(p.data.shape)
            s[axis] = base[axis]
            if s != base:
                raise ShapeError(f"concat: incompatible shapes {[tuple(q.data.shape) for q in parts]}")
        out = np.concatenate([p.data for p in parts], axis=axis)
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            return tuple(
                np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                for i in range(len(sizes))
            )

        return self._record("concat", tuple(parts), out, backward)

    def slice(self, a, axis: int, start: int, stop: int) -> Tensor:
        a = self._coerce(a, "slice")
        axis = axis % a.data.ndim
        n = a.data.shape[axis]
        if not (0 <= start < stop <= n):
            raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.data.shape}")
        idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.data.ndim))
        out = np.ascontiguousarray(a.data[idx])
        shape = a.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return self._record("slice", (a,), out, backward)

    def exp(self, a) -> Tensor:
        a = self._coerce(a, "exp")
        out = np.exp(a.data)
        return self._record("exp", (a,), out, lambda g: (g * out,))

    def log(self, a) -> Tensor:
        a = self._coerce(a, "log")
        if self.strict and not np.all(a.data > 0):
            raise GraphError("log: non-positive input in strict mode")
        A = a.data
        return self._record("log", (a,), np.log(A), lambda g: (g / A,))

    def tanh(self, a) -> Tensor:
        a = self._coerce(a, "tanh")
        out = np.tanh(a.data)
        return self._record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def gelu(self, a) -> Tensor:
        a = self._coerce(a, "gelu")
        x = a.data
        inner = GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return self._record("gelu", (a,), out, backward)

    def softmax_lastdim(self, a) -> Tensor:
        a = self._coerce(a, "softmax_lastdim")
        x = a.data
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._record("softmax_lastdim", (a,), out, backward)

    def layernorm_lastdim(self, a, eps: float = LAYERNORM_EPS) -> Tensor:
        a = self._coerce(a, "layernorm_lastdim")
        x = a.data
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out = (x - mu) * inv

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * out).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - out * gx),)

        return self._record("layernorm_lastdim", (a,), out, backward)

    def mse(self, a, b) -> Tensor:
        a, b = self._elementwise_pair("mse", a, b)
        diff = a.data - b.data
        out = np.asarray(np.mean(diff * diff), dtype=self.dtype)
        n = diff.size

        def backward(g):
            d = (2.0 / n) * diff * g
            return d, -d

        return self._record("mse", (a, b), out, backward)

    def bce_with_logits(self, logits, labels) -> Tensor:
        logits = self._coerce(logits, "bce_with_logits")
        labels = self._coerce(labels, "bce_with_logits")
        x, y = logits.data, labels.data
        if x.shape != y.shape:
            raise ShapeError(f"bce_with_logits: shapes {x.shape} vs {y.shape} differ")
        # stable per-element loss: max(x,0) - x*y + log(1 + exp(-|x|))
        per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        out = np.asarray(per.mean(), dtype=self.dtype)
        n = x.size

        def backward(g):
            sig = 1.0 / (1.0 + np.exp(-x))
            return ((sig - y) * (g / n), None)

        return self._record("bce_with_logits", (logits, labels), out, backward)

    # ---- constants and backward ----------------------------------------------

    def constant(self, data) -> Tensor:
        return self._new_tensor(np.asarray(data, dtype=self.dtype))

    def ones(self, shape) -> Tensor:
        return self._new_tensor(np.ones(shape, dtype=self.dtype))

    def zeros(self, shape) -> Tensor:
        return self._new_tensor(np.zeros(shape, dtype=self.dtype))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss; returns node_id -> gradient.

        Leaf tensors additionally accumulate into their ``grad`` field, so a
        second sweep without zero_grad doubles the stored gradient.
        """
        if not self.grad_enabled:
            raise GraphError("backward on a graph built with grad_enabled=False")
        if loss.node_id is None or loss.node_id >= len(self.nodes):
            raise GraphError("backward: loss was not produced by this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            input_grads = node.backward(g)
            for iid, ig in zip(node.input_ids, input_grads):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                if acc is None:
                    grads[iid] = ig.copy() if ig.base is not None or ig is g else ig
                else:
                    acc += ig
        out: dict[int, Tensor] = {}
        for nid, g in grads.items():
            node = self.nodes[nid]
            if node.leaf is not None:
                node.leaf.accumulate_grad(g)
            out[nid] = self._new_tensor(g)
        return out

    def shapes(self) -> list[tuple[str, tuple]]:
        """(op, output shape) per node, in insertion order."""
        return [(n.op, tuple(n.shape)) for n in self.nodes]


PRIMITIVE_OPS = (
    "matmul", "add", "mul", "sub", "scale", "sum", "mean", "transpose",
    "reshape", "concat", "slice", "exp", "log", "tanh", "gelu",
    "softmax_lastdim", "layernorm_lastdim", "mse", "bce_with_logits",
)


def apply_primitive(graph: Graph, op: str, *inputs, **kwargs) -> Tensor:
    """Uniform dispatch into the primitive set; rejects unknown ops."""
    if op not in PRIMITIVE_OPS:
        raise GraphError(f"unknown primitive {op!r}")
    if op == "concat":
        return graph.concat(list(inputs), **kwargs)
    return getattr(graph, op)(*inputs, **kwargs)
