"""Tape-based reverse-mode autodiff over float64 numpy arrays."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A value recorded on a :class:`Graph`.

    ``data`` is a read-only float64 array. Tensors never change after
    creation, so the same array can be shared by several graph nodes.
    """

    __slots__ = ("data", "graph", "index", "requires_grad", "name")

    def __init__(self, data, graph, index, requires_grad, name=None):
        self.data = data
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        kind = "param" if self.name is not None else "tensor"
        return f"Tensor({kind}, shape={self.shape}, node={self.index})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind, inputs, vjp):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp


def _freeze(array):
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


class Graph:
    """Records operations in construction order for a single backward pass.

    A graph belongs to one thread. Build a fresh one per forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def _push(self, kind, inputs, value, vjp, requires_grad, name=None):
        data = np.asarray(value, dtype=np.float64)
        if data.flags.writeable:
            data.setflags(write=False)
        t = Tensor(data, self, len(self.nodes), requires_grad, name)
        self.nodes.append(_Node(kind, inputs, vjp))
        self.tensors.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self._push("const", (), _freeze(value), None, False)

    def param(self, name: str, value) -> Tensor:
        """Register a trainable leaf. A name may be bound once per graph."""
        if name in self.params:
            return self.params[name]
        t = self._push("param", (), _freeze(value), None, True, name=name)
        self.params[name] = t
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray,
               vjp: Callable[[np.ndarray], Sequence]) -> Tensor:
        """Append an op node.

        ``vjp(grad_out)`` must return one gradient (or None) per input.
        """
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"op {kind!r}: input belongs to a different graph")
        needs = any(t.requires_grad for t in inputs)
        return self._push(kind, tuple(inputs), value, vjp if needs else None, needs)

    def lift(self, x) -> Tensor:
        """Wrap a raw array as a constant; pass Tensors through."""
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise ValueError("tensor belongs to a different graph")
            return x
        return self.constant(x)

    def release(self):
        """Drop the tape. Tensors keep their values but can no longer be
        differentiated; the memory is returned without waiting for the
        cycle collector."""
        self.nodes.clear()
        self.tensors.clear()
        self.params.clear()

    def backward(self, loss: Tensor, params=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every registered parameter.

        Parameters that the loss does not reach get zero gradients. If
        ``params`` (an iterable of names with shapes, or a dict of arrays) is
        given, zero entries are added for names never bound to this graph.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.index >= len(self.nodes):
            raise ValueError("graph was released")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
        nodes = self.nodes
        for i in range(loss.index, -1, -1):
            g = grads.pop(i, None) if nodes[i].kind != "param" else grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.index)
                grads[t.index] = gi if prev is None else prev + gi
        out = {}
        for name, t in self.params.items():
            g = grads.get(t.index)
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        if params is not None:
            for name, value in params.items():
                if name not in out:
                    out[name] = np.zeros(np.shape(value))
        return out
