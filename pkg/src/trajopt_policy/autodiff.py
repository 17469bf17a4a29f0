"""Minimal reverse-mode autodiff over dense float64 arrays.

Single Tape per computation. Nodes are appended in topological order and the
backward sweep walks them in reverse id order, so adjoint accumulation is
deterministic. There is no broadcasting: every shape adaptation must go
through explicit concatenate/slice ops, and shape mismatches fail at record
time rather than producing silently wrong gradients.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class UnknownKindError(ValueError):
    pass


class NonScalarLossError(ValueError):
    pass


KINDS = (
    "matmul",
    "add",
    "subtract",
    "multiply",
    "tanh",
    "sigmoid",
    "concatenate",
    "slice",
    "scale",
    "sum_of_squares",
    "input",
    "custom",
)


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def sigmoid(x):
    # exp underflow/overflow saturates to the correct limit; silence the warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


class Node:
    __slots__ = ("kind", "inputs", "value", "payload", "is_param")

    def __init__(self, kind, inputs, value, payload=None, is_param=False):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.payload = payload
        self.is_param = is_param


class Tape:
    """Ordered computation record; not safe for concurrent recording."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def value(self, nid):
        return self.nodes[nid].value

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, value, param=False):
        """Leaf node. Mark param=True to receive an entry in the GradMap."""
        return self._append(Node("input", (), _as_f64(value), is_param=param))

    def record(self, kind, inputs, payload=None):
        """Append one op node, computing its forward value immediately."""
        if kind not in KINDS:
            raise UnknownKindError(f"unknown op kind {kind!r}")
        if kind in ("input", "custom"):
            raise UnknownKindError(f"{kind!r} nodes have dedicated constructors")
        vals = [self.nodes[i].value for i in inputs]

        if kind == "matmul":
            a, b = vals
            if a.ndim != 2 or b.ndim not in (1, 2):
                raise ShapeMismatchError(
                    f"matmul expects (2d, 1d|2d), got {a.shape} @ {b.shape}")
            if a.shape[1] != b.shape[0]:
                raise ShapeMismatchError(
                    f"matmul inner dims differ: {a.shape} @ {b.shape}")
            value = a @ b
        elif kind in ("add", "subtract", "multiply"):
            a, b = vals
            if a.shape != b.shape:
                raise ShapeMismatchError(
                    f"{kind} requires equal shapes, got {a.shape} vs {b.shape}")
            if kind == "add":
                value = a + b
            elif kind == "subtract":
                value = a - b
            else:
                value = a * b
        elif kind == "tanh":
            value = np.tanh(vals[0])
        elif kind == "sigmoid":
            value = sigmoid(vals[0])
        elif kind == "concatenate":
            for v in vals:
                if v.ndim != 1:
                    raise ShapeMismatchError(
                        f"concatenate expects 1d inputs, got shape {v.shape}")
            value = np.concatenate(vals)
        elif kind == "slice":
            start, stop = payload
            v = vals[0]
            if v.ndim != 1:
                raise ShapeMismatchError(f"slice expects a 1d input, got {v.shape}")
            if not (0 <= start <= stop <= v.shape[0]):
                raise ShapeMismatchError(
                    f"slice [{start}:{stop}] out of range for length {v.shape[0]}")
            value = v[start:stop].copy()
        elif kind == "scale":
            value = float(payload) * vals[0]
        elif kind == "sum_of_squares":
            value = np.asarray(np.sum(vals[0] * vals[0]))
        else:  # pragma: no cover - KINDS is exhaustive
            raise UnknownKindError(kind)

        return self._append(Node(kind, tuple(inputs), value, payload))

    # convenience wrappers
    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("subtract", (a, b))

    def mul(self, a, b):
        return self.record("multiply", (a, b))

    def tanh(self, a):
        return self.record("tanh", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def concat(self, ids):
        return self.record("concatenate", tuple(ids))

    def slice(self, a, start, stop):
        return self.record("slice", (a,), (int(start), int(stop)))

    def scale(self, a, c):
        return self.record("scale", (a,), float(c))

    def sum_of_squares(self, a):
        return self.record("sum_of_squares", (a,))

    def register_custom(self, value, inputs, pullback):
        """Insert an externally computed value with a caller-supplied adjoint rule.

        pullback(grad_out) must return one adjoint array per input, each with
        that input's shape. This is the hook through which the trajectory
        optimizer joins the graph.
        """
        return self._append(Node("custom", tuple(inputs), _as_f64(value), pullback))

    def backward(self, loss_id):
        """Reverse sweep from a scalar loss node.

        Returns the GradMap: {node id: gradient} for every node marked as a
        parameter; parameters unreachable from the loss get zeros.
        """
        loss = self.nodes[loss_id]
        if loss.value.ndim != 0:
            raise NonScalarLossError(
                f"loss must be scalar-shaped, got shape {loss.value.shape}")

        adjoints = [None] * len(self.nodes)
        adjoints[loss_id] = np.ones(())

        for nid in range(loss_id, -1, -1):
            g = adjoints[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind == "input":
                continue
            in_grads = self._pullback(node, g)
            for iid, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                ig = np.asarray(ig, dtype=np.float64)
                expect = self.nodes[iid].value.shape
                if ig.shape != expect:
                    raise ShapeMismatchError(
                        f"adjoint shape {ig.shape} does not match input shape "
                        f"{expect} (node {nid}, kind {node.kind})")
                if adjoints[iid] is None:
                    adjoints[iid] = ig.copy()
                else:
                    adjoints[iid] += ig

        grads = {}
        for nid, node in enumerate(self.nodes):
            if node.is_param:
                g = adjoints[nid]
                grads[nid] = np.zeros_like(node.value) if g is None else g
        return grads

    def _pullback(self, node, g):
        kind = node.kind
        vals = [self.nodes[i].value for i in node.inputs]
        if kind == "matmul":
            a, b = vals
            if b.ndim == 1:
                return (np.outer(g, b), a.T @ g)
            return (g @ b.T, a.T @ g)
        if kind == "add":
            return (g, g)
        if kind == "subtract":
            return (g, -g)
        if kind == "multiply":
            a, b = vals
            return (g * b, g * a)
        if kind == "tanh":
            y = node.value
            return (g * (1.0 - y * y),)
        if kind == "sigmoid":
            y = node.value
            return (g * y * (1.0 - y),)
        if kind == "concatenate":
            out, off = [], 0
            for v in vals:
                out.append(g[off:off + v.shape[0]])
                off += v.shape[0]
            return tuple(out)
        if kind == "slice":
            start, stop = node.payload
            full = np.zeros_like(vals[0])
            full[start:stop] = g
            return (full,)
        if kind == "scale":
            return (float(node.payload) * g,)
        if kind == "sum_of_squares":
            return (2.0 * float(g) * vals[0],)
        if kind == "custom":
            out = node.payload(g)
            if not isinstance(out, tuple):
                out = (out,)
            return out
        raise UnknownKindError(kind)  # pragma: no cover
