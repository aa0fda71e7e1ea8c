"""Scalar reverse-mode automatic differentiation.

A :class:`Tape` records every scalar operation as a :class:`Node` in creation
order, which is also a valid topological order. ``Tape.backward`` sweeps the
list once in reverse, so the cost is linear in the number of nodes.

This engine is the reference implementation of the gradient contract. The
batched field code runs on torch autograd; the test-suite cross-checks the two
on small networks.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

GUARD_EPS = 1e-12


def _guard(d: float) -> float:
    # sign-preserving clamp of tiny denominators; sign(0) is taken as +
    if abs(d) < GUARD_EPS:
        return -GUARD_EPS if d < 0 else GUARD_EPS
    return d


class StaleTapeError(RuntimeError):
    pass


class Parameter:
    """A trainable scalar with its adjoint and Adam moments."""

    __slots__ = ("value", "adjoint", "m", "v", "step")

    def __init__(self, value: float):
        self.value = float(value)
        self.adjoint = 0.0
        self.m = 0.0
        self.v = 0.0
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.value!r}, adjoint={self.adjoint!r})"


class Node:
    __slots__ = ("tape", "value", "parents", "local_grads", "index")

    def __init__(self, tape: "Tape", value: float, parents=(), local_grads=()):
        self.tape = tape
        self.value = float(value)
        self.parents = parents
        self.local_grads = local_grads
        self.index = tape._register(self)

    def __repr__(self):
        return f"Node({self.value!r})"

    def _unary(self, value, grad):
        return Node(self.tape, value, (self,), (grad,))

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("nodes belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        if not isinstance(other, Node):
            return self._unary(self.value + other, 1.0)
        other = self._lift(other)
        return Node(self.tape, self.value + other.value, (self, other), (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Node):
            return self._unary(self.value - other, 1.0)
        other = self._lift(other)
        return Node(self.tape, self.value - other.value, (self, other), (1.0, -1.0))

    def __rsub__(self, other):
        return self._unary(other - self.value, -1.0)

    def __neg__(self):
        return self._unary(-self.value, -1.0)

    def __mul__(self, other):
        if not isinstance(other, Node):
            return self._unary(self.value * other, float(other))
        other = self._lift(other)
        return Node(self.tape, self.value * other.value, (self, other), (other.value, self.value))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Node):
            d = _guard(float(other))
            return self._unary(self.value / d, 1.0 / d)
        other = self._lift(other)
        d = _guard(other.value)
        return Node(self.tape, self.value / d, (self, other), (1.0 / d, -self.value / (d * d)))

    def __rtruediv__(self, other):
        d = _guard(self.value)
        return self._unary(other / d, -other / (d * d))

    def __pow__(self, other):
        if not isinstance(other, Node):
            p = float(other)
            return self._unary(self.value**p, p * self.value ** (p - 1.0) if p != 0 else 0.0)
        return power(self, other)

    def __rpow__(self, other):
        return power(self.tape.constant(other), self)

    def __abs__(self):
        return abs_(self)


class Tape:
    """Records scalar operations for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._inputs: list[Node] = []
        self._bound: list[Parameter | None] = []
        self._stale = False

    def _register(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self):
        self.nodes = []
        self._inputs = []
        self._bound = []
        self._stale = False

    def var(self, value: float | Parameter) -> Node:
        """Register an input leaf. A Parameter receives its adjoint on backward."""
        param = value if isinstance(value, Parameter) else None
        node = Node(self, param.value if param is not None else value)
        self._inputs.append(node)
        self._bound.append(param)
        return node

    def constant(self, value: float) -> Node:
        return Node(self, value)

    def forward(self, graph_builder: Callable[..., Node], *inputs) -> Node:
        """Clear the tape, register ``inputs`` as leaves and build the graph."""
        self.reset()
        leaves = [self.var(x) for x in inputs]
        root = graph_builder(*leaves)
        if not isinstance(root, Node):
            root = self.constant(root)
        return root

    def backward(self, root: Node) -> list[float]:
        """Propagate adjoints from ``root``; returns d(root)/d(input) per input."""
        if self._stale:
            raise StaleTapeError("stale tape: backward already ran; re-run forward first")
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        adj = [0.0] * len(self.nodes)
        adj[root.index] = 1.0
        for node in reversed(self.nodes[: root.index + 1]):
            a = adj[node.index]
            if a == 0.0:
                continue
            for parent, g in zip(node.parents, node.local_grads):
                adj[parent.index] += a * g
        self._stale = True
        grads = [adj[n.index] for n in self._inputs]
        for param in self._bound:
            if param is not None:
                param.adjoint = 0.0
        for param, g in zip(self._bound, grads):
            if param is not None:
                param.adjoint += g
        return grads


def _node(x) -> Node:
    if not isinstance(x, Node):
        raise TypeError(f"expected a tape Node, got {type(x).__name__}")
    return x


def exp(x: Node) -> Node:
    v = math.exp(_node(x).value)
    return x._unary(v, v)


def log(x: Node) -> Node:
    v = max(_node(x).value, GUARD_EPS)
    return x._unary(math.log(v), 1.0 / v)


def sin(x: Node) -> Node:
    return _node(x)._unary(math.sin(x.value), math.cos(x.value))


def cos(x: Node) -> Node:
    return _node(x)._unary(math.cos(x.value), -math.sin(x.value))


def sqrt(x: Node) -> Node:
    v = math.sqrt(max(_node(x).value, 0.0))
    return x._unary(v, 0.5 / _guard(v))


def tanh(x: Node) -> Node:
    v = math.tanh(_node(x).value)
    return x._unary(v, 1.0 - v * v)


def logistic(x: Node) -> Node:
    z = _node(x).value
    if z >= 0:
        v = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        v = e / (1.0 + e)
    return x._unary(v, v * (1.0 - v))


def abs_(x: Node) -> Node:
    z = _node(x).value
    return x._unary(abs(z), 1.0 if z > 0 else (-1.0 if z < 0 else 0.0))


def power(a: Node, b: Node) -> Node:
    a, b = _node(a), a._lift(b)
    v = a.value**b.value
    da = b.value * a.value ** (b.value - 1.0) if b.value != 0 else 0.0
    db = v * math.log(max(a.value, GUARD_EPS))
    return Node(a.tape, v, (a, b), (da, db))


def maximum(a, b) -> Node:
    if not isinstance(a, Node):
        a, b = b, a
    b = a._lift(b)
    if a.value >= b.value:
        return Node(a.tape, a.value, (a, b), (1.0, 0.0))
    return Node(a.tape, b.value, (a, b), (0.0, 1.0))


def minimum(a, b) -> Node:
    if not isinstance(a, Node):
        a, b = b, a
    b = a._lift(b)
    if a.value <= b.value:
        return Node(a.tape, a.value, (a, b), (1.0, 0.0))
    return Node(a.tape, b.value, (a, b), (0.0, 1.0))


def total(xs: Iterable[Node]) -> Node:
    xs = list(xs)
    acc = xs[0]
    for x in xs[1:]:
        acc = acc + x
    return acc


class Vec3:
    """Three tape nodes treated as a small vector (colors, directions)."""

    __slots__ = ("x", "y", "z")

    def __init__(self, x, y, z):
        self.x, self.y, self.z = x, y, z

    def __iter__(self):
        return iter((self.x, self.y, self.z))

    def __add__(self, o):
        if isinstance(o, Vec3):
            return Vec3(self.x + o.x, self.y + o.y, self.z + o.z)
        return Vec3(self.x + o, self.y + o, self.z + o)

    def __sub__(self, o):
        if isinstance(o, Vec3):
            return Vec3(self.x - o.x, self.y - o.y, self.z - o.z)
        return Vec3(self.x - o, self.y - o, self.z - o)

    def __mul__(self, s):
        if isinstance(s, Vec3):
            return Vec3(self.x * s.x, self.y * s.y, self.z * s.z)
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, o: "Vec3") -> Node:
        return self.x * o.x + self.y * o.y + self.z * o.z

    def norm(self) -> Node:
        return sqrt(self.dot(self))

    def normalized(self) -> "Vec3":
        n = self.norm()
        return Vec3(self.x / n, self.y / n, self.z / n)

    def values(self) -> tuple[float, float, float]:
        return (self.x.value, self.y.value, self.z.value)


def dense(inputs: Sequence[Node], weights: Sequence[Sequence], bias: Sequence, activation=None) -> list[Node]:
    """``activation(W @ inputs + bias)`` on tape nodes; ``W`` is row-major."""
    out = []
    for row, b in zip(weights, bias):
        acc = b
        for w, x in zip(row, inputs):
            acc = acc + w * x
        out.append(activation(acc) if activation is not None else acc)
    return out


def relu(x: Node) -> Node:
    return maximum(x, 0.0)


def grad(fn: Callable[..., Node], values: Sequence[float]) -> tuple[float, list[float]]:
    """Value and gradient of a scalar function of plain floats."""
    tape = Tape()
    root = tape.forward(fn, *values)
    return root.value, tape.backward(root)


def adam_step(params: Iterable[Parameter], lr: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; adjoints are zeroed afterwards."""
    for p in params:
        g = p.adjoint
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value -= lr * m_hat / (math.sqrt(v_hat) + eps)
        p.adjoint = 0.0
