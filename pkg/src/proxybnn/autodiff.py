"""Reverse-mode automatic differentiation on a replayable tape.

A :class:`Tape` records a dense computation graph over numpy arrays while it
is traced. The recorded graph can then be re-evaluated for new leaf values
(:meth:`Tape.forward`) and differentiated (:meth:`Tape.backward`) without
tracing again, which is how the training loops reuse one graph per stage.

Every node holds an array value. ``add``/``mul``/``div`` follow numpy
broadcasting; gradients are summed back to the operand shape.

Example::

    tape = Tape()
    x = tape.leaf(3.0)
    tape.mark_output(x * x)
    tape.backward([3.0])[0]    # array(6.)
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "DomainError",
    "PRIMITIVES",
    "tape_forward",
    "tape_backward",
    "gradcheck",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "square",
    "sum",
    "matmul",
]

PRIMITIVES = (
    "add", "mul", "div", "neg", "matmul", "relu", "sigmoid", "softplus",
    "exp", "log", "sin", "cos", "square", "sum", "sqrt",
)

GradVector = list  # list[np.ndarray], aligned with Tape.inputs


class DomainError(ArithmeticError):
    """Raised when a primitive is evaluated outside its domain."""


def _sigmoid(a):
    # split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _eval(op, vals, attrs):
    if op == "add":
        return vals[0] + vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        if np.any(vals[1] == 0):
            raise DomainError("div: zero denominator")
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "sigmoid":
        return _sigmoid(vals[0])
    if op == "softplus":
        return np.logaddexp(0.0, vals[0])
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        if np.any(vals[0] <= 0):
            raise DomainError("log: non-positive argument")
        return np.log(vals[0])
    if op == "sin":
        return np.sin(vals[0])
    if op == "cos":
        return np.cos(vals[0])
    if op == "square":
        return vals[0] * vals[0]
    if op == "sum":
        return np.sum(vals[0], axis=attrs.get("axis"))
    if op == "sqrt":
        if np.any(vals[0] < 0):
            raise DomainError("sqrt: negative argument")
        return np.sqrt(vals[0])
    raise ValueError(f"unknown primitive {op!r}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _vjp(op, vals, out, g, attrs):
    """Return the cotangents of every operand of one node."""
    if op == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if op == "mul":
        return (_unbroadcast(g * vals[1], vals[0].shape),
                _unbroadcast(g * vals[0], vals[1].shape))
    if op == "div":
        a, b = vals
        return (_unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape))
    if op == "neg":
        return (-g,)
    if op == "matmul":
        a, b = vals
        if a.ndim == 1 and b.ndim == 1:
            return (g * b, g * a)
        if a.ndim == 1:
            return (b @ g, np.outer(a, g))
        if b.ndim == 1:
            return (np.outer(g, b), a.T @ g)
        return (g @ b.T, a.T @ g)
    if op == "relu":
        return (g * (vals[0] > 0),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "softplus":
        return (g * _sigmoid(vals[0]),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / vals[0],)
    if op == "sin":
        return (g * np.cos(vals[0]),)
    if op == "cos":
        return (-g * np.sin(vals[0]),)
    if op == "square":
        return (2.0 * g * vals[0],)
    if op == "sum":
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, vals[0].shape),)
    if op == "sqrt":
        g = np.broadcast_to(g, out.shape)
        if np.any((out == 0) & (g != 0)):
            raise DomainError("sqrt: derivative undefined at 0")
        res = np.zeros_like(out)
        np.divide(g, 2.0 * out, out=res, where=g != 0)
        return (res,)
    raise ValueError(f"unknown primitive {op!r}")


class _Node:
    __slots__ = ("op", "args", "attrs", "value")

    def __init__(self, op, args, attrs, value):
        self.op = op
        self.args = args
        self.attrs = attrs
        self.value = value


class Var:
    """Handle to one node of a tape; supports arithmetic operators."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray operators defer to the reflected ones

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var({node.op}, shape={node.value.shape})"

    def _bin(self, op, other, swap=False):
        other = self.tape._lift(other)
        a, b = (other, self) if swap else (self, other)
        return self.tape._record(op, (a, b))

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, swap=True)

    def __sub__(self, o):
        return self._bin("add", -self.tape._lift(o))

    def __rsub__(self, o):
        return self.tape._lift(o) + (-self)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, swap=True)

    def __truediv__(self, o):
        return self._bin("div", o)

    def __rtruediv__(self, o):
        return self._bin("div", o, swap=True)

    def __matmul__(self, o):
        return self._bin("matmul", o)

    def __rmatmul__(self, o):
        return self._bin("matmul", o, swap=True)

    def __neg__(self):
        return self.tape._record("neg", (self,))


class Tape:
    """A topologically ordered record of primitive operations.

    Leaves are created with :meth:`leaf`, constants with :meth:`const`.
    Nodes are appended as operations are traced, so operands always precede
    their consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=float)
        self.nodes.append(_Node("leaf", (), {}, value))
        idx = len(self.nodes) - 1
        self.inputs.append(idx)
        return Var(self, idx)

    def const(self, value) -> Var:
        value = np.array(value, dtype=float)
        self.nodes.append(_Node("const", (), {}, value))
        return Var(self, len(self.nodes) - 1)

    def mark_output(self, var: Var) -> int:
        if var.tape is not self:
            raise ValueError("output belongs to a different tape")
        self.outputs.append(var.index)
        return len(self.outputs) - 1

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
            return x
        return self.const(x)

    def _record(self, op, args, **attrs) -> Var:
        value = _eval(op, [a.value for a in args], attrs)
        value = np.asarray(value, dtype=float)
        self.nodes.append(_Node(op, tuple(a.index for a in args), attrs, value))
        return Var(self, len(self.nodes) - 1)

    def forward(self, leaf_values: Sequence) -> list[np.ndarray]:
        """Re-evaluate the whole graph at new leaf values.

        Returns the values of the marked outputs.
        """
        if len(leaf_values) != len(self.inputs):
            raise ValueError(
                f"expected {len(self.inputs)} leaf values, got {len(leaf_values)}")
        for idx, v in zip(self.inputs, leaf_values):
            v = np.array(v, dtype=float)
            if v.shape != self.nodes[idx].value.shape:
                raise ValueError(
                    f"leaf {idx}: shape {v.shape} != traced {self.nodes[idx].value.shape}")
            self.nodes[idx].value = v
        nodes = self.nodes
        for node in nodes:
            if node.op in ("leaf", "const"):
                continue
            node.value = np.asarray(
                _eval(node.op, [nodes[a].value for a in node.args], node.attrs), dtype=float)
        return [nodes[i].value for i in self.outputs]

    def backward(self, leaf_values: Sequence | None = None, output_index: int = 0,
                 element=None) -> GradVector:
        """Partials of one output with respect to every leaf.

        ``element`` picks a single entry of a non-scalar output; a non-scalar
        output without ``element`` is an error. When ``leaf_values`` is given,
        a forward pass is run first.
        """
        if not 0 <= output_index < len(self.outputs):
            raise IndexError(f"output_index {output_index} out of range "
                             f"({len(self.outputs)} outputs)")
        if leaf_values is not None:
            self.forward(leaf_values)
        nodes = self.nodes
        out_idx = self.outputs[output_index]
        out_val = nodes[out_idx].value
        seed = np.zeros_like(out_val)
        if element is None:
            if out_val.size != 1:
                raise ValueError("non-scalar output; pass element=")
            seed[...] = 1.0
        else:
            seed[element] = 1.0

        adj: dict[int, np.ndarray] = {out_idx: seed}
        for i in range(out_idx, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = nodes[i]
            if node.op in ("leaf", "const"):
                adj[i] = g  # keep for collection below
                continue
            vals = [nodes[a].value for a in node.args]
            for a, ga in zip(node.args, _vjp(node.op, vals, node.value, g, node.attrs)):
                if a in adj:
                    adj[a] = adj[a] + ga
                else:
                    adj[a] = ga
        return [np.array(adj.get(i, np.zeros_like(nodes[i].value)), dtype=float)
                for i in self.inputs]


def tape_forward(tape: Tape, leaf_values) -> list[np.ndarray]:
    return tape.forward(leaf_values)


def tape_backward(tape: Tape, leaf_values, output_index: int = 0, element=None) -> GradVector:
    return tape.backward(leaf_values, output_index, element)


def gradcheck(tape: Tape, leaf_values, step: float = 1e-5, output_index: int = 0,
              element=None) -> float:
    """Max relative error between reverse-mode and central-difference partials.

    The relative error of one partial is ``|a - n| / max(1, |a|, |n|)``, so
    partials below one in magnitude are compared absolutely.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaf_values = [np.array(v, dtype=float) for v in leaf_values]
    analytic = tape.backward(leaf_values, output_index, element)

    def f(vals):
        out = tape.forward(vals)[output_index]
        return float(out if element is None else out[element])

    worst = 0.0
    for k, base in enumerate(leaf_values):
        for pos in np.ndindex(base.shape):
            plus = [v.copy() for v in leaf_values]
            minus = [v.copy() for v in leaf_values]
            plus[k][pos] += step
            minus[k][pos] -= step
            numeric = (f(plus) - f(minus)) / (2.0 * step)
            a = float(analytic[k][pos])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    tape.forward(leaf_values)
    return worst


# Functional forms: dispatch on Var, fall back to numpy for plain arrays so
# residual code can be written once for both evaluation and training.

def _unary(op, x, **attrs):
    if isinstance(x, Var):
        return x.tape._record(op, (x,), **attrs)
    return _eval(op, [np.asarray(x, dtype=float)], attrs)


def relu(x):
    return _unary("relu", x)


def sigmoid(x):
    return _unary("sigmoid", x)


def softplus(x):
    return _unary("softplus", x)


def exp(x):
    return _unary("exp", x)


def log(x):
    return _unary("log", x)


def sin(x):
    return _unary("sin", x)


def cos(x):
    return _unary("cos", x)


def sqrt(x):
    return _unary("sqrt", x)


def square(x):
    return _unary("square", x)


def sum(x, axis=None):  # noqa: A001
    if isinstance(x, Var):
        return x.tape._record("sum", (x,), axis=axis)
    return np.sum(x, axis=axis)


def matmul(a, b):
    return a @ b
