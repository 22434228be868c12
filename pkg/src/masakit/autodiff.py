"""Reverse-mode differentiation over numpy arrays, sized for the toy trainer.

A GradientTape records every derived node in creation order, which is a
topological order by construction since ops only consume tensors that
already exist.  backward() walks that list once in reverse, pushing each
node's adjoint into its parents.  Parameters are leaf tensors created
without a tape; their .grad fields survive after the tape is discarded,
so the optimizer reads them directly.

Ops are free functions taking the tape first.  Each returns a new node
whose closure captures the parent values it needs; there is no graph
rewriting, no broadcasting cleverness beyond what the backward rules
actually require.
"""

from __future__ import annotations

import numpy as np

from .masa import combine_atoms as _combine_atoms
from .masa import gelu as _gelu_value, gelu_grad as _gelu_grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def leaf(value, name="") -> Tensor:
    return Tensor(value, name=name)


class GradientTape:
    """Ordered record of derived nodes; one backward visit per node."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, value, parents, backward_fn, name="") -> Tensor:
        node = Tensor(value, parents=parents, backward_fn=backward_fn, name=name)
        self.nodes.append(node)
        return node


def _grad_buf(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    return t.grad


def _acc(t: Tensor, g) -> None:
    _grad_buf(t)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: GradientTape, loss: Tensor) -> None:
    """Seed the loss adjoint and sweep the tape once in reverse order.

    Nodes that never received an adjoint (side branches kept only for
    inspection) are skipped; their contribution is exactly zero.
    """
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node.grad)


# ---------------------------------------------------------------- basic ops


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return tape.record(a.value @ b.value, (a, b), bwd, "matmul")


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return tape.record(a.value + b.value, (a, b), bwd, "add")


def scale(tape, a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _acc(a, c * g)

    return tape.record(c * a.value, (a,), bwd, "scale")


def transpose(tape, a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g.T)

    return tape.record(a.value.T, (a,), bwd, "transpose")


def cols(tape, a: Tensor, j0: int, j1: int) -> Tensor:
    def bwd(g):
        _grad_buf(a)[:, j0:j1] += g

    return tape.record(a.value[:, j0:j1], (a,), bwd, "cols")


def rows(tape, a: Tensor, i0: int, i1: int) -> Tensor:
    def bwd(g):
        _grad_buf(a)[i0:i1, :] += g

    return tape.record(a.value[i0:i1, :], (a,), bwd, "rows")


def column(tape, a: Tensor, j: int) -> Tensor:
    """Column j as a 1-D vector."""

    def bwd(g):
        _grad_buf(a)[:, j] += g

    return tape.record(a.value[:, j], (a,), bwd, "column")


def flatten(tape, a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g.reshape(a.value.shape))

    return tape.record(a.value.reshape(-1), (a,), bwd, "flatten")


def hstack(tape, parts: list[Tensor]) -> Tensor:
    widths = [p.value.shape[1] for p in parts]

    def bwd(g):
        j = 0
        for p, w in zip(parts, widths):
            _acc(p, g[:, j : j + w])
            j += w

    return tape.record(
        np.concatenate([p.value for p in parts], axis=1), tuple(parts), bwd, "hstack"
    )


def sumsq(tape, a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, 2.0 * g * a.value)

    return tape.record(np.sum(a.value * a.value), (a,), bwd, "sumsq")


def mean_stack(tape, parts: list[Tensor]) -> Tensor:
    """Mean of scalar nodes, used to fold a batch of per-sequence losses."""
    inv = 1.0 / len(parts)

    def bwd(g):
        for p in parts:
            _acc(p, g * inv)

    value = sum(float(p.value) for p in parts) * inv
    return tape.record(value, tuple(parts), bwd, "mean_stack")


# ------------------------------------------------------------ nonlinear ops


def gelu(tape, a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g * _gelu_grad(a.value))

    return tape.record(_gelu_value(a.value), (a,), bwd, "gelu")


def layernorm(tape, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        _acc(gain, (g * xhat).sum(axis=0))
        _acc(bias, g.sum(axis=0))
        dxhat = g * gain.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        _acc(x, dx)

    return tape.record(xhat * gain.value + bias.value, (x, gain, bias), bwd, "layernorm")


def softmax_rows(tape, a: Tensor, mask=None) -> Tensor:
    """Row softmax; masked entries (mask True) are excluded before normalization."""
    x = a.value
    if mask is not None:
        x = np.where(mask, -np.inf, x)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _acc(a, p * (g - dot))  # masked entries have p = 0, so their grad is 0

    return tape.record(p, (a,), bwd, "softmax")


def embed(tape, table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def bwd(g):
        np.add.at(_grad_buf(table), ids, g)

    return tape.record(table.value[ids], (table,), bwd, "embed")


def dict_combine(tape, atoms: Tensor, coeffs: Tensor) -> Tensor:
    """Weight synthesis sum_s coeffs[s] * atoms[s] with the matching chain rule:
    the atom adjoint is coeffs[s] * G and the coefficient adjoint is <G, atom_s>_F.
    """

    def bwd(g):
        _acc(atoms, coeffs.value[:, None, None] * g)
        _acc(coeffs, np.tensordot(atoms.value, np.ascontiguousarray(g), axes=([1, 2], [0, 1])))

    return tape.record(
        _combine_atoms(atoms.value, coeffs.value), (atoms, coeffs), bwd, "dict_combine"
    )


def cross_entropy_mean(tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets under row-softmax logits."""
    targets = np.asarray(targets)
    x = logits.value
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = x.shape[0]
    rows_idx = np.arange(n)
    loss = -logp[rows_idx, targets].sum() / n
    p = np.exp(logp)

    def bwd(g):
        d = p.copy()
        d[rows_idx, targets] -= 1.0
        _acc(logits, d * (g / n))

    return tape.record(loss, (logits,), bwd, "cross_entropy")
