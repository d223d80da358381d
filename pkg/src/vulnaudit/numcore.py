"""Reverse-mode tape over the handful of dense/sparse kernels the model needs.

Every kernel carries a hand-derived backward rule. Values are float64 ndarrays
end to end (raster storage elsewhere is float32 and gets upcast on entry), and
each kernel checks its output so a diverging run fails naming the op that
produced the first non-finite value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


@dataclass(frozen=True)
class SparseMatrix:
    """Matrix in compressed-row form (binary adjacency or real weights)."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if len(self.indptr) != self.rows + 1:
            raise ValueError("indptr length must be rows + 1")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be monotone")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise ValueError("column index out of bounds")

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr.copy(), m.indices.copy(),
                   m.data.astype(np.float64))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr),
                             shape=(self.rows, self.cols))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @property
    def nnz(self) -> int:
        return len(self.data)

    def is_symmetric(self) -> bool:
        m = self.to_scipy()
        if self.rows != self.cols:
            return False
        return (m != m.T).nnz == 0


class Var:
    """A value tracked on a tape."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


# backward_fn(dout) -> iterable of (input Var, gradient contribution)
BackwardFn = Callable[[np.ndarray], Iterable[tuple[Var, np.ndarray]]]


class Tape:
    """Ordered record of kernel calls plus persistent gradient accumulators.

    ``backward`` consumes the recorded ops in exact reverse order and adds the
    resulting parameter gradients into ``grads``, so successive recorded losses
    accumulate additively. Parameters are registered once per name and must
    wrap the same underlying array for the lifetime of the tape.
    """

    def __init__(self):
        self._entries: list[tuple[Var, BackwardFn]] = []
        self._params: dict[str, Var] = {}
        self.grads: dict[str, np.ndarray] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            if self._params[name].value is not value and not np.shares_memory(
                    self._params[name].value, value):
                raise ValueError(f"parameter {name!r} re-registered with a different array")
            return self._params[name]
        var = Var(value, name=name)  # no copy when value is already float64
        self._params[name] = var
        self.grads.setdefault(name, np.zeros_like(var.value))
        return var

    def constant(self, value) -> Var:
        return Var(value)

    def record(self, out: Var, backward_fn: BackwardFn) -> None:
        self._entries.append((out, backward_fn))


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Propagate a unit seed from ``loss`` back through the tape.

    Returns the tape's accumulator map {param name: gradient}; entries are
    consumed, so calling again without recording a new forward pass raises.
    """
    if not tape._entries:
        raise RuntimeError("backward called with no recorded forward pass "
                           "(nothing taped, or tape already consumed)")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, fn in reversed(tape._entries):
        dout = adjoint.pop(id(out), None)
        if dout is None:
            continue
        for var, grad in fn(dout):
            key = id(var)
            if key in adjoint:
                adjoint[key] = adjoint[key] + grad
            else:
                adjoint[key] = grad
    for name, var in tape._params.items():
        contrib = adjoint.get(id(var))
        if contrib is not None:
            tape.grads[name] += contrib
    tape._entries.clear()
    return tape.grads


def spmm(tape: Tape, a: SparseMatrix, x: Var) -> Var:
    """out = A @ X with constant A; backward routes A.T @ dout into X."""
    if a.cols != x.value.shape[0]:
        raise ValueError(f"spmm shape mismatch: {a.rows}x{a.cols} @ {x.value.shape}")
    m = a.to_scipy()
    out = Var(m @ x.value)
    _check_finite("spmm", out.value)

    def bwd(dout):
        return ((x, m.T @ dout),)

    tape.record(out, bwd)
    return out


def matmul(tape: Tape, x: Var, w: Var) -> Var:
    if x.value.shape[1] != w.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.value.shape} @ {w.value.shape}")
    out = Var(x.value @ w.value)
    _check_finite("matmul", out.value)

    def bwd(dout):
        return ((x, dout @ w.value.T), (w, x.value.T @ dout))

    tape.record(out, bwd)
    return out


def add_bias(tape: Tape, x: Var, b: Var) -> Var:
    if b.value.shape != (x.value.shape[1],):
        raise ValueError(f"bias shape {b.value.shape} does not match {x.value.shape}")
    out = Var(x.value + b.value)
    _check_finite("add_bias", out.value)

    def bwd(dout):
        return ((x, dout), (b, dout.sum(axis=0)))

    tape.record(out, bwd)
    return out


def relu(tape: Tape, x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0))
    _check_finite("relu", out.value)
    mask = x.value > 0.0  # subgradient at 0 is 0

    def bwd(dout):
        return ((x, dout * mask),)

    tape.record(out, bwd)
    return out


def softmax_values(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; works on 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(tape: Tape, logits: Var) -> Var:
    p = softmax_values(logits.value)
    out = Var(p)
    _check_finite("softmax_rows", out.value)

    def bwd(dout):
        inner = (dout * p).sum(axis=-1, keepdims=True)
        return ((logits, p * (dout - inner)),)

    tape.record(out, bwd)
    return out


def add_const(tape: Tape, x: Var, c: np.ndarray) -> Var:
    out = Var(x.value + c)
    _check_finite("add_const", out.value)

    def bwd(dout):
        return ((x, dout),)

    tape.record(out, bwd)
    return out


def scale(tape: Tape, x: Var, s: float) -> Var:
    out = Var(x.value * s)
    _check_finite("scale", out.value)

    def bwd(dout):
        return ((x, dout * s),)

    tape.record(out, bwd)
    return out


def sum_all(tape: Tape, x: Var) -> Var:
    out = Var(x.value.sum())
    _check_finite("sum_all", out.value)

    def bwd(dout):
        return ((x, np.full_like(x.value, float(dout))),)

    tape.record(out, bwd)
    return out


def weighted_sum(tape: Tape, terms: list[Var], weights: list[float]) -> Var:
    if len(terms) != len(weights):
        raise ValueError("terms and weights must have equal length")
    out = Var(sum(w * t.value for t, w in zip(terms, weights)))
    _check_finite("weighted_sum", out.value)

    def bwd(dout):
        return [(t, w * dout) for t, w in zip(terms, weights)]

    tape.record(out, bwd)
    return out
