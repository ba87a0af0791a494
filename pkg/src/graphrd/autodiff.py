"""Reverse-mode differentiation over dense 2-D float64 arrays.

A Tape records every operation of one forward pass (define-by-run); the
graph is rebuilt on each pass, so layer count and weight sharing can vary
freely between runs. ``Tape.backward`` walks the records once in reverse
and accumulates gradients additively, so a tensor consumed several times
receives the sum of all path gradients. Tapes are single use: record,
run backward once, discard.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .graph import NormalizedLaplacian


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, mixed tapes."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared at an op boundary while checking is enabled."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense matrix tracked on a tape, with a same-shape gradient slot."""

    __slots__ = ("tape", "node_id", "values", "_grad")

    def __init__(self, tape: "Tape", node_id: int, values: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.values = values
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zero for tensors the loss never reached."""
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, node_id={self.node_id})"


class _Record:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered op records for a single forward pass."""

    def __init__(self, check_finite: bool = False):
        self._records: list[_Record] = []
        self._tensors: list[Tensor] = []
        self._spent = False
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._records)

    def leaf(self, values, name: str = "leaf") -> Tensor:
        """Register an input tensor (no parents)."""
        return self._register(_as_matrix(values).copy(), (), None, name)

    def record(self, values: np.ndarray, parents: tuple[Tensor, ...],
               backward: Optional[Callable[[np.ndarray], None]], op: str = "op") -> Tensor:
        """Register the output of an op. ``backward`` receives the output
        gradient and must push gradients into the parents via add_grad."""
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands recorded on different tapes")
        return self._register(_as_matrix(values), parents, backward, op)

    def _register(self, values, parents, backward, op) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(values)):
            raise NonFiniteError(f"non-finite values produced by op {op!r}")
        t = Tensor(self, len(self._records), values)
        self._records.append(_Record(op, tuple(p.node_id for p in parents), backward))
        self._tensors.append(t)
        return t

    def add_grad(self, t: Tensor, g: np.ndarray) -> None:
        if g.shape != t.values.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {t.values.shape}")
        if t._grad is None:
            t._grad = g.copy()
        else:
            t._grad += g

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) to every tensor reachable from ``loss``."""
        if self._spent:
            raise TapeError("backward was already called on this tape")
        if loss.tape is not self:
            raise TapeError("loss was recorded on a different tape")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got shape {loss.shape}")
        self._spent = True
        loss._grad = np.ones((1, 1))
        for node_id in range(loss.node_id, -1, -1):
            rec = self._records[node_id]
            t = self._tensors[node_id]
            if rec.backward is None or t._grad is None:
                continue
            rec.backward(t._grad)


def backward(tape: Tape, loss: Tensor) -> None:
    """Run the reverse sweep; every tracked leaf then holds d(loss)/d(leaf)."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    tape = a.tape
    out = a.values @ b.values

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g @ b.values.T)
        tape.add_grad(b, a.values.T @ g)

    return tape.record(out, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    tape = a.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g)
        tape.add_grad(b, g)

    return tape.record(a.values + b.values, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    tape = a.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g)
        tape.add_grad(b, -g)

    return tape.record(a.values - b.values, (a, b), bwd, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "hadamard")
    tape = a.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g * b.values)
        tape.add_grad(b, g * a.values)

    return tape.record(a.values * b.values, (a, b), bwd, "hadamard")


def relu(a: Tensor) -> Tensor:
    tape = a.tape
    mask = a.values > 0  # subgradient 0 at the kink

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g * mask)

    return tape.record(a.values * mask, (a,), bwd, "relu")


def sine(a: Tensor) -> Tensor:
    tape = a.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, g * np.cos(a.values))

    return tape.record(np.sin(a.values), (a,), bwd, "sine")


def scale(a: Tensor, alpha: float) -> Tensor:
    tape = a.tape
    alpha = float(alpha)

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, alpha * g)

    return tape.record(alpha * a.values, (a,), bwd, "scale")


def exp_neg_relu(a: Tensor) -> Tensor:
    """y = exp(-relu(x)); maps any real input into (0, 1]."""
    tape = a.tape
    mask = a.values > 0
    out = np.exp(-np.maximum(a.values, 0.0))

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(a, -g * out * mask)

    return tape.record(out, (a,), bwd, "exp_neg_relu")


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}
_ELEMENTWISE_UNARY = {"relu": relu, "sine": sine, "exp-neg-relu": exp_neg_relu}


def elementwise(kind: str, *operands: Tensor, alpha: Optional[float] = None) -> Tensor:
    """Dispatch by kind: add, sub, hadamard, relu, sine, scale, exp-neg-relu."""
    if kind in _ELEMENTWISE_BINARY:
        if len(operands) != 2:
            raise ShapeError(f"{kind} expects two operands")
        return _ELEMENTWISE_BINARY[kind](*operands)
    if kind in _ELEMENTWISE_UNARY:
        if len(operands) != 1:
            raise ShapeError(f"{kind} expects one operand")
        return _ELEMENTWISE_UNARY[kind](operands[0])
    if kind == "scale":
        if len(operands) != 1 or alpha is None:
            raise ShapeError("scale expects one operand and alpha")
        return scale(operands[0], alpha)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def broadcast_row(v: Tensor, n: int) -> Tensor:
    """Repeat a 1 x c row vector into an n x c matrix."""
    if v.shape[0] != 1:
        raise ShapeError(f"broadcast_row expects a 1 x c tensor, got {v.shape}")
    if n < 1:
        raise ShapeError(f"broadcast_row: n must be >= 1, got {n}")
    tape = v.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(v, g.sum(axis=0, keepdims=True))

    return tape.record(np.repeat(v.values, n, axis=0), (v,), bwd, "broadcast_row")


def sparse_apply(lap: NormalizedLaplacian, u: Tensor) -> Tensor:
    """Differentiable Lhat @ U. The operator is symmetric, so the backward
    pass applies the same matrix to the output gradient."""
    if u.shape[0] != lap.n:
        raise ShapeError(f"sparse_apply: {u.shape[0]} rows vs Laplacian dimension {lap.n}")
    tape = u.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(u, lap.csr @ g)

    return tape.record(lap.csr @ u.values, (u,), bwd, "sparse_apply")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: mask scaled by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs the run's seeded generator")
    tape = x.tape
    mask = (rng.random(x.values.shape) >= p) / (1.0 - p)

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(x, g * mask)

    return tape.record(x.values * mask, (x,), bwd, "dropout")


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a 1 x 1 scalar by summing all entries."""
    tape = x.tape

    def bwd(g: np.ndarray) -> None:
        tape.add_grad(x, np.full_like(x.values, g[0, 0]))

    return tape.record(np.array([[x.values.sum()]]), (x,), bwd, "sum_all")


# ---------------------------------------------------------------------------
# Finite-difference verifier
# ---------------------------------------------------------------------------

def finite_difference_check(f, params: dict[str, np.ndarray], step: float = 1e-6) -> float:
    """Compare analytic gradients with central finite differences.

    ``f(params) -> (value, grads)`` must be deterministic (dropout off) and
    return the scalar objective plus a dict of gradients matching ``params``.
    Returns the maximum over all coordinates of

        |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    value, grads = f(params)
    if not np.isfinite(value):
        raise NonFiniteError(f"objective is non-finite: {value}")
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = f(params)[0]
            flat[k] = orig - step
            f_minus = f(params)[0]
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"objective non-finite while perturbing {name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(analytic[k] - numeric) / max(1e-12, abs(analytic[k]) + abs(numeric))
            worst = max(worst, rel)
    return worst
