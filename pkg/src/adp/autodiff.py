"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records one node per produced tensor.  Nodes are appended in
execution order, so every node's parents precede it and the backward pass is
a single reverse sweep that visits each node exactly once.  Gradients are
accumulated in creation order, which keeps results bit-reproducible.

Floats default to 32-bit for training throughput; gradient-check tests switch
the whole engine to 64-bit via :func:`use_dtype`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPES: list["Tape"] = []

_LN_EPS = 1e-6


def set_default_dtype(dtype) -> None:
    """Set the global float width. Only float32 and float64 are supported."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the engine float width (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Immutable dense array, optionally attached to a tape node.

    ``data`` is a read-only numpy array in the engine's default dtype; a
    negative ``node`` means the tensor is a constant (no gradient flows).
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if tape is None and not np.all(np.isfinite(arr)):
            raise ValueError("tensor: non-finite values")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.node >= 0 else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def as_tensor(value) -> Tensor:
    """Coerce an array-like into a constant Tensor (no-op for Tensors)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tape:
    """Execution record for one differentiable computation.

    Single-threaded by design; nest via ``with`` only.  ``leaf`` registers a
    tensor whose gradient will be requested later.
    """

    def __init__(self):
        # per node: tuple of (parent node id, vjp callable) pairs
        self._nodes: list[tuple[tuple[int, Callable], ...]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def _add(self, parents: tuple[tuple[int, Callable], ...]) -> int:
        self._nodes.append(parents)
        return len(self._nodes) - 1

    def leaf(self, data) -> Tensor:
        """Watch ``data`` as a differentiable leaf on this tape."""
        node = self._add(())
        return Tensor(data, tape=self, node=node)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to each source leaf.

        Sources not reached by the loss get a zero gradient of their shape.
        """
        if loss.tape is not self or loss.node < 0:
            raise ValueError("backward: loss was not produced on this tape")
        if loss.data.ndim != 0:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.node] = np.ones((), dtype=loss.data.dtype)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for pid, vjp in self._nodes[nid]:
                pg = vjp(g)
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        out = []
        for src in sources:
            if src.tape is not self or src.node < 0:
                raise ValueError("backward: source is not a leaf of this tape")
            g = grads[src.node]
            out.append(np.zeros_like(src.data) if g is None else np.asarray(g))
        return out


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _result(op: str, out: np.ndarray, operands: Sequence[Tensor], vjps: Sequence[Callable | None]) -> Tensor:
    """Wrap an op result, recording it when any operand lives on the active tape."""
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{op}: non-finite result")
    tape = _active_tape()
    parents = []
    for operand, vjp in zip(operands, vjps):
        if operand.node < 0 or vjp is None:
            continue
        if operand.tape is not tape:
            raise ValueError(f"{op}: operand recorded on a different tape")
        parents.append((operand.node, vjp))
    if tape is None or not parents:
        return Tensor(out)
    return Tensor(out, tape=tape, node=tape._add(tuple(parents)))


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        # leaves/constants are validated at construction; recorded results at _result
        if t.tape is None and not np.all(np.isfinite(t.data)):
            raise ValueError(f"{op}: non-finite input")


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return "row"
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _result("add", a.data + _DEFAULT_DTYPE(b), (a,), (lambda g: g,))
    b = as_tensor(b)
    kind = _binary_shapes("add", a, b)
    out = a.data + b.data
    vjp_b = (lambda g: g) if kind == "same" else (lambda g: g.sum(axis=0))
    return _result("add", out, (a, b), (lambda g: g, vjp_b))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _result("sub", a.data - _DEFAULT_DTYPE(b), (a,), (lambda g: g,))
    b = as_tensor(b)
    kind = _binary_shapes("sub", a, b)
    out = a.data - b.data
    vjp_b = (lambda g: -g) if kind == "same" else (lambda g: -g.sum(axis=0))
    return _result("sub", out, (a, b), (lambda g: g, vjp_b))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        s = _DEFAULT_DTYPE(b)
        return _result("mul", a.data * s, (a,), (lambda g: g * s,))
    b = as_tensor(b)
    kind = _binary_shapes("mul", a, b)
    out = a.data * b.data
    if kind == "same":
        vjps = (lambda g: g * b.data, lambda g: g * a.data)
    else:
        vjps = (lambda g: g * b.data, lambda g: (g * a.data).sum(axis=0))
    return _result("mul", out, (a, b), vjps)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _result("matmul", out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d, got shape {a.shape}")
    return _result("transpose", a.data.T.copy(), (a,), (lambda g: g.T,))


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a)
    with np.errstate(over="ignore"):  # overflow surfaces as a non-finite-result error
        out = np.exp(a.data)
    return _result("exp", out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _result("log", np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    _check_finite("sqrt", a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), (lambda g: g * 0.5 / out,))


def logsigmoid(a: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)): min(x, 0) - log1p(exp(-|x|))."""
    _check_finite("logsigmoid", a)
    z = a.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _result("logsigmoid", out, (a,), (lambda g: g * expit(-z),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor (max-shifted for stability)."""
    _check_finite("softmax", a)
    if a.data.ndim != 2:
        raise ValueError(f"softmax: expected 2-d, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=1, keepdims=True))

    return _result("softmax", out, (a,), (vjp,))


def layer_norm_rows(a: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Row-wise standardization (x - mean) / sqrt(var + eps), no affine."""
    _check_finite("layer_norm", a)
    if a.data.ndim != 2:
        raise ValueError(f"layer_norm: expected 2-d, got shape {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * out).mean(axis=1, keepdims=True)
        return inv * (g - gm - out * gx)

    return _result("layer_norm", out, (a,), (vjp,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) with the Gaussian CDF."""
    _check_finite("gelu", a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / np.sqrt(_DEFAULT_DTYPE(2.0))))
    out = x * phi_cdf
    pdf = np.exp(-0.5 * x * x) / _DEFAULT_DTYPE(math.sqrt(2.0 * math.pi))
    return _result("gelu", out, (a,), (lambda g: g * (phi_cdf + x * pdf),))


def l2norm_rows(a: Tensor) -> Tensor:
    """Row-wise Euclidean norm of a 2-d tensor -> shape (N,)."""
    _check_finite("l2norm", a)
    if a.data.ndim != 2:
        raise ValueError(f"l2norm: expected 2-d, got shape {a.shape}")
    out = np.sqrt((a.data * a.data).sum(axis=1))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (g / safe)[:, None] * np.where(out[:, None] > 0, a.data, 0.0)

    return _result("l2norm", out, (a,), (vjp,))


def _row_norms(op: str, x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=1))
    if np.any(n == 0):
        raise ValueError(f"{op}: zero-norm row")
    return n


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity: (Na, C) x (Nb, C) -> (Na, Nb)."""
    _check_finite("cosine", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine: shape mismatch {a.shape} vs {b.shape}")
    na = _row_norms("cosine", a.data)
    nb = _row_norms("cosine", b.data)
    ah = a.data / na[:, None]
    bh = b.data / nb[:, None]
    out = ah @ bh.T

    def vjp_a(g):
        return (g @ bh - (g * out).sum(axis=1, keepdims=True) * ah) / na[:, None]

    def vjp_b(g):
        return (g.T @ ah - (g * out).sum(axis=0)[:, None] * bh) / nb[:, None]

    return _result("cosine", out, (a, b), (vjp_a, vjp_b))


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two aligned (N, C) tensors -> (N,)."""
    _check_finite("cosine_pairs", a, b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ValueError(f"cosine_pairs: shape mismatch {a.shape} vs {b.shape}")
    na = _row_norms("cosine_pairs", a.data)
    nb = _row_norms("cosine_pairs", b.data)
    ah = a.data / na[:, None]
    bh = b.data / nb[:, None]
    out = (ah * bh).sum(axis=1)

    def vjp_a(g):
        return g[:, None] * (bh - out[:, None] * ah) / na[:, None]

    def vjp_b(g):
        return g[:, None] * (ah - out[:, None] * bh) / nb[:, None]

    return _result("cosine_pairs", out, (a, b), (vjp_a, vjp_b))


def row_sum(a: Tensor) -> Tensor:
    """Sum along axis 1 of a 2-d tensor -> (N,)."""
    _check_finite("row_sum", a)
    if a.data.ndim != 2:
        raise ValueError(f"row_sum: expected 2-d, got shape {a.shape}")
    width = a.shape[1]
    return _result("row_sum", a.data.sum(axis=1), (a,),
                   (lambda g: np.repeat(g[:, None], width, axis=1),))


def sum_all(a: Tensor) -> Tensor:
    _check_finite("sum", a)
    return _result("sum", a.data.sum(), (a,), (lambda g: np.full(a.shape, g, dtype=a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    _check_finite("mean", a)
    n = a.size
    if n == 0:
        raise ValueError("mean: empty tensor")
    return _result("mean", a.data.mean(), (a,),
                   (lambda g: np.full(a.shape, g / n, dtype=a.data.dtype),))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors with equal row counts along axis 1."""
    if not tensors:
        raise ValueError("concat: empty input")
    rows = tensors[0].shape[0]
    for t in tensors:
        _check_finite("concat", t)
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ValueError(f"concat: shape mismatch {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    vjps = []
    start = 0
    for t in tensors:
        lo, hi = start, start + t.shape[1]
        vjps.append(lambda g, lo=lo, hi=hi: g[:, lo:hi])
        start = hi
    return _result("concat", out, tuple(tensors), tuple(vjps))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice [start:stop) of a 2-d tensor."""
    _check_finite("slice", a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice: bad bounds [{start}:{stop}) for shape {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return full

    return _result("slice", out, (a,), (vjp,))


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows by an integer index array (indices are not differentiated)."""
    _check_finite("take_rows", a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim not in (1, 2):
        raise ValueError(f"take_rows: expected 1-d or 2-d, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError("take_rows: index out of range")
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return full

    return _result("take_rows", out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a named parameter set."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new params; mutates ``state``.

    Gradients are validated before any accumulator is touched, so a NaN
    gradient aborts the whole step.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"adam: missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"adam: gradient shape mismatch for parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam: non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / p.dtype.type(1.0 - b1 ** t)
        v_hat = v / p.dtype.type(1.0 - b2 ** t)
        out[name] = p - p.dtype.type(state.learning_rate) * m_hat / (np.sqrt(v_hat) + p.dtype.type(state.eps))
    return out
