"""Reverse-mode differentiation over dense float64 tensors.

The engine is deliberately small: it provides exactly the primitives the
recommender's forward pass needs, records them on an explicit tape, and
replays the tape in reverse to accumulate gradients.  There is no general
broadcasting; the only shape coercions are the ones spelled out per
primitive below.  All softmax-style expressions must go through
``logsumexp_rows`` so that low temperatures cannot overflow.

Gradient tracking only happens inside a ``with Tape() as tape:`` block;
outside a tape every function is a plain numpy computation, which is how
evaluation-time forward passes run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, NumericsError, ShapeError

LAYER_NORM_EPS = 1e-5
NORM_EPS = 1e-12

_debug_checks = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle the post-operation finiteness check (on by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Dense real-valued array, optionally participating in gradients.

    Values are immutable by convention after creation; only ``grad`` is
    mutated (by backward passes).  Non-finite values are rejected at
    creation, and after every primitive while debug checks are enabled.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values in tensor {name!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass
class TapeNode:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: object  # callable(grad_out: ndarray) -> tuple[ndarray | None, ...]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Construction order is topological by definition (an output exists only
    after its inputs), so the backward pass is a single reverse sweep that
    touches each node exactly once.
    """

    nodes: list[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.nodes.append(TapeNode(inputs, output, backward))

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(root)/d(tensor) into ``grad`` for every leaf tensor
        that requires gradients and is connected to ``root`` on this tape.

        Returns the gradient map over all requires_grad tensors reached by
        the sweep (intermediates included; ``grad`` is set on leaves only).
        """
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        produced_ids = {id(node.output) for node in self.nodes}
        if id(root) not in produced_ids and not root.requires_grad:
            raise ContractError("backward root is not connected to this tape")

        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        refs: dict[int, Tensor] = {id(root): root}
        result: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            # a produced tensor's gradient is final once all later consumers
            # have contributed, i.e. exactly when its producer is visited
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            if node.output.requires_grad:
                result[node.output] = g_out
            for tensor, g in zip(node.inputs, node.backward(g_out)):
                if g is None:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = np.asarray(g, dtype=np.float64)
                    refs[key] = tensor
        for key, g in pending.items():
            leaf = refs[key]
            if leaf.requires_grad:
                result[leaf] = g
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return result


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(inputs: tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, _check=_debug_checks)
    if tracked:
        tape.record(inputs, out, backward)
    return out


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """2-D matrix product; either operand may be used transposed."""
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.ndim != 2 or bm.ndim != 2 or am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} (tA={transpose_a}, tB={transpose_b})")
    out = am @ bm

    def backward(g):
        ga = g @ bm.T
        gb = am.T @ g
        if transpose_a:
            ga = ga.T
        if transpose_b:
            gb = gb.T
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _result((a, b), out, backward)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> str:
    """Classify add/sub operand shapes: equal, or matrix (+/-) row vector."""
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_b"
    if a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-D vector broadcasts across the rows of a matrix."""
    kind = _binary_shapes(a, b, "add")
    out = a.data + b.data

    def backward(g):
        ga = g
        gb = g
        if kind == "row_b":
            gb = g.sum(axis=0)
        elif kind == "row_a":
            ga = g.sum(axis=0)
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _result((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        ga = g
        gb = -g
        if kind == "row_b":
            gb = -g.sum(axis=0)
        elif kind == "row_a":
            ga = g.sum(axis=0)
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _result((a, b), out, backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result((a, b), out, backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        return (g * c if a.requires_grad else None,)

    return _result((a,), out, backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out) if a.requires_grad else None,)

    return _result((a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    # piecewise-stable logistic: never exponentiates a positive argument
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out) if a.requires_grad else None,)

    return _result((a,), out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out if a.requires_grad else None,)

    return _result((a,), out, backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data if a.requires_grad else None,)

    return _result((a,), out, backward)


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    if x.ndim not in (1, 2):
        raise ShapeError(f"layer_norm expects 1-D or 2-D input, got {a.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    out = centered * inv

    def backward(g):
        if not a.requires_grad:
            return (None,)
        d = x.shape[-1]
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * gy_mean),)

    return _result((a,), out, backward)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None and a.data.ndim != 2:
        raise ShapeError(f"axis sum needs a 2-D input, got {a.shape}")
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(np.asarray(g).reshape(()), a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _result((a,), out, backward)


def mean_rows(a: Tensor) -> Tensor:
    """Per-row mean: (n, d) -> (n,); a 1-D input is one row -> scalar."""
    if a.data.ndim == 1:
        out = a.data.mean()
        d = a.data.shape[0]

        def backward(g):
            if not a.requires_grad:
                return (None,)
            return (np.full(a.shape, float(g) / d),)

        return _result((a,), out, backward)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects 1-D or 2-D input, got {a.shape}")
    d = a.data.shape[1]
    out = a.data.mean(axis=1)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.repeat((g / d)[:, None], d, axis=1),)

    return _result((a,), out, backward)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit norm, with a stabilizer for zero rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects 2-D input, got {a.shape}")
    x = a.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    denom = norms + NORM_EPS
    out = x / denom

    def backward(g):
        if not a.requires_grad:
            return (None,)
        safe = np.maximum(norms, 1e-300)
        proj = (g * x).sum(axis=1, keepdims=True)
        return (g / denom - x * (proj / (safe * denom * denom)),)

    return _result((a,), out, backward)


def concat_rows(tensors: list[Tensor]) -> Tensor:
    """Stack inputs by rows; 1-D inputs count as single rows."""
    if not tensors:
        raise ShapeError("concat_rows of an empty list")
    mats = [t.data if t.data.ndim == 2 else t.data[None, :] for t in tensors]
    cols = mats[0].shape[1]
    if any(m.shape[1] != cols for m in mats):
        raise ShapeError("concat_rows: column counts differ")
    out = np.concatenate(mats, axis=0)
    sizes = [m.shape[0] for m in mats]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                outs.append(None)
                continue
            piece = g[lo:hi]
            outs.append(piece[0] if t.data.ndim == 1 else piece)
        return tuple(outs)

    return _result(tuple(tensors), out, backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be 1-D")
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"gather_rows expects 1-D or 2-D input, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = a.data[idx]

    def backward(g):
        if not a.requires_grad:
            return (None,)
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _result((a,), out, backward)


def sparse_dense_matmul(a, x: Tensor) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    if not sp.issparse(a):
        raise ShapeError("sparse_dense_matmul expects a scipy sparse matrix")
    if x.data.ndim != 2 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: {a.shape} x {x.shape}")
    a_csr = a.tocsr()
    out = a_csr @ x.data

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (a_csr.T @ g,)

    return _result((x,), out, backward)


def logsumexp_rows(a: Tensor) -> Tensor:
    """Stable log-sum-exp of each row; a 1-D input is one row -> scalar."""
    x = a.data if a.data.ndim == 2 else a.data[None, :]
    m = x.max(axis=1, keepdims=True)
    shifted = np.exp(x - m)
    total = shifted.sum(axis=1, keepdims=True)
    lse = (m + np.log(total)).reshape(-1)
    out = lse if a.data.ndim == 2 else lse.reshape(())

    def backward(g):
        if not a.requires_grad:
            return (None,)
        soft = shifted / total
        gg = np.asarray(g).reshape(-1, 1)
        grad = soft * gg
        return (grad if a.data.ndim == 2 else grad[0],)

    return _result((a,), out, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}: size mismatch")
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape) if a.requires_grad else None,)

    return _result((a,), out, backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "scalar_mul": scalar_mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "layer_norm": layer_norm,
    "exp": exp,
    "log": log,
    "sum": reduce_sum,
    "mean_rows": mean_rows,
    "l2_normalize_rows": l2_normalize_rows,
    "concat_rows": concat_rows,
    "gather_rows": gather_rows,
    "sparse_dense_matmul": sparse_dense_matmul,
    "logsumexp_rows": logsumexp_rows,
    "reshape": reshape,
}


def primitive_forward(op_kind: str, inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; ``inputs`` is the positional operand list."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {op_kind!r}") from None
    if op_kind == "concat_rows":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# composites used by several callers
# ---------------------------------------------------------------------------


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosines of the rows of ``a`` against the rows of ``b``."""
    return matmul(l2_normalize_rows(a), l2_normalize_rows(b), transpose_b=True)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two equally shaped matrices -> (n,)."""
    return reduce_sum(elementwise_mul(a, b), axis=1)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    rel_tol: float
    max_rel_err: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.rel_tol

    def __str__(self) -> str:
        lines = [f"grad check (rel_tol={self.rel_tol:g}): "
                 f"{'PASS' if self.passed else 'FAIL'} (worst {self.worst:.3e})"]
        for name, err in sorted(self.max_rel_err.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, params: list[Tensor], step: float = 1e-4,
               rel_tol: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic closure over the given parameter
    tensors, re-reading their current values on every call.  Each sampled
    entry is perturbed by ±step and the relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) is recorded.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    base1 = float(np.asarray(loss_fn().data).reshape(()))
    base2 = float(np.asarray(loss_fn().data).reshape(()))
    if base1 != base2:
        raise ContractError("loss_fn is not deterministic under repeated evaluation")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    report: dict[str, float] = {}
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            gen = rng or np.random.default_rng(0)
            entries = gen.choice(n, size=max_entries, replace=False)
        else:
            entries = np.arange(n)
        worst = 0.0
        for j in entries:
            orig = flat[j]
            flat[j] = orig + step
            up = float(np.asarray(loss_fn().data).reshape(()))
            flat[j] = orig - step
            down = float(np.asarray(loss_fn().data).reshape(()))
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            ana = float(analytic.reshape(-1)[j])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(rel_tol=rel_tol, max_rel_err=report)
