"""Reverse-mode automatic differentiation with the neural building blocks the
message-passing model needs: GRU cell, 2-layer MLP, gather/segment-sum nodes,
MSE loss, and an Adam optimizer.

Tensors are float64 vectors or matrices recorded on an explicit tape; the tape
creation order is a topological order, so backward() is a single reverse sweep.
Matrices exist so one tape node can carry the same update for a whole batch of
entities (all flows advancing one hop, all queues updating at once).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import NettwinError


class ShapeError(NettwinError):
    """Operands have incompatible shapes."""


class Tape:
    """Ordered record of tensor nodes; reusable after reset().

    With check_finite=True every op output is scanned for NaN/Inf (useful when
    chasing a numeric failure; roughly doubles forward cost).
    """

    __slots__ = ("nodes", "check_finite")

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def reset(self) -> None:
        self.nodes.clear()

    def tensor(self, values) -> "Tensor":
        """Record a leaf holding the given values (copied to float64)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"tensors are rank 1 or 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NettwinError("non-finite values in tensor creation")
        return Tensor(arr.copy(), self)


class Tensor:
    """A float64 vector or matrix on a tape, with a gradient slot."""

    __slots__ = ("values", "grad", "tape", "node_id", "_backward")

    def __init__(self, values: np.ndarray, tape: Tape,
                 backward: Callable[[np.ndarray], None] | None = None):
        self.values = values
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._backward = backward
        self.node_id = len(tape.nodes)
        tape.nodes.append(self)
        if backward is not None and tape.check_finite:
            if not np.all(np.isfinite(values)):
                raise NettwinError(f"non-finite values at tape node {self.node_id}")

    @property
    def shape(self):
        return self.values.shape


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    np.add(t.grad, g, out=t.grad)


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise NettwinError("operands live on different tapes")
    return tape


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; fills .grad on every ancestor node."""
    if loss.values.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.values.shape}")
    nodes = loss.tape.nodes
    for n in nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.values)
    for n in reversed(nodes[: loss.node_id + 1]):
        if n.grad is not None and n._backward is not None:
            n._backward(n.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"add: {a.values.shape} vs {b.values.shape}")

    def back(g):
        _acc(a, g)
        _acc(b, g)

    return Tensor(a.values + b.values, tape, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"sub: {a.values.shape} vs {b.values.shape}")

    def back(g):
        _acc(a, g)
        _acc(b, -g)

    return Tensor(a.values - b.values, tape, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"mul: {a.values.shape} vs {b.values.shape}")

    def back(g):
        _acc(a, g * b.values)
        _acc(b, g * a.values)

    return Tensor(a.values * b.values, tape, back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _acc(a, g * c)

    return Tensor(a.values * c, a.tape, back)


def add_array(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array (no gradient flows into the constant)."""
    def back(g):
        _acc(a, g)

    return Tensor(a.values + arr, a.tape, back)


def mul_array(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array elementwise."""
    def back(g):
        _acc(a, g * arr)

    return Tensor(a.values * arr, a.tape, back)


def one_minus(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, -g)

    return Tensor(1.0 - a.values, a.tape, back)


def square(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, 2.0 * a.values * g)

    return Tensor(a.values * a.values, a.tape, back)


def sigmoid(a: Tensor) -> Tensor:
    # Clamp the exponent argument (ufunc min/max, not np.clip: clip's dispatch
    # is an order of magnitude slower); sigmoid saturates long before +-500.
    x = np.minimum(np.maximum(a.values, -500.0), 500.0)
    s = 1.0 / (1.0 + np.exp(-x))

    def back(g):
        _acc(a, g * s * (1.0 - s))

    return Tensor(s, a.tape, back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)

    def back(g):
        _acc(a, g * (1.0 - y * y))

    return Tensor(y, a.tape, back)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def back(g):
        _acc(a, g * mask)

    return Tensor(a.values * mask, a.tape, back)


def matmul_t(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for x of shape (B, d) or (d,) and weight w of shape (h, d)."""
    tape = _same_tape(x, w)
    if w.values.ndim != 2 or x.values.shape[-1] != w.values.shape[1]:
        raise ShapeError(f"matmul_t: x {x.values.shape} vs w {w.values.shape}")
    out = x.values @ w.values.T

    def back(g):
        _acc(x, g @ w.values)
        if x.values.ndim == 2:
            _acc(w, g.T @ x.values)
        else:
            _acc(w, np.outer(g, x.values))

    return Tensor(out, tape, back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (B, h) + (h,) or (h,) + (h,)."""
    tape = _same_tape(x, b)
    if b.values.ndim != 1 or x.values.shape[-1] != b.values.shape[0]:
        raise ShapeError(f"add_bias: x {x.values.shape} vs b {b.values.shape}")

    def back(g):
        _acc(x, g)
        _acc(b, g.sum(axis=0) if g.ndim == 2 else g)

    return Tensor(x.values + b.values, tape, back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w.T + b for x of shape (B, d) or (d,)."""
    tape = _same_tape(x, w, b)
    if w.values.ndim != 2 or x.values.shape[-1] != w.values.shape[1]:
        raise ShapeError(f"linear: x {x.values.shape} vs w {w.values.shape}")

    def back(g):
        _acc(x, g @ w.values)
        if x.values.ndim == 2:
            _acc(w, g.T @ x.values)
            _acc(b, g.sum(axis=0))
        else:
            _acc(w, np.outer(g, x.values))
            _acc(b, g)

    return Tensor(x.values @ w.values.T + b.values, tape, back)


def linear2(x: Tensor, w: Tensor, h: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Fused gate pre-activation x @ w.T + h @ u.T + b (one tape node instead
    of four; the hot path of every GRU step)."""
    tape = _same_tape(x, w, h, u, b)
    if x.values.shape[-1] != w.values.shape[1] or h.values.shape[-1] != u.values.shape[1]:
        raise ShapeError(f"linear2: x {x.values.shape}, h {h.values.shape} vs "
                         f"w {w.values.shape}, u {u.values.shape}")

    def back(g):
        _acc(x, g @ w.values)
        _acc(h, g @ u.values)
        if g.ndim == 2:
            _acc(w, g.T @ x.values)
            _acc(u, g.T @ h.values)
            _acc(b, g.sum(axis=0))
        else:
            _acc(w, np.outer(g, x.values))
            _acc(u, np.outer(g, h.values))
            _acc(b, g)

    return Tensor(x.values @ w.values.T + h.values @ u.values.T + b.values,
                  tape, back)


def gate_blend(z: Tensor, cand: Tensor, state: Tensor) -> Tensor:
    """Fused GRU output (1 - z) * cand + z * state."""
    tape = _same_tape(z, cand, state)

    def back(g):
        _acc(z, g * (state.values - cand.values))
        _acc(cand, g * (1.0 - z.values))
        _acc(state, g * z.values)

    return Tensor((1.0 - z.values) * cand.values + z.values * state.values,
                  tape, back)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.values.ndim != b.values.ndim:
        raise ShapeError(f"concat_cols: {a.values.shape} vs {b.values.shape}")
    na = a.values.shape[-1]

    def back(g):
        if g.ndim == 2:
            _acc(a, g[:, :na])
            _acc(b, g[:, na:])
        else:
            _acc(a, g[:na])
            _acc(b, g[na:])

    return Tensor(np.concatenate([a.values, b.values], axis=-1), tape, back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        np.add.at(x.grad, idx, g)

    return Tensor(x.values[idx], x.tape, back)


def segment_sum(x: Tensor, seg: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of x into n_segments buckets; empty buckets stay zero."""
    seg = np.asarray(seg, dtype=np.intp)
    if x.values.ndim == 2:
        out = np.zeros((n_segments, x.values.shape[1]))
    else:
        out = np.zeros(n_segments)
    np.add.at(out, seg, x.values)

    def back(g):
        _acc(x, g[seg])

    return Tensor(out, x.tape, back)


def assemble_rows(pieces: Sequence[Tensor], src_idx: Sequence[np.ndarray | None],
                  dst_idx: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Build an (n_rows, w) tensor from row subsets of several pieces.

    For piece i, rows src_idx[i] (all rows when None) land at dst_idx[i].
    Destinations must be disjoint and cover all n_rows.
    """
    tape = _same_tape(*pieces)
    width = pieces[0].values.shape[-1]
    out = np.zeros((n_rows, width))
    srcs = [None if s is None else np.asarray(s, dtype=np.intp) for s in src_idx]
    dsts = [np.asarray(d, dtype=np.intp) for d in dst_idx]
    for piece, s, d in zip(pieces, srcs, dsts):
        out[d] = piece.values if s is None else piece.values[s]

    def back(g):
        for piece, s, d in zip(pieces, srcs, dsts):
            if s is None:
                _acc(piece, g[d])
            else:
                if piece.grad is None:
                    piece.grad = np.zeros_like(piece.values)
                np.add.at(piece.grad, s, g[d])

    return Tensor(out, tape, back)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def back(g):
        _acc(a, g.reshape(a.values.shape))

    return Tensor(a.values.reshape(shape), a.tape, back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, np.full_like(a.values, g[0]))

    return Tensor(np.array([a.values.sum()]), a.tape, back)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size

    def back(g):
        _acc(a, np.full_like(a.values, g[0] / n))

    return Tensor(np.array([a.values.mean()]), a.tape, back)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target; scalar output."""
    target = np.asarray(target, dtype=np.float64)
    if pred.values.shape != target.shape:
        raise ShapeError(f"mse: {pred.values.shape} vs {target.shape}")
    return mean_all(square(add_array(pred, -target)))


# ---------------------------------------------------------------------------
# Parameter structs

@dataclass
class GruParams:
    """Update/reset/candidate gate weights; w_* act on the input, u_* on the
    recurrent state, shapes (hidden, input) and (hidden, hidden)."""

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray

    @property
    def input_dim(self) -> int:
        return _dim(self.w_z, 1)

    @property
    def hidden_dim(self) -> int:
        return _dim(self.w_z, 0)


@dataclass
class MlpParams:
    """Two dense layers with ReLU in between; output activation is identity
    or sigmoid."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    out_activation: str = "identity"  # or "sigmoid"

    @property
    def input_dim(self) -> int:
        return _dim(self.w1, 1)

    @property
    def output_dim(self) -> int:
        return _dim(self.w2, 0)


def _dim(arr, axis: int) -> int:
    # Works whether the field holds an ndarray or a bound Tensor.
    values = arr.values if isinstance(arr, Tensor) else arr
    return values.shape[axis]


def glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> GruParams:
    """Glorot-uniform matrices, zero biases."""
    return GruParams(
        w_z=glorot(rng, (hidden_dim, input_dim)),
        u_z=glorot(rng, (hidden_dim, hidden_dim)),
        b_z=np.zeros(hidden_dim),
        w_r=glorot(rng, (hidden_dim, input_dim)),
        u_r=glorot(rng, (hidden_dim, hidden_dim)),
        b_r=np.zeros(hidden_dim),
        w_h=glorot(rng, (hidden_dim, input_dim)),
        u_h=glorot(rng, (hidden_dim, hidden_dim)),
        b_h=np.zeros(hidden_dim),
    )


def init_mlp(rng: np.random.Generator, input_dim: int, hidden_dim: int,
             output_dim: int, out_activation: str = "identity") -> MlpParams:
    return MlpParams(
        w1=glorot(rng, (hidden_dim, input_dim)),
        b1=np.zeros(hidden_dim),
        w2=glorot(rng, (output_dim, hidden_dim)),
        b2=np.zeros(output_dim),
        out_activation=out_activation,
    )


def bind(tape: Tape, params):
    """Copy of a parameter dataclass with every array field wrapped as a tape
    leaf; non-array fields pass through unchanged."""
    kwargs = {}
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        kwargs[f.name] = tape.tensor(v) if isinstance(v, np.ndarray) else v
    return type(params)(**kwargs)


def named_arrays(params, prefix: str = ""):
    """Yield (name, array-or-tensor) for every array field of a dataclass."""
    for f in dataclasses.fields(params):
        v = getattr(params, f.name)
        if isinstance(v, (np.ndarray, Tensor)):
            yield (prefix + f.name, v)


def _as_tensor(tape: Tape, v) -> Tensor:
    return v if isinstance(v, Tensor) else tape.tensor(v)


def gru_step(p: GruParams, state: Tensor, x: Tensor) -> Tensor:
    """One GRU update: gates from input and state, candidate with the reset
    gate applied to the recurrent term before its matmul, output
    (1-z)*candidate + z*state. Accepts a batch (rows) or a single vector.
    """
    tape = state.tape
    if x.values.shape[-1] != _dim(p.w_z, 1) or state.values.shape[-1] != _dim(p.u_z, 1):
        raise ShapeError(
            f"gru_step: input {x.values.shape}, state {state.values.shape} vs "
            f"weights ({_dim(p.w_z, 0)}, {_dim(p.w_z, 1)})")
    w_z, u_z, b_z = (_as_tensor(tape, p.w_z), _as_tensor(tape, p.u_z),
                     _as_tensor(tape, p.b_z))
    w_r, u_r, b_r = (_as_tensor(tape, p.w_r), _as_tensor(tape, p.u_r),
                     _as_tensor(tape, p.b_r))
    w_h, u_h, b_h = (_as_tensor(tape, p.w_h), _as_tensor(tape, p.u_h),
                     _as_tensor(tape, p.b_h))
    z = sigmoid(linear2(x, w_z, state, u_z, b_z))
    r = sigmoid(linear2(x, w_r, state, u_r, b_r))
    cand = tanh(linear2(x, w_h, mul(r, state), u_h, b_h))
    return gate_blend(z, cand, state)


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    tape = x.tape
    if x.values.shape[-1] != _dim(p.w1, 1):
        raise ShapeError(f"mlp_forward: input {x.values.shape} vs "
                         f"w1 ({_dim(p.w1, 0)}, {_dim(p.w1, 1)})")
    w1, b1 = _as_tensor(tape, p.w1), _as_tensor(tape, p.b1)
    w2, b2 = _as_tensor(tape, p.w2), _as_tensor(tape, p.b2)
    h = relu(linear(x, w1, b1))
    y = linear(h, w2, b2)
    if p.out_activation == "sigmoid":
        y = sigmoid(y)
    elif p.out_activation != "identity":
        raise NettwinError(f"unknown output activation '{p.out_activation}'")
    return y


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Standard bias-corrected Adam update, applied in place; returns params."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter "
                             f"{p.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
