"""Minimal reverse-mode differentiation over numpy arrays.

Every op accepts either plain arrays or :class:`Node` objects.  With plain
arrays the op is evaluated eagerly by numpy and nothing is recorded; as soon
as one argument is a :class:`Node` the result is appended to that node's
:class:`Tape`.  Model code is therefore written once and used for both
value-only and differentiated evaluations.

A tape is meant to live for one evaluation: create it, register leaves with
:meth:`Tape.leaf`, build the scalar loss, call :func:`backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class UsageError(RuntimeError):
    """Raised when the tape is used out of order."""


class ShapeError(ValueError):
    """Dimension mismatch between an op and its inputs."""


class Node:
    __slots__ = ("value", "tape", "index", "parents")
    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape", parents=()):
        self.value = value
        self.tape = tape
        self.parents = parents  # tuple of (node, vjp) pairs
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of the nodes created during one evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), self)

    def __len__(self):
        return len(self.nodes)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError("operands recorded on different tapes")
    return tape


def _record(value, args, vjps) -> Node | np.ndarray:
    tape = _tape_of(args)
    if tape is None:
        return value
    parents = tuple((a, f) for a, f in zip(args, vjps) if isinstance(a, Node))
    return Node(value, tape, parents)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(out: Node, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Propagate adjoints from the scalar ``out`` back through its tape.

    Returns a mapping ``node.index -> adjoint`` covering every node that
    ``out`` depends on.  Use :func:`grad_of` to read leaf gradients.
    """
    if not isinstance(out, Node):
        raise UsageError("backward() needs a recorded node; run the forward pass on a tape first")
    if np.size(out.value) != 1:
        raise UsageError(f"backward() expects a scalar output, got shape {out.shape}")
    tape = out.tape
    adj: dict[int, np.ndarray] = {out.index: np.full(np.shape(out.value), seed, dtype=np.float64)}
    for node in reversed(tape.nodes[: out.index + 1]):
        g = adj.pop(node.index, None)
        if g is None:
            continue
        adj[node.index] = g  # keep leaves and intermediates readable
        for parent, vjp in node.parents:
            contrib = _unbroadcast(np.asarray(vjp(g)), np.shape(parent.value))
            prev = adj.get(parent.index)
            adj[parent.index] = contrib if prev is None else prev + contrib
    return adj


def grad_of(adjoints: dict[int, np.ndarray], leaf: Node) -> np.ndarray:
    g = adjoints.get(leaf.index)
    if g is None:
        return np.zeros_like(leaf.value)
    return g


def value_and_grad(fn: Callable, theta: np.ndarray):
    """Evaluate scalar ``fn(theta_node)`` and its gradient w.r.t. ``theta``."""
    tape = Tape()
    leaf = tape.leaf(theta)
    out = fn(leaf)
    if not isinstance(out, Node):
        # output does not depend on theta
        return float(np.asarray(out).reshape(())), np.zeros_like(leaf.value)
    adj = backward(out)
    return float(np.asarray(out.value).reshape(())), grad_of(adj, leaf)


# ----------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av + bv, (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av - bv, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _record(out, (a, b), (lambda g: g / bv, lambda g: -g * out / bv))


def neg(a):
    return _record(-value_of(a), (a,), (lambda g: -g,))


def square(a):
    av = value_of(a)
    return _record(av * av, (a,), (lambda g: 2.0 * g * av,))


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, (a,), (lambda g: g * out,))


def log(a):
    av = value_of(a)
    return _record(np.log(av), (a,), (lambda g: g / av,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _record(out, (a,), (lambda g: g * (1.0 - out * out),))


def relu(a):
    av = value_of(a)
    mask = av > 0
    return _record(np.where(mask, av, 0.0), (a,), (lambda g: g * mask,))


def log_sigmoid(a):
    """log(1 / (1 + exp(-a))) without overflow for large |a|."""
    av = value_of(a)
    out = np.minimum(av, 0.0) - np.log1p(np.exp(-np.abs(av)))
    # d/da log sigmoid(a) = sigmoid(-a)
    sig_neg = np.exp(-np.logaddexp(0.0, av))
    return _record(out, (a,), (lambda g: g * sig_neg,))


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _record(out, (a,), (vjp,))


def logsumexp(a, axis=None, keepdims=False):
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    weights = np.exp(av - out_k)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * weights

    return _record(out, (a,), (vjp,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) == 0 or np.ndim(bv) == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if np.shape(av)[-1] != np.shape(bv)[0 if np.ndim(bv) == 1 else -2]:
        raise ShapeError(f"matmul shapes {np.shape(av)} and {np.shape(bv)} do not align")
    out = av @ bv

    def vjp_a(g):
        if np.ndim(bv) == 1:
            return np.multiply.outer(g, bv)
        return g @ np.swapaxes(bv, -1, -2)

    def vjp_b(g):
        if np.ndim(av) == 1:
            return np.multiply.outer(av, g)
        if np.ndim(bv) == 1:
            return np.swapaxes(av, -1, -2) @ g[..., None] if np.ndim(av) > 2 else av.T @ g
        return np.swapaxes(av, -1, -2) @ g

    return _record(out, (a, b), (vjp_a, vjp_b))


def transpose(a):
    return _record(value_of(a).T, (a,), (lambda g: g.T,))


def reshape(a, shape):
    av = value_of(a)
    old = np.shape(av)
    return _record(np.reshape(av, shape), (a,), (lambda g: np.reshape(g, old),))


def getitem(a, idx):
    av = value_of(a)
    shape = np.shape(av)

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _record(av[idx], (a,), (vjp,))


def embed(a, shape, idx):
    """Scatter ``a`` into a zero array of ``shape`` at ``idx`` (inverse of getitem)."""
    out = np.zeros(shape)
    out[idx] = value_of(a)
    return _record(out, (a,), (lambda g: g[idx],))


def expand_dims(a, axis):
    av = value_of(a)
    return _record(np.expand_dims(av, axis), (a,), (lambda g: np.squeeze(g, axis=axis),))


def tril_solve_rows(L, B):
    """Solve ``L x = b`` for every row ``b`` of ``B`` (lower-triangular ``L``)."""
    Lv, Bv = np.tril(value_of(L)), value_of(B)
    d = Lv.shape[0]
    if np.shape(Bv)[-1] != d:
        raise ShapeError(f"rows of length {np.shape(Bv)[-1]} cannot be solved against a {d}x{d} factor")
    Linv = np.linalg.inv(Lv) if d > 0 else Lv
    Linv = np.tril(Linv)
    X = Bv @ Linv.T

    def vjp_B(g):
        return g @ Linv

    def vjp_L(g):
        g2 = np.reshape(g, (-1, d))
        x2 = np.reshape(X, (-1, d))
        return -np.tril(Linv.T @ g2.T @ x2)

    return _record(X, (L, B), (vjp_L, vjp_B))


# ------------------------------------------------------------------------ MLPs


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        widths = self.widths
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"invalid layer widths {widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Xavier-normal weights, zero biases, flattened layer by layer."""
        chunks = []
        for fan_in, fan_out in self.layer_shapes:
            std = math.sqrt(2.0 / (fan_in + fan_out))
            chunks.append(rng.normal(0.0, std, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)


def mlp_forward(spec: MlpSpec, params, x):
    """Apply the network to a batch ``x`` of shape (batch, in_dim) or (in_dim,)."""
    if np.size(value_of(params)) != spec.n_params:
        raise ShapeError(
            f"parameter slice has {np.size(value_of(params))} entries, network needs {spec.n_params}"
        )
    act = relu if spec.activation == "relu" else tanh
    h = x
    offset = 0
    n_layers = len(spec.layer_shapes)
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes):
        if np.shape(value_of(h))[-1] != fan_in:
            raise ShapeError(
                f"layer {i}: input has width {np.shape(value_of(h))[-1]}, expected {fan_in}"
            )
        W = reshape(params[offset : offset + fan_in * fan_out], (fan_in, fan_out))
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        h = matmul(h, W) + b
        if i < n_layers - 1:
            h = act(h)
    return h


# ------------------------------------------------------------------- Gaussians


@dataclass
class GaussianParams:
    """Mean plus a covariance factor stored with log-diagonal entries.

    ``scale`` is either a vector of log standard deviations (diagonal case)
    or a lower-triangular matrix whose diagonal holds log values and whose
    strict lower part holds the raw off-diagonal entries.
    """

    mean: object
    scale: object
    full: bool = False

    @property
    def dim(self) -> int:
        return np.shape(value_of(self.mean))[-1]

    def factor(self):
        """Dense lower-triangular factor L with exp() applied on the diagonal."""
        return cholesky_from_raw(self.scale) if self.full else None

    def covariance(self) -> np.ndarray:
        if self.full:
            L = value_of(self.factor())
            return L @ L.T
        return np.diag(np.exp(2.0 * value_of(self.scale)))


def cholesky_from_raw(raw):
    d = np.shape(value_of(raw))[0]
    diag_idx = np.diag_indices(d)
    low_idx = np.tril_indices(d, -1)
    diag = exp(getitem(raw, diag_idx))
    low = getitem(raw, low_idx)
    return embed(diag, (d, d), diag_idx) + embed(low, (d, d), low_idx)


def gaussian_logpdf(x, params: GaussianParams):
    """Log-density of N(mean, LL^T) at ``x``; leading axes of ``x``/mean broadcast."""
    xv, mv = value_of(x), value_of(params.mean)
    if np.shape(xv)[-1] != np.shape(mv)[-1]:
        raise ShapeError(f"point has dim {np.shape(xv)[-1]}, mean has dim {np.shape(mv)[-1]}")
    for arr in (xv, mv, value_of(params.scale)):
        if not np.all(np.isfinite(arr)):
            raise ValueError("gaussian_logpdf received non-finite input")
    d = np.shape(mv)[-1]
    diff = x - params.mean
    if params.full:
        L = params.factor()
        shape = np.shape(value_of(diff))
        std = reshape(tril_solve_rows(L, reshape(diff, (-1, d))), shape)
        log_det = sum_(getitem(params.scale, np.diag_indices(d)))
    else:
        std = diff / exp(params.scale)
        log_det = sum_(params.scale, axis=-1)
    return -0.5 * sum_(square(std), axis=-1) - log_det - 0.5 * d * LOG_2PI


def reparam_sample(params: GaussianParams, noise):
    """mean + L @ noise, batched over leading axes of ``noise``."""
    if np.shape(value_of(noise))[-1] != params.dim:
        raise ShapeError(f"noise has dim {np.shape(value_of(noise))[-1]}, expected {params.dim}")
    if params.full:
        return params.mean + matmul(noise, transpose(params.factor()))
    return params.mean + noise * exp(params.scale)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fn(x)
        flat[i] = old - step
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in parts])
