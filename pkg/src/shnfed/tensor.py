"""Dense 2-D float64 matrices with reverse-mode automatic differentiation.

Every trainable computation in the package runs through this module. A
``Tensor`` wraps a row-major 2-D numpy array; operations build a define-by-run
graph that ``backward`` sweeps in reverse topological order. Graphs are freed
after the sweep unless asked otherwise, so a fresh forward pass is built every
step. Values are float64 throughout: the test-suite gradient checks need the
headroom.

Graphs are confined to one logical thread (gradient mode is thread-local);
array values are treated as immutable once shared between threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "make_op",
    "accumulate",
    "matmul",
    "add",
    "sub",
    "mul",
    "tanh",
    "elu",
    "relu",
    "scale",
    "add_bias",
    "scale_rows",
    "reciprocal",
    "sqrt",
    "row_sums",
    "sum_all",
    "concat_rows",
    "concat_cols",
    "reshape",
    "transpose",
    "gather_rows",
    "scatter_rows",
    "tile_rows",
    "bmm",
    "transpose_blocks",
    "mse_loss",
    "backward",
    "Rng",
    "glorot_uniform",
    "AdamState",
    "adam_step",
    "sgd_step",
    "zero_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# gradient mode (thread-local so per-client work can run in worker threads)
# ---------------------------------------------------------------------------


class _GradMode(threading.local):
    enabled = True


_GRAD_MODE = _GradMode()


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        self._prev = _GRAD_MODE.enabled
        _GRAD_MODE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_MODE.enabled


# ---------------------------------------------------------------------------
# tensor node
# ---------------------------------------------------------------------------


class Tensor:
    """A 2-D float64 matrix, optionally tracked by the autodiff graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor value must be 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value, cut off from the graph."""
        return Tensor(self.value)

    def grad_or_zero(self) -> np.ndarray:
        """Gradient array; zeros when backward never reached this leaf."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    """Wrap an op result, attaching the backward rule only when needed."""
    if _GRAD_MODE.enabled and any(p.requires_grad for p in parents):
        out = Tensor(value, requires_grad=True)
        out._parents = parents
        out._backprop = backprop
        return out
    return Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Never mutate an incoming gradient in place: it may be shared with
    # another node's .grad through pass-through backward rules.
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def make_op(value: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    """Build a custom graph node from a forward value and a backward rule.

    backprop(g) receives the output gradient and must call accumulate() on
    each parent. Lets other modules define primitives (e.g. matrix functions)
    without reaching into this module's internals.
    """
    return _make(value, parents, backprop)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a node (for custom op backward rules)."""
    _accum(t, g)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims disagree for shapes {a.shape} @ {b.shape}")
    out_val = a.value @ b.value

    def backprop(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(out_val, (a, b), backprop)


def _check_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} must match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backprop(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backprop(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def backprop(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _make(a.value * b.value, (a, b), backprop)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def backprop(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backprop)


def elu(a: Tensor) -> Tensor:
    x = a.value
    pos = x > 0
    y = np.where(pos, x, np.expm1(x))

    def backprop(g):
        _accum(a, g * np.where(pos, 1.0, y + 1.0))

    return _make(y, (a,), backprop)


def relu(a: Tensor) -> Tensor:
    pos = a.value > 0
    y = np.where(pos, a.value, 0.0)

    def backprop(g):
        _accum(a, g * pos)

    return _make(y, (a,), backprop)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backprop(g):
        _accum(a, g * c)

    return _make(a.value * c, (a,), backprop)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1xC bias row to every row of a."""
    if bias.shape != (1, a.cols):
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not match columns of {a.shape}")

    def backprop(g):
        _accum(a, g)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _make(a.value + bias.value, (a, bias), backprop)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a by the scalar s[i, 0]."""
    if s.shape != (a.rows, 1):
        raise ShapeError(f"scale_rows: scale shape {s.shape} does not match rows of {a.shape}")

    def backprop(g):
        _accum(a, g * s.value)
        _accum(s, (g * a.value).sum(axis=1, keepdims=True))

    return _make(a.value * s.value, (a, s), backprop)


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.value

    def backprop(g):
        _accum(a, -g * y * y)

    return _make(y, (a,), backprop)


def sqrt(a: Tensor) -> Tensor:
    """Entrywise square root; callers must keep inputs strictly positive."""
    y = np.sqrt(a.value)

    def backprop(g):
        _accum(a, g * (0.5 / y))

    return _make(y, (a,), backprop)


def row_sums(a: Tensor) -> Tensor:
    def backprop(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(a.value.sum(axis=1, keepdims=True), (a,), backprop)


def sum_all(a: Tensor) -> Tensor:
    def backprop(g):
        _accum(a, np.full(a.shape, g[0, 0]))

    return _make(np.array([[a.value.sum()]]), (a,), backprop)


# ---------------------------------------------------------------------------
# layout ops (exact gradient pass-through)
# ---------------------------------------------------------------------------


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty input")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(f"concat_rows: column counts differ ({p.shape} vs {parts[0].shape})")
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _make(np.vstack([p.value for p in parts]), tuple(parts), backprop)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ ({p.shape} vs {parts[0].shape})")
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _make(np.hstack([p.value for p in parts]), tuple(parts), backprop)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")

    def backprop(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.value.reshape(rows, cols), (a,), backprop)


def transpose(a: Tensor) -> Tensor:
    def backprop(g):
        _accum(a, g.T)

    return _make(a.value.T.copy(), (a,), backprop)


# ---------------------------------------------------------------------------
# indexed / blocked ops (vectorized plumbing for graph-structured models)
# ---------------------------------------------------------------------------


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows a[idx]; duplicate indices allowed (backward scatter-adds)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backprop(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.value[idx], (a,), backprop)


def scatter_rows(a: Tensor, idx: np.ndarray, out_rows: int) -> Tensor:
    """Accumulate row j of a into row idx[j] of a zero (out_rows, cols) matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    out_val = np.zeros((out_rows, a.cols))
    np.add.at(out_val, idx, a.value)

    def backprop(g):
        _accum(a, g[idx])

    return _make(out_val, (a,), backprop)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of a vertically."""

    def backprop(g):
        _accum(a, g.reshape(reps, a.rows, a.cols).sum(axis=0))

    return _make(np.tile(a.value, (reps, 1)), (a,), backprop)


def bmm(a: Tensor, b: Tensor, blocks: int) -> Tensor:
    """Blockwise matmul of vertically stacked blocks: out_i = a_i @ b_i.

    a is (blocks*p, k), b is (blocks*k, n); the result is (blocks*p, n).
    """
    if a.rows % blocks or b.rows % blocks:
        raise ShapeError(f"bmm: {a.shape} / {b.shape} not divisible into {blocks} blocks")
    p = a.rows // blocks
    k = b.rows // blocks
    if a.cols != k:
        raise ShapeError(f"bmm: block inner dims disagree ({a.shape} @ {b.shape}, blocks={blocks})")
    a3 = a.value.reshape(blocks, p, k)
    b3 = b.value.reshape(blocks, k, b.cols)
    out_val = (a3 @ b3).reshape(blocks * p, b.cols)

    def backprop(g):
        g3 = g.reshape(blocks, p, b.cols)
        _accum(a, (g3 @ b3.transpose(0, 2, 1)).reshape(blocks * p, k))
        _accum(b, (a3.transpose(0, 2, 1) @ g3).reshape(blocks * k, b.cols))

    return _make(out_val, (a, b), backprop)


def transpose_blocks(a: Tensor, blocks: int) -> Tensor:
    """Transpose each vertically stacked block: (blocks*p, q) -> (blocks*q, p)."""
    if a.rows % blocks:
        raise ShapeError(f"transpose_blocks: {a.shape} not divisible into {blocks} blocks")
    p = a.rows // blocks
    q = a.cols

    def backprop(g):
        _accum(a, g.reshape(blocks, q, p).transpose(0, 2, 1).reshape(blocks * p, q))

    out_val = a.value.reshape(blocks, p, q).transpose(0, 2, 1).reshape(blocks * q, p)
    return _make(out_val, (a,), backprop)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared entrywise differences, as a 1x1 tensor."""
    tgt = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {tgt.shape} must match")
    diff = pred.value - tgt
    n = diff.size

    def backprop(g):
        _accum(pred, (2.0 * g[0, 0] / n) * diff)

    return _make(np.array([[(diff * diff).sum() / n]]), (pred,), backprop)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS: deep diffusion stacks overflow Python's recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Reverse sweep from a scalar loss, accumulating leaf gradients.

    Leaves never reached keep grad None, read as zero via grad_or_zero().
    The graph is dismantled afterwards unless retain_graph is set.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        backprop = node._backprop
        if backprop is None or node.grad is None:
            continue
        backprop(node.grad)
        # Interior grads are consumed here; clearing them keeps a retained
        # graph reusable (zero_grad on leaves is then enough for a re-sweep).
        node.grad = None
        if not retain_graph:
            node._parents = ()
            node._backprop = None
    loss.grad = np.ones((1, 1))


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 stream; identical seed gives an identical stream anywhere.

    child(key) derives an independent substream deterministically, so e.g.
    each client can own a private stream spawned from the run seed.
    """

    __slots__ = ("seed", "gen")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, key: int) -> "Rng":
        spawned = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        return Rng(int(spawned.generate_state(1, dtype=np.uint64)[0]))

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.gen.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray] | None,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update in place; weight decay enters the gradient additively."""
    if grads is None:
        grads = [p.grad_or_zero() for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.value.shape}")
        if weight_decay:
            g = g + weight_decay * p.value
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def sgd_step(params: list[Tensor], grads: list[np.ndarray] | None, lr: float) -> None:
    """Plain gradient descent: p <- p - lr * g."""
    if grads is None:
        grads = [p.grad_or_zero() for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} vs param {p.value.shape}")
        p.value = p.value - lr * g


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
