"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Each op returns a new Tensor whose closure knows how to push a gradient
back into its parents; calling ``backward()`` on a scalar walks the tape
in reverse topological order. Gradients are exact analytic derivatives
(verified against central finite differences in the test suite).
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable parent."""
        if self.data.shape != ():
            raise NumericError(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)

def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _track(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def log_clip(a, lo: float = 1e-12) -> Tensor:
    """Natural log of a clipped below at ``lo``; zero gradient below the clip."""
    a = _as_tensor(a)
    clipped = np.maximum(a.data, lo)

    def backward(g):
        _accum(a, g * (a.data >= lo) / clipped)

    return _make(np.log(clipped), (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out.size

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense(x, w, b) -> Tensor:
    """Affine map: x @ w + b for x of shape (batch, d_in)."""
    return add(matmul(x, w), b)


def conv1d_valid(x, w, b) -> Tensor:
    """Valid (no padding) 1D convolution over the time axis.

    x: (batch, time, ch_in), w: (k, ch_in, ch_out), b: (ch_out,).
    out[s, t, o] = sum_{tau, i} x[s, t + tau, i] * w[tau, i, o] + b[o];
    the feature axis is never convolved.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.data.shape[2] != w.data.shape[1]:
        raise NumericError(
            f"conv1d shapes do not line up: x {x.data.shape}, w {w.data.shape}"
        )
    k = w.data.shape[0]
    t_in = x.data.shape[1]
    if t_in < k:
        raise NumericError(f"conv1d kernel {k} longer than time axis {t_in}")
    t_out = t_in - k + 1
    out = x.data[:, 0:t_out, :] @ w.data[0]
    for tau in range(1, k):
        out += x.data[:, tau : tau + t_out, :] @ w.data[tau]
    out = out + b.data

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for tau in range(k):
                gx[:, tau : tau + t_out, :] += g @ w.data[tau].T
            _accum(x, gx)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for tau in range(k):
                gw[tau] = np.tensordot(x.data[:, tau : tau + t_out, :], g, axes=([0, 1], [0, 1]))
            _accum(w, gw)
        _accum(b, g.sum(axis=(0, 1)))

    return _make(out, (x, w, b), backward)


def embedding_add(x, table, ids: np.ndarray) -> Tensor:
    """Add one embedding row per sample across every time step.

    x: (batch, time, n), table: (rows, n), ids: (batch,) ints. The same row
    is added at all time steps, so the categorical signal is constant in
    time.
    """
    x, table = _as_tensor(x), _as_tensor(table)
    ids = np.asarray(ids, dtype=int)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise NumericError(
            f"embedding ids out of range [0, {table.data.shape[0]}): {ids.min()}..{ids.max()}"
        )
    rows = table.data[ids]  # (batch, n)
    out = x.data + rows[:, None, :]

    def backward(g):
        _accum(x, g)
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g.sum(axis=1))
            _accum(table, gt)

    return _make(out, (x, table), backward)


class BatchNormState:
    """Running statistics and hyperparameters for one batch-norm layer."""

    def __init__(self, n_channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.running_mean = np.zeros(n_channels, dtype=np.float64)
        self.running_var = np.ones(n_channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm(
    x, gamma, beta, state: BatchNormState, train: bool, update_stats: bool = True
) -> Tensor:
    """Normalize per channel (last axis) over all other axes.

    Train mode uses batch statistics (population variance) and, unless
    ``update_stats`` is off, folds them into the running stats with the
    state's momentum. Infer mode is a pure function of the running stats.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))

    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = gamma.data * xhat + beta.data

        def backward_infer(g):
            _accum(x, g * (gamma.data * inv))
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))

        return _make(out, (x, gamma, beta), backward_infer)

    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    if update_stats:
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mu
        state.running_var = m * state.running_var + (1.0 - m) * var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.data.size // x.data.shape[-1]

    def backward_train(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            _accum(x, (inv / n) * (n * dxhat - s1 - xhat * s2))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))

    return _make(out, (x, gamma, beta), backward_train)


def leaky_relu(x, alpha: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    slope = np.where(x.data >= 0, 1.0, alpha)

    def backward(g):
        _accum(x, g * slope)

    return _make(x.data * slope, (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        def backward_id(g):
            _accum(x, g)

        return _make(x.data.copy(), (x,), backward_id)
    if rng is None:
        raise NumericError("dropout in train mode needs an rng")
    scale = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accum(x, g * scale)

    return _make(x.data * scale, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the time axis: (batch, time, ch) -> (batch, ch)."""
    return mean(x, axis=1)


def softmax(x) -> Tensor:
    """Shift-invariant softmax over the last axis, exactly normalized."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), backward)
