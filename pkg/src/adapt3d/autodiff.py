"""Minimal reverse-mode automatic differentiation on numpy arrays.

The graph is rebuilt on every forward pass (define-by-run).  A `Tensor` wraps
a float64 ndarray; operations attach backward closures only when some input
requires gradients, so frozen models run forward with no graph overhead.

Also houses the batch-normalization kernel with switchable statistics
sources, the KL-divergence and smooth-L1 losses, and the finite-difference
gradient checker used throughout the test suite.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

BN_EPS = 1e-8
KL_FLOOR = 1e-7  # probabilities are clamped to >= KL_FLOOR before log


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics are requested on a batch of size < 2."""


class InvalidStateError(ValueError):
    """Raised on invalid normalization state (e.g. negative variance)."""


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    # sum away leading axes added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum along axes that were broadcast from extent 1
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Differentiable multi-dimensional value (node in the autodiff graph)."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- graph construction -------------------------------------------------

    @staticmethod
    def _op(data, parents, op, backward):
        req = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=req, parents=tuple(parents), op=op,
                      backward=backward if req else None)

    def backward(self, grad=None):
        """Reverse-topological accumulation of gradients into leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g

    # ---- arithmetic ---------------------------------------------------------

    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._wrap(other)
        out_data = self.data + other.data
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

        return Tensor._op(out_data, (a, b), "add", bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._op(-a.data, (a,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return Tensor._op(self.data * other.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * Tensor._wrap(other) ** -1.0

    def __rtruediv__(self, other):
        return Tensor._wrap(other) * self ** -1.0

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self
        out = a.data ** exponent

        def bw(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._op(out, (a,), f"pow{exponent}", bw)

    def matmul(self, other):
        other = Tensor._wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError(
                f"matmul shapes do not conform: {self.data.shape} @ {other.data.shape}")
        a, b = self, other

        def bw(g):
            return (g @ b.data.T, a.data.T @ g)

        return Tensor._op(a.data @ b.data, (a, b), "matmul", bw)

    __matmul__ = matmul

    # ---- elementwise nonlinearities ----------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._op(a.data * mask, (a,), "relu", lambda g: (g * mask,))

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._op(out, (a,), "exp", lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._op(np.log(a.data), (a,), "log", lambda g: (g / a.data,))

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._op(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._op(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))

    def clamp_min(self, lo):
        """max(x, lo); gradient passes only where x > lo."""
        a = self
        mask = a.data > lo
        return Tensor._op(np.maximum(a.data, lo), (a,), "clamp_min",
                          lambda g: (g * mask,))

    # ---- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.data.shape).copy(),)

        return Tensor._op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis, keepdims=False):
        a = self
        idx = np.argmax(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
            return (ga,)

        return Tensor._op(out, (a,), "max", bw)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._op(a.data.reshape(shape), (a,), "reshape",
                          lambda g: (g.reshape(a.data.shape),))

    def take_rows(self, idx):
        """Gather rows along axis 0; duplicate indices accumulate gradient."""
        a = self
        idx = np.asarray(idx, dtype=np.intp)

        def bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return Tensor._op(a.data[idx], (a,), "take_rows", bw)

    def __getitem__(self, key):
        a = self

        def bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, key, g)
            return (ga,)

        return Tensor._op(a.data[key], (a,), "getitem", bw)

    def softmax(self, axis=-1):
        # shift by a detached max for stability; softmax is shift-invariant
        z = self - Tensor(self.data.max(axis=axis, keepdims=True))
        e = z.exp()
        return e / e.sum(axis=axis, keepdims=True)


def concat(tensors, axis=0):
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis),
                      tuple(tensors), "concat", bw)


def stack(tensors, axis=0):
    return concat([t.reshape(t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                   for t in tensors], axis=axis)


# ---- neural-layer kernels ---------------------------------------------------


def forward_linear(x, W, b):
    """y = x W + b with exact analytic gradients."""
    x, W, b = Tensor._wrap(x), Tensor._wrap(W), Tensor._wrap(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.data.shape[1] != W.data.shape[0]:
        raise DimensionError(
            f"linear shapes do not conform: x{x.data.shape}, W{W.data.shape}")
    if b.data.shape != (W.data.shape[1],):
        raise DimensionError(f"bias shape {b.data.shape} does not match W{W.data.shape}")
    return x @ W + b


class StatsMode(Enum):
    """Which statistics a batchnorm forward normalizes with."""
    BATCH = "batch"
    EXTERNAL = "external_running"


@dataclass
class BnState:
    """Per-layer batchnorm state: learnable scale/shift plus running stats.

    Running statistics follow the recursion
    mu' <- (1 - alpha) mu' + alpha mu,  var' <- (1 - alpha) var' + alpha var,
    where alpha is the momentum and (mu, var) are the population batch stats.
    """
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.05

    @classmethod
    def create(cls, channels, momentum=0.05, requires_grad=True):
        return cls(gamma=Tensor(np.ones(channels), requires_grad=requires_grad),
                   beta=Tensor(np.zeros(channels), requires_grad=requires_grad),
                   running_mean=np.zeros(channels),
                   running_var=np.ones(channels),
                   momentum=float(momentum))

    def validate(self):
        if not (0.0 < self.momentum <= 1.0):
            raise InvalidStateError(f"momentum {self.momentum} outside (0, 1]")
        if np.any(self.running_var < 0):
            raise InvalidStateError("negative running variance")


def batchnorm(x, state: BnState, mode: StatsMode, training: bool):
    """Normalize rows of x per channel, scaled by gamma and shifted by beta.

    BATCH mode normalizes by the (population) batch statistics and, when
    training, folds them into the running statistics.  EXTERNAL mode
    normalizes with the stored running statistics and never mutates them.
    """
    x = Tensor._wrap(x)
    state.validate()
    if x.data.ndim != 2:
        raise DimensionError("batchnorm expects a 2-D (batch x channels) input")
    if mode is StatsMode.BATCH:
        if training and x.data.shape[0] < 2:
            raise DegenerateBatchError(
                f"batch statistics need >= 2 rows, got {x.data.shape[0]}")
        mu = x.mean(axis=0, keepdims=True)
        var = ((x - mu) ** 2.0).mean(axis=0, keepdims=True)
        xhat = (x - mu) * (var + BN_EPS) ** -0.5
        if training:
            a = state.momentum
            state.running_mean = (1.0 - a) * state.running_mean + a * mu.data.ravel()
            state.running_var = (1.0 - a) * state.running_var + a * var.data.ravel()
    elif mode is StatsMode.EXTERNAL:
        xhat = (x - Tensor(state.running_mean)) * Tensor(
            (state.running_var + BN_EPS) ** -0.5)
    else:
        raise ValueError(f"unknown stats mode: {mode!r}")
    return xhat * state.gamma + state.beta


# ---- losses -----------------------------------------------------------------


def kl_divergence(p, q):
    """Mean over rows of sum_k p log(p / q), with probabilities clamped.

    Rows of p and q must be probability vectors (entries >= 0, summing to 1
    within 1e-6).  Entries are clamped to >= KL_FLOOR before the log so the
    loss stays finite; 0 * log(0/q) contributes exactly 0 because the raw p
    multiplies the log terms.
    """
    p, q = Tensor._wrap(p), Tensor._wrap(q)
    pa = p if p.data.ndim == 2 else p.reshape(1, -1)
    qa = q if q.data.ndim == 2 else q.reshape(1, -1)
    if pa.data.shape != qa.data.shape:
        raise DimensionError(f"kl shapes differ: {pa.data.shape} vs {qa.data.shape}")
    for name, arr in (("p", pa.data), ("q", qa.data)):
        if np.any(arr < -1e-12):
            raise ValueError(f"{name} has negative entries")
        if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"rows of {name} are not normalized")
    log_ratio = pa.clamp_min(KL_FLOOR).log() - qa.clamp_min(KL_FLOOR).log()
    return (pa * log_ratio).sum(axis=1).mean()


def smooth_l1(a, b):
    """Mean smooth-L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise (d = a - b)."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"smooth_l1 shapes differ: {a.data.shape} vs {b.data.shape}")
    d = a - b
    ad = d.abs()
    quad_mask = (ad.data < 1.0).astype(np.float64)
    elem = Tensor(quad_mask) * (d ** 2.0) * 0.5 + Tensor(1.0 - quad_mask) * (ad - 0.5)
    return elem.mean()


def binary_cross_entropy(p, labels):
    """Mean BCE of probabilities p against 0/1 labels, with clamped logs."""
    p = Tensor._wrap(p)
    y = np.asarray(labels, dtype=np.float64)
    pos = p.clamp_min(KL_FLOOR).log()
    neg = (1.0 - p).clamp_min(KL_FLOOR).log()
    return -(Tensor(y) * pos + Tensor(1.0 - y) * neg).mean()


# ---- gradient checking ------------------------------------------------------


def grad_check(op, inputs, eps=1e-5, max_entries_per_input=None, rng=None):
    """Compare analytic gradients of a scalar-valued op to central differences.

    Returns the worst scale-clamped relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over the checked
    entries.  When `max_entries_per_input` is set, a random subset of entries
    per input tensor is checked (needed for large composite losses).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        t.zero_grad()
    out = op(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("op produced a non-finite output")
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued op")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.ravel()
        n = flat.size
        entries = np.arange(n)
        if max_entries_per_input is not None and n > max_entries_per_input:
            entries = rng.choice(n, size=max_entries_per_input, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(op(*inputs).data)
            flat[i] = orig - eps
            lo = float(op(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic.ravel()[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
