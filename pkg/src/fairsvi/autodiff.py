"""Reverse-mode automatic differentiation over dense float64 arrays.

Every :class:`Tensor` is also a tape node: an op records its parents and a
vector-Jacobian product closure, and :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order.  Nodes that cannot reach a
trainable leaf are never recorded, so constant sub-expressions cost nothing
on the backward pass.

Calling ``backward`` twice on the same root yields identical gradients: the
accumulators of every node on the tape are reset before each pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, DomainError, TrainingDivergence

__all__ = [
    "Tensor",
    "as_tensor",
    "apply_op",
    "detach",
    "exp",
    "log",
    "sqrt",
    "square",
    "absolute",
    "relu",
    "softplus",
    "sigmoid",
    "softmax",
    "log_softmax",
    "logsumexp",
    "concat",
    "take",
    "dropout",
    "batch_norm",
    "maximum_scalar",
    "gradients",
    "AdamState",
    "adam_step",
]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


class Tensor:
    """A float64 array that records how it was computed.

    Parameters
    ----------
    data : array_like
        Forward value; converted to a float64 ndarray.
    requires_grad : bool
        Mark as a trainable leaf.
    name : str, optional
        Label used in divergence diagnostics and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_vjp")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.data!r}, op={self.op!r}{tag})"

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.data, other.data)
        a_shape, b_shape = self.shape, other.shape
        return apply_op(
            "add",
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.data, other.data)
        a_shape, b_shape = self.shape, other.shape
        return apply_op(
            "sub",
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.data, other.data)
        a, b = self.data, other.data
        return apply_op(
            "mul",
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.data, other.data)
        a, b = self.data, other.data
        out = a / b
        return apply_op(
            "div",
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return apply_op("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise DimensionError("only scalar exponents are supported")
        a = self.data
        return apply_op(
            "pow", a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
        if b.ndim == 1:
            return apply_op(
                "matvec", a @ b, (self, other), lambda g: (np.outer(g, b), a.T @ g)
            )
        return apply_op("matmul", a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        a_shape = self.shape

        def vjp(g):
            out = np.zeros(a_shape)
            np.add.at(out, index, g)
            return (out,)

        return apply_op("getitem", self.data[index], (self,), vjp)

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a_shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape),)

        return apply_op("sum", self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims=False):
        """Maximum with the gradient routed to the first maximizing index."""
        a = self.data
        if axis is None:
            flat = int(np.argmax(a))
            value = a.reshape(-1)[flat]
            out = np.full((1,) * a.ndim, value) if keepdims else np.asarray(value)

            def vjp(g):
                grad = np.zeros(a.size)
                grad[flat] = np.asarray(g).reshape(-1)[0]
                return (grad.reshape(a.shape),)

            return apply_op("max", out, (self,), vjp)

        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        out = np.take_along_axis(a, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.zeros_like(a)
            np.put_along_axis(grad, idx, g, axis=axis)
            return (grad,)

        return apply_op("max", out, (self,), vjp)

    # -- shape ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from exc
        return apply_op("reshape", out, (self,), lambda g: (g.reshape(a_shape),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return apply_op(
            "transpose", self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    # -- elementwise methods --------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    def detach(self):
        return detach(self)

    # -- backward pass --------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_op(op, data, parents, vjp):
    """Create a node from a forward value and its vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, each shaped
    like that parent.  Other modules use this hook for fused primitives.
    """
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def detach(x):
    """Same forward value, cut from the tape."""
    out = Tensor(as_tensor(x).data)
    out.op = "detach"
    return out


# -- elementwise functions --------------------------------------------------
def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return apply_op("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    a = x.data
    if np.any(a <= 0):
        raise DomainError("log of a non-positive value")
    return apply_op("log", np.log(a), (x,), lambda g: (g / a,))


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt of a non-positive value")
    out = np.sqrt(x.data)
    return apply_op("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    a = x.data
    return apply_op("square", a * a, (x,), lambda g: (2.0 * g * a,))


def absolute(x):
    x = as_tensor(x)
    a = x.data
    return apply_op("abs", np.abs(a), (x,), lambda g: (g * np.sign(a),))


def relu(x):
    x = as_tensor(x)
    a = x.data
    return apply_op("relu", np.maximum(a, 0.0), (x,), lambda g: (g * (a > 0),))


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def softplus(x):
    x = as_tensor(x)
    a = x.data
    return apply_op("softplus", np.logaddexp(0.0, a), (x,), lambda g: (g * _sigmoid(a),))


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def maximum_scalar(x, floor):
    """``max(x, floor)`` elementwise; ties take the zero-gradient branch."""
    return relu(as_tensor(x) - floor) + floor


def softmax(x, axis=-1):
    x = as_tensor(x)
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return apply_op(
        "softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return apply_op(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
    )


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    a = x.data
    top = a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(a - top).sum(axis=axis, keepdims=True)) + top
    weights = np.exp(a - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return apply_op("logsumexp", out, (x,), vjp)


# -- structural -------------------------------------------------------------
def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, indices, axis=0):
    """Index-select along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    a_shape = x.shape
    if indices.size and (indices.max() >= a_shape[axis] or indices.min() < -a_shape[axis]):
        raise DimensionError(f"index out of range for axis of length {a_shape[axis]}")

    def vjp(g):
        out = np.zeros(a_shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return apply_op("take", np.take(x.data, indices, axis=axis), (x,), vjp)


def dropout(x, keep_prob, rng, training=True):
    """Inverted dropout; the identity in evaluation mode or at ``keep_prob=1``."""
    x = as_tensor(x)
    if not training or keep_prob >= 1.0:
        return x
    if not 0.0 < keep_prob <= 1.0:
        raise DomainError(f"keep probability must be in (0, 1], got {keep_prob}")
    mask = (rng.uniform(size=x.shape) < keep_prob) / keep_prob
    return apply_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Normalize over the batch axis.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain ndarrays) are updated in place; in evaluation
    mode the running statistics are used and nothing is mutated.
    """
    x = as_tensor(x)
    if training:
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = square(centered).mean(axis=0, keepdims=True)
        m = x.shape[0]
        unbiased = var.data * (m / (m - 1)) if m > 1 else var.data
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(running_mean.shape)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(running_var.shape)
        xhat = centered / sqrt(var + eps)
    else:
        xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return xhat * gamma + beta


# -- gradients and optimization ---------------------------------------------
def gradients(root, params):
    """Backpropagate from ``root``; unreachable parameters get zeros.

    ``params`` is a mapping name -> Tensor; returns name -> ndarray.
    """
    root.backward()
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=float)
    return out


@dataclass
class AdamState:
    """Moment estimates for Adam, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters
    ----------
    params : Mapping[str, Tensor]
    grads : Mapping[str, ndarray]
        Same keys as ``params``.
    state : AdamState

    Returns
    -------
    AdamState
        ``state`` itself, with the step counter incremented.

    Raises
    ------
    TrainingDivergence
        If any gradient is non-finite; nothing is updated in that case.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(name, f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
