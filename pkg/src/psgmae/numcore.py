"""Dense-tensor numerical core: reverse-mode autodiff on an explicit tape,
Adam, and finite-difference gradient verification.

Tensors wrap contiguous row-major numpy arrays (float32 for training,
float64 for gradient checks). Ops executed while a Tape is active record a
backward rule; ``Tape.backward`` walks the records in reverse, which is a
valid reverse-topological order because records are appended in execution
order. Gradients accumulate into ``.grad`` of every requires_grad leaf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class NumcoreError(Exception):
    pass


class ShapeMismatch(NumcoreError):
    pass


class LossNotScalar(NumcoreError):
    pass


class DetachedTensor(NumcoreError):
    pass


class NonFiniteValue(NumcoreError):
    pass


class Tensor:
    """Dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise LossNotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations; context manager activates recording."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._records.append((output, inputs, backward))
        self._output_ids.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of requires_grad leaves."""
        if loss.data.size != 1:
            raise LossNotScalar(f"loss has shape {loss.shape}, expected a scalar")
        if id(loss) not in self._output_ids:
            raise DetachedTensor("loss was not produced by an op on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for output, inputs, backward_fn in reversed(self._records):
            upstream = grads.pop(id(output), None)
            if upstream is None:
                continue
            partials = backward_fn(upstream)
            for tensor, partial in zip(inputs, partials):
                if partial is None or not tensor.requires_grad:
                    continue
                if id(tensor) in self._output_ids:
                    held = grads.get(id(tensor))
                    grads[id(tensor)] = partial if held is None else held + partial
                else:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += partial


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(out, inputs, backward)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return (_reduce_to(np.matmul(g, _swap(b.data)), a.shape),
                _reduce_to(np.matmul(_swap(a.data), g), b.shape))

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add cannot broadcast {a.shape} + {b.shape}") from exc

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul cannot broadcast {a.shape} * {b.shape}") from exc

    def backward(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeMismatch(f"transpose needs >=2-d input, got {a.shape}")

    def backward(g):
        return (_swap(g),)

    return _make(_swap(a.data).copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out.copy(), (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(
            f"concat axis {axis} of shapes {[t.shape for t in tensors]}"
        ) from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[bounds[i]: bounds[i + 1]], 0, axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim < 1 or (idx.size and idx.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather_rows index out of range for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx].copy(), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatch(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        h = g * gain.data
        dx = inv * (h - h.mean(axis=-1, keepdims=True)
                    - xhat * (h * xhat).mean(axis=-1, keepdims=True))
        dgain = _reduce_to(g * xhat, gain.shape)
        dbias = _reduce_to(g, bias.shape)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), backward)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            base = np.broadcast_to(g, a.shape)
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            base = np.broadcast_to(expanded, a.shape)
        return ((base / count).astype(a.data.dtype, copy=False),)

    return _make(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; input must be non-negative.

    The backward pass guards the 0.5/sqrt(x) factor at x == 0 (where the
    incoming gradient is zero along every guarded path in this package).
    """
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return _make(out, (a,), backward)


def divide(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """a / (b + eps); pass eps > 0 to guard denominators near zero."""
    denom = b.data + eps
    out = a.data / denom

    def backward(g):
        da = _reduce_to(g / denom, a.shape)
        db = _reduce_to(-g * out / denom, b.shape)
        return da, db

    return _make(out, (a, b), backward)


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes through where a >= floor."""
    out = np.maximum(a.data, floor)

    def backward(g):
        return (g * (a.data >= floor),)

    return _make(out, (a,), backward)


def zero_grad(params) -> None:
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


@dataclass
class AdamState:
    """Adam moments and hyperparameters for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update with bias correction over named parameters."""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeMismatch(
                f"moment shape {m.shape} != param shape {p.data.shape} for {name!r}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def grad_check(function, params: dict[str, Tensor], fd_step: float = 1e-3) -> float:
    """Max relative error between tape gradients and central finite differences.

    The finite-difference side is always evaluated in float64 (the analytic
    side runs in the parameters' own dtype), with the step scaled per
    coordinate as fd_step * max(1, |theta|). Relative error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    with Tape() as tape:
        loss = function(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteValue("loss is not finite at the expansion point")
    zero_grad(params)
    tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteValue(f"non-finite analytic gradient for {name!r}")
        analytic[name] = g.astype(np.float64)

    probe = {name: Tensor(p.data.astype(np.float64)) for name, p in params.items()}

    def evaluate() -> float:
        value = function(probe).item()
        if not math.isfinite(value):
            raise NonFiniteValue("non-finite loss during finite differencing")
        return value

    max_rel = 0.0
    for name, p in probe.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            theta = flat[i]
            h = fd_step * max(1.0, abs(theta))
            flat[i] = theta + h
            up = evaluate()
            flat[i] = theta - h
            down = evaluate()
            flat[i] = theta
            fd = (up - down) / (2.0 * h)
            a = grad_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
