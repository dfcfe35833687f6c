"""
Dense tensors with tape-based reverse-mode differentiation
numpy does the arithmetic; the tape records what to replay backward
"""

import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Additive mask value; exp() of it underflows to exactly 0.0
MASK_VALUE = -1e30

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of differentiable operations.

    Operations executed while a tape is active (``with Tape() as tape:``) are
    appended in execution order, which is already a topological order, so
    replaying the list backward visits every node after all of its consumers.
    Tapes are per-thread; outside any tape operations just compute values.
    """

    def __init__(self):
        self.nodes: List[Tuple["Tensor", Tuple["Tensor", ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], fn: BackwardFn) -> None:
        out._tape = self
        self.nodes.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from loss"""
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {list(loss.data.shape)}")
        if loss._tape is not self:
            if loss._tape is None and loss.requires_grad:
                loss._accumulate(np.ones_like(loss.data))
                return
            raise UsageError("loss was not produced on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            upstream = pending.pop(id(out), None)
            if upstream is None:
                continue
            for parent, grad in zip(parents, fn(upstream)):
                if grad is None:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    pending[key] = pending[key] + grad if key in pending else grad
                elif parent.requires_grad:
                    parent._accumulate(grad)


class Tensor:
    """
    Row-major float64 array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` receive ``.grad`` on backward;
    repeated backward passes accumulate until ``zero_grad()``.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def parameter(cls, data: ArrayLike, name: str = "") -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.broadcast_to(grad, self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, exponent: float): return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def max(self, axis: int = -1): return tmax(self, axis)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def relu(self): return relu(self)
    def reshape(self, *shape: int): return reshape(self, shape)
    def take(self, indices): return take(self, indices)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        tape.record(out, parents, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + e^x), computed without overflow"""
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sig,))


# Linear algebra and shape

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 axes; reshape vectors to rows")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: ArrayLike) -> Tensor:
    """Swap the last two axes"""
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def take(a: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate gradient"""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise UsageError("concat needs at least one tensor")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack_rows(vectors: Sequence[ArrayLike]) -> Tensor:
    """Stack 1-D tensors into a matrix"""
    return concat([reshape(as_tensor(v), (1, -1)) for v in vectors], axis=0)


# Reductions

def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element"""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _result(np.squeeze(np.take_along_axis(a.data, idx, axis=axis), axis=axis), (a,), backward)


def norm(a: ArrayLike, p: int = 2, axis: int = -1, keepdims: bool = False) -> Tensor:
    """L1 or L2 norm along an axis; subgradient 0 at the origin"""
    a = as_tensor(a)
    if p == 1:
        out = np.sum(np.abs(a.data), axis=axis, keepdims=keepdims)

        def backward(g):
            g = g if keepdims else np.expand_dims(g, axis)
            return (g * np.sign(a.data),)
    elif p == 2:
        out = np.sqrt(np.sum(a.data ** 2, axis=axis, keepdims=keepdims))

        def backward(g):
            o = out if keepdims else np.expand_dims(out, axis)
            g = g if keepdims else np.expand_dims(g, axis)
            safe = np.where(o > 0, o, 1.0)
            return (np.where(o > 0, g * a.data / safe, 0.0),)
    else:
        raise UsageError(f"norm order must be 1 or 2, got {p}")
    return _result(out, (a,), backward)


# Probability

def softmax(v: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along an axis"""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise UsageError("softmax of an empty vector")
    shifted = v.data - np.max(v.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result(out, (v,),
                   lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def log_softmax(v: ArrayLike, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise UsageError("log_softmax of an empty vector")
    shifted = v.data - np.max(v.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (v,),
                   lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def cross_entropy_logits(logits: ArrayLike, targets: Sequence[int],
                         ignore_index: Optional[int] = None) -> Tensor:
    """
    Mean over positions of -log softmax(logits)[target].

    Positions whose target equals ``ignore_index`` are left out of both the
    sum and the count.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [positions x vocab], got {list(logits.shape)}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    positions, vocab = logits.shape
    if targets.shape[0] != positions:
        raise ShapeError(f"{targets.shape[0]} targets for {positions} logit rows")
    keep = np.ones(positions, dtype=bool) if ignore_index is None else targets != ignore_index
    checked = targets[keep]
    if checked.size and (checked.min() < 0 or checked.max() >= vocab):
        raise UsageError(f"target index out of range for vocab size {vocab}")
    count = int(keep.sum())
    if count == 0:
        raise UsageError("cross entropy over zero positions")
    picks = np.zeros((positions, vocab))
    picks[np.arange(positions)[keep], checked] = 1.0
    return -(log_softmax(logits, axis=-1) * picks).sum() * (1.0 / count)


# Similarity

def _check_nonzero(x: Tensor, axis: int = -1) -> None:
    norms = np.sqrt(np.sum(x.data ** 2, axis=axis))
    if np.any(norms == 0):
        raise NumericalError("cosine similarity of a zero-norm vector")


def normalize(x: ArrayLike, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along an axis"""
    x = as_tensor(x)
    _check_nonzero(x, axis)
    return x / norm(x, 2, axis=axis, keepdims=True)


def cosine_sim(a: ArrayLike, b: ArrayLike) -> Tensor:
    """a.b / (|a| |b|) for two vectors of equal length"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"cosine_sim needs two equal-length vectors, got {list(a.shape)} and {list(b.shape)}")
    _check_nonzero(a)
    _check_nonzero(b)
    return (a * b).sum() / (norm(a) * norm(b))


def cosine_matrix(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Pairwise cosines between rows of a [.. x p x d] and rows of b [.. x q x d]"""
    return matmul(normalize(a), transpose(normalize(b)))


# Verification

def check_finite(t: ArrayLike, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{what} contains NaN or Inf")


def backward(loss: Tensor) -> None:
    """Replay the tape that produced ``loss``"""
    if loss._tape is None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {list(loss.data.shape)}")
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
            return
        raise UsageError("loss was not produced on a tape")
    loss._tape.backward(loss)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-6,
               max_components: Optional[int] = None, floor: float = 1e-4,
               seed: int = 0) -> float:
    """
    Worst relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar from ``params`` on every call. Each component's
    error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    When ``max_components`` is set, at most that many entries per parameter
    are sampled (seeded) instead of sweeping every entry.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise UsageError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        check_finite(loss, "loss")
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        value = f().item()
        if not np.isfinite(value):
            raise NumericalError("non-finite function value during finite differences")
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            indices = np.sort(rng.choice(flat.size, size=max_components, replace=False))
        for i in indices:
            original = flat[i]
            flat[i] = original + epsilon
            upper = evaluate()
            flat[i] = original - epsilon
            lower = evaluate()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * epsilon)
            exact = grad.reshape(-1)[i]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
