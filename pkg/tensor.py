"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records an ``OpRecord`` on its output when at least one input requires
a gradient. ``ComputationTape.from_root`` replays those records in topological
order; a tape can be swept backward exactly once until ``reset``.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal, special

from errors import NumericDomainError, ShapeMismatchError, TapeReplayError

_grad_state = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disables op recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class OpRecord:
    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._record: Optional[OpRecord] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.name = ""
        out._record = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        """Same values, no gradient path (a stop-gradient boundary)."""
        return Tensor._wrap(self.values, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "ComputationTape":
        tape = ComputationTape.from_root(self)
        tape.backward()
        return tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(values, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class ComputationTape:
    """Ordered op records reachable from a scalar root, replayable once."""

    def __init__(self, root: Tensor, nodes: List[Tensor]):
        self.root = root
        self.nodes = nodes
        self.entries: List[Tuple[Tensor, OpRecord]] = [(n, n._record) for n in nodes if n._record is not None]
        self._replayed = False

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._record is not None:
                for inp in node._record.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return cls(root, order)

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self._replayed = False

    def backward(self, accumulate: bool = True) -> Dict[int, np.ndarray]:
        """Sweeps adjoints from the root; returns them keyed by ``id(tensor)``."""
        if self._replayed:
            raise TapeReplayError("This tape was already swept backward; call reset() before replaying it.")
        if self.root.size != 1:
            raise ShapeMismatchError(f"backward needs a scalar root, got shape {self.root.shape}")
        self._replayed = True

        adjoints: Dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.values)}
        for out, record in reversed(self.entries):
            g = adjoints.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(record.inputs, record.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                adjoints[key] = gi if key not in adjoints else adjoints[key] + gi

        if accumulate:
            for node in self.nodes:
                g = adjoints.get(id(node))
                if g is None or not node.requires_grad:
                    continue
                node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
        return adjoints


def grad(root: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Adjoints of ``root`` w.r.t. ``params`` without touching ``.grad``."""
    adjoints = ComputationTape.from_root(root).backward(accumulate=False)
    result = []
    for p in params:
        g = adjoints.get(id(p))
        result.append(np.zeros_like(p.values) if g is None else np.array(g, dtype=np.float64))
    return result


def _result(values: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, name: str) -> Tensor:
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, needs_grad)
    if needs_grad:
        out._record = OpRecord(name, inputs, backward_fn)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), backward, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), backward, "multiply")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.values == 0.0):
        raise NumericDomainError(f"divide: zero in divisor of shape {b.shape}")
    out = a.values / b.values

    def backward(g):
        return _unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)

    return _result(out, (a, b), backward, "divide")


# elementwise unary ops

def negate(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.values, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise NumericDomainError(f"log: non-positive entry in tensor of shape {a.shape} (min {a.values.min()})")
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.values)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log σ(a), stable for large |a|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.values)
    return _result(out, (a,), lambda g: (g * special.expit(-a.values),), "log_sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.values)
    return _result(out, (a,), lambda g: (g * special.expit(a.values),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent < 0 and np.any(a.values == 0.0):
        raise NumericDomainError(f"power: zero base with negative exponent {exponent}")
    out = a.values ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.values ** (exponent - 1.0),), "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,), "square")


# reductions

def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise ShapeMismatchError(f"axis {ax} out of range for a {ndim}-dimensional tensor")
    return tuple(ax % ndim for ax in axes) if ndim else None


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: (_expand_reduced(g, a.shape, axes, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeMismatchError(f"mean over an empty axis of shape {a.shape}")
    out = a.values.mean(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: (_expand_reduced(g, a.shape, axes, keepdims) / count,), "mean")


def logsumexp(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """log Σ exp(a) with max-shifting; the adjoint is the softmax of ``a``."""
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    if a.size == 0 or (axes is not None and any(a.shape[ax] == 0 for ax in axes)):
        raise ShapeMismatchError(f"logsumexp over an empty axis of shape {a.shape}")
    shift = np.max(a.values, axis=axes, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    summed = np.sum(np.exp(a.values - shift), axis=axes, keepdims=True)
    with np.errstate(divide="ignore"):
        out_keep = shift + np.log(summed)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axes)

    def backward(g):
        g_keep = g if keepdims else np.expand_dims(g, axes) if axes is not None else np.reshape(g, out_keep.shape)
        weights = np.exp(a.values - out_keep)
        return (g_keep * weights,)

    return _result(np.asarray(out), (a,), backward, "logsumexp")


# linear algebra and structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.values, b.values)

    def backward(g):
        ga = np.matmul(g, b.values.T)
        a2 = a.values.reshape(-1, a.shape[-1])
        gb = a2.T @ np.reshape(g, (-1, b.shape[1]))
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def conv1d(x, weight, bias=None) -> Tensor:
    """
    Cross-correlation of ``x`` (N, C, T) with ``weight`` (O, C, W), stride 1,
    zero padding chosen so the output keeps length T.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    n, _, length = x.shape
    out_channels, _, width = weight.shape
    left = (width - 1) // 2
    padded = np.pad(x.values, ((0, 0), (0, 0), (left, width - 1 - left)))
    out = np.zeros((n, out_channels, length))
    for j in range(width):
        out += np.matmul(weight.values[:, :, j], padded[:, :, j:j + length])
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_channels,):
            raise ShapeMismatchError(f"conv1d: bias shape {bias.shape} does not match {out_channels} channels")
        out += bias.values[None, :, None]
        inputs = (x, weight, bias)

    def backward(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(weight.values)
        for j in range(width):
            g_padded[:, :, j:j + length] += np.matmul(weight.values[:, :, j].T, g)
            g_weight[:, :, j] = np.tensordot(g, padded[:, :, j:j + length], axes=([0, 2], [0, 2]))
        grads = (g_padded[:, :, left:left + length], g_weight)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    return _result(out, inputs, backward, "conv1d")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatchError("concat of an empty list")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeMismatchError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (np.reshape(g, a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.asarray(a.values[key]), (a,), backward, "index")


def straight_through(hard: np.ndarray, soft) -> Tensor:
    """Forward value ``hard``; the adjoint passes unchanged into ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeMismatchError(f"straight_through: incompatible shapes {hard.shape} and {soft.shape}")
    return _result(hard, (soft,), lambda g: (g,), "straight_through")


def exponential_filter(s, gamma) -> Tensor:
    """c_t = γ·c_{t-1} + s_t along the last axis, c_{-1} = 0."""
    s, gamma = as_tensor(s), as_tensor(gamma)
    if gamma.size != 1:
        raise ShapeMismatchError(f"exponential_filter: decay must be a scalar, got shape {gamma.shape}")
    g_val = float(gamma.values.reshape(-1)[0])
    poles = [1.0, -g_val]
    out = signal.lfilter([1.0], poles, s.values, axis=-1)

    def backward(g):
        g_s = signal.lfilter([1.0], poles, g[..., ::-1], axis=-1)[..., ::-1]
        shifted = np.zeros_like(out)
        shifted[..., 1:] = out[..., :-1]
        sensitivity = signal.lfilter([1.0], poles, shifted, axis=-1)
        g_gamma = np.reshape(np.sum(g * sensitivity), gamma.shape)
        return g_s, g_gamma

    return _result(out, (s, gamma), backward, "exponential_filter")


# random numbers

class RandomSource:
    """Seeded stream of Gaussian, uniform and Bernoulli draws."""

    def __init__(self, seed=None, generator: Optional[np.random.Generator] = None):
        self.generator = generator if generator is not None else np.random.default_rng(seed)

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(mean, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def bernoulli(self, p, shape=None) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        shape = p.shape if shape is None else shape
        return (self.generator.random(size=shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(0, high, size=shape)

    def spawn(self, n: int) -> List["RandomSource"]:
        return [RandomSource(generator=child) for child in self.generator.spawn(n)]

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


def seeded_rng(seed: int) -> RandomSource:
    return RandomSource(seed)


# gradient checking

def finite_difference_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``target``."""
    target.values = np.ascontiguousarray(target.values).reshape(target.values.shape)
    estimate = np.zeros_like(target.values)
    flat = target.values.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = fn().item()
            flat[i] = original - step
            lower = fn().item()
            flat[i] = original
            estimate.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return estimate


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_check(fn: Callable[[], Tensor], targets: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences."""
    analytic = grad(fn(), targets)
    worst = 0.0
    for target, g in zip(targets, analytic):
        worst = max(worst, relative_error(g, finite_difference_gradient(fn, target, step)))
    return worst
