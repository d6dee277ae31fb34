"""Small reverse-mode autodiff over numpy float64 arrays, plus seeded RNG streams.

Every differentiable operation records its parents and an adjoint closure.
``Tensor.backward`` walks the graph in reverse topological order and writes
``.grad`` on every leaf that has ``requires_grad=True``.

Layout convention for images and feature maps is ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

RNG_ALGORITHM = "PCG64"


class NumericError(ArithmeticError):
    """A forward or backward value became NaN/Inf."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class DeterminismError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        forward_backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div_detached(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Register a node in the graph.

    ``backward`` maps the upstream gradient to one gradient per parent (``None``
    for parents that do not need one).
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by operation '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Operation set
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return custom_op("add", a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return custom_op("mul", a.data * b.data, (a, b), backward)


def div_detached(a, denom) -> Tensor:
    """Divide by a value that is excluded from differentiation."""
    a = as_tensor(a)
    d = denom.data if isinstance(denom, Tensor) else np.asarray(denom, dtype=np.float64)
    return custom_op("div_detached", a.data / d, (a,), lambda g: (g / d,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent
    return custom_op("pow", out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return custom_op("matmul", a.data @ b.data, (a, b), backward)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return custom_op("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op("sum", out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2sq(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squares."""
    x = as_tensor(x)
    out = (x.data * x.data).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * x.data * g,)

    return custom_op("l2sq", out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return custom_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return custom_op("permute", np.transpose(x.data, axes), (x,),
                     lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return out

    return custom_op("concat", np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def take(x, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return custom_op("take", x.data[idx], (x,), backward)


# --- convolutions ---------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _correlate(xp, w, stride, ho, wo):
    # (B,C,Ho,Wo,k,k) x (O,C,k,k) -> (B,O,Ho,Wo)
    out = np.tensordot(_windows(xp, w.shape[2], stride, ho, wo), w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def _correlate_adjoint_input(g, w, stride, padded_shape):
    k = w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B,Ho,Wo,C,k,k)
    gx = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gx


def _correlate_adjoint_weight(xp, g, stride, k):
    win = _windows(xp, k, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, weights ``(out, in, k, k)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    xp = _pad(x.data, padding)
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = _correlate(xp, w.data, stride, ho, wo)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = _correlate_adjoint_input(g, w.data, stride, xp.shape)
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        if w.requires_grad:
            gw = _correlate_adjoint_weight(xp, g, stride, k)
        return gx, gw

    y = custom_op("conv2d", out, (x, w), backward)
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution, weights ``(in, out, k, k)`` as in common frameworks."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ContractError(f"conv_transpose2d shape mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    bsz, _, h, wd = x.shape
    buf_shape = (bsz, w.shape[1], (h - 1) * stride + k + output_padding,
                 (wd - 1) * stride + k + output_padding)
    ho = buf_shape[2] - 2 * padding
    wo = buf_shape[3] - 2 * padding
    buf = _correlate_adjoint_input(x.data, w.data, stride, buf_shape)
    out = buf[:, :, padding:padding + ho, padding:padding + wo]

    def backward(g):
        gbuf = np.zeros(buf_shape)
        gbuf[:, :, padding:padding + ho, padding:padding + wo] = g
        gx = _correlate(gbuf, w.data, stride, h, wd) if x.requires_grad else None
        gw = _correlate_adjoint_weight(gbuf, x.data, stride, k) if w.requires_grad else None
        return gx, gw

    y = custom_op("conv_transpose2d", np.ascontiguousarray(out), (x, w), backward)
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def forward_backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient from operation '{node.op}'")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if not err < self.tolerance]


def grad_check(build_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               tolerance: float = 1e-4, step: float = 1e-5,
               abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    The per-element error is ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``;
    the report keeps the maximum per parameter tensor.
    """
    report = GradCheckReport(tolerance=tolerance)
    first, second = build_fn(), build_fn()
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("build_fn produced different values on two calls")
    if not params:
        return report
    for p in params.values():
        p.zero_grad()
    forward_backward(build_fn())
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)  # a view, so writes perturb the parameter
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_fn().item()
            flat[i] = orig - step
            down = build_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
        report.max_rel_error[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return report


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


@dataclass
class RngStream:
    """Counter-free PCG64 stream keyed by ``(seed, stream_id)`` through ``SeedSequence``.

    Distinct stream ids give independent children of the same root seed, so
    drawing more from one source never shifts another.
    """

    seed: int
    stream_id: int
    algorithm_name: str = RNG_ALGORITHM
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.algorithm_name != RNG_ALGORITHM:
            raise ContractError(f"unsupported RNG algorithm {self.algorithm_name!r}")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def get_state(self) -> dict:
        return {"seed": int(self.seed), "stream_id": int(self.stream_id),
                "algorithm": self.algorithm_name,
                "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        stream = cls(state["seed"], state["stream_id"], state.get("algorithm", RNG_ALGORITHM))
        stream.generator.bit_generator.state = state["bit_generator"]
        return stream

    def child(self, offset: int) -> "RngStream":
        """A sibling stream with id ``stream_id * 1_000_003 + offset`` (fresh state)."""
        return RngStream(self.seed, self.stream_id * 1_000_003 + offset)


def sample_gaussian(stream: RngStream, shape, mean: float = 0.0, stddev: float = 1.0) -> Tensor:
    if stddev < 0:
        raise ContractError(f"stddev must be non-negative, got {stddev}")
    draws = stream.generator.standard_normal(shape)
    return Tensor(draws * stddev + mean)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
