"""
Minimal deterministic reverse-mode automatic differentiation over float64 numpy arrays.

Operations record onto the active ``Tape`` (a context manager) whenever one of their
inputs requires gradients. Outside a tape the same operations run as plain inference.
"""

from __future__ import annotations

import itertools
import logging
import math
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError
from .utils import make_rng

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_node_ids = itertools.count(1)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)

ForwardFn = Callable[..., np.ndarray]
# backward(grad_out, out_data, *input_data) -> one gradient (or None) per input
BackwardFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    node_id: int
    index: int
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    forward: ForwardFn
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications; recording order is a topological order."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._tokens: List[object] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", forward: ForwardFn, backward: BackwardFn) -> None:
        node = TapeNode(output.node_id, len(self.nodes), op, inputs, output, forward, backward)
        output._node = node
        output._tape = self
        self.nodes.append(node)

    def topological_index(self) -> Dict[int, int]:
        return {node.node_id: node.index for node in self.nodes}

    def replay(self) -> None:
        """Recompute every node from its recorded inputs; raise if any output differs bit-wise."""
        for node in self.nodes:
            again = node.forward(*(t.data for t in node.inputs))
            if again.shape != node.output.data.shape or not np.array_equal(again, node.output.data, equal_nan=True):
                raise NumericError("tape replay diverged", where=f"node {node.node_id} ({node.op})")


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_node", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._node: Optional[TapeNode] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out.node_id = next(_node_ids)
        out._node = None
        out._tape = None
        return out

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -----------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _apply(op: str, inputs: Sequence[ArrayLike], forward: ForwardFn, backward: BackwardFn) -> Tensor:
    tensors = tuple(as_tensor(x) for x in inputs)
    out_data = forward(*(t.data for t in tensors))
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_data, requires_grad=track)
    if track:
        tape.record(op, tensors, out, forward, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# elementwise -------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("add", ta.data, tb.data)
    return _apply(
        "add",
        (ta, tb),
        lambda x, y: x + y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", ta.data, tb.data)
    return _apply(
        "sub",
        (ta, tb),
        lambda x, y: x - y,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", ta.data, tb.data)
    return _apply(
        "mul",
        (ta, tb),
        lambda x, y: x * y,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("div", ta.data, tb.data)
    return _apply(
        "div",
        (ta, tb),
        lambda x, y: x / y,
        lambda g, out, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
    )


def neg(a: ArrayLike) -> Tensor:
    return _apply("neg", (a,), lambda x: -x, lambda g, out, x: (-g,))


def exp(a: ArrayLike) -> Tensor:
    return _apply("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def log(a: ArrayLike) -> Tensor:
    return _apply("log", (a,), np.log, lambda g, out, x: (g / x,))


def sqrt(a: ArrayLike) -> Tensor:
    return _apply("sqrt", (a,), np.sqrt, lambda g, out, x: (g * 0.5 / out,))


def sigmoid(a: ArrayLike) -> Tensor:
    return _apply("sigmoid", (a,), expit, lambda g, out, x: (g * out * (1.0 - out),))


def _silu_backward(g: np.ndarray, out: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray]:
    s = expit(z)
    return (g * s * (1.0 + z * (1.0 - s)),)


def silu(a: ArrayLike) -> Tensor:
    """SiLU(z) = z * sigmoid(z)."""
    return _apply("silu", (a,), lambda z: z * expit(z), _silu_backward)


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where the input is inside the interval."""
    return _apply(
        "clip",
        (a,),
        lambda x: np.clip(x, low, high),
        lambda g, out, x: (g * ((x >= low) & (x <= high)),),
    )


# shape ---------------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """c[i][j] = sum_t a[i][t] * b[t][j] for 2-D operands."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[0]:
        raise DimensionError("matmul", ta.shape, tb.shape)
    return _apply(
        "matmul",
        (ta, tb),
        lambda x, y: x @ y,
        lambda g, out, x, y: (g @ y.T, x.T @ g),
    )


def transpose(a: ArrayLike) -> Tensor:
    ta = as_tensor(a)
    if ta.ndim != 2:
        raise DimensionError("transpose", ta.shape)
    return _apply("transpose", (ta,), lambda x: x.T.copy(), lambda g, out, x: (g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    ta = as_tensor(a)
    target = tuple(shape)
    try:
        np.empty(ta.shape).reshape(target)
    except ValueError:
        raise DimensionError("reshape", ta.shape, target) from None
    return _apply("reshape", (ta,), lambda x: x.reshape(target), lambda g, out, x: (g.reshape(x.shape),))


def take(a: ArrayLike, index) -> Tensor:
    """Basic slicing or integer-array gathering; repeated indices accumulate gradients."""
    ta = as_tensor(a)
    if isinstance(index, list):
        index = np.asarray(index, dtype=np.int64)

    def backward(g: np.ndarray, out: np.ndarray, x: np.ndarray):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _apply("take", (ta,), lambda x: np.array(x[index], dtype=np.float64), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    if not items:
        raise ContractError("concat needs at least one tensor")
    try:
        np.concatenate([np.empty(t.shape) for t in items], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in items)) from None
    sizes = [t.shape[axis] for t in items]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray, out: np.ndarray, *xs: np.ndarray):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _apply("concat", items, lambda *xs: np.concatenate(xs, axis=axis), backward)


def reduce_sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray, out: np.ndarray, x: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", (a,), lambda x: np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64), backward)


def reduce_mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    count = ta.size if axis is None else ta.shape[axis]
    return reduce_sum(ta, axis=axis, keepdims=keepdims) * (1.0 / count)


# normalisation and attention -----------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    if np.isnan(x).any():
        raise NumericError("softmax_row received NaN input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_row(a: ArrayLike) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    return _apply(
        "softmax_row",
        (a,),
        _softmax,
        lambda g, out, x: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def _log_softmax(x: np.ndarray) -> np.ndarray:
    if np.isnan(x).any():
        raise NumericError("log_softmax_row received NaN input")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_row(a: ArrayLike) -> Tensor:
    return _apply(
        "log_softmax_row",
        (a,),
        _log_softmax,
        lambda g, out, x: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    )


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply gamma/beta."""
    tx, tg, tb = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = tx.shape[-1]
    if tg.shape != (width,) or tb.shape != (width,):
        raise DimensionError("layer_norm", tx.shape, tg.shape, tb.shape)

    def normalise(xv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mu = xv.mean(axis=-1, keepdims=True)
        std = np.sqrt(((xv - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
        return (xv - mu) / std, std

    def forward(xv: np.ndarray, gv: np.ndarray, bv: np.ndarray) -> np.ndarray:
        xhat, _ = normalise(xv)
        return xhat * gv + bv

    def backward(g: np.ndarray, out: np.ndarray, xv: np.ndarray, gv: np.ndarray, bv: np.ndarray):
        xhat, std = normalise(xv)
        dxhat = g * gv
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        flat = (-1, width)
        return dx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)

    return _apply("layer_norm", (tx, tg, tb), forward, backward)


def l2_normalize(a: ArrayLike) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""

    def forward(x: np.ndarray) -> np.ndarray:
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        if (norm == 0).any():
            raise NumericError("cannot normalise a zero vector")
        return x / norm

    def backward(g: np.ndarray, out: np.ndarray, x: np.ndarray):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _apply("l2_normalize", (a,), forward, backward)


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """(SiLU(x @ w_gate) * (x @ w_up)) @ w_down."""
    if w_gate.shape != w_up.shape or w_down.shape != (w_gate.shape[1], w_gate.shape[0]):
        raise DimensionError("swiglu_ffn", w_gate.shape, w_up.shape, w_down.shape)
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


def causal_mask(n: int) -> np.ndarray:
    """0 on and below the diagonal, -inf strictly above."""
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d_h) + mask) v for one head."""
    if q.ndim != 2 or q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise DimensionError("scaled_dot_attention", q.shape, k.shape, v.shape)
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[1]))
    if causal:
        scores = scores + causal_mask(q.shape[0])
    return matmul(softmax_row(scores), v)


# gradients -----------------------------------------------------------------------------


def backward(root: Tensor) -> Dict[int, np.ndarray]:
    """
    Propagate d(root)/d(leaf) to every gradient-tracking leaf reachable from ``root``.
    Leaf gradients accumulate into ``Tensor.grad``; the returned map is keyed by node id.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {list(root.shape)}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any gradient-tracking tensor")

    seed = np.ones_like(root.data)
    leaves: Dict[int, Tensor] = {}
    grads: Dict[int, np.ndarray] = {root.node_id: seed}
    if root.is_leaf:
        leaves[root.node_id] = root
    else:
        nodes = root._tape.nodes[: root._node.index + 1]
        for node in reversed(nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            input_grads = node.backward(g, node.output.data, *(t.data for t in node.inputs))
            for tensor, g_in in zip(node.inputs, input_grads):
                if g_in is None or not tensor.requires_grad:
                    continue
                g_in = _unbroadcast(np.asarray(g_in, dtype=np.float64), tensor.shape)
                if tensor.is_leaf:
                    leaves[tensor.node_id] = tensor
                if tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + g_in
                else:
                    grads[tensor.node_id] = g_in

    result: Dict[int, np.ndarray] = {}
    for node_id, leaf in leaves.items():
        g = grads.get(node_id)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[node_id] = g
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: Optional[Tuple[str, int]] = None
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _named(params: Union[Mapping[str, Tensor], Iterable[Tensor]]) -> List[Tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(t.name or f"param{i}", t) for i, t in enumerate(params)]


def _scalar(loss_fn: Callable[[], Tensor], where: str) -> float:
    value = loss_fn()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(value):
        raise NumericError("loss is not finite", where=where)
    return value


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Iterable[Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences (f(t+h) - f(t-h)) / 2h.

    Relative error per entry is |a - n| / max(|a|, |n|, floor), 0 when both vanish.
    Below ``floor`` the check is absolute: a gradient of 1e-5 that is off by 1e-7
    scores 1e-4, not 1e-2. Lower ``floor`` to hold small gradients to a relative bound.
    A loss that does not depend on ``params`` has zero analytic gradients.
    ``max_entries`` caps the entries checked per parameter (seeded subset).
    """
    if h <= 0:
        raise ContractError("grad_check needs h > 0")
    named = _named(params)
    for _, tensor in named:
        tensor.grad = None
        tensor.requires_grad = True
    with Tape():
        loss = loss_fn()
        if not math.isfinite(loss.item()):
            raise NumericError("loss is not finite", where="analytic pass")
        if loss.requires_grad:
            backward(loss)

    rng = make_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol, checked=0)
    for name, tensor in named:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_here = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            f_plus = _scalar(loss_fn, f"{name}[{i}]")
            flat[i] = original - h
            f_minus = _scalar(loss_fn, f"{name}[{i}]")
            flat[i] = original
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            if a == 0.0 and numeric == 0.0:
                rel = 0.0
            else:
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst_here = max(worst_here, rel)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (name, int(i))
            report.checked += 1
        report.per_param[name] = worst_here
    logger.debug("grad_check: %d entries, max relative error %.3e", report.checked, report.max_rel_error)
    return report
