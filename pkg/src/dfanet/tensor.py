"""Rank-4 NCHW tensors with tape-free reverse-mode differentiation.

Every tensor carries a numpy array of shape (N, C, H, W). Operations that
touch a tensor with ``requires_grad`` attach a :class:`Node` to their output;
:class:`Graph` linearizes those nodes into execution order and
:func:`backward` walks them once in reverse.
"""

from __future__ import annotations

import contextlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
DTYPE_FROM_CODE = {code: dt for dt, code in DTYPES.items()}

DUMP_MAGIC = b"DFTN"
DUMP_VERSION = 1


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, what: str = "output"):
        super().__init__(f"non-finite values in {what} of op '{op}'")
        self.op = op


class GradCheckError(RuntimeError):
    pass


# Execution switches. ``deterministic`` pins BLAS to one thread and makes the
# convolutions use their fixed-order direct kernels.
_state = {"deterministic": True, "grad_enabled": True, "threads": None, "kinks": None}
_thread_limiter = None


def set_deterministic(flag: bool) -> None:
    global _thread_limiter
    _state["deterministic"] = bool(flag)
    if flag:
        from threadpoolctl import threadpool_limits

        _thread_limiter = threadpool_limits(1)
    elif _thread_limiter is not None:
        _thread_limiter.restore_original_limits()
        _thread_limiter = None


def is_deterministic() -> bool:
    return _state["deterministic"]


@contextlib.contextmanager
def deterministic(flag: bool = True):
    prev = _state["deterministic"]
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(prev)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@dataclass(eq=False)
class Node:
    """One executed operation: inputs, and a closure mapping the output
    gradient to a tuple of input gradients (``None`` for inputs that need
    none)."""

    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (N,C,H,W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def tolist(self) -> list:
        return self.data.reshape(-1).tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _as_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"extents must be non-negative: {shape}")
    return shape


def tensor(values, shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Build a tensor from row-major ``values``."""
    shape = _as_shape(shape)
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    if arr.size != int(np.prod(shape)):
        raise ShapeError(f"{arr.size} values do not fill shape {shape}")
    return Tensor(arr.reshape(shape).copy(), requires_grad=requires_grad)


def full(shape, fill: float, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_as_shape(shape), fill, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return full(shape, 0.0, dtype, requires_grad)


def randn(shape, seed: int, std: float = 1.0, mean: float = 0.0, dtype=np.float32,
          requires_grad: bool = False) -> Tensor:
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(_as_shape(shape)) * std + mean
    return Tensor(arr.astype(dtype), requires_grad=requires_grad)


def rand(shape, seed: int, low: float = 0.0, high: float = 1.0, dtype=np.float32,
         requires_grad: bool = False) -> Tensor:
    rng = np.random.default_rng(seed)
    arr = rng.uniform(low, high, size=_as_shape(shape))
    return Tensor(arr.astype(dtype), requires_grad=requires_grad)


def _needs_grad(*tensors) -> bool:
    return grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _check_finite(arr: np.ndarray, op: str, what: str = "output") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, what)


def make_result(data: np.ndarray, op: str, inputs: Iterable, backward_fn) -> Tensor:
    """Wrap an op's output, validating finiteness and recording the node."""
    _check_finite(data, op)
    inputs = tuple(inputs)
    out = Tensor(data)
    if _needs_grad(*inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


# --- elementwise -----------------------------------------------------------

def _broadcast_ok(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    n, c = a.shape[:2]
    if b.shape == (n, c, 1, 1):
        return
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    return make_result(
        a.data + b.data, "add", (a, b),
        lambda g: (g, _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    return make_result(
        a.data - b.data, "sub", (a, b),
        lambda g: (g, -_reduce_to(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be an (N,C,1,1) per-channel vector."""
    _broadcast_ok(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd, "mul", (a, b),
        lambda g: (g * bd, _reduce_to(g * ad, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result(a.data * a.data.dtype.type(s), "scale", (a,),
                       lambda g: (g * g.dtype.type(s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _state["kinks"] is not None:
        _state["kinks"].append(np.packbits(mask).tobytes())
    return make_result(np.maximum(a.data, 0), "relu", (a,),
                       lambda g: (g * mask,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "relu":
        return relu(a)
    raise ContractError(f"unknown elementwise op {op!r}")


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a (1,1,1,1) tensor."""
    shape = a.shape
    out = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    return make_result(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ContractError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: {t.shape} does not match N,H,W of {inputs[0].shape}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return make_result(out, "concat", inputs, back)


def split_channels(x: Tensor, widths: Sequence[int]) -> list:
    """Inverse of :func:`concat_channels` given the recorded widths."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"widths {list(widths)} do not sum to {x.shape[1]}")
    out, start = [], 0
    for w in widths:
        sl = slice(start, start + w)
        out.append(make_result(
            x.data[:, sl].copy(), "split", (x,),
            lambda g, sl=sl: (_embed(g, x.shape, sl),)))
        start += w
    return out


def _embed(g: np.ndarray, shape: tuple, sl: slice) -> np.ndarray:
    full_g = np.zeros(shape, dtype=g.dtype)
    full_g[:, sl] = g
    return full_g


# --- graph and backward ----------------------------------------------------

@dataclass
class Graph:
    """Executed operations reachable from an output, in topological order."""

    records: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if isinstance(inp, Tensor) and inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if graph is None:
        graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for out in reversed(graph.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out.node
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            _check_finite(ig, node.op, "gradient")
            if inp.node is None:
                ig = ig.astype(inp.dtype, copy=False)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    if loss.node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g


# --- gradient checking -----------------------------------------------------

def _evaluate_with_pattern(builder, x: Tensor):
    """Scalar value of ``builder(x)`` and the on/off pattern of every ReLU."""
    prev = _state["kinks"]
    _state["kinks"] = log = []
    try:
        value = builder(x).item()
    finally:
        _state["kinks"] = prev
    return value, b"".join(log)


def grad_check(builder: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               wrt: Optional[Sequence[Tensor]] = None, max_coords: Optional[int] = None,
               seed: int = 0, max_refine: int = 6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``builder`` maps ``x`` to a scalar tensor. Gradients are checked for ``x``
    and, optionally, for extra leaves in ``wrt`` that the builder closes over.
    With ``max_coords``, each leaf is probed at that many seeded random
    coordinates instead of all of them.

    A central difference is only a derivative estimate when no ReLU changes
    state between ``p - h`` and ``p + h``; when one does, the step is divided
    by 4 (at most ``max_refine`` times) until the activation pattern is the
    same at both ends and at the centre.
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check runs in double precision")
    leaves = [x] + list(wrt or [])
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    loss = builder(x)
    ref = loss.item()
    again = builder(x).item()
    if ref != again:
        raise GradCheckError(f"builder is not deterministic: {ref!r} != {again!r}")
    backward(loss)
    worst = 0.0
    pick = np.random.default_rng(seed)
    with no_grad():
        for t in leaves:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            a_flat = analytic.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = sorted(pick.choice(flat.size, max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                _, centre = _evaluate_with_pattern(builder, x)
                h = step
                for _ in range(max_refine + 1):
                    flat[i] = orig + h
                    fp, sp = _evaluate_with_pattern(builder, x)
                    flat[i] = orig - h
                    fm, sm = _evaluate_with_pattern(builder, x)
                    flat[i] = orig
                    if sp == sm == centre:
                        break
                    h /= 4
                numeric = (fp - fm) / (2 * h)
                denom = max(1e-8, abs(a_flat[i]) + abs(numeric))
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


# --- raw dump format -------------------------------------------------------

_DUMP_HEADER = struct.Struct("<4sIB4I")


def dump_bytes(t: Tensor) -> bytes:
    data = np.ascontiguousarray(t.data)
    header = _DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, DTYPES[data.dtype], *data.shape)
    return header + data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()


def load_bytes(buf: bytes) -> Tensor:
    if len(buf) < _DUMP_HEADER.size:
        raise ValueError("tensor dump shorter than its header")
    magic, version, code, *dims = _DUMP_HEADER.unpack_from(buf)
    if magic != DUMP_MAGIC:
        raise ValueError(f"bad tensor dump magic {magic!r}")
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported tensor dump version {version}")
    if code not in DTYPE_FROM_CODE:
        raise ValueError(f"unknown dtype code {code}")
    dt = DTYPE_FROM_CODE[code].newbyteorder("<")
    count = int(np.prod(dims))
    payload = buf[_DUMP_HEADER.size:]
    if len(payload) != count * dt.itemsize:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).astype(DTYPE_FROM_CODE[code]).reshape(dims)
    return Tensor(arr)


def dump(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
