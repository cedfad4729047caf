"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record onto the active :class:`Graph` (see :func:`record`) whenever
one of their inputs is tracked, i.e. is a parameter (``requires_grad``) or was
itself produced inside that graph.  Outside a recording block every operation
is a plain numpy computation, which is what rollouts and evaluation use.
"""

from __future__ import annotations

import base64
import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_PROB_FLOOR = float(np.log(1e-12))
LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "mastavn-tensors/1"


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_graph", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of recorded operations; creation order is a topological order."""

    nodes: list[Node] = field(default_factory=list)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._graph is self

    def add(self, op, inputs, output, vjp) -> None:
        output._graph = self
        output._node = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def release(self) -> None:
        """Drop the tape. Outputs point back at the graph, so without this the
        recorded activations live until the cyclic garbage collector runs."""
        for node in self.nodes:
            node.output._graph = None
            node.output._node = None
        self.nodes.clear()


_active: list[Graph] = []


@contextlib.contextmanager
def record(graph: Graph | None = None):
    """Record differentiable operations issued inside the block."""
    g = graph if graph is not None else Graph()
    _active.append(g)
    try:
        yield g
    finally:
        _active.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _active:
        g = _active[-1]
        if any(g.tracks(t) for t in inputs):
            g.add(op, inputs, out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below; the gradient is zero where the floor is active."""
    keep = a.data >= floor
    return _emit("maximum", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), vjp)


# --- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations @ weight: fold the leading axes into one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def vjp(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit("matmul", (a2 @ bd).reshape(*ad.shape[:-1], n), (a, b), vjp)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", np.matmul(ad, bd), (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take", a.data[index], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# --- normalisation -----------------------------------------------------------------


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) broadcasts against ``x``.

    Masked entries get exactly zero weight.  Every row needs one kept entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


# --- differentiation ---------------------------------------------------------------


def backward(
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
    graph: Graph | None = None,
) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{name: gradient}`` for ``params`` (zeros when unreachable), or
    ``{id(tensor): gradient}`` for every reached leaf when ``params`` is None.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else loss._graph
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if graph is None or loss._node is None:
        nodes: list[Node] = []
    else:
        nodes = graph.nodes[: loss._node + 1]
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if inp._graph is graph and inp._node is not None:
                key, store = id(inp), grads
            elif inp.requires_grad:
                key, store = id(inp), leaves
            else:
                continue
            store[key] = gi if key not in store else store[key] + gi
    if params is None:
        return leaves
    return {name: leaves.get(id(t), np.zeros_like(t.data)) for name, t in params.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return dict(grads), norm


# --- optimisation ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.

    Parameter arrays are replaced rather than written in place, so earlier
    snapshots of ``p.data`` stay valid.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# --- persistence -------------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def dump_tensors(tensors: Mapping[str, np.ndarray | Tensor], header: dict | None = None) -> str:
    body = {
        "format": CHECKPOINT_FORMAT,
        "header": header or {},
        "tensors": {
            name: _encode(t.data if isinstance(t, Tensor) else t) for name, t in sorted(tensors.items())
        },
    }
    return json.dumps(body, indent=1, sort_keys=True)


def load_tensors(text: str) -> tuple[dict[str, np.ndarray], dict]:
    body = json.loads(text)
    if body.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {body.get('format')!r}")
    return {name: _decode(e) for name, e in body["tensors"].items()}, body.get("header", {})


def save_checkpoint(path, tensors, header: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dump_tensors(tensors, header))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return load_tensors(Path(path).read_text())


def as_parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


def snapshot(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data for k, p in params.items()}


def parameter_count(params: Iterable[Tensor]) -> int:
    return int(sum(p.data.size for p in params))
