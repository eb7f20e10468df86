"""Dense tensors with a taped reverse-mode autodiff engine.

Every differentiable computation goes through :func:`apply_primitive`, which
looks the op up in a registry of (forward, backward) pairs and appends a node
to the active :class:`Graph` whenever an input requires a gradient.
:func:`backward` walks that tape once in reverse and then frees it.

Tensors default to float32.  Float64 inputs are carried through unchanged,
which is what :func:`grad_check` relies on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when inputs do not conform to a primitive's shape contract."""


class GraphError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, reused graph, ...)."""


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_not_scalar(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


@dataclass
class Graph:
    """Append-only tape.  Nodes are in topological order by construction."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    ctx: dict
    graph: Graph


_active_graph = Graph()
_grad_enabled = True


def active_graph() -> Graph:
    return _active_graph


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable  # (grad_out, ctx, needs: list[bool]) -> list[array | None]
    arity: int | None  # None means variadic


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, arity: int | None):
    def register(fwd):
        def attach(bwd):
            PRIMITIVES[name] = Primitive(fwd, bwd, arity)
            return bwd

        fwd.backward = attach
        return fwd

    return register


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{op}: expected {prim.arity} inputs, got {len(inputs)}")
    ctx: dict = dict(attrs)
    data = prim.forward(ctx, *[t.data for t in inputs])
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, ctx, _active_graph)
        out._node = node
        _active_graph.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------


@primitive("add", 2)
def _add_fwd(ctx, a, b):
    _check_broadcast("add", a, b)
    ctx["shapes"] = (a.shape, b.shape)
    return a + b


@_add_fwd.backward
def _add_bwd(g, ctx, needs):
    sa, sb = ctx["shapes"]
    return [_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None]


@primitive("sub", 2)
def _sub_fwd(ctx, a, b):
    _check_broadcast("sub", a, b)
    ctx["shapes"] = (a.shape, b.shape)
    return a - b


@_sub_fwd.backward
def _sub_bwd(g, ctx, needs):
    sa, sb = ctx["shapes"]
    return [_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None]


@primitive("mul", 2)
def _mul_fwd(ctx, a, b):
    _check_broadcast("mul", a, b)
    ctx["a"], ctx["b"] = a, b
    return a * b


@_mul_fwd.backward
def _mul_bwd(g, ctx, needs):
    a, b = ctx["a"], ctx["b"]
    return [
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ]


@primitive("scale", 1)
def _scale_fwd(ctx, a):
    return a * a.dtype.type(ctx["factor"])


@_scale_fwd.backward
def _scale_bwd(g, ctx, needs):
    return [g * g.dtype.type(ctx["factor"])]


@primitive("relu", 1)
def _relu_fwd(ctx, a):
    mask = a > 0
    ctx["mask"] = mask
    return np.where(mask, a, a.dtype.type(0))


@_relu_fwd.backward
def _relu_bwd(g, ctx, needs):
    return [g * ctx["mask"]]


# -- linear algebra ---------------------------------------------------------


@primitive("matmul", 2)
def _matmul_fwd(ctx, a, b):
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ctx["a"], ctx["b"] = a, b
    return np.matmul(a, b)


@_matmul_fwd.backward
def _matmul_bwd(g, ctx, needs):
    a, b = ctx["a"], ctx["b"]
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if b.ndim == 2:
            # collapse leading batch dims into one GEMM
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return [ga, gb]


@primitive("transpose", 1)
def _transpose_fwd(ctx, a):
    axes = ctx.get("axes")
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    ctx["axes"] = axes
    return np.transpose(a, axes)


@_transpose_fwd.backward
def _transpose_bwd(g, ctx, needs):
    return [np.transpose(g, np.argsort(ctx["axes"]))]


@primitive("reshape", 1)
def _reshape_fwd(ctx, a):
    shape = tuple(ctx["shape"])
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    ctx["in_shape"] = a.shape
    return out


@_reshape_fwd.backward
def _reshape_bwd(g, ctx, needs):
    return [g.reshape(ctx["in_shape"])]


@primitive("concat", None)
def _concat_fwd(ctx, *arrays):
    axis = ctx.get("axis", 0)
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [x.shape for x in arrays]
        raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    ctx["sizes"] = [x.shape[axis] for x in arrays]
    ctx["axis"] = axis
    return out


@_concat_fwd.backward
def _concat_bwd(g, ctx, needs):
    cuts = np.cumsum(ctx["sizes"])[:-1]
    parts = np.split(g, cuts, axis=ctx["axis"])
    return [p if n else None for p, n in zip(parts, needs)]


@primitive("embedding", 1)
def _embedding_fwd(ctx, weight):
    ids = np.asarray(ctx["ids"], dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]})")
    ctx["ids"] = ids
    ctx["wshape"] = weight.shape
    return weight[ids]


@_embedding_fwd.backward
def _embedding_bwd(g, ctx, needs):
    gw = np.zeros(ctx["wshape"], dtype=g.dtype)
    np.add.at(gw, ctx["ids"].reshape(-1), g.reshape(-1, ctx["wshape"][1]))
    return [gw]


# -- reductions -------------------------------------------------------------


@primitive("sum", 1)
def _sum_fwd(ctx, a):
    ctx["in_shape"] = a.shape
    axis = ctx.get("axis")
    return np.asarray(a.sum(axis=axis, keepdims=ctx.get("keepdims", False)))


@_sum_fwd.backward
def _sum_bwd(g, ctx, needs):
    axis = ctx.get("axis")
    if axis is not None and not ctx.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, ctx["in_shape"]).copy()]


@primitive("mean", 1)
def _mean_fwd(ctx, a):
    ctx["in_shape"] = a.shape
    axis = ctx.get("axis")
    ctx["count"] = a.size if axis is None else a.shape[axis]
    return np.asarray(a.mean(axis=axis, keepdims=ctx.get("keepdims", False)))


@_mean_fwd.backward
def _mean_bwd(g, ctx, needs):
    axis = ctx.get("axis")
    if axis is not None and not ctx.get("keepdims", False):
        g = np.expand_dims(g, axis)
    g = g / g.dtype.type(ctx["count"])
    return [np.broadcast_to(g, ctx["in_shape"]).copy()]


# -- normalisation ----------------------------------------------------------


@primitive("softmax", 1)
def _softmax_fwd(ctx, a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    ctx["y"] = y
    return y


@_softmax_fwd.backward
def _softmax_bwd(g, ctx, needs):
    y = ctx["y"]
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


@primitive("layernorm", 3)
def _layernorm_fwd(ctx, x, gamma, beta):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(LAYERNORM_EPS))
    xhat = xc * inv
    ctx.update(xhat=xhat, inv=inv, gamma=gamma)
    return xhat * gamma + beta


@_layernorm_fwd.backward
def _layernorm_bwd(g, ctx, needs):
    xhat, inv, gamma = ctx["xhat"], ctx["inv"], ctx["gamma"]
    gx = ggamma = gbeta = None
    if needs[0]:
        gxhat = g * gamma
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
    if needs[1]:
        ggamma = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    if needs[2]:
        gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return [gx, ggamma, gbeta]


# -- losses -----------------------------------------------------------------


@primitive("cross_entropy", 1)
def _ce_fwd(ctx, logits):
    """Mean softmax cross-entropy over rows whose target != ignore_index."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    targets = np.asarray(ctx["targets"], dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {logits.shape[0]} rows")
    ignore = ctx.get("ignore_index")
    valid = np.ones_like(targets, dtype=bool) if ignore is None else targets != ignore
    count = max(int(valid.sum()), 1)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    safe_t = np.where(valid, targets, 0)
    nll = logsum - z[np.arange(len(targets)), safe_t]
    ctx.update(z=z, logsum=logsum, targets=safe_t, valid=valid, count=count)
    return np.asarray((nll * valid).sum() / count, dtype=logits.dtype)


@_ce_fwd.backward
def _ce_bwd(g, ctx, needs):
    p = np.exp(ctx["z"] - ctx["logsum"][:, None])
    p[np.arange(len(ctx["targets"])), ctx["targets"]] -= 1
    p *= ctx["valid"][:, None] * (g / ctx["count"])
    return [p.astype(ctx["z"].dtype, copy=False)]


@primitive("bce_logits", 1)
def _bce_fwd(ctx, logits):
    """Mean binary cross-entropy between sigmoid(logits) and 0/1 targets."""
    t = np.asarray(ctx["targets"], dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_logits: targets {t.shape} vs logits {logits.shape}")
    loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
    ctx.update(x=logits, t=t)
    return np.asarray(loss.mean(), dtype=logits.dtype)


@_bce_fwd.backward
def _bce_bwd(g, ctx, needs):
    x, t = ctx["x"], ctx["t"]
    sig = 1.0 / (1.0 + np.exp(-x))
    return [((sig - t) * (g / x.size)).astype(x.dtype, copy=False)]


# ---------------------------------------------------------------------------
# functional front-end


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [a], factor=factor)


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [a], axes=None if axes is None else tuple(axes))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def embedding(weight: Tensor, ids) -> Tensor:
    return apply_primitive("embedding", [weight], ids=ids)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def softmax(a: Tensor) -> Tensor:
    return apply_primitive("softmax", [a])


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return apply_primitive("layernorm", [x, gamma, beta])


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    return apply_primitive("cross_entropy", [logits], targets=targets, ignore_index=ignore_index)


def bce_logits(logits: Tensor, targets) -> Tensor:
    return apply_primitive("bce_logits", [logits], targets=targets)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    global _active_graph
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (all inputs frozen or no_grad active)")
    if loss._node is None:
        raise GraphError("loss is a leaf; nothing to differentiate")
    graph = loss._node.graph
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward call")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        in_grads = PRIMITIVES[node.op].backward(g, node.ctx, needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi

    _free(graph)
    if graph is _active_graph:
        _active_graph = Graph()


def _free(graph: Graph) -> None:
    for node in graph.nodes:
        node.inputs = ()
        node.ctx = {}
    graph.nodes.clear()
    graph.consumed = True


def reset_graph() -> None:
    """Drop any recorded but un-differentiated nodes."""
    global _active_graph
    _free(_active_graph)
    _active_graph = Graph()


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tol}

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild the graph from ``params`` on every call.  Parameters are
    promoted to float64 for the duration of the check and restored afterwards.
    The error per parameter is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``.
    ``max_entries`` caps how many coordinates per parameter are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [(p.data, p.grad, p.requires_grad) for p in params]
    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
            p.requires_grad = True
        reset_graph()
        loss = f()
        with no_grad():
            again = f()
        if loss.data.tobytes() != again.data.tobytes():
            raise NonDeterministicError(
                f"f is not deterministic: {loss.item()!r} then {again.item()!r}"
            )
        backward(loss)
        errors = {}
        for i, p in enumerate(params):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(len(idx))
            with no_grad():
                for j, k in enumerate(idx):
                    orig = flat[k]
                    flat[k] = orig + eps
                    fp = f().item()
                    flat[k] = orig - eps
                    fm = f().item()
                    flat[k] = orig
                    numeric[j] = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            err = np.max(np.abs(a - numeric)) / max(np.max(np.abs(numeric)), 1e-8)
            errors[p.name or f"param{i}"] = float(err)
        return GradCheckReport(errors, tol)
    finally:
        for p, (data, grad, rg) in zip(params, saved):
            p.data, p.grad, p.requires_grad = data, grad, rg
        reset_graph()
