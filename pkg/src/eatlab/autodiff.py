"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: exactly what the transformer and MLP
models in this package need. Results record their parents and a backward
rule at creation time; ``backward`` replays the records in reverse creation
order, which is a valid topological order because operands always exist
before the ops that consume them.

Broadcasting is restricted to bias-add style patterns (a trailing-shape
operand against a batched one). Everything else is a shape error, which
keeps every backward rule auditable.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_COUNTER = itertools.count()
_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """n-d float64 array, optionally participating in differentiation.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is allocated
    lazily by ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_COUNTER)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small operator sugar so model code stays readable.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


class ComputeGraph:
    """Topologically ordered view of the records reachable from a tensor.

    Node ids are assigned at creation, so ascending id order is a valid
    topological order: every operand of a node appears before it.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls([seen[i] for i in sorted(seen)])


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively across fan-out, and across repeated
    ``backward`` calls (call ``zero_grad`` between steps).
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None and not loss.requires_grad:
        raise ValueError("loss does not require grad; no graph was recorded")

    graph = ComputeGraph.trace(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward_fn is not None:
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not (parent.requires_grad or parent._backward_fn is not None):
                    continue
                acc = grads.get(parent._id)
                grads[parent._id] = pg if acc is None else acc + pg
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _bias_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the leading axes it gained by broadcasting against shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape[a.ndim - b.ndim:] != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a trailing-shape bias against a."""
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")

    def back(g, a=a, b=b):
        return (g if _needs(a) else None,
                _bias_reduce(g, b.shape) if _needs(b) else None)

    return _make(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a trailing-shape operand against a."""
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")

    def back(g, a=a, b=b):
        return (g * b.data if _needs(a) else None,
                _bias_reduce(g * a.data, b.shape) if _needs(b) else None)

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports plain [m,k]@[k,n], a stack of matrices against a single 2-d
    weight, and stacked@stacked with identical leading dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents disagree: {a.shape} vs {b.shape}")
    if b.ndim == 2:
        def back(g, a=a, b=b):
            ga = g @ b.data.T if _needs(a) else None
            gb = (a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                  if _needs(b) else None)
            return ga, gb
        return _make(a.data @ b.data, (a, b), back)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims disagree: {a.shape} vs {b.shape}")

    def back_batched(g, a=a, b=b):
        return (g @ np.swapaxes(b.data, -1, -2) if _needs(a) else None,
                np.swapaxes(a.data, -1, -2) @ g if _needs(b) else None)

    return _make(a.data @ b.data, (a, b), back_batched)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    sq = x.data * x.data
    u = sq * x.data
    u *= 0.044715
    u += x.data
    u *= _GELU_C
    t = np.tanh(u, out=u)
    out = t + 1.0
    out *= x.data
    out *= 0.5

    def back(g, x=x, t=t, sq=sq):
        du = 3 * 0.044715 * sq
        du += 1.0
        du *= _GELU_C
        tt = t * t
        np.subtract(1.0, tt, out=tt)
        tt *= x.data
        tt *= du
        tt += 1.0 + t
        tt *= 0.5
        tt *= g
        return (tt,)

    return _make(out, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rejects NaN input."""
    top = x.data.max(axis=axis, keepdims=True)
    if np.isnan(top).any():  # NaN propagates through max, so this scans once
        raise ValueError("softmax: NaN in input")
    y = x.data - top
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(g, y=y, axis=axis):
        gy = g * y
        dot = gy.sum(axis=axis, keepdims=True)
        dot = y * dot
        gy -= dot
        return (gy,)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last axis must be >=2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat = xc
    xhat *= inv

    def back(g, xhat=xhat, inv=inv, d=d, gain=gain):
        gh = g * gain.data
        gx = gh - gh.mean(axis=-1, keepdims=True)
        gx -= xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        gx *= inv
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    out = xhat * gain.data
    out += bias.data
    return _make(out, (x, gain, bias), back)


def slice_t(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter back into place."""
    out = x.data[key]

    def back(g, x=x, key=key):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def back(g, splits=splits, axis=axis):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), back)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index array."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding_lookup: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )

    def back(g, table=table, idx=idx):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[idx], (table,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
    )


def repeat_new_axis(x: Tensor, axis: int, reps: int) -> Tensor:
    """Insert a new axis and repeat along it; gradient sums back over it."""
    data = np.repeat(np.expand_dims(x.data, axis), reps, axis=axis)
    return _make(data, (x,), lambda g: (g.sum(axis=axis),))


def sum_t(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_t(x: Tensor) -> Tensor:
    return scale(sum_t(x), 1.0 / x.size)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments, one slot per named parameter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def init_adam(params: dict[str, Tensor], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate, beta1, beta2, epsilon)
    for name, p in params.items():
        state.first_moment[name] = np.zeros_like(p.data)
        state.second_moment[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              learning_rate: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    lr = state.learning_rate if learning_rate is None else float(learning_rate)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads in place so their global norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# parameter checkpoint file
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"EATTNSR\x01"
CHECKPOINT_VERSION = 1


def save_params(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: versioned JSON header, then raw LE payload."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": len(payload)})
        payload += a.tobytes()
    header = json.dumps({"version": CHECKPOINT_VERSION, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 4
    header = json.loads(blob[start : start + hlen].decode())
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    payload = blob[start + hlen :]
    out = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=ent["offset"])
        out[ent["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def params_digest(arrays: dict[str, np.ndarray]) -> str:
    """Order-stable sha256 over names and raw bytes; for change detection."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()
