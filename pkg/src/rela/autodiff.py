"""A small reverse-mode autodiff core over float64 numpy arrays.

Operations record onto the active :class:`Tape` only when one is open and at
least one input requires gradients; outside a tape every op is a plain numpy
computation. Typical use::

    with Tape() as tape:
        loss = model(x)
        tape.backward(loss)
    optimizer_step(store, lr=3e-4)
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records differentiable operations in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        self.clear()
        return False

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and clear the tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = parent
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if id(loss) not in leaves and not self.nodes and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        self.clear()


def recording() -> bool:
    return bool(_ACTIVE)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, neg)
    return _make(y, (x,), lambda g: (g * np.where(pos, 1.0, neg + alpha),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, slope * x.data), (x,), lambda g: (g * np.where(pos, 1.0, slope),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)),
    )


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# reductions and structure ------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def mean_pool(rows) -> Tensor:
    """Mean over the row axis (``-2``) of a ``(..., k, d)`` tensor."""
    rows = as_tensor(rows)
    if rows.ndim < 2 or rows.shape[-2] == 0:
        raise ShapeError("mean_pool needs at least one row")
    return mean(rows, axis=-2)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    basic = all(isinstance(i, (slice, int)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def slice_(x, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return getitem(x, tuple(idx))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2:
            # fold batch axes instead of materialising per-batch weight gradients
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# masked distributions ----------------------------------------------------------


def _check_mask(logits: np.ndarray, mask) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked softmax over a row with no feasible entry")
    return mask


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero."""
    x = as_tensor(logits)
    mask = _check_mask(x.data, mask)
    shifted = np.where(mask, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward)


def masked_log_softmax(logits, mask) -> Tensor:
    """Log-softmax over the last axis; masked-out entries are reported as 0."""
    x = as_tensor(logits)
    mask = _check_mask(x.data, mask)
    shifted = np.where(mask, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    lp = np.where(mask, shifted - np.log(s), 0.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(lp, (x,), backward)


# convolution ---------------------------------------------------------------------


def conv1d(x, kernels, bias=None) -> Tensor:
    """Kernel-3, stride-1, zero-padding-1 convolution along the length axis.

    ``x`` is ``(..., L, C_in)``; ``kernels`` is ``(C_out, C_in, 3)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or kernels.shape[2] != 3 or x.ndim < 2 or x.shape[-1] != kernels.shape[1]:
        raise ShapeError(f"conv1d shape mismatch: x {x.shape}, kernels {kernels.shape}")
    L = x.shape[-2]
    if L < 1:
        raise ShapeError("conv1d needs length >= 1")
    C = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    # im2col: taps stacked along channels, kernels flattened to (3 * C_in, C_out)
    cols = np.concatenate([xp[..., k : k + L, :] for k in range(3)], axis=-1)
    wf = kernels.data.transpose(2, 1, 0).reshape(3 * C, -1)
    out = cols @ wf
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gwf = cols.reshape(-1, 3 * C).T @ g2
        gw = gwf.reshape(3, C, -1).transpose(2, 1, 0)
        gcols = g @ wf.T
        gxp = np.zeros_like(xp)
        for k in range(3):
            gxp[..., k : k + L, :] += gcols[..., k * C : (k + 1) * C]
        grads = [gxp[..., 1 : L + 1, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


# parameters and optimisation -------------------------------------------------------


class ParamStore:
    """Named parameters in insertion order, plus Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((t.grad**2).sum()) for t in self.params.values() if t.grad is not None))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
        return norm

    def to_doc(self) -> dict:
        def pack(arr):
            return {"shape": list(arr.shape), "data": arr.ravel().tolist()}

        return {
            "params": {n: pack(t.data) for n, t in self.params.items()},
            "adam": {
                "step": self.adam_step,
                "m": {n: pack(a) for n, a in self.adam_m.items()},
                "v": {n: pack(a) for n, a in self.adam_v.items()},
            },
        }

    def load_doc(self, doc: dict):
        """Replace values from :meth:`to_doc` output; validates everything before mutating."""

        def unpack(entry, like=None):
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if like is not None and arr.shape != like.shape:
                raise ShapeError(f"shape {arr.shape} does not match parameter shape {like.shape}")
            return arr

        params = doc["params"]
        if list(params) != list(self.params):
            raise KeyError("checkpoint parameter names differ from the model")
        new = {n: unpack(params[n], self.params[n].data) for n in self.params}
        adam = doc.get("adam", {"step": 0, "m": {}, "v": {}})
        m = {n: unpack(e, self.params[n].data) for n, e in adam["m"].items()}
        v = {n: unpack(e, self.params[n].data) for n, e in adam["v"].items()}
        for n, arr in new.items():
            self.params[n].data = arr
            self.params[n].grad = None
        self.adam_m, self.adam_v, self.adam_step = m, v, int(adam["step"])

    def dumps(self) -> str:
        return json.dumps(self.to_doc())


def optimizer_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam step with bias correction over every parameter holding a gradient."""
    store.adam_step += 1
    t = store.adam_step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        if p.grad is None:
            continue
        m = store.adam_m.get(name)
        v = store.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        store.adam_m[name], store.adam_v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4, indices: Iterable | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
