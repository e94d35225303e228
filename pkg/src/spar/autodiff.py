"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records primitive operations as they execute (define-by-run) and is
rebuilt on every forward pass.  ``backward`` walks the tape once in reverse
creation order, which is a valid reverse topological order, accumulating
gradients additively when a tensor feeds several consumers.  Everything is
64-bit and single-threaded within a pass, so runs are bit-reproducible given
a seed.

Also provides the ``Parameter`` container, a bias-corrected Adam step, and a
central-finite-difference gradient checker.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "ContractError",
    "Tensor",
    "Tape",
    "Parameter",
    "ParamSet",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat_rows",
    "concat_cols",
    "rows_gather",
    "cols_gather",
    "sum_all",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "backward",
    "adam_step",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ContractError(ValueError):
    """A caller violated an operation's stated precondition."""


def _as_f64(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(a)


class Tensor:
    """Row-major float64 array, optionally attached to the active tape."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data):
        self.data = _as_f64(data)
        self._tape = None
        self._node = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data)

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64))

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of the primitives executed under ``with tape:``.

    Nodes appear in execution order, so every node's inputs precede it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("tapes do not nest; one forward pass at a time")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _leaf(self, t: Tensor) -> int:
        if t._tape is self:
            return t._node
        t._tape = self
        t._node = len(self.nodes)
        self.nodes.append(_Node((), None))
        return t._node

    def _record(self, out: Tensor, parents, backward_fn):
        pids = tuple(self._leaf(p) for p in parents)
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(pids, backward_fn))


def _emit(out_data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out._tape = None
    out._node = -1
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape the operand was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), -_unbroadcast(g, bsh)

    return _emit(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _emit(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ContractError(
            f"matmul dimension mismatch: {ad.shape} x {bd.shape}"
        )
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bwd(g):
        return (g.T,)

    return _emit(np.ascontiguousarray(a.data.T), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _emit(a.data.reshape(shape), (a,), bwd)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)
    split_at = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, split_at, axis=0))

    return _emit(out, tuple(tensors), bwd)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    split_at = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, split_at, axis=1))

    return _emit(out, tuple(tensors), bwd)


def rows_gather(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    ad = a.data
    if idx.size and (idx.min() < 0 or idx.max() >= ad.shape[0]):
        raise ContractError(
            f"row index out of range for shape {ad.shape}: [{idx.min()}, {idx.max()}]"
        )

    def bwd(g):
        acc = np.zeros_like(ad)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit(ad[idx], (a,), bwd)


def cols_gather(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    ad = a.data

    def bwd(g):
        acc = np.zeros_like(ad)
        np.add.at(acc, (slice(None), idx), g)
        return (acc,)

    return _emit(np.ascontiguousarray(ad[:, idx]), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(a.data.sum()), (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ContractError(
            f"layer_norm affine shape mismatch: x last dim {d}, "
            f"gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bwd(g):
        gg = g * gd
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    phi = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    out = xd * phi

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return _emit(out, (x,), bwd)


class Parameter:
    """Named learnable tensor with gradient and Adam moment buffers."""

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor.zeros(self.value.shape)
        self.adam_m = Tensor.zeros(self.value.shape)
        self.adam_v = Tensor.zeros(self.value.shape)
        self.step_count = 0

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParamSet:
    """Ordered registry of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def make(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()


def backward(loss: Tensor, params) -> None:
    """Accumulate d(loss)/d(param.value) into each parameter's ``grad``.

    ``loss`` must be a scalar recorded on a tape.  Intermediate gradients are
    discarded; only the listed parameters keep theirs.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None or loss._node < 0:
        raise ContractError("loss is not attached to a tape")

    grads: list = [None] * len(tape.nodes)
    grads[loss._node] = np.ones_like(loss.data)
    for nid in range(loss._node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        pgrads = node.backward_fn(g)
        for pid, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg.copy() if isinstance(pg, np.ndarray) else np.asarray(pg)
            else:
                grads[pid] = grads[pid] + pg
        grads[nid] = None  # free intermediates as we go

    for p in params:
        v = p.value
        if v._tape is tape and v._node >= 0 and grads[v._node] is not None:
            p.grad.data += grads[v._node]


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad.data
        m = p.adam_m.data
        v = p.adam_v.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.value.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad.data[...] = 0.0


class GradCheckError(RuntimeError):
    """Raised when the function under test is not finite at a probe point."""


def grad_check(f, params, h: float = 1e-5, max_coords: int = 64, rng=None) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` takes no arguments, reads the parameter values, and returns a scalar
    loss ``Tensor`` recorded on a fresh tape; it must be deterministic.  A
    subset of at least ``max_coords`` coordinates (or all, if fewer exist) is
    probed.  Returns the max over probed coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite at the base point")
    backward(loss, params)
    analytic = {p.name: p.grad.data.copy() for p in params}
    for p in params:
        p.zero_grad()

    coords = [(p, i) for p in params for i in range(p.value.size)]
    if len(coords) > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    for p, i in coords:
        flat = p.value.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise GradCheckError(
                f"non-finite probe at parameter {p.name!r} coordinate {i}"
            )
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[p.name].reshape(-1)[i])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel > worst:
            worst = rel
    return worst
