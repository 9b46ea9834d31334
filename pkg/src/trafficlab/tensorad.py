"""Small dense-tensor reverse-mode autodiff engine on numpy.

Every primitive appends one entry to a :class:`Record` (the tape); calling
:func:`backward` replays the tape in reverse.  All data are float64.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, IntegrityError, NumericError, SchemaVersionError

DEBUG = bool(os.environ.get("TRAFFICLAB_DEBUG"))
LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "record", "id", "requires_grad", "name")

    def __init__(self, data, record: Record, tid: int, requires_grad: bool, name=None):
        self.data = data
        self.record = record
        self.id = tid
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return power(self, c)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable | None


class Record:
    """Computation record: topologically ordered primitive applications."""

    def __init__(self):
        self.entries: list[Entry] = []
        self.shapes: dict[int, tuple[int, ...]] = {}
        self.leaves: set[int] = set()
        self._next = 0

    def _new(self, data: np.ndarray, requires_grad: bool, name=None) -> Tensor:
        tid = self._next
        self._next += 1
        self.shapes[tid] = data.shape
        return Tensor(data, self, tid, requires_grad, name)

    def leaf(self, array, name=None, requires_grad: bool = True) -> Tensor:
        data = np.array(array, dtype=np.float64)  # copy: leaves never alias caller arrays
        t = self._new(data, requires_grad, name)
        self.leaves.add(t.id)
        return t

    def constant(self, array, name=None) -> Tensor:
        return self.leaf(array, name, requires_grad=False)

    def __contains__(self, tid: int) -> bool:
        return tid in self.shapes


def _record_of(*xs) -> Record:
    for x in xs:
        if isinstance(x, Tensor):
            return x.record
    raise ContractError("primitive called without any Tensor argument")


def _lift(x, record: Record) -> Tensor:
    if isinstance(x, Tensor):
        if x.record is not record:
            raise ContractError("tensors from different records combined")
        return x
    return record.constant(np.asarray(x, dtype=np.float64))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    record = inputs[0].record
    if DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"primitive {op} produced non-finite values")
    need = any(t.requires_grad for t in inputs)
    out = record._new(data, need)
    record.entries.append(Entry(op, tuple(t.id for t in inputs), out.id, vjp if need else None))
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    rec = _record_of(a, b)
    a, b = _lift(a, rec), _lift(b, rec)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    rec = _record_of(a, b)
    a, b = _lift(a, rec), _lift(b, rec)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    rec = _record_of(a, b)
    a, b = _lift(a, rec), _lift(b, rec)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    rec = _record_of(a, b)
    a, b = _lift(a, rec), _lift(b, rec)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def power(a: Tensor, c: float) -> Tensor:
    ad = a.data
    c = float(c)
    return _emit("power", ad**c, (a,), lambda g: (g * c * ad ** (c - 1.0),))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _emit("leaky_relu", np.where(pos, ad, slope * ad), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    rec = _record_of(a, b)
    a, b = _lift(a, rec), _lift(b, rec)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {ad.shape} and {bd.shape}")
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def head_matmul(x, w) -> Tensor:
    """Per-head matrix multiply: ``x`` (N, H, a) with ``w`` (H, a, b) gives (N, H, b)."""
    rec = _record_of(x, w)
    x, w = _lift(x, rec), _lift(w, rec)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[1:] != wd.shape[:2]:
        raise ContractError(f"head_matmul shapes {xd.shape} and {wd.shape} do not align")
    xt = xd.transpose(1, 0, 2)  # (H, N, a): batched BLAS matmul over heads
    out = np.matmul(xt, wd).transpose(1, 0, 2)

    def vjp(g):
        gt = g.transpose(1, 0, 2)
        return (np.matmul(gt, wd.transpose(0, 2, 1)).transpose(1, 0, 2),
                np.matmul(xt.transpose(0, 2, 1), gt))

    return _emit("head_matmul", out, (x, w), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    rec = _record_of(*tensors)
    ts = [_lift(t, rec) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _emit("slice", a.data[index], (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _emit("gather", a.data[index], (a,), lambda g: (_scatter(g, index, n),))


def _scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    # sparse incidence product: much faster than np.add.at for wide rows
    m = len(index)
    inc = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
    return np.asarray(inc @ values.reshape(m, -1)).reshape((n,) + values.shape[1:])


def scatter_add_rows(a: Tensor, index, n: int) -> Tensor:
    """Row ``i`` of ``a`` is added into output row ``index[i]``; output has ``n`` rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ContractError("scatter index length must equal number of rows")
    return _emit("scatter_add", _scatter(a.data, index, n), (a,), lambda g: (g[index],))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then ``gain * xhat + offset``."""
    rec = _record_of(x, gain, offset)
    x, gain, offset = _lift(x, rec), _lift(gain, rec), _lift(offset, rec)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, unbroadcast(g * xhat, gd.shape), unbroadcast(g, offset.shape))

    return _emit("layer_norm", xhat * gd + offset.data, (x, gain, offset), vjp)


# --------------------------------------------------------------------------
# reverse pass


def backward(record: Record, output: Tensor | int, leaves: Iterable[Tensor | int] | None = None
             ) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``leaves`` (default: all leaves).

    Leaves the output does not depend on receive zeros of their own shape.
    """
    out_id = output.id if isinstance(output, Tensor) else int(output)
    if out_id not in record:
        raise LookupError(f"tensor id {out_id} is not part of this record")
    if record.shapes[out_id] not in ((), (1,), (1, 1)):
        raise ContractError(f"backward needs a scalar output, got shape {record.shapes[out_id]}")
    if leaves is None:
        leaf_ids = sorted(record.leaves)
    else:
        leaf_ids = [t.id if isinstance(t, Tensor) else int(t) for t in leaves]
    for lid in leaf_ids:
        if lid not in record:
            raise LookupError(f"tensor id {lid} is not part of this record")

    grads: dict[int, np.ndarray] = {out_id: np.ones(record.shapes[out_id])}
    for entry in reversed(record.entries):
        if entry.output > out_id:
            continue
        g = grads.get(entry.output)
        if g is None or entry.vjp is None:
            continue
        if entry.output not in record.leaves:
            del grads[entry.output]
        for tid, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi
    return {lid: grads.get(lid, np.zeros(record.shapes[lid])) for lid in leaf_ids}


def gradient_check(function: Callable[..., Tensor], leaves: Sequence[np.ndarray], h: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``function`` receives one Tensor per array in ``leaves`` and must return a
    scalar Tensor.  At most ``max_entries`` coordinates per leaf are probed
    (all when ``None``).
    """
    if not h > 0:
        raise ContractError("h must be > 0")
    arrays = [np.array(a, dtype=np.float64) for a in leaves]
    rec = Record()
    ts = [rec.leaf(a) for a in arrays]
    out = function(*ts)
    if out.data.size != 1:
        raise ContractError(f"gradient_check needs a scalar function, got shape {out.shape}")
    grads = backward(rec, out, ts)

    def evaluate(vals):
        r = Record()
        return float(function(*[r.constant(v) for v in vals]).data.reshape(()))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, a in enumerate(arrays):
        flat_idx = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            flat_idx = rng.choice(a.size, size=max_entries, replace=False)
        analytic = grads[ts[i].id].reshape(-1)
        for j in flat_idx:
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
            an = analytic[j]
            err = abs(an - numeric) / max(abs(an), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.

    Returns new parameter arrays for the names in ``grads``; other entries of
    ``params`` are passed through untouched.  ``state`` is advanced in place.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"moment shape mismatch for {name}")
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --------------------------------------------------------------------------
# named-tensor checkpoints

CHECKPOINT_FORMAT = "trafficlab-named-tensors"
CHECKPOINT_VERSION = 1


def save_named_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(np.shape(a)),
             "data": [float(x) for x in np.asarray(a, dtype=np.float64).reshape(-1)]}
            for name, a in sorted(tensors.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n")


def load_named_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a named-tensor checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"{path}: checkpoint version {doc.get('version')!r} unsupported")
    out = {}
    for item in doc["tensors"]:
        shape = tuple(item["shape"])
        data = np.array(item["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise IntegrityError(f"{path}: tensor {item['name']} payload does not match its shape")
        out[item["name"]] = data.reshape(shape)
    return out, doc.get("meta", {})
