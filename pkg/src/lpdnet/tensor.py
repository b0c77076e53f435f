"""Small reverse-mode autodiff core over float64 numpy arrays.

Only the handful of primitives the place-recognition network needs are
provided. Every op works on arbitrary leading (batch) dimensions.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._accel import njit, use_numba


class NumericError(FloatingPointError):
    """A forward or backward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(out: Tensor, grad=None) -> None:
    """Accumulate gradients into every tensor reachable from ``out``."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(out): np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._acc(g)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check(a.data + b.data, "add")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check(a.data - b.data, "sub")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _check(a.data * b.data, "mul")
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = _check(a.data @ b.data, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Tensor(out, (a, b), bw)


def shared_mlp(x, w, b=None) -> Tensor:
    """Apply ``x @ w + b`` identically to every row of ``x`` (..., Cin)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"shared_mlp: input width {x.shape[-1]} vs weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"shared_mlp: bias {b.shape} vs weight {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    _check(y, "shared_mlp")
    out_shape = x.shape[:-1] + (w.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return Tensor(y.reshape(out_shape), parents, bw)


fc_forward = shared_mlp


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return Tensor(s, (x,), bw)


def maxpool(x, axis: int = -2) -> Tensor:
    """Max over ``axis``; gradient goes to the first (lowest-index) maximum."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("maxpool over an empty axis")
    ax = axis % x.data.ndim
    out_shape = x.shape[:ax] + x.shape[ax + 1:]
    # (outer, K, inner) view of the C-ordered data, max over the middle axis
    k = x.shape[ax]
    x3 = np.ascontiguousarray(x.data).reshape(-1, k, int(np.prod(x.shape[ax + 1:], dtype=np.int64)))
    if use_numba():
        val, arg = _maxpool_kernel(x3)
    else:
        arg = np.argmax(x3, axis=1)
        val = np.take_along_axis(x3, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        gx = np.zeros(x3.shape)
        np.put_along_axis(gx, arg[:, None, :], g.reshape(arg.shape)[:, None, :], axis=1)
        return (gx.reshape(x.shape),)
    return Tensor(val.reshape(out_shape), (x,), bw)


@njit(cache=True)
def _maxpool_kernel(x):
    outer, k, inner = x.shape
    val = x[:, 0, :].copy()
    arg = np.zeros((outer, inner), dtype=np.int64)
    for o in range(outer):
        for m in range(1, k):
            for i in range(inner):
                if x[o, m, i] > val[o, i]:
                    val[o, i] = x[o, m, i]
                    arg[o, i] = m
    return val, arg


def maxpool_points(x):
    """Columnwise max of an (N, C) array; returns (tensor, argmax rows)."""
    x = as_tensor(x)
    if x.shape[0] < 1:
        raise ShapeError("maxpool_points of an empty point set")
    return maxpool(x, axis=0), np.argmax(x.data, axis=0)


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    """``v / |v|`` along ``axis``; zero vectors map to zero with a warning."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    zero = norm <= eps
    if np.any(zero):
        warnings.warn("l2_normalize: zero vector left unnormalized", RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - y * dot) / safe),)
    return Tensor(y, (x,), bw)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor(out, tuple(xs), bw)


def matmul_apply(x, t) -> Tensor:
    """Right-multiply point rows by a predicted matrix: (..., N, C) @ (..., C, C)."""
    return matmul(x, t)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the first axis."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros(x.shape)
        gx[start:stop] = g
        return (gx,)
    return Tensor(x.data[start:stop].copy(), (x,), bw)


def expand(x, axis: int, n: int) -> Tensor:
    """Insert ``axis`` and repeat ``n`` times along it."""
    x = as_tensor(x)
    y = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return Tensor(y, (x,), lambda g: (g.sum(axis=axis),))


def gather_neighbors(x, idx) -> Tensor:
    """x: (B, N, C), idx: (B, N, k) -> (B, N, k, C) rows ``x[b, idx[b, i, m]]``.

    Unbatched x (N, C) with idx (N, k) gives (N, k, C).
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim == 2 and idx.ndim == 2:
        return reshape(gather_neighbors(reshape(x, (1,) + x.shape), idx[None]), idx.shape + (x.shape[-1],))
    if x.data.ndim != 3 or idx.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_neighbors: x {x.shape} and idx {idx.shape} do not match")
    bsz, n, c = x.shape
    flat = (idx + (np.arange(bsz) * n)[:, None, None]).reshape(-1)
    y = x.data.reshape(-1, c)[flat].reshape(idx.shape + (c,))

    def bw(g):
        return (scatter_rows(flat, g.reshape(-1, c), bsz * n).reshape(x.shape),)
    return Tensor(y, (x,), bw)


def edge_diff(center, source, idx) -> Tensor:
    """``center[b, i] - source[b, idx[b, i, m]]`` as a (B, N, k, C) tensor.

    Unbatched (N, C) inputs with idx (N, k) give (N, k, C).
    """
    center, source = as_tensor(center), as_tensor(source)
    idx = np.asarray(idx, dtype=np.int64)
    if center.data.ndim == 2 and idx.ndim == 2:
        out = edge_diff(reshape(center, (1,) + center.shape), reshape(source, (1,) + source.shape), idx[None])
        return reshape(out, idx.shape + (center.shape[-1],))
    if center.data.ndim != 3 or center.shape != source.shape or idx.shape[:2] != center.shape[:2]:
        raise ShapeError(f"edge_diff: center {center.shape}, source {source.shape}, idx {idx.shape}")
    bsz, n, c = source.shape
    flat = (idx + (np.arange(bsz) * n)[:, None, None]).reshape(-1)
    y = center.data[:, :, None, :] - source.data.reshape(-1, c)[flat].reshape(idx.shape + (c,))

    def bw(g):
        gs = scatter_rows(flat, g.reshape(-1, c), bsz * n).reshape(source.shape)
        return g.sum(axis=-2), -gs
    return Tensor(y, (center, source), bw)


@njit(cache=True)
def _scatter_rows_kernel(flat, g, out):
    for r in range(flat.shape[0]):
        t = flat[r]
        for j in range(g.shape[1]):
            out[t, j] += g[r, j]


def scatter_rows(flat, g, n_rows: int) -> np.ndarray:
    """``out[flat[r]] += g[r]`` in row order, so every sum has a fixed order."""
    out = np.zeros((n_rows, g.shape[1]))
    if use_numba():
        _scatter_rows_kernel(flat, np.ascontiguousarray(g), out)
        return out
    order = np.argsort(flat, kind="stable")
    sf = flat[order]
    starts = np.flatnonzero(np.r_[True, sf[1:] != sf[:-1]])
    out[sf[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def hinge(x) -> Tensor:
    return relu(x)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return Tensor(out, (x,), bw)


def vlad_aggregate(assign, x, centers) -> Tensor:
    """Residual sums ``V[k] = sum_i a[i, k] (x[i] - c[k])``.

    assign (..., N, K), x (..., N, F), centers (K, F) -> (..., K, F).
    """
    a, x, c = as_tensor(assign), as_tensor(x), as_tensor(centers)
    at = np.swapaxes(a.data, -1, -2)
    asum = a.data.sum(axis=-2)[..., None]
    v = _check(at @ x.data - asum * c.data, "vlad_aggregate")

    def bw(g):
        ga = x.data @ np.swapaxes(g, -1, -2) - (g * c.data).sum(axis=-1)[..., None, :]
        gx = a.data @ g
        gc = -(asum * g)
        return ga, gx, _unbroadcast(gc, c.shape)
    return Tensor(v, (a, x, c), bw)


# ---------------------------------------------------------------------------
# parameters


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


class ParamStore:
    """Named parameter tensors with paired gradient buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), name=name)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        return self.add(name, glorot_uniform(self.rng, fan_in, fan_out))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(sorted(self.params))

    def __len__(self):
        return len(self.params)

    def items(self):
        return [(k, self.params[k]) for k in sorted(self.params)]

    def zero_grad(self):
        for t in self.params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(values)
        if strict and missing:
            raise KeyError(f"missing parameters: {', '.join(sorted(missing))}")
        for k, v in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].data.shape != v.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].data.shape}")
            self.params[k].data[...] = v


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(diff / scale)


def finite_difference_check(f: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-6,
                            names=None, max_entries: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f(store)`` with central differences.

    Relative error per parameter is ``|g_a - g_n| / max(|g_a|, |g_n|)`` over the
    checked entries; ``max_entries`` samples that many entries per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    store.zero_grad()
    out = f(store)
    if not np.isfinite(out.data).all():
        raise NumericError("objective is not finite")
    backward(out)
    analytic = store.grads()
    rng = np.random.default_rng(seed)
    per = {}
    for name in (names or list(store)):
        t = store[name]
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(entries))
        for j, e in enumerate(entries):
            old = flat[e]
            flat[e] = old + eps
            fp = float(f(store).data)
            flat[e] = old - eps
            fm = float(f(store).data)
            flat[e] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"objective not finite while perturbing {name}")
            num[j] = (fp - fm) / (2 * eps)
        per[name] = rel_error(analytic[name].reshape(-1)[entries], num)
    worst = max(per, key=per.get)
    return GradCheckResult(per[worst], worst, per)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"LPDNETCKPT\x00\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore) -> None:
    """16-byte header, then (name, shape, float64 data) in sorted name order."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(store))]
    for name, t in store.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:12] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 12)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", raw, 16)
    off = 20
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}Q", raw, off)
        off += 8 * nd
        size = int(np.prod(shape)) if nd else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out
