"""Small reverse-mode autograd over numpy arrays.

Only the operations the duration and acoustic models need are provided.
Each op records its parents and a closure that pushes the output gradient
back to them; ``Tensor.backward`` walks the graph in reverse topological
order.  Shapes follow the ``[..., time, channels]`` convention.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """Dense float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = ""):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed after propagation
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=None if isinstance(x, np.ndarray) else DEFAULT_DTYPE)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
        out._backward = backward
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def _mm2(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for 2-D ``w``; numpy's stacked path skips BLAS, so flatten first."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(*a.shape[:-1], w.shape[-1])


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        return linear(a, b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``y = x @ weight + bias`` over the last axis of ``x``."""
    x, weight = _wrap(x), _wrap(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = _mm2(x.data, weight.data)
    if bias is not None:
        y = y + bias.data

    def backward(g):
        if _needs(x):
            x._accumulate(_mm2(g, weight.data.T))
        if _needs(weight):
            flat_x = x.data.reshape(-1, x.shape[-1])
            weight._accumulate(flat_x.T @ g.reshape(-1, g.shape[-1]))
        if bias is not None and _needs(bias):
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward, "linear")


def relu(x) -> Tensor:
    x = _wrap(x)
    positive = x.data > 0

    def backward(g):
        x._accumulate(g * positive)

    return _make(np.where(positive, x.data, 0).astype(x.data.dtype), (x,), backward, "relu")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _wrap(x)

    def backward(g):
        x._accumulate(np.swapaxes(g, a, b))

    return _make(np.swapaxes(x.data, a, b), (x,), backward, "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if _needs(t):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def mask_rows(x, mask: np.ndarray) -> Tensor:
    """Zero rows where ``mask`` is False; ``mask`` has the shape of ``x`` minus the last axis."""
    x = _wrap(x)
    m = mask[..., None].astype(x.data.dtype)

    def backward(g):
        x._accumulate(g * m)

    return _make(x.data * m, (x,), backward, "mask_rows")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(buf)

    return _make(table.data[ids], (table,), backward, "embedding")


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Per-sequence row gather: ``x[b, index[b, t]]`` for ``x`` of shape ``[B, n, d]``."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape}, index {index.shape}")
    batch = np.arange(x.shape[0])[:, None]

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (np.broadcast_to(batch, index.shape), index), g)
        x._accumulate(buf)

    return _make(x.data[batch, index], (x,), backward, "gather_rows")


def total(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


# ---------------------------------------------------------------------------
# layers


def conv1d(x, kernel, bias=None) -> Tensor:
    """Temporal convolution with zero "same" padding.

    ``x`` is ``[..., n, c_in]`` and ``kernel`` is ``[k, c_in, c_out]``; the
    output keeps the input length.  Output row ``t`` sees input rows
    ``t - (k-1)//2 .. t + k//2``.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if kernel.ndim != 3 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError("conv1d: needs at least one time step")
    k, c_in, c_out = kernel.shape
    n = x.shape[-2]
    left, right = (k - 1) // 2, k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    padded = np.pad(x.data, pad)
    # [..., n, c_in, k] -> [..., n, k, c_in]
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-2)
    cols = np.swapaxes(windows, -1, -2).reshape(*x.shape[:-2], n, k * c_in)
    w2 = kernel.data.reshape(k * c_in, c_out)
    y = _mm2(cols, w2)
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {bias.shape} does not match c_out={c_out}")
        y = y + bias.data

    def backward(g):
        if _needs(kernel):
            kernel._accumulate((cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out))
        if bias is not None and _needs(bias):
            bias._accumulate(g.reshape(-1, c_out).sum(axis=0))
        if _needs(x):
            gcols = _mm2(g, w2.T).reshape(*x.shape[:-2], n, k, c_in)
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[..., j : j + n, :] += gcols[..., :, j, :]
            x._accumulate(gpad[..., left : left + n, :])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, parents, backward, "conv1d")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        if _needs(gain):
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if _needs(bias):
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if _needs(x):
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero weight."""
    x = _wrap(x)
    logits = x.data
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    peak = logits.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    e = np.exp(logits - peak)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y.astype(x.data.dtype, copy=False), (x,), backward, "softmax")


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is False or ``p == 0``."""
    x = _wrap(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), backward, "dropout")


def dropout_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator: the same (seed, stream) pair always yields the same draws."""
    return np.random.Generator(np.random.Philox(key=seed % 2**64, counter=[0, 0, 0, stream % 2**64]))


def sinusoidal_positions(n: int, d: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """``[n, d]`` table; even columns are sines, odd columns cosines."""
    if d % 2:
        raise ValueError(f"sinusoidal positions need an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": v for k, v in vars(self).items()}


def init_attention(d: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> AttentionParams:
    def w():
        return Tensor(rng.normal(0, 1 / math.sqrt(d), (d, d)).astype(dtype), requires_grad=True)

    def b():
        return Tensor(np.zeros(d, dtype), requires_grad=True)

    return AttentionParams(w(), b(), w(), b(), w(), b(), w(), b())


def multi_head_self_attention(
    x,
    params: AttentionParams,
    heads: int = 2,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``x`` of shape ``[..., n, d]``.

    ``mask`` (``[..., n]``, True = real position) hides padded keys.
    """
    x = _wrap(x)
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"model dim {d} is not divisible by {heads} heads")
    dh = d // heads
    lead, n = x.shape[:-2], x.shape[-2]

    def split(t):
        return swapaxes(reshape(t, (*lead, n, heads, dh)), -2, -3)

    q = split(linear(x, params.wq, params.bq))
    k = split(linear(x, params.wk, params.bk))
    v = split(linear(x, params.wv, params.bv))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    key_mask = None
    if mask is not None:
        key_mask = np.asarray(mask, bool)[..., None, None, :]
    weights = softmax(scores, key_mask)
    ctx = matmul(weights, v)
    merged = reshape(swapaxes(ctx, -2, -3), (*lead, n, d))
    out = linear(merged, params.wo, params.bo)
    if return_weights:
        return out, weights.data
    return out


# ---------------------------------------------------------------------------
# losses


def _check_same(pred: Tensor, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")


def _weights(mask, shape, dtype):
    if mask is None:
        return None, float(np.prod(shape))
    w = np.asarray(mask, dtype)
    while w.ndim < len(shape):
        w = w[..., None]
    w = np.broadcast_to(w, shape)
    return w, float(w.sum())


def mse_loss(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all (unmasked) elements."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    _check_same(pred, target)
    w, count = _weights(mask, pred.shape, pred.data.dtype)
    diff = pred.data - target
    if w is not None:
        diff = diff * w
    count = max(count, 1.0)

    def backward(g):
        pred._accumulate(g * 2.0 * diff / count)

    return _make(np.asarray((diff**2).sum() / count, dtype=pred.data.dtype), (pred,), backward, "mse")


def l1_loss(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over all (unmasked) elements."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    _check_same(pred, target)
    w, count = _weights(mask, pred.shape, pred.data.dtype)
    diff = pred.data - target
    sign = np.sign(diff)
    if w is not None:
        diff = diff * w
        sign = sign * w
    count = max(count, 1.0)

    def backward(g):
        pred._accumulate(g * sign / count)

    return _make(np.asarray(np.abs(diff).sum() / count, dtype=pred.data.dtype), (pred,), backward, "l1")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params``.

    Parameters without a gradient entry are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float, **kwargs):
        self.params = dict(params)
        self.state = AdamState(learning_rate=lr, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"LFTC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write parameters as ``magic, version, count`` then one record per parameter.

    Each record is ``name length, utf-8 name, rank, dims, float32 data``; all
    integers are little-endian uint32.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", buf, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    return out


def parameters_from(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}


def grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
