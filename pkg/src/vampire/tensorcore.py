"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each op computes its forward value with numpy and, when any input tracks
gradients, records a closure that pushes the upstream gradient back to its
inputs. ``Tensor.backward`` walks the recorded graph in reverse topological
order. Only first derivatives are supported.

Also here: AdamW, the cosine schedule, finite-difference gradient checks and
the binary checkpoint format.
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, MissingFileError, OptimizerError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked)
    out._parents = tracked
    out._backward = backward if tracked else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x._accum(g * out))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: x._accum(g * (1.0 - out * out)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: x._accum(g * s * (1.0 - s)))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: x._accum(g * (s + out * (1.0 - s))))


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: x._accum(g * _sigmoid(z)))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(np.asarray(out, dtype=DTYPE), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: x._accum(np.transpose(g, inv)))


def expand(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(np.array(out), (x,), lambda g: x._accum(_unbroadcast(g, x.shape)))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        x._accum(gx)

    return _make(np.array(out, dtype=DTYPE), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accum(part)

    return _make(out, tensors, backward)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows along axis 1 per batch entry: ``out[b, t] = x[b, index[b, t]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather: index shape {index.shape} does not fit tensor shape {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        x._accum(gx)

    return _make(out, (x,), backward)


def scatter(x: Tensor, index: np.ndarray, length: int | None = None) -> Tensor:
    """Inverse of ``gather`` for injective indices: ``out[b, index[b, t]] = x[b, t]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.shape != x.shape[:2]:
        raise DimensionError(f"scatter: index shape {index.shape} does not fit tensor shape {x.shape}")
    length = x.shape[1] if length is None else length
    rows = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], length) + x.shape[2:], dtype=DTYPE)
    out[rows, index] = x.data
    return _make(out, (x,), lambda g: x._accum(g[rows, index]))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# fused ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. Entries where ``mask`` is False get weight exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accum(gx)

    return _make(out, (x, gamma, beta), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy in the overflow-free form."""
    y = np.asarray(labels, dtype=DTYPE)
    z = logits.data
    if y.shape != z.shape:
        raise DimensionError(f"bce: logits {z.shape} vs labels {y.shape}")
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        logits._accum(g * (_sigmoid(z) - y) / z.size)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), backward)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Input-dependent diagonal linear recurrence, zero-order-hold discretised.

    Shapes: u, delta (batch, L, E); A (E, N); B, C (batch, L, N); D (E,).
    For each step ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`` and
    ``y_t = <C_t, h_t> + D u_t``.
    """
    bsz, L, E = u.shape
    N = A.shape[1]
    if delta.shape != u.shape or A.shape != (E, N) or B.shape != (bsz, L, N) \
            or C.shape != (bsz, L, N) or D.shape != (E,):
        raise DimensionError(
            f"selective_scan: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    dl = delta.data[..., None]
    dA = np.exp(dl * A.data)                                   # (b, L, E, N)
    dBu = dl * B.data[:, :, None, :] * u.data[..., None]       # (b, L, E, N)
    hs = np.empty_like(dA)
    h = np.zeros((bsz, E, N), dtype=DTYPE)
    for t in range(L):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
    y = np.einsum("blen,bln->ble", hs, C.data) + u.data * D.data

    def backward(g):
        gh_out = g[..., None] * C.data[:, :, None, :]
        acc = np.empty_like(hs)
        run = np.zeros((bsz, E, N), dtype=DTYPE)
        for t in range(L - 1, -1, -1):
            run = gh_out[:, t] + run
            acc[:, t] = run
            run = run * dA[:, t]
        h_prev = np.concatenate([np.zeros((bsz, 1, E, N)), hs[:, :-1]], axis=1)
        g_dA = acc * h_prev * dA          # gradient w.r.t. (delta * A)
        if C.requires_grad:
            C._accum(np.einsum("ble,blen->bln", g, hs))
        if D.requires_grad:
            D._accum((g * u.data).sum(axis=(0, 1)))
        if A.requires_grad:
            A._accum(np.einsum("blen,ble->en", g_dA, delta.data))
        Bu = B.data[:, :, None, :] * u.data[..., None]
        if delta.requires_grad:
            delta._accum((g_dA * A.data).sum(-1) + (acc * Bu).sum(-1))
        if B.requires_grad:
            B._accum(np.einsum("blen,ble->bln", acc, delta.data * u.data))
        if u.requires_grad:
            u._accum(g * D.data + np.einsum("blen,bln->ble", acc, B.data) * delta.data)

    return _make(y, (u, delta, A, B, C, D), backward)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"gradient_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = finite_difference(lambda: f(x).item(), x.data, eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def finite_difference(fn: Callable[[], float], data: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``data``, perturbed in place."""
    grad = np.zeros_like(data)
    flat, gflat = data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float | None = None,
) -> Sequence[np.ndarray]:
    """One AdamW update applied in place; weight decay is decoupled from the moments."""
    lr = state.base_lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise OptimizerError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in parameter {i}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != m.shape:
            raise OptimizerError(f"parameter shape {p.shape} does not match moment shape {m.shape}")
        p -= lr * state.weight_decay * p
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step > total_steps:
        warnings.warn(f"cosine_lr: step {step} beyond total {total_steps}; using 0", stacklevel=2)
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, named: Iterable[tuple[str, np.ndarray]]) -> Path:
    """Write named arrays as length-prefixed records followed by a CRC32 footer."""
    chunks = []
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(chunks)
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    out: dict[str, np.ndarray] = {}
    pos = 0
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed record at byte {pos}") from exc
    return out
