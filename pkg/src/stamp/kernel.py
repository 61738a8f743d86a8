"""Float64 tensors with reverse-mode differentiation.

The kernel is deliberately small: it carries exactly the operators the
decoder backbone, the pruning hook and the auxiliary head need. Every tensor
payload (forward values, buffers saved for backward, gradients) is reported
to a process-wide allocator so that per-step high-water marks can be
compared between pruned and unpruned runs.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class KernelError(Exception):
    """Base class for kernel contract violations."""


class DimensionError(KernelError):
    pass


class ContractError(KernelError):
    pass


class NumericError(KernelError):
    pass


# ---------------------------------------------------------------------------
# allocator instrumentation


@dataclass(frozen=True)
class AllocatorStats:
    live_bytes: int
    high_water_bytes: int


class _Allocator:
    __slots__ = ("live", "high")

    def __init__(self) -> None:
        self.live = 0
        self.high = 0

    def alloc(self, n: int) -> None:
        self.live += n
        if self.live > self.high:
            self.high = self.live

    def free(self, n: int) -> None:
        self.live -= n


_ALLOC = _Allocator()


def allocator_stats() -> AllocatorStats:
    return AllocatorStats(live_bytes=_ALLOC.live, high_water_bytes=_ALLOC.high)


def allocator_reset_highwater() -> None:
    _ALLOC.high = _ALLOC.live


class Buffer:
    """A tracked ndarray that is not a tensor (optimizer moments, caches)."""

    __slots__ = ("array", "_nbytes")

    def __init__(self, array: np.ndarray) -> None:
        self.array = array
        self._nbytes = array.nbytes
        _ALLOC.alloc(self._nbytes)

    def __del__(self) -> None:
        _ALLOC.free(self._nbytes)


def tune_allocator() -> bool:
    """Ask glibc to keep freed blocks instead of returning them to the OS.

    Training allocates and frees the same large activations every step; with
    the default thresholds each of them is a fresh mmap and page faults
    dominate small models. Process-wide and opt-in; returns False where
    ``mallopt`` is unavailable.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    # M_MMAP_THRESHOLD (capped by glibc at 32 MiB), M_TRIM_THRESHOLD, M_TOP_PAD
    return all(libc.mallopt(opt, val) == 1 for opt, val in ((-3, 32 << 20), (-1, 1 << 30), (-2, 256 << 20)))


# ---------------------------------------------------------------------------
# global mode flags and op counters


class _State:
    grad_enabled = True
    deterministic = False


_STATE = _State()

#: attention FLOPs (QK^T plus PV, forward only), keyed by caller-supplied tag
FLOP_COUNTER: dict[str, int] = {}


def reset_flop_counter() -> None:
    FLOP_COUNTER.clear()


@contextlib.contextmanager
def no_grad():
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def deterministic(flag: bool = True):
    """Disable dropout while active."""
    prev = _STATE.deterministic
    _STATE.deterministic = flag
    try:
        yield
    finally:
        _STATE.deterministic = prev


def is_deterministic() -> bool:
    return _STATE.deterministic


def set_deterministic(flag: bool) -> None:
    _STATE.deterministic = bool(flag)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *stream)``.

    Distinct stream keys never overlap, so e.g. constructing an extra module
    cannot shift the random numbers another module draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "name",
        "_grad",
        "_parents",
        "_backward",
        "_nbytes",
        "_saved",
        "__weakref__",
    )

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=DTYPE, copy=True)
        self._init(arr, requires_grad, (), None, (), owned=True)
        self.name = name

    def _init(self, arr, requires_grad, parents, backward, saved, owned) -> None:
        self.data = arr
        self.requires_grad = requires_grad
        self.name = None
        self._grad = None
        self._parents = parents
        self._backward = backward
        self._saved = saved
        nbytes = arr.nbytes if owned else 0
        for s in saved:
            nbytes += s.nbytes
        self._nbytes = nbytes
        _ALLOC.alloc(nbytes)

    @classmethod
    def _make(cls, arr, parents=(), backward=None, saved=(), view_of=None) -> "Tensor":
        """Build an op result. ``view_of`` marks ``arr`` as aliasing that parent."""
        t = cls.__new__(cls)
        needs = _STATE.grad_enabled and any(p.requires_grad for p in parents)
        if needs:
            t._init(arr, True, tuple(parents), backward, tuple(saved), owned=view_of is None)
        else:
            # views keep their base alive even when no graph is recorded
            keep = (view_of,) if view_of is not None else ()
            t._init(arr, False, keep, None, (), owned=view_of is None)
        return t

    def __del__(self) -> None:
        _ALLOC.free(self._nbytes)
        if self._grad is not None:
            _ALLOC.free(self._grad.nbytes)

    # -- grad bookkeeping -------------------------------------------------

    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if self._grad is not None:
            _ALLOC.free(self._grad.nbytes)
        if value is None:
            self._grad = None
            return
        value = np.array(value, dtype=DTYPE, copy=True)
        if value.shape != self.data.shape:
            raise DimensionError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value
        _ALLOC.alloc(value.nbytes)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE, copy=True)
            _ALLOC.alloc(self._grad.nbytes)
        else:
            self._grad += g

    def _release(self) -> None:
        saved = sum(s.nbytes for s in self._saved)
        if saved:
            _ALLOC.free(saved)
            self._nbytes -= saved
        self._saved = ()
        self._parents = ()
        self._backward = None

    # -- properties ---------------------------------------------------------

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

    def detach(self) -> "Tensor":
        return Tensor._make(self.data, view_of=self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        _ALLOC.alloc(self.data.nbytes)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                _ALLOC.free(g.nbytes)
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                # never accumulate in place: pg may alias g or a saved buffer
                if prev is None:
                    grads[key] = pg
                    _ALLOC.alloc(pg.nbytes)
                else:
                    grads[key] = prev + pg
            _ALLOC.free(g.nbytes)
            del g
            if not retain_graph:
                node._release()

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._make(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad / bd, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return Tensor._make(np.log(xd), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * (xd > 0),)

    return Tensor._make(np.maximum(xd, 0.0), (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    del x2
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * (_GELU_C * (1.0 + 3 * 0.044715 * (xd * xd)))
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return Tensor._make(out, (x,), backward, saved=(t,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or _STATE.deterministic:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    scale = 1.0 / keep
    mask = rng.random(x.shape) < keep
    out = x.data * mask
    out *= scale

    def backward(g):
        gx = g * mask
        gx *= scale
        return (gx,)

    return Tensor._make(out, (x,), backward, saved=(mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return Tensor._make(out, (x,), backward, view_of=x if out.base is not None else None)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._make(x.data.transpose(axes), (x,), backward, view_of=x)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]
    is_view = out.base is not None and np.shares_memory(out, x.data)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if is_view:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (x,), backward, view_of=x if is_view else None)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise DimensionError(f"token id out of range [0, {rows})")

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), backward)


def gather_seq(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, t] = x[b, index[b, t]]`` along axis 1; index -1 yields a zero row."""
    B, N = x.shape[:2]
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != B:
        raise DimensionError(f"index shape {index.shape} incompatible with batch {B}")
    if index.size and index.max() >= N:
        raise DimensionError("gather index out of range")
    hole = index < 0
    safe = np.where(hole, 0, index)
    rows = np.arange(B)[:, None]
    out = x.data[rows, safe]
    if hole.any():
        out[hole] = 0.0

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        gg = g if not hole.any() else np.where(hole[..., None], 0.0, g)
        np.add.at(full, (np.broadcast_to(rows, safe.shape), safe), gg)
        return (full,)

    return Tensor._make(out, (x,), backward)


def pool_groups(x: Tensor, groups: np.ndarray, mode: str) -> Tensor:
    """Merge token groups by elementwise max or mean.

    ``groups[b, t, g]`` lists source positions of output slot ``t``; ``-1``
    entries are padding. Output slots with no members are zero rows.
    """
    B, N, d = x.shape
    groups = np.asarray(groups, dtype=np.int64)
    member = groups >= 0
    safe = np.where(member, groups, 0)
    rows = np.arange(B)[:, None, None]
    vals = x.data[rows, safe]  # [B,T,G,d]
    count = member.sum(-1)
    empty = count == 0
    if mode == "avg_pool":
        w = member / np.maximum(count, 1)[..., None]
        out = np.einsum("btg,btgd->btd", w, vals)

        def backward(g):
            full = np.zeros(x.shape, dtype=DTYPE)
            contrib = w[..., None] * g[:, :, None, :]
            np.add.at(full, (np.broadcast_to(rows, safe.shape), safe), contrib)
            return (full,)

    elif mode == "max_pool":
        masked = np.where(member[..., None], vals, -np.inf)
        arg = masked.argmax(axis=2)  # [B,T,d], first max wins
        out = np.take_along_axis(masked, arg[:, :, None, :], axis=2)[:, :, 0, :]
        out[empty] = 0.0
        src = np.take_along_axis(np.broadcast_to(safe[..., None], vals.shape), arg[:, :, None, :], axis=2)[:, :, 0, :]

        def backward(g):
            full = np.zeros(x.shape, dtype=DTYPE)
            gg = np.where(empty[..., None], 0.0, g)
            bi = np.broadcast_to(np.arange(B)[:, None, None], src.shape)
            di = np.broadcast_to(np.arange(d)[None, None, :], src.shape)
            np.add.at(full, (bi, src, di), gg)
            return (full,)

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return Tensor._make(out, (x,), backward)


# ---------------------------------------------------------------------------
# dense layers


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shapes {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, transpose_w: bool = False) -> Tensor:
    """``x @ w + b`` over the last axis; ``transpose_w`` uses ``w.T`` (tied heads)."""
    xd, wd = x.data, w.data
    k = wd.shape[1] if transpose_w else wd.shape[0]
    if xd.shape[-1] != k:
        raise DimensionError(f"linear: input width {xd.shape[-1]} != weight fan-in {k}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    wm = wd.T if transpose_w else wd
    out = x2 @ wm
    if b is not None:
        out += b.data
    out = out.reshape(lead + (wm.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wm.T).reshape(xd.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (g2.T @ x2) if transpose_w else (x2.T @ g2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    inv_d = 1.0 / xd.shape[-1]
    # ufunc reductions skip the Python-level overhead of ndarray.mean
    xc = xd - np.add.reduce(xd, axis=-1, keepdims=True) * inv_d
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            m1 = np.add.reduce(gh, axis=-1, keepdims=True) * inv_d
            m2 = np.add.reduce(gh * xhat, axis=-1, keepdims=True) * inv_d
            gx = rstd * (gh - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), backward, saved=(xhat, rstd))


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionProbs:
    """Post-softmax attention weights ``values[..., h, query, key]``."""

    values: np.ndarray
    head_count: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, tag: str = "attn") -> tuple[Tensor, AttentionProbs]:
    """Scaled dot-product attention with materialized probabilities.

    q: [..., H, Nq, dh]; k, v: [..., H, Nk, dh]; mask: boolean [..., Nq, Nk]
    (broadcast over heads), ``True`` = may attend. Fully masked query rows get
    an all-zero probability row and a zero output.
    """
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    if qd.ndim < 3 or kd.shape != vd.shape or qd.shape[-1] != kd.shape[-1] or qd.shape[:-2] != kd.shape[:-2]:
        raise DimensionError(f"attention shapes q{qd.shape} k{kd.shape} v{vd.shape}")
    dh = qd.shape[-1]
    if dh <= 0:
        raise DimensionError("head width must be positive")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (qd.shape[-2], kd.shape[-2]):
        raise DimensionError(f"mask shape {mask.shape} does not match [Nq={qd.shape[-2]}, Nk={kd.shape[-2]}]")
    scale = 1.0 / math.sqrt(dh)
    bias = np.where(np.expand_dims(mask, -3), 0.0, -np.inf)
    p = (qd * scale) @ np.swapaxes(kd, -1, -2)
    p += bias
    rowmax = p.max(axis=-1, keepdims=True)
    rowmax[~np.isfinite(rowmax)] = 0.0
    p -= rowmax
    np.exp(p, out=p)
    z = p.sum(axis=-1, keepdims=True)
    z[z == 0] = 1.0
    p /= z
    out = p @ vd
    H = qd.shape[-3]
    nq, nk = qd.shape[-2], kd.shape[-2]
    lead = int(np.prod(qd.shape[:-2]))
    FLOP_COUNTER[tag] = FLOP_COUNTER.get(tag, 0) + 4 * lead * nq * nk * dh

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gp -= (gp * p).sum(axis=-1, keepdims=True)
        gp *= p
        gs = gp
        gq = (gs @ kd) * scale
        gk = np.swapaxes(gs, -1, -2) @ (qd * scale)
        return gq, gk, gv

    t = Tensor._make(out, (q, k, v), backward, saved=(p,))
    return t, AttentionProbs(values=p, head_count=H)


# ---------------------------------------------------------------------------
# losses


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {ld.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= ld.shape[-1]):
        raise DimensionError("target id out of vocabulary range")
    lp = log_softmax_np(ld)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    probs = np.exp(lp)
    del lp

    def backward(g):
        grad = probs * g[..., None]
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - g[..., None], -1)
        return (grad,)

    return Tensor._make(-picked, (logits,), backward, saved=(probs,))


# ---------------------------------------------------------------------------
# finite differences


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5, floor: float = 1e-12) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Dropout
    is disabled for the duration of the check. The error of one element is
    ``|a - n| / max(|a| + |n|, floor)``; ``floor`` keeps gradients that are
    exactly zero in theory from dividing rounding noise by rounding noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if floor <= 0:
        raise ValueError("floor must be positive")
    params = list(params)
    with deterministic(True):
        for p in params:
            p.zero_grad()
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is not finite")
        loss.backward()
        worst = 0.0
        with no_grad():
            for p in params:
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                ana = analytic.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                    flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise NumericError(f"non-finite loss while perturbing {p.name or 'param'}[{i}]")
                    num = (fp - fm) / (2.0 * eps)
                    err = abs(ana[i] - num) / max(floor, abs(ana[i]) + abs(num))
                    if err > worst:
                        worst = err
    return worst
