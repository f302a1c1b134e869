"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything is a flat float64 numpy buffer (float32 storage is accepted but
all shipped configs train in 64-bit). Operations record onto an explicit
Tape; `backward` walks the tape once in reverse and returns gradients for
every requires_grad leaf. Single-threaded per tape; independent tapes are
safe to run in parallel processes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

RMS_NORM_EPS = 1e-6
L2_NORM_EPS = 1e-12


class Tensor:
    """A dense array plus autodiff bookkeeping.

    Immutable between forward passes except for optimizer updates, which
    happen strictly outside any active tape.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = -1
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; the named functions below are the real API.
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("name", "out_id", "input_ids", "backward")

    def __init__(self, name, out_id, input_ids, backward):
        self.name = name
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward = backward


class Tape:
    """Ordered log of primitive operations for one forward pass.

    Operations are appended in execution order, which is automatically a
    topological order; backward visits each record exactly once in reverse.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _ensure_id(self, t: Tensor) -> int:
        if t.tape is not self:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
            if t.requires_grad:
                self._leaves.append(t)
        return t.node_id

    def record(self, name, out: Tensor, inputs, backward):
        input_ids = [self._ensure_id(t) if isinstance(t, Tensor) else None for t in inputs]
        out.tape = self
        out.node_id = self._next_id
        self._next_id += 1
        self._records.append(_Record(name, out.node_id, input_ids, backward))

    @property
    def num_records(self):
        return len(self._records)


_TAPE_STACK: list = []


def _active_tape():
    # topmost entry; None means recording is suspended via no_grad()
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Suspend tape recording (teacher forwards, evaluation, FD probes)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


FINITE_CHECKS = True


def _assert_finite(name: str, arr: np.ndarray):
    # One-pass screen via the sum; exact scan only on suspicion so the happy
    # path stays cheap. A finite array whose sum overflows passes the rescan.
    if not FINITE_CHECKS or arr.size == 0:
        return
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: non-finite values in output")


def _apply(name, inputs, out_data, backward):
    _assert_finite(name, out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {ad.shape} vs {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[-2] if bd.ndim >= 2 else bd.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dims differ, shapes {ad.shape} vs {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, shapes {ad.shape} vs {bd.shape}")

    if ad.ndim > 2 and bd.ndim == 2:
        # flatten the leading dims into one big gemm instead of many small ones
        a2 = np.ascontiguousarray(ad).reshape(-1, inner_a)
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def backward(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _apply("matmul", (a, b), out, backward)

    if ad.ndim > 2:
        ac = np.ascontiguousarray(ad)
        bc = np.ascontiguousarray(bd)
        out = ac @ bc

        def backward(g):
            return g @ bc.swapaxes(-1, -2), ac.swapaxes(-1, -2) @ g

        return _apply("matmul", (a, b), out, backward)

    out = ad @ bd

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:  # (m, k) @ (k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1:  # (k,) @ (k, n) -> (n,)
            return bd @ g, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _apply("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _apply("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _apply("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply("mul", (a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _apply("relu", (a,), np.maximum(ad, 0.0), lambda g: (g * (ad > 0),))


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    inner = erf(ad / math.sqrt(2.0))
    out = 0.5 * ad * (1.0 + inner)

    def backward(g):
        pdf = np.exp(-0.5 * ad * ad) / math.sqrt(2.0 * math.pi)
        return (g * (0.5 * (1.0 + inner) + ad * pdf),)

    return _apply("gelu", (a,), out, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp may overflow to inf for very negative x; 1/(1+inf) is exactly the
    # right 0.0, so suppress the warning instead of branching
    with np.errstate(over="ignore"):
        e = np.exp(-x)
        e += 1.0
        return np.divide(1.0, e, out=e)


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = _sigmoid(ad)

    def backward(g):
        return (g * sig * (1.0 + ad * (1.0 - sig)),)

    return _apply("silu", (a,), ad * sig, backward)


def rms_norm(a: Tensor, gain: Tensor) -> Tensor:
    """y = x / rms(x) * gain over the last axis, rms eps fixed at 1e-6."""
    ad, gd = a.data, gain.data
    if gd.shape != ad.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gd.shape} vs input {ad.shape}")
    n = ad.shape[-1]
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow/NaN here is reported by the finite check, not a warning
        ms = np.einsum("...i,...i->...", ad, ad)[..., None] / n
        inv = 1.0 / np.sqrt(ms + RMS_NORM_EPS)
        normed = ad * inv
    out = normed * gd

    def backward(g):
        gg = g * gd
        dot = np.einsum("...i,...i->...", gg, ad)[..., None]
        ga = inv * gg - ad * (dot * inv ** 3 / n)
        prod = g * normed
        ggain = prod.reshape(-1, n).sum(axis=0) if prod.ndim > 1 else prod
        return ga, ggain

    return _apply("rms_norm", (a, gain), out, backward)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """x / max(||x||_2, 1e-12) over the last axis; zero rows map to zero."""
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    denom = np.maximum(norm, L2_NORM_EPS)
    out = ad / denom

    def backward(g):
        dot = np.sum(g * ad, axis=-1, keepdims=True)
        correction = np.where(norm > L2_NORM_EPS, dot / (denom ** 3), 0.0)
        return (g / denom - ad * correction,)

    return _apply("l2_normalize_rows", (a,), out, backward)


def row_softmax(a: Tensor) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _apply("row_softmax", (a,), p, backward)


def masked_causal_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of (..., T, T) scores, position i attending
    only to j <= i. Masked entries come out as exactly zero probability."""
    ad = a.data
    if ad.ndim < 2 or ad.shape[-1] != ad.shape[-2]:
        raise ShapeError(f"masked_causal_softmax: expected (..., T, T), got {ad.shape}")
    t = ad.shape[-1]
    z = ad + _causal_bias(t)  # -1e30 on future positions underflows to p == 0
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = np.einsum("...i,...i->...", g, p)[..., None]
        return (p * (g - dot),)

    return _apply("masked_causal_softmax", (a,), p, backward)


_MASK_CACHE: dict = {}


def _causal_bias(t: int) -> np.ndarray:
    m = _MASK_CACHE.get(t)
    if m is None:
        m = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, -1e30)
        _MASK_CACHE[t] = m
    return m


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)  # non-finite results raise NonFiniteError below
    return _apply("log", (a,), out, lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)  # overflow is caught by the finite check
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log softmax over the last axis."""
    ad = a.data
    z = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _apply("log_softmax", (a,), out, backward)


def logsumexp(a: Tensor) -> Tensor:
    """Stable log-sum-exp reduction over the last axis."""
    ad = a.data
    m = ad.max(axis=-1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(ad - m), axis=-1, keepdims=True)))[..., 0]

    def backward(g):
        return (np.exp(ad - out[..., None]) * g[..., None],)

    return _apply("logsumexp", (a,), out, backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

    return _apply("sum", (a,), out, backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    out = ad.mean(axis=axis)
    denom = ad.size if axis is None else ad.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / denom, ad.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / denom, axis), ad.shape).copy(),)

    return _apply("mean", (a,), out, backward)


def gather_rows(table: Tensor, indices) -> Tensor:
    """table[indices] along axis 0; indices is any integer array (embedding lookup)."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: indices must be integers")
    td = table.data
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of {td.shape[0]} rows")
    out = td[idx]

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *td.shape[1:]))
        return (gt,)

    return _apply("gather_rows", (table,), out, backward)


def take_along_last(a: Tensor, indices) -> Tensor:
    """Pick one entry per row along the last axis (target-logprob selection)."""
    idx = np.asarray(indices)
    ad = a.data
    if idx.shape != ad.shape[:-1]:
        raise ShapeError(f"take_along_last: indices {idx.shape} vs input {ad.shape}")
    out = np.take_along_axis(ad, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _apply("take_along_last", (a,), out, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    ad = a.data
    perm = tuple(axes) if axes is not None else tuple(reversed(range(ad.ndim)))
    inv = np.argsort(perm)
    # materialize: downstream ops are much faster on contiguous data
    out = np.ascontiguousarray(ad.transpose(perm))
    return _apply("transpose", (a,), out,
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reshape(a: Tensor, shape) -> Tensor:
    ad = a.data
    return _apply("reshape", (a,), ad.reshape(shape), lambda g: (g.reshape(ad.shape),))


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tuple(tensors), out, backward)


def repeat_heads(a: Tensor, repeats: int) -> Tensor:
    """Tile key/value heads along axis 1 for grouped-query attention."""
    ad = a.data
    if repeats == 1:
        return a
    out = np.repeat(ad, repeats, axis=1)
    b, h = ad.shape[0], ad.shape[1]

    def backward(g):
        return (g.reshape(b, h, repeats, *ad.shape[2:]).sum(axis=2),)

    return _apply("repeat_heads", (a,), out, backward)


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on (..., T, head_dim); rotates half-pairs."""
    ad = a.data
    hd = ad.shape[-1]
    if hd % 2:
        raise ShapeError(f"rope: head_dim must be even, got {hd}")
    half = hd // 2
    x1, x2 = ad[..., :half], ad[..., half:]
    out = np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate((g1 * cos + g2 * sin, g2 * cos - g1 * sin), axis=-1),)

    return _apply("rope", (a,), out, backward)


def interp_last(a: Tensor, lo: np.ndarray, hi: np.ndarray, beta: np.ndarray) -> Tensor:
    """Fixed linear interpolation along the last axis (dimension resampling)."""
    ad = a.data
    w_lo = 1.0 - beta
    out = w_lo * ad[..., lo] + beta * ad[..., hi]
    d_src = ad.shape[-1]

    def backward(g):
        flat = g.reshape(-1, g.shape[-1])
        acc = np.zeros((d_src, flat.shape[0]), dtype=g.dtype)
        np.add.at(acc, lo, (flat * w_lo).T)
        np.add.at(acc, hi, (flat * beta).T)
        return (acc.T.reshape(ad.shape),)

    return _apply("interp_last", (a,), out, backward)


# ---------------------------------------------------------------------------
# dispatcher, backward, gradient checking

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "silu": silu,
    "rms_norm": rms_norm,
    "l2_normalize_rows": l2_normalize_rows,
    "row_softmax": row_softmax,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "gather_rows": gather_rows,
    "transpose": transpose,
    "concat": concat,
}


def primitive_forward(kind: str, inputs, **kwargs) -> Tensor:
    """Uniform entry point for the named primitives (used by the gradcheck CLI)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss; returns {leaf Tensor: gradient array}.

    Leaves that the loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if not isinstance(tape, Tape) or loss.node_id < 0:
        raise NonFiniteError("backward: loss is not attached to an active tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    # non-finite gradients are the caller's to detect (named per parameter by
    # the trainer), so numpy's overflow warnings are suppressed here
    with np.errstate(over="ignore", invalid="ignore"):
        for rec in reversed(tape._records):
            g = grads.get(rec.out_id)
            if g is None:
                continue
            for input_id, ig in zip(rec.input_ids, rec.backward(g)):
                if input_id is None or ig is None:
                    continue
                cur = grads.get(input_id)
                # replace-on-accumulate: stored arrays never mutate in place
                grads[input_id] = ig if cur is None else cur + ig
    out = {}
    for leaf in tape._leaves:
        g = grads.get(leaf.node_id)
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
    return out


def grad_check(function, params, fd_step: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    `function` maps the list of parameter Tensors to a scalar Tensor. Returns
    max over parameter entries of |autodiff - fd| / max(1, |fd|).
    """
    with Tape():
        loss = function(params)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("grad_check: function must return a scalar Tensor")
        _assert_finite("grad_check", loss.data)
        grads = backward(loss)

    def evaluate() -> float:
        with no_grad():
            return function(params).item()

    worst = 0.0
    for p in params:
        g = grads[p]
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + fd_step
            f_plus = evaluate()
            p.data[idx] = orig - fd_step
            f_minus = evaluate()
            p.data[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * fd_step)
            rel = abs(g[idx] - fd) / max(1.0, abs(fd))
            if rel > worst:
                worst = rel
    return worst
