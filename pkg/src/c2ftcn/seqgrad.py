"""Minimal reverse-mode differentiation over sequence tensors.

Arrays are laid out time-major with channels last: ``(..., T, C)``.  Any
leading axes are batch axes.  Only the operations needed by the
segmentation network and its losses are provided.
"""

from __future__ import annotations

import contextlib
import dataclasses
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-8

_grad_enabled = True
# Branch patterns of non-smooth ops, recorded only while grad_check runs.
_branch_trace: list | None = None


class ShapeError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


class KinkError(RuntimeError):
    """A finite-difference probe crossed a non-differentiable point."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record_branch(pattern: np.ndarray) -> None:
    if _branch_trace is not None:
        _branch_trace.append(np.array(pattern, copy=True))


class Tensor:
    """Array plus gradient accumulator and the closure that back-propagates it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        # Interior nodes get their accumulator when backward() runs.
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = []
        seen = set()
        stack = [(self, False)]
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
        # Interior nodes receive fresh accumulators; leaves keep theirs.
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + grad
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def numpy(self):
        return self.data

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x.grad += 2.0 * x.data * g

    return _make(x.data * x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    _record_branch(active)

    def backward(g):
        x.grad += g * active

    return _make(np.where(active, x.data, 0.0), (x,), backward)


def log(x: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient where the floor binds."""
    live = x.data > floor
    _record_branch(live)
    safe = np.where(live, x.data, floor)

    def backward(g):
        x.grad += np.where(live, g / safe, 0.0)

    return _make(np.log(safe), (x,), backward)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    _record_branch(sign)

    def backward(g):
        x.grad += g * sign

    return _make(np.abs(x.data), (x,), backward)


def clip_max(x: Tensor, cap: float) -> Tensor:
    """Elementwise ``min(x, cap)``."""
    below = x.data < cap
    _record_branch(below)

    def backward(g):
        x.grad += g * below

    return _make(np.where(below, x.data, cap), (x,), backward)


# ----------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x.grad += np.broadcast_to(g, x.shape)

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x.grad += np.broadcast_to(g / n, x.shape)

    return _make(np.asarray(x.data.mean()), (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(weights * x)`` with a constant weight array."""
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)

    def backward(g):
        x.grad += g * w

    return _make(np.asarray((w * x.data).sum()), (x,), backward)


def temporal_max(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max over the time axis (-2), restricted to ``mask`` frames.

    Gradient goes to the earliest maximal frame per channel.
    """
    data = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[..., None]
        if not m.any(axis=-2).all():
            raise DegenerateError("temporal_max over an all-masked sequence")
        data = np.where(m, data, -np.inf)
    idx = np.argmax(data, axis=-2)
    _record_branch(idx)
    out = np.take_along_axis(data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        x.grad += gx

    return _make(out, (x,), backward)


# ----------------------------------------------------------------- structural

def take(x: Tensor, idx) -> Tensor:
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        x.grad += gx

    return _make(x.data[idx], (x,), backward)


def time_slice(x: Tensor, start: int, stop: int) -> Tensor:
    return take(x, (Ellipsis, slice(start, stop), slice(None)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(data, tensors, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x.grad += g @ weight.data
        if weight.requires_grad:
            weight.grad += g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            bias.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out, parents, backward)


# ----------------------------------------------------------------- sequence ops

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Zero-padded cross-correlation along time.

    ``weight`` has shape (Cout, Cin, k); with ``pad=(k-1)//2`` and odd k the
    output keeps the input length.
    """
    cout, cin, k = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if pad is None:
        pad = (k - 1) // 2
    T = x.shape[-2]
    t_out = T + 2 * pad - k + 1
    if t_out < 1:
        raise ShapeError("conv1d: output length would be empty")
    lead = x.shape[:-2]
    xp = np.zeros(lead + (T + 2 * pad, cin), dtype=x.data.dtype)
    xp[..., pad:pad + T, :] = x.data
    # cols[..., t, j*Cin + c] = xp[..., t + j, c]
    cols = np.concatenate([xp[..., j:j + t_out, :] for j in range(k)], axis=-1)
    wmat = weight.data.transpose(2, 1, 0).reshape(k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            gw = cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)
            weight.grad += gw.reshape(k, cin, cout).transpose(2, 1, 0)
        if bias is not None and bias.requires_grad:
            bias.grad += g.reshape(-1, cout).sum(axis=0)
        if x.requires_grad:
            gcols = g @ wmat.T
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + t_out, :] += gcols[..., j * cin:(j + 1) * cin]
            x.grad += gxp[..., pad:pad + T, :]

    return _make(out, parents, backward)


def maxpool1d(x: Tensor, w: int) -> Tensor:
    """Non-overlapping max pool along time; trailing ``T mod w`` frames are dropped."""
    if w < 1:
        raise ValueError("maxpool1d: window must be >= 1")
    T, C = x.shape[-2:]
    n = T // w
    if n == 0:
        raise DegenerateError(f"maxpool1d: window {w} longer than sequence length {T}")
    lead = x.shape[:-2]
    blocks = x.data[..., :n * w, :].reshape(*lead, n, w, C)
    idx = np.argmax(blocks, axis=-2)  # earliest index on ties
    _record_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None, :], g[..., None, :], axis=-2)
        gx = np.zeros_like(x.data)
        gx[..., :n * w, :] = gb.reshape(*lead, n * w, C)
        x.grad += gx

    return _make(out, (x,), backward)


def _interp_coords(t_src: int, t_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if t_src < 1 or t_dst < 1:
        raise ShapeError("interpolation lengths must be >= 1")
    if t_src == 1 or t_dst == 1:
        z = np.zeros(t_dst, dtype=int)
        return z, z, np.zeros(t_dst)
    pos = np.arange(t_dst) * (t_src - 1) / (t_dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), t_src - 2)
    return lo, lo + 1, pos - lo


def interp_matrix(t_src: int, t_dst: int) -> np.ndarray:
    """Endpoint-aligned linear interpolation weights of shape (t_dst, t_src)."""
    lo, hi, frac = _interp_coords(t_src, t_dst)
    mat = np.zeros((t_dst, t_src))
    rows = np.arange(t_dst)
    mat[rows, lo] = 1.0 - frac
    mat[rows, hi] += frac
    return mat


def interpolate(a: np.ndarray, t_dst: int) -> np.ndarray:
    """Endpoint-aligned linear resampling of axis -2.

    Evaluated as ``a[lo] + frac * (a[hi] - a[lo])`` so constant runs stay
    bit-exact.
    """
    lo, hi, frac = _interp_coords(a.shape[-2], t_dst)
    a_lo = a[..., lo, :]
    return a_lo + frac[:, None] * (a[..., hi, :] - a_lo)


def upsample_linear(x: Tensor, t_dst: int) -> Tensor:
    t_src = x.shape[-2]
    if t_src == t_dst:
        return x
    mat = interp_matrix(t_src, t_dst)

    def backward(g):
        x.grad += mat.T @ g

    return _make(interpolate(x.data, t_dst), (x,), backward)


def softmax_rows(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, (logits,), backward)


@dataclasses.dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x: Tensor, state: BatchNormState, training: bool = True,
              mask: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation over every non-channel axis.

    In training mode the statistics come from frames where ``mask`` is true
    (population variance) and the running estimates are updated.
    """
    C = x.shape[-1]
    gamma, beta = state.gamma, state.beta
    if mask is None:
        m = np.ones(x.shape[:-1], dtype=np.float64)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape[:-1])
    n = m.sum()
    if n == 0:
        raise DegenerateError("batchnorm: no valid frames for statistics")
    m3 = m[..., None]
    if training:
        axes = tuple(range(x.data.ndim - 1))
        mu = (x.data * m3).sum(axis=axes) / n
        xc = x.data - mu
        var = ((xc * xc) * m3).sum(axis=axes) / n
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
        xc = x.data - mu
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).reshape(-1, C).sum(axis=0)
        if beta.requires_grad:
            beta.grad += g.reshape(-1, C).sum(axis=0)
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                # Every output depends on the statistics; only valid frames feed them.
                s1 = gxhat.reshape(-1, C).sum(axis=0)
                s2 = (gxhat * xhat).reshape(-1, C).sum(axis=0)
                x.grad += inv * (gxhat - m3 * (s1 + xhat * s2) / n)
            else:
                x.grad += gxhat * inv

    return _make(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------- gradient check

@dataclasses.dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_resampled: int


def _trace_forward(fn):
    global _branch_trace
    _branch_trace = []
    try:
        out = fn()
        trace = _branch_trace
    finally:
        _branch_trace = None
    return out, trace


def _same_trace(a, b) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def rel_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               seed: int = 0, max_entries: int | None = None,
               resample: Callable[[np.random.Generator], tuple] | None = None,
               max_resample: int = 20) -> GradCheckResult:
    """Compare analytic gradients of a scalar ``fn()`` with central differences.

    If any probe flips the branch of a non-smooth op (ReLU sign, pooling
    argmax, clip, log floor) the problem is redrawn through
    ``resample(rng) -> (fn, params)``; without a resampler a ``KinkError``
    is raised.  The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor = max(1e-6, 1e5 * eps_mach * max(1, |f|) / step)`` sits above
    the roundoff noise of the central difference, so gradients that are
    analytically zero are not reported as failures.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(max_resample + 1):
        try:
            err, n = _grad_check_once(fn, params, step, rng, max_entries)
            return GradCheckResult(err, n, attempt)
        except KinkError:
            if resample is None:
                raise
            fn, params = resample(rng)
    raise KinkError(f"kink persisted after {max_resample} resamples")


def _grad_check_once(fn, params, step, rng, max_entries):
    for p in params:
        p.zero_grad()
    out, base_trace = _trace_forward(fn)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"grad_check: non-finite loss {out.data!r}")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    floor = max(1e-6, 1e5 * np.finfo(np.float64).eps * max(1.0, abs(float(out.data))) / step)

    if max_entries is None:
        probes = [(j, i) for j, p in enumerate(params) for i in range(p.data.size)]
    else:
        # a fixed budget spread over tensors: pick a tensor, then an entry
        sizes = np.array([p.data.size for p in params])
        which = rng.integers(0, len(params), size=max_entries)
        probes = [(int(j), int(rng.integers(sizes[j]))) for j in which]

    worst = 0.0
    n_checked = 0
    for j, i in probes:
        flat = params[j].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp, tp = _trace_forward(fn)
            flat[i] = orig - step
            fm, tm = _trace_forward(fn)
        flat[i] = orig
        if not (_same_trace(base_trace, tp) and _same_trace(base_trace, tm)):
            raise KinkError(f"probe at entry {i} of parameter {j} crossed a kink")
        numeric = (float(fp.data) - float(fm.data)) / (2 * step)
        worst = max(worst, float(rel_error(analytic[j].reshape(-1)[i], numeric, floor)))
        n_checked += 1
    return worst, n_checked
