"""Reverse-mode autodiff on numpy arrays, sized for desk-scale experiments.

Float32 is the training dtype; gradient checks rebuild the same graphs in
float64.  Determinism contract: identical seeds and shapes give bit-identical
results, because every reduction keeps numpy's fixed evaluation order and the
tape replays in exact reverse recording order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes incompatible; message names the primitive and the shapes."""


def set_debug_finite_checks(enabled: bool) -> None:
    """Toggle per-op assertions that forward outputs are finite."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        # Materializes zeros on read so an unreached parameter reports a
        # zero gradient rather than a missing one.
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @property
    def has_grad(self) -> bool:
        """True once backward has written into this tensor."""
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops in forward execution order; backward replays them reversed."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Seed d(loss)/d(loss)=1 and accumulate grads in reverse tape order."""
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    loss._grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._entries):
        g = out._grad
        if g is None:
            continue
        fn(g)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], bw: Callable[[np.ndarray], None]) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("forward op produced a non-finite value")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape._entries.append((out, bw))
        return out
    return Tensor(out_data)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` along the axes numpy broadcast it over."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_broadcastable(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""
    b = _coerce(b, a)
    _require_broadcastable("add", a.data, b.data)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    """Elementwise a - b with numpy broadcasting."""
    b = _coerce(b, a)
    _require_broadcastable("sub", a.data, b.data)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b with numpy broadcasting."""
    b = _coerce(b, a)
    _require_broadcastable("mul", a.data, b.data)
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    out = x.data * c

    def bw(g):
        _accum(x, g * c)

    return _finish(out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with numpy batch semantics; both operands must be at least 2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} must both be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are not aligned")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dims of {a.data.shape} and {b.data.shape} are not broadcastable"
        ) from None
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _finish(out, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _finish(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without copying semantics visible to callers."""
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.data.shape} to {shape}") from None

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _finish(out, (x,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along one axis."""
    if not parts:
        raise ShapeError("concat: needs at least one input")
    shapes = [p.data.shape for p in parts]
    ref = list(shapes[0])
    for s in shapes[1:]:
        t = list(s)
        if len(t) != len(ref) or any(i != axis and t[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: shapes {shapes} differ outside axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(idx)])

    return _finish(out, tuple(parts), bw)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or all axes when axis is None."""
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _finish(out, (x,), bw)


# ---------------------------------------------------------------------------
# Neural primitives
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd * xd * xd))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _finish(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis (max subtracted before exp)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _finish(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (population variance, eps inside the sqrt)."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: input {x.data.shape} needs gain/bias of shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gx - m1 - xhat * m2) * inv)

    return _finish(out, (x, gain, bias), bw)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution of (B, T, C_in) with kernel (K, C_in, C_out).

    Output length is floor((T + 2*padding - K)/stride) + 1; an output
    shorter than one step is an error.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: input {x.data.shape} and kernel {kernel.data.shape} must be 3-D")
    B, T, cin = x.data.shape
    K, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv1d: input {x.data.shape} and kernel {kernel.data.shape} disagree on channels")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv1d: bias {bias.data.shape} must be ({cout},)")
    t_out = (T + 2 * padding - K) // stride + 1
    if t_out < 1:
        raise ShapeError(
            f"conv1d: output length {t_out} < 1 for input length {T}, "
            f"kernel {K}, stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    end = (t_out - 1) * stride + 1
    out = np.zeros((B, t_out, cout), dtype=x.data.dtype)
    for k in range(K):
        out += xp[:, k:k + end:stride, :] @ kernel.data[k]
    out += bias.data

    def bw(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1)))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for k in range(K):
                gk[k] = np.tensordot(xp[:, k:k + end:stride, :], g, axes=((0, 1), (0, 1)))
            _accum(kernel, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + end:stride, :] += g @ kernel.data[k].T
            _accum(x, gxp[:, padding:padding + T, :] if padding else gxp)

    return _finish(out, (x, kernel, bias), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer id; out-of-range ids are an error."""
    ids = np.asarray(ids)
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = int(ids.flat[int(np.argmax((ids < 0) | (ids >= n_rows)))])
        raise IndexError(f"embedding_lookup: id {bad} out of range for a table with {n_rows} rows")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, gt)

    return _finish(out, (table,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross entropy of softmax(logits) against targets, skipping pads.

    With label_smoothing eps the target distribution is
    (1 - eps) * onehot + eps / V.  Returns 0 when every position is pad.
    """
    ld = logits.data
    t = np.asarray(targets)
    if ld.ndim < 2 or ld.shape[:-1] != t.shape:
        raise ShapeError(f"cross_entropy: logits {ld.shape} do not match targets {t.shape}")
    n_vocab = ld.shape[-1]
    flat = ld.reshape(-1, n_vocab)
    tf = t.reshape(-1)
    valid = tf != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _finish(np.zeros((), dtype=ld.dtype), (logits,), lambda g: None)
    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, tf, 0)
    rows = np.arange(tf.size)
    nll = -logp[rows, safe]
    if label_smoothing > 0.0:
        per_pos = (1.0 - label_smoothing) * nll - (label_smoothing / n_vocab) * logp.sum(axis=-1)
    else:
        per_pos = nll
    vmask = valid.astype(ld.dtype)
    out = np.asarray((per_pos * vmask).sum() / n_valid, dtype=ld.dtype)

    def bw(g):
        grad = np.exp(logp)
        if label_smoothing > 0.0:
            grad[rows, safe] -= 1.0 - label_smoothing
            grad -= label_smoothing / n_vocab
        else:
            grad[rows, safe] -= 1.0
        grad *= (vmask * (g / n_valid))[:, None]
        _accum(logits, grad.reshape(ld.shape))

    return _finish(out, (logits,), bw)


def nll_loss(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean -log softmax(logits)[target] over non-pad positions."""
    return cross_entropy(logits, targets, pad_id, 0.0)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one keep mask from rng per call."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    return mul(x, Tensor(keep / (1.0 - rate)))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class FiniteDifferenceReport:
    passed: bool
    max_rel_err: float
    n_checked: int
    tol: float
    per_input: list[float] = field(default_factory=list)
    worst: tuple[int, int, float, float] | None = None  # input idx, flat idx, analytic, numeric

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"fd-check {status}: max rel err {self.max_rel_err:.3e} over {self.n_checked} coords (tol {self.tol:.1e})"


def finite_difference_check(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of scalar f against central differences.

    f receives len(point) float64 tensors with requires_grad set and must
    return a scalar Tensor.  Every coordinate is perturbed by +-h unless
    max_coords caps the (seeded, deterministic) sample.  The error measure is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-2), i.e. relative
    with an absolute floor so that tiny true gradients do not amplify
    finite-difference noise.
    """
    inputs = [Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in point]
    with Tape() as tape:
        loss = f(*inputs)
    backward(tape, loss)
    analytic = [np.array(t.grad, copy=True) for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in sorted(picked)]

    max_err = 0.0
    per_input = [0.0] * len(inputs)
    worst = None
    for i, j in coords:
        orig = inputs[i].data.flat[j]
        inputs[i].data.flat[j] = orig + h
        lo_plus = float(f(*inputs).data)
        inputs[i].data.flat[j] = orig - h
        lo_minus = float(f(*inputs).data)
        inputs[i].data.flat[j] = orig
        numeric = (lo_plus - lo_minus) / (2.0 * h)
        ana = float(analytic[i].flat[j])
        err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-2)
        per_input[i] = max(per_input[i], err)
        if err > max_err:
            max_err = err
            worst = (i, j, ana, numeric)
    return FiniteDifferenceReport(
        passed=max_err <= tol,
        max_rel_err=max_err,
        n_checked=len(coords),
        tol=tol,
        per_input=per_input,
        worst=worst,
    )
