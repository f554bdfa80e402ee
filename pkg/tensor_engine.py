"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op computes its output with numpy, checks it is finite, and (when a
``Tape`` is active and some input requires a gradient) records a node holding
the inputs and a vector-Jacobian closure. ``backward`` sweeps the recorded
nodes in reverse and accumulates gradients additively across fan-out.
"""

import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config
from exceptions import ConfigurationError, DimensionError, NumericalError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


class Tensor:
    """Immutable n-dimensional float64 array that can take part in a Tape"""

    __slots__ = ("data", "requires_grad", "tape_id", "name", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"Tensor extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.tape_id = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying values"""
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, vjp: VJP):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of the ops of one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded here. A tape serves exactly one forward/backward pass.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._produced: Dict[int, Tensor] = {}
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, vjp: VJP) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        output.tape_id = len(self.nodes)
        self._produced[id(output)] = output
        self.nodes.append(_Node(op, inputs, output, vjp))

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def grad(self, tensor: Tensor) -> Optional[Tensor]:
        """Accumulated gradient of a leaf after ``backward``"""
        g = self.gradients.get(id(tensor))
        return None if g is None else Tensor._wrap(g, requires_grad=False)


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(data)):
        logger.error(f"Non-finite values produced by {op}")
        raise NumericalError(f"{op} produced non-finite values (overflow or invalid input)")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad)
    if requires_grad:
        tape = current_tape()
        if tape is not None:
            tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _make("scale", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log_clamped(x: Tensor, floor: float = Config.LOG_CLAMP) -> Tensor:
    """Natural log of max(x, floor); gradient is zero where the clamp is active"""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    active = x.data > floor

    def vjp(g):
        return (np.where(active, g / clamped, 0.0),)

    return _make("log", np.log(clamped), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    y = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.full(x.shape, float(g.reshape(-1)[0])),)
        g = g.reshape(y.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", y, (x,), vjp)


def reduce_mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 0, preserving operand order"""
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat_rows needs at least one operand")
    trailing = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != trailing:
            raise DimensionError(f"concat_rows: trailing extents {p.shape[1:]} != {trailing}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}, {stop}) outside {x.shape[0]} rows")

    def vjp(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", x.data[start:stop], (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n); leading axes broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: batch extents differ ({a.shape} @ {b.shape})") from e

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", y, (a, b), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), vjp)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, block_rows: int = Config.ATTENTION_BLOCK_ROWS) -> Tensor:
    """softmax(q kᵀ / √d) v per head; q (h, Nq, d), k (h, Nk, d), v (h, Nk, dv) -> (h, Nq, dv).

    Query rows are processed ``block_rows`` at a time so the (Nq, Nk) score
    matrix never exists whole; the backward pass recomputes each block's
    probabilities from the stored per-row log-normaliser.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError(f"attention expects (h, N, d) operands, got {q.shape}, {k.shape}, {v.shape}")
    heads, nq, d = q.shape
    if k.shape[0] != heads or v.shape[0] != heads or k.shape[2] != d or v.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if block_rows < 1:
        raise ConfigurationError(f"attention: block_rows must be positive, got {block_rows}")
    factor = 1.0 / np.sqrt(d)
    kt = np.swapaxes(k.data, 1, 2)
    blocks = [(start, min(start + block_rows, nq)) for start in range(0, nq, block_rows)]

    def probabilities(start: int, stop: int, shift: np.ndarray) -> np.ndarray:
        p = np.matmul(q.data[:, start:stop], kt)
        p *= factor
        p -= shift
        np.exp(p, out=p)
        return p

    out = np.empty((heads, nq, v.shape[2]))
    log_norm = np.empty((heads, nq, 1))
    for start, stop in blocks:
        scores = np.matmul(q.data[:, start:stop], kt)
        scores *= factor
        peak = scores.max(axis=-1, keepdims=True)
        scores -= peak
        np.exp(scores, out=scores)
        total = scores.sum(axis=-1, keepdims=True)
        scores /= total
        out[:, start:stop] = np.matmul(scores, v.data)
        log_norm[:, start:stop] = peak + np.log(total)

    def vjp(g):
        gq = np.empty(q.shape) if q.requires_grad else None
        gk = np.zeros(k.shape) if k.requires_grad else None
        gv = np.zeros(v.shape) if v.requires_grad else None
        for start, stop in blocks:
            p = probabilities(start, stop, log_norm[:, start:stop])
            g_blk = g[:, start:stop]
            if gv is not None:
                gv += np.matmul(np.swapaxes(p, 1, 2), g_blk)
            # row-wise Σ_j dP_ij P_ij equals g_i · out_i
            dp = np.matmul(g_blk, np.swapaxes(v.data, 1, 2))
            dp -= (g_blk * out[:, start:stop]).sum(axis=-1, keepdims=True)
            dp *= p
            dp *= factor
            if gq is not None:
                gq[:, start:stop] = np.matmul(dp, k.data)
            if gk is not None:
                gk += np.matmul(np.swapaxes(dp, 1, 2), q.data[:, start:stop])
        return gq, gk, gv

    return _make("attention", out, (q, k, v), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = Config.LAYER_NORM_EPS) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then apply gain and bias"""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    channels = x.shape[-1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({channels},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    y = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dxhat = g * gain.data
        gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _make("layer_norm", y, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# convolution and pooling; feature maps are channel-last (..., H, W, C)
# ---------------------------------------------------------------------------

def _conv_windows(padded: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    b, _, _, cin = padded.shape
    s = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, out_h, out_w, kh, kw, cin),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of [B×]H×W×Cin maps with kh×kw×Cin×Cout kernels"""
    x, kernels = as_tensor(x), as_tensor(kernels)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected [B×]H×W×C input and 4-d kernels, got {x.shape}, {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel extents must be odd, got {kh}×{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride {stride} / padding {padding}")
    data = x.data if batched else x.data[None]
    b, h, w, c = data.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {cin}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d: output extent ({h}+2·{padding}−{kh})/{stride}+1 is not a positive integer")
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _conv_windows(padded, kh, kw, stride, out_h, out_w).reshape(b * out_h * out_w, kh * kw * cin)
    k2d = kernels.data.reshape(kh * kw * cin, cout)
    y = (cols @ k2d).reshape(b, out_h, out_w, cout)

    def vjp(g):
        g2d = g.reshape(b * out_h * out_w, cout)
        gk = (cols.T @ g2d).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2d @ k2d.T).reshape(b, out_h, out_w, kh, kw, cin)
            gpad = np.zeros(padded.shape)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, padding:padding + h, padding:padding + w, :]
            if not batched:
                gx = gx[0]
        return gx, gk

    return _make("conv2d", y if batched else y[0], (x, kernels), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (..., H, W, C) -> (..., C); this is ω"""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    y = x.data.mean(axis=(-3, -2))

    def vjp(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), x.shape).copy(),)

    return _make("global_avg_pool", y, (x,), vjp)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size×size mean pooling of (..., H, W, C) maps"""
    x = as_tensor(x)
    h, w, c = x.shape[-3:]
    if h % size or w % size:
        raise ConfigurationError(f"avg_pool2d: extents {h}×{w} not divisible by {size}")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (h // size, size, w // size, size, c))
    n = len(lead)
    y = blocks.mean(axis=(n + 1, n + 3))

    def vjp(g):
        spread = np.repeat(np.repeat(g, size, axis=-3), size, axis=-2)
        return (spread / (size * size),)

    return _make("avg_pool2d", y, (x,), vjp)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; fills ``tape.gradients`` for every leaf"""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise UsageError("loss was not produced on this tape (no path from any requires_grad leaf)")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.array(gi, dtype=np.float64)
    tape.gradients = {
        key: grads.get(key, np.zeros(leaf.shape)).reshape(leaf.shape)
        for key, leaf in tape._leaves.items()
    }
    logger.debug(f"Backward pass over {len(tape.nodes)} nodes, {len(tape.gradients)} leaves")
    return tape.gradients


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor],
                      params: Sequence[Tensor],
                      step: float = Config.FINITE_DIFF_STEP,
                      coordinates: Optional[Sequence[Tuple[int, int]]] = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors (same order as ``params``) to a scalar.
    ``coordinates`` restricts the check to (param index, flat index) pairs;
    by default every coordinate of every parameter is checked.
    """
    leaves = [Tensor(p.data, requires_grad=True) for p in params]
    with Tape() as tape:
        loss = f(leaves)
    backward(tape, loss)
    analytic = [tape.gradients.get(id(leaf), np.zeros(leaf.shape)).reshape(-1) for leaf in leaves]

    if coordinates is None:
        coordinates = [(i, j) for i, p in enumerate(params) for j in range(p.size)]

    def evaluate(index: int, flat: int, delta: float) -> float:
        values = [p.data for p in params]
        moved = values[index].copy().reshape(-1)
        moved[flat] += delta
        values[index] = moved.reshape(params[index].shape)
        return f([Tensor(v) for v in values]).item()

    worst = 0.0
    for index, flat in coordinates:
        numeric = (evaluate(index, flat, step) - evaluate(index, flat, -step)) / (2 * step)
        worst = max(worst, relative_error(float(analytic[index][flat]), numeric))
    return worst
