"""Dense tensor substrate for small CNN forward passes.

Activations and kernels are immutable float64 arrays wrapped in :class:`Tensor`
(weights are stored at float32 precision by the modules that own them, so the
binary weight archive round-trips exactly; arithmetic runs in float64). All
operations are pure functions returning new tensors and are safe to call from
multiple threads. The one mutable object is :class:`OpCounter`, which tallies
elementary operations so measured costs can be compared against closed-form
estimates.

Counting conventions, one unit per elementary scalar operation:

* ``conv2d``            multiply_adds += C_out*H_out*W_out*(C_in/groups)*kh*kw
* ``pool_spatial`` max  comparisons += (in-bounds window elements - 1) per output
* ``pool_spatial`` avg  multiply_adds += in-bounds window elements per output
                        (each element is accumulated as x * 1/n)
* ``pool_directional``  additions += length-1 per reduced line,
                        multiply_adds += 1 per output element (the divide)
* ``channel_shuffle``   memory_moves += C
* ``softmax``           comparisons += n-1, additions += 2n-1,
                        multiply_adds += n per slice of length n
                        (exponentials are not tallied in any field)
* ``matmul``            multiply_adds += m*n*k
* ``relu``              comparisons += element count
* ``sigmoid``           multiply_adds += element count (the reciprocal;
                        the exponential is not tallied)
* ``add`` / ``scale_channels``  additions / multiply_adds += element count
* ``concat_channels`` / ``upsample_nearest``  memory_moves += output elements
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "OpCounter",
    "scope",
    "conv2d",
    "conv1d",
    "pool_spatial",
    "pool_directional",
    "channel_shuffle",
    "shuffle_permutation",
    "softmax",
    "matmul",
    "relu",
    "sigmoid",
    "add",
    "scale_channels",
    "concat_channels",
    "global_average",
    "upsample_nearest",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """Immutable dense array, rank 1..4, channel-major / row-major layout.

    Rank-3 tensors are feature maps (C, H, W); rank-4 tensors are convolution
    kernels (out, in-per-group, kh, kw). Construction copies the input and
    freezes the buffer.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim < 1 or arr.ndim > 4:
            raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of arr; callers must not keep a writable reference
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(t, "data", arr)
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape)))

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls._wrap(np.full(tuple(shape), float(value)))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __getitem__(self, idx):
        return self.data[idx]

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class OpCounter:
    """Tally of elementary operations observed during forward passes.

    Fields only ever increase between resets. Increments are lock-guarded, so
    one counter may be shared across threads; independent per-thread counters
    can also be combined with :meth:`merge`.
    """

    __slots__ = ("multiply_adds", "comparisons", "additions", "memory_moves", "_lock")

    def __init__(self):
        self._lock = threading.Lock()
        self.multiply_adds = 0
        self.comparisons = 0
        self.additions = 0
        self.memory_moves = 0

    def count(self, *, macs: int = 0, comparisons: int = 0, additions: int = 0, moves: int = 0) -> None:
        if macs < 0 or comparisons < 0 or additions < 0 or moves < 0:
            raise ValueError("operation counts cannot decrease")
        with self._lock:
            self.multiply_adds += int(macs)
            self.comparisons += int(comparisons)
            self.additions += int(additions)
            self.memory_moves += int(moves)

    def reset(self) -> None:
        with self._lock:
            self.multiply_adds = 0
            self.comparisons = 0
            self.additions = 0
            self.memory_moves = 0

    def merge(self, other: "OpCounter") -> None:
        snap = other.snapshot()
        self.count(
            macs=snap["multiply_adds"],
            comparisons=snap["comparisons"],
            additions=snap["additions"],
            moves=snap["memory_moves"],
        )

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "multiply_adds": self.multiply_adds,
                "comparisons": self.comparisons,
                "additions": self.additions,
                "memory_moves": self.memory_moves,
            }

    def total(self) -> int:
        with self._lock:
            return self.multiply_adds + self.comparisons + self.additions + self.memory_moves

    def __repr__(self) -> str:
        s = self.snapshot()
        return (
            f"OpCounter(macs={s['multiply_adds']}, cmp={s['comparisons']}, "
            f"add={s['additions']}, moves={s['memory_moves']})"
        )


class CounterScope:
    """Context manager scoping one module invocation's tally.

    Yields the counter the module should use. When ``stats`` is given, a local
    counter is used and merged into both ``stats[path]`` and the global
    counter on exit, so per-module breakdowns and the grand total stay
    consistent.
    """

    def __init__(self, stats: dict | None, counter: OpCounter | None, path: str):
        self._stats = stats
        self._counter = counter
        self._path = path
        self._local = None

    def __enter__(self) -> OpCounter | None:
        if self._stats is None:
            return self._counter
        self._local = OpCounter()
        return self._local

    def __exit__(self, exc_type, exc, tb):
        if self._stats is not None and exc_type is None:
            self._stats.setdefault(self._path, OpCounter()).merge(self._local)
            if self._counter is not None:
                self._counter.merge(self._local)
        return False


def scope(stats: dict | None, counter: OpCounter | None, path: str) -> CounterScope:
    return CounterScope(stats, counter, path)


def _tally(counter: OpCounter | None, **kwargs) -> None:
    if counter is not None:
        counter.count(**kwargs)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pad_pair(padding) -> tuple:
    if isinstance(padding, tuple) or isinstance(padding, list):
        ph, pw = padding
    else:
        ph = pw = padding
    ph, pw = int(ph), int(pw)
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be non-negative, got {(ph, pw)}")
    return ph, pw


def conv2d(x: Tensor, kernel: Tensor, *, stride: int = 1, padding=0, groups: int = 1,
           counter: OpCounter | None = None) -> Tensor:
    """Grouped 2-D convolution (cross-correlation) with zero padding.

    ``x`` is (C_in, H, W); ``kernel`` is (C_out, C_in/groups, kh, kw).
    ``padding`` is an int or an (ph, pw) pair. ``stride`` must be 1 or 2.
    """
    xa, ka = _as_array(x), _as_array(kernel)
    if xa.ndim != 3:
        raise ShapeError(f"conv2d input must be rank 3, got {xa.ndim}")
    if ka.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {ka.ndim}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if groups < 1:
        raise ShapeError(f"groups must be positive, got {groups}")
    c_in, h, w = xa.shape
    c_out, c_in_g, kh, kw = ka.shape
    if c_in % groups != 0:
        raise ShapeError(f"input channels {c_in} not divisible by groups {groups}")
    if c_out % groups != 0:
        raise ShapeError(f"kernel out-channels {c_out} not divisible by groups {groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"kernel expects {c_in_g} channels per group, input provides {c_in // groups}")
    ph, pw = _pad_pair(padding)
    out_h = (h + 2 * ph - kh) // stride + 1
    out_w = (w + 2 * pw - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.zeros((c_in, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = xa
    out = np.zeros((c_out, out_h, out_w))
    if groups == c_in and c_out == c_in:
        # depthwise fast path
        for dy in range(kh):
            for dx in range(kw):
                win = xp[:, dy:dy + stride * out_h:stride, dx:dx + stride * out_w:stride]
                out += ka[:, 0, dy, dx][:, None, None] * win
    else:
        per_in = c_in // groups
        per_out = c_out // groups
        for g in range(groups):
            xg = xp[g * per_in:(g + 1) * per_in]
            wg = ka[g * per_out:(g + 1) * per_out]
            og = out[g * per_out:(g + 1) * per_out]
            for dy in range(kh):
                for dx in range(kw):
                    win = xg[:, dy:dy + stride * out_h:stride, dx:dx + stride * out_w:stride]
                    og += np.einsum("oi,ihw->ohw", wg[:, :, dy, dx], win)
    _tally(counter, macs=c_out * out_h * out_w * (c_in // groups) * kh * kw)
    return Tensor._wrap(out)


def conv1d(vec: np.ndarray, kernel: np.ndarray, *, counter: OpCounter | None = None) -> np.ndarray:
    """1-D same-size convolution over a channel descriptor, zero padded."""
    v = np.asarray(vec, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if v.ndim != 1 or k.ndim != 1:
        raise ShapeError("conv1d operates on rank-1 arrays")
    n, ks = v.size, k.size
    if ks % 2 != 1:
        raise ShapeError(f"conv1d kernel size must be odd, got {ks}")
    if n < ks:
        raise ShapeError(f"descriptor length {n} shorter than kernel {ks}")
    pad = ks // 2
    vp = np.zeros(n + 2 * pad)
    vp[pad:pad + n] = v
    out = np.zeros(n)
    for j in range(ks):
        out += k[j] * vp[j:j + n]
    _tally(counter, macs=n * ks)
    return out


def _window_counts(h: int, w: int, k: int, stride: int, ph: int, pw: int) -> np.ndarray:
    ones = np.zeros((h + 2 * ph, w + 2 * pw))
    ones[ph:ph + h, pw:pw + w] = 1.0
    win = np.lib.stride_tricks.sliding_window_view(ones, (k, k))
    return win[::stride, ::stride].sum(axis=(2, 3))


def pool_spatial(x: Tensor, kind: str, k: int, *, stride: int = 1, padding: int = 0,
                 counter: OpCounter | None = None) -> Tensor:
    """Per-channel window pooling. ``kind`` is "max" or "avg".

    Zero padding; padded positions are excluded from max windows, and avg
    divides by the in-bounds element count. ``padding`` must not exceed
    ``k // 2`` so no window is entirely padding.
    """
    xa = _as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"pool_spatial input must be rank 3, got {xa.ndim}")
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if k < 1 or stride < 1:
        raise ShapeError(f"window {k} and stride {stride} must be positive")
    if padding < 0 or padding > k // 2:
        raise ShapeError(f"padding must be in [0, k//2], got {padding}")
    c, h, w = xa.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    fill = -np.inf if kind == "max" else 0.0
    xp = np.full((c, h + 2 * padding, w + 2 * padding), fill)
    xp[:, padding:padding + h, padding:padding + w] = xa
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    counts = _window_counts(h, w, k, stride, padding, padding)
    if kind == "max":
        out = win.max(axis=(3, 4))
        _tally(counter, comparisons=int(c * (counts - 1).sum()))
    else:
        out = win.sum(axis=(3, 4)) / counts
        _tally(counter, macs=int(c * counts.sum()))
    return Tensor._wrap(out)


def pool_directional(x: Tensor, axis: str, *, counter: OpCounter | None = None) -> Tensor:
    """Mean-reduce a feature map along one spatial direction.

    "horizontal" averages over width, giving (C, H, 1): one token per row.
    "vertical" averages over height, giving (C, 1, W): one token per column.
    """
    xa = _as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"pool_directional input must be rank 3, got {xa.ndim}")
    c, h, w = xa.shape
    if axis == "horizontal":
        out = xa.mean(axis=2, keepdims=True)
        _tally(counter, additions=c * h * (w - 1), macs=c * h)
    elif axis == "vertical":
        out = xa.mean(axis=1, keepdims=True)
        _tally(counter, additions=c * w * (h - 1), macs=c * w)
    else:
        raise ShapeError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return Tensor._wrap(out)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Index array for the group-transpose channel shuffle.

    Channels are viewed as a groups x (channels/groups) matrix; the output
    order is its transpose flattened. ``out[c] = in[perm[c]]``.
    """
    if groups < 1:
        raise ShapeError(f"groups must be positive, got {groups}")
    if channels % groups != 0:
        raise ShapeError(f"channels {channels} not divisible by groups {groups}")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def channel_shuffle(x: Tensor, groups: int, *, counter: OpCounter | None = None) -> Tensor:
    """Deterministic channel permutation enabling cross-group information flow."""
    xa = _as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"channel_shuffle input must be rank 3, got {xa.ndim}")
    perm = shuffle_permutation(xa.shape[0], groups)
    _tally(counter, moves=xa.shape[0])
    return Tensor._wrap(xa[perm].copy())


def softmax(x, *, axis: int = -1, counter: OpCounter | None = None):
    """Numerically stable softmax along ``axis`` (max-subtracted).

    Accepts a Tensor or ndarray and returns the same kind. Rejects non-finite
    input.
    """
    xa = _as_array(x)
    if not np.isfinite(xa).all():
        raise ValueError("softmax input must be finite")
    shifted = xa - xa.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    n = xa.shape[axis]
    slices = xa.size // n
    _tally(counter, comparisons=slices * (n - 1), additions=slices * (2 * n - 1), macs=slices * n)
    return Tensor._wrap(out) if isinstance(x, Tensor) else out


def matmul(a: np.ndarray, b: np.ndarray, *, counter: OpCounter | None = None) -> np.ndarray:
    """Counted 2-D matrix product (the attention primitive)."""
    aa, ba = _as_array(a), _as_array(b)
    if aa.ndim != 2 or ba.ndim != 2:
        raise ShapeError("matmul operates on rank-2 arrays")
    if aa.shape[1] != ba.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {aa.shape} @ {ba.shape}")
    _tally(counter, macs=aa.shape[0] * ba.shape[1] * aa.shape[1])
    return aa @ ba


def relu(x: Tensor, *, counter: OpCounter | None = None) -> Tensor:
    xa = _as_array(x)
    _tally(counter, comparisons=xa.size)
    return Tensor._wrap(np.maximum(xa, 0.0))


def sigmoid(x, *, counter: OpCounter | None = None):
    xa = _as_array(x)
    out = 1.0 / (1.0 + np.exp(-xa))
    _tally(counter, macs=xa.size)
    return Tensor._wrap(out) if isinstance(x, Tensor) else out


def add(a: Tensor, b: Tensor, *, counter: OpCounter | None = None) -> Tensor:
    aa, ba = _as_array(a), _as_array(b)
    if aa.shape != ba.shape:
        raise ShapeError(f"elementwise add shapes disagree: {aa.shape} vs {ba.shape}")
    _tally(counter, additions=aa.size)
    return Tensor._wrap(aa + ba)


def scale_channels(x: Tensor, scales: np.ndarray, *, counter: OpCounter | None = None) -> Tensor:
    """Multiply each channel of a (C, H, W) tensor by a per-channel scalar."""
    xa = _as_array(x)
    s = np.asarray(scales, dtype=np.float64)
    if xa.ndim != 3 or s.ndim != 1 or s.size != xa.shape[0]:
        raise ShapeError(f"need one scale per channel: tensor {xa.shape}, scales {s.shape}")
    _tally(counter, macs=xa.size)
    return Tensor._wrap(xa * s[:, None, None])


def concat_channels(parts: Iterable[Tensor], *, counter: OpCounter | None = None) -> Tensor:
    arrs = [_as_array(p) for p in parts]
    if not arrs:
        raise ShapeError("concat_channels needs at least one tensor")
    for a in arrs:
        if a.ndim != 3 or a.shape[1:] != arrs[0].shape[1:]:
            raise ShapeError("concat_channels requires matching spatial dims")
    out = np.concatenate(arrs, axis=0)
    _tally(counter, moves=out.size)
    return Tensor._wrap(out)


def global_average(x: Tensor, *, counter: OpCounter | None = None) -> np.ndarray:
    """Spatial mean per channel: (C, H, W) -> (C,)."""
    xa = _as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"global_average input must be rank 3, got {xa.ndim}")
    c, h, w = xa.shape
    _tally(counter, additions=c * (h * w - 1), macs=c)
    return xa.mean(axis=(1, 2))


def upsample_nearest(x: Tensor, factor: int, *, counter: OpCounter | None = None) -> Tensor:
    xa = _as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"upsample input must be rank 3, got {xa.ndim}")
    if factor < 1:
        raise ShapeError(f"factor must be positive, got {factor}")
    out = xa.repeat(factor, axis=1).repeat(factor, axis=2)
    _tally(counter, moves=out.size)
    return Tensor._wrap(out)
