"""Pooled-token cross-attention and channel attention.

:class:`SparseCrossAttention` relates two feature maps through H+W directional
pooled tokens instead of H*W pixels, so its cost grows with (H+W)*(h+w) rather
than (H*W)*(h*w). It stores no learned weights. :class:`EcaAttention` is the
standard efficient channel attention (global average pool, small 1-D conv over
the channel descriptor, sigmoid gate). :class:`JointBlock` composes them,
channel first, then spatial, with a residual add so an uninformative attention
map degrades towards identity.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    OpCounter,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv1d,
    global_average,
    matmul,
    pool_directional,
    pool_spatial,
    sigmoid,
    softmax,
)

__all__ = ["SparseCrossAttention", "EcaAttention", "JointBlock", "adaptive_kernel_size"]


class SparseCrossAttention:
    """Parameter-free spatial attention between two feature maps.

    Token construction for a (C, H, W) map: per-channel spatial max and avg
    pooling (window ``pool_k``, stride 1, same padding) are concatenated into a
    2C-channel map, which is mean-pooled along each direction. The H row tokens
    and W column tokens, each of 2C elements, stack into an (H+W) x 2C matrix.

    ``forward(a, b)`` lets every token of ``b`` attend over all of ``a``'s
    tokens (softmax over a's tokens), broadcasts the enhanced row/column tokens
    back over b's grid, adds them pixel-wise, and folds the 2C channels to C by
    averaging the max-derived and avg-derived halves. The result has b's shape.
    """

    def __init__(self, pool_k: int = 3):
        if pool_k < 1 or pool_k % 2 != 1:
            raise ShapeError(f"pool window must be odd and positive, got {pool_k}")
        self.pool_k = pool_k

    def tokens(self, x: Tensor, counter: OpCounter | None = None) -> np.ndarray:
        """Directional pooled tokens of one map: (H+W, 2C)."""
        if x.ndim != 3:
            raise ShapeError(f"expected a rank-3 feature map, got rank {x.ndim}")
        k = self.pool_k
        mx = pool_spatial(x, "max", k, stride=1, padding=k // 2, counter=counter)
        av = pool_spatial(x, "avg", k, stride=1, padding=k // 2, counter=counter)
        f = concat_channels([mx, av], counter=counter)
        th = pool_directional(f, "horizontal", counter=counter)  # (2C, H, 1)
        tv = pool_directional(f, "vertical", counter=counter)    # (2C, 1, W)
        toks = np.concatenate([th.data[:, :, 0].T, tv.data[:, 0, :].T], axis=0)
        if counter is not None:
            counter.count(moves=toks.size)
        return toks

    def attend(self, tokens_a: np.ndarray, tokens_b: np.ndarray,
               counter: OpCounter | None = None, *,
               softmax_counter: OpCounter | None = None):
        """Attention weights and enhanced tokens.

        Returns ``(weights, enhanced)`` where ``weights`` is (Nb, Na) with each
        row a probability vector over a's tokens, and ``enhanced`` is (Nb, 2C).
        ``softmax_counter``, when given, receives the row-normalisation tally
        separately from the dot-product multiply-adds.
        """
        ta = np.asarray(tokens_a, dtype=np.float64)
        tb = np.asarray(tokens_b, dtype=np.float64)
        if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[1]:
            raise ShapeError(f"token widths disagree: {ta.shape} vs {tb.shape}")
        logits = matmul(tb, ta.T, counter=counter)
        weights = softmax(logits, axis=1,
                          counter=softmax_counter if softmax_counter is not None else counter)
        enhanced = matmul(weights, ta, counter=counter)
        return weights, enhanced

    def expand(self, enhanced: np.ndarray, channels: int, h: int, w: int,
               counter: OpCounter | None = None) -> Tensor:
        """Broadcast enhanced tokens over an h x w grid and fold 2C -> C."""
        e = np.asarray(enhanced, dtype=np.float64)
        two_c = 2 * channels
        if e.shape != (h + w, two_c):
            raise ShapeError(f"expected {(h + w, two_c)} enhanced tokens, got {e.shape}")
        rows = np.broadcast_to(e[:h].T[:, :, None], (two_c, h, w))
        cols = np.broadcast_to(e[h:].T[:, None, :], (two_c, h, w))
        combined = rows + cols
        folded = 0.5 * (combined[:channels] + combined[channels:])
        if counter is not None:
            counter.count(moves=2 * two_c * h * w,
                          additions=two_c * h * w + channels * h * w,
                          macs=channels * h * w)
        return Tensor._wrap(folded)

    def forward(self, a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
        if a.ndim != 3 or b.ndim != 3:
            raise ShapeError("attention inputs must be rank-3 feature maps")
        if a.shape[0] != b.shape[0]:
            raise ShapeError(
                f"channel counts disagree: a has {a.shape[0]}, b has {b.shape[0]}")
        toks_a = self.tokens(a, counter)
        toks_b = self.tokens(b, counter)
        _, enhanced = self.attend(toks_a, toks_b, counter)
        _, h, w = b.shape
        return self.expand(enhanced, b.shape[0], h, w, counter)

    def parameter_items(self):
        return []  # stores no learned weights

    def param_count(self) -> int:
        return 0


def adaptive_kernel_size(channels: int) -> int:
    """Channel-adaptive 1-D kernel size: nearest odd to |log2(C)/2 + 1/2|, floor 3."""
    if channels < 1:
        raise ShapeError(f"channels must be positive, got {channels}")
    t = abs(math.log2(channels) / 2.0 + 0.5)
    nearest_odd = int(2 * round((t - 1) / 2) + 1)
    return max(3, nearest_odd)


class EcaAttention:
    """Efficient channel attention: gap -> 1-D conv -> sigmoid gate -> rescale."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 kernel: np.ndarray | None = None, kernel_size: int | None = None):
        self.channels = channels
        k = kernel_size if kernel_size is not None else adaptive_kernel_size(channels)
        if kernel is not None:
            kernel = np.asarray(kernel, dtype=np.float64)
            k = kernel.size
        if k % 2 != 1 or k < 3:
            raise ShapeError(f"kernel size must be odd and >= 3, got {k}")
        if channels < k:
            raise ShapeError(f"channel count {channels} smaller than kernel {k}")
        if kernel is None:
            if rng is None:
                raise ValueError("EcaAttention needs either a kernel or an rng")
            bound = 1.0 / math.sqrt(k)
            kernel = rng.uniform(-bound, bound, k).astype(np.float32).astype(np.float64)
        self.kernel = kernel

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise ShapeError(f"expected {self.channels} input channels, got {x.shape}")
        desc = global_average(x, counter=counter)
        gates = sigmoid(conv1d(desc, self.kernel, counter=counter), counter=counter)
        if counter is not None:
            counter.count(macs=x.size)
        return Tensor._wrap(x.data * gates[:, None, None])

    def parameter_items(self):
        return [("kernel", self.kernel)]

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name != "kernel":
            raise KeyError(f"eca has no parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.kernel.shape:
            raise ShapeError(f"kernel: expected shape {self.kernel.shape}, got {value.shape}")
        self.kernel = value

    def param_count(self) -> int:
        return int(self.kernel.size)


class JointBlock:
    """Channel-then-spatial attention between an upstream map and a local map.

    ``forward(a, b)`` gates ``b``'s channels, cross-attends the gated map
    against ``a``, and adds ``b`` back residually; the output keeps b's shape.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None, *,
                 pool_k: int = 3, eca_kernel: np.ndarray | None = None):
        self.channels = channels
        self.eca = EcaAttention(channels, rng=rng, kernel=eca_kernel)
        self.sca = SparseCrossAttention(pool_k)

    def forward(self, a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
        gated = self.eca.forward(b, counter)
        enhanced = self.sca.forward(a, gated, counter)
        return add(enhanced, b, counter=counter)

    def parameter_items(self):
        return [("eca.kernel", self.eca.kernel)]

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name != "eca.kernel":
            raise KeyError(f"joint block has no parameter {name!r}")
        self.eca.set_parameter("kernel", value)

    def param_count(self) -> int:
        return self.eca.param_count() + self.sca.param_count()
