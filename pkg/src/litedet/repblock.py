"""Multi-branch depthwise blocks with exact single-kernel fusion.

The trainable form splits the channels into three equal groups and filters
them with depthwise 1x3, 3x1 and 3x3 kernels, scales each branch by a
learnable per-channel weight, concatenates, adds the residual (stride-1
blocks only) and applies a group-transpose channel shuffle. Because every
step is linear, the whole block collapses into one depthwise 3x3 kernel per
channel plus a stored permutation; :meth:`RepDWBlock.fuse` performs that
collapse exactly.

Two activation placements exist:

* ``"linear"`` (default) - no nonlinearity inside the block, so fusion is an
  exact algebraic identity. Stacked networks insert a ReLU *between* blocks
  instead (see :class:`RepBackbone`), keeping one activation per block while
  leaving the fused region linear.
* ``"branch-relu"`` - a ReLU after each branch convolution and again after
  the branch weighting. This form is not fusible; :meth:`fuse` rejects it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    OpCounter,
    ShapeError,
    Tensor,
    add,
    channel_shuffle,
    conv2d,
    concat_channels,
    relu,
    scale_channels,
    shuffle_permutation,
)

__all__ = [
    "FusionError",
    "ModeError",
    "RepDWBlock",
    "StageConfig",
    "TransitionConv",
    "RepBackbone",
]

BRANCH_GROUPS = 3
ACTIVATIONS = ("linear", "branch-relu")

# (kh, kw) and padding per branch; all three preserve spatial dims at stride 1
# and agree on ceil(dim/2) at stride 2, so group outputs always concatenate.
_BRANCH_SHAPES = (((1, 3), (0, 1)), ((3, 1), (1, 0)), ((3, 3), (1, 1)))
_PARAM_NAMES_TRAIN = (
    "kernel_1x3", "kernel_3x1", "kernel_3x3",
    "scale_1x3", "scale_3x1", "scale_3x3",
)
_PARAM_NAMES_FUSED = ("fused_kernel", "fused_bias")


class FusionError(RuntimeError):
    """Raised when a block cannot be collapsed into a single kernel."""


class ModeError(RuntimeError):
    """Raised when a forward is invoked on a block in the wrong form."""


def _f32_uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    # weights live at float32 precision so archives round-trip bit-exactly;
    # arithmetic still runs in float64
    return rng.uniform(-bound, bound, shape).astype(np.float32).astype(np.float64)


class RepDWBlock:
    """One basic (stride 1) or downsampling (stride 2) depthwise block."""

    def __init__(self, channels: int, *, stride: int = 1, shuffle_groups: int = 3,
                 activation: str = "linear",
                 kernels: Sequence[np.ndarray] | None = None,
                 scales: Sequence[np.ndarray] | None = None,
                 fused_kernel: np.ndarray | None = None,
                 fused_bias: np.ndarray | None = None):
        if channels % BRANCH_GROUPS != 0:
            raise ShapeError(f"channels {channels} not divisible by {BRANCH_GROUPS}")
        if channels % shuffle_groups != 0:
            raise ShapeError(f"channels {channels} not divisible by shuffle groups {shuffle_groups}")
        if stride not in (1, 2):
            raise ShapeError(f"stride must be 1 (basic) or 2 (downsampling), got {stride}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.channels = channels
        self.stride = stride
        self.shuffle_groups = shuffle_groups
        self.activation = activation
        self.permutation = shuffle_permutation(channels, shuffle_groups)

        fused_given = fused_kernel is not None
        if fused_given:
            if kernels is not None or scales is not None:
                raise ValueError("a block holds either branch kernels or a fused kernel, not both")
            fk = np.asarray(fused_kernel, dtype=np.float64)
            if fk.shape != (channels, 1, 3, 3):
                raise ShapeError(f"fused kernel must be ({channels}, 1, 3, 3), got {fk.shape}")
            fb = np.zeros(channels) if fused_bias is None else np.asarray(fused_bias, dtype=np.float64)
            if fb.shape != (channels,):
                raise ShapeError(f"fused bias must be ({channels},), got {fb.shape}")
            self.kernels = None
            self.scales = None
            self.fused_kernel = fk
            self.fused_bias = fb
            return

        g = channels // BRANCH_GROUPS
        if kernels is None:
            kernels = [np.zeros((g, 1, kh, kw)) for (kh, kw), _ in _BRANCH_SHAPES]
        if scales is None:
            scales = [np.ones(g) for _ in range(BRANCH_GROUPS)]
        kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        scales = [np.asarray(s, dtype=np.float64) for s in scales]
        for i, (k, ((kh, kw), _)) in enumerate(zip(kernels, _BRANCH_SHAPES)):
            if k.shape != (g, 1, kh, kw):
                raise ShapeError(f"branch {i} kernel must be ({g}, 1, {kh}, {kw}), got {k.shape}")
        for i, s in enumerate(scales):
            if s.shape != (g,):
                raise ShapeError(f"branch {i} scale vector must have length {g}, got {s.shape}")
        self.kernels = list(kernels)
        self.scales = list(scales)
        self.fused_kernel = None
        self.fused_bias = None

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, *, stride: int = 1,
               shuffle_groups: int = 3, activation: str = "linear",
               random_scales: bool = False) -> "RepDWBlock":
        """Fresh block: kernels ~ U(-1/sqrt(fan-in), +), scales 1.0 by default."""
        g = channels // BRANCH_GROUPS if channels % BRANCH_GROUPS == 0 else 0
        if g == 0:
            raise ShapeError(f"channels {channels} not divisible by {BRANCH_GROUPS}")
        kernels = []
        for (kh, kw), _ in _BRANCH_SHAPES:
            kernels.append(_f32_uniform(rng, 1.0 / np.sqrt(kh * kw), (g, 1, kh, kw)))
        if random_scales:
            scales = [_f32_uniform(rng, 1.0, (g,)) for _ in range(BRANCH_GROUPS)]
        else:
            scales = [np.ones(g) for _ in range(BRANCH_GROUPS)]
        return cls(channels, stride=stride, shuffle_groups=shuffle_groups,
                   activation=activation, kernels=kernels, scales=scales)

    @property
    def fused(self) -> bool:
        return self.fused_kernel is not None

    @property
    def fusible(self) -> bool:
        return self.activation == "linear"

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        if self.fused:
            return self.forward_inference(x, counter)
        return self.forward_training(x, counter)

    def forward_training(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        """Multi-branch forward: split, filter, weight, concat (+residual), shuffle."""
        if self.fused:
            raise ModeError("block is fused; use forward_inference")
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise ShapeError(f"expected {self.channels} input channels, got {x.shape}")
        g = self.channels // BRANCH_GROUPS
        branch_relu = self.activation == "branch-relu"
        outs = []
        for i, (_, pad) in enumerate(_BRANCH_SHAPES):
            xi = Tensor._wrap(x.data[i * g:(i + 1) * g])
            yi = conv2d(xi, Tensor._wrap(self.kernels[i]), stride=self.stride,
                        padding=pad, groups=g, counter=counter)
            if branch_relu:
                yi = relu(yi, counter=counter)
            zi = scale_channels(yi, self.scales[i], counter=counter)
            if branch_relu:
                zi = relu(zi, counter=counter)
            outs.append(zi)
        y = concat_channels(outs, counter=counter)
        if self.stride == 1:
            y = add(y, x, counter=counter)
        return channel_shuffle(y, self.shuffle_groups, counter=counter)

    def fuse(self) -> "RepDWBlock":
        """Collapse the branches into one depthwise 3x3 kernel per channel.

        Each branch kernel is zero padded into a 3x3 frame (1x3 fills the
        middle row, 3x1 the middle column), multiplied by its branch scale;
        the residual contributes +1 at the kernel centre of every channel of
        a stride-1 block. The trailing shuffle is kept as a permutation.
        """
        if self.fused:
            return self
        if not self.fusible:
            raise FusionError(
                "block uses per-branch activations; the nonlinearity between the "
                "branch convolution and the weighting makes the branch sum non-linear, "
                "so no single equivalent kernel exists. Build the block with "
                "activation='linear' to fuse.")
        g = self.channels // BRANCH_GROUPS
        fk = np.zeros((self.channels, 1, 3, 3))
        for j in range(g):
            fk[j, 0, 1, :] = self.scales[0][j] * self.kernels[0][j, 0, 0, :]
            fk[g + j, 0, :, 1] = self.scales[1][j] * self.kernels[1][j, 0, :, 0]
            fk[2 * g + j, 0] = self.scales[2][j] * self.kernels[2][j, 0]
        if self.stride == 1:
            fk[:, 0, 1, 1] += 1.0
        return RepDWBlock(self.channels, stride=self.stride,
                          shuffle_groups=self.shuffle_groups, activation=self.activation,
                          fused_kernel=fk, fused_bias=np.zeros(self.channels))

    def forward_inference(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        """Single depthwise 3x3 conv + bias + stored channel permutation."""
        if not self.fused:
            raise ModeError("block is in training form; fuse() first or use forward_training")
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise ShapeError(f"expected {self.channels} input channels, got {x.shape}")
        y = conv2d(x, Tensor._wrap(self.fused_kernel), stride=self.stride, padding=1,
                   groups=self.channels, counter=counter)
        y = add(y, Tensor._wrap(np.broadcast_to(self.fused_bias[:, None, None], y.shape)),
                counter=counter)
        if counter is not None:
            counter.count(moves=self.channels)
        return Tensor._wrap(y.data[self.permutation].copy())

    # -- parameter plumbing ------------------------------------------------

    def parameter_items(self):
        if self.fused:
            return [("fused_kernel", self.fused_kernel), ("fused_bias", self.fused_bias)]
        return list(zip(_PARAM_NAMES_TRAIN, [*self.kernels, *self.scales]))

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        names = _PARAM_NAMES_FUSED if self.fused else _PARAM_NAMES_TRAIN
        if name not in names:
            raise KeyError(f"block has no parameter {name!r} in this form")
        if self.fused:
            target = self.fused_kernel if name == "fused_kernel" else self.fused_bias
        else:
            idx = _PARAM_NAMES_TRAIN.index(name)
            target = self.kernels[idx] if idx < 3 else self.scales[idx - 3]
        if value.shape != target.shape:
            raise ShapeError(f"{name}: expected shape {target.shape}, got {value.shape}")
        if self.fused:
            if name == "fused_kernel":
                self.fused_kernel = value
            else:
                self.fused_bias = value
        else:
            idx = _PARAM_NAMES_TRAIN.index(name)
            if idx < 3:
                self.kernels[idx] = value
            else:
                self.scales[idx - 3] = value

    def param_count(self) -> int:
        return sum(int(a.size) for _, a in self.parameter_items())


@dataclass(frozen=True)
class StageConfig:
    """One backbone stage: a downsampling block then ``depth`` basic blocks."""
    channels: int
    depth: int

    def validate(self, shuffle_groups: int) -> None:
        if self.channels % BRANCH_GROUPS != 0:
            raise ShapeError(f"stage channels {self.channels} not divisible by {BRANCH_GROUPS}")
        if self.channels % shuffle_groups != 0:
            raise ShapeError(
                f"stage channels {self.channels} not divisible by shuffle groups {shuffle_groups}")
        if self.depth < 0:
            raise ShapeError(f"stage depth must be >= 0, got {self.depth}")


class TransitionConv:
    """Dense 1x1 projection used where the channel width changes."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None,
                 weight: np.ndarray | None = None):
        self.c_in = c_in
        self.c_out = c_out
        if weight is None:
            if rng is None:
                raise ValueError("TransitionConv needs either a weight or an rng")
            weight = _f32_uniform(rng, 1.0 / np.sqrt(c_in), (c_out, c_in, 1, 1))
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.weight.shape != (c_out, c_in, 1, 1):
            raise ShapeError(f"transition weight must be ({c_out}, {c_in}, 1, 1)")

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        return conv2d(x, Tensor._wrap(self.weight), counter=counter)

    def parameter_items(self):
        return [("weight", self.weight)]

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name != "weight":
            raise KeyError(f"transition has no parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.weight.shape:
            raise ShapeError(f"weight: expected shape {self.weight.shape}, got {value.shape}")
        self.weight = value

    def param_count(self) -> int:
        return int(self.weight.size)


class RepBackbone:
    """A stack of stages, each a downsampling block plus basic blocks.

    Exposes every stage output so a detection neck can tap multiple scales.
    A channel transition (1x1 conv) is inserted at each stage boundary where
    the width changes. ``block_activation`` applies a ReLU after every block;
    the activation sits between blocks, outside the fusible region.
    """

    def __init__(self, stages: Sequence[StageConfig], rng: np.random.Generator, *,
                 in_channels: int = 3, shuffle_groups: int = 3,
                 block_activation: bool = True, activation: str = "linear"):
        if not stages:
            raise ShapeError("backbone needs at least one stage")
        for st in stages:
            st.validate(shuffle_groups)
        self.stages_cfg = tuple(stages)
        self.in_channels = in_channels
        self.block_activation = block_activation
        self.stages = []
        prev = in_channels
        for st in stages:
            transition = TransitionConv(prev, st.channels, rng) if prev != st.channels else None
            down = RepDWBlock.random(st.channels, rng, stride=2,
                                     shuffle_groups=shuffle_groups, activation=activation)
            blocks = [RepDWBlock.random(st.channels, rng, stride=1,
                                        shuffle_groups=shuffle_groups, activation=activation)
                      for _ in range(st.depth)]
            self.stages.append((transition, down, blocks))
            prev = st.channels

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> list:
        """Run all stages; returns the per-stage output tensors."""
        taps = []
        for transition, down, blocks in self.stages:
            if transition is not None:
                x = transition.forward(x, counter)
            x = down.forward(x, counter)
            if self.block_activation:
                x = relu(x, counter=counter)
            for b in blocks:
                x = b.forward(x, counter)
                if self.block_activation:
                    x = relu(x, counter=counter)
            taps.append(x)
        return taps

    def blocks(self):
        """All rep blocks with stable paths like ``stage2.block1``."""
        out = []
        for i, (_, down, blocks) in enumerate(self.stages, start=1):
            out.append((f"stage{i}.down", down))
            for j, b in enumerate(blocks, start=1):
                out.append((f"stage{i}.block{j}", b))
        return out

    def param_count(self) -> int:
        total = 0
        for transition, down, blocks in self.stages:
            if transition is not None:
                total += transition.param_count()
            total += down.param_count() + sum(b.param_count() for b in blocks)
        return total
