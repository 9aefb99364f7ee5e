"""Config-driven assembly of the full toy detection network.

Topology: a stem (1x1 channel transition plus one stride-2 depthwise block)
followed by four backbone stages, each a downsampling block plus basic
blocks, tapped at strides 4/8/16/32. The neck runs top-down: each coarser
map is projected to the finer width by a 1x1 lateral conv, upsampled
nearest-neighbour, and handed to a joint attention block together with the
finer tap. The four neck outputs feed the ghost detection head.

Config grammar (INI, parsed strictly; unknown sections or keys are rejected):

    [input]
    channels = 3          # image channels
    size = 256            # square input edge, multiple of 32

    [backbone]
    stem_channels = 12    # divisible by 3 and shuffle_groups, even
    shuffle_groups = 3
    block_activation = true   # ReLU between blocks

    [backbone.stage1]     # stages 1..4 are all required (four head scales)
    channels = 12
    depth = 1             # basic blocks after the downsampling block

    ... [backbone.stage2] .. [backbone.stage4] ...

    [neck]
    pool_k = 3            # attention pooling window, odd

    [head]
    num_classes = 4
    trunk_depth = 2       # ghost blocks per head scale

Weight archive format (little-endian throughout):

    magic  b"EDTK"
    u16    version (= 1)
    u8     flags (bit 0: fused network)
    u32    entry count
    entry: u16 path length, utf-8 path,
           u8 rank, rank * u32 dims,
           dims product * f32 values (channel-major, row-major)
    u32    CRC-32 of all preceding bytes
"""

from __future__ import annotations

import configparser
import copy
import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .attention import JointBlock
from .head import HEAD_STRIDES, DetectionHead
from .repblock import BRANCH_GROUPS, FusionError, RepDWBlock, TransitionConv
from .tensor import OpCounter, ShapeError, Tensor, relu, scope, upsample_nearest

__all__ = [
    "ConfigError",
    "ArchiveError",
    "StageSpec",
    "NetworkSpec",
    "parse_network_config",
    "emit_network_config",
    "toy_spec",
    "Network",
    "assemble",
    "fuse_network",
    "save_weights",
    "load_weights",
    "read_ppm",
    "load_ppm",
    "reference_classifier_params",
    "ARCHIVE_MAGIC",
    "ARCHIVE_VERSION",
]

ARCHIVE_MAGIC = b"EDTK"
ARCHIVE_VERSION = 1
N_STAGES = 4


class ConfigError(ValueError):
    """Raised for malformed or contradictory network configurations."""


class ArchiveError(ValueError):
    """Raised for unreadable, corrupt, or mismatched weight archives."""


@dataclass(frozen=True)
class StageSpec:
    channels: int
    depth: int


@dataclass(frozen=True)
class NetworkSpec:
    """Validated description of one network build."""
    input_channels: int = 3
    input_size: int = 256
    stem_channels: int = 12
    shuffle_groups: int = 3
    block_activation: bool = True
    stages: tuple = (StageSpec(12, 1), StageSpec(24, 1), StageSpec(24, 1), StageSpec(48, 1))
    pool_k: int = 3
    num_classes: int = 4
    trunk_depth: int = 2

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError(f"input.channels must be >= 1, got {self.input_channels}")
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise ConfigError(
                f"input.size must be a positive multiple of 32 (stem plus four stride-2 "
                f"stages; neck upsampling must double exactly), got {self.input_size}")
        if self.shuffle_groups < 1:
            raise ConfigError(f"backbone.shuffle_groups must be >= 1, got {self.shuffle_groups}")
        if len(self.stages) != N_STAGES:
            raise ConfigError(f"exactly {N_STAGES} backbone stages required (four head scales), "
                              f"got {len(self.stages)}")
        for label, c in [("backbone.stem_channels", self.stem_channels)] + [
                (f"backbone.stage{i}.channels", st.channels)
                for i, st in enumerate(self.stages, start=1)]:
            if c % BRANCH_GROUPS != 0:
                raise ConfigError(f"{label} = {c} violates divisibility by {BRANCH_GROUPS} "
                                  f"(branch groups)")
            if c % self.shuffle_groups != 0:
                raise ConfigError(f"{label} = {c} violates divisibility by shuffle_groups = "
                                  f"{self.shuffle_groups}")
        for i, st in enumerate(self.stages, start=1):
            if st.channels % 2 != 0:
                raise ConfigError(f"backbone.stage{i}.channels = {st.channels} must be even "
                                  f"(the ghost trunk splits scale channels in half)")
            if st.depth < 0:
                raise ConfigError(f"backbone.stage{i}.depth must be >= 0, got {st.depth}")
        if self.pool_k < 1 or self.pool_k % 2 != 1:
            raise ConfigError(f"neck.pool_k must be odd and positive, got {self.pool_k}")
        if self.num_classes < 1:
            raise ConfigError(f"head.num_classes must be >= 1, got {self.num_classes}")
        if self.trunk_depth < 1:
            raise ConfigError(f"head.trunk_depth must be >= 1, got {self.trunk_depth}")


def toy_spec() -> NetworkSpec:
    """Small default network used by the verification command and tests."""
    return NetworkSpec(
        input_size=64,
        stem_channels=12,
        stages=(StageSpec(12, 1), StageSpec(24, 1), StageSpec(24, 1), StageSpec(48, 1)),
        num_classes=4,
        trunk_depth=2,
    )


_SCALAR_KEYS = {
    "input": {"channels": ("input_channels", int), "size": ("input_size", int)},
    "backbone": {
        "stem_channels": ("stem_channels", int),
        "shuffle_groups": ("shuffle_groups", int),
        "block_activation": ("block_activation", bool),
    },
    "neck": {"pool_k": ("pool_k", int)},
    "head": {"num_classes": ("num_classes", int), "trunk_depth": ("trunk_depth", int)},
}
_STAGE_KEYS = {"channels", "depth"}
_BOOL_WORDS = {"true": True, "false": False}


def _parse_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"key '{key}' in [{section}] must be an integer, got {raw!r}") from None


def parse_network_config(text: str) -> NetworkSpec:
    """Strictly parse the INI grammar above into a validated NetworkSpec."""
    cp = configparser.ConfigParser(interpolation=None, default_section="")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    kwargs = {}
    stage_specs = {}
    for section in cp.sections():
        if section in _SCALAR_KEYS:
            for key, raw in cp.items(section):
                if key not in _SCALAR_KEYS[section]:
                    raise ConfigError(f"unknown key '{key}' in [{section}]")
                attr, typ = _SCALAR_KEYS[section][key]
                if typ is bool:
                    word = raw.strip().lower()
                    if word not in _BOOL_WORDS:
                        raise ConfigError(
                            f"key '{key}' in [{section}] must be true or false, got {raw!r}")
                    kwargs[attr] = _BOOL_WORDS[word]
                else:
                    kwargs[attr] = _parse_int(section, key, raw)
        elif section.startswith("backbone.stage"):
            suffix = section[len("backbone.stage"):]
            if not suffix.isdigit() or not 1 <= int(suffix) <= N_STAGES:
                raise ConfigError(f"unknown section [{section}] (stages are "
                                  f"backbone.stage1..backbone.stage{N_STAGES})")
            idx = int(suffix)
            vals = {}
            for key, raw in cp.items(section):
                if key not in _STAGE_KEYS:
                    raise ConfigError(f"unknown key '{key}' in [{section}]")
                vals[key] = _parse_int(section, key, raw)
            missing = _STAGE_KEYS - vals.keys()
            if missing:
                raise ConfigError(f"[{section}] is missing key '{sorted(missing)[0]}'")
            stage_specs[idx] = StageSpec(vals["channels"], vals["depth"])
        else:
            raise ConfigError(f"unknown section [{section}]")

    missing_stages = [i for i in range(1, N_STAGES + 1) if i not in stage_specs]
    if missing_stages:
        raise ConfigError(f"missing section [backbone.stage{missing_stages[0]}]")
    kwargs["stages"] = tuple(stage_specs[i] for i in range(1, N_STAGES + 1))
    spec = NetworkSpec(**kwargs)
    spec.validate()
    return spec


def emit_network_config(spec: NetworkSpec) -> str:
    """Canonical config text; parse(emit(spec)) == spec."""
    out = io.StringIO()
    out.write("[input]\n")
    out.write(f"channels = {spec.input_channels}\n")
    out.write(f"size = {spec.input_size}\n\n")
    out.write("[backbone]\n")
    out.write(f"stem_channels = {spec.stem_channels}\n")
    out.write(f"shuffle_groups = {spec.shuffle_groups}\n")
    out.write(f"block_activation = {'true' if spec.block_activation else 'false'}\n")
    for i, st in enumerate(spec.stages, start=1):
        out.write(f"\n[backbone.stage{i}]\n")
        out.write(f"channels = {st.channels}\n")
        out.write(f"depth = {st.depth}\n")
    out.write("\n[neck]\n")
    out.write(f"pool_k = {spec.pool_k}\n")
    out.write("\n[head]\n")
    out.write(f"num_classes = {spec.num_classes}\n")
    out.write(f"trunk_depth = {spec.trunk_depth}\n")
    return out.getvalue()


class Network:
    """An assembled, immutable network: backbone taps -> neck joints -> head."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        g = spec.shuffle_groups
        self.stem_transition = (TransitionConv(spec.input_channels, spec.stem_channels, rng)
                                if spec.input_channels != spec.stem_channels else None)
        self.stem_block = RepDWBlock.random(spec.stem_channels, rng, stride=2, shuffle_groups=g)
        self.stages = []
        prev = spec.stem_channels
        for st in spec.stages:
            transition = TransitionConv(prev, st.channels, rng) if prev != st.channels else None
            down = RepDWBlock.random(st.channels, rng, stride=2, shuffle_groups=g)
            blocks = [RepDWBlock.random(st.channels, rng, stride=1, shuffle_groups=g)
                      for _ in range(st.depth)]
            self.stages.append([transition, down, blocks])
            prev = st.channels
        widths = [st.channels for st in spec.stages]
        self.laterals = [TransitionConv(widths[k], widths[k - 1], rng) for k in range(1, N_STAGES)]
        self.joints = [JointBlock(widths[k - 1], rng, pool_k=spec.pool_k)
                       for k in range(1, N_STAGES)]
        self.head = DetectionHead(widths, spec.num_classes, rng, trunk_depth=spec.trunk_depth)

    # -- structure ----------------------------------------------------------

    def modules(self):
        """Ordered (path, module) registry; paths are stable identifiers."""
        out = []
        if self.stem_transition is not None:
            out.append(("stem.transition", self.stem_transition))
        out.append(("stem.block", self.stem_block))
        for i, (transition, down, blocks) in enumerate(self.stages, start=1):
            if transition is not None:
                out.append((f"backbone.stage{i}.transition", transition))
            out.append((f"backbone.stage{i}.down", down))
            for j, b in enumerate(blocks, start=1):
                out.append((f"backbone.stage{i}.block{j}", b))
        for k, lat in enumerate(self.laterals, start=1):
            out.append((f"neck.lateral{k}", lat))
        for k, joint in enumerate(self.joints, start=1):
            out.append((f"neck.joint{k}", joint))
        for s, (trunk, predict) in enumerate(self.head.scales, start=1):
            for j, gb in enumerate(trunk, start=1):
                out.append((f"head.scale{s}.ghost{j}", gb))
            out.append((f"head.scale{s}.predict", predict))
        return out

    def rep_blocks(self):
        return [(path, mod) for path, mod in self.modules() if isinstance(mod, RepDWBlock)]

    @property
    def fused(self) -> bool:
        return all(b.fused for _, b in self.rep_blocks())

    def named_parameters(self):
        params = []
        for path, mod in self.modules():
            for name, arr in mod.parameter_items():
                params.append((f"{path}.{name}", arr))
        return params

    def set_parameter(self, full_path: str, value: np.ndarray) -> None:
        for path, mod in sorted(self.modules(), key=lambda pm: -len(pm[0])):
            if full_path.startswith(path + "."):
                mod.set_parameter(full_path[len(path) + 1:], value)
                return
        raise KeyError(f"no module owns parameter {full_path!r}")

    def param_count(self) -> int:
        return sum(int(a.size) for _, a in self.named_parameters())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- forward ------------------------------------------------------------

    def forward(self, image: Tensor, counter: OpCounter | None = None,
                stats: dict | None = None) -> list:
        """Image (C, S, S) -> four prediction maps at strides 4/8/16/32."""
        if image.ndim != 3 or image.shape[0] != self.spec.input_channels:
            raise ShapeError(f"expected a ({self.spec.input_channels}, S, S) image, "
                             f"got {image.shape}")
        if image.shape[1] != self.spec.input_size or image.shape[2] != self.spec.input_size:
            raise ShapeError(f"network assembled for input size {self.spec.input_size}, "
                             f"got {image.shape[1]}x{image.shape[2]}")
        act = self.spec.block_activation
        x = image
        if self.stem_transition is not None:
            with scope(stats, counter, "stem.transition") as cnt:
                x = self.stem_transition.forward(x, cnt)
        with scope(stats, counter, "stem.block") as cnt:
            x = self.stem_block.forward(x, cnt)
            if act:
                x = relu(x, counter=cnt)
        taps = []
        for i, (transition, down, blocks) in enumerate(self.stages, start=1):
            if transition is not None:
                with scope(stats, counter, f"backbone.stage{i}.transition") as cnt:
                    x = transition.forward(x, cnt)
            with scope(stats, counter, f"backbone.stage{i}.down") as cnt:
                x = down.forward(x, cnt)
                if act:
                    x = relu(x, counter=cnt)
            for j, b in enumerate(blocks, start=1):
                with scope(stats, counter, f"backbone.stage{i}.block{j}") as cnt:
                    x = b.forward(x, cnt)
                    if act:
                        x = relu(x, counter=cnt)
            taps.append(x)

        necked = [None] * N_STAGES
        necked[N_STAGES - 1] = taps[N_STAGES - 1]
        for k in range(N_STAGES - 1, 0, -1):
            with scope(stats, counter, f"neck.lateral{k}") as cnt:
                a = self.laterals[k - 1].forward(necked[k], cnt)
                a = upsample_nearest(a, 2, counter=cnt)
            with scope(stats, counter, f"neck.joint{k}") as cnt:
                necked[k - 1] = self.joints[k - 1].forward(a, taps[k - 1], cnt)
        return self.head.forward(necked, counter, stats=stats)

    # -- fusion ---------------------------------------------------------------

    def fuse(self) -> "Network":
        """Fuse every depthwise block; a no-op on an already fused network."""
        if self.fused:
            return self
        blockers = [path for path, b in self.rep_blocks() if not b.fusible]
        if blockers:
            raise FusionError("network contains non-fusible blocks (per-branch activation): "
                              + ", ".join(blockers))
        new = self.copy()
        new.stem_block = new.stem_block.fuse()
        for stage in new.stages:
            stage[1] = stage[1].fuse()
            stage[2] = [b.fuse() for b in stage[2]]
        return new


def assemble(spec: NetworkSpec, seed: int = 0) -> Network:
    """Deterministic build: (spec, seed) fixes every weight bit-for-bit."""
    return Network(spec, np.random.default_rng(seed))


def fuse_network(net: Network) -> Network:
    return net.fuse()


# -- weight archive ----------------------------------------------------------

def save_weights(net: Network) -> bytes:
    buf = bytearray()
    buf += ARCHIVE_MAGIC
    buf += struct.pack("<H", ARCHIVE_VERSION)
    buf += struct.pack("<B", 1 if net.fused else 0)
    params = net.named_parameters()
    buf += struct.pack("<I", len(params))
    for path, arr in params:
        encoded = path.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ArchiveError("archive truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(net: Network, blob: bytes) -> Network:
    """Validate an archive and return a copy of ``net`` carrying its weights.

    Strict: the CRC must check out, the fused flag must match the target
    network's form, and the archive's parameter paths must equal the
    network's exactly (both directions).
    """
    if len(blob) < 15:
        raise ArchiveError("archive too short")
    body, stated_crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stated_crc:
        raise ArchiveError("CRC mismatch: archive is corrupt")
    r = _Reader(body)
    if r.take(4) != ARCHIVE_MAGIC:
        raise ArchiveError("bad magic: not a weight archive")
    version = r.u16()
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    fused = bool(r.u8() & 1)
    if fused != net.fused:
        if fused:
            raise ArchiveError("archive holds a fused network; it cannot load into a "
                               "training-form network (fuse the target first)")
        raise ArchiveError("archive holds a training-form network; it cannot load into a "
                           "fused network")
    count = r.u32()
    entries = {}
    order = []
    for _ in range(count):
        path = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n = 1
        for d in shape:
            n *= d
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
        if path in entries:
            raise ArchiveError(f"duplicate archive entry {path!r}")
        entries[path] = data
        order.append(path)
    if r.pos != len(body):
        raise ArchiveError("trailing bytes after the last entry")

    expected = dict(net.named_parameters())
    for path in order:
        if path not in expected:
            raise ArchiveError(f"archive entry {path!r} does not exist in the network")
    for path in expected:
        if path not in entries:
            raise ArchiveError(f"network parameter {path!r} missing from the archive")
    loaded = net.copy()
    for path, arr in entries.items():
        if arr.shape != expected[path].shape:
            raise ArchiveError(f"{path!r}: archive shape {arr.shape} does not match "
                               f"network shape {expected[path].shape}")
        loaded.set_parameter(path, arr)
    return loaded


# -- image input ---------------------------------------------------------------

def read_ppm(data: bytes) -> Tensor:
    """Binary PPM (P6, 8-bit) -> (3, H, W) tensor scaled to [0, 1]."""
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigError("truncated PPM header")
        return data[start:pos]

    if token() != b"P6":
        raise ConfigError("not a binary PPM (P6) image")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError:
        raise ConfigError("malformed PPM header") from None
    if width < 1 or height < 1:
        raise ConfigError(f"bad PPM dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise ConfigError(f"only 8-bit PPM supported, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = 3 * width * height
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise ConfigError(f"PPM payload has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Tensor(arr.transpose(2, 0, 1).astype(np.float64) / maxval)


def load_ppm(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_ppm(fh.read())


# -- reference classification-backbone sizing --------------------------------

def reference_classifier_params():
    """Parameter enumeration of a classification-style backbone configuration.

    Stage layout mirrors the usual shuffle-style ImageNet recipe (four stages,
    depths 3/7/3/3 after each downsampling block) with widths rounded to
    multiples of 6 so the blocks' divisibility constraints hold:
    stem 3x3/s2 to 24ch, stages 120/240/480/480, a final 1x1 to 960 and a
    1000-way classifier. Counts come from enumerating actually constructed
    weight arrays.

    Returns ``(total, breakdown)`` where breakdown is a list of (name, count).
    """
    rng = np.random.default_rng(0)
    breakdown = []

    def entry(name, *arrays):
        breakdown.append((name, sum(int(a.size) for a in arrays)))

    entry("stem conv 3x3/s2 3->24", np.zeros((24, 3, 3, 3)))
    prev = 24
    for i, (c, depth) in enumerate([(120, 3), (240, 7), (480, 3), (480, 3)], start=1):
        entry(f"stage{i} transition 1x1 {prev}->{c}", np.zeros((c, prev, 1, 1)))
        blocks = [RepDWBlock.random(c, rng, stride=2)]
        blocks += [RepDWBlock.random(c, rng, stride=1) for _ in range(depth)]
        arrays = [a for b in blocks for _, a in b.parameter_items()]
        entry(f"stage{i} blocks x{depth + 1} ({c}ch)", *arrays)
        prev = c
    entry("final conv 1x1 480->960", np.zeros((960, 480, 1, 1)))
    entry("classifier 960->1000", np.zeros((1000, 960)), np.zeros(1000))
    total = sum(n for _, n in breakdown)
    return total, breakdown
