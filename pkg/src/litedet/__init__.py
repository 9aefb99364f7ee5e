"""Forward-inference toolbox for lightweight detection networks.

Components: a minimal counted tensor substrate, multi-branch depthwise blocks
with exact single-kernel fusion, parameter-free pooled-token cross-attention
plus efficient channel attention, a ghost-block detection head with an extra
stride-4 scale, a closed-form operation-cost model cross-checked against
instrumented counters, and a config-driven network builder with a binary
weight archive.
"""

from .tensor import (
    OpCounter,
    ShapeError,
    Tensor,
    channel_shuffle,
    conv2d,
    pool_directional,
    pool_spatial,
    shuffle_permutation,
    softmax,
)
from .repblock import FusionError, ModeError, RepBackbone, RepDWBlock, StageConfig
from .attention import EcaAttention, JointBlock, SparseCrossAttention
from .head import Detection, DetectionHead, GhostBlock, decode_detections
from .costmodel import (
    AttnCostInputs,
    ConvCostInputs,
    infer_cost_pair,
    infer_ratio,
    infer_ratio_simplified,
    measure_fused_depthwise,
    measure_sca,
    nonlocal_cost,
    repdw_infer_cost,
    repdw_train_cost,
    repvgg_infer_cost,
    repvgg_train_cost,
    sca_cost,
    sca_ratio,
    sca_ratio_printed,
    sca_ratio_simplified,
    train_ratio,
    train_ratio_simplified,
)
from .netbuild import (
    ArchiveError,
    ConfigError,
    Network,
    NetworkSpec,
    StageSpec,
    assemble,
    emit_network_config,
    fuse_network,
    load_ppm,
    load_weights,
    parse_network_config,
    read_ppm,
    save_weights,
    toy_spec,
)
from .verify import run_verification

__version__ = "0.1.0"
