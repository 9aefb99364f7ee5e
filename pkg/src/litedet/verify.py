"""Invariant suites behind the ``verify`` command.

Each check returns a :class:`CheckResult`; the command exits 0 only if every
check passes. Checks are pure functions of their seeds, so reruns reproduce
identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import SparseCrossAttention
from .costmodel import AttnCostInputs, measure_fused_depthwise, measure_sca
from .head import GhostBlock
from .netbuild import Network, NetworkSpec, assemble, load_weights, save_weights, toy_spec
from .repblock import RepDWBlock
from .tensor import OpCounter, Tensor, shuffle_permutation, softmax

__all__ = [
    "CheckResult",
    "BLOCK_TOLERANCE",
    "NETWORK_TOLERANCE",
    "check_block_fusion",
    "check_network_fusion",
    "check_network_blocks",
    "check_shuffle_bijection",
    "check_softmax_contract",
    "check_attention_rows",
    "check_measured_vs_analytic",
    "check_ghost_params",
    "check_determinism",
    "run_verification",
]

BLOCK_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    deviation: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail}"


def _random_fusible_block(rng: np.random.Generator) -> RepDWBlock:
    channels = 3 * int(rng.integers(1, 17))          # C in 3..48
    stride = int(rng.choice([1, 1, 1, 2]))
    groups = int(rng.choice([g for g in (1, 2, 3, 4) if channels % g == 0]))
    return RepDWBlock.random(channels, rng, stride=stride, shuffle_groups=groups,
                             random_scales=True)


def check_block_fusion(trials: int, seed: int = 0) -> CheckResult:
    """Training vs fused forward on random blocks; max |difference| < 1e-5."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        block = _random_fusible_block(rng)
        fused = block.fuse()
        h = int(rng.integers(4, 33))
        w = int(rng.integers(4, 33))
        x = Tensor(rng.standard_normal((block.channels, h, w)))
        dev = float(np.abs(block.forward_training(x).data
                           - fused.forward_inference(x).data).max())
        worst = max(worst, dev)
    return CheckResult("block-fusion-equivalence",
                       worst < BLOCK_TOLERANCE,
                       f"{trials} random blocks, max deviation {worst:.3e} "
                       f"(tolerance {BLOCK_TOLERANCE:.0e})", worst)


def _random_toy_spec(rng: np.random.Generator) -> NetworkSpec:
    from .netbuild import StageSpec
    widths = [6 * int(rng.integers(1, 5)) for _ in range(4)]
    depths = [int(rng.integers(0, 3)) for _ in range(4)]
    return NetworkSpec(
        input_size=int(rng.choice([32, 64])),
        stem_channels=6 * int(rng.integers(1, 3)),
        stages=tuple(StageSpec(c, d) for c, d in zip(widths, depths)),
        num_classes=int(rng.integers(1, 5)),
        trunk_depth=1,
    )


def check_network_fusion(count: int, seed: int = 0) -> CheckResult:
    """End-to-end training vs fused forwards on random toy networks; < 1e-4."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(count):
        spec = _random_toy_spec(rng)
        net = assemble(spec, seed=int(rng.integers(0, 2 ** 31)))
        fused = net.fuse()
        img = Tensor(rng.random((spec.input_channels, spec.input_size, spec.input_size)))
        for p, q in zip(net.forward(img), fused.forward(img)):
            worst = max(worst, float(np.abs(p.data - q.data).max()))
    return CheckResult("network-fusion-equivalence",
                       worst < NETWORK_TOLERANCE,
                       f"{count} random toy networks, max deviation {worst:.3e} "
                       f"(tolerance {NETWORK_TOLERANCE:.0e})", worst)


def check_network_blocks(net: Network, fused_net: Network, trials: int = 3,
                         seed: int = 0) -> CheckResult:
    """Per-block training/fused agreement inside an assembled network pair.

    Failing blocks are named, so a perturbed fused kernel is localised.
    """
    rng = np.random.default_rng(seed)
    fused_blocks = dict(fused_net.rep_blocks())
    offenders = []
    worst = 0.0
    for path, block in net.rep_blocks():
        twin = fused_blocks.get(path)
        if twin is None:
            offenders.append(f"{path} (missing from fused network)")
            continue
        dev = 0.0
        for _ in range(trials):
            x = Tensor(rng.standard_normal((block.channels, 8, 8)))
            dev = max(dev, float(np.abs(block.forward_training(x).data
                                        - twin.forward_inference(x).data).max()))
        worst = max(worst, dev)
        if dev >= BLOCK_TOLERANCE:
            offenders.append(f"{path} (max deviation {dev:.3e})")
    if offenders:
        return CheckResult("network-block-fusion", False,
                           "blocks disagree: " + "; ".join(offenders), worst)
    return CheckResult("network-block-fusion", True,
                       f"all {len(net.rep_blocks())} blocks agree, max deviation {worst:.3e}",
                       worst)


def check_shuffle_bijection(max_channels: int = 96) -> CheckResult:
    """Shuffle permutation = transpose construction, invertible, identity at G=1."""
    for groups in (1, 2, 3, 4):
        for channels in range(groups, max_channels + 1):
            if channels % groups != 0:
                continue
            perm = shuffle_permutation(channels, groups)
            expected = np.arange(channels).reshape(groups, channels // groups).T.ravel()
            if not np.array_equal(perm, expected):
                return CheckResult("shuffle-bijection", False,
                                   f"C={channels} G={groups}: permutation differs "
                                   f"from the transpose construction")
            if sorted(perm.tolist()) != list(range(channels)):
                return CheckResult("shuffle-bijection", False,
                                   f"C={channels} G={groups}: not a bijection")
            if groups == 1 and not np.array_equal(perm, np.arange(channels)):
                return CheckResult("shuffle-bijection", False,
                                   f"C={channels}: G=1 is not the identity")
            inverse = shuffle_permutation(channels, channels // groups)
            if not np.array_equal(perm[inverse], np.arange(channels)):
                return CheckResult("shuffle-bijection", False,
                                   f"C={channels} G={groups}: shuffle by G then C/G "
                                   f"is not the identity")
    return CheckResult("shuffle-bijection", True,
                       f"all C <= {max_channels}, G in (1,2,3,4) verified")


def check_softmax_contract(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 32))
        m = int(rng.integers(1, 8))
        logits = rng.standard_normal((m, n)) * 10
        out = softmax(logits, axis=1)
        worst = max(worst, float(np.abs(out.sum(axis=1) - 1.0).max()))
        shifted = softmax(logits + rng.standard_normal() * 5, axis=1)
        worst = max(worst, float(np.abs(out - shifted).max()))
        if out.min() <= 0:
            return CheckResult("softmax-contract", False, "non-positive output")
    return CheckResult("softmax-contract", worst < 1e-6,
                       f"{trials} trials, max row-sum/shift deviation {worst:.3e}", worst)


def check_attention_rows(trials: int = 500, seed: int = 0) -> CheckResult:
    """Attention rows are probability vectors across random shape pairs."""
    rng = np.random.default_rng(seed)
    sca = SparseCrossAttention()
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 5))
        big = (c, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        small = (c, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        ta = sca.tokens(Tensor(rng.standard_normal(big)))
        tb = sca.tokens(Tensor(rng.standard_normal(small)))
        weights, _ = sca.attend(ta, tb)
        worst = max(worst, float(np.abs(weights.sum(axis=1) - 1.0).max()))
        if weights.min() < 0:
            return CheckResult("attention-rows", False, "negative attention weight")
    return CheckResult("attention-rows", worst < 1e-6,
                       f"{trials} random calls, max |row sum - 1| = {worst:.3e}", worst)


def check_measured_vs_analytic(seed: int = 0) -> CheckResult:
    """Instrumented counters against the closed-form model."""
    fused = measure_fused_depthwise(12, 16, 16, seed=seed)
    q = AttnCostInputs(channels=4, big_h=8, big_w=8, small_h=8, small_w=8)
    sca = measure_sca(q, seed=seed)
    problems = []
    if not fused.within:
        problems.append(f"fused block multiply-adds {fused.measured} != {fused.analytic:.0f}")
    if not sca.attention_exact:
        problems.append(f"attention-stage multiply-adds {sca.attention_macs} != "
                        f"{sca.analytic.stage('attention')}")
    if not sca.total_within:
        problems.append(f"attention total off by {abs(sca.total_ratio - 1):.1%} (> 25%)")
    if problems:
        return CheckResult("measured-vs-analytic", False, "; ".join(problems))
    return CheckResult("measured-vs-analytic", True,
                       f"fused {fused.measured} multiply-adds exact; attention stage "
                       f"{sca.attention_macs} exact; total within "
                       f"{abs(sca.total_ratio - 1):.1%} of the staged sum")


def check_ghost_params(limit: int = 256) -> CheckResult:
    rng = np.random.default_rng(0)
    for c_in in range(1, limit + 1, 21):
        for c_out in range(2, limit + 1, 22):
            if c_out % 2 != 0:
                continue
            block = GhostBlock(c_in, c_out, rng)
            dense = 9 * c_in * c_out
            if block.param_count() >= dense:
                return CheckResult("ghost-params", False,
                                   f"C_in={c_in} C_out={c_out}: ghost {block.param_count()} "
                                   f">= dense {dense}")
    return CheckResult("ghost-params", True,
                       f"ghost < dense 3x3 parameters across the grid up to {limit}")


def check_determinism(spec: NetworkSpec | None = None, seed: int = 7) -> CheckResult:
    spec = spec or toy_spec()
    a = assemble(spec, seed)
    b = assemble(spec, seed)
    for (pa, wa), (pb, wb) in zip(a.named_parameters(), b.named_parameters()):
        if pa != pb or not np.array_equal(wa, wb):
            return CheckResult("determinism-serialization", False,
                               f"same seed produced differing weights at {pa}")
    blob = save_weights(a)
    if save_weights(load_weights(b, blob)) != blob:
        return CheckResult("determinism-serialization", False,
                           "archive did not round-trip bit-exactly")
    corrupted = bytearray(blob)
    corrupted[-1] ^= 0xFF
    try:
        load_weights(b, bytes(corrupted))
        return CheckResult("determinism-serialization", False,
                           "corrupted CRC was accepted")
    except Exception:
        pass
    rng = np.random.default_rng(seed)
    img = Tensor(rng.random((spec.input_channels, spec.input_size, spec.input_size)))
    ca, cb = OpCounter(), OpCounter()
    out1 = a.forward(img, ca)
    out2 = a.forward(img, cb)
    if ca.snapshot() != cb.snapshot():
        return CheckResult("determinism-serialization", False,
                           "operation counts differ between identical runs")
    for p, q in zip(out1, out2):
        if not np.array_equal(p.data, q.data):
            return CheckResult("determinism-serialization", False,
                               "outputs differ between identical runs")
    return CheckResult("determinism-serialization", True,
                       "seeded weights, archive round-trip, CRC rejection and "
                       "repeat-run outputs all verified")


def run_verification(spec: NetworkSpec | None = None, seed: int = 0,
                     trials: int = 200) -> list:
    """The full suite; ``trials`` scales the randomized checks."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    spec = spec or toy_spec()
    net = assemble(spec, seed)
    fused = net.fuse()
    return [
        check_block_fusion(trials, seed),
        check_network_fusion(max(3, trials // 20), seed),
        check_network_blocks(net, fused, seed=seed),
        check_shuffle_bijection(),
        check_softmax_contract(max(50, trials // 2), seed),
        check_attention_rows(max(100, trials), seed),
        check_measured_vs_analytic(seed),
        check_ghost_params(),
        check_determinism(spec, seed),
    ]
