"""Compute and memory model for PatchDropout.

``theoretical_flops`` is the closed-form block cost 2LN^2d + 4LNd^2.
``empirical_flops`` runs the real forward pass in meta mode and reads the MAC
meter, so it includes the patch projection (paid on all N patches because
sampling happens after embedding) and the classification head.

Only matmuls are counted. Layer norms, softmax, GELU and residual adds are
excluded by convention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import InvalidRate
from .model import ModelConfig, embed_images, forward, init_params, parameter_count
from .sampler import KeepSet, apply_dropout, kept_count

# stored activations per block: B * (C1 * T * d + C2 * h * T^2)
# C1 = ln1 in/out (2) + qkv (3) + attention output (1) + ln2 in/out (2) + fc1 (4) + gelu (4)
# C2 = post-softmax attention weights, one map per head
ACT_C1 = 16
ACT_C2 = 1


def theoretical_flops(L: int, N: int, d: int) -> int:
    if min(L, N, d) < 1:
        raise ValueError("L, N and d must be >= 1")
    return 2 * L * N * N * d + 4 * L * N * d * d


def relative_compute(r: float, N: float, d: float) -> float:
    """Block cost at keep rate r relative to r = 1, with the token count kept real-valued."""
    r = float(r)
    if not (0.0 < r <= 1.0):
        raise InvalidRate(f"keep rate must lie in (0, 1], got {r}")
    return r * (r * N + 2 * d) / (N + 2 * d)


def empirical_flops(cfg: ModelConfig, k: int | None = None) -> int:
    """MACs of one forward pass for one image with ``k`` patches kept (default all)."""
    N = cfg.num_patches
    if k is None:
        k = N
    if not 1 <= k <= N:
        raise ValueError(f"kept patches must lie in [1, {N}], got {k}")
    with nx.meta_mode():
        params = init_params(cfg, meta=True)
        images = nx.Tensor(nx._meta_array((1, cfg.channels, cfg.image_h, cfg.image_w)))
        start = nx.FLOP_METER.read()
        tokens = embed_images(params, images, cfg)
        if k < N:
            tokens = apply_dropout(tokens, KeepSet(np.arange(k), N))
        forward(params, tokens, cfg)
        return nx.FLOP_METER.read() - start


def activation_memory(cfg: ModelConfig, k: int, batch: int) -> int:
    """Analytic count of activation elements kept for the backward pass."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if batch <= 0:
        return 0
    T = k + 1
    d, h = cfg.width, cfg.heads
    per_block = ACT_C1 * T * d + ACT_C2 * h * T * T
    # patch pixels and their embeddings exist for all N patches before sampling
    embed = cfg.num_patches * (cfg.patch_dim + d)
    return batch * (cfg.depth * per_block + embed)


@dataclass
class CostReport:
    config_id: str
    N: int
    kept_patches: int
    token_count: int
    theoretical_flops: int
    empirical_flops: int
    relative_theoretical: float
    relative_empirical: float
    activation_elements: int
    parameter_count: int

    def as_row(self) -> dict:
        return asdict(self)


def cost_report(cfg: ModelConfig, keep_rate: float = 1.0, batch: int = 1, config_id: str = "") -> CostReport:
    N = cfg.num_patches
    k = kept_count(keep_rate, N)
    T = k + 1
    theo = theoretical_flops(cfg.depth, T, cfg.width)
    theo_full = theoretical_flops(cfg.depth, N + 1, cfg.width)
    emp = empirical_flops(cfg, k)
    emp_full = emp if k == N else empirical_flops(cfg, N)
    return CostReport(
        config_id=config_id,
        N=N,
        kept_patches=k,
        token_count=T,
        theoretical_flops=theo,
        empirical_flops=emp,
        relative_theoretical=theo / theo_full,
        relative_empirical=emp / emp_full,
        activation_elements=activation_memory(cfg, k, batch),
        parameter_count=parameter_count(cfg),
    )


def match_keep_rate(cfg: ModelConfig, target_flops: float) -> float:
    """Largest keep rate whose forward cost does not exceed ``target_flops``.

    Falls back to the smallest representable rate when even one patch costs more.
    """
    N = cfg.num_patches
    lo, hi = 1, N
    if empirical_flops(cfg, N) <= target_flops:
        return 1.0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if empirical_flops(cfg, mid) <= target_flops:
            lo = mid
        else:
            hi = mid - 1
    # smallest rate that floors to lo patches
    return min(1.0, math.ceil(lo / N * 1e9) / 1e9)
