"""Analytical client-cost model, measured MAC counts, and the comm ledger.

Units are MACs (one multiply-accumulate); GFLOPs reports use a
configurable factor (default 2 FLOPs per MAC). The closed forms keep the
published leading-order coefficients verbatim — patch-embedding, head and
normalization constants are deliberately dropped there, while the
measured counter walks the real model and includes everything, so both
views stay available. Only cost *ratios* across masking rates are treated
as reproducible targets; see the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

from . import tensor as T
from . import vit
from .errors import ConfigError


@dataclass(frozen=True)
class CostInput:
    """Geometry for the closed-form polynomials. n_global is N, the frozen
    depth; the trainable local depth is M = n_t - n_global."""

    n_t: int = 12
    n_global: int = 10
    n: int = 196
    d: int = 768
    r_m: float = 0.75
    mac_to_flop: float = 2.0
    bandwidth_mbps: float = 500.0

    def __post_init__(self):
        if not 1 <= self.n_global <= self.n_t - 1:
            raise ConfigError(
                f"n_global must satisfy 1 <= N <= n_t-1, got {self.n_global}"
            )
        if not 0.0 <= self.r_m < 1.0:
            raise ConfigError(f"masking ratio must lie in [0, 1), got {self.r_m}")
        if self.bandwidth_mbps <= 0:
            raise ConfigError("bandwidth must be positive")
        if min(self.n_t, self.n, self.d) < 1:
            raise ConfigError("n_t, n, d must be positive")


@dataclass
class CostReport:
    forward_units: float
    backward_units: float
    total_units: float
    measured_macs: int | None
    bytes_up: int
    bytes_down: int
    modeled_time_s: float


def forward_cost(ci: CostInput) -> float:
    """5*N_T*(1-r)*n*d^2 + 2*N_T*(1-r)^2*n^2*d."""
    x = (1.0 - ci.r_m) * ci.n * ci.d**2
    y = (1.0 - ci.r_m) ** 2 * ci.n**2 * ci.d
    return 5 * ci.n_t * x + 2 * ci.n_t * y


def backward_cost(ci: CostInput) -> float:
    """10*(N_T-N)*(1-r)*n*d^2 + 4*(N_T-N)*(1-r)^2*n^2*d."""
    m = ci.n_t - ci.n_global
    x = (1.0 - ci.r_m) * ci.n * ci.d**2
    y = (1.0 - ci.r_m) ** 2 * ci.n**2 * ci.d
    return 10 * m * x + 4 * m * y


def total_cost(ci: CostInput) -> float:
    """(15*N_T-10*N)*(1-r)*n*d^2 + (6*N_T-4*N)*(1-r)^2*n^2*d.

    Equals forward_cost + backward_cost: integer-exact for dyadic (1-r),
    within 1 ulp otherwise (same subproducts, integer coefficients).
    """
    x = (1.0 - ci.r_m) * ci.n * ci.d**2
    y = (1.0 - ci.r_m) ** 2 * ci.n**2 * ci.d
    return (15 * ci.n_t - 10 * ci.n_global) * x + (6 * ci.n_t - 4 * ci.n_global) * y


def cost_ratio_table(base: CostInput, ratios) -> list[tuple[float, float]]:
    """total(r)/total(0) for each masking ratio r."""
    zero = total_cost(_with_rm(base, 0.0))
    return [(r, total_cost(_with_rm(base, r)) / zero) for r in ratios]


def _with_rm(ci: CostInput, r_m: float) -> CostInput:
    return CostInput(n_t=ci.n_t, n_global=ci.n_global, n=ci.n, d=ci.d, r_m=r_m,
                     mac_to_flop=ci.mac_to_flop, bandwidth_mbps=ci.bandwidth_mbps)


def measured_macs(cfg: vit.ViTConfig, r_m: float, phase: str = "train",
                  batch: int = 1) -> int:
    """Shape-trace the real client model and count exact MACs.

    forward: one masked forward pass. train: forward plus the backward
    MACs autodiff would execute with the global module frozen. No data
    buffers are touched, so ViT-B geometry costs microseconds.
    """
    if phase not in ("forward", "train"):
        raise ConfigError(f"phase must be forward|train, got {phase!r}")
    params = vit.traced_params(cfg)
    tb = vit.traced_masked_batch(cfg, r_m, b=batch)
    with T.Graph() as g:
        h_p = vit.local_forward(params.phi, tb, cfg)
        h_r = vit.global_forward(params.w_global, h_p, cfg)
        vit.head_forward(params.theta, h_r)
    macs = g.mac_counter
    if phase == "train":
        macs += g.pending_backward_macs()
    return macs


def comm_report(bpf_bytes: int, broadcast_bytes: int, bandwidth_mbps: float) -> float:
    """Modeled seconds to move one round's bytes over the link."""
    if bandwidth_mbps <= 0:
        raise ConfigError("bandwidth must be positive")
    return (bpf_bytes + broadcast_bytes) * 8.0 / (bandwidth_mbps * 1e6)


def per_layer_params(d: int, mlp_ratio: int = 4) -> int:
    """Closed-form parameter count of one transformer block.

    qkv 3(d^2+d) + proj d^2+d + mlp (2*ratio*d^2 + (ratio+1)*d) + two
    norms 4d; equals 12d^2+13d at ratio 4.
    """
    return (4 + 2 * mlp_ratio) * d * d + (9 + mlp_ratio) * d


def trainable_param_count(cfg: vit.ViTConfig) -> int:
    """Client-trainable parameters in the comparable accounting:
    the M local transformer blocks plus the C-way head.

    Embedding tables and the class token are excluded here (that is the
    only accounting that reproduces the published per-client numbers);
    param_breakdown exposes them separately.
    """
    layers = cfg.m * per_layer_params(cfg.d, cfg.mlp_ratio)
    head = cfg.d * cfg.c + cfg.c
    return layers + head


def param_breakdown(cfg: vit.ViTConfig) -> dict[str, int]:
    phi_s, w_s, th_s = vit.param_shapes(cfg)

    def total(shapes):
        return sum(prod(s) for s in shapes.values())

    blocks = cfg.m * per_layer_params(cfg.d, cfg.mlp_ratio)
    embed = total(phi_s) - blocks
    return {
        "local_blocks": blocks,
        "embeddings": embed,  # patch projection + positional table + class token
        "head": total(th_s),
        "phi_total": total(phi_s),
        "global_total": total(w_s),
        "client_trainable_full": total(phi_s) + total(th_s),
        "client_trainable_comparable": trainable_param_count(cfg),
    }
