"""Closed-form floating-point-operation counts per pipeline component.

Counts cover multiply-accumulate work (2 * m * n * k per matmul) for the
linear maps, attention products, edge-wise GCN aggregation, convolutions,
and the fusion gate; elementwise epilogues (norms, activations, softmax) are
excluded. Graph costs take explicit node/edge/cluster counts since they vary
per window.
"""
from __future__ import annotations

from .config import ModelConfig
from .fusion import FusionPlan, fast_plan, slow_plan


def linear_flops(n_rows: int, d_in: int, d_out: int) -> int:
    return 2 * n_rows * d_in * d_out


def attention_block_flops(n_tokens: int, dim: int) -> int:
    """QKV + both attention matmuls + output projection + 4x MLP."""
    qkv = linear_flops(n_tokens, dim, 3 * dim)
    scores = 2 * n_tokens * n_tokens * dim  # q @ k^T over all heads
    mix = 2 * n_tokens * n_tokens * dim  # attn @ v
    proj = linear_flops(n_tokens, dim, dim)
    mlp = linear_flops(n_tokens, dim, 4 * dim) + linear_flops(n_tokens, 4 * dim, dim)
    return qkv + scores + mix + proj + mlp


def patch_embed_flops(cfg: ModelConfig) -> int:
    n_tokens = cfg.n_template_tokens + cfg.n_search_tokens
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels
    return linear_flops(n_tokens, patch_dim, cfg.embed_dim)


def gcn_layer_flops(n_nodes: int, n_directed_edges: int, d_in: int, d_out: int) -> int:
    """Edge-wise aggregation in d_in, then the linear transform."""
    return 2 * n_directed_edges * d_in + linear_flops(n_nodes, d_in, d_out)


def pyramid_flops(cfg: ModelConfig, n_nodes: int, n_directed_edges: int,
                  n_clusters: int) -> int:
    d0, d1, d2 = cfg.gcn_dims
    c = cfg.embed_dim
    total = gcn_layer_flops(n_nodes, n_directed_edges, d0, d1)
    total += gcn_layer_flops(n_nodes, n_directed_edges, d1, d2)
    total += linear_flops(1, d1, c)  # proj1 on the mean vector
    total += linear_flops(1, d2, c)  # proj2
    total += linear_flops(1, d2, c)  # proj3
    return total


def gate_flops(cfg: ModelConfig) -> int:
    n_tokens = cfg.n_template_tokens + cfg.n_search_tokens
    return 2 * n_tokens * cfg.embed_dim  # one multiply and one add per element


def head_flops(cfg: ModelConfig) -> int:
    c = cfg.embed_dim
    m = cfg.map_size
    chans = [c, max(c // 2, 1), max(c // 4, 1), max(c // 8, 1)]
    per_branch = sum(2 * 9 * c_in * c_out * m * m
                     for c_in, c_out in zip(chans[:-1], chans[1:]))
    total = 0
    for out_ch in (1, 2, 2):
        total += per_branch + 2 * chans[-1] * out_ch * m * m
    return total


def _stack_flops(cfg: ModelConfig, depth: int, plan: FusionPlan) -> int:
    """Block-stack cost accounting for appended tokens growing the sequence."""
    n_tokens = cfg.n_template_tokens + cfg.n_search_tokens
    appended = sum(1 for s in plan.steps if s.mode == "append" and s.depth == 0)
    total = 0
    for d in range(1, depth + 1):
        total += attention_block_flops(n_tokens + appended, cfg.embed_dim)
        appended += sum(1 for s in plan.steps if s.mode == "append" and s.depth == d)
    return total


def tracker_forward_flops(cfg: ModelConfig, depth: int, plan: FusionPlan,
                          n_nodes: int, n_directed_edges: int, n_clusters: int) -> int:
    """One full forward: embed, blocks, pyramid, gates, head."""
    total = patch_embed_flops(cfg)
    total += _stack_flops(cfg, depth, plan)
    if not plan.empty:
        total += pyramid_flops(cfg, n_nodes, n_directed_edges, n_clusters)
        total += gate_flops(cfg) * sum(1 for s in plan.steps if s.mode == "gate")
    total += head_flops(cfg)
    return total


def slow_forward_flops(cfg: ModelConfig, n_nodes: int, n_directed_edges: int,
                       n_clusters: int, plan: FusionPlan | None = None) -> int:
    plan = plan if plan is not None else slow_plan(cfg.depth_slow)
    return tracker_forward_flops(cfg, cfg.depth_slow, plan, n_nodes,
                                 n_directed_edges, n_clusters)


def fast_forward_flops(cfg: ModelConfig, n_nodes: int, n_directed_edges: int,
                       n_clusters: int, plan: FusionPlan | None = None) -> int:
    plan = plan if plan is not None else fast_plan(cfg.depth_fast)
    return tracker_forward_flops(cfg, cfg.depth_fast, plan, n_nodes,
                                 n_directed_edges, n_clusters)


def fast_incremental_flops(cfg: ModelConfig, n_nodes: int, n_directed_edges: int,
                           n_clusters: int) -> int:
    """One accumulation step: graph pyramid + gate + head (no backbone)."""
    return (pyramid_flops(cfg, n_nodes, n_directed_edges, n_clusters)
            + gate_flops(cfg) + head_flops(cfg))


def fast_per_output_flops(cfg: ModelConfig, k: int, n_nodes: int,
                          n_directed_edges: int, n_clusters: int) -> float:
    """Amortized cost per output: backbone once plus k incremental steps.

    The backbone part excludes the pyramid/gate/head, which re-run per
    sub-window; with k = 1 this equals one full fast forward.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    backbone = patch_embed_flops(cfg) + _stack_flops(cfg, cfg.depth_fast,
                                                     fast_plan(cfg.depth_fast))
    incremental = fast_incremental_flops(cfg, n_nodes, n_directed_edges, n_clusters)
    return (backbone + k * incremental) / k
