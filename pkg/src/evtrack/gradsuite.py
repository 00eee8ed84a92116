"""The standard finite-difference gradient suite.

Every differentiable component is checked in float64 against central
differences on randomized small instances: the attention block, the GCN
layer, the head branches, each loss term, and one end-to-end slow tracker
on an 8-token input with a 2-node graph.
"""
from __future__ import annotations

import numpy as np
import torch

from .backbone import build_slow_tracker
from .config import ModelConfig
from .errors import ValidationError
from .events import EventStream
from .fusion import prepare_graph
from .graphs import build_knn_graph
from .heads import (CenterHead, encode_targets, focal_loss, giou_loss,
                    kd_loss, l1_loss)
from .nn_core import (GCNLayer, GradCheckResult, TransformerBlock, gcn_edges,
                      grad_check)


def tiny_config() -> ModelConfig:
    """8 tokens, 2 blocks: small enough for exhaustive finite differences."""
    return ModelConfig(embed_dim=16, template_size=32, search_size=32,
                       depth_slow=2, depth_fast=1, heads=2)


def _random_graph(rng: np.random.Generator, n_nodes: int, sensor: int = 16):
    xs = rng.integers(0, sensor, n_nodes)
    ys = rng.integers(0, sensor, n_nodes)
    ts = np.sort(rng.integers(0, 1000, n_nodes))
    ps = rng.integers(0, 2, n_nodes) * 2 - 1
    stream = EventStream(xs.astype(np.int64), ys.astype(np.int64),
                         ts.astype(np.int64), ps.astype(np.int64),
                         1000, (sensor, sensor))
    return build_knn_graph(stream, k=3)


def check_attention_block(tolerance: float, seed: int) -> GradCheckResult:
    torch.manual_seed(seed)
    block = TransformerBlock(dim=16, heads=2).double()
    x = torch.randn(1, 8, 16, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 8, 16, dtype=torch.float64)
    params = {"input": x, **dict(block.named_parameters())}
    loss_fn = lambda: (block(x) * weights).sum()
    return grad_check(loss_fn, params, tolerance)


def check_gcn_layer(tolerance: float, seed: int) -> GradCheckResult:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    graph = _random_graph(rng, 12)
    edge_index, edge_weight = gcn_edges(graph.adjacency)
    layer = GCNLayer(3, 5).double()
    h = torch.randn(12, 3, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(12, 5, dtype=torch.float64)
    params = {"input": h, **dict(layer.named_parameters())}
    loss_fn = lambda: (layer(h, edge_index, edge_weight) * weights).sum()
    return grad_check(loss_fn, params, tolerance)


def check_head_branches(tolerance: float, seed: int) -> GradCheckResult:
    torch.manual_seed(seed)
    head = CenterHead(16).double()
    tokens = torch.randn(1, 16, 16, dtype=torch.float64, requires_grad=True)
    w_score = torch.randn(1, 4, 4, dtype=torch.float64)
    w_map = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def loss_fn():
        score, offset, size = head(tokens)
        return (score * w_score).sum() + (offset * w_map).sum() + (size * w_map).sum()

    params = {"input": tokens, **dict(head.named_parameters())}
    return grad_check(loss_fn, params, tolerance, max_entries=48, seed=seed)


def check_focal_loss(tolerance: float, seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
    target, _, _, _ = encode_targets((0.3, 0.4, 0.25, 0.2), 8, dtype=torch.float64)
    return grad_check(lambda: focal_loss(pred, target), {"score": pred}, tolerance)


def check_l1_loss(tolerance: float, seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    pred = torch.tensor(rng.uniform(0.2, 0.6, 4), requires_grad=True)
    gt = torch.tensor(rng.uniform(0.25, 0.65, 4), dtype=torch.float64)
    return grad_check(lambda: l1_loss(pred, gt), {"box": pred}, tolerance)


def check_giou_loss(tolerance: float, seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    pred = torch.tensor([0.31, 0.27, 0.22, 0.33] + rng.uniform(-0.02, 0.02, 4),
                        requires_grad=True)
    gt = torch.tensor([0.35, 0.3, 0.25, 0.25], dtype=torch.float64)
    return grad_check(lambda: giou_loss(pred, gt), {"box": pred}, tolerance)


def check_kd_loss(tolerance: float, seed: int) -> GradCheckResult:
    torch.manual_seed(seed)
    fast = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    slow = torch.randn(4, 8, dtype=torch.float64)
    return grad_check(lambda: kd_loss(fast, slow), {"fast_features": fast}, tolerance)


def check_full_tracker(tolerance: float, seed: int,
                       max_entries: int = 4) -> GradCheckResult:
    """End-to-end slow tracker: 8 tokens, a 2-node graph, the full loss."""
    cfg = tiny_config()
    model = build_slow_tracker(cfg, seed=seed).double()
    # check at a generic point: zero biases leave ReLU inputs exactly at the
    # kink (where central differences and the subgradient disagree)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    rng = np.random.default_rng(seed)
    template = torch.tensor(rng.normal(size=(1, 3, 32, 32)))
    search = torch.tensor(rng.normal(size=(1, 3, 32, 32)))
    stream = EventStream(np.array([3, 9]), np.array([4, 11]), np.array([100, 700]),
                         np.array([1, -1]), 1000, (16, 16))
    graph = prepare_graph(build_knn_graph(stream, k=1), cfg.voxel_grid,
                          dtype=torch.float64)
    gt = torch.tensor([0.3, 0.35, 0.3, 0.25], dtype=torch.float64)
    target, _, _, _ = encode_targets(gt, cfg.map_size, dtype=torch.float64)

    def loss_fn():
        out = model(template, search, graphs=[graph])
        from .heads import decode_boxes, total_loss
        focal = focal_loss(out.score, target[None])
        pred = decode_boxes(out.score, out.offset, out.size)
        total, _ = total_loss(focal, l1_loss(pred, gt[None]),
                              giou_loss(pred, gt[None]), 0.0)
        return total

    params = dict(model.named_parameters())
    return grad_check(loss_fn, params, tolerance, max_entries=max_entries, seed=seed)


def run_gradient_suite(tolerance: float = 1e-4, seed: int = 0,
                       include_full_model: bool = True) -> dict[str, GradCheckResult]:
    checks = {
        "attention_block": check_attention_block,
        "gcn_layer": check_gcn_layer,
        "head_branches": check_head_branches,
        "focal_loss": check_focal_loss,
        "l1_loss": check_l1_loss,
        "giou_loss": check_giou_loss,
        "kd_loss": check_kd_loss,
    }
    results = {name: fn(tolerance, seed) for name, fn in checks.items()}
    if include_full_model:
        results["full_tracker"] = check_full_tracker(tolerance, seed)
    return results
