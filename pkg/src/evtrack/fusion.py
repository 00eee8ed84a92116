"""Graph feature pyramid, cross-view fusion, and event-graph accumulation.

The pyramid turns one event graph into three backbone-width vectors: a
projected mean of the first GCN layer, a projected mean of the voxel-pooled
second layer, and a linear map of the pooled layer's global feature max.
Fusion is either a parameter-free gate ``F' = F_v * g + F_v`` or a token
append that is stripped again before the head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import ConfigError
from .graphs import (ClusterAssignment, EventGraph, build_knn_graph,
                     downsample_uniform, maxpool_features, voxel_cluster)
from .heads import Prediction, decode_box
from .nn_core import GCNLayer, gcn_edges


@dataclass(frozen=True)
class PreparedGraph:
    """An EventGraph converted to torch tensors plus its voxel clustering."""

    features: torch.Tensor  # (n, d0)
    edge_index: torch.Tensor  # (2, E) directed, with self-loops
    edge_weight: torch.Tensor  # (E,) symmetric-norm coefficients
    assignment: ClusterAssignment
    n_nodes: int
    n_directed_edges: int


def prepare_graph(graph: EventGraph, voxel_grid=(12, 16, 16),
                  dtype=torch.float32) -> PreparedGraph:
    edge_index, edge_weight = gcn_edges(graph.adjacency)
    return PreparedGraph(
        features=torch.from_numpy(graph.features).to(dtype),
        edge_index=edge_index,
        edge_weight=edge_weight,
        assignment=voxel_cluster(graph, voxel_grid),
        n_nodes=graph.num_nodes,
        n_directed_edges=edge_index.shape[1],
    )


@dataclass
class PyramidFeatures:
    """The three pyramid vectors, each of backbone width (or (B, C) batched)."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor

    def level(self, i: int) -> torch.Tensor:
        if i not in (1, 2, 3):
            raise ValueError(f"pyramid level must be 1, 2, or 3, got {i}")
        return (self.f1, self.f2, self.f3)[i - 1]

    @staticmethod
    def zeros(dim: int, dtype=torch.float32) -> "PyramidFeatures":
        z = torch.zeros(dim, dtype=dtype)
        return PyramidFeatures(z, z.clone(), z.clone())


class GraphPyramid(nn.Module):
    """Two GCN layers with voxel max-pooling and per-level projections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d0, d1, d2 = cfg.gcn_dims
        self.gcn1 = GCNLayer(d0, d1, activation=True)
        self.gcn2 = GCNLayer(d1, d2, activation=True)
        self.proj1 = nn.Linear(d1, cfg.embed_dim)
        self.proj2 = nn.Linear(d2, cfg.embed_dim)
        self.proj3 = nn.Linear(d2, cfg.embed_dim)
        self.voxel_grid = cfg.voxel_grid

    def forward(self, graph: PreparedGraph) -> PyramidFeatures:
        if graph.n_nodes < 1:
            raise ValueError("cannot run the pyramid on an empty graph")
        h1 = self.gcn1(graph.features, graph.edge_index, graph.edge_weight)
        f1 = self.proj1(h1.mean(dim=0))
        h2 = self.gcn2(h1, graph.edge_index, graph.edge_weight)
        pooled = maxpool_features(h2, graph.assignment)
        f2 = self.proj2(pooled.mean(dim=0))
        f3 = self.proj3(pooled.amax(dim=0))
        return PyramidFeatures(f1, f2, f3)

    def forward_batch(self, graphs) -> PyramidFeatures:
        feats = [self.forward(g) for g in graphs]
        return PyramidFeatures(
            torch.stack([f.f1 for f in feats]),
            torch.stack([f.f2 for f in feats]),
            torch.stack([f.f3 for f in feats]),
        )


def fuse_gate(tokens: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
    """Parameter-free cross-view gate: ``tokens * vec + tokens``."""
    if vec.shape[-1] != tokens.shape[-1]:
        raise ValueError(
            f"gate width {vec.shape[-1]} does not match token width {tokens.shape[-1]}"
        )
    if vec.dim() == 1:
        g = vec.reshape(1, 1, -1)
    elif vec.dim() == 2:
        g = vec.unsqueeze(1)
    else:
        g = vec
    return tokens * g + tokens


def fuse_append(state, vec: torch.Tensor):
    """Append one graph token at the sequence end; tracked for stripping."""
    tokens = state.tokens
    if vec.shape[-1] != tokens.shape[-1]:
        raise ValueError(
            f"append width {vec.shape[-1]} does not match token width {tokens.shape[-1]}"
        )
    if vec.dim() == 1:
        extra = vec.reshape(1, 1, -1).expand(tokens.shape[0], 1, -1)
    else:
        extra = vec.reshape(tokens.shape[0], 1, -1)
    return dataclasses.replace(state, tokens=torch.cat([tokens, extra], dim=1),
                               n_appended=state.n_appended + 1)


# ---------------------------------------------------------------------------
# Fusion plans


@dataclass(frozen=True)
class FusionStep:
    depth: int  # 0 = before the first block, d = after block d
    mode: str  # "append" | "gate"
    level: int  # pyramid level 1..3


@dataclass(frozen=True)
class FusionPlan:
    """Which pyramid level is fused where, and how."""

    steps: tuple[FusionStep, ...] = ()

    def validate(self, depth_budget: int) -> None:
        gate_depths = set()
        for step in self.steps:
            if step.mode not in ("append", "gate"):
                raise ConfigError(f"unknown fusion mode {step.mode!r}")
            if step.level not in (1, 2, 3):
                raise ConfigError(f"pyramid level must be 1..3, got {step.level}")
            if not 0 <= step.depth <= depth_budget:
                raise ConfigError(
                    f"fusion hook at depth {step.depth} exceeds the "
                    f"{depth_budget}-block budget"
                )
            if step.mode == "gate":
                if step.depth in gate_depths:
                    raise ConfigError(f"multiple gates configured at depth {step.depth}")
                gate_depths.add(step.depth)

    def at_depth(self, depth: int) -> tuple[FusionStep, ...]:
        return tuple(s for s in self.steps if s.depth == depth)

    def in_stack(self, depth_budget: int) -> tuple[FusionStep, ...]:
        """Steps applied inside the block stack (everything but final gates)."""
        return tuple(s for s in self.steps
                     if not (s.mode == "gate" and s.depth == depth_budget))

    def final_gates(self, depth_budget: int) -> tuple[FusionStep, ...]:
        return tuple(s for s in self.steps
                     if s.mode == "gate" and s.depth == depth_budget)

    @property
    def empty(self) -> bool:
        return not self.steps


def slow_plan(depth: int) -> FusionPlan:
    """Multi-scale fusion: shallow append, mid append, deep gate."""
    if depth == 0:
        return FusionPlan()
    return FusionPlan((
        FusionStep(0, "append", 1),
        FusionStep(-(-depth // 2), "append", 2),
        FusionStep(depth, "gate", 3),
    ))


def fast_plan(depth: int) -> FusionPlan:
    """A single parameter-free gate after the last block."""
    if depth == 0:
        return FusionPlan()
    return FusionPlan((FusionStep(depth, "gate", 3),))


def parse_plan(text: str) -> FusionPlan:
    """Parse "depth:mode:level,..." (e.g. "0:append:1,6:append:2,12:gate:3")."""
    text = text.strip()
    if not text or text == "none":
        return FusionPlan()
    steps = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"bad fusion step {part!r}, expected depth:mode:level")
        steps.append(FusionStep(int(fields[0]), fields[1], int(fields[2])))
    return FusionPlan(tuple(steps))


def format_plan(plan: FusionPlan) -> str:
    if plan.empty:
        return "none"
    return ",".join(f"{s.depth}:{s.mode}:{s.level}" for s in plan.steps)


# ---------------------------------------------------------------------------
# Event-graph accumulation


@dataclass
class AccumulationResult:
    predictions: list[Prediction]
    features: PyramidFeatures  # last sub-window's pyramid features
    latencies: list[float]  # seconds per output (first includes nothing extra)
    graph_sizes: list[tuple[int, int, int]]  # (nodes, directed edges, clusters)


def window_graph_features(tracker, stream, dtype=torch.float32) -> tuple[PyramidFeatures, PreparedGraph]:
    """Downsample a window's events, build the K-NN graph, run the pyramid."""
    cfg = tracker.cfg
    ds = downsample_uniform(stream, cfg.max_points)
    graph = build_knn_graph(ds, cfg.knn_k)
    prepared = prepare_graph(graph, cfg.voxel_grid, dtype=dtype)
    return tracker.pyramid(prepared), prepared


def accumulate_and_track(tracker, cached_tokens: torch.Tensor, window_stream,
                         k: int, prev_features: PyramidFeatures | None = None
                         ) -> AccumulationResult:
    """Emit ``k`` predictions from one frame window's accumulating events.

    Sub-window j uses the cumulative events with t < j * span / k (the last
    sub-window takes the whole window), so the point sets are nested and the
    graphs grow from sparse to dense. ``cached_tokens`` are the fast
    tracker's backbone output for the most recent complete frame; only the
    final gate and the head are recomputed per output. A sub-window with no
    events reuses the previous sub-window's graph features (zero vectors if
    there is no previous one, which makes the gate an identity).
    """
    import time

    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    span = window_stream.duration
    feats = prev_features
    predictions: list[Prediction] = []
    latencies: list[float] = []
    graph_sizes: list[tuple[int, int, int]] = []
    with torch.no_grad():
        for j in range(1, k + 1):
            t_start = time.perf_counter()
            if j < k:
                cutoff = j * span / k
                sub = window_stream.take(window_stream.ts < cutoff)
            else:
                sub = window_stream
            if len(sub) == 0:
                if feats is None:
                    feats = PyramidFeatures.zeros(cached_tokens.shape[-1],
                                                  dtype=cached_tokens.dtype)
                graph_sizes.append((0, 0, 0))
            else:
                feats, prepared = window_graph_features(tracker, sub,
                                                        dtype=cached_tokens.dtype)
                graph_sizes.append((prepared.n_nodes, prepared.n_directed_edges,
                                    prepared.assignment.n_clusters))
            tokens = tracker.apply_final_fusion(cached_tokens, _as_batch(feats))
            score, offset, size = tracker.predict(tokens)
            predictions.append(decode_box(score[0], offset[0], size[0]))
            latencies.append(time.perf_counter() - t_start)
    return AccumulationResult(predictions, feats, latencies, graph_sizes)


def _as_batch(feats: PyramidFeatures) -> PyramidFeatures:
    if feats.f1.dim() == 1:
        return PyramidFeatures(feats.f1[None], feats.f2[None], feats.f3[None])
    return feats
