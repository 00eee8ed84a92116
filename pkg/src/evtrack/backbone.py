"""Patch embedding, token assembly, and the slow/fast transformer stacks.

Template and search crops are split into non-overlapping patches, linearly
projected, given separate learned positional tables, and concatenated as
``[template | search]``. The fast tracker shares the per-block architecture
and differs only in depth (the first half of the slow stack).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import ConfigError
from .fusion import (FusionPlan, GraphPyramid, PyramidFeatures, fast_plan,
                     fuse_append, fuse_gate, slow_plan)
from .heads import CenterHead
from .nn_core import TransformerBlock, init_parameters


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, P*P*C) non-overlapping patches, row-major.

    Within a patch the layout is (channel, row, column), matching a reshape
    of the image into (C, H/P, P, W/P, P).
    """
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * in_channels, dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(images, self.patch_size))


@dataclass
class TokenState:
    """Backbone token sequence ``[template | search | appended]``."""

    tokens: torch.Tensor  # (B, N, C)
    n_template: int
    n_search: int
    n_appended: int = 0
    taps: dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def template_tokens(self) -> torch.Tensor:
        return self.tokens[:, :self.n_template]

    @property
    def search_tokens(self) -> torch.Tensor:
        return self.tokens[:, self.n_template:self.n_template + self.n_search]

    def strip_appended(self) -> "TokenState":
        if self.n_appended == 0:
            return self
        return dataclasses.replace(
            self, tokens=self.tokens[:, :self.n_template + self.n_search], n_appended=0)


@dataclass
class TrackerOutput:
    score: torch.Tensor  # (B, H_m, W_m)
    offset: torch.Tensor  # (B, 2, H_m, W_m)
    size: torch.Tensor  # (B, 2, H_m, W_m)
    search_features: torch.Tensor  # (B, N_s, C) tokens after the final fusion
    taps: dict[int, torch.Tensor]
    attention: list[torch.Tensor] | None = None


def tap_depths(depth: int) -> tuple[int, ...]:
    """Shallow/intermediate/deep snapshot depths at thirds of the stack."""
    if depth == 0:
        return ()
    return tuple(sorted({-(-depth // 3), -(-2 * depth // 3), depth}))


class Tracker(nn.Module):
    """One-stream tracker: joint template/search transformer plus graph fusion."""

    def __init__(self, cfg: ModelConfig, depth: int, plan: FusionPlan):
        super().__init__()
        cfg.validate()
        plan.validate(depth)
        self.cfg = cfg
        self.depth = depth
        self.plan = plan
        c = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, c)
        self.pos_template = nn.Parameter(torch.zeros(1, cfg.n_template_tokens, c))
        self.pos_search = nn.Parameter(torch.zeros(1, cfg.n_search_tokens, c))
        self.blocks = nn.ModuleList(
            TransformerBlock(c, cfg.heads, cfg.mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(c)
        self.pyramid = GraphPyramid(cfg)
        self.head = CenterHead(c)
        init_parameters(self)
        nn.init.trunc_normal_(self.pos_template, std=0.02)
        nn.init.trunc_normal_(self.pos_search, std=0.02)

    # -- token pipeline ----------------------------------------------------

    def embed_tokens(self, template: torch.Tensor, search: torch.Tensor) -> TokenState:
        cfg = self.cfg
        if template.shape[-2:] != (cfg.template_size, cfg.template_size):
            raise ValueError(
                f"template crop is {tuple(template.shape[-2:])}, expected "
                f"{cfg.template_size}x{cfg.template_size}")
        if search.shape[-2:] != (cfg.search_size, cfg.search_size):
            raise ValueError(
                f"search crop is {tuple(search.shape[-2:])}, expected "
                f"{cfg.search_size}x{cfg.search_size}")
        z = self.patch_embed(template) + self.pos_template
        s = self.patch_embed(search) + self.pos_search
        return TokenState(torch.cat([z, s], dim=1), z.shape[1], s.shape[1])

    def _apply_steps(self, state: TokenState, steps, feats: PyramidFeatures | None
                     ) -> TokenState:
        for step in steps:
            if feats is None:
                raise ValueError("fusion plan is active but no graph features given")
            vec = feats.level(step.level)
            if step.mode == "append":
                state = fuse_append(state, vec)
            else:
                state = dataclasses.replace(state, tokens=fuse_gate(state.tokens, vec))
        return state

    def run_blocks(self, state: TokenState, feats: PyramidFeatures | None = None,
                   collect_attention: bool = False) -> tuple[TokenState, list]:
        """Apply the block stack with in-stack fusion hooks and depth taps."""
        in_stack = self.plan.in_stack(self.depth)
        taps = tap_depths(self.depth)
        attention: list[torch.Tensor] = []
        state = self._apply_steps(state, [s for s in in_stack if s.depth == 0], feats)
        for d, block in enumerate(self.blocks, start=1):
            if collect_attention:
                tokens, weights = block(state.tokens, return_weights=True)
                attention.append(weights)
            else:
                tokens = block(state.tokens)
            state = dataclasses.replace(state, tokens=tokens)
            state = self._apply_steps(state, [s for s in in_stack if s.depth == d], feats)
            if d in taps:
                state.taps[d] = state.tokens.detach()
        return state, attention

    def backbone_tokens(self, template: torch.Tensor, search: torch.Tensor,
                        feats: PyramidFeatures | None = None,
                        collect_attention: bool = False):
        """Embed, run the stack, strip appended tokens, and normalize.

        This is everything up to (but excluding) the final-depth gates, i.e.
        the part the accumulation strategy computes once per frame window.
        """
        state = self.embed_tokens(template, search)
        state, attention = self.run_blocks(state, feats, collect_attention)
        state = state.strip_appended()
        tokens = self.norm(state.tokens)
        return tokens, state.taps, attention

    def apply_final_fusion(self, tokens: torch.Tensor,
                           feats: PyramidFeatures | None) -> torch.Tensor:
        for step in self.plan.final_gates(self.depth):
            if feats is None:
                raise ValueError("fusion plan is active but no graph features given")
            tokens = fuse_gate(tokens, feats.level(step.level))
        return tokens

    def predict(self, tokens: torch.Tensor):
        """Run the head on the search slice of a fused token sequence."""
        n_z, n_s = self.cfg.n_template_tokens, self.cfg.n_search_tokens
        return self.head(tokens[:, n_z:n_z + n_s])

    def forward(self, template: torch.Tensor, search: torch.Tensor,
                graphs=None, collect_attention: bool = False) -> TrackerOutput:
        """Full forward pass; ``graphs`` is a sequence of PreparedGraph."""
        feats = None
        if not self.plan.empty:
            if graphs is None:
                raise ValueError("this tracker's fusion plan requires event graphs")
            feats = self.pyramid.forward_batch(graphs)
        tokens, taps, attention = self.backbone_tokens(
            template, search, feats, collect_attention)
        tokens = self.apply_final_fusion(tokens, feats)
        n_z, n_s = self.cfg.n_template_tokens, self.cfg.n_search_tokens
        score, offset, size = self.predict(tokens)
        return TrackerOutput(score, offset, size,
                             search_features=tokens[:, n_z:n_z + n_s],
                             taps=taps,
                             attention=attention if collect_attention else None)


def build_slow_tracker(cfg: ModelConfig, seed: int = 0,
                       plan: FusionPlan | None = None) -> Tracker:
    torch.manual_seed(seed)
    return Tracker(cfg, cfg.depth_slow, plan if plan is not None else slow_plan(cfg.depth_slow))


def build_fast_tracker(cfg: ModelConfig, seed: int = 0,
                       plan: FusionPlan | None = None,
                       init_from: Tracker | None = None) -> Tracker:
    torch.manual_seed(seed)
    fast = Tracker(cfg, cfg.depth_fast, plan if plan is not None else fast_plan(cfg.depth_fast))
    if init_from is not None:
        init_fast_from_slow(fast, init_from)
    return fast


def init_fast_from_slow(fast: Tracker, slow: Tracker) -> None:
    """Copy the embedding, positional tables, and first half of the blocks."""
    if fast.cfg.embed_dim != slow.cfg.embed_dim:
        raise ConfigError("fast/slow trackers must share the embedding width")
    if len(slow.blocks) < len(fast.blocks):
        raise ConfigError("slow tracker has fewer blocks than the fast one needs")
    with torch.no_grad():
        fast.patch_embed.load_state_dict(slow.patch_embed.state_dict())
        fast.pos_template.copy_(slow.pos_template)
        fast.pos_search.copy_(slow.pos_search)
        for fast_block, slow_block in zip(fast.blocks, slow.blocks):
            fast_block.load_state_dict(slow_block.state_dict())


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Parameter counts per top-level component plus the total."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.numel()
    counts["total"] = sum(p.numel() for p in model.parameters())
    return counts
