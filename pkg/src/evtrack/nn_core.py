"""Transformer and GCN building blocks, AdamW, and gradient checking.

Blocks use pre-norm residuals: ``x = x + MHA(LN(x)); x = x + FFN(LN(x))``
with exact softmax attention. Training runs in float32; gradient checks run
the same modules in float64 against a central-finite-difference oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError


def init_parameters(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) weights, zero biases, identity LayerNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, mean=0.0, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MultiHeadAttention(nn.Module):
    """Exact multi-head softmax attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (b, heads, n, hd)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm attention + feed-forward block with residual connections."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        if return_weights:
            attn_out, weights = self.attn(self.norm1(x), return_weights=True)
            x = x + attn_out
            x = x + self.mlp(self.norm2(x))
            return x, weights
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class GCNLayer(nn.Module):
    """Graph convolution with Kipf-style symmetric normalization.

    ``forward`` takes precomputed directed edges (including self-loops) and
    their normalization coefficients 1/sqrt(deg_i * deg_j); aggregation runs
    edge-wise so the cost scales with the edge count, not n^2.
    """

    def __init__(self, d_in: int, d_out: int, activation: bool = True):
        super().__init__()
        self.lin = nn.Linear(d_in, d_out)
        self.activation = activation

    def forward(self, h: torch.Tensor, edge_index: torch.Tensor,
                edge_weight: torch.Tensor) -> torch.Tensor:
        src, dst = edge_index
        agg = h.new_zeros(h.shape)
        agg.index_add_(0, dst, h[src] * edge_weight.to(h.dtype).unsqueeze(1))
        out = self.lin(agg)
        return F.relu(out) if self.activation else out


def gcn_edges(adjacency: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Directed edge list with self-loops plus symmetric-norm coefficients."""
    n = adjacency.shape[0]
    a_hat = adjacency.astype(np.float64).copy()
    np.fill_diagonal(a_hat, 1.0)
    deg = a_hat.sum(axis=1)
    src, dst = np.nonzero(a_hat)
    coef = 1.0 / np.sqrt(deg[src] * deg[dst])
    edge_index = torch.from_numpy(np.stack([src, dst]).astype(np.int64))
    return edge_index, torch.from_numpy(coef)


# ---------------------------------------------------------------------------
# Parameters and optimization


class ParamStore:
    """Named view over a module's parameters with freezable name prefixes."""

    def __init__(self, module: nn.Module):
        self._params: dict[str, nn.Parameter] = dict(module.named_parameters())
        self._frozen_prefixes: list[str] = []

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str) -> nn.Parameter:
        return self._params[name]

    def items(self):
        return self._params.items()

    def select(self, *prefixes: str) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self._params.items()
                if any(n.startswith(pre) for pre in prefixes)}

    def split(self, *prefixes: str) -> tuple[dict[str, nn.Parameter], dict[str, nn.Parameter]]:
        """(parameters under any prefix, everything else)."""
        selected = self.select(*prefixes)
        rest = {n: p for n, p in self._params.items() if n not in selected}
        return selected, rest

    def freeze(self, prefix: str = "") -> None:
        """Mark parameters under ``prefix`` frozen; they receive no updates."""
        self._frozen_prefixes.append(prefix)
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.requires_grad_(False)

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(pre) for pre in self._frozen_prefixes)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy() for n, p in self._params.items()}


class AdamW:
    """Adam with decoupled weight decay over named parameter groups.

    ``groups`` is a list of ``{"params": {name: tensor}, "lr": float}``.
    Frozen parameters (``requires_grad == False``) and parameters without a
    gradient are skipped entirely, weight decay included.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.groups = [{"params": dict(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}
        seen = set()
        for g in self.groups:
            for name in g["params"]:
                if name in seen:
                    raise ValueError(f"parameter {name!r} appears in multiple groups")
                seen.add(name)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"].values():
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for g in self.groups:
            lr = g["lr"]
            for name, p in g["params"].items():
                if not p.requires_grad or p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise NumericError(f"non-finite gradient for parameter {name!r}")
                if name not in self._m:
                    self._m[name] = torch.zeros_like(p)
                    self._v[name] = torch.zeros_like(p)
                m, v = self._m[name], self._v[name]
                m.mul_(b1).add_(grad, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
                update = (m / bias1) / ((v / bias2).sqrt() + self.eps)
                update = update + self.weight_decay * p
                p.add_(update, alpha=-lr)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {n: t.clone() for n, t in self._m.items()},
            "v": {n: t.clone() for n, t in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self._m = {n: t.clone() for n, t in state["m"].items()}
        self._v = {n: t.clone() for n, t in state["v"].items()}


def single_group(params: Mapping[str, torch.Tensor], lr: float) -> list[dict]:
    return [{"params": dict(params), "lr": lr}]


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckResult:
    """Max relative error per parameter from a central-difference check.

    The relative error uses a magnitude floor of 1e-3, so gradients smaller
    than the float64 finite-difference noise floor do not produce spurious
    failures: err = |fd - analytic| / max(|fd|, |analytic|, 1e-3).
    """

    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.errors) and all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {n: e for n, e in self.errors.items() if e >= self.tolerance}

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def summary(self) -> str:
        lines = [f"gradient check (tolerance {self.tolerance:g}):"]
        for name, err in sorted(self.errors.items(), key=lambda kv: -kv[1]):
            status = "ok  " if err < self.tolerance else "FAIL"
            lines.append(f"  {status} {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], torch.Tensor],
               params: Mapping[str, torch.Tensor],
               tolerance: float = 1e-4,
               step: float = 1e-5,
               max_entries: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients against central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values. Parameters should be float64 leaves. When ``max_entries`` is set,
    only that many entries per parameter are perturbed (chosen by ``seed``).
    """
    tensors = list(params.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for (name, p), grad in zip(params.items(), grads):
        flat = p.detach().view(-1)
        numel = flat.numel()
        if max_entries is None or numel <= max_entries:
            picks = range(numel)
        else:
            picks = rng.choice(numel, size=max_entries, replace=False)
        worst = 0.0
        for idx in picks:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                f_plus = float(loss_fn())
                flat[idx] = orig - step
                f_minus = float(loss_fn())
                flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(grad.reshape(-1)[idx])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckResult(errors, tolerance)
