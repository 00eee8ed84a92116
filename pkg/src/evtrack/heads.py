"""Center-based tracking head, box decoding, and training losses.

Boxes are corner-format ``(x, y, w, h)`` in search-crop-normalized [0, 1]
coordinates everywhere outside the head; center format exists only between
the response maps and the decoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError


@dataclass
class Prediction:
    """One decoded tracker output in search-crop normalized coordinates."""

    box: tuple[float, float, float, float]
    confidence: float
    score_map: np.ndarray | None = None
    offset_map: np.ndarray | None = None
    size_map: np.ndarray | None = None


@dataclass
class LossBundle:
    """The four weighted loss terms and their total."""

    focal: float
    l1: float
    giou: float
    kd: float
    lambdas: tuple[float, float, float, float]
    total: float


class CenterHead(nn.Module):
    """Score/offset/size branches over the search-token grid.

    Each branch stacks three 3x3 convolutions with channel halving and a
    final 1x1 projection. All three outputs pass through a sigmoid: the
    score map is a probability, offsets are sub-cell positions in [0, 1),
    and sizes are crop-normalized extents.
    """

    def __init__(self, dim: int):
        super().__init__()
        chans = [dim, max(dim // 2, 1), max(dim // 4, 1), max(dim // 8, 1)]
        self.score = self._branch(chans, 1)
        self.offset = self._branch(chans, 2)
        self.size = self._branch(chans, 2)

    @staticmethod
    def _branch(chans, out_channels: int) -> nn.Sequential:
        layers: list[nn.Module] = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(chans[-1], out_channels, 1))
        return nn.Sequential(*layers)

    def forward(self, search_tokens: torch.Tensor):
        """(B, N_s, C) search tokens -> (score (B,H,W), offset (B,2,H,W), size)."""
        b, n, c = search_tokens.shape
        m = math.isqrt(n)
        if m * m != n:
            raise ValueError(f"search token count {n} is not a square grid")
        grid = search_tokens.transpose(1, 2).reshape(b, c, m, m)
        score = torch.sigmoid(self.score(grid)).squeeze(1)
        offset = torch.sigmoid(self.offset(grid))
        size = torch.sigmoid(self.size(grid))
        return score, offset, size


def decode_boxes(score: torch.Tensor, offset: torch.Tensor,
                 size: torch.Tensor) -> torch.Tensor:
    """Decode (B, 4) corner boxes at the score argmax of each sample.

    The argmax index is discrete (ties pick the lowest row-major index), but
    gradients flow through the gathered offset and size values.
    """
    b, h, w = score.shape
    flat_idx = torch.argmax(score.reshape(b, -1), dim=1)
    rows = torch.div(flat_idx, w, rounding_mode="floor")
    cols = flat_idx % w
    batch = torch.arange(b, device=score.device)
    off = offset[batch, :, rows, cols]
    sz = size[batch, :, rows, cols]
    cx = (cols.to(off.dtype) + off[:, 0]) / w
    cy = (rows.to(off.dtype) + off[:, 1]) / h
    return torch.stack([cx - sz[:, 0] / 2, cy - sz[:, 1] / 2, sz[:, 0], sz[:, 1]], dim=1)


def decode_box(score: torch.Tensor, offset: torch.Tensor, size: torch.Tensor,
               keep_maps: bool = False) -> Prediction:
    """Decode a single sample into a Prediction, clipping into [0, 1]^2."""
    box = decode_boxes(score[None], offset[None], size[None])[0].detach()
    x, y, bw, bh = (float(v) for v in box)
    x2, y2 = min(x + bw, 1.0), min(y + bh, 1.0)
    x, y = max(x, 0.0), max(y, 0.0)
    confidence = float(score.max())
    maps = (score.detach().cpu().numpy(), offset.detach().cpu().numpy(),
            size.detach().cpu().numpy()) if keep_maps else (None, None, None)
    return Prediction((x, y, max(x2 - x, 0.0), max(y2 - y, 0.0)), confidence, *maps)


# ---------------------------------------------------------------------------
# Target encoding


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet radius: the largest displacement keeping IoU >= min_overlap."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 ** 2 - 4 * a1 * c1, 0.0))) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(max(b2 ** 2 - 4 * a2 * c2, 0.0))) / 2

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3 ** 2 - 4 * a3 * c3, 0.0))) / 2
    return min(r1, r2, r3)


def encode_targets(box, map_size: int, dtype=torch.float32):
    """Gaussian-splatted score target plus offset/size targets for one box.

    ``box`` is corner-format, crop-normalized. Returns ``(score_target,
    offset_target, size_target, (row, col))`` where the score target peaks at
    exactly 1 in the center cell.
    """
    x, y, w, h = (float(v) for v in box)
    m = map_size
    cx, cy = (x + w / 2) * m, (y + h / 2) * m
    col = min(max(int(cx), 0), m - 1)
    row = min(max(int(cy), 0), m - 1)
    radius = max(0, int(gaussian_radius(h * m, w * m)))
    sigma = (2 * radius + 1) / 6.0
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    target = np.exp(-((jj - col) ** 2 + (ii - row) ** 2) / (2 * sigma ** 2))
    target[target < np.finfo(np.float32).eps] = 0.0
    target[row, col] = 1.0
    score_target = torch.from_numpy(target).to(dtype)
    offset_target = torch.tensor([cx - col, cy - row], dtype=dtype)
    size_target = torch.tensor([w, h], dtype=dtype)
    return score_target, offset_target, size_target, (row, col)


# ---------------------------------------------------------------------------
# Losses


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss against a Gaussian target.

    Cells where the target is exactly 1 are positives; the loss sum is
    normalized by the positive count.
    """
    if pred.shape != target.shape:
        raise ValueError(f"score map shape {tuple(pred.shape)} does not match "
                         f"target {tuple(target.shape)}")
    eps = 1e-12
    p = pred.clamp(eps, 1.0 - eps)
    pos = (target == 1.0).to(pred.dtype)
    neg = 1.0 - pos
    pos_term = torch.log(p) * (1.0 - p) ** alpha * pos
    neg_term = torch.log(1.0 - p) * p ** alpha * (1.0 - target) ** beta * neg
    n_pos = pos.sum().clamp(min=1.0)
    return -(pos_term.sum() + neg_term.sum()) / n_pos


def l1_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the four box coordinates."""
    return (pred_box - gt_box).abs().mean()


def _corner_to_xyxy(box: torch.Tensor) -> torch.Tensor:
    return torch.stack([box[..., 0], box[..., 1],
                        box[..., 0] + box[..., 2], box[..., 1] + box[..., 3]], dim=-1)


def giou(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of corner-format (x, y, w, h) boxes."""
    a = _corner_to_xyxy(box_a)
    b = _corner_to_xyxy(box_b)
    area_a = box_a[..., 2] * box_a[..., 3]
    area_b = box_b[..., 2] * box_b[..., 3]
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    iou = inter / union
    return iou - (hull - union) / hull


def giou_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """1 - GIoU, averaged when given a batch; lies in [0, 2]."""
    return (1.0 - giou(pred_box, gt_box)).mean()


def kd_loss(fast_features: torch.Tensor, slow_features: torch.Tensor) -> torch.Tensor:
    """Mean squared feature distance; the slow (teacher) side is detached."""
    if fast_features.shape != slow_features.shape:
        raise ValueError(
            f"feature shape mismatch: fast {tuple(fast_features.shape)} vs "
            f"slow {tuple(slow_features.shape)}"
        )
    return ((fast_features - slow_features.detach()) ** 2).mean()


def total_loss(focal: torch.Tensor, l1: torch.Tensor, giou_term: torch.Tensor,
               kd: torch.Tensor | float,
               lambdas=(1.0, 14.0, 1.0, 0.1)) -> tuple[torch.Tensor, LossBundle]:
    """Weighted sum of the four terms; stage-1 callers pass kd = 0."""
    if not isinstance(kd, torch.Tensor):
        kd = focal.new_tensor(float(kd))
    terms = {"focal": focal, "l1": l1, "giou": giou_term, "kd": kd}
    for name, term in terms.items():
        if not torch.isfinite(term).all():
            raise NumericError(f"non-finite {name} loss term: {float(term)}")
    l1_w, l2_w, l3_w, l4_w = lambdas
    total = l1_w * focal + l2_w * l1 + l3_w * giou_term + l4_w * kd
    bundle = LossBundle(float(focal.detach()), float(l1.detach()),
                        float(giou_term.detach()), float(kd.detach()),
                        tuple(float(v) for v in lambdas), float(total.detach()))
    return total, bundle
