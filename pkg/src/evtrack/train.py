"""Two-stage training: independent slow/fast stage 1, distillation stage 2.

Stage 1 minimizes the focal + L1 + GIoU loss (the KD weight is forced to
zero). Stage 2 freezes the slow tracker, runs it as the teacher, and
fine-tunes the fast tracker with the full four-term loss. Sampling is keyed
per (seed, epoch), so resuming from an epoch checkpoint reproduces an
uninterrupted run exactly.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Tracker, TrackerOutput, build_fast_tracker, build_slow_tracker
from .checkpoint import (Checkpoint, config_dict, load_arrays_into,
                         load_checkpoint, save_checkpoint)
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, NumericError, ValidationError
from .events import SequenceRecord, crop_region, stack_events, window_slice
from .fusion import PreparedGraph, prepare_graph
from .graphs import build_knn_graph, downsample_uniform
from .heads import (decode_boxes, encode_targets, focal_loss, giou_loss,
                    kd_loss, l1_loss, total_loss)
from .nn_core import AdamW, ParamStore


@dataclass
class Batch:
    template: torch.Tensor  # (B, C, Ht, Wt)
    search: torch.Tensor  # (B, C, Hs, Ws)
    graphs: list[PreparedGraph]
    gt_boxes: torch.Tensor  # (B, 4) crop-normalized corner boxes
    sources: list[tuple[int, int, int]]  # (record, template window, search window)


class PairSampler:
    """Draw (template window i, search window i + delta) training pairs.

    delta is uniform in [1, delta_window_max]; the search crop center is
    jittered by up to ``center_jitter * sqrt(w * h)`` per axis so the target
    is not always centered. Windows without events are resampled.
    """

    def __init__(self, records: list[SequenceRecord], model_cfg: ModelConfig,
                 train_cfg: TrainConfig):
        if not records:
            raise ValidationError("training requires at least one sequence")
        for r, rec in enumerate(records):
            if rec.n_windows < 2:
                raise ValidationError(f"sequence {r} has fewer than two windows")
        self.records = records
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.frames = [stack_events(rec.stream, rec.delta_t) for rec in records]

    @property
    def total_windows(self) -> int:
        return sum(rec.n_windows for rec in self.records)

    def _sample_one(self, rng: np.random.Generator):
        cfg = self.model_cfg
        for _ in range(64):
            r = int(rng.integers(len(self.records)))
            rec = self.records[r]
            i = int(rng.integers(rec.n_windows - 1))
            delta = int(rng.integers(1, self.train_cfg.delta_window_max + 1))
            j = min(i + delta, rec.n_windows - 1)
            window = window_slice(rec.stream, j, rec.delta_t)
            if len(window) == 0:
                continue
            template, _ = crop_region(self.frames[r].data[i], rec.ground_truth[i],
                                      cfg.template_context, cfg.template_size)
            gt = rec.ground_truth[j]
            jit = self.train_cfg.center_jitter * math.sqrt(gt[2] * gt[3])
            dx, dy = rng.uniform(-jit, jit, size=2)
            crop_box = (gt[0] + dx, gt[1] + dy, gt[2], gt[3])
            search, transform = crop_region(self.frames[r].data[j], crop_box,
                                            cfg.search_context, cfg.search_size)
            gt_norm = transform.sensor_to_norm(gt)
            graph = build_knn_graph(downsample_uniform(window, cfg.max_points), cfg.knn_k)
            prepared = prepare_graph(graph, cfg.voxel_grid)
            return template, search, prepared, gt_norm, (r, i, j)
        raise ValidationError("could not sample a window with events after 64 tries")

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        items = [self._sample_one(rng) for _ in range(size)]
        return Batch(
            template=torch.from_numpy(np.stack([it[0] for it in items])),
            search=torch.from_numpy(np.stack([it[1] for it in items])),
            graphs=[it[2] for it in items],
            gt_boxes=torch.tensor(np.stack([it[3] for it in items]), dtype=torch.float32),
            sources=[it[4] for it in items],
        )


def compute_losses(output: TrackerOutput, gt_boxes: torch.Tensor, lambdas,
                   teacher_features: torch.Tensor | None = None):
    """Assemble the four-term loss from one forward pass."""
    map_size = output.score.shape[-1]
    targets = torch.stack([
        encode_targets(gt_boxes[i], map_size, dtype=output.score.dtype)[0]
        for i in range(gt_boxes.shape[0])
    ])
    focal = focal_loss(output.score, targets)
    pred = decode_boxes(output.score, output.offset, output.size)
    l1 = l1_loss(pred, gt_boxes)
    gi = giou_loss(pred, gt_boxes)
    kd = kd_loss(output.search_features, teacher_features) \
        if teacher_features is not None else 0.0
    return total_loss(focal, l1, gi, kd, lambdas)


def build_optimizer(store: ParamStore, cfg: TrainConfig) -> AdamW:
    """Backbone and GCN parameters get their own learning rates."""
    gcn, rest = store.split("pyramid.")
    groups = [{"params": rest, "lr": cfg.lr_backbone},
              {"params": gcn, "lr": cfg.lr_gcn}]
    return AdamW(groups, weight_decay=cfg.weight_decay)


@dataclass
class EpochStats:
    epoch: int
    total: float
    focal: float
    l1: float
    giou: float
    kd: float
    probe_total: float


@dataclass
class TrainResult:
    model: Tracker
    history: list[EpochStats]
    checkpoint_path: Path | None


def save_loss_curve(history: list[EpochStats], path) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch,total,focal,l1,giou,kd,probe_total\n")
        for row in history:
            fh.write(f"{row.epoch},{row.total:.6f},{row.focal:.6f},{row.l1:.6f},"
                     f"{row.giou:.6f},{row.kd:.6f},{row.probe_total:.6f}\n")


# ---------------------------------------------------------------------------
# Tracker checkpoints


def save_tracker(path, model: Tracker, kind: str, optimizer: AdamW | None = None,
                 extra: dict | None = None) -> Path:
    arrays: dict = {f"model.{n}": p for n, p in model.named_parameters()}
    if optimizer is not None:
        state = optimizer.state_dict()
        arrays["optim.step"] = np.asarray([state["step_count"]], dtype=np.int64)
        for n, t in state["m"].items():
            arrays[f"optim.m.{n}"] = t
        for n, t in state["v"].items():
            arrays[f"optim.v.{n}"] = t
    info = {"kind": kind, "depth": model.depth}
    info.update(extra or {})
    save_checkpoint(path, arrays, config_dict(model.cfg), extra=info)
    return Path(path)


def _build_from_config(config: dict, kind: str, plan=None) -> Tracker:
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in config.items()})
    if kind == "slow":
        return build_slow_tracker(cfg, plan=plan)
    return build_fast_tracker(cfg, plan=plan)


def load_tracker(path, plan=None) -> tuple[Tracker, Checkpoint]:
    """Rebuild a tracker from a checkpoint's stored config and weights."""
    ckpt = load_checkpoint(path)
    kind = ckpt.extra.get("kind")
    if kind not in ("slow", "fast"):
        raise ValidationError(f"{path}: not a single-tracker checkpoint (kind={kind!r})")
    model = _build_from_config(ckpt.config, kind, plan)
    load_arrays_into(model, ckpt.select("model."))
    return model, ckpt


def _load_optimizer(optimizer: AdamW, ckpt: Checkpoint) -> None:
    m = ckpt.select("optim.m.")
    v = ckpt.select("optim.v.")
    optimizer.load_state_dict({
        "step_count": int(ckpt.arrays["optim.step"][0]),
        "m": {n: torch.from_numpy(a.copy()) for n, a in m.items()},
        "v": {n: torch.from_numpy(a.copy()) for n, a in v.items()},
    })


def save_unified(path, slow: Tracker, fast: Tracker, extra: dict | None = None) -> Path:
    arrays: dict = {f"slow.{n}": p for n, p in slow.named_parameters()}
    arrays.update({f"fast.{n}": p for n, p in fast.named_parameters()})
    info = {"kind": "unified"}
    info.update(extra or {})
    save_checkpoint(path, arrays, config_dict(slow.cfg), extra=info)
    return Path(path)


def load_unified(path) -> tuple[Tracker, Tracker, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.extra.get("kind") != "unified":
        raise ValidationError(f"{path}: not a unified checkpoint")
    slow = _build_from_config(ckpt.config, "slow")
    fast = _build_from_config(ckpt.config, "fast")
    load_arrays_into(slow, ckpt.select("slow."))
    load_arrays_into(fast, ckpt.select("fast."))
    return slow, fast, ckpt


def load_any(path) -> dict[str, Tracker]:
    """Load whichever trackers a checkpoint holds, keyed by kind."""
    ckpt = load_checkpoint(path)
    kind = ckpt.extra.get("kind")
    if kind == "unified":
        slow, fast, _ = load_unified(path)
        return {"slow": slow, "fast": fast}
    model, _ = load_tracker(path)
    return {kind: model}


# ---------------------------------------------------------------------------
# Training stages


def _probe_batch(sampler: PairSampler, train_cfg: TrainConfig) -> Batch:
    rng = np.random.default_rng((train_cfg.seed, 0x9E3779B9))
    return sampler.batch(rng, min(train_cfg.batch_size, 8))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch))


def _steps_per_epoch(train_cfg: TrainConfig, sampler: PairSampler) -> int:
    if train_cfg.batches_per_epoch > 0:
        return train_cfg.batches_per_epoch
    return max(1, -(-sampler.total_windows // train_cfg.batch_size))


def train_stage1(model_cfg: ModelConfig, train_cfg: TrainConfig,
                 records: list[SequenceRecord], which: str = "slow",
                 out_dir=None, resume_from=None) -> TrainResult:
    """Train one tracker from scratch on ground-truth boxes (no KD term)."""
    if which not in ("slow", "fast"):
        raise ConfigError(f"which must be 'slow' or 'fast', got {which!r}")
    train_cfg.validate()
    build = build_slow_tracker if which == "slow" else build_fast_tracker
    model = build(model_cfg, seed=train_cfg.seed)
    store = ParamStore(model)
    optimizer = build_optimizer(store, train_cfg)
    sampler = PairSampler(records, model_cfg, train_cfg)
    probe = _probe_batch(sampler, train_cfg)
    lambdas = (*train_cfg.lambdas[:3], 0.0)

    start_epoch = 0
    history: list[EpochStats] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_arrays_into(model, ckpt.select("model."))
        _load_optimizer(optimizer, ckpt)
        start_epoch = int(ckpt.extra["epochs_done"])

    steps = _steps_per_epoch(train_cfg, sampler)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = _epoch_rng(train_cfg.seed, epoch)
        sums = np.zeros(5)
        for step_i in range(steps):
            batch = sampler.batch(rng, train_cfg.batch_size)
            output = model(batch.template, batch.search, graphs=batch.graphs)
            try:
                total, bundle = compute_losses(output, batch.gt_boxes, lambdas)
            except NumericError as err:
                raise NumericError(
                    f"{err} at epoch {epoch} step {step_i}, "
                    f"batch sources {batch.sources}") from err
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums += (bundle.total, bundle.focal, bundle.l1, bundle.giou, bundle.kd)
        with torch.no_grad():
            p_out = model(probe.template, probe.search, graphs=probe.graphs)
            _, p_bundle = compute_losses(p_out, probe.gt_boxes, lambdas)
        history.append(EpochStats(epoch, *(sums / steps), p_bundle.total))
        if out_dir is not None and train_cfg.save_every and \
                (epoch + 1) % train_cfg.save_every == 0:
            save_tracker(out_dir / f"{which}_epoch{epoch + 1:03d}.ckpt", model, which,
                         optimizer, {"epochs_done": epoch + 1})
    if out_dir is not None:
        ckpt_path = save_tracker(out_dir / f"{which}.ckpt", model, which, optimizer,
                                 {"epochs_done": train_cfg.epochs})
        save_loss_curve(history, out_dir / f"{which}_loss.csv")
    return TrainResult(model, history, ckpt_path)


@dataclass
class Stage2Result:
    slow: Tracker
    fast: Tracker
    history: list[EpochStats]
    kd_probe: list[float]  # probe-batch KD MSE per epoch, index 0 = before training
    checkpoint_path: Path | None


def _probe_kd(slow: Tracker, fast: Tracker, probe: Batch) -> float:
    with torch.no_grad():
        teacher = slow(probe.template, probe.search, graphs=probe.graphs)
        student = fast(probe.template, probe.search, graphs=probe.graphs)
        return float(kd_loss(student.search_features, teacher.search_features))


def train_stage2(model_cfg: ModelConfig, train_cfg: TrainConfig,
                 records: list[SequenceRecord], slow_ckpt, fast_ckpt,
                 out_dir=None) -> Stage2Result:
    """Unify the trackers: freeze the slow teacher, distill into the fast one."""
    train_cfg.validate()
    slow, _ = load_tracker(slow_ckpt)
    fast, _ = load_tracker(fast_ckpt)
    if slow.cfg.embed_dim != fast.cfg.embed_dim or \
            slow.cfg.n_search_tokens != fast.cfg.n_search_tokens:
        raise ConfigError(
            "teacher/student feature shapes differ: "
            f"({slow.cfg.n_search_tokens}, {slow.cfg.embed_dim}) vs "
            f"({fast.cfg.n_search_tokens}, {fast.cfg.embed_dim})")
    slow_store = ParamStore(slow)
    slow_store.freeze("")
    slow.eval()
    fast_store = ParamStore(fast)
    optimizer = build_optimizer(fast_store, train_cfg)
    sampler = PairSampler(records, model_cfg, train_cfg)
    probe = _probe_batch(sampler, train_cfg)

    history: list[EpochStats] = []
    kd_probe = [_probe_kd(slow, fast, probe)]
    steps = _steps_per_epoch(train_cfg, sampler)
    for epoch in range(train_cfg.epochs):
        rng = _epoch_rng(train_cfg.seed, epoch)
        sums = np.zeros(5)
        for step_i in range(steps):
            batch = sampler.batch(rng, train_cfg.batch_size)
            with torch.no_grad():
                teacher = slow(batch.template, batch.search, graphs=batch.graphs)
            output = fast(batch.template, batch.search, graphs=batch.graphs)
            try:
                total, bundle = compute_losses(output, batch.gt_boxes,
                                               train_cfg.lambdas,
                                               teacher.search_features)
            except NumericError as err:
                raise NumericError(
                    f"{err} at epoch {epoch} step {step_i}, "
                    f"batch sources {batch.sources}") from err
            optimizer.zero_grad()
            total.backward()
            for name, p in slow_store.items():
                if p.grad is not None:
                    raise AssertionError(
                        f"frozen teacher parameter {name!r} received a gradient")
            optimizer.step()
            sums += (bundle.total, bundle.focal, bundle.l1, bundle.giou, bundle.kd)
        kd_probe.append(_probe_kd(slow, fast, probe))
        history.append(EpochStats(epoch, *(sums / steps), kd_probe[-1]))
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_path = save_unified(out_dir / "unified.ckpt", slow, fast,
                                 {"epochs_done": train_cfg.epochs})
        save_loss_curve(history, out_dir / "finetune_loss.csv")
    return Stage2Result(slow, fast, history, kd_probe, ckpt_path)
