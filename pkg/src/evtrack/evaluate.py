"""Tracking protocol, SR/PR/NPR metrics, and the latency/FLOP bench.

The protocol is one-pass: the template comes from window 0's ground truth,
the search region is centered on the previous prediction, and window 0's
output is the ground-truth box itself. Slow tracking emits one box per
window from that window's frame; fast tracking emits k boxes per window from
the *previous* window's frame plus the current window's accumulating events.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import flops
from .backbone import Tracker
from .errors import ValidationError
from .events import SequenceRecord, crop_region, stack_events, window_slice
from .fusion import PyramidFeatures, accumulate_and_track, window_graph_features
from .heads import decode_box


@dataclass
class TrackRun:
    """Predicted boxes (sensor pixels) plus per-output timing and graph stats."""

    boxes: np.ndarray  # (n_outputs, 4)
    times_us: np.ndarray  # (n_outputs,) data timestamp of each output
    latencies: np.ndarray  # (n_outputs,) seconds of compute per output
    mode: str  # "slow" | "fast"
    k: int  # outputs per window (1 for slow)
    n_windows: int
    graph_sizes: np.ndarray  # (n_outputs, 3) nodes / directed edges / clusters

    def per_window_boxes(self) -> np.ndarray:
        """The box scored against each window's ground truth (last output)."""
        return self.boxes[self.k - 1::self.k]


def _clamp_box(box, sensor_size, min_side: float = 2.0):
    h, w = sensor_size
    x, y, bw, bh = box
    bw = min(max(bw, min_side), w)
    bh = min(max(bh, min_side), h)
    cx = min(max(x + bw / 2, 0.0), w - 1.0)
    cy = min(max(y + bh / 2, 0.0), h - 1.0)
    return (cx - bw / 2, cy - bh / 2, bw, bh)


def track_sequence(model: Tracker, record: SequenceRecord, mode: str = "slow",
                   k: int = 3) -> TrackRun:
    """Run the one-pass protocol over a sequence."""
    if mode not in ("slow", "fast"):
        raise ValueError(f"mode must be 'slow' or 'fast', got {mode!r}")
    if mode == "slow":
        k = 1
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cfg = model.cfg
    frames = stack_events(record.stream, record.delta_t)
    n = record.n_windows
    delta_t = record.delta_t
    model.eval()

    boxes = [tuple(record.ground_truth[0])] * k
    lat0 = time.perf_counter()
    template, _ = crop_region(frames.data[0], record.ground_truth[0],
                              cfg.template_context, cfg.template_size)
    template_t = torch.from_numpy(template)[None]
    init_latency = max(time.perf_counter() - lat0, 1e-9)
    latencies = [init_latency] * k
    times = [min((j + 1) * delta_t // k, record.stream.duration) for j in range(k)]
    graph_sizes = [(0, 0, 0)] * k

    prev_box = record.ground_truth[0]
    prev_feats: PyramidFeatures | None = None
    with torch.no_grad():
        for i in range(1, n):
            window = window_slice(record.stream, i, delta_t)
            start_us = i * delta_t
            span = window.duration
            if mode == "slow":
                t0 = time.perf_counter()
                search, transform = crop_region(frames.data[i], prev_box,
                                                cfg.search_context, cfg.search_size)
                search_t = torch.from_numpy(search)[None]
                if model.plan.empty:
                    feats = None
                elif len(window) == 0:
                    feats = prev_feats if prev_feats is not None \
                        else PyramidFeatures.zeros(cfg.embed_dim)
                else:
                    feats, _ = window_graph_features(model, window)
                    prev_feats = feats
                tokens, _, _ = model.backbone_tokens(
                    template_t, search_t,
                    _batched(feats) if feats is not None else None)
                tokens = model.apply_final_fusion(
                    tokens, _batched(feats) if feats is not None else None)
                score, offset, size = model.predict(tokens)
                pred = decode_box(score[0], offset[0], size[0])
                box = _clamp_box(transform.norm_to_sensor(pred.box),
                                 record.stream.sensor_size)
                boxes.append(box)
                latencies.append(max(time.perf_counter() - t0, 1e-9))
                times.append(min(start_us + span, record.stream.duration))
                graph_sizes.append((len(window), 0, 0))
                prev_box = box
            else:
                # causal: tokens come from the last complete frame window
                t0 = time.perf_counter()
                search, transform = crop_region(frames.data[i - 1], prev_box,
                                                cfg.search_context, cfg.search_size)
                search_t = torch.from_numpy(search)[None]
                cached, _, _ = model.backbone_tokens(template_t, search_t)
                backbone_time = time.perf_counter() - t0
                result = accumulate_and_track(model, cached, window, k, prev_feats)
                prev_feats = result.features
                for j, pred in enumerate(result.predictions):
                    box = _clamp_box(transform.norm_to_sensor(pred.box),
                                     record.stream.sensor_size)
                    boxes.append(box)
                    extra = backbone_time if j == 0 else 0.0
                    latencies.append(max(result.latencies[j] + extra, 1e-9))
                    times.append(start_us + min((j + 1) * span // k, span))
                    graph_sizes.append(result.graph_sizes[j])
                prev_box = boxes[-1]
    return TrackRun(np.asarray(boxes, dtype=np.float64),
                    np.asarray(times, dtype=np.int64),
                    np.asarray(latencies, dtype=np.float64),
                    mode, k, n, np.asarray(graph_sizes, dtype=np.int64))


def _batched(feats: PyramidFeatures) -> PyramidFeatures:
    if feats.f1.dim() == 1:
        return PyramidFeatures(feats.f1[None], feats.f2[None], feats.f3[None])
    return feats


# ---------------------------------------------------------------------------
# Metrics


def iou_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner-format (x, y, w, h) boxes; broadcasts over rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, 0], b[:, 0])
    y1 = np.maximum(a[:, 1], b[:, 1])
    x2 = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    y2 = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    dx = (pred[:, 0] + pred[:, 2] / 2) - (gt[:, 0] + gt[:, 2] / 2)
    dy = (pred[:, 1] + pred[:, 3] / 2) - (gt[:, 1] + gt[:, 3] / 2)
    return np.sqrt(dx * dx + dy * dy)


def normalized_center_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    dx = ((pred[:, 0] + pred[:, 2] / 2) - (gt[:, 0] + gt[:, 2] / 2)) / gt[:, 2]
    dy = ((pred[:, 1] + pred[:, 3] / 2) - (gt[:, 1] + gt[:, 3] / 2)) / gt[:, 3]
    return np.sqrt(dx * dx + dy * dy)


SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
PRECISION_PIXELS = 20.0
PRECISION_CURVE_PIXELS = np.linspace(0.0, 50.0, 51)


@dataclass
class MetricsReport:
    sr: float
    pr: float
    npr: float
    n_windows: int
    success_curve: np.ndarray  # fraction passing each SUCCESS_THRESHOLDS entry
    precision_curve: np.ndarray  # fraction within each PRECISION_CURVE_PIXELS radius
    norm_precision_curve: np.ndarray


def metrics_from_overlaps(ious: np.ndarray, errors_px: np.ndarray,
                          norm_errors: np.ndarray) -> MetricsReport:
    """SR/PR/NPR from per-window overlaps and center errors.

    SR averages the pass fraction over 21 IoU thresholds; at threshold 0 only
    strictly positive overlap counts. PR uses an inclusive 20-pixel radius.
    NPR averages over 51 size-normalized thresholds in [0, 0.5].
    """
    ious = np.asarray(ious, dtype=np.float64)
    success = np.array([
        np.mean(ious > t) if t == 0 else np.mean(ious >= t)
        for t in SUCCESS_THRESHOLDS
    ])
    precision_curve = np.array([np.mean(errors_px <= t) for t in PRECISION_CURVE_PIXELS])
    norm_curve = np.array([np.mean(norm_errors <= t) for t in NORM_PRECISION_THRESHOLDS])
    return MetricsReport(
        sr=100.0 * float(success.mean()),
        pr=100.0 * float(np.mean(errors_px <= PRECISION_PIXELS)),
        npr=100.0 * float(norm_curve.mean()),
        n_windows=len(ious),
        success_curve=success,
        precision_curve=precision_curve,
        norm_precision_curve=norm_curve,
    )


def compute_metrics(run: TrackRun, record: SequenceRecord) -> MetricsReport:
    """Score a run against a sequence; fast runs score the last output per window."""
    pred = run.per_window_boxes()
    gt = record.ground_truth
    if len(pred) != len(gt):
        raise ValidationError(
            f"prediction count {len(pred)} does not match {len(gt)} windows")
    return metrics_from_overlaps(iou_xywh(pred, gt), center_errors(pred, gt),
                                 normalized_center_errors(pred, gt))


def pooled_metrics(runs: list[TrackRun], records: list[SequenceRecord]) -> MetricsReport:
    """Metrics over all windows of several sequences pooled together."""
    ious, errs, nerrs = [], [], []
    for run, record in zip(runs, records):
        pred = run.per_window_boxes()
        ious.append(iou_xywh(pred, record.ground_truth))
        errs.append(center_errors(pred, record.ground_truth))
        nerrs.append(normalized_center_errors(pred, record.ground_truth))
    return metrics_from_overlaps(np.concatenate(ious), np.concatenate(errs),
                                 np.concatenate(nerrs))


def mean_training_iou(model: Tracker, records: list[SequenceRecord],
                      mode: str = "slow", k: int = 1) -> float:
    """Mean IoU over windows 1..N-1 (window 0 is the given initialization)."""
    ious = []
    for record in records:
        run = track_sequence(model, record, mode=mode, k=k)
        per_window = iou_xywh(run.per_window_boxes(), record.ground_truth)
        ious.append(per_window[1:])
    return float(np.mean(np.concatenate(ious)))


# ---------------------------------------------------------------------------
# Result files


def save_results(run: TrackRun, path) -> None:
    """One "x,y,w,h,t_out_us" line per output."""
    with Path(path).open("w") as fh:
        for box, t in zip(run.boxes, run.times_us):
            fh.write(",".join(format(v, ".4f") for v in box) + f",{int(t)}\n")


def load_results(path) -> tuple[np.ndarray, np.ndarray]:
    boxes, times = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValidationError(f"{path}: expected 'x,y,w,h,t_out_us', got {line!r}")
        boxes.append([float(p) for p in parts[:4]])
        times.append(int(parts[4]))
    return np.asarray(boxes, dtype=np.float64), np.asarray(times, dtype=np.int64)


def save_report(report: MetricsReport, path, fps: float | None = None,
                extra: dict | None = None) -> None:
    payload = {
        "SR": round(report.sr, 4),
        "PR": round(report.pr, 4),
        "NPR": round(report.npr, 4),
        "n_windows": report.n_windows,
    }
    if fps is not None:
        payload["FPS"] = round(fps, 2)
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def save_curves(report: MetricsReport, directory, prefix: str = "") -> None:
    """Success / precision / normalized-precision curve data as CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    curves = [
        ("success", SUCCESS_THRESHOLDS, report.success_curve),
        ("precision", PRECISION_CURVE_PIXELS, report.precision_curve),
        ("norm_precision", NORM_PRECISION_THRESHOLDS, report.norm_precision_curve),
    ]
    for name, xs, ys in curves:
        with (directory / f"{prefix}{name}_curve.csv").open("w") as fh:
            fh.write("threshold,fraction\n")
            for x, y in zip(xs, ys):
                fh.write(f"{x:.4f},{y:.6f}\n")


# ---------------------------------------------------------------------------
# Latency / FLOP bench


@dataclass
class LatencyReport:
    mode: str
    k: int
    n_outputs: int
    median_s: float
    p95_s: float
    outputs_per_s: float
    flops_per_output: float
    flops_full_forward: int
    flops_incremental: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "k": self.k, "n_outputs": self.n_outputs,
            "median_ms": round(self.median_s * 1e3, 3),
            "p95_ms": round(self.p95_s * 1e3, 3),
            "outputs_per_s": round(self.outputs_per_s, 2),
            "flops_per_output": int(self.flops_per_output),
            "flops_full_forward": self.flops_full_forward,
            "flops_incremental": self.flops_incremental,
        }


def bench_latency(model: Tracker, record: SequenceRecord, mode: str = "slow",
                  k: int = 3, warmup: int = 10) -> LatencyReport:
    """Timed tracking run; the first ``warmup`` outputs are excluded."""
    run = track_sequence(model, record, mode=mode, k=k)
    lat = run.latencies[warmup:] if len(run.latencies) > warmup else run.latencies
    sizes = run.graph_sizes[run.graph_sizes[:, 0] > 0]
    if len(sizes):
        n_nodes, n_edges, n_clusters = (int(round(v)) for v in sizes.mean(axis=0))
    else:
        n_nodes, n_edges, n_clusters = model.cfg.max_points, 0, 1
    cfg = model.cfg
    if mode == "slow":
        full = flops.slow_forward_flops(cfg, n_nodes, n_edges, n_clusters,
                                        plan=model.plan)
        per_output = float(full)
        incremental = 0
    else:
        full = flops.fast_forward_flops(cfg, n_nodes, n_edges, n_clusters,
                                        plan=model.plan)
        incremental = flops.fast_incremental_flops(cfg, n_nodes, n_edges, n_clusters)
        per_output = flops.fast_per_output_flops(cfg, run.k, n_nodes, n_edges,
                                                 n_clusters)
    return LatencyReport(
        mode=mode,
        k=run.k,
        n_outputs=len(run.latencies),
        median_s=float(np.median(lat)),
        p95_s=float(np.percentile(lat, 95)),
        outputs_per_s=float(len(lat) / lat.sum()) if lat.sum() > 0 else math.inf,
        flops_per_output=per_output,
        flops_full_forward=full,
        flops_incremental=incremental,
    )
