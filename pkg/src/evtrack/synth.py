"""Synthetic event sequences with exact ground truth.

A single box moves across the sensor on a deterministic trajectory; events
fire on its boundary (Poisson per boundary pixel per window, polarity set by
the motion direction) on top of uniform background noise. Generation is keyed
per (seed, window) with a counter-based generator, so windows are independent
and the output is reproducible byte-for-byte.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .events import EventStream, SequenceRecord, num_windows, save_sequence


@dataclass
class SynthConfig:
    sensor_size: tuple[int, int] = (64, 64)  # (height, width)
    duration: int = 300_000  # microseconds
    delta_t: int = 10_000
    start_box: tuple[float, float, float, float] = (26.0, 26.0, 12.0, 12.0)
    velocity: tuple[float, float] = (1.0, 0.5)  # pixels per window
    sine_amp: tuple[float, float] = (0.0, 0.0)  # optional sinusoidal wobble
    sine_period: float = 12.0  # windows
    edge_rate: float = 3.0  # events per boundary pixel per window
    bg_rate: float = 0.02  # events per pixel per window
    seed: int = 0

    def validate(self):
        if self.edge_rate < 0 or self.bg_rate < 0:
            raise ValidationError("event rates must be >= 0")
        if self.delta_t <= 0 or self.duration < 0:
            raise ValidationError("delta_t must be positive and duration >= 0")
        if self.start_box[2] <= 0 or self.start_box[3] <= 0:
            raise ValidationError("start box must have positive size")
        if self.sine_period <= 0:
            raise ValidationError("sine_period must be positive")


def trajectory(cfg: SynthConfig) -> np.ndarray:
    """Per-window ground-truth boxes; errors if the center leaves the sensor."""
    cfg.validate()
    n = num_windows(cfg.duration, cfg.delta_t)
    x, y, bw, bh = cfg.start_box
    cx0, cy0 = x + bw / 2.0, y + bh / 2.0
    w_idx = np.arange(n, dtype=np.float64)
    phase = 2.0 * np.pi * w_idx / cfg.sine_period
    cx = cx0 + cfg.velocity[0] * w_idx + cfg.sine_amp[0] * np.sin(phase)
    cy = cy0 + cfg.velocity[1] * w_idx + cfg.sine_amp[1] * np.sin(phase)
    h, w = cfg.sensor_size
    if n and (cx.min() < 0 or cx.max() >= w or cy.min() < 0 or cy.max() >= h):
        raise ValidationError(
            f"trajectory leaves the {w}x{h} sensor "
            f"(center x in [{cx.min():.1f}, {cx.max():.1f}], "
            f"y in [{cy.min():.1f}, {cy.max():.1f}])"
        )
    return np.stack([cx - bw / 2.0, cy - bh / 2.0, np.full(n, bw), np.full(n, bh)], axis=1)


def _window_rng(seed: int, window: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=seed, spawn_key=(window,))))


def _boundary_pixels(box, sensor_size):
    """Integer perimeter ring of a box, clipped to the sensor, with edge tags.

    Tags: 0 left, 1 right, 2 top, 3 bottom (corners take the vertical edges).
    """
    h, w = sensor_size
    x, y, bw, bh = box
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = int(round(x + bw)) - 1, int(round(y + bh)) - 1
    pixels = []
    for yy in range(max(y0, 0), min(y1, h - 1) + 1):
        for xx, tag in ((x0, 0), (x1, 1)):
            if 0 <= xx < w:
                pixels.append((xx, yy, tag))
    for xx in range(max(x0 + 1, 0), min(x1 - 1, w - 1) + 1):
        for yy, tag in ((y0, 2), (y1, 3)):
            if 0 <= yy < h:
                pixels.append((xx, yy, tag))
    return pixels


def _edge_polarity(tag: int, velocity, rng) -> int:
    """Leading edges emit +1, trailing edges -1; ambiguous edges flip a coin."""
    vx, vy = velocity
    if tag in (0, 1) and vx != 0:
        leading = (tag == 1) == (vx > 0)
        return 1 if leading else -1
    if tag in (2, 3) and vy != 0:
        leading = (tag == 3) == (vy > 0)
        return 1 if leading else -1
    return int(rng.integers(0, 2)) * 2 - 1


def generate_sequence(cfg: SynthConfig) -> SequenceRecord:
    """Generate one synthetic sequence; deterministic given cfg.seed."""
    boxes = trajectory(cfg)
    n = len(boxes)
    h, w = cfg.sensor_size
    all_x, all_y, all_t, all_p = [], [], [], []
    for win in range(n):
        rng = _window_rng(cfg.seed, win)
        start = win * cfg.delta_t
        span = min((win + 1) * cfg.delta_t, cfg.duration) - start
        xs, ys, ts, ps = [], [], [], []
        for px, py, tag in _boundary_pixels(boxes[win], cfg.sensor_size):
            count = rng.poisson(cfg.edge_rate)
            for _ in range(count):
                xs.append(px)
                ys.append(py)
                ts.append(start + int(rng.integers(0, span)))
                ps.append(_edge_polarity(tag, cfg.velocity, rng))
        if cfg.bg_rate > 0:
            counts = rng.poisson(cfg.bg_rate, size=(h, w))
            for py, px in np.argwhere(counts > 0):
                for _ in range(int(counts[py, px])):
                    xs.append(int(px))
                    ys.append(int(py))
                    ts.append(start + int(rng.integers(0, span)))
                    ps.append(int(rng.integers(0, 2)) * 2 - 1)
        if ts:
            order = np.argsort(np.asarray(ts), kind="stable")
            all_x.append(np.asarray(xs, dtype=np.int64)[order])
            all_y.append(np.asarray(ys, dtype=np.int64)[order])
            all_t.append(np.asarray(ts, dtype=np.int64)[order])
            all_p.append(np.asarray(ps, dtype=np.int64)[order])
    if all_t:
        stream = EventStream(np.concatenate(all_x), np.concatenate(all_y),
                             np.concatenate(all_t), np.concatenate(all_p),
                             cfg.duration, cfg.sensor_size)
    else:
        stream = EventStream.empty(cfg.sensor_size, cfg.duration)
    return SequenceRecord(stream, cfg.delta_t, boxes, attributes=("synthetic",))


def vary_config(base: SynthConfig, seed: int, sequence_index: int) -> SynthConfig:
    """Derive a per-sequence config with randomized trajectory and box size."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=seed, spawn_key=(sequence_index,))))
    h, w = base.sensor_size
    n = num_windows(base.duration, base.delta_t)
    size = float(rng.uniform(10.0, 16.0))
    # pick a velocity that keeps the center comfortably inside the sensor
    margin = 4.0
    for _ in range(64):
        vx = float(rng.uniform(-1.5, 1.5))
        vy = float(rng.uniform(-1.5, 1.5))
        cx0 = float(rng.uniform(margin + size / 2, w - margin - size / 2))
        cy0 = float(rng.uniform(margin + size / 2, h - margin - size / 2))
        cx_end = cx0 + vx * (n - 1)
        cy_end = cy0 + vy * (n - 1)
        if margin <= cx_end < w - margin and margin <= cy_end < h - margin:
            break
    else:
        vx = vy = 0.0
        cx0, cy0 = w / 2.0, h / 2.0
    return SynthConfig(
        sensor_size=base.sensor_size,
        duration=base.duration,
        delta_t=base.delta_t,
        start_box=(cx0 - size / 2, cy0 - size / 2, size, size),
        velocity=(vx, vy),
        sine_amp=base.sine_amp,
        sine_period=base.sine_period,
        edge_rate=base.edge_rate,
        bg_rate=base.bg_rate,
        seed=seed * 1_000_003 + sequence_index,
    )


def generate_dataset(out_dir, n_sequences: int, seed: int,
                     base: SynthConfig | None = None) -> list[Path]:
    """Write ``n_sequences`` varied sequences under ``out_dir``."""
    base = base or SynthConfig()
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_sequences):
        cfg = vary_config(base, seed, i)
        record = generate_sequence(cfg)
        path = out_dir / f"seq_{i:03d}"
        save_sequence(path, record)
        paths.append(path)
    return paths
