"""Event file parsing, frame stacking, region cropping, and sequence layout.

On-disk sequence layout::

    <sequence>/
        events.csv        # one event per line: "t,x,y,p" (t in us, p in {-1,1})
        groundtruth.txt   # one "x,y,w,h" line per stacking window, pixels
        meta.cfg          # sensor_h, sensor_w, T, delta_t as key=value lines
        attributes.txt    # optional, one tag per line

Boxes are axis-aligned ``(x, y, w, h)`` with a top-left origin throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import EventParseError, ValidationError


class EventPoint(NamedTuple):
    """One asynchronous brightness-change event."""

    x: int
    y: int
    t: int  # microseconds
    p: int  # polarity, -1 or +1


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events over a window of ``duration`` microseconds."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    duration: int
    sensor_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        h, w = self.sensor_size
        m = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == m):
            raise ValidationError("event component arrays must share one length")
        if h < 1 or w < 1:
            raise ValidationError(f"sensor size must be positive, got {self.sensor_size}")
        if self.duration < 0:
            raise ValidationError(f"duration must be >= 0, got {self.duration}")
        if m:
            if np.any(np.diff(self.ts) < 0):
                raise ValidationError("unsorted timestamps")
            if self.ts[0] < 0 or self.ts[-1] > self.duration:
                raise ValidationError(
                    f"timestamps must lie in [0, {self.duration}], "
                    f"got range [{self.ts[0]}, {self.ts[-1]}]"
                )
            if np.any((self.xs < 0) | (self.xs >= w) | (self.ys < 0) | (self.ys >= h)):
                raise ValidationError(f"event coordinates outside {w}x{h} sensor")
            if np.any((self.ps != -1) & (self.ps != 1)):
                raise ValidationError("polarity must be -1 or +1")

    @classmethod
    def empty(cls, sensor_size: tuple[int, int], duration: int = 0) -> "EventStream":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), duration, sensor_size)

    @property
    def num_events(self) -> int:
        return len(self.ts)

    def __len__(self) -> int:
        return len(self.ts)

    def point(self, i: int) -> EventPoint:
        return EventPoint(int(self.xs[i]), int(self.ys[i]), int(self.ts[i]), int(self.ps[i]))

    def __iter__(self) -> Iterator[EventPoint]:
        return (self.point(i) for i in range(len(self)))

    def take(self, indices) -> "EventStream":
        """Sub-stream at the given (sorted) indices, same duration."""
        return EventStream(self.xs[indices], self.ys[indices], self.ts[indices],
                           self.ps[indices], self.duration, self.sensor_size)


@dataclass(frozen=True)
class FrameStack:
    """Stacked event frames of shape (N, 3, H, W).

    Channel 0 counts positive events, channel 1 counts negative events, and
    channel 2 holds the window-normalized timestamp of the most recent event
    at each pixel (0 where no event fell).
    """

    data: np.ndarray
    delta_t: int

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def num_windows(duration: int, delta_t: int) -> int:
    """ceil(duration / delta_t); a trailing partial window counts."""
    if delta_t <= 0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    return -(-duration // delta_t)


def parse_events(path, sensor_size: tuple[int, int], duration: int | None = None) -> EventStream:
    """Parse a "t,x,y,p" CSV event file; '#' lines are comments.

    ``duration`` normally comes from the sequence metadata; when omitted it
    defaults to the last timestamp.
    """
    path = Path(path)
    h, w = sensor_size
    xs: list[int] = []
    ys: list[int] = []
    ts: list[int] = []
    ps: list[int] = []
    prev_t = None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventParseError(path, line_no, f"expected 't,x,y,p', got {line!r}")
            try:
                t, x, y, p = (int(s) for s in parts)
            except ValueError:
                raise EventParseError(path, line_no, f"non-integer field in {line!r}") from None
            if p not in (-1, 1):
                raise ValidationError(f"{path}:{line_no}: polarity must be -1 or +1, got {p}")
            if not (0 <= x < w and 0 <= y < h):
                raise ValidationError(
                    f"{path}:{line_no}: coordinates ({x}, {y}) outside {w}x{h} sensor"
                )
            if prev_t is not None and t < prev_t:
                raise ValidationError(f"{path}:{line_no}: unsorted timestamps")
            prev_t = t
            xs.append(x)
            ys.append(y)
            ts.append(t)
            ps.append(p)
    if duration is None:
        duration = ts[-1] if ts else 0
    arr = lambda v: np.asarray(v, dtype=np.int64)
    return EventStream(arr(xs), arr(ys), arr(ts), arr(ps), int(duration), (h, w))


def write_events(stream: EventStream, path) -> None:
    """Serialize a stream in the canonical "t,x,y,p" format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(stream)):
            fh.write(f"{stream.ts[i]},{stream.xs[i]},{stream.ys[i]},{stream.ps[i]}\n")


def stack_events(stream: EventStream, delta_t: int) -> FrameStack:
    """Aggregate events into per-window count/recency frames.

    Window i covers [i*delta_t, (i+1)*delta_t); events at exactly t=duration
    go to the last window so no event is dropped.
    """
    if delta_t <= 0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    h, w = stream.sensor_size
    n = num_windows(stream.duration, delta_t)
    data = np.zeros((n, 3, h, w), dtype=np.float32)
    if n and len(stream):
        win = np.minimum(stream.ts // delta_t, n - 1).astype(np.int64)
        pos = stream.ps > 0
        np.add.at(data, (win[pos], 0, stream.ys[pos], stream.xs[pos]), 1.0)
        np.add.at(data, (win[~pos], 1, stream.ys[~pos], stream.xs[~pos]), 1.0)
        recency = (stream.ts - win * delta_t) / float(delta_t)
        # ts ascending, so the last assignment per pixel is the most recent event
        data[win, 2, stream.ys, stream.xs] = recency.astype(np.float32)
    return FrameStack(data, delta_t)


def window_slice(stream: EventStream, index: int, delta_t: int) -> EventStream:
    """Events of one stacking window, timestamps rebased to the window start."""
    n = num_windows(stream.duration, delta_t)
    if not 0 <= index < max(n, 1):
        raise ValueError(f"window index {index} outside [0, {n})")
    start = index * delta_t
    end = min((index + 1) * delta_t, stream.duration)
    if index == n - 1:
        mask = (stream.ts >= start) & (stream.ts <= stream.duration)
        span = stream.duration - start
    else:
        mask = (stream.ts >= start) & (stream.ts < end)
        span = delta_t
    return EventStream(stream.xs[mask], stream.ys[mask], stream.ts[mask] - start,
                       stream.ps[mask], span, stream.sensor_size)


def concat_streams(a: EventStream, b: EventStream) -> EventStream:
    """Concatenate two streams; b's timestamps are shifted by a.duration."""
    if a.sensor_size != b.sensor_size:
        raise ValidationError("cannot concatenate streams from different sensors")
    return EventStream(
        np.concatenate([a.xs, b.xs]),
        np.concatenate([a.ys, b.ys]),
        np.concatenate([a.ts, b.ts + a.duration]),
        np.concatenate([a.ps, b.ps]),
        a.duration + b.duration,
        a.sensor_size,
    )


# ---------------------------------------------------------------------------
# Region cropping


@dataclass(frozen=True)
class CropTransform:
    """Affine map between a square crop and sensor coordinates.

    The crop covers the sensor rectangle [x0, x0+side) x [y0, y0+side) and is
    resampled to ``out_size`` pixels per side, so one crop pixel spans
    ``scale = side / out_size`` sensor pixels.
    """

    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.side / self.out_size

    def norm_to_sensor(self, box) -> tuple[float, float, float, float]:
        """Map a crop-normalized (x, y, w, h) box back to sensor pixels."""
        x, y, w, h = box
        return (self.x0 + x * self.side, self.y0 + y * self.side, w * self.side, h * self.side)

    def sensor_to_norm(self, box) -> tuple[float, float, float, float]:
        x, y, w, h = box
        return ((x - self.x0) / self.side, (y - self.y0) / self.side,
                w / self.side, h / self.side)

    def crop_to_sensor(self, box) -> tuple[float, float, float, float]:
        """Map a box in crop-pixel units back to sensor pixels."""
        x, y, w, h = box
        return (self.x0 + x * self.scale, self.y0 + y * self.scale,
                w * self.scale, h * self.scale)

    def sensor_to_crop(self, box) -> tuple[float, float, float, float]:
        x, y, w, h = box
        return ((x - self.x0) / self.scale, (y - self.y0) / self.scale,
                w / self.scale, h / self.scale)


def _bilinear_sample(frame: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at continuous sensor coords, zero outside the frame.

    Pixel (i, j) covers [j, j+1) x [i, i+1) with its center at +0.5.
    """
    _, h, w = frame.shape
    gx = us - 0.5
    gy = vs - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = (gx - x0).astype(frame.dtype)
    fy = (gy - y0).astype(frame.dtype)

    def gather(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        return frame[:, yc[:, None], xc[None, :]] * valid[None, :, :]

    w00 = (1 - fy)[:, None] * (1 - fx)[None, :]
    w01 = (1 - fy)[:, None] * fx[None, :]
    w10 = fy[:, None] * (1 - fx)[None, :]
    w11 = fy[:, None] * fx[None, :]
    return (w00 * gather(y0, x0) + w01 * gather(y0, x0 + 1)
            + w10 * gather(y0 + 1, x0) + w11 * gather(y0 + 1, x0 + 1))


def crop_region(frame: np.ndarray, box, context_factor: float,
                out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Crop a square context region around ``box`` and resize it.

    The square has side ``context_factor * sqrt(w*h)`` (rounded to whole
    pixels), is centered on the box center, zero-padded where it leaves the
    frame, and bilinearly resampled to ``out_size`` with half-pixel centers.
    Returns the crop and the affine transform back to sensor coordinates.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3:
        raise ValueError(f"frame must be (C, H, W), got shape {frame.shape}")
    x, y, bw, bh = (float(v) for v in box)
    if bw <= 0 or bh <= 0:
        raise ValidationError(f"degenerate box {box}: w and h must be positive")
    if context_factor <= 0:
        raise ValueError(f"context_factor must be positive, got {context_factor}")
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    side = max(1, round(context_factor * math.sqrt(bw * bh)))
    cx, cy = x + bw / 2.0, y + bh / 2.0
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    scale = side / out_size
    us = x0 + (np.arange(out_size, dtype=np.float64) + 0.5) * scale
    vs = y0 + (np.arange(out_size, dtype=np.float64) + 0.5) * scale
    crop = _bilinear_sample(frame, us, vs)
    return crop.astype(np.float32), CropTransform(x0, y0, float(side), out_size)


# ---------------------------------------------------------------------------
# Sequence records


@dataclass
class SequenceRecord:
    """An event stream with one ground-truth box per stacking window."""

    stream: EventStream
    delta_t: int
    ground_truth: np.ndarray  # (N, 4) float, (x, y, w, h) pixels
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64).reshape(-1, 4)
        n = num_windows(self.stream.duration, self.delta_t)
        if len(self.ground_truth) != n:
            raise ValidationError(
                f"expected {n} ground-truth boxes for duration {self.stream.duration} "
                f"and delta_t {self.delta_t}, got {len(self.ground_truth)}"
            )
        h, w = self.stream.sensor_size
        gx, gy, gw, gh = self.ground_truth.T
        if np.any(gw <= 0) or np.any(gh <= 0):
            raise ValidationError("ground-truth boxes must have positive width and height")
        if np.any(gx + gw <= 0) or np.any(gx >= w) or np.any(gy + gh <= 0) or np.any(gy >= h):
            raise ValidationError("ground-truth boxes must intersect the sensor plane")

    @property
    def n_windows(self) -> int:
        return len(self.ground_truth)


def _parse_meta(path) -> dict[str, int]:
    meta = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise EventParseError(path, line_no, f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        try:
            meta[key.strip()] = int(value.strip())
        except ValueError:
            raise EventParseError(path, line_no, f"non-integer value in {line!r}") from None
    for key in ("sensor_h", "sensor_w", "T", "delta_t"):
        if key not in meta:
            raise ValidationError(f"{path}: missing required key {key!r}")
    return meta


def load_sequence(directory) -> SequenceRecord:
    """Load a sequence directory (events.csv, groundtruth.txt, meta.cfg)."""
    directory = Path(directory)
    meta = _parse_meta(directory / "meta.cfg")
    sensor = (meta["sensor_h"], meta["sensor_w"])
    stream = parse_events(directory / "events.csv", sensor, duration=meta["T"])
    boxes = []
    gt_path = directory / "groundtruth.txt"
    for line_no, raw in enumerate(gt_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(gt_path, line_no, f"expected 'x,y,w,h', got {line!r}")
        try:
            boxes.append([float(p) for p in parts])
        except ValueError:
            raise EventParseError(gt_path, line_no, f"non-numeric field in {line!r}") from None
    attributes: tuple[str, ...] = ()
    attr_path = directory / "attributes.txt"
    if attr_path.exists():
        attributes = tuple(t.strip() for t in attr_path.read_text().splitlines() if t.strip())
    return SequenceRecord(stream, meta["delta_t"], np.asarray(boxes, dtype=np.float64),
                          attributes)


def save_sequence(directory, record: SequenceRecord) -> None:
    """Write a sequence directory in the on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_events(record.stream, directory / "events.csv")
    h, w = record.stream.sensor_size
    with (directory / "groundtruth.txt").open("w") as fh:
        for box in record.ground_truth:
            fh.write(",".join(format(v, ".4f") for v in box) + "\n")
    with (directory / "meta.cfg").open("w") as fh:
        fh.write(f"sensor_h={h}\nsensor_w={w}\n")
        fh.write(f"T={record.stream.duration}\ndelta_t={record.delta_t}\n")
    if record.attributes:
        (directory / "attributes.txt").write_text("\n".join(record.attributes) + "\n")
