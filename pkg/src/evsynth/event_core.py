"""Event and event-frame math.

Events are integrated into signed per-pixel counts over a closed time window,
and event frames can be approximated from two intensity frames through the
difference of their log brightness.

Arrays follow a channels-first layout: intensity frames are ``(c, h, w)``
float32 in [0, 1], event frames hold ``(h, w)`` signed integer levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_EPS = 1.0 / 255.0
DEFAULT_CONTRAST_CLIP = math.log(2.0)
DEFAULT_LEVELS = 255
DEFAULT_SAT = 127

# packed little-endian record layout shared with the EVT1 codec
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventError(ValueError):
    """Base class for invalid event data."""


class CoordinateError(EventError):
    pass


class OrderingError(EventError):
    pass


class ConfigurationError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class AccumulationWindow:
    """Closed interval ``[t_start, t_start + tau]`` in nanoseconds."""

    t_start: int
    tau: int

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"window duration must be positive, got {self.tau}")
        if self.t_start < 0:
            raise ConfigurationError(f"window start must be non-negative, got {self.t_start}")

    @property
    def t_end(self) -> int:
        return self.t_start + self.tau


@dataclass
class EventFrame:
    """Signed per-pixel event levels, saturated at ``+-sat``."""

    values: np.ndarray
    sat: int = DEFAULT_SAT

    def __post_init__(self):
        if self.sat <= 0:
            raise ConfigurationError("sat must be positive")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"event frame must be 2-D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EventFrame):
            return NotImplemented
        return self.sat == other.sat and np.array_equal(self.values, other.values)


EventSource = Iterable[Union[Event, np.ndarray]]


def events_to_array(events: Sequence[Event]) -> np.ndarray:
    out = np.empty(len(events), dtype=EVENT_DTYPE)
    for i, ev in enumerate(events):
        out[i] = (ev.t, ev.x, ev.y, ev.p)
    return out


def array_to_events(arr: np.ndarray) -> list[Event]:
    return [Event(int(x), int(y), int(t), int(p))
            for t, x, y, p in zip(arr["t"], arr["x"], arr["y"], arr["p"])]


def _iter_chunks(events: EventSource, chunk: int = 65536):
    """Normalize a stream of Events and/or record arrays into record arrays.

    A single record array is accepted as a whole stream.
    """
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        for lo in range(0, len(events), chunk):
            yield events[lo:lo + chunk]
        return
    pending: list[Event] = []
    for item in events:
        if isinstance(item, np.ndarray):
            if pending:
                yield events_to_array(pending)
                pending = []
            yield item
        else:
            pending.append(item)
            if len(pending) >= chunk:
                yield events_to_array(pending)
                pending = []
    if pending:
        yield events_to_array(pending)


class _StreamChecker:
    """Validates bounds and ordering across chunk boundaries."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.last_t = -1
        self.seen = 0

    def check(self, arr: np.ndarray) -> None:
        if arr.size == 0:
            return
        t = arr["t"]
        bad = (arr["x"] >= self.width) | (arr["y"] >= self.height)
        if bad.any():
            i = int(np.argmax(bad))
            raise CoordinateError(
                f"event {self.seen + i} at ({arr['x'][i]}, {arr['y'][i]}) outside "
                f"{self.width}x{self.height} sensor")
        badp = (arr["p"] != 1) & (arr["p"] != -1)
        if badp.any():
            i = int(np.argmax(badp))
            raise EventError(f"event {self.seen + i} has polarity {arr['p'][i]}, expected +-1")
        if int(t[0]) < self.last_t:
            raise OrderingError(f"event {self.seen} at t={int(t[0])} precedes t={self.last_t}")
        dec = t[1:] < t[:-1]
        if dec.any():
            i = int(np.argmax(dec)) + 1
            raise OrderingError(
                f"event {self.seen + i} at t={int(t[i])} precedes t={int(t[i - 1])}")
        self.last_t = int(t[-1])
        self.seen += arr.size


def accumulate_windows(events: EventSource, t_start: int, period: int, count: int,
                       width: int, height: int, sat: int = DEFAULT_SAT) -> list[EventFrame]:
    """Integrate one stream into ``count`` consecutive windows in a single pass.

    Window ``k`` is ``[t_start + k*period, t_start + (k+1)*period]``; an event
    falling exactly on a shared boundary counts toward both neighbours.
    """
    if sat <= 0:
        raise ConfigurationError("sat must be positive")
    if period <= 0:
        raise ConfigurationError("period must be positive")
    sums = np.zeros((count, height, width), dtype=np.int64)
    checker = _StreamChecker(width, height)
    end = t_start + count * period
    for arr in _iter_chunks(events):
        checker.check(arr)
        if arr.size == 0:
            continue
        t = arr["t"]
        keep = (t >= np.uint64(t_start)) & (t <= np.uint64(end))
        if not keep.any():
            continue
        rel = (t[keep] - np.uint64(t_start)).astype(np.int64)
        x = arr["x"][keep].astype(np.intp)
        y = arr["y"][keep].astype(np.intp)
        p = arr["p"][keep].astype(np.int64)
        k = np.minimum(rel // period, count - 1)
        np.add.at(sums, (k, y, x), p)
        # boundary events also belong to the preceding window
        edge = (rel % period == 0) & (rel > 0) & (rel // period <= count - 1)
        if edge.any():
            np.add.at(sums, (k[edge] - 1, y[edge], x[edge]), p[edge])
    np.clip(sums, -sat, sat, out=sums)
    return [EventFrame(s.astype(np.int16), sat) for s in sums]


def accumulate_events(events: EventSource, window: AccumulationWindow, width: int,
                      height: int, sat: int = DEFAULT_SAT) -> EventFrame:
    """Sum polarities per pixel over the closed window, then saturate at +-sat."""
    return accumulate_windows(events, window.t_start, window.tau, 1, width, height, sat)[0]


def brightness(frame: np.ndarray) -> np.ndarray:
    """Single-channel brightness of a ``(c, h, w)`` frame, c in {1, 3}."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, h, w) frame, got shape {frame.shape}")
    if frame.shape[0] == 1:
        return frame[0].copy()
    r, g, b = LUMA_WEIGHTS
    return (np.float32(r) * frame[0] + np.float32(g) * frame[1]
            + np.float32(b) * frame[2]).astype(np.float32)


def simulate_event_frame(prev: np.ndarray, next: np.ndarray,
                         eps: float = DEFAULT_EPS) -> np.ndarray:
    """Log-brightness difference ``ln(Br(next)+eps) - ln(Br(prev)+eps)``."""
    prev = np.asarray(prev)
    next = np.asarray(next)
    if prev.shape != next.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {next.shape}")
    lp = np.log(brightness(prev).astype(np.float64) + eps)
    ln = np.log(brightness(next).astype(np.float64) + eps)
    return (ln - lp).astype(np.float32)


def quantize_log_diff(delta: np.ndarray, contrast_clip: float = DEFAULT_CONTRAST_CLIP,
                      levels: int = DEFAULT_LEVELS) -> EventFrame:
    """Map a log-difference map onto signed integer levels.

    ``[-contrast_clip, contrast_clip]`` is mapped linearly onto
    ``[-(levels-1)/2, (levels-1)/2]`` and rounded half away from zero.
    """
    if levels < 3 or levels % 2 == 0:
        raise ConfigurationError(f"levels must be odd and >= 3, got {levels}")
    if not contrast_clip > 0:
        raise ConfigurationError("contrast_clip must be positive")
    half = (levels - 1) // 2
    d = np.clip(np.asarray(delta, dtype=np.float64), -contrast_clip, contrast_clip)
    scaled = d * (half / contrast_clip)
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return EventFrame(np.clip(q, -half, half).astype(np.int16), half)


def event_frame_to_model_input(frame: EventFrame) -> np.ndarray:
    """Normalize levels to a float32 plane in [-1, 1]."""
    return (frame.values.astype(np.float32) / np.float32(frame.sat)).astype(np.float32)
