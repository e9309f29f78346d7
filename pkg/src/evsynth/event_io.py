"""File formats: EVT1 event streams, binary PGM/PPM images, sequence manifests."""

from __future__ import annotations

import io
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

import numpy as np

from .event_core import (DEFAULT_CONTRAST_CLIP, DEFAULT_EPS, DEFAULT_LEVELS, DEFAULT_SAT,
                         EVENT_DTYPE, Event, EventFrame, EventError, OrderingError,
                         _iter_chunks, _StreamChecker, accumulate_windows, quantize_log_diff,
                         simulate_event_frame)

PathLike = Union[str, os.PathLike]

EVT1_MAGIC = b"EVT1"
EVT1_VERSION = 1
# magic, version u16, width u16, height u16, event_count u48 -> 16 bytes
HEADER_SIZE = 16
RECORD_SIZE = EVENT_DTYPE.itemsize
assert RECORD_SIZE == 13


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class TruncationError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class ResolutionMismatch(ValueError):
    pass


# -- atomic output ----------------------------------------------------------

@contextmanager
def atomic_open(path: PathLike, mode: str = "wb"):
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# -- EVT1 -------------------------------------------------------------------

def _pack_header(width: int, height: int, count: int) -> bytes:
    if not (0 < width < 2**16 and 0 < height < 2**16):
        raise ValueError(f"invalid resolution {width}x{height}")
    if not 0 <= count < 2**48:
        raise ValueError("event count does not fit the header")
    return (EVT1_MAGIC + struct.pack("<HHH", EVT1_VERSION, width, height)
            + count.to_bytes(6, "little"))


def encode_events(events: Iterable, width: int, height: int, sink: BinaryIO) -> int:
    """Write an EVT1 stream; returns the number of bytes written (16 + 13 n).

    ``events`` may mix :class:`Event` tuples and ``EVENT_DTYPE`` record arrays.
    Seekable sinks are written in one streaming pass and the header count is
    patched at the end; otherwise the stream is buffered first.
    """
    checker = _StreamChecker(width, height)
    seekable = getattr(sink, "seekable", lambda: False)()
    if not seekable:
        buf = io.BytesIO()
        n = encode_events(events, width, height, buf)
        sink.write(buf.getvalue())
        return n
    start = sink.tell()
    sink.write(_pack_header(width, height, 0))
    count = 0
    for arr in _iter_chunks(events):
        checker.check(arr)
        sink.write(np.ascontiguousarray(arr, dtype=EVENT_DTYPE).tobytes())
        count += arr.size
    end = sink.tell()
    sink.seek(start)
    sink.write(_pack_header(width, height, count))
    sink.seek(end)
    return HEADER_SIZE + RECORD_SIZE * count


def write_events(path: PathLike, events: Iterable, width: int, height: int) -> int:
    with atomic_open(path) as fh:
        return encode_events(events, width, height, fh)


class EventReader:
    """Streaming EVT1 decoder.

    Iterating yields :class:`Event` tuples; :meth:`chunks` yields record
    arrays. Both validate ordering and polarity as they go and never hold
    the whole stream in memory.
    """

    def __init__(self, source: Union[BinaryIO, PathLike], chunk_size: int = 65536):
        if isinstance(source, (str, os.PathLike)):
            self._fh = open(source, "rb")
            self._owns = True
        else:
            self._fh = source
            self._owns = False
        self.chunk_size = chunk_size
        head = self._fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            if len(head) >= 4 and head[:4] != EVT1_MAGIC:
                raise FormatError(f"bad magic {head[:4]!r}")
            raise TruncationError(f"truncated header at byte {len(head)}", len(head))
        if head[:4] != EVT1_MAGIC:
            raise FormatError(f"bad magic {head[:4]!r}")
        version, self.width, self.height = struct.unpack("<HHH", head[4:10])
        if version != EVT1_VERSION:
            raise FormatError(f"unsupported EVT1 version {version}")
        if self.width == 0 or self.height == 0:
            raise FormatError("zero resolution in header")
        self.event_count = int.from_bytes(head[10:16], "little")
        self._consumed = False

    def last_timestamp(self) -> Optional[int]:
        """Timestamp of the final record (None when empty); needs a seekable source."""
        if self.event_count == 0:
            return None
        pos = self._fh.tell()
        self._fh.seek(HEADER_SIZE + (self.event_count - 1) * RECORD_SIZE)
        raw = self._fh.read(8)
        self._fh.seek(pos)
        if len(raw) < 8:
            raise TruncationError(f"truncated record at byte {HEADER_SIZE + (self.event_count - 1) * RECORD_SIZE + len(raw)}",
                                  HEADER_SIZE + (self.event_count - 1) * RECORD_SIZE + len(raw))
        return int.from_bytes(raw, "little")

    def chunks(self) -> Iterator[np.ndarray]:
        if self._consumed:
            raise RuntimeError("EventReader is single-pass")
        self._consumed = True
        checker = _StreamChecker(self.width, self.height)
        remaining = self.event_count
        offset = HEADER_SIZE
        try:
            while remaining:
                n = min(self.chunk_size, remaining)
                raw = self._fh.read(n * RECORD_SIZE)
                if len(raw) < n * RECORD_SIZE:
                    at = offset + len(raw)
                    raise TruncationError(
                        f"truncated record {self.event_count - remaining + len(raw) // RECORD_SIZE}"
                        f" at byte {at}", at)
                arr = np.frombuffer(raw, dtype=EVENT_DTYPE)
                try:
                    checker.check(arr)
                except OrderingError:
                    raise
                except EventError as exc:
                    raise FormatError(str(exc)) from None
                offset += len(raw)
                remaining -= n
                yield arr
            if self._fh.read(1):
                raise FormatError(f"trailing bytes after {self.event_count} records")
        finally:
            if self._owns:
                self._fh.close()

    def __iter__(self) -> Iterator[Event]:
        for arr in self.chunks():
            for t, x, y, p in arr.tolist():
                yield Event(x, y, t, p)

    def close(self):
        if self._owns:
            self._fh.close()


def decode_events(source: Union[BinaryIO, PathLike]):
    """Return ``(width, height, events)`` with ``events`` a lazy single-pass reader."""
    reader = EventReader(source)
    return reader.width, reader.height, reader


# -- PNM --------------------------------------------------------------------

def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("malformed PNM header")
    return data[start:pos], pos


def decode_image(data: bytes) -> np.ndarray:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM format {magic!r}; only P5/P6 are handled")
    try:
        w, pos = _read_token(data, pos)
        h, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("malformed PNM header") from None
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, expected 255")
    if w <= 0 or h <= 0:
        raise FormatError("non-positive image size")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("malformed PNM header")
    pos += 1
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    pix = data[pos:pos + need]
    if len(pix) < need:
        raise FormatError(f"short pixel data: {len(pix)} of {need} bytes")
    arr = np.frombuffer(pix, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def encode_image(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, h, w) frame, got {frame.shape}")
    c, h, w = frame.shape
    q = np.clip(np.rint(frame.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def read_image(path: PathLike) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def write_image(frame: np.ndarray, path: PathLike) -> None:
    payload = encode_image(frame)
    with atomic_open(path) as fh:
        fh.write(payload)


def write_event_frame_pgm(frame: EventFrame, path: PathLike) -> None:
    """Store signed levels offset by ``sat`` so the neutral level is mid-gray."""
    u8 = (frame.values.astype(np.int32) + frame.sat)
    if frame.sat > 127:
        u8 = np.rint(u8 * (254.0 / (2 * frame.sat)))
    write_image(u8[None].astype(np.float32) / 255.0, path)


# -- manifests and sequences ------------------------------------------------

@dataclass
class SequenceManifest:
    frames: list[str]
    events: str
    period_ns: int
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise FormatError("a sequence needs at least 2 frames")
        if self.period_ns <= 0:
            raise FormatError("period_ns must be positive")

    def frame_paths(self) -> list[Path]:
        return [self.root / f for f in self.frames]

    @property
    def events_path(self) -> Path:
        return self.root / self.events

    def dumps(self) -> str:
        lines = [f"frame={f}" for f in self.frames]
        lines += [f"events={self.events}", f"period_ns={self.period_ns}"]
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, root: PathLike = ".") -> SequenceManifest:
    frames, events, period = [], None, None
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"manifest line {lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key == "frame":
            frames.append(value)
        elif key == "events":
            events = value
        elif key == "period_ns":
            try:
                period = int(value)
            except ValueError:
                raise FormatError(f"manifest line {lineno}: bad period {value!r}") from None
        else:
            raise FormatError(f"manifest line {lineno}: unknown key {key!r}")
    if events is None or period is None:
        raise FormatError("manifest requires events= and period_ns=")
    return SequenceManifest(frames, events, period, Path(root))


def read_manifest(path: PathLike) -> SequenceManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def write_manifest(manifest: SequenceManifest, path: PathLike) -> None:
    with atomic_open(path, "w") as fh:
        fh.write(manifest.dumps())


def load_frames(manifest: SequenceManifest) -> list[np.ndarray]:
    frames = [read_image(p) for p in manifest.frame_paths()]
    shape = frames[0].shape
    for p, f in zip(manifest.frames, frames):
        if f.shape != shape:
            raise ResolutionMismatch(f"frame {p} has shape {f.shape}, expected {shape}")
    return frames


def load_sequence(path: PathLike, sat: int = DEFAULT_SAT):
    """Load ``n`` frames and the ``n-1`` event frames integrated between them.

    Frame ``i`` is taken to sit at ``t = i * period_ns``.
    """
    manifest = read_manifest(path)
    frames = load_frames(manifest)
    _, h, w = frames[0].shape
    width, height, reader = decode_events(manifest.events_path)
    try:
        if (width, height) != (w, h):
            raise ResolutionMismatch(
                f"event stream is {width}x{height} but frames are {w}x{h}")
        events = accumulate_windows(reader.chunks(), 0, manifest.period_ns,
                                    len(frames) - 1, w, h, sat)
    finally:
        reader.close()
    return frames, events


def simulated_event_frames(frames: list[np.ndarray], eps: float = DEFAULT_EPS,
                           contrast_clip: float = DEFAULT_CONTRAST_CLIP,
                           levels: int = DEFAULT_LEVELS) -> list[EventFrame]:
    """Quantized log-difference frames for each consecutive pair."""
    return [quantize_log_diff(simulate_event_frame(a, b, eps), contrast_clip, levels)
            for a, b in zip(frames[:-1], frames[1:])]
