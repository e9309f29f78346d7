import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evsynth.event_core import EVENT_DTYPE, Event, OrderingError, array_to_events
from evsynth.event_io import (HEADER_SIZE, FormatError, ResolutionMismatch, SequenceManifest,
                              TruncationError, decode_events, decode_image, encode_events,
                              encode_image, load_sequence, parse_manifest, read_image,
                              write_events, write_image, write_manifest)


def encode(events, w=64, h=64):
    buf = io.BytesIO()
    n = encode_events(events, w, h, buf)
    assert n == len(buf.getvalue())
    return buf.getvalue()


def decode_all(data):
    w, h, reader = decode_events(io.BytesIO(data))
    return w, h, list(reader)


class _Unseekable(io.RawIOBase):
    def __init__(self):
        self.chunks = []

    def writable(self):
        return True

    def write(self, b):
        self.chunks.append(bytes(b))
        return len(b)


# -- EVT1 -----------------------------------------------------------------------

def test_empty_stream_is_header_only():
    data = encode([])
    assert len(data) == 16
    assert data[:4] == b"EVT1"
    assert struct.unpack("<HHH", data[4:10]) == (1, 64, 64)
    assert int.from_bytes(data[10:16], "little") == 0


def test_two_events_take_42_bytes():
    assert len(encode([Event(0, 0, 1, 1), Event(1, 1, 2, -1)])) == 42


def test_record_layout():
    data = encode([Event(3, 5, 0x0102030405060708, -1)], 8, 8)
    rec = data[HEADER_SIZE:]
    assert len(rec) == 13
    assert struct.unpack("<QHH", rec[:12]) == (0x0102030405060708, 3, 5)
    assert rec[12] == 0xFF


def test_positive_polarity_byte():
    assert encode([Event(0, 0, 0, 1)])[-1] == 0x01


def test_unseekable_sink_matches_seekable():
    evs = [Event(i % 4, i % 3, i, 1 if i % 2 else -1) for i in range(10)]
    sink = _Unseekable()
    n = encode_events(evs, 4, 4, sink)
    assert b"".join(sink.chunks) == encode(evs, 4, 4)
    assert n == 16 + 13 * 10


def test_encode_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        encode([Event(64, 0, 0, 1)])


def test_truncated_at_byte_20():
    data = encode([Event(0, 0, 1, 1)])[:20]
    with pytest.raises(TruncationError) as exc:
        decode_all(data)
    assert exc.value.offset == 20
    assert "20" in str(exc.value)


def test_truncated_header():
    with pytest.raises(TruncationError):
        decode_events(io.BytesIO(b"EVT1\x01\x00"))


def test_bad_magic():
    data = bytearray(encode([]))
    data[:4] = b"EVT2"
    with pytest.raises(FormatError, match="magic"):
        decode_all(bytes(data))


def test_bad_version():
    data = bytearray(encode([]))
    data[4] = 2
    with pytest.raises(FormatError, match="version"):
        decode_all(bytes(data))


def test_polarity_byte_0x02():
    data = bytearray(encode([Event(0, 0, 1, 1)]))
    data[-1] = 0x02
    with pytest.raises(FormatError):
        decode_all(bytes(data))


def test_unsorted_timestamps():
    data = bytearray(encode([Event(0, 0, 5, 1), Event(0, 0, 6, 1)]))
    data[HEADER_SIZE + 13:HEADER_SIZE + 21] = struct.pack("<Q", 1)
    with pytest.raises(OrderingError):
        decode_all(bytes(data))


def test_trailing_bytes():
    with pytest.raises(FormatError):
        decode_all(encode([Event(0, 0, 5, 1)]) + b"\x00")


def test_decode_streams_lazily():
    evs = [Event(0, 0, t, 1) for t in range(10)]
    data = bytearray(encode(evs))
    data[-1] = 0x07  # corrupt only the last record
    _, _, reader = decode_events(io.BytesIO(bytes(data)))
    reader.chunk_size = 2
    it = iter(reader)
    first = [next(it) for _ in range(8)]
    assert first == evs[:8]
    with pytest.raises(FormatError):
        list(it)


def random_records(rng, n, w, h):
    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["t"] = np.sort(rng.integers(0, 2**63, size=n, dtype=np.uint64))
    ev["x"] = rng.integers(0, w, size=n)
    ev["y"] = rng.integers(0, h, size=n)
    ev["p"] = rng.choice([-1, 1], size=n)
    return ev


def test_round_trip_random_streams():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, h = (int(v) for v in rng.integers(1, 2000, size=2))
        ev = random_records(rng, int(rng.integers(0, 300)), w, h)
        data = encode([ev], w, h)
        w2, h2, out = decode_all(data)
        assert (w2, h2) == (w, h)
        assert out == array_to_events(ev)
        assert encode(out, w, h) == data


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=80))
def test_decode_total_over_garbage(blob):
    """Arbitrary bytes either decode or raise a typed error."""
    try:
        decode_all(blob)
    except (FormatError, OrderingError):
        pass


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.data())
def test_every_truncated_prefix_is_typed(seed, data):
    ev = random_records(np.random.default_rng(seed), 5, 16, 16)
    full = encode([ev], 16, 16)
    cut = data.draw(st.integers(0, len(full) - 1))
    with pytest.raises(FormatError):
        decode_all(full[:cut])


def test_write_events_to_path(tmp_path):
    p = tmp_path / "e.evt1"
    assert write_events(p, [Event(1, 1, 1, 1)], 4, 4) == 29
    assert decode_all(p.read_bytes())[2] == [Event(1, 1, 1, 1)]


# -- PNM ----------------------------------------------------------------------------

def test_ppm_pixel_scaling():
    f = decode_image(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    assert f.shape == (3, 1, 1)
    np.testing.assert_array_equal(f[:, 0, 0], [1.0, 0.0, 0.0])


def test_pgm_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    raw = b"P5\n7 5\n255\n" + rng.integers(0, 256, size=35, dtype=np.uint8).tobytes()
    p = tmp_path / "a.pgm"
    p.write_bytes(raw)
    q = tmp_path / "b.pgm"
    write_image(read_image(p), q)
    assert q.read_bytes() == raw


def test_ppm_round_trip_byte_identical():
    rng = np.random.default_rng(2)
    raw = b"P6\n4 3\n255\n" + rng.integers(0, 256, size=36, dtype=np.uint8).tobytes()
    assert encode_image(decode_image(raw)) == raw


def test_header_comments_accepted():
    f = decode_image(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(f[0], [[0.0, 1.0]])


@pytest.mark.parametrize("raw", [
    b"P4\n1 1\n" + bytes([0]),
    b"P5\n2 2\n65535\n" + bytes(8),
    b"P5\n2 2\n255\n" + bytes(3),
    b"P6\n2\n",
    b"",
])
def test_malformed_images(raw):
    with pytest.raises(FormatError):
        decode_image(raw)


def test_write_image_clips_and_rounds():
    out = encode_image(np.array([[[-0.5, 0.5, 2.0, 1 / 255 * 0.49]]]))
    assert out[-4:] == bytes([0, 128, 255, 0])


# -- manifests & sequences -------------------------------------------------------

def test_manifest_round_trip():
    m = SequenceManifest(["a.ppm", "b.ppm", "a.ppm"], "e.evt1", 1000, ".")
    m2 = parse_manifest("# comment\n" + m.dumps())
    assert (m2.frames, m2.events, m2.period_ns) == (m.frames, m.events, m.period_ns)


@pytest.mark.parametrize("text", ["frame=a\nevents=e\nperiod_ns=5\n",
                                  "frame=a\nframe=b\nevents=e\nperiod_ns=0\n",
                                  "frame=a\nframe=b\nperiod_ns=5\n",
                                  "frame=a\nframe=b\nevents=e\nperiod_ns=5\nbogus=1\n"])
def test_invalid_manifests(text):
    with pytest.raises(ValueError):
        parse_manifest(text)


def _sequence(tmp, frames, events, w=8, h=8, period=100):
    names = []
    for i, f in enumerate(frames):
        names.append(f"f{i}.pgm")
        write_image(f, tmp / names[-1])
    write_events(tmp / "e.evt1", events, w, h)
    write_manifest(SequenceManifest(names, "e.evt1", period, tmp), tmp / "manifest.txt")
    return tmp / "manifest.txt"


def test_seven_frames_give_six_event_frames(tmp_path):
    frames = [np.full((1, 8, 8), i / 10, np.float32) for i in range(7)]
    evs = [Event(1, 2, 150, 1), Event(1, 2, 250, -1)]
    got_frames, got_events = load_sequence(_sequence(tmp_path, frames, evs))
    assert len(got_frames) == 7 and len(got_events) == 6
    assert got_events[1].values[2, 1] == 1 and got_events[2].values[2, 1] == -1
    assert not got_events[0].values.any()


def test_identical_frames_empty_events(tmp_path):
    f = np.zeros((1, 8, 8), np.float32)
    _, evs = load_sequence(_sequence(tmp_path, [f, f], []))
    assert len(evs) == 1 and not evs[0].values.any()


def test_event_resolution_mismatch(tmp_path):
    f = np.zeros((1, 8, 8), np.float32)
    with pytest.raises(ResolutionMismatch):
        load_sequence(_sequence(tmp_path, [f, f], [], w=9))


def test_missing_frame_file(tmp_path):
    f = np.zeros((1, 8, 8), np.float32)
    m = _sequence(tmp_path, [f, f], [])
    (tmp_path / "f1.pgm").unlink()
    with pytest.raises(FileNotFoundError):
        load_sequence(m)


def test_interrupted_write_leaves_no_file(tmp_path):
    from evsynth.event_io import atomic_open
    target = tmp_path / "out.bin"
    with pytest.raises(KeyboardInterrupt):
        with atomic_open(target) as fh:
            fh.write(b"partial")
            raise KeyboardInterrupt
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
