"""Length-prefixed TCP frame protocol, paced sources and a timestamp aligner.

Wire layout (all integers big-endian)::

    "GSF1" | payload_len u32 | sensor_id u8 | timestamp_ns u64 | width u16
           | height u16 | format u8 | reserved 2 bytes | payload

``payload_len`` counts the 16-byte header plus the payload.  Audio and
accelerometer blocks store the sample count in ``width`` and the sample
rate (Hz) in ``height``.
"""
from __future__ import annotations

import heapq
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AccelStream, AudioClip, DimensionMismatch, GelHandError, TactileFrame, ThermalFrame,
)

MAGIC = b"GSF1"
HEADER = struct.Struct(">BQHHBH")
PREFIX = struct.Struct(">4sI")
HEADER_SIZE = HEADER.size  # 16
RGB888, THERMAL_F32, AUDIO_BLOCK, ACCEL_BLOCK = 0, 1, 2, 3
FORMATS = (RGB888, THERMAL_F32, AUDIO_BLOCK, ACCEL_BLOCK)
DEFAULT_WINDOW_MS = 10.0
HORIZON_MS = 100.0


class WireError(GelHandError, ValueError):
    pass


class BadMagic(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownFormat(WireError):
    pass


class BindFailure(GelHandError, OSError):
    pass


class Disconnected(GelHandError, ConnectionError):
    def __init__(self, endpoint, reason=""):
        super().__init__(f"endpoint {endpoint} disconnected{': ' + reason if reason else ''}")
        self.endpoint = endpoint


@dataclass(frozen=True)
class WireFrame:
    sensor_id: int
    timestamp_ns: int
    width: int
    height: int
    fmt: int
    payload: bytes
    reserved: int = 0

    def __post_init__(self):
        if self.fmt not in FORMATS:
            raise UnknownFormat(f"format code {self.fmt}")
        object.__setattr__(self, "payload", bytes(self.payload))

    @property
    def payload_len(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame: WireFrame) -> bytes:
    return (PREFIX.pack(MAGIC, frame.payload_len)
            + HEADER.pack(frame.sensor_id, frame.timestamp_ns, frame.width, frame.height,
                          frame.fmt, frame.reserved)
            + frame.payload)


def _parse_prefix(buf):
    if len(buf) < PREFIX.size:
        raise Truncated(f"need {PREFIX.size} prefix bytes, got {len(buf)}")
    magic, length = PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(magic)!r}")
    if length < HEADER_SIZE:
        raise Truncated(f"payload_len {length} is shorter than the {HEADER_SIZE}-byte header")
    return length


def _parse_body(body):
    sid, ts, w, h, fmt, reserved = HEADER.unpack_from(body)
    if fmt not in FORMATS:
        raise UnknownFormat(f"format code {fmt}")
    return WireFrame(sid, ts, w, h, fmt, bytes(body[HEADER_SIZE:]), reserved)


def decode_frame(buf) -> WireFrame:
    """Decode exactly one frame; trailing bytes are an error."""
    frame, used = decode_prefix(buf)
    if used != len(buf):
        raise WireError(f"{len(buf) - used} trailing bytes after frame")
    return frame


def decode_prefix(buf) -> tuple[WireFrame, int]:
    """Decode the first frame of ``buf``; returns (frame, bytes consumed)."""
    buf = memoryview(bytes(buf))
    length = _parse_prefix(buf)
    end = PREFIX.size + length
    if len(buf) < end:
        raise Truncated(f"frame needs {end} bytes, got {len(buf)}")
    return _parse_body(buf[PREFIX.size:end]), end


def _read_exact(rfile, n):
    chunks, got = [], 0
    while got < n:
        chunk = rfile.read(n - got) if hasattr(rfile, "read") else rfile.recv(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(rfile) -> WireFrame | None:
    """Next frame from a binary file or socket; None on a clean end of stream."""
    prefix = _read_exact(rfile, PREFIX.size)
    if not prefix:
        return None
    length = _parse_prefix(prefix)
    body = _read_exact(rfile, length)
    if len(body) < length:
        raise Truncated(f"stream ended inside a frame ({len(body)} of {length} bytes)")
    return _parse_body(body)


def read_frames(path) -> list[WireFrame]:
    out = []
    with open(path, "rb") as f:
        while (frame := read_frame(f)) is not None:
            out.append(frame)
    return out


def write_frames(path, frames) -> None:
    with open(path, "wb") as f:
        for frame in frames:
            f.write(encode_frame(frame))


# conversions between wire frames and in-memory types

def from_tactile(frame: TactileFrame) -> WireFrame:
    return WireFrame(frame.sensor_id, frame.timestamp, frame.width, frame.height, RGB888,
                     frame.pixels.tobytes())


def from_thermal(frame: ThermalFrame, sensor_id=0) -> WireFrame:
    return WireFrame(sensor_id, frame.timestamp, 32, 24, THERMAL_F32,
                     frame.temps_c.astype(">f4").tobytes())


def from_audio(clip: AudioClip, sensor_id=0) -> WireFrame:
    return WireFrame(sensor_id, clip.timestamp, clip.samples.size, int(round(clip.sample_rate_hz)),
                     AUDIO_BLOCK, clip.samples.astype(">f4").tobytes())


def from_accel(stream: AccelStream, sensor_id=0) -> WireFrame:
    return WireFrame(sensor_id, stream.timestamp, len(stream.samples), int(round(stream.sample_rate_hz)),
                     ACCEL_BLOCK, stream.samples.astype(">f4").tobytes())


def to_object(frame: WireFrame):
    """Decode a wire payload into the matching value type."""
    p = frame.payload
    if frame.fmt == RGB888:
        if len(p) != frame.width * frame.height * 3:
            raise DimensionMismatch("RGB payload does not match width x height x 3")
        return TactileFrame(frame.sensor_id, frame.timestamp_ns, frame.width, frame.height, p)
    if frame.fmt == THERMAL_F32:
        temps = np.frombuffer(p, ">f4").astype(float)
        if temps.size != frame.width * frame.height:
            raise DimensionMismatch("thermal payload does not match width x height")
        return ThermalFrame(temps.reshape(frame.height, frame.width), frame.timestamp_ns)
    if frame.fmt == AUDIO_BLOCK:
        samples = np.frombuffer(p, ">f4").astype(float)
        if samples.size != frame.width:
            raise DimensionMismatch("audio payload does not match the sample count")
        return AudioClip(float(frame.height), samples, frame.timestamp_ns)
    acc = np.frombuffer(p, ">f4").astype(float)
    if acc.size != frame.width * 3:
        raise DimensionMismatch("accelerometer payload does not match the sample count")
    return AccelStream(acc.reshape(-1, 3), float(frame.height), frame.timestamp_ns)


# paced TCP sources

class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class FrameSource:
    """Serves a fixed frame sequence to every client that connects.

    Each client gets the full sequence, frame k sent ``k / rate_hz`` seconds
    after it connected.  ``drop_after`` makes the source cut every
    connection abruptly (mid-frame) after that many frames, for testing
    disconnect handling.
    """

    def __init__(self, frames, rate_hz=90.0, port=0, host="127.0.0.1", drop_after=None):
        if not rate_hz > 0:
            raise ValueError("rate_hz must be > 0")
        frames = list(frames)
        stamps = [f.timestamp_ns for f in frames]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("frame timestamps must be non-decreasing")
        self.rate_hz = float(rate_hz)
        self.drop_after = drop_after
        self._blobs = [encode_frame(f) for f in frames]
        source = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                source._send_all(self.request)

        try:
            self._server = _Server((host, port), Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self.host, self.port

    def _send_all(self, sock):
        t0 = time.perf_counter()
        period = 1.0 / self.rate_hz
        try:
            for k, blob in enumerate(self._blobs):
                if self.drop_after is not None and k >= self.drop_after:
                    sock.sendall(blob[: len(blob) // 2])
                    sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                    return
                delay = t0 + k * period - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                sock.sendall(blob)
        except OSError:
            pass  # client went away

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def source_serve(frames, rate_hz=90.0, port=0, host="127.0.0.1", drop_after=None) -> FrameSource:
    return FrameSource(frames, rate_hz, port, host, drop_after)


# alignment

@dataclass
class AlignedBundle:
    reference_ns: int
    members: dict = field(default_factory=dict)  # stream index -> WireFrame

    def by_format(self, fmt) -> dict:
        return {s: f for s, f in self.members.items() if f.fmt == fmt}

    @property
    def tactile(self) -> dict:
        """Tactile frames keyed by sensor id."""
        return {f.sensor_id: f for f in self.by_format(RGB888).values()}

    @property
    def thermal(self):
        return next(iter(self.by_format(THERMAL_F32).values()), None)

    @property
    def audio(self):
        return next(iter(self.by_format(AUDIO_BLOCK).values()), None)

    @property
    def accel(self):
        return next(iter(self.by_format(ACCEL_BLOCK).values()), None)

    def __len__(self):
        return len(self.members)


class Aligner:
    """Groups frames from several streams by nearest timestamp.

    The earliest buffered frame is the reference; each other stream
    contributes its earliest frame inside ``[ref, ref + window]``.  A bundle
    is released once every live stream has reported a timestamp past
    ``ref + window`` (so nothing that could still join is missing), once
    the stream has closed, or once newer data is more than ``horizon``
    ahead (so a silent stream never blocks the rest).  Frames that arrive
    older than an already released reference are dropped and counted.
    """

    def __init__(self, n_streams, window_ms=DEFAULT_WINDOW_MS, horizon_ms=HORIZON_MS):
        if n_streams < 1:
            raise ValueError("need at least one stream")
        self.n = n_streams
        self.window = int(round(window_ms * 1e6))
        self.horizon = int(round(horizon_ms * 1e6))
        self._heaps = [[] for _ in range(n_streams)]
        self._seq = 0
        self._watermark = [None] * n_streams
        self._closed = [False] * n_streams
        self._last_ref = None
        self.dropped = 0

    def push(self, stream, frame: WireFrame) -> list[AlignedBundle]:
        ts = frame.timestamp_ns
        if self._last_ref is not None and ts < self._last_ref:
            self.dropped += 1
            return self._release()
        heapq.heappush(self._heaps[stream], (ts, self._seq, frame))
        self._seq += 1
        wm = self._watermark[stream]
        self._watermark[stream] = ts if wm is None else max(wm, ts)
        return self._release()

    def close(self, stream) -> list[AlignedBundle]:
        self._closed[stream] = True
        return self._release()

    def flush(self) -> list[AlignedBundle]:
        self._closed = [True] * self.n
        return self._release()

    def _ready(self, ref):
        newest = max((w for w in self._watermark if w is not None), default=ref)
        if newest - ref > self.horizon:
            return True
        for s in range(self.n):
            if self._closed[s]:
                continue
            wm = self._watermark[s]
            if wm is None or wm <= ref + self.window:
                return False
        return True

    def _release(self) -> list[AlignedBundle]:
        out = []
        while True:
            heads = [(h[0][0], s) for s, h in enumerate(self._heaps) if h]
            if not heads:
                return out
            ref, _ = min(heads)
            if not self._ready(ref):
                return out
            bundle = AlignedBundle(ref)
            for s, h in enumerate(self._heaps):
                if h and h[0][0] <= ref + self.window:
                    bundle.members[s] = heapq.heappop(h)[2]
            self._last_ref = ref
            out.append(bundle)


def align(streams, window_ms=DEFAULT_WINDOW_MS, horizon_ms=HORIZON_MS) -> list[AlignedBundle]:
    """Offline alignment of in-memory frame sequences."""
    aligner = Aligner(len(streams), window_ms, horizon_ms)
    events = sorted((f.timestamp_ns, s, k) for s, frames in enumerate(streams) for k, f in enumerate(frames))
    out = []
    for _, s, k in events:
        out.extend(aligner.push(s, streams[s][k]))
    out.extend(aligner.flush())
    return out


class Aggregator:
    """Connects to source endpoints and yields aligned bundles as they complete.

    One reader thread per endpoint feeds a bounded queue.  A connection
    that breaks (reset, or cut mid-frame) is recorded once in
    ``disconnected`` and the remaining streams carry on; a clean close at a
    frame boundary simply ends that stream.
    """

    def __init__(self, endpoints, window_ms=DEFAULT_WINDOW_MS, horizon_ms=HORIZON_MS,
                 queue_size=256, timeout_s=5.0, on_disconnect=None):
        if not endpoints:
            raise ValueError("need at least one endpoint")
        self.endpoints = [tuple(e) for e in endpoints]
        self.aligner = Aligner(len(self.endpoints), window_ms, horizon_ms)
        self.disconnected: list[Disconnected] = []
        self.received = [0] * len(self.endpoints)
        self._queue = queue.Queue(maxsize=queue_size)
        self._timeout = timeout_s
        self._on_disconnect = on_disconnect

    def _reader(self, idx):
        endpoint = self.endpoints[idx]
        try:
            with socket.create_connection(endpoint, timeout=self._timeout) as sock:
                rfile = sock.makefile("rb")
                while True:
                    frame = read_frame(rfile)
                    if frame is None:
                        self._queue.put((idx, None))
                        return
                    self._queue.put((idx, frame))
        except (OSError, WireError) as exc:
            self._queue.put((idx, Disconnected(endpoint, str(exc) or type(exc).__name__)))

    def __iter__(self):
        threads = [threading.Thread(target=self._reader, args=(i,), daemon=True)
                   for i in range(len(self.endpoints))]
        for t in threads:
            t.start()
        live = len(threads)
        while live:
            idx, item = self._queue.get()
            if isinstance(item, WireFrame):
                self.received[idx] += 1
                yield from self.aligner.push(idx, item)
                continue
            live -= 1
            if isinstance(item, Disconnected):
                self.disconnected.append(item)
                if self._on_disconnect is not None:
                    self._on_disconnect(item)
            yield from self.aligner.close(idx)
        yield from self.aligner.flush()
        for t in threads:
            t.join()


def aggregate(endpoints, window_ms=DEFAULT_WINDOW_MS, **kw) -> Aggregator:
    return Aggregator(endpoints, window_ms, **kw)
