"""Vehicle/topside wire protocol, byte transports and the lockstep session loop.

Frame layout (little-endian)::

    4E 50 | 01 | type | u32 length | payload | u32 CRC-32 of payload

Message types and payloads:

    0x01 VideoFrame       u32 frame_id, u16 width, u16 height, width*height gray bytes
    0x02 VelocityCommand  4 x f32 (surge, sway, heave, yaw_rate), each in [-1, 1]
    0x03 Telemetry        u32 frame_id, u8 phase, u8 flags, u16 reserved (0),
                          f32 depth, f32 heading, f32 est_distance (valid if flags & 1)
    0x04 DetectionReport  u32 frame_id, u16 count, count x (u8 class, 4 x f32 bbox, f32 conf)
    0x05 Heartbeat        empty
"""
from __future__ import annotations

import logging
import math
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .records import CLASS_CODES, DEFECT_CLASSES, ControlCommand, Detection, Phase, Telemetry

log = logging.getLogger(__name__)

MAGIC = b"NP"
VERSION = 1
HEADER = struct.Struct("<2sBBI")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 24

VIDEO_FRAME, VELOCITY_COMMAND, TELEMETRY, DETECTION_REPORT, HEARTBEAT = 1, 2, 3, 4, 5

_VIDEO = struct.Struct("<IHH")
_CMD = struct.Struct("<4f")
_TELEM = struct.Struct("<IBBHfff")
_REPORT = struct.Struct("<IH")
_DET = struct.Struct("<B5f")


class LinkError(Exception):
    kind = "link-error"


class BadMagic(LinkError):
    kind = "bad-magic"


class BadVersion(LinkError):
    kind = "bad-version"


class UnknownType(LinkError):
    kind = "unknown-type"


class Oversize(LinkError):
    kind = "oversize-payload"


class BadCrc(LinkError):
    kind = "bad-crc"


class Truncated(LinkError):
    kind = "truncated"


class PayloadError(LinkError):
    kind = "bad-payload"


class LinkClosed(LinkError):
    kind = "closed"


class LinkTimeout(LinkError):
    kind = "timeout"


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VideoFrame:
    frame_id: int
    pixels: np.ndarray  # uint8 [row, col]

    def __eq__(self, other):
        return (isinstance(other, VideoFrame) and self.frame_id == other.frame_id
                and self.pixels.shape == other.pixels.shape
                and bool(np.array_equal(self.pixels, other.pixels)))

    __hash__ = None


@dataclass(frozen=True)
class DetectionReport:
    frame_id: int
    detections: tuple = ()


@dataclass(frozen=True)
class Heartbeat:
    pass


# VelocityCommand travels as records.ControlCommand, Telemetry as records.Telemetry
VelocityCommand = ControlCommand

MESSAGE_TYPES = {VideoFrame: VIDEO_FRAME, ControlCommand: VELOCITY_COMMAND, Telemetry: TELEMETRY,
                 DetectionReport: DETECTION_REPORT, Heartbeat: HEARTBEAT}


def crc32(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def _f32_ok(x):
    return math.isfinite(x) and abs(x) < 3.4e38


def _encode_payload(msg):
    if isinstance(msg, VideoFrame):
        px = np.asarray(msg.pixels)
        if px.dtype != np.uint8 or px.ndim != 2 or 0 in px.shape or max(px.shape) > 0xFFFF:
            raise PayloadError("video pixels must be a non-empty 2-D uint8 array")
        h, w = px.shape
        return _VIDEO.pack(msg.frame_id, w, h) + np.ascontiguousarray(px).tobytes()
    if isinstance(msg, ControlCommand):
        vals = msg.as_tuple()
        if not all(_f32_ok(v) and -1.0 <= v <= 1.0 for v in vals):
            raise PayloadError(f"command components must lie in [-1, 1]: {vals}")
        return _CMD.pack(*vals)
    if isinstance(msg, Telemetry):
        est = msg.est_distance
        if not (_f32_ok(msg.depth) and msg.depth >= 0 and _f32_ok(msg.heading)):
            raise PayloadError("telemetry depth must be finite and non-negative")
        if est is not None and not _f32_ok(est):
            raise PayloadError("estimated distance must be finite")
        return _TELEM.pack(msg.frame_id, int(Phase(msg.phase)), 0 if est is None else 1, 0,
                           msg.depth, msg.heading, 0.0 if est is None else est)
    if isinstance(msg, DetectionReport):
        parts = [_REPORT.pack(msg.frame_id, len(msg.detections))]
        for d in msg.detections:
            parts.append(_DET.pack(CLASS_CODES[d.cls], *d.bbox, d.confidence))
        return b"".join(parts)
    if isinstance(msg, Heartbeat):
        return b""
    raise PayloadError(f"not a link message: {type(msg).__name__}")


def encode_message(msg) -> bytes:
    try:
        payload = _encode_payload(msg)
    except struct.error as e:  # field out of its integer range
        raise PayloadError(str(e)) from None
    if len(payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, MESSAGE_TYPES[type(msg)], len(payload)) + payload + CRC.pack(crc32(payload))


def _decode_payload(mtype, p):
    n = len(p)
    if mtype == VIDEO_FRAME:
        if n < _VIDEO.size:
            raise PayloadError("short video header")
        fid, w, h = _VIDEO.unpack_from(p)
        if w == 0 or h == 0 or n != _VIDEO.size + w * h:
            raise PayloadError(f"video size {w}x{h} does not match payload of {n} bytes")
        return VideoFrame(fid, np.frombuffer(p, np.uint8, w * h, _VIDEO.size).reshape(h, w).copy())
    if mtype == VELOCITY_COMMAND:
        if n != _CMD.size:
            raise PayloadError("velocity command must be 16 bytes")
        vals = _CMD.unpack(p)
        if not all(-1.0 <= v <= 1.0 for v in vals):  # also rejects nan
            raise PayloadError(f"command out of range: {vals}")
        return ControlCommand(*vals)
    if mtype == TELEMETRY:
        if n != _TELEM.size:
            raise PayloadError("telemetry must be 20 bytes")
        fid, phase, flags, reserved, depth, heading, est = _TELEM.unpack(p)
        if reserved != 0 or flags > 1 or phase not in Phase._value2member_map_:
            raise PayloadError("bad telemetry flags")
        if not (depth >= 0 and math.isfinite(depth) and math.isfinite(heading) and math.isfinite(est)):
            raise PayloadError("telemetry field out of domain")
        if not flags and est != 0.0:
            raise PayloadError("absent distance must be zero-filled")
        return Telemetry(fid, depth, heading, est if flags else None, Phase(phase))
    if mtype == DETECTION_REPORT:
        if n < _REPORT.size:
            raise PayloadError("short detection report")
        fid, count = _REPORT.unpack_from(p)
        if n != _REPORT.size + count * _DET.size:
            raise PayloadError(f"{count} detections do not fit {n} bytes")
        dets = []
        for off in range(_REPORT.size, n, _DET.size):
            code, x0, y0, x1, y1, conf = _DET.unpack_from(p, off)
            if code >= len(DEFECT_CLASSES):
                raise PayloadError(f"unknown class code {code}")
            try:
                dets.append(Detection(DEFECT_CLASSES[code], (x0, y0, x1, y1), conf))
            except ValueError as e:
                raise PayloadError(str(e)) from None
        return DetectionReport(fid, tuple(dets))
    if mtype == HEARTBEAT:
        if n:
            raise PayloadError("heartbeat carries no payload")
        return Heartbeat()
    raise UnknownType(f"type 0x{mtype:02x}")


def _check_header(buf):
    """Validate the 8-byte header; returns (type, payload length)."""
    magic, version, mtype, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"got {bytes(magic)!r}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    if not VIDEO_FRAME <= mtype <= HEARTBEAT:
        raise UnknownType(f"type 0x{mtype:02x}")
    if length > MAX_PAYLOAD:
        raise Oversize(f"declared length {length}")
    return mtype, length


def decode_message(stream):
    """Decode exactly one frame from ``bytes`` or a binary file-like object.

    No resynchronization here; see ``FrameDecoder`` for streams.
    """
    read = stream.read if hasattr(stream, "read") else None
    data = bytes(stream) if read is None else read(HEADER.size)
    if len(data) < HEADER.size:
        raise Truncated("incomplete header")
    mtype, length = _check_header(data)
    if read is not None:
        data += read(length + CRC.size)
    if len(data) < HEADER.size + length + CRC.size:
        raise Truncated(f"need {HEADER.size + length + CRC.size} bytes, have {len(data)}")
    payload = data[HEADER.size:HEADER.size + length]
    (crc,) = CRC.unpack_from(data, HEADER.size + length)
    if crc != crc32(payload):
        raise BadCrc(f"crc 0x{crc:08x} != 0x{crc32(payload):08x}")
    return _decode_payload(mtype, payload)


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, get whole messages back.

    Corrupt frames are dropped and counted in ``errors`` (one entry per
    event, by kind); decoding resumes at the next magic after the bad byte.
    """

    def __init__(self):
        self._buf = bytearray()
        self.errors: list[str] = []

    def _error(self, exc):
        self.errors.append(exc.kind)
        log.info("link decode error: %s (%s)", exc.kind, exc)

    def feed(self, data) -> list:
        self._buf += data
        out = []
        buf = self._buf
        while True:
            start = buf.find(MAGIC)
            if start != 0:
                # keep a trailing 'N' that may be the first half of the magic
                drop = start if start > 0 else len(buf) - (1 if buf[-1:] == MAGIC[:1] else 0)
                if drop:
                    self._error(BadMagic(f"skipped {drop} bytes"))
                    del buf[:drop]
                if start < 0:
                    break
            if len(buf) < HEADER.size:
                break
            try:
                mtype, length = _check_header(buf)
            except LinkError as e:
                self._error(e)
                del buf[:1]
                continue
            end = HEADER.size + length + CRC.size
            if len(buf) < end:
                break
            payload = bytes(buf[HEADER.size:HEADER.size + length])
            (crc,) = CRC.unpack_from(buf, HEADER.size + length)
            if crc != crc32(payload):
                self._error(BadCrc(f"type 0x{mtype:02x}, {length} bytes"))
                del buf[:1]
                continue
            try:
                msg = _decode_payload(mtype, payload)
            except LinkError as e:
                self._error(e)
                del buf[:1]
                continue
            del buf[:end]
            out.append(msg)
        return out

    def close(self):
        """Flush at end of stream; leftover bytes count as a truncated frame."""
        if self._buf:
            self._error(Truncated(f"{len(self._buf)} bytes at end of stream"))
            self._buf.clear()


def decode_stream(data, chunk=None):
    """All messages in ``data``, optionally delivered in ``chunk``-byte pieces."""
    dec = FrameDecoder()
    out = []
    step = chunk or max(1, len(data))
    for i in range(0, len(data), step):
        out.extend(dec.feed(data[i:i + step]))
    dec.close()
    return out, dec.errors


# -- transports -------------------------------------------------------------

class MemoryTransport:
    """One end of an in-process duplex byte pipe; see ``memory_pair``."""

    def __init__(self, inbox, outbox, chunk=None):
        self._in, self._out = inbox, outbox
        self._chunk = chunk
        self._pending = b""
        self._eof = False
        self.closed = False

    def send(self, data: bytes):
        if self.closed:
            raise LinkClosed("transport closed")
        step = self._chunk or max(1, len(data))
        for i in range(0, len(data), step):
            self._out.put(bytes(data[i:i + step]))

    def recv(self, timeout=None) -> bytes:
        """Next chunk of bytes; ``b""`` at end of stream; raises LinkTimeout."""
        if self._eof:
            return b""
        try:
            data = self._in.get(timeout=timeout)
        except queue.Empty:
            raise LinkTimeout("no data") from None
        if data is None:
            self._eof = True
            return b""
        return data

    def close(self):
        if not self.closed:
            self.closed = True
            self._out.put(None)


def memory_pair(chunk=None):
    a, b = queue.Queue(), queue.Queue()
    return MemoryTransport(a, b, chunk), MemoryTransport(b, a, chunk)


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.closed = False

    @classmethod
    def connect(cls, host, port, timeout=10.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, data: bytes):
        try:
            self.sock.settimeout(None)
            self.sock.sendall(data)
        except OSError as e:
            raise LinkClosed(str(e)) from None

    def recv(self, timeout=None) -> bytes:
        try:
            self.sock.settimeout(timeout)
            return self.sock.recv(1 << 16)
        except socket.timeout:
            raise LinkTimeout("no data") from None
        except OSError as e:
            raise LinkClosed(str(e)) from None

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def parse_endpoint(spec):
    """``"tcp:host:port"`` or ``"host:port"`` -> (host, port)."""
    s = spec[4:] if spec.startswith("tcp:") else spec
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {spec!r}")
    return host, int(port)


# -- sessions ---------------------------------------------------------------

class LinkSession:
    """Message-level wrapper around a transport. One owner per direction."""

    def __init__(self, transport):
        self.transport = transport
        self.decoder = FrameDecoder()
        self._inbox = []

    def send(self, msg):
        self.transport.send(encode_message(msg))

    def recv(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._inbox:
            left = None if deadline is None else max(0.0, deadline - time.monotonic())
            data = self.transport.recv(left)
            if not data:
                self.decoder.close()
                raise LinkClosed("peer closed the link")
            self._inbox.extend(self.decoder.feed(data))
            if not self._inbox and deadline is not None and time.monotonic() >= deadline:
                raise LinkTimeout("no complete message before the deadline")
        return self._inbox.pop(0)

    def close(self):
        self.transport.close()


class SessionAbort(Exception):
    """Raised by a handler to end the session."""


@dataclass
class SessionOutcome:
    status: str  # completed | closed | timeout | aborted | transport_error
    frames: int = 0
    detail: str = ""
    errors: list = field(default_factory=list)


def run_session(role, transport, handlers, heartbeat_timeout=5.0) -> SessionOutcome:
    """Drive one side of the lockstep loop until it ends; never raises.

    vehicle: ``handlers.produce()`` returns the (VideoFrame, Telemetry) pair
    for the next tick or ``None`` when finished; every reply message goes to
    ``handlers.consume(msg)`` and a VelocityCommand closes the tick.

    topside: ``handlers.on_frame(video, telemetry)`` returns the reply list,
    which must end with a VelocityCommand.  Optional ``handlers.on_message``
    sees anything else.

    Any received message (heartbeats included) resets the timeout.
    """
    if role not in ("vehicle", "topside"):
        raise ValueError(f"unknown role {role!r}")
    link = LinkSession(transport)
    frames = 0

    def done(status, detail=""):
        link.close()
        return SessionOutcome(status, frames, detail, list(link.decoder.errors))

    try:
        if role == "vehicle":
            while True:
                tick = handlers.produce()
                if tick is None:
                    return done("completed")
                for m in tick:
                    link.send(m)
                while True:
                    msg = link.recv(heartbeat_timeout)
                    if isinstance(msg, Heartbeat):
                        continue
                    handlers.consume(msg)
                    if isinstance(msg, ControlCommand):
                        break
                frames += 1
        video = None
        while True:
            msg = link.recv(heartbeat_timeout)
            if isinstance(msg, VideoFrame):
                video = msg
            elif isinstance(msg, Telemetry) and video is not None:
                replies = handlers.on_frame(video, msg)
                for r in replies:
                    link.send(r)
                video = None
                frames += 1
            elif not isinstance(msg, Heartbeat) and hasattr(handlers, "on_message"):
                handlers.on_message(msg)
    except SessionAbort as e:
        return done("aborted", str(e))
    except LinkTimeout as e:
        return done("timeout", str(e))
    except LinkClosed as e:
        return done("closed", str(e))
    except (OSError, LinkError) as e:
        return done("transport_error", f"{type(e).__name__}: {e}")


# -- external detector service ---------------------------------------------

def request_detections(link: LinkSession, frame_id, img, timeout=5.0):
    """Ship one frame to a detector service and wait for its report."""
    link.send(VideoFrame(frame_id, np.asarray(img, np.uint8)))
    while True:
        msg = link.recv(timeout)
        if isinstance(msg, DetectionReport):
            if msg.frame_id != frame_id:
                raise PayloadError(f"report for frame {msg.frame_id}, expected {frame_id}")
            return list(msg.detections)


def serve_detector(transport, detector, idle_timeout=None):
    """Answer every VideoFrame with ``DetectionReport(detector(pixels))``.

    Returns when the peer closes or goes quiet for ``idle_timeout`` seconds.
    """
    link = LinkSession(transport)
    served = 0
    try:
        while True:
            msg = link.recv(idle_timeout)
            if isinstance(msg, VideoFrame):
                link.send(DetectionReport(msg.frame_id, tuple(detector(msg.pixels))))
                served += 1
    except (LinkClosed, LinkTimeout, OSError):
        pass
    finally:
        link.close()
    return served


def start_detector_server(host, port, detector, ready: threading.Event | None = None):
    """Bind ``host:port`` and serve detector clients one at a time, in a daemon thread.

    Returns ``(thread, bound_port)``.
    """
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    bound = srv.getsockname()[1]

    def loop():
        with srv:
            while True:
                conn, _ = srv.accept()
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                serve_detector(SocketTransport(conn), detector)

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    if ready is not None:
        ready.set()
    return t, bound
