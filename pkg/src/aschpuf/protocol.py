"""Device/server enrollment and key verification.

Frames on the wire::

    uint32 LE  length of (tag + payload)
    uint8      message tag
    bytes      payload

Static-mode servers keep the stabilized golden key. Dynamic-mode servers keep
the original and healed golden planes and rebuild the expected key from the
heal/mask map the device sends in plaintext at each session.

The key proof is the raw key; there is no KDF or MAC on this channel.
"""

from __future__ import annotations

import enum
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cell import CellConfig, Environment
from .keygen import BitPlane, DimensionMismatch, Key, bits_from_bytes, bits_to_bytes, stabilize_readout
from .maps import MalformedMap, StabilizationMap, from_q16, pack_bits_lsb, to_q16, unpack_bits_lsb

MAX_FRAME = 1 << 24
_LEN = struct.Struct("<I")


class ProtocolError(ValueError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class DuplicateChip(ValueError):
    pass


class UnknownChip(KeyError):
    pass


class MessageType(enum.IntEnum):
    ENROLL_STATIC = 1
    ENROLL_DYNAMIC = 2
    SESSION_MAP = 3
    KEY_PROOF = 4
    VERDICT = 5


class Mode(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


@dataclass(frozen=True)
class Message:
    type: MessageType
    payload: bytes = b""


def encode_frame(msg: Message) -> bytes:
    if len(msg.payload) + 1 > MAX_FRAME:
        raise ProtocolError("payload too large")
    return _LEN.pack(len(msg.payload) + 1) + bytes([int(msg.type)]) + msg.payload


def decode_frame(data: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame at ``offset``; return it and the offset just past it."""
    if len(data) - offset < _LEN.size:
        raise TruncatedFrame("incomplete length prefix")
    (length,) = _LEN.unpack_from(data, offset)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"invalid frame length {length}")
    end = offset + _LEN.size + length
    if end > len(data):
        raise TruncatedFrame(f"frame needs {length} bytes, {len(data) - offset - _LEN.size} available")
    tag = data[offset + _LEN.size]
    try:
        kind = MessageType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message tag {tag}") from None
    return Message(kind, bytes(data[offset + _LEN.size + 1:end])), end


def decode_all(data: bytes) -> list[Message]:
    out, pos = [], 0
    while pos < len(data):
        msg, pos = decode_frame(data, pos)
        out.append(msg)
    return out


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return buf


def read_frame(stream) -> Message | None:
    """Read one frame from a binary stream; None on clean end of stream."""
    head = _read_exact(stream, _LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise TruncatedFrame("stream ended inside length prefix")
    (length,) = _LEN.unpack(head)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"invalid frame length {length}")
    body = _read_exact(stream, length)
    if len(body) < length:
        raise TruncatedFrame("stream ended inside frame")
    msg, _ = decode_frame(head + body)
    return msg


# -- payload codecs ----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("payload truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError:
            raise ProtocolError("chip id is not UTF-8") from None

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError("trailing bytes in payload")


def _text(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def plane_to_bytes(plane: BitPlane) -> bytes:
    rows, cols = plane.shape
    return (struct.pack("<IIBiiI", rows, cols, int(plane.config), to_q16(plane.env.vdd),
                        to_q16(plane.env.temperature), plane.n_avg)
            + pack_bits_lsb(plane.bits))


def plane_from_bytes(data: bytes) -> BitPlane:
    r = _Reader(data)
    rows, cols, config, vdd, temp, n_avg = r.unpack("<IIBiiI")
    bits = unpack_bits_lsb(r.take((rows * cols + 7) // 8), rows * cols).reshape(rows, cols)
    r.done()
    if config not in (0, 1):
        raise ProtocolError(f"unknown cell configuration {config}")
    return BitPlane(bits, CellConfig(config), Environment(from_q16(vdd), from_q16(temp)), n_avg)


def key_to_bytes(key: Key) -> bytes:
    return struct.pack("<I", key.length) + bits_to_bytes(key.bits)


def key_from_reader(r: _Reader) -> Key:
    (n,) = r.unpack("<I")
    return Key(bits_from_bytes(r.take((n + 7) // 8), n))


@dataclass(frozen=True, eq=False)
class EnrollmentRecord:
    chip_id: str
    mode: Mode
    static_key: Key | None = None
    enrolled_map: StabilizationMap | None = None
    orig_plane: BitPlane | None = None
    healed_plane: BitPlane | None = None

    def __post_init__(self):
        static_fields = self.static_key is not None and self.enrolled_map is not None
        dynamic_fields = self.orig_plane is not None and self.healed_plane is not None
        if self.mode == Mode.STATIC and not (static_fields and self.orig_plane is None and self.healed_plane is None):
            raise ValueError("static record needs static_key and enrolled_map only")
        if self.mode == Mode.DYNAMIC:
            if not dynamic_fields or self.static_key is not None or self.enrolled_map is not None:
                raise ValueError("dynamic record needs orig_plane and healed_plane only")
            if self.orig_plane.shape != self.healed_plane.shape:
                raise DimensionMismatch("original and healed planes differ in shape")

    @classmethod
    def static(cls, chip_id: str, key: Key, smap: StabilizationMap) -> EnrollmentRecord:
        return cls(chip_id, Mode.STATIC, static_key=key, enrolled_map=smap)

    @classmethod
    def dynamic(cls, chip_id: str, orig: BitPlane, healed: BitPlane) -> EnrollmentRecord:
        return cls(chip_id, Mode.DYNAMIC, orig_plane=orig, healed_plane=healed)

    def to_bytes(self) -> bytes:
        head = bytes([int(self.mode)]) + _text(self.chip_id)
        if self.mode == Mode.STATIC:
            return head + key_to_bytes(self.static_key) + _blob(self.enrolled_map.to_bytes())
        return head + _blob(plane_to_bytes(self.orig_plane)) + _blob(plane_to_bytes(self.healed_plane))

    @classmethod
    def from_bytes(cls, data: bytes) -> EnrollmentRecord:
        r = _Reader(data)
        (mode,) = r.unpack("<B")
        try:
            mode = Mode(mode)
        except ValueError:
            raise ProtocolError(f"unknown record mode {mode}") from None
        chip_id = r.text()
        try:
            if mode == Mode.STATIC:
                key = key_from_reader(r)
                smap = StabilizationMap.from_bytes(r.blob())
                r.done()
                return cls.static(chip_id, key, smap)
            orig = plane_from_bytes(r.blob())
            healed = plane_from_bytes(r.blob())
            r.done()
            return cls.dynamic(chip_id, orig, healed)
        except (MalformedMap, struct.error) as exc:
            raise ProtocolError(str(exc)) from None

    def __eq__(self, other):
        if not isinstance(other, EnrollmentRecord):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def session_map_payload(chip_id: str, smap: StabilizationMap) -> bytes:
    return _text(chip_id) + smap.to_bytes()


def parse_session_map(payload: bytes) -> tuple[str, StabilizationMap]:
    r = _Reader(payload)
    chip_id = r.text()
    return chip_id, StabilizationMap.from_bytes(payload[r.pos:])


def key_proof_payload(chip_id: str, key: Key) -> bytes:
    return _text(chip_id) + key_to_bytes(key)


def parse_key_proof(payload: bytes) -> tuple[str, Key]:
    r = _Reader(payload)
    chip_id = r.text()
    key = key_from_reader(r)
    r.done()
    return chip_id, key


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""

    def to_bytes(self) -> bytes:
        return bytes([int(self.accepted)]) + self.reason.encode()

    @classmethod
    def from_bytes(cls, payload: bytes) -> Verdict:
        if not payload or payload[0] > 1:
            raise ProtocolError("malformed verdict")
        return cls(bool(payload[0]), payload[1:].decode())


# -- server side ----------------------------------------------------------------------

DB_MAGIC = b"ASCHDB01"


class EnrollmentDB:
    """Enrolled records, optionally persisted to an append-only file.

    File layout: ``ASCHDB01`` followed by records, each a uint32 LE length and
    the record encoding. Writes are serialized; lookups need no lock.
    """

    def __init__(self, path=None):
        self._records: dict[str, EnrollmentRecord] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        data = self.path.read_bytes()
        if data[:8] != DB_MAGIC:
            raise ProtocolError(f"{self.path} is not an ASCHDB01 file")
        r = _Reader(data[8:])
        while r.pos < len(r.data):
            rec = EnrollmentRecord.from_bytes(r.blob())
            self._records[rec.chip_id] = rec

    def __contains__(self, chip_id) -> bool:
        return chip_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def lookup(self, chip_id: str) -> EnrollmentRecord:
        try:
            return self._records[chip_id]
        except KeyError:
            raise UnknownChip(chip_id) from None

    def enroll(self, record: EnrollmentRecord) -> bool:
        """Store ``record``; True if new, False if an identical copy exists."""
        with self._lock:
            existing = self._records.get(record.chip_id)
            if existing is not None:
                if existing == record:
                    return False
                raise DuplicateChip(record.chip_id)
            self._records[record.chip_id] = record
            if self.path is not None:
                fresh = not self.path.exists()
                with open(self.path, "ab") as fh:
                    if fresh:
                        fh.write(DB_MAGIC)
                    fh.write(_blob(record.to_bytes()))
            return True


def enroll(db: EnrollmentDB, record: EnrollmentRecord) -> Verdict:
    created = db.enroll(record)
    return Verdict(True, "enrolled" if created else "already enrolled")


def server_expected_key(record: EnrollmentRecord, session_map: StabilizationMap, length: int | None) -> Key:
    """Mirror of the device's output stabilization over the stored golden planes."""
    if record.mode != Mode.DYNAMIC:
        raise ValueError("expected-key reconstruction needs a dynamic record")
    if session_map.shape != record.orig_plane.shape:
        raise DimensionMismatch(f"map {session_map.shape} vs planes {record.orig_plane.shape}")
    return stabilize_readout(record.orig_plane, record.healed_plane, session_map, length,
                             provenance=f"server:{record.chip_id}")


def verify(db: EnrollmentDB, chip_id: str, session_map: StabilizationMap | None, key_proof: Key,
           length: int | None = None) -> Verdict:
    record = db.lookup(chip_id)
    length = key_proof.length if length is None else length
    if record.mode == Mode.STATIC:
        expected = record.static_key.bits[:length]
        if expected.size < length:
            return Verdict(False, "key longer than enrolled key")
    else:
        if session_map is None:
            raise MalformedMap("dynamic verification needs a session map")
        try:
            expected = server_expected_key(record, session_map, length).bits
        except DimensionMismatch as exc:
            raise MalformedMap(str(exc)) from None
        except ValueError as exc:
            return Verdict(False, str(exc))
    if key_proof.length != length or not np.array_equal(expected, key_proof.bits):
        return Verdict(False, "key mismatch")
    return Verdict(True, "key verified")


def session_overhead(smap: StabilizationMap, length: int | None = None) -> int:
    """Bytes of plaintext the device sends per session: the encoded map.

    The size depends only on the array dimensions, never on ``length`` or
    on any key value.
    """
    return len(smap.to_bytes())


class ServerSession:
    """Per-connection state machine; maps arrive before key proofs."""

    def __init__(self, db: EnrollmentDB):
        self.db = db
        self.pending_maps: dict[str, StabilizationMap] = {}

    def handle(self, msg: Message) -> Message | None:
        try:
            if msg.type in (MessageType.ENROLL_STATIC, MessageType.ENROLL_DYNAMIC):
                record = EnrollmentRecord.from_bytes(msg.payload)
                want = Mode.STATIC if msg.type == MessageType.ENROLL_STATIC else Mode.DYNAMIC
                if record.mode != want:
                    return _verdict(False, "record mode does not match message type")
                return _verdict(*_astuple(enroll(self.db, record)))
            if msg.type == MessageType.SESSION_MAP:
                chip_id, smap = parse_session_map(msg.payload)
                self.pending_maps[chip_id] = smap
                return None
            if msg.type == MessageType.KEY_PROOF:
                chip_id, key = parse_key_proof(msg.payload)
                smap = self.pending_maps.pop(chip_id, None)
                return _verdict(*_astuple(verify(self.db, chip_id, smap, key)))
            return _verdict(False, f"unexpected {msg.type.name} from client")
        except DuplicateChip as exc:
            return _verdict(False, f"duplicate chip {exc}")
        except UnknownChip as exc:
            return _verdict(False, f"unknown chip {exc}")
        except (ProtocolError, MalformedMap, ValueError) as exc:
            return _verdict(False, f"malformed: {exc}")


def _astuple(v: Verdict):
    return v.accepted, v.reason


def _verdict(accepted: bool, reason: str) -> Message:
    return Message(MessageType.VERDICT, Verdict(accepted, reason).to_bytes())


def serve_stream(db: EnrollmentDB, rfile, wfile) -> None:
    session = ServerSession(db)
    while True:
        msg = read_frame(rfile)
        if msg is None:
            return
        reply = session.handle(msg)
        if reply is not None:
            wfile.write(encode_frame(reply))
            wfile.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            serve_stream(self.server.db, self.rfile, self.wfile)
        except ProtocolError:
            pass


class VerificationServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, db: EnrollmentDB):
        super().__init__(address, _Handler)
        self.db = db


class DeviceClient:
    """Client side of the protocol over any connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> DeviceClient:
        return cls(socket.create_connection((host, port), timeout=timeout))

    def close(self):
        self._rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, msg: Message):
        self.sock.sendall(encode_frame(msg))

    def _verdict(self) -> Verdict:
        reply = read_frame(self._rfile)
        if reply is None or reply.type != MessageType.VERDICT:
            raise ProtocolError("expected a verdict")
        return Verdict.from_bytes(reply.payload)

    def enroll(self, record: EnrollmentRecord) -> Verdict:
        kind = MessageType.ENROLL_STATIC if record.mode == Mode.STATIC else MessageType.ENROLL_DYNAMIC
        self._send(Message(kind, record.to_bytes()))
        return self._verdict()

    def verify(self, chip_id: str, key: Key, session_map: StabilizationMap | None = None) -> Verdict:
        if session_map is not None:
            self._send(Message(MessageType.SESSION_MAP, session_map_payload(chip_id, session_map)))
        self._send(Message(MessageType.KEY_PROOF, key_proof_payload(chip_id, key)))
        return self._verdict()


def local_pair(db: EnrollmentDB) -> tuple[DeviceClient, threading.Thread]:
    """Client connected to an in-process server over a socket pair."""
    client_sock, server_sock = socket.socketpair()

    def run():
        with server_sock, server_sock.makefile("rb") as rf, server_sock.makefile("wb") as wf:
            try:
                serve_stream(db, rf, wf)
            except (ProtocolError, OSError):
                pass

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return DeviceClient(client_sock), thread


def write_messages(path, messages) -> None:
    """File-based transport: frames concatenated back to back."""
    with open(path, "wb") as fh:
        for msg in messages:
            fh.write(encode_frame(msg))


def read_messages(path) -> list[Message]:
    out = []
    with open(path, "rb") as fh:
        while (msg := read_frame(fh)) is not None:
            out.append(msg)
    return out


__all__ = [
    "MessageType", "Mode", "Message", "ProtocolError", "TruncatedFrame", "DuplicateChip", "UnknownChip",
    "encode_frame", "decode_frame", "decode_all", "read_frame", "EnrollmentRecord", "EnrollmentDB",
    "Verdict", "enroll", "server_expected_key", "verify", "session_overhead", "ServerSession",
    "serve_stream", "VerificationServer", "DeviceClient", "local_pair", "session_map_payload",
    "parse_session_map", "key_proof_payload", "parse_key_proof", "plane_to_bytes", "plane_from_bytes",
    "write_messages", "read_messages",
]
