"""Binary window frames exchanged between sensor nodes and the gateway.

Layout (little-endian): magic "FD" | version u8 | node_type u8 | node_id u16 | seq u32 |
t0_us u64 | n_samples u16 | n_channels u8 | payload f32[n_samples * n_channels] | crc32 u32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import CorruptFrame, ProtocolError

MAGIC = b"FD"
VERSION = 1
VIBRATION, RADAR = 1, 2
CHANNELS = {VIBRATION: 3, RADAR: 5}
MAX_SAMPLES = 4096
_HEADER = struct.Struct("<2sBBHIQHB")
HEADER_SIZE = _HEADER.size      # 21
CRC_SIZE = 4


@dataclass
class WireFrame:
    node_type: int
    node_id: int
    seq: int
    t0_us: int
    payload: np.ndarray          # (n_samples, n_channels) float32

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype="<f4")
        if self.payload.ndim != 2:
            raise ProtocolError("payload must be 2-D (samples, channels)")

    @property
    def n_samples(self) -> int:
        return self.payload.shape[0]

    @property
    def n_channels(self) -> int:
        return self.payload.shape[1]

    def __eq__(self, other):
        return (isinstance(other, WireFrame) and
                (self.node_type, self.node_id, self.seq, self.t0_us) ==
                (other.node_type, other.node_id, other.seq, other.t0_us) and
                self.payload.shape == other.payload.shape and
                self.payload.tobytes() == other.payload.tobytes())


def _check_header(node_type: int, n_samples: int, n_channels: int):
    if node_type not in CHANNELS:
        raise ProtocolError(f"unknown node type {node_type}")
    if n_channels != CHANNELS[node_type]:
        raise ProtocolError(f"node type {node_type} carries {CHANNELS[node_type]} channels, got {n_channels}")
    if n_samples > MAX_SAMPLES:
        raise ProtocolError(f"{n_samples} samples exceeds {MAX_SAMPLES}")


def encode_frame(f: WireFrame) -> bytes:
    _check_header(f.node_type, f.n_samples, f.n_channels)
    head = _HEADER.pack(MAGIC, VERSION, f.node_type, f.node_id, f.seq, f.t0_us, f.n_samples, f.n_channels)
    body = head + f.payload.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def frame_size(n_samples: int, n_channels: int) -> int:
    return HEADER_SIZE + 4 * n_samples * n_channels + CRC_SIZE


def parse_header(buf: bytes):
    magic, version, node_type, node_id, seq, t0_us, n, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    _check_header(node_type, n, c)
    return node_type, node_id, seq, t0_us, n, c


def decode_frame(buf: bytes) -> WireFrame:
    if len(buf) < HEADER_SIZE + CRC_SIZE:
        raise ProtocolError("buffer shorter than a frame header")
    node_type, node_id, seq, t0_us, n, c = parse_header(buf)
    size = frame_size(n, c)
    if len(buf) != size:
        raise ProtocolError(f"declared frame size {size} but got {len(buf)} bytes")
    (crc,) = struct.unpack_from("<I", buf, size - CRC_SIZE)
    if zlib.crc32(buf[:size - CRC_SIZE]) & 0xFFFFFFFF != crc:
        raise CorruptFrame("crc mismatch")
    payload = np.frombuffer(buf, dtype="<f4", count=n * c, offset=HEADER_SIZE).reshape(n, c).copy()
    return WireFrame(node_type, node_id, seq, t0_us, payload)


class StreamDecoder:
    """Incremental decoder for a byte stream of concatenated frames.

    Bad or corrupt data never raises: the decoder skips a byte, searches for the
    next magic and counts what it discarded.
    """

    def __init__(self):
        self.buf = bytearray()
        self.corrupt = 0
        self.malformed = 0
        self.skipped_bytes = 0

    def _skip(self, n: int):
        del self.buf[:n]
        self.skipped_bytes += n

    def feed(self, data: bytes, eof: bool = False) -> list[WireFrame]:
        self.buf += data
        out = []
        while True:
            if len(self.buf) < 2:
                break
            at = self.buf.find(MAGIC)
            if at < 0:
                self._skip(len(self.buf) - 1)
                break
            if at:
                self._skip(at)
            if len(self.buf) < HEADER_SIZE:
                if eof:
                    self._skip(1)
                    continue
                break
            try:
                _, _, _, _, n, c = parse_header(bytes(self.buf[:HEADER_SIZE]))
            except ProtocolError:
                self.malformed += 1
                self._skip(1)
                continue
            size = frame_size(n, c)
            if len(self.buf) < size:
                if eof:
                    self.malformed += 1
                    self._skip(1)
                    continue
                break
            try:
                out.append(decode_frame(bytes(self.buf[:size])))
                del self.buf[:size]
            except CorruptFrame:
                # the length field itself may be damaged, so resume right after the magic
                self.corrupt += 1
                self._skip(1)
        return out
