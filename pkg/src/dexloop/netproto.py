"""Binary data-plane codec and per-stream reordering filter.

Frames are single UDP datagrams with a fixed little-endian layout:
magic "VDG1" (4B), direction (1B), frame_id (u64), timestamp_us (u64),
count (u16), then count f32 payload values. The same byte layout travels
inside binary WebSocket messages for the browser mirror, so one codec
serves both transports.

Teleop pose streams are fresh-state data: retransmission is wrong for
this class, so the ingestor simply drops anything at or behind the last
delivered frame_id (latest wins) and counts the drops.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VDG1"
HEADER_SIZE = 4 + 1 + 8 + 8 + 2
MAX_DATAGRAM = 1400
MAX_COUNT = (MAX_DATAGRAM - HEADER_SIZE) // 4


class BadMagic(ValueError):
    """Datagram does not start with the data-plane magic."""


class TruncatedFrame(ValueError):
    """Datagram is shorter than its header or declared payload."""


class CountMismatch(ValueError):
    """Declared payload count disagrees with the datagram length."""


class Direction(enum.IntEnum):
    CLIENT_TO_SERVER = 0   # human keypoints + keyvectors
    SERVER_TO_CLIENT = 1   # robot joints, wrist pose, scene state, gate


@dataclass(frozen=True)
class DataPlaneFrame:
    direction: Direction
    frame_id: int
    timestamp_us: int
    payload: np.ndarray

    def __post_init__(self):
        payload = np.asarray(self.payload, dtype="<f4").reshape(-1)
        if payload.shape[0] > MAX_COUNT:
            raise CountMismatch(
                f"payload of {payload.shape[0]} floats exceeds one datagram")
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "direction", Direction(self.direction))

    def __eq__(self, other):
        return (isinstance(other, DataPlaneFrame)
                and self.direction == other.direction
                and self.frame_id == other.frame_id
                and self.timestamp_us == other.timestamp_us
                and np.array_equal(self.payload, other.payload))


def encode_frame(frame: DataPlaneFrame) -> bytes:
    header = MAGIC + struct.pack(
        "<BQQH", int(frame.direction), frame.frame_id, frame.timestamp_us,
        frame.payload.shape[0])
    return header + frame.payload.tobytes()


def decode_frame(data: bytes) -> DataPlaneFrame:
    if len(data) < HEADER_SIZE:
        if data[:4] != MAGIC and len(data) >= 4:
            raise BadMagic("bad data-plane magic")
        raise TruncatedFrame(f"datagram of {len(data)} bytes has no full header")
    if data[:4] != MAGIC:
        raise BadMagic("bad data-plane magic")
    direction, frame_id, timestamp_us, count = struct.unpack_from("<BQQH", data, 4)
    if direction not in (0, 1):
        raise BadMagic(f"unknown direction byte {direction}")
    expected = HEADER_SIZE + count * 4
    if len(data) < expected:
        raise TruncatedFrame(f"payload truncated: {len(data)} < {expected}")
    if len(data) > expected:
        raise CountMismatch(f"datagram has {len(data) - expected} trailing bytes")
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER_SIZE)
    return DataPlaneFrame(Direction(direction), frame_id, timestamp_us, payload.copy())


class StreamIngestor:
    """Latest-wins ordering filter for one frame stream."""

    def __init__(self):
        self.last_delivered: int | None = None
        self.delivered = 0
        self.stale_drops = 0
        self.decode_errors = 0

    def push(self, frame: DataPlaneFrame) -> DataPlaneFrame | None:
        """Deliver frame unless it is at or behind the newest seen id."""
        if self.last_delivered is not None and frame.frame_id <= self.last_delivered:
            self.stale_drops += 1
            return None
        self.last_delivered = frame.frame_id
        self.delivered += 1
        return frame

    def push_datagram(self, data: bytes) -> DataPlaneFrame | None:
        """Decode-and-push; malformed datagrams are counted and dropped."""
        try:
            frame = decode_frame(data)
        except (BadMagic, TruncatedFrame, CountMismatch):
            self.decode_errors += 1
            return None
        return self.push(frame)
