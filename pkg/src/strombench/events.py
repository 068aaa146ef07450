"""Sensor events and their fixed-size wire encoding.

An event travels as a compact JSON array ``[ts,id,t,"pad"]``: creation
timestamp (ms since epoch), sensor id, temperature in degrees Celsius with
one decimal place, and an ``x`` filler string sized so the record hits the
requested byte count exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

MIN_EVENT_SIZE = 27
MAX_EVENT_SIZE = 64 * 1024

# Slot names, in wire order. Used for MissingField reporting.
FIELDS = ("ts", "id", "t", "pad")

_PAD = "x"
# '[' + ',' + ',' + ',"' + '"]'
_FRAME_BYTES = 7


class EventError(ValueError):
    pass


class SizeTooSmall(EventError):
    def __init__(self, target_size: int, minimum: int):
        super().__init__(f"target size {target_size} B is below the minimum of {minimum} B")
        self.target_size = target_size
        self.minimum = minimum


class EncodingError(EventError):
    pass


class ParseError(EventError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MissingField(EventError):
    def __init__(self, field: str):
        super().__init__(f"missing field {field!r}")
        self.field = field


@dataclass(frozen=True, slots=True)
class SensorEvent:
    created_at: int
    sensor_id: int
    temperature_c: float


@dataclass(frozen=True, slots=True)
class EncodedRecord:
    data: bytes

    @property
    def size(self) -> int:
        return len(self.data)


def format_temperature(temperature_c: float) -> str:
    if not math.isfinite(temperature_c):
        raise EncodingError(f"temperature must be finite, got {temperature_c!r}")
    return "%.1f" % temperature_c


def compact_size(e: SensorEvent) -> int:
    """Byte length of ``e`` with an empty pad."""
    return (
        len(str(e.created_at))
        + len(str(e.sensor_id))
        + len(format_temperature(e.temperature_c))
        + _FRAME_BYTES
    )


def minimum_size(e: SensorEvent) -> int:
    return max(MIN_EVENT_SIZE, compact_size(e))


def worst_case_size(num_sensors: int, temp_min_c: float, temp_max_c: float, ts_digits: int = 13) -> int:
    """Largest compact encoding any generated event can have."""
    id_digits = len(str(max(num_sensors - 1, 0)))
    t_chars = max(len(format_temperature(temp_min_c)), len(format_temperature(temp_max_c)))
    return ts_digits + id_digits + t_chars + _FRAME_BYTES


def serialize_event(e: SensorEvent, target_size: int) -> EncodedRecord:
    t = format_temperature(e.temperature_c)
    head = f"[{e.created_at},{e.sensor_id},{t},\""
    slack = target_size - len(head) - 2
    if target_size < MIN_EVENT_SIZE or slack < 0:
        raise SizeTooSmall(target_size, max(MIN_EVENT_SIZE, len(head) + 2))
    return EncodedRecord((head + _PAD * slack + "\"]").encode("ascii"))


def deserialize_event(r: EncodedRecord | bytes) -> SensorEvent:
    data = r.data if isinstance(r, EncodedRecord) else r
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    except UnicodeDecodeError as exc:
        raise ParseError("invalid encoding", exc.start) from None
    if not isinstance(doc, list):
        raise ParseError("expected a JSON array", 0)
    for i, name in enumerate(FIELDS[:3]):
        if len(doc) <= i:
            raise MissingField(name)
    ts, sid, t = doc[0], doc[1], doc[2]
    if not isinstance(ts, int) or not isinstance(sid, int) or isinstance(t, bool):
        raise ParseError("field types do not match [int,int,number,str]", 0)
    if not isinstance(t, (int, float)):
        raise ParseError("temperature is not a number", 0)
    return SensorEvent(created_at=ts, sensor_id=sid, temperature_c=float(t))


def peek_timestamp(record: bytes) -> int:
    """Creation timestamp of any record whose first array slot is ``ts``."""
    return int(record[1:record.index(b",", 1)])


def peek_timestamps(records: list[bytes]) -> np.ndarray:
    """``peek_timestamp`` over a batch, vectorised when records share a layout."""
    n = len(records)
    if n == 0:
        return np.empty(0, dtype=np.float64)
    first = records[0]
    width = len(first)
    comma = first.find(b",", 1)
    if comma > 1 and len(set(map(len, records))) == 1:
        grid = np.frombuffer(b"".join(records), dtype=np.uint8).reshape(n, width)
        digits = grid[:, 1:comma].astype(np.int64) - 48
        if (grid[:, 0] == 91).all() and (grid[:, comma] == 44).all() and ((digits >= 0) & (digits <= 9)).all():
            powers = 10 ** np.arange(comma - 2, -1, -1, dtype=np.int64)
            return (digits @ powers).astype(np.float64)
    return np.fromiter((peek_timestamp(r) for r in records), dtype=np.float64, count=n)


class BatchEncoder:
    """Hot-path encoder for many events of one size.

    Events are addressed by ``(sensor_id, tenths)`` where ``tenths`` is the
    temperature in units of 0.1 °C. Tails (everything after the timestamp)
    are cached per key since a stream only ever uses a bounded key space.
    """

    def __init__(self, target_size: int):
        if target_size < MIN_EVENT_SIZE:
            raise SizeTooSmall(target_size, MIN_EVENT_SIZE)
        self.target_size = target_size
        self._prefix_len = -1
        self._tails = _TailCache(self)

    def _tail(self, sensor_id: int, tenths: int) -> bytes:
        body = f"{sensor_id},{format_temperature(tenths / 10)},\""
        slack = self.target_size - self._prefix_len - len(body) - 2
        if slack < 0:
            raise SizeTooSmall(self.target_size, self.target_size - slack)
        return (body + _PAD * slack + "\"]").encode("ascii")

    def encode(self, created_at: int, sensor_ids, tenths) -> list[bytes]:
        """Records for parallel sequences of sensor ids and temperature tenths."""
        prefix = b"[%d," % created_at
        if len(prefix) != self._prefix_len:
            self._prefix_len = len(prefix)
            self._tails = _TailCache(self)
        keys = (np.asarray(sensor_ids, dtype=np.int64) << 20) | (np.asarray(tenths, dtype=np.int64) & 0xFFFFF)
        tails = self._tails
        return [prefix + tails[k] for k in keys.tolist()]


class _TailCache(dict):
    def __init__(self, encoder: BatchEncoder):
        super().__init__()
        self._encoder = encoder

    def __missing__(self, key: int) -> bytes:
        tenths = key & 0xFFFFF
        if tenths & 0x80000:
            tenths -= 0x100000
        tail = self[key] = self._encoder._tail(key >> 20, tenths)
        return tail
