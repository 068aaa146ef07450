import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strombench.events import (
    MIN_EVENT_SIZE,
    BatchEncoder,
    EncodedRecord,
    EncodingError,
    MissingField,
    ParseError,
    SensorEvent,
    SizeTooSmall,
    compact_size,
    deserialize_event,
    minimum_size,
    peek_timestamp,
    peek_timestamps,
    serialize_event,
    worst_case_size,
)

TS = 1_700_000_000_123

events = st.builds(
    SensorEvent,
    created_at=st.integers(0, 10**13 - 1),
    sensor_id=st.integers(0, 10**6),
    temperature_c=st.integers(-999, 999).map(lambda t: t / 10),
)


def test_minimum_event_is_27_bytes():
    e = SensorEvent(TS, 0, 0.0)
    # 13-digit ts, one-digit id, "0.0", frame of 7 bytes: 13 + 1 + 3 + 7 + pad 3
    assert compact_size(e) == 24
    assert minimum_size(e) == MIN_EVENT_SIZE
    assert serialize_event(e, 27).data == b'[1700000000123,0,0.0,"xxx"]'


@pytest.mark.parametrize("size", [27, 64, 128, 1024])
def test_exact_sizes(size):
    e = SensorEvent(TS, 42, 23.5)
    r = serialize_event(e, size)
    assert r.size == size
    assert deserialize_event(r) == e


def test_size_below_minimum_rejected():
    with pytest.raises(SizeTooSmall) as err:
        serialize_event(SensorEvent(TS, 1, 1.0), 20)
    assert err.value.minimum == MIN_EVENT_SIZE


def test_size_too_small_for_wide_event():
    e = SensorEvent(TS, 123456, -45.5)
    assert compact_size(e) == 13 + 6 + 5 + 7
    with pytest.raises(SizeTooSmall) as err:
        serialize_event(e, 27)
    assert err.value.minimum == 31
    assert serialize_event(e, 31).size == 31


def test_non_finite_temperature():
    with pytest.raises(EncodingError):
        serialize_event(SensorEvent(TS, 1, float("nan")), 64)


@settings(max_examples=300, deadline=None)
@given(events, st.integers(0, 200))
def test_roundtrip_and_exact_size(e, extra):
    size = max(MIN_EVENT_SIZE, compact_size(e)) + extra
    r = serialize_event(e, size)
    assert len(r.data) == size
    assert deserialize_event(r) == e
    assert peek_timestamp(r.data) == e.created_at


def test_deserialize_errors():
    with pytest.raises(ParseError) as err:
        deserialize_event(b'[1,2,')
    assert err.value.offset == 5
    with pytest.raises(MissingField) as err:
        deserialize_event(b"[1,2]")
    assert err.value.field == "t"
    with pytest.raises(MissingField) as err:
        deserialize_event(b"[]")
    assert err.value.field == "ts"
    with pytest.raises(ParseError):
        deserialize_event(b'{"ts":1}')
    with pytest.raises(ParseError):
        deserialize_event(b'[1,2,"hot","x"]')


def test_worst_case_size_matches_brute_force():
    for n, lo, hi in [(1, 0.0, 100.0), (100, -40.0, 60.0), (1000, -100.5, 5.0)]:
        brute = max(
            compact_size(SensorEvent(TS, sid, t / 10))
            for sid in (0, n - 1)
            for t in range(round(lo * 10), round(hi * 10) + 1)
        )
        assert worst_case_size(n, lo, hi) == brute


@settings(max_examples=100, deadline=None)
@given(
    st.integers(10**12, 10**13 - 1),
    st.lists(st.tuples(st.integers(0, 999), st.integers(-999, 999)), min_size=1, max_size=50),
    st.sampled_from([28, 40, 128]),
)
def test_batch_encoder_matches_reference(ts, pairs, size):
    ids = [p[0] for p in pairs]
    tenths = [p[1] for p in pairs]
    enc = BatchEncoder(size)
    got = enc.encode(ts, np.array(ids), np.array(tenths))
    want = [serialize_event(SensorEvent(ts, i, t / 10), size).data for i, t in zip(ids, tenths)]
    assert got == want
    # A shorter timestamp changes the prefix width; tails must be rebuilt.
    assert enc.encode(ts // 10, ids, tenths) == [
        serialize_event(SensorEvent(ts // 10, i, t / 10), size).data for i, t in zip(ids, tenths)
    ]


def test_peek_timestamps_vectorised_and_mixed():
    recs = [serialize_event(SensorEvent(TS + i, i % 7, 20.0), 40).data for i in range(100)]
    assert peek_timestamps(recs).tolist() == [float(TS + i) for i in range(100)]
    mixed = recs[:3] + [b"[5,1,2,3.00,true]"]
    assert peek_timestamps(mixed).tolist() == [TS, TS + 1, TS + 2, 5]
    assert peek_timestamps([]).size == 0


def test_encoded_record_is_json():
    r = serialize_event(SensorEvent(TS, 3, -1.5), 50)
    assert isinstance(r, EncodedRecord)
    assert json.loads(r.data)[:3] == [TS, 3, -1.5]
