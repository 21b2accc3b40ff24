import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aschpuf.cell import Environment
from aschpuf.maps import (
    HEADER_SIZE,
    MalformedMap,
    MapSource,
    StabilizationMap,
    encoded_size,
    from_q16,
    pack_bits_lsb,
    to_q16,
    unpack_bits_lsb,
)


@st.composite
def maps(draw):
    rows = draw(st.integers(1, 12))
    cols = draw(st.integers(1, 12))
    n = rows * cols
    heal = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n))).reshape(rows, cols)
    mask = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n))).reshape(rows, cols)
    skew = draw(st.integers(-2**31, 2**31 - 1)) / 1000.0
    env = Environment(draw(st.sampled_from([0.7, 1.2, 1.4])), draw(st.sampled_from([-45.0, 25.0, 125.0])))
    return StabilizationMap(heal, mask, skew, draw(st.sampled_from(list(MapSource))), env)


def test_header_size():
    assert HEADER_SIZE == 29
    assert encoded_size(32, 128) == 29 + 2 * 512


def test_empty_4096_map_size():
    assert len(StabilizationMap.empty(32, 128).to_bytes()) == 29 + 1024


def test_heal_cleared_on_masked_cells():
    m = StabilizationMap(np.array([[1, 1]], bool), np.array([[0, 1]], bool), 5.0, MapSource.STATIC, Environment())
    assert m.heal.tolist() == [[True, False]]
    assert not np.any(m.heal & m.mask)


def test_ratios():
    mask = np.zeros((4, 4), bool)
    mask[0] = True
    heal = np.zeros((4, 4), bool)
    heal[1, :2] = True
    m = StabilizationMap(heal, mask, 1.0, MapSource.STATIC, Environment())
    assert m.masking_ratio == 0.25 and m.healing_ratio == 0.125 and m.n_usable == 12


def test_bit_order_is_lsb_first():
    bits = np.zeros(10, bool)
    bits[0] = bits[9] = True
    assert pack_bits_lsb(bits) == bytes([0x01, 0x02])
    assert unpack_bits_lsb(bytes([0x01, 0x02]), 10).tolist() == bits.tolist()


def test_fixed_point():
    assert to_q16(1.2) == round(1.2 * 65536)
    assert from_q16(to_q16(-45.0)) == -45.0


def test_known_encoding():
    heal = np.array([[0, 0, 0, 1, 0]], bool)
    mask = np.array([[0, 0, 1, 0, 0]], bool)
    data = StabilizationMap(heal, mask, 6.0, MapSource.DYNAMIC, Environment(0.7, 125.0)).to_bytes()
    assert data == (b"ASCHMAP1" + struct.pack("<IIiBii", 1, 5, 6000, 1, round(0.7 * 65536), 125 * 65536)
                    + bytes([0b01000, 0b00100]))


@given(maps())
def test_round_trip(m):
    data = m.to_bytes()
    back = StabilizationMap.from_bytes(data)
    assert back == m and back.to_bytes() == data
    assert np.array_equal(back.heal, m.heal) and np.array_equal(back.mask, m.mask)


@given(maps(), st.data())
def test_truncation_rejected(m, data):
    raw = m.to_bytes()
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(MalformedMap):
        StabilizationMap.from_bytes(raw[:cut])


def test_overlap_rejected():
    raw = bytearray(StabilizationMap.empty(1, 8).to_bytes())
    raw[HEADER_SIZE] = 1
    raw[HEADER_SIZE + 1] = 1
    with pytest.raises(MalformedMap):
        StabilizationMap.from_bytes(bytes(raw))


def test_padding_rejected():
    raw = bytearray(StabilizationMap.empty(1, 5).to_bytes())
    raw[HEADER_SIZE] = 0x80
    with pytest.raises(MalformedMap):
        StabilizationMap.from_bytes(bytes(raw))


@pytest.mark.parametrize("patch", [(0, b"X"), (20, b"\x07"), (25, struct.pack("<i", 400 * 65536))])
def test_bad_header_fields(patch):
    offset, value = patch
    raw = bytearray(StabilizationMap.empty(2, 4).to_bytes())
    raw[offset:offset + len(value)] = value
    with pytest.raises(MalformedMap):
        StabilizationMap.from_bytes(bytes(raw))


def test_shape_mismatch():
    with pytest.raises(MalformedMap):
        StabilizationMap(np.zeros((2, 2), bool), np.zeros((2, 3), bool), 0.0, MapSource.STATIC, Environment())
