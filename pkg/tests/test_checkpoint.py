from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffclone import checkpoint as C
from diffclone.errors import CorruptionError, FormatError

arrays = st.dictionaries(
    st.text("abcdefgh._", min_size=1, max_size=8),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False)),
    max_size=4,
)
configs = st.dictionaries(st.text("abcxyz_", min_size=1, max_size=6), st.text("abc 0123.-,", max_size=10), max_size=4)


@settings(max_examples=100, deadline=None)
@given(configs, arrays)
def test_round_trip(config, arrs):
    cfg, back = C.loads(C.dumps(config, arrs))
    assert cfg == config
    assert list(back) == list(arrs)
    for k, v in arrs.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_dumps_is_deterministic():
    a = {"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(3)}
    assert C.dumps({"kind": "x", "n": 3}, a) == C.dumps({"kind": "x", "n": 3}, a)


def test_file_round_trip(tmp_path):
    C.save(tmp_path / "c.dck", {"kind": "t"}, {"x": np.ones((2, 2))})
    cfg, arrs = C.load(tmp_path / "c.dck")
    assert cfg == {"kind": "t"} and np.array_equal(arrs["x"], np.ones((2, 2)))


def blob():
    return C.dumps({"kind": "t"}, {"x": np.arange(4.0)})


def test_bad_magic():
    with pytest.raises(FormatError):
        C.loads(b"NOPE" + blob()[4:])


@pytest.mark.parametrize("cut", [5, 11, 20, -1])
def test_truncation_is_detected(cut):
    with pytest.raises(CorruptionError):
        C.loads(blob()[:cut])


def test_flipped_byte_is_detected():
    b = bytearray(blob())
    b[30] ^= 0xFF
    with pytest.raises(CorruptionError):
        C.loads(bytes(b))


def reseal(payload: bytes) -> bytes:
    return C.MAGIC + payload + C._digest(payload)


def test_trailing_bytes_with_valid_checksum():
    payload = blob()[4:-8] + b"\x00"
    with pytest.raises(CorruptionError, match="trailing"):
        C.loads(reseal(payload))


def test_overlong_array_count_with_valid_checksum():
    b = blob()[4:-8]
    n_text = struct.unpack("<Q", b[:8])[0]
    at = 8 + n_text
    payload = b[:at] + struct.pack("<I", 2) + b[at + 4 :]
    with pytest.raises(CorruptionError, match="truncated"):
        C.loads(reseal(payload))


def test_config_line_without_equals():
    text = b"kind\n"
    payload = struct.pack("<Q", len(text)) + text + struct.pack("<I", 0)
    with pytest.raises(CorruptionError):
        C.loads(reseal(payload))


def test_config_values_cannot_hold_newlines():
    with pytest.raises(FormatError):
        C.dumps({"k": "a\nb"}, {})
    with pytest.raises(FormatError):
        C.dumps({"a=b": 1}, {})
