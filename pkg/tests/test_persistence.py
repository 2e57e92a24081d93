import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpness_lab.errors import FormatError
from sharpness_lab.models import Conv, Dense, ModelSpec, build_model
from sharpness_lab.persistence import (
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    format_value,
    load_checkpoint,
    parse_value,
    read_csv,
    save_checkpoint,
    write_csv,
)

SPEC = ModelSpec((1, 5, 5), (Conv(2, 2), Dense(4), Dense(3)))


def make_ckpt(seed=0):
    return Checkpoint(SPEC, build_model(SPEC, seed), {"seed": seed, "final": {"train_loss": 0.25}})


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    ckpt = make_ckpt(3)
    path = save_checkpoint(tmp_path / "a" / "model.ckpt", ckpt)
    back = load_checkpoint(path)
    assert back.params.values.tobytes() == ckpt.params.values.tobytes()
    assert back.spec == SPEC
    assert back.metadata == ckpt.metadata
    assert back.params.layout.same_structure(ckpt.params.layout)


def test_checkpoint_layout_on_disk():
    raw = encode_checkpoint(make_ckpt())
    assert raw[:8] == MAGIC
    assert raw[8] == 1
    (n_spec,) = struct.unpack("<I", raw[9:13])
    assert raw[13 : 13 + n_spec].decode() == SPEC.to_text()
    k = make_ckpt().params.layout.k
    assert struct.unpack("<Q", raw[-8 * k - 8 : -8 * k])[0] == k
    np.testing.assert_array_equal(np.frombuffer(raw[-8 * k :], "<f8"), make_ckpt().params.values)


def test_bad_magic():
    raw = b"NOTACKPT" + encode_checkpoint(make_ckpt())[8:]
    with pytest.raises(FormatError) as err:
        decode_checkpoint(raw)
    assert err.value.offset == 0


def test_bad_version():
    raw = bytearray(encode_checkpoint(make_ckpt()))
    raw[8] = 9
    with pytest.raises(FormatError) as err:
        decode_checkpoint(bytes(raw))
    assert err.value.offset == 8


@pytest.mark.parametrize("cut", [3, 9, 15, 40, -1])
def test_truncation_reports_offset(cut):
    raw = encode_checkpoint(make_ckpt())
    with pytest.raises(FormatError) as err:
        decode_checkpoint(raw[:cut])
    assert err.value.offset is not None
    assert "offset" in str(err.value)


def test_trailing_bytes():
    raw = encode_checkpoint(make_ckpt()) + b"\x00"
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(raw)


def test_count_mismatch():
    ckpt = make_ckpt()
    raw = bytearray(encode_checkpoint(ckpt))
    at = len(raw) - 8 * ckpt.params.layout.k - 8
    raw[at : at + 8] = struct.pack("<Q", 5)
    with pytest.raises(FormatError) as err:
        decode_checkpoint(bytes(raw))
    assert err.value.offset == at


def test_corrupt_spec_text():
    raw = bytearray(encode_checkpoint(make_ckpt()))
    raw[13:15] = b"zz"
    with pytest.raises(FormatError) as err:
        decode_checkpoint(bytes(raw))
    assert err.value.offset == 13


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(-0.0) == "-0.0"
    assert format_value(3.0) == "3.0"
    assert format_value(True) == "1"
    assert format_value(None) == ""
    assert format_value(np.int64(4)) == "4"
    assert format_value("asam") == "asam"


def test_parse_value():
    assert parse_value("12") == 12 and isinstance(parse_value("12"), int)
    assert parse_value("1e-3") == 1e-3
    assert parse_value("nan") != parse_value("nan")
    assert parse_value("") is None
    assert parse_value("elementwise-p2-rho0.5") == "elementwise-p2-rho0.5"


csv_floats = st.floats(allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(csv_floats, st.integers(-(2**40), 2**40), csv_floats), min_size=1, max_size=10))
def test_csv_round_trip_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "rows.csv"
    records = [{"a": a, "n": n, "b": b, "tag": "x"} for a, n, b in rows]
    write_csv(path, records)
    back = read_csv(path)
    assert len(back) == len(records)
    for got, want in zip(back, records):
        assert got["n"] == want["n"] and got["tag"] == "x"
        for key in ("a", "b"):
            assert isinstance(got[key], float)
            assert got[key] == want[key]
            assert math.copysign(1.0, got[key]) == math.copysign(1.0, want[key])


def test_csv_round_trip_specials(tmp_path):
    rows = [{"x": math.inf}, {"x": -math.inf}, {"x": 5e-324}, {"x": 1.7976931348623157e308}]
    write_csv(tmp_path / "s.csv", rows)
    assert [r["x"] for r in read_csv(tmp_path / "s.csv")] == [r["x"] for r in rows]


def test_csv_append_checks_header(tmp_path):
    path = tmp_path / "m.csv"
    write_csv(path, [{"a": 1, "b": 2.5}])
    write_csv(path, [{"a": 3, "b": 4.5}], ["a", "b"], append=True)
    assert read_csv(path) == [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.5}]
    with pytest.raises(FormatError):
        write_csv(path, [{"c": 1}], ["c"], append=True)
