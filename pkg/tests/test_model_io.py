import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_spec
from learnet import model_io as M
from learnet.networks import ARCHITECTURES, COMPARISONS, ParamSet, default_ocr_spec
from learnet.training import init_params


@settings(max_examples=15)
@given(arch=st.sampled_from(ARCHITECTURES), cmp=st.sampled_from(COMPARISONS),
       precision=st.sampled_from(["float32", "float64"]), seed=st.integers(0, 100))
def test_round_trip_is_exact(arch, cmp, precision, seed):
    spec = tiny_spec(arch, cmp, precision, batchnorm=True)
    params = init_params(spec, np.random.default_rng(seed))
    spec2, params2 = M.loads(M.dumps(spec, params))
    assert spec2 == spec
    assert params2.bitwise_equal(params)
    assert M.dumps(spec2, params2) == M.dumps(spec, params)


def test_header_layout():
    spec = tiny_spec("shared")
    data = M.dumps(spec, ParamSet({"a": np.zeros((2, 3), np.float32)}))
    assert data[:4] == b"LRNT"
    version, n = struct.unpack("<II", data[4:12])
    assert version == 1 and data[12:12 + n].decode() == M.spec_text(spec)
    assert data.endswith(bytes(24))


def test_save_is_atomic_and_load_works(tmp_path):
    spec = default_ocr_spec(precision="float64")
    params = init_params(spec, np.random.default_rng(0))
    path = tmp_path / "m.lrnt"
    M.save(spec, params, path)
    spec2, params2 = M.load(path)
    assert spec2 == spec and params2.bitwise_equal(params)
    assert [p.name for p in tmp_path.iterdir()] == ["m.lrnt"]


def tensor_record(name, code, dims, payload):
    nb = name.encode()
    return struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, len(dims)) + \
        struct.pack(f"<{len(dims)}I", *dims) + payload


def header(count):
    text = M.spec_text(tiny_spec("shared")).encode()
    return b"LRNT" + struct.pack("<II", 1, len(text)) + text + struct.pack("<I", count)


@pytest.mark.parametrize("blob, error, match", [
    (b"XXXX", M.BadMagic, "magic"),
    (b"LRNT" + struct.pack("<I", 2), M.UnsupportedVersion, "version 2"),
    (header(1) + tensor_record("w", 1, (2,), bytes(4)), M.Truncated, "'w'"),
    (header(2) + tensor_record("w", 1, (1,), bytes(4)) * 2, M.DuplicateName, "'w'"),
    (header(1) + tensor_record("w", 1, (0, 2), b""), M.BadDimension, "zero"),
    (header(1) + tensor_record("w", 7, (1,), bytes(4)), M.BadDtype, "code 7"),
    (header(1) + tensor_record("w", 1, (1,) * 9, bytes(4)), M.BadDimension, "rank"),
    (header(0) + b"\x00", M.ModelFormatError, "trailing"),
])
def test_malformed_files(blob, error, match):
    with pytest.raises(error, match=match):
        M.loads(blob)


def test_rejects_unsupported_dtype():
    with pytest.raises(M.BadDtype):
        M.dumps(tiny_spec("shared"), {"a": np.zeros(2, np.int32)})


def test_tensor_order_is_preserved():
    params = ParamSet({"z": np.zeros(1), "a": np.ones(1)})
    _, back = M.loads(M.dumps(tiny_spec("shared"), params))
    assert list(back) == ["z", "a"]
