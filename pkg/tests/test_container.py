import numpy as np
import pytest

from mdm.container import ContainerFormatError, read_tensors, write_tensors


def _sample_tensors():
    rng = np.random.default_rng(17)
    return {
        "weights/w": rng.normal(size=(3, 5)).astype(np.float32),
        "weights/b": rng.normal(size=(5,)).astype(np.float64),
        "scalar": np.float64(3.125).reshape(()),
        "empty": np.zeros((0, 4), dtype=np.float32),
    }


def test_roundtrip_is_byte_exact(tmp_path):
    path = tmp_path / "t.mdmt"
    tensors = _sample_tensors()
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert list(back.keys()) == list(tensors.keys())
    for name, arr in tensors.items():
        got = back[name]
        assert got.dtype == arr.dtype
        assert got.shape == np.asarray(arr).shape
        assert got.tobytes() == np.asarray(arr).tobytes()


def test_double_roundtrip_identical_files(tmp_path):
    p1, p2 = tmp_path / "a.mdmt", tmp_path / "b.mdmt"
    write_tensors(p1, _sample_tensors())
    write_tensors(p2, read_tensors(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupted_magic_rejected(tmp_path):
    path = tmp_path / "t.mdmt"
    write_tensors(path, _sample_tensors())
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError, match="magic"):
        read_tensors(path)


def test_truncated_payload_reports_byte_counts(tmp_path):
    path = tmp_path / "t.mdmt"
    write_tensors(path, {"x": np.ones((4, 4), dtype=np.float64)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ContainerFormatError, match="truncated"):
        read_tensors(path)


def test_unknown_precision_code_rejected(tmp_path):
    path = tmp_path / "t.mdmt"
    write_tensors(path, {"x": np.ones(2, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    # precision byte sits after magic(4) + version(4) + count(4) + name_len(4) + name(1)
    data[17] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError, match="precision code 9"):
        read_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.mdmt"
    write_tensors(path, {"x": np.ones(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(ContainerFormatError, match="trailing"):
        read_tensors(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerFormatError, match="int64"):
        write_tensors(tmp_path / "t.mdmt", {"x": np.ones(2, dtype=np.int64)})
