import struct

import numpy as np
import pytest

from errors import DataError
from tensor_io import MAGIC, load_checkpoint, load_tensor, save_checkpoint, save_tensor


def test_tensor_file_header_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / 'x.isof'
    save_tensor(path, x)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, code, rank = struct.unpack('<HBB', raw[4:8])
    assert (version, code, rank) == (1, 1, 2)
    assert struct.unpack('<2q', raw[8:24]) == (2, 3)
    assert len(raw) == 24 + 6 * 4


def test_tensor_roundtrip_preserves_dtype_and_values(tmp_path, rng):
    x = rng.standard_normal((2, 3, 4))
    save_tensor(tmp_path / 'x.isof', x)
    y = load_tensor(tmp_path / 'x.isof')
    assert y.dtype == np.float64
    np.testing.assert_array_equal(x, y)


def test_rejects_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / 'bad.isof'
    bad.write_bytes(b'NOPE' + b'\x00' * 20)
    with pytest.raises(DataError):
        load_tensor(bad)
    save_tensor(tmp_path / 'ok.isof', np.zeros((4, 4)))
    truncated = tmp_path / 'trunc.isof'
    truncated.write_bytes((tmp_path / 'ok.isof').read_bytes()[:-8])
    with pytest.raises(DataError):
        load_tensor(truncated)
    with pytest.raises(DataError):
        load_tensor(tmp_path / 'missing.isof')


def test_unsupported_dtype(tmp_path):
    with pytest.raises(DataError):
        save_tensor(tmp_path / 'i.isof', np.zeros(3, dtype=np.int32))


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {'a.weight': rng.standard_normal((3, 2)), 'b': np.ones(4, dtype=np.float32)}
    save_checkpoint(tmp_path / 'c.ckpt', {'kind': 'test', 'seed': 7}, tensors)
    manifest, loaded = load_checkpoint(tmp_path / 'c.ckpt')
    assert manifest['kind'] == 'test' and manifest['seed'] == 7
    assert [e['name'] for e in manifest['entries']] == ['a.weight', 'b']
    for name, value in tensors.items():
        np.testing.assert_array_equal(loaded[name], value)
        assert loaded[name].dtype == value.dtype


def test_checkpoint_is_byte_stable(tmp_path):
    tensors = {'w': np.linspace(0, 1, 5)}
    save_checkpoint(tmp_path / 'a.ckpt', {'x': 1}, tensors)
    save_checkpoint(tmp_path / 'b.ckpt', {'x': 1}, tensors)
    assert (tmp_path / 'a.ckpt').read_bytes() == (tmp_path / 'b.ckpt').read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / 'x.ckpt').write_bytes(b'not a checkpoint at all')
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / 'x.ckpt')
