import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest

from slsdeep.checkpoint import (
    Checkpoint, CheckpointError, FORMAT_VERSION, decode_tensors, encode_tensors, load_checkpoint, save_checkpoint,
)
from slsdeep.network import build, desk_config
from slsdeep.tensor import ShapeError
from slsdeep.trainer import model_from_checkpoint


def _checkpoint(seed=0):
    model = build(desk_config(), init_seed=seed)
    m = OrderedDict((k, np.full_like(t.data, 0.25)) for k, t in model.params.items())
    v = OrderedDict((k, np.full_like(t.data, 0.5)) for k, t in model.params.items())
    return model, Checkpoint(model.config.to_dict(), model.state_dict(), m, v, adam_t=7, step=7, epoch=3,
                             meta={"dropout_seed": seed})


def test_layout_header_and_trailer():
    blob = encode_tensors(OrderedDict(a=np.arange(6, dtype=np.float32).reshape(2, 3)))
    assert blob[:4] == b"SLSD"
    version, count = struct.unpack_from("<IQ", blob, 4)
    assert (version, count) == (FORMAT_VERSION, 1)
    (nlen,) = struct.unpack_from("<H", blob, 16)
    assert blob[18:18 + nlen] == b"a"
    tag, rank = struct.unpack_from("<BB", blob, 18 + nlen)
    assert (tag, rank) == (0, 2)
    assert struct.unpack_from("<2Q", blob, 20 + nlen) == (2, 3)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    assert len(blob) == 20 + nlen + 16 + 24 + 4


def test_round_trip_bit_exact(tmp_path):
    model, ckpt = _checkpoint()
    path = save_checkpoint(tmp_path / "c.ckpt", ckpt)
    back = load_checkpoint(path)
    for k, arr in ckpt.model_state.items():
        assert back.model_state[k].dtype == arr.dtype and back.model_state[k].tobytes() == arr.tobytes()
    assert back.adam_t == 7 and back.step == 7 and back.epoch == 3 and back.meta == {"dropout_seed": 0}
    again = save_checkpoint(tmp_path / "d.ckpt", back)
    assert again.read_bytes() == path.read_bytes()
    restored = model_from_checkpoint(back)
    for k, arr in model.state_dict().items():
        assert restored.state_dict()[k].tobytes() == arr.tobytes()


def test_all_dtypes_round_trip():
    tensors = OrderedDict(f32=np.float32([1.5]), u8=np.uint8([[1, 2]]), f64=np.float64([np.pi]),
                          i64=np.int64([-3, 2 ** 40]), scalar=np.float32(2.0).reshape(()))
    back = decode_tensors(encode_tensors(tensors))
    for k, arr in tensors.items():
        assert back[k].dtype == arr.dtype and back[k].shape == arr.shape and np.array_equal(back[k], arr)
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        encode_tensors(OrderedDict(c=np.complex64([1j])))


def test_corruption_detected(tmp_path):
    _, ckpt = _checkpoint()
    path = save_checkpoint(tmp_path / "c.ckpt", ckpt)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncation_and_magic():
    blob = encode_tensors(OrderedDict(a=np.zeros(10, dtype=np.float32)))
    for cut in (3, 19, len(blob) - 1):
        with pytest.raises(CheckpointError):
            decode_tensors(blob[:cut])
    with pytest.raises(CheckpointError, match="magic"):
        decode_tensors(b"XXXX" + blob[4:])


def test_version_mismatch():
    body = bytearray(encode_tensors(OrderedDict(a=np.zeros(1, dtype=np.float32)))[:-4])
    struct.pack_into("<I", body, 4, FORMAT_VERSION + 1)
    blob = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(CheckpointError, match="version"):
        decode_tensors(blob)


def test_mismatched_network_names_first_tensor(tmp_path):
    _, ckpt = _checkpoint()
    with pytest.raises(ShapeError, match=r"encoder\.stem\.conv\.weight.*\(4, 3, 3, 3\)"):
        model_from_checkpoint(ckpt, desk_config(width_scale=1 / 8))
    with pytest.raises(ShapeError, match="decoder.skip"):
        model_from_checkpoint(ckpt, desk_config(skip_mode="all"))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    _, ckpt = _checkpoint()
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.ckpt"]
