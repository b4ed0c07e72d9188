import struct
from dataclasses import replace

import numpy as np
import pytest

from src.checkpoint import MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from src.errors import CheckpointFormatError
from src.model import init_params
from src.run_config import TrainConfig
from src.tensor import AdamState, adam_step, precision


@pytest.fixture
def ckpt():
    config = TrainConfig(channels=4, height=16, width=16, epochs=2)
    params = init_params(seed=1, channels=4)
    adam = AdamState()
    named = params.named_parameters()
    rng = np.random.default_rng(0)
    adam_step(named, {k: rng.normal(size=t.shape).astype(t.dtype) for k, t in named.items()}, adam, lr=1e-3)
    return Checkpoint(config, params, adam, epoch=1, step=5, cursor=2)


class TestRoundtrip:
    def test_values_survive(self, ckpt, tmp_path):
        path = str(tmp_path / "a.fnck")
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.config == ckpt.config
        assert (back.epoch, back.step, back.cursor, back.adam.step) == (1, 5, 2, 1)
        for name, t in ckpt.params.named_parameters().items():
            np.testing.assert_array_equal(back.params.named_parameters()[name].data, t.data)
            np.testing.assert_array_equal(back.adam.m[name], ckpt.adam.m[name])
            np.testing.assert_array_equal(back.adam.v[name], ckpt.adam.v[name])
        assert back.rng_state == (42, 1, 2)

    def test_save_load_save_is_byte_identical(self, ckpt, tmp_path):
        first, second = str(tmp_path / "1.fnck"), str(tmp_path / "2.fnck")
        save_checkpoint(ckpt, first)
        save_checkpoint(load_checkpoint(first), second)
        with open(first, "rb") as a, open(second, "rb") as b:
            assert a.read() == b.read()

    def test_run_location_not_stored(self, ckpt):
        moved = Checkpoint(replace(ckpt.config, out_dir="elsewhere"), ckpt.params, ckpt.adam, 1, 5, 2)
        assert encode_checkpoint(moved) == encode_checkpoint(ckpt)

    def test_64_bit_parameters(self):
        with precision(64):
            params = init_params(seed=2, channels=2)
        data = encode_checkpoint(Checkpoint(TrainConfig(channels=2), params))
        back = decode_checkpoint(data)
        weight = back.params.named_parameters()["alpha_head.conv1.weight"]
        assert weight.dtype == np.float64
        np.testing.assert_array_equal(weight.data, params.alpha_head.conv1.weight.data)

    def test_loaded_parameters_are_trainable(self, ckpt):
        back = decode_checkpoint(encode_checkpoint(ckpt))
        assert all(t.requires_grad for t in back.params.named_parameters().values())


class TestCorruption:
    def test_header(self, ckpt):
        data = encode_checkpoint(ckpt)
        assert data[:4] == MAGIC
        assert struct.unpack("<I", data[4:8]) == (1,)

    def test_truncated(self, ckpt):
        data = encode_checkpoint(ckpt)
        for cut in (2, 10, len(data) // 2, len(data) - 1):
            with pytest.raises(CheckpointFormatError, match="byte offset"):
                decode_checkpoint(data[:cut])

    def test_bad_magic(self, ckpt):
        data = b"XXXX" + encode_checkpoint(ckpt)[4:]
        with pytest.raises(CheckpointFormatError, match="magic"):
            decode_checkpoint(data)

    def test_unknown_version(self, ckpt):
        data = bytearray(encode_checkpoint(ckpt))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(CheckpointFormatError, match="version 7"):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("extents", [(2**32, 2**32), (2**20, 2**20)])
    def test_oversized_extents(self, ckpt, extents):
        data = bytearray(encode_checkpoint(ckpt))
        (config_len,) = struct.unpack_from("<I", data, 8)
        first = 8 + 4 + config_len + 32 + 4
        (name_len,) = struct.unpack_from("<H", data, first)
        name = bytes(data[first + 2 : first + 2 + name_len]).decode()
        extents_at = first + 2 + name_len + 1
        struct.pack_into("<QQ", data, extents_at, *extents)
        with pytest.raises(CheckpointFormatError, match=rf"{name}: extents .* byte offset"):
            decode_checkpoint(bytes(data))

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            decode_checkpoint(encode_checkpoint(ckpt) + b"\0")

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(CheckpointFormatError, match="cannot read"):
            load_checkpoint(str(tmp_path / "missing.fnck"))

    def test_message_names_source(self, tmp_path):
        path = tmp_path / "junk.fnck"
        path.write_bytes(b"FN")
        with pytest.raises(CheckpointFormatError, match="junk.fnck"):
            load_checkpoint(str(path))
