"""Model container format: round-trips and corruption errors."""

import numpy as np
import pytest

from xfield import modelio
from xfield.data import DimensionSpec, Manifest, ImageEntry
from xfield.model import init_decoder_params
from xfield.modelio import (BadMagicError, DuplicateTensorError, ModelFileError,
                            TruncatedFileError, UnsupportedVersionError,
                            export_model, import_model, model_header,
                            read_container, write_container)

TIME_DIM = [DimensionSpec("t", "time", 0.0, 1.0)]


def tiny_params(delight=False):
    return init_decoder_params(TIME_DIM, (8, 8), seed=1, delight=delight,
                               observation_indices=[0, 1] if delight else None)


def tiny_manifest():
    return Manifest("pair", TIME_DIM,
                    [ImageEntry("a.png", [0.0]), ImageEntry("b.png", [1.0])])


class TestContainer:
    def test_roundtrip_tensors_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"alpha": rng.normal(size=(3, 4)).astype(np.float32),
                   "beta": rng.normal(size=(2, 2, 2)).astype(np.float32),
                   "gamma": rng.normal(size=7).astype(np.float32)}
        path = tmp_path / "t.xf"
        write_container(path, {"kind": "model"}, tensors)
        header, loaded = read_container(path)
        assert header["tensors"] == ["alpha", "beta", "gamma"]
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_parse_then_serialize_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"w": rng.normal(size=(5, 5)).astype(np.float32)}
        p1, p2 = tmp_path / "a.xf", tmp_path / "b.xf"
        write_container(p1, {"kind": "model", "extra": {"z": 1, "a": [1, 2]}}, tensors)
        header, loaded = read_container(p1)
        write_container(p2, header, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.xf"
        write_container(path, {}, {"x": np.zeros(1, dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_container(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v2.xf"
        write_container(path, {}, {"x": np.zeros(1, dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[4:8] = (modelio.VERSION + 1).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersionError):
            read_container(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.xf"
        write_container(path, {}, {"x": np.arange(64, dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(TruncatedFileError):
            read_container(path)

    def test_duplicate_tensor_name(self, tmp_path):
        # hand-craft a stream whose header lists one name twice
        import io
        import json
        import struct

        header = json.dumps({"tensors": ["x", "x"]}, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(modelio.MAGIC)
        buf.write(struct.pack("<I", modelio.VERSION))
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for _ in range(2):
            buf.write(struct.pack("<I", 1) + b"x" + struct.pack("<I", 1) + struct.pack("<I", 1))
            buf.write(np.zeros(1, dtype="<f4").tobytes())
        path = tmp_path / "dup.xf"
        path.write_bytes(buf.getvalue())
        with pytest.raises(DuplicateTensorError):
            read_container(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.xf"
        write_container(path, {}, {"x": np.zeros(2, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(ModelFileError):
            read_container(path)


class TestModelRoundtrip:
    def test_export_import_all_tensors_bitwise(self, tmp_path):
        params = tiny_params(delight=True)
        rng = np.random.default_rng(2)
        for _, tensor in params.trainable():
            tensor.data[:] = rng.normal(size=tensor.data.shape).astype(np.float32)
        header = model_header(params, tiny_manifest(), tmp_path, [0, 1], {"seed": 1})
        path = tmp_path / "model.xf"
        export_model(params, header, path)
        loaded, loaded_header = import_model(path)
        assert loaded.delight and loaded.image_hw == (8, 8)
        assert loaded_header["dataset"]["train_indices"] == [0, 1]
        for (name, original), (name2, restored) in zip(params.trainable(), loaded.trainable()):
            assert name == name2
            np.testing.assert_array_equal(original.data, restored.data)

    def test_import_rejects_non_model(self, tmp_path):
        path = tmp_path / "x.xf"
        write_container(path, {"kind": "mystery"}, {"x": np.zeros(1, dtype=np.float32)})
        with pytest.raises(ModelFileError):
            import_model(path)

    def test_checkpoint_roundtrip(self, tmp_path):
        params = tiny_params()
        header = model_header(params, tiny_manifest(), tmp_path, [0, 1])
        m = {n: np.full_like(t.data, 0.25) for n, t in params.trainable()}
        v = {n: np.full_like(t.data, 0.5) for n, t in params.trainable()}
        path = tmp_path / "c.ckpt"
        modelio.export_checkpoint(params, header, m, v, step=42, loss_history=[0.5, 0.25], path=path)
        p2, h2, m2, v2, step, losses = modelio.import_checkpoint(path)
        assert step == 42 and losses == [0.5, 0.25]
        assert set(m2) == {n for n, _ in params.trainable()}
        np.testing.assert_array_equal(m2["fc.w"], m["fc.w"])
        np.testing.assert_array_equal(v2["fc.b"], v["fc.b"])
