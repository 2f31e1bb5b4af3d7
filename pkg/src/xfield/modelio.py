"""Binary serialization of trained models and training checkpoints.

Layout: magic ``XFLD`` | version (u32 LE) | header length (u32 LE) |
canonical-JSON header (UTF-8) | one record per tensor named in the header's
``tensors`` list, in that order. Each record is name length (u32 LE), name
bytes, rank (u32 LE), extents (u32 LE each), then raw little-endian float32
data. Parsing a file and serializing the result is byte-identical.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .data import DimensionSpec, Manifest, ImageEntry
from .model import DecoderParams
from .autodiff import Tensor

MAGIC = b"XFLD"
VERSION = 1


class ModelFileError(ValueError):
    """Base class for model-file format violations."""


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class DuplicateTensorError(ModelFileError):
    pass


def _canonical_header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write header + tensors; the header's ``tensors`` list fixes the order."""
    names = sorted(tensors)
    if set(header.get("tensors", names)) != set(names):
        raise ModelFileError("header tensor list disagrees with provided tensors")
    header = dict(header)
    header["tensors"] = names
    blob = _canonical_header_bytes(header)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container; raises a distinct error per corruption mode."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError(f"bad magic; expected {MAGIC!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}, expected {VERSION}")
    header_len = struct.unpack("<I", take(4, "header length"))[0]
    try:
        header = json.loads(bytes(take(header_len, "header")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFileError(f"malformed header: {e}") from e

    expected = header.get("tensors")
    if not isinstance(expected, list):
        raise ModelFileError("header is missing the tensor list")
    tensors: dict[str, np.ndarray] = {}
    for _ in expected:
        name_len = struct.unpack("<I", take(4, "tensor name length"))[0]
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        if name in tensors:
            raise DuplicateTensorError(f"tensor {name!r} appears twice")
        rank = struct.unpack("<I", take(4, "tensor rank"))[0]
        shape = tuple(struct.unpack("<I", take(4, "tensor extent"))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = take(4 * count, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise ModelFileError(f"{len(view) - pos} trailing bytes after the last tensor")
    if set(tensors) != set(expected):
        raise ModelFileError("tensor records disagree with the header's tensor list")
    return header, tensors


# ---------------------------------------------------------------------------
# model / checkpoint round-trips
# ---------------------------------------------------------------------------

def _dims_to_json(dims: list[DimensionSpec]) -> list[dict]:
    return [d.to_json() for d in dims]


def _dims_from_json(raw: list[dict]) -> list[DimensionSpec]:
    return [DimensionSpec(d["name"], d["kind"], float(d["min"]), float(d["max"])) for d in raw]


def model_header(params: DecoderParams, manifest: Manifest, image_dir: str,
                 train_indices: list[int], train_config: dict | None = None) -> dict:
    return {
        "kind": "model",
        "dims": _dims_to_json(params.dims),
        "resolution": list(params.image_hw),
        "flow_resolution": list(params.flow_hw),
        "channel_schedule": list(params.channel_schedule),
        "jacobian_scale": params.jacobian_scale,
        "delight": params.delight,
        "parameter_count": params.parameter_count(),
        "dataset": {
            "name": manifest.name,
            "image_dir": os.path.abspath(image_dir),
            "images": [{"path": e.path, "coord": list(map(float, e.coord))} for e in manifest.images],
            "train_indices": list(train_indices),
        },
        "training": dict(train_config or {}),
    }


def export_model(params: DecoderParams, header: dict, path) -> None:
    write_container(path, header, {name: t.data for name, t in params.trainable()})


def params_from_container(header: dict, tensors: dict[str, np.ndarray],
                          name_filter=lambda n: not n.startswith("adam.")) -> DecoderParams:
    dims = _dims_from_json(header["dims"])
    wrapped = {name: Tensor(arr, requires_grad=True, name=name)
               for name, arr in tensors.items() if name_filter(name)}
    return DecoderParams(
        dims=dims,
        image_hw=tuple(header["resolution"]),
        flow_hw=tuple(header["flow_resolution"]),
        channel_schedule=list(header["channel_schedule"]),
        jacobian_scale=float(header["jacobian_scale"]),
        delight=bool(header["delight"]),
        tensors=wrapped,
    )


def import_model(path) -> tuple[DecoderParams, dict]:
    """Load a model file back into parameters + its full header."""
    header, tensors = read_container(path)
    if header.get("kind") not in ("model", "checkpoint"):
        raise ModelFileError(f"not a model container: kind={header.get('kind')!r}")
    return params_from_container(header, tensors), header


def export_checkpoint(params: DecoderParams, header: dict, adam_m: dict, adam_v: dict,
                      step: int, loss_history: list[float], path) -> None:
    header = dict(header)
    header["kind"] = "checkpoint"
    header["step"] = step
    header["loss_history"] = [float(v) for v in loss_history]
    tensors = {name: t.data for name, t in params.trainable()}
    for name, arr in adam_m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in adam_v.items():
        tensors[f"adam.v.{name}"] = arr
    write_container(path, header, tensors)


def import_checkpoint(path) -> tuple[DecoderParams, dict, dict, dict, int, list[float]]:
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ModelFileError(f"not a checkpoint container: kind={header.get('kind')!r}")
    params = params_from_container(header, tensors)
    adam_m = {n[len("adam.m."):]: a.astype(np.float32) for n, a in tensors.items() if n.startswith("adam.m.")}
    adam_v = {n[len("adam.v."):]: a.astype(np.float32) for n, a in tensors.items() if n.startswith("adam.v.")}
    return params, header, adam_m, adam_v, int(header["step"]), list(header["loss_history"])
