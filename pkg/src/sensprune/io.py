"""On-disk formats: model bundles (``model.json`` + ``weights.bin``) and SIPT tensor files."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .net import LayerSpec, Network, as_tensor

PathLike = Union[str, Path]

MANIFEST = "model.json"
WEIGHTS = "weights.bin"
TENSOR_MAGIC = b"SIPT"
TENSOR_VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Raised for malformed model bundles or tensor files."""


def _layer_entry(layer: LayerSpec) -> dict:
    if layer.kind == "dense":
        out_f, in_f = layer.weights.shape
        return {"kind": "dense", "out_features": out_f, "in_features": in_f}
    out_c, in_c, kh, kw = layer.weights.shape
    return {"kind": "conv2d", "out_channels": out_c, "in_channels": in_c,
            "kernel_h": kh, "kernel_w": kw, "stride": layer.stride, "padding": layer.padding}


def save_model(net: Network, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = []
    offset = 0
    entries = []
    for layer in net.layers:
        entry = _layer_entry(layer)
        entry["activation"] = layer.activation
        w = np.ascontiguousarray(layer.weights, dtype=_F64).tobytes()
        entry["weight_offset"] = offset
        entry["weight_count"] = layer.weights.size
        chunks.append(w)
        offset += len(w)
        if layer.bias is not None:
            b = np.ascontiguousarray(layer.bias, dtype=_F64).tobytes()
            entry["bias_offset"] = offset
            entry["bias_count"] = layer.bias.size
            chunks.append(b)
            offset += len(b)
        else:
            entry["bias_offset"] = None
            entry["bias_count"] = 0
        entry["nnz"] = int(np.count_nonzero(layer.weights))
        entries.append(entry)
    manifest = {
        "format": "sensprune-model",
        "version": 1,
        "dtype": "float64-le",
        "input_shape": list(net.input_shape),
        "layers": entries,
        "total_weights": net.prunable_count(),
        "nnz": sum(e["nnz"] for e in entries),
    }
    (directory / WEIGHTS).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_model(directory: PathLike) -> Network:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / WEIGHTS).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete model bundle: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}") from exc

    def read(offset, count, shape):
        end = offset + 8 * count
        if offset < 0 or end > len(blob):
            raise FormatError(f"tensor at byte {offset} overruns {WEIGHTS}")
        return np.frombuffer(blob, dtype=_F64, count=count, offset=offset).astype(np.float64).reshape(shape)

    layers = []
    try:
        for entry in manifest["layers"]:
            if entry["kind"] == "dense":
                shape = (entry["out_features"], entry["in_features"])
            elif entry["kind"] == "conv2d":
                shape = (entry["out_channels"], entry["in_channels"], entry["kernel_h"], entry["kernel_w"])
            else:
                raise FormatError(f"unknown layer kind {entry['kind']!r}")
            if int(np.prod(shape)) != entry["weight_count"]:
                raise FormatError("weight_count does not match layer shape")
            w = read(entry["weight_offset"], entry["weight_count"], shape)
            b = None
            if entry.get("bias_offset") is not None:
                b = read(entry["bias_offset"], entry["bias_count"], (entry["bias_count"],))
            layers.append(LayerSpec(entry["kind"], w, entry["activation"], b,
                                    entry.get("stride", 1), entry.get("padding", 0)))
        return Network(tuple(manifest["input_shape"]), layers)
    except KeyError as exc:
        raise FormatError(f"manifest missing field {exc}") from exc


def write_tensor(path: PathLike, tensor) -> Path:
    tensor = as_tensor(tensor)
    if tensor.ndim < 1:
        raise FormatError("tensor files need rank >= 1")
    path = Path(path)
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, tensor.ndim)
    header += struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
    path.write_bytes(header + np.ascontiguousarray(tensor, dtype=_F64).tobytes())
    return path


def read_tensor(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = 12 + 8 * rank
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - start != 8 * count:
        raise FormatError(f"{path}: expected {count} values, found {(len(raw) - start) // 8}")
    return np.frombuffer(raw, dtype=_F64, offset=start).astype(np.float64).reshape(shape)
