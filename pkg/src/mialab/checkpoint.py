"""MIAM model checkpoints.

Layout (little-endian)::

    "MIAM" | version u32 | ndim u32 | dims u32*ndim | classes u32 | n_layers u32
    per layer: id_len u16 | id utf-8 | kind tag u8 | n_extents u8 | extents u32*n
    parameters: f64, layer by layer in declaration order, each tensor row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data_lab import _atomic_write
from .tensor_core import LAYER_KINDS, Model, ModelSpec

MIAM_MAGIC = b"MIAM"
MIAM_VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_model(model: Model) -> bytes:
    spec = model.spec
    out = bytearray(MIAM_MAGIC)
    out += struct.pack("<II", MIAM_VERSION, len(spec.input_shape))
    out += struct.pack(f"<{len(spec.input_shape)}I", *spec.input_shape)
    out += struct.pack("<II", spec.classes, len(spec.layers))
    for lid, layer in spec.layers:
        name = lid.encode("utf-8")
        ext = layer.extents()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", layer.tag, len(ext))
        out += struct.pack(f"<{len(ext)}I", *ext)
    out += model.flat_params().astype("<f8").tobytes()
    return bytes(out)


def save_model(model: Model, path) -> None:
    _atomic_write(Path(path), dump_model(model))


def parse_model(raw: bytes) -> Model:
    if raw[:4] != MIAM_MAGIC:
        raise CheckpointError("bad magic, not a MIAM checkpoint")
    try:
        version, ndim = struct.unpack_from("<II", raw, 4)
        if version != MIAM_VERSION:
            raise CheckpointError(f"unsupported MIAM version {version}")
        off = 12
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        classes, n_layers = struct.unpack_from("<II", raw, off)
        off += 8
        layers = []
        for _ in range(n_layers):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            lid = raw[off : off + n].decode("utf-8")
            off += n
            tag, n_ext = struct.unpack_from("<BB", raw, off)
            off += 2
            ext = struct.unpack_from(f"<{n_ext}I", raw, off)
            off += 4 * n_ext
            if tag not in LAYER_KINDS:
                raise CheckpointError(f"unknown layer kind tag {tag}")
            layers.append((lid, LAYER_KINDS[tag](*ext)))
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    spec = ModelSpec(tuple(layers), dims, classes)
    template = Model(spec, {lid: {n: np.zeros(s) for n, s in l.param_shapes(spec.in_shape(k)).items()}
                            for k, (lid, l) in enumerate(spec.layers)})
    need = off + 8 * template.n_params
    if len(raw) != need:
        raise CheckpointError(f"checkpoint has {len(raw)} bytes, expected {need}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    return template.with_flat_params(flat)


def load_model(path) -> Model:
    return parse_model(Path(path).read_bytes())
