"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DRKF"                      magic
    u32  version                 (1)
    u8   variant                 0 = base, 1 = rkf
    u32  n_rotations
    u32  rate
    u32  layer_count
    layer_count x (u32 c_out, u32 c_in, u32 k)
    per layer, in declaration order: c_out*c_in*k*k f32 weights, c_out f32 bias
    u32  metadata length, then that many bytes of UTF-8 JSON (sorted keys)
    u32  CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import Model, ModelConfig
from .tensor_core import ConvKernel

MAGIC = b"DRKF"
VERSION = 1
VARIANT_TAGS = {"base": 0, "rkf": 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def encode_checkpoint(model: Model, metadata: dict | None = None) -> bytes:
    cfg = model.cfg
    meta = dict(metadata or {})
    meta.setdefault("rkf_layers", "all k>=3 convs" if cfg.variant == "rkf" else "none")
    parts = [MAGIC, struct.pack("<IBIII", VERSION, VARIANT_TAGS[cfg.variant], cfg.n_rotations, cfg.rate,
                                len(model.layers))]
    for l in model.layers:
        parts.append(struct.pack("<III", l.c_out, l.c_in, l.k))
    for l in model.layers:
        parts.append(np.ascontiguousarray(l.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(data: bytes) -> tuple[Model, dict]:
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a DRKF checkpoint (magic {data[:4]!r})")
    if len(data) < 8:
        raise CrcMismatchError("checkpoint truncated")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported (expected {VERSION})")
    if len(data) < 12:
        raise CrcMismatchError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError("checkpoint CRC mismatch")
    try:
        return _parse_body(body)
    except (struct.error, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint body: {e}") from e


def _parse_body(body: bytes):
    off = 8
    tag, n_rot, rate, n_layers = struct.unpack_from("<BIII", body, off)
    off += struct.calcsize("<BIII")
    variants = {v: k for k, v in VARIANT_TAGS.items()}
    if tag not in variants:
        raise CheckpointError(f"unknown variant tag {tag}")
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<III", body, off))
        off += 12
    layers = []
    for c_out, c_in, k in dims:
        nw = c_out * c_in * k * k
        w = np.frombuffer(body, dtype="<f4", count=nw, offset=off).reshape(c_out, c_in, k, k).astype(np.float32)
        off += 4 * nw
        b = np.frombuffer(body, dtype="<f4", count=c_out, offset=off).astype(np.float32)
        off += 4 * c_out
        layers.append(ConvKernel(w, b))
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + mlen].decode("utf-8"))
    if off + mlen != len(body):
        raise CheckpointError("trailing bytes before CRC")

    n_stages = int(round(np.log2(rate)))
    n_trunk = n_layers - n_stages - 2
    if n_trunk < 1:
        raise CheckpointError("layer count inconsistent with downsampling rate")
    cfg = ModelConfig(
        variant=variants[tag], n_rotations=n_rot,
        trunk_channels=tuple(d[0] for d in dims[:n_trunk]),
        head_channels=dims[n_trunk][0] if n_stages else ModelConfig.head_channels,
        desc_dim=dims[n_trunk + n_stages][0], rate=rate, kernel_size=dims[0][2],
    )
    return Model(cfg, layers), meta


def save_checkpoint(path, model: Model, metadata: dict | None = None) -> bytes:
    data = encode_checkpoint(model, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path) -> tuple[Model, dict]:
    return decode_checkpoint(Path(path).read_bytes())
