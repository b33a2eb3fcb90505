"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GSAN"  u32 version
    u32 len  network config text (UTF-8)
    u32 len  variant name (UTF-8)
    u32 tensor count
    per tensor:
        u16 len, name (UTF-8)
        u8 dtype tag, u8 ndim, ndim x u32 dims
        u64 payload length, payload bytes, u32 CRC32 of payload

Shift layers store their continuous proxy (f32) plus the quantized sign and
exponent (i8 each); the pair is checked against the proxy on load.  BN running
statistics are stored alongside the parameters.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ConfigError
from .ghost import build_network
from .layers import ShiftConv2d
from .netspec import emit_network_config, parse_network_config_text
from .shift import quantize_shift_array

MAGIC = b"GSAN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i8")}
TAGS = {dt: tag for tag, dt in DTYPES.items()}


def model_tensors(model):
    """Ordered ``name -> array`` table of everything a checkpoint stores."""
    table = {}
    shift_layers = {name: layer for name, layer in model.named_layers()
                    if isinstance(layer, ShiftConv2d)}
    for name, p in model.named_parameters():
        table[name] = p.value
        owner = name.rsplit(".", 1)[0]
        if owner in shift_layers and name.endswith(".proxy"):
            layer = shift_layers[owner]
            sign, exponent = quantize_shift_array(p.value, layer.p_min, layer.p_max)
            table[owner + ".s"] = sign
            table[owner + ".p"] = exponent
    for name, b in model.named_buffers():
        table[name] = b
    return table


def _pack_str(text, width="<I"):
    raw = text.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def serialize(model):
    parts = [MAGIC, struct.pack("<I", VERSION),
             _pack_str(emit_network_config(model.spec)), _pack_str(model.variant)]
    table = model_tensors(model)
    parts.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in TAGS:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        payload = arr.astype(dt, copy=False).tobytes()
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack("<BB", TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


def save_checkpoint(model, path):
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = serialize(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, width, what):
        (n,) = self.unpack(width, what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} is not valid UTF-8") from None


def deserialize(data):
    """Parse bytes into ``(config text, variant, {name: array})`` without building a model."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config_text = r.string("<I", "network config")
    variant = r.string("<I", "variant")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name = r.string("<H", "tensor name")
        tag, ndim = r.unpack("<BB", f"header of {name}")
        if tag not in DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        (length,) = r.unpack("<Q", f"length of {name}")
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[tag].itemsize
        if length != expected:
            raise CheckpointError(f"tensor {name}: payload length {length} != {expected} for shape {shape}")
        payload = r.take(length, f"payload of {name}")
        (crc,) = r.unpack("<I", f"checksum of {name}")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"tensor {name}: checksum mismatch (corrupted payload)")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=DTYPES[tag]).reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensor table")
    return config_text, variant, tensors


def read_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return deserialize(data)


def load_checkpoint(path):
    """Rebuild the model described in the file and fill every tensor."""
    config_text, variant, tensors = read_checkpoint(path)
    try:
        spec = parse_network_config_text(config_text)
        model = build_network(spec, variant)
    except ConfigError as exc:
        raise CheckpointError(f"embedded network config is invalid: {exc}") from None
    expected = model_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"tensor table mismatch: missing={missing} unexpected={extra}")
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape or tensors[name].dtype != ref.dtype:
            raise CheckpointError(
                f"tensor {name}: stored {tensors[name].dtype}{tensors[name].shape}, "
                f"model expects {ref.dtype}{ref.shape}"
            )
    layers = dict(model.named_layers())
    for name, layer in layers.items():
        if isinstance(layer, ShiftConv2d):
            sign, exponent = quantize_shift_array(tensors[name + ".proxy"], layer.p_min, layer.p_max)
            if not (np.array_equal(sign, tensors[name + ".s"])
                    and np.array_equal(exponent, tensors[name + ".p"])):
                raise CheckpointError(f"{name}: stored (s, p) disagree with the stored proxy")
    # everything validated: only now mutate the model
    for name, p in model.named_parameters():
        p.value[...] = tensors[name]
    for name, b in model.named_buffers():
        b[...] = tensors[name]
    return model
