"""Binary checkpoint container shared by the ViT and CNN models.

Layout (all little-endian)::

    magic      4 bytes   b"VITL" or b"CNNL"
    version    uint32
    config     model-specific fields in declaration order
               (integers as int32, dropout_rate as float64)
    parameters float32 values of every tensor in ``named_parameters()`` order

Tensor shapes are implied by the config, so the file carries no shape
headers; the loader rejects any size mismatch.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .autograd import parameter
from .cnn import CNNConfig, CNNModel
from .vit import TransformerBlockParams, ViTConfig, ViTModel

FORMAT_VERSION = 1
Model = Union[ViTModel, CNNModel]


class CheckpointError(ValueError):
    pass


def _vit_config_bytes(cfg: ViTConfig) -> bytes:
    return struct.pack(
        "<7id i",
        cfg.img_size,
        cfg.patch_size,
        cfg.channels,
        cfg.d_model,
        cfg.num_heads,
        cfg.num_layers,
        cfg.d_ff,
        cfg.dropout_rate,
        cfg.num_classes,
    )


def _cnn_config_bytes(cfg: CNNConfig) -> bytes:
    out = struct.pack("<3i", cfg.img_size, cfg.channels, len(cfg.conv_stages))
    for stage in cfg.conv_stages:
        out += struct.pack("<3i", *stage)
    out += struct.pack("<2i", cfg.pool_size, len(cfg.fc_widths))
    out += struct.pack(f"<{len(cfg.fc_widths)}i", *cfg.fc_widths)
    return out + struct.pack("<i", cfg.num_classes)


def to_bytes(model: Model) -> bytes:
    if isinstance(model, ViTModel):
        header = _vit_config_bytes(model.cfg)
    elif isinstance(model, CNNModel):
        header = _cnn_config_bytes(model.cfg)
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    buf = io.BytesIO()
    buf.write(model.magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(header)
    for _, t in model.named_parameters():
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def floats(self, count: int) -> np.ndarray:
        end = self.pos + 4 * count
        if end > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos = end
        return arr


def _fill(model: Model, reader: _Reader) -> Model:
    for name, t in model.named_parameters():
        values = reader.floats(t.size).reshape(t.shape)
        t.data = np.array(values, dtype=t.data.dtype)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"checkpoint has {len(reader.data) - reader.pos} unexpected trailing bytes")
    return model


def _skeleton_vit(cfg: ViTConfig) -> ViTModel:
    def zeros(*shape):
        return parameter(np.zeros(shape))

    d, f = cfg.d_model, cfg.d_ff
    blocks = [
        TransformerBlockParams(
            zeros(d, d), zeros(d, d), zeros(d, d), zeros(d, d),
            zeros(d, f), zeros(f), zeros(f, d), zeros(d),
            zeros(d), zeros(d), zeros(d), zeros(d),
        )
        for _ in range(cfg.num_layers)
    ]
    return ViTModel(cfg, zeros(cfg.patch_dim, d), zeros(d), blocks, zeros(d, cfg.num_classes), zeros(cfg.num_classes))


def _skeleton_cnn(cfg: CNNConfig) -> CNNModel:
    conv, c_in = [], cfg.channels
    for filters, k, _ in cfg.conv_stages:
        conv.append((parameter(np.zeros((filters, c_in, k, k))), parameter(np.zeros(filters))))
        c_in = filters
    fc, width = [], cfg.flat_features
    for out in cfg.fc_widths + (cfg.num_classes,):
        fc.append((parameter(np.zeros((width, out))), parameter(np.zeros(out))))
        width = out
    return CNNModel(cfg, conv, fc)


def from_bytes(data: bytes) -> Model:
    reader = _Reader(data)
    if len(data) < 8:
        raise CheckpointError("checkpoint is truncated")
    magic = data[:4]
    reader.pos = 4
    (version,) = reader.unpack("<I")
    if magic not in (ViTModel.magic, CNNModel.magic):
        raise CheckpointError(f"unrecognised checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        if magic == ViTModel.magic:
            fields = reader.unpack("<7id i")
            cfg = ViTConfig(*fields[:7], dropout_rate=fields[7], num_classes=fields[8])
            return _fill(_skeleton_vit(cfg), reader)
        img_size, channels, n_stages = reader.unpack("<3i")
        stages = tuple(reader.unpack("<3i") for _ in range(n_stages))
        pool, n_fc = reader.unpack("<2i")
        widths = reader.unpack(f"<{n_fc}i")
        (num_classes,) = reader.unpack("<i")
        cfg = CNNConfig(img_size, channels, stages, pool, widths, num_classes)
        return _fill(_skeleton_cnn(cfg), reader)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid checkpoint config: {exc}") from exc


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
