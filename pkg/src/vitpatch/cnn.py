"""Small convolutional baseline: conv -> relu -> max-pool stages, then dense layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import ShapeError, Tensor, parameter
from .autograd.tensor import make_result
from .autograd import ops
from .autograd.ops import raw_matmul
from .vit import glorot_uniform


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [C, H, W] or [B, C, H, W], got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation (kernels are not flipped).

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``kernels`` is
    ``[C_out, C_in, k, k]``. Output side is ``(H - k) // stride + 1``.
    """
    xd, single = _batched(x)
    b, c, h, w = xd.shape
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be [C_out, C_in, k, k], got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if c_in != c:
        raise ShapeError(f"kernels expect {c_in} input channels, input has {c}")
    if k > h or k > w:
        raise ShapeError(f"kernel side {k} larger than input {h}x{w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1

    windows = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = kernels.data.reshape(c_out, c * k * k)
    out = raw_matmul(cols, wmat.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2) + bias.data[:, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = None
        if x.requires_grad:
            dcols = raw_matmul(gmat, wmat).reshape(b, ho, wo, c, k, k)
            gx4 = np.zeros_like(xd)
            for i in range(k):
                for j in range(k):
                    gx4[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gx4[0] if single else gx4
        gk = raw_matmul(gmat.T, cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return make_result(np.ascontiguousarray(out), (x, kernels, bias), backward, "conv2d")


def maxpool2d(x: Tensor, side: int, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping window max. Gradient goes to the first maximal element."""
    stride = side if stride is None else stride
    if stride != side:
        raise ValueError("only stride == side pooling is supported")
    xd, single = _batched(x)
    b, c, h, w = xd.shape
    if h % side or w % side:
        raise ShapeError(f"pool side {side} does not divide input {h}x{w}")
    ho, wo = h // side, w // side
    windows = xd.reshape(b, c, ho, side, wo, side).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, side * side)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g4[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, side, side).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx[0] if single else gx,)

    return make_result(out, (x,), backward, "maxpool2d")


@dataclass(frozen=True)
class CNNConfig:
    """Stage list entries are ``(filters, kernel side, stride)``.

    The second default stage uses a 4x4 kernel so that both 2x2 pools see an
    even side (100 -> 98 -> 49 -> 46 -> 23).
    """

    img_size: int = 100
    channels: int = 3
    conv_stages: tuple[tuple[int, int, int], ...] = ((8, 3, 1), (16, 4, 1))
    pool_size: int = 2
    fc_widths: tuple[int, ...] = (64,)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv_stages", tuple(tuple(int(v) for v in s) for s in self.conv_stages))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if self.img_size < 1 or self.channels < 1 or self.num_classes < 1 or self.pool_size < 1:
            raise ValueError("img_size, channels, pool_size and num_classes must be positive")
        if any(len(s) != 3 or min(s) < 1 for s in self.conv_stages):
            raise ValueError(f"conv stages must be positive (filters, kernel, stride) triples: {self.conv_stages}")
        if any(w < 1 for w in self.fc_widths):
            raise ValueError(f"fc widths must be positive: {self.fc_widths}")
        self.stage_sides()

    def stage_sides(self) -> list[tuple[int, int]]:
        """(after conv, after pool) spatial side for each stage."""
        side, sides = self.img_size, []
        for i, (_, k, stride) in enumerate(self.conv_stages):
            if k > side:
                raise ValueError(f"stage {i}: kernel {k} exceeds spatial side {side}")
            conv_side = (side - k) // stride + 1
            if conv_side % self.pool_size:
                raise ValueError(f"stage {i}: pool {self.pool_size} does not divide side {conv_side}")
            side = conv_side // self.pool_size
            if side < 1:
                raise ValueError(f"stage {i}: spatial side collapsed to {side}")
            sides.append((conv_side, side))
        return sides

    @property
    def flat_features(self) -> int:
        side = self.stage_sides()[-1][1] if self.conv_stages else self.img_size
        filters = self.conv_stages[-1][0] if self.conv_stages else self.channels
        return filters * side * side


class CNNModel:
    magic = b"CNNL"

    def __init__(self, cfg: CNNConfig, conv: list[tuple[Tensor, Tensor]], fc: list[tuple[Tensor, Tensor]]):
        self.cfg = cfg
        self.conv = conv
        self.fc = fc

    @classmethod
    def init(cls, cfg: CNNConfig, rng: np.random.Generator) -> "CNNModel":
        conv, c_in = [], cfg.channels
        for filters, k, _ in cfg.conv_stages:
            shape = (filters, c_in, k, k)
            conv.append((parameter(glorot_uniform(rng, shape, c_in * k * k, filters * k * k)), parameter(np.zeros(filters))))
            c_in = filters
        fc, width = [], cfg.flat_features
        for out in cfg.fc_widths + (cfg.num_classes,):
            fc.append((parameter(glorot_uniform(rng, (width, out), width, out)), parameter(np.zeros(out))))
            width = out
        return cls(cfg, conv, fc)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (k, b) in enumerate(self.conv):
            named += [(f"conv.{i}.kernel", k), (f"conv.{i}.bias", b)]
        for i, (w, b) in enumerate(self.fc):
            named += [(f"fc.{i}.weight", w), (f"fc.{i}.bias", b)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def forward(self, images: np.ndarray, rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        """Logits ``[B, num_classes]``; the CNN has no stochastic layers."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.img_size, cfg.img_size):
            raise ShapeError(f"images {images.shape} do not match config ({cfg.channels}, {cfg.img_size}, {cfg.img_size})")
        x = Tensor(images)
        for (kernels, bias), (_, _, stride) in zip(self.conv, cfg.conv_stages):
            x = maxpool2d(ops.relu(conv2d(x, kernels, bias, stride)), cfg.pool_size)
        x = ops.reshape(x, (images.shape[0], -1))
        for i, (w, b) in enumerate(self.fc):
            x = ops.add(ops.matmul(x, w), b)
            if i < len(self.fc) - 1:
                x = ops.relu(x)
        return x

    __call__ = forward


def cnn_forward(image: np.ndarray, model: CNNModel) -> Tensor:
    """Logits ``[num_classes]`` for one ``[C, H, W]`` image."""
    return ops.reshape(model.forward(np.asarray(image)[None]), (model.cfg.num_classes,))
