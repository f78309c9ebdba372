"""Vision transformer: patch tokens, sinusoidal positions, pre-norm encoder, linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .autograd import Tensor, ShapeError, parameter
from .autograd import ops

# Fixed DX codes for the two-class setting.
CLASS_NAMES = ("Anaplastic Large Cell Lymphoma", "Classical Hodgkin Lymphoma")


@dataclass(frozen=True)
class ViTConfig:
    img_size: int = 100
    patch_size: int = 20
    channels: int = 3
    d_model: int = 128
    num_heads: int = 4
    num_layers: int = 6
    d_ff: int = 2048
    dropout_rate: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        for name in ("img_size", "patch_size", "channels", "d_model", "num_heads", "num_layers", "d_ff", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} is not a multiple of patch_size {self.patch_size}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even for the sinusoidal table, got {self.d_model}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @classmethod
    def small(cls, **overrides) -> "ViTConfig":
        """Reduced-width preset for CPU runs (d_model 64, 3 layers, d_ff 256)."""
        base = dict(d_model=64, num_layers=3, d_ff=256)
        base.update(overrides)
        return cls(**base)


def patchify(image: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Cut an image (or a batch) into the non-overlapping patch grid.

    Rows come in row-major grid order, top-left patch first. Each row is the
    patch flattened channel-major, then by pixel row, then by pixel column.
    ``[C, H, W] -> [seq_len, patch_dim]`` and ``[B, C, H, W] -> [B, seq_len, patch_dim]``.
    """
    image = np.asarray(image)
    single = image.ndim == 3
    batch = image[None] if single else image
    expected = (cfg.channels, cfg.img_size, cfg.img_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"image shape {image.shape} does not match config {expected}")
    b, p, g = batch.shape[0], cfg.patch_size, cfg.grid
    tokens = batch.reshape(b, cfg.channels, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, cfg.patch_dim)
    return tokens[0] if single else tokens


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine table, even columns sine and odd columns cosine, base 10000."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    table = np.empty((seq_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class TransformerBlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, cfg: ViTConfig, rng: np.random.Generator) -> "TransformerBlockParams":
        d, f = cfg.d_model, cfg.d_ff

        def square():
            return parameter(glorot_uniform(rng, (d, d), d, d))

        return cls(
            wq=square(),
            wk=square(),
            wv=square(),
            wo=square(),
            ff_w1=parameter(glorot_uniform(rng, (d, f), d, f)),
            ff_b1=parameter(np.zeros(f)),
            ff_w2=parameter(glorot_uniform(rng, (f, d), f, d)),
            ff_b2=parameter(np.zeros(d)),
            ln1_gain=parameter(np.ones(d)),
            ln1_bias=parameter(np.zeros(d)),
            ln2_gain=parameter(np.ones(d)),
            ln2_bias=parameter(np.zeros(d)),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic attention matrix ``softmax(q k^T / sqrt(d_k))``."""
    if q.shape != k.shape:
        raise ShapeError(f"query and key shapes differ: {q.shape} vs {k.shape}")
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return ops.softmax_lastdim(scores)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Unmasked attention over ``[..., s, d_k]`` inputs."""
    if v.shape != q.shape:
        raise ShapeError(f"value shape {v.shape} does not match query shape {q.shape}")
    return ops.matmul(attention_weights(q, k), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return ops.transpose(ops.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, params: TransformerBlockParams, cfg: ViTConfig) -> Tensor:
    """Project to Q/K/V, attend per head, concatenate heads, project out.

    Accepts ``[s, d_model]`` or ``[B, s, d_model]``.
    """
    single = x.ndim == 2
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.d_model):
        raise ShapeError(f"attention input {x.shape} does not match (seq_len, d_model) = ({cfg.seq_len}, {cfg.d_model})")
    b, s, d = x.shape
    q = _split_heads(ops.matmul(x, params.wq), cfg.num_heads)
    k = _split_heads(ops.matmul(x, params.wk), cfg.num_heads)
    v = _split_heads(ops.matmul(x, params.wv), cfg.num_heads)
    context = scaled_dot_product_attention(q, k, v)
    merged = ops.reshape(ops.transpose(context, (0, 2, 1, 3)), (b, s, d))
    out = ops.matmul(merged, params.wo)
    return ops.reshape(out, (s, d)) if single else out


def feed_forward(x: Tensor, params: TransformerBlockParams) -> Tensor:
    hidden = ops.relu(ops.add(ops.matmul(x, params.ff_w1), params.ff_b1))
    return ops.add(ops.matmul(hidden, params.ff_w2), params.ff_b2)


def transformer_block(
    x: Tensor,
    params: TransformerBlockParams,
    cfg: ViTConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm residual block; dropout sits only on the two residual branches."""
    attn = multi_head_attention(ops.layer_norm(x, params.ln1_gain, params.ln1_bias), params, cfg)
    x = ops.add(x, ops.dropout(attn, cfg.dropout_rate, rng, training))
    ff = feed_forward(ops.layer_norm(x, params.ln2_gain, params.ln2_bias), params)
    return ops.add(x, ops.dropout(ff, cfg.dropout_rate, rng, training))


class ViTModel:
    """Parameters of the vision transformer plus its forward pass."""

    magic = b"VITL"

    def __init__(
        self,
        cfg: ViTConfig,
        patch_weight: Tensor,
        patch_bias: Tensor,
        blocks: list[TransformerBlockParams],
        head_weight: Tensor,
        head_bias: Tensor,
    ):
        self.cfg = cfg
        self.patch_weight = patch_weight
        self.patch_bias = patch_bias
        self.positional_table = positional_encoding(cfg.seq_len, cfg.d_model)
        self.blocks = blocks
        self.head_weight = head_weight
        self.head_bias = head_bias

    @classmethod
    def init(cls, cfg: ViTConfig, rng: np.random.Generator) -> "ViTModel":
        """Glorot-uniform weights, zero biases, unit layer-norm gains."""
        d = cfg.d_model
        patch_weight = parameter(glorot_uniform(rng, (cfg.patch_dim, d), cfg.patch_dim, d))
        patch_bias = parameter(np.zeros(d))
        blocks = [TransformerBlockParams.init(cfg, rng) for _ in range(cfg.num_layers)]
        head_weight = parameter(glorot_uniform(rng, (d, cfg.num_classes), d, cfg.num_classes))
        head_bias = parameter(np.zeros(cfg.num_classes))
        return cls(cfg, patch_weight, patch_bias, blocks, head_weight, head_bias)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("patch_projection.weight", self.patch_weight), ("patch_projection.bias", self.patch_bias)]
        for i, block in enumerate(self.blocks):
            named += [(f"blocks.{i}.{name}", t) for name, t in block.named_parameters()]
        named += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def forward(self, images: np.ndarray, rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        """Logits ``[B, num_classes]`` for a batch ``[B, C, H, W]``."""
        cfg = self.cfg
        tokens = Tensor(patchify(images, cfg))
        if tokens.ndim != 3:
            raise ShapeError(f"forward expects a batch [B, C, H, W], got {np.shape(images)}")
        x = ops.add(ops.matmul(tokens, self.patch_weight), self.patch_bias)
        x = ops.add(x, Tensor(self.positional_table))
        for block in self.blocks:
            x = transformer_block(x, block, cfg, rng, training)
        pooled = ops.mean(x, axis=1)
        return ops.add(ops.matmul(pooled, self.head_weight), self.head_bias)

    __call__ = forward


def vit_parameter_count(cfg: ViTConfig) -> int:
    """Closed-form parameter count of :class:`ViTModel` for ``cfg``."""
    d, f = cfg.d_model, cfg.d_ff
    per_block = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d
    return cfg.patch_dim * d + d + cfg.num_layers * per_block + d * cfg.num_classes + cfg.num_classes


def vit_forward(
    image: np.ndarray,
    model: ViTModel,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Logits ``[num_classes]`` for a single ``[C, H, W]`` image."""
    logits = model.forward(np.asarray(image)[None], rng, training)
    return ops.reshape(logits, (model.cfg.num_classes,))


def predict_class(logits) -> int:
    """Arg-max class index; ties go to the lowest index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if values.size == 0:
        raise ValueError("predict_class needs at least one logit")
    return int(np.argmax(values))
