"""Residual 3-D U-Net generator with a transformer bottleneck.

Encoder level ``l``: ``E[l+1] = H(E[l]) + F(H(E[l]))`` where ``H`` is a
stride-2 k4 convolution with batch norm and ReLU and ``F`` is two 3x3x3
conv/BN/ReLU layers.  The deepest feature map is tokenised, passed through
a pre-norm transformer encoder and fused back residually.  Decoder level
``l``: ``D[l] = H'(D[l+1]) + F(H'(D[l+1])) + E[l]`` with a transposed
convolution in ``H'``; skips are additive, so ``D[0]`` has one channel like
the input.  The head is a 3x3x3 convolution followed by a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .nn import BatchNorm3d, Conv3d, ConvTranspose3d, LayerNorm, Linear, Module, normal_param


@dataclass
class GeneratorConfig:
    levels: int = 4
    base_channels: int = 32
    proj_dim: int = 256
    tf_layers: int = 4
    tf_heads: int = 8
    ffn_expansion: int = 4
    input_dims: tuple = (128, 128, 256)
    channels: list = field(default=None)

    def __post_init__(self):
        self.input_dims = tuple(int(n) for n in self.input_dims)
        if self.channels is None:
            self.channels = [self.base_channels * 2**l for l in range(self.levels)]
        else:
            self.channels = [int(c) for c in self.channels]

    def problems(self) -> list[str]:
        out = []
        if self.levels < 1:
            out.append(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            out.append(f"channel schedule has {len(self.channels)} entries for {self.levels} levels")
        if len(self.input_dims) != 3:
            out.append(f"input_dims must have 3 entries, got {self.input_dims}")
        factor = 2 ** max(self.levels, 0)
        for axis, n in zip("DHW", self.input_dims):
            if n < 1 or n % factor:
                out.append(f"input dim {axis}={n} is not divisible by 2^levels={factor}")
        if self.tf_heads < 1 or self.proj_dim % self.tf_heads:
            out.append(f"proj_dim {self.proj_dim} is not divisible by tf_heads {self.tf_heads}")
        if self.channels and self.proj_dim < self.channels[-1]:
            out.append(f"proj_dim {self.proj_dim} is smaller than bottleneck channels {self.channels[-1]}")
        if self.tf_layers < 0 or self.ffn_expansion < 1:
            out.append("tf_layers must be >= 0 and ffn_expansion >= 1")
        return out

    def validate(self) -> "GeneratorConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def bottleneck_dims(self) -> tuple:
        return tuple(n // 2**self.levels for n in self.input_dims)

    @property
    def num_tokens(self) -> int:
        return math.prod(self.bottleneck_dims)

    def level_channels(self, l) -> int:
        """Channels of encoder feature ``E[l]`` (``E[0]`` is the input)."""
        return 1 if l == 0 else self.channels[l - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d) -> "GeneratorConfig":
        return cls(**d)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k, stride, pad, *, rng, dtype, transpose=False):
        conv = ConvTranspose3d if transpose else Conv3d
        self.conv = conv(cin, cout, k, stride, pad, rng=rng, dtype=dtype)
        self.bn = BatchNorm3d(cout, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class ResidualBranch(Module):
    """``F``: two channel-preserving 3x3x3 conv/BN/ReLU layers."""

    def __init__(self, channels, *, rng, dtype):
        self.first = ConvBNReLU(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.second = ConvBNReLU(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.second(self.first(x))


class EncoderLevel(Module):
    def __init__(self, cin, cout, *, rng, dtype):
        self.down = ConvBNReLU(cin, cout, 4, 2, 1, rng=rng, dtype=dtype)
        self.res = ResidualBranch(cout, rng=rng, dtype=dtype)

    def forward(self, x):
        h = self.down(x)
        return h + self.res(h)


class DecoderLevel(Module):
    def __init__(self, cin, cout, *, rng, dtype):
        self.up = ConvBNReLU(cin, cout, 4, 2, 1, rng=rng, dtype=dtype, transpose=True)
        self.res = ResidualBranch(cout, rng=rng, dtype=dtype)

    def forward(self, x, skip):
        h = self.up(x)
        if h.shape != skip.shape:
            raise ShapeMismatch(f"decoder output {h.shape} does not match skip {skip.shape}")
        return h + self.res(h) + skip


class MultiHeadAttention(Module):
    def __init__(self, width, heads, *, rng, dtype):
        self.heads = heads
        self.q = Linear(width, width, rng=rng, dtype=dtype)
        self.k = Linear(width, width, rng=rng, dtype=dtype)
        self.v = Linear(width, width, rng=rng, dtype=dtype)
        self.out = Linear(width, width, rng=rng, dtype=dtype)
        self.last_weights = None

    def _split(self, x):
        n, t, c = x.shape
        return x.reshape(n, t, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x):
        n, t, c = x.shape
        dk = c // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, t, c)
        return self.out(ctx)


class TransformerLayer(Module):
    """Pre-norm encoder layer: attention then GELU feed-forward, both residual."""

    def __init__(self, width, heads, expansion, *, rng, dtype):
        self.norm1 = LayerNorm(width, dtype=dtype)
        self.attn = MultiHeadAttention(width, heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(width, dtype=dtype)
        self.ff1 = Linear(width, expansion * width, rng=rng, dtype=dtype)
        self.ff2 = Linear(expansion * width, width, rng=rng, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(T.gelu(self.ff1(self.norm2(x))))


class BottleneckTransformer(Module):
    def __init__(self, channels, width, layers, heads, expansion, num_tokens, *, rng, dtype):
        self.proj_in = Conv3d(channels, width, 1, rng=rng, dtype=dtype)
        self.pos = normal_param(rng, (num_tokens, width), dtype)
        self.layers = [TransformerLayer(width, heads, expansion, rng=rng, dtype=dtype) for _ in range(layers)]
        self.norm = LayerNorm(width, dtype=dtype)
        self.proj_out = Conv3d(width, channels, 1, rng=rng, dtype=dtype)

    def tokens(self, b):
        n, _, d, h, w = b.shape
        p = self.proj_in(b)
        width = p.shape[1]
        if d * h * w != self.pos.shape[0]:
            raise ShapeMismatch(
                f"bottleneck has {d * h * w} tokens, positional table expects {self.pos.shape[0]}"
            )
        return p.reshape(n, width, d * h * w).transpose(0, 2, 1) + self.pos

    def forward(self, b):
        n, _, d, h, w = b.shape
        x = self.tokens(b)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        width = x.shape[2]
        vol = x.transpose(0, 2, 1).reshape(n, width, d, h, w)
        return b + self.proj_out(vol)


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng=None, dtype=np.float32):
        cfg.validate()
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        L = cfg.levels
        self.encoder = [
            EncoderLevel(cfg.level_channels(l), cfg.level_channels(l + 1), rng=rng, dtype=dtype)
            for l in range(L)
        ]
        self.bottleneck = BottleneckTransformer(
            cfg.channels[-1], cfg.proj_dim, cfg.tf_layers, cfg.tf_heads, cfg.ffn_expansion,
            cfg.num_tokens, rng=rng, dtype=dtype,
        )
        self.decoder = [
            DecoderLevel(cfg.level_channels(l + 1), cfg.level_channels(l), rng=rng, dtype=dtype)
            for l in range(L)
        ]
        self.head = Conv3d(1, 1, 3, 1, 1, rng=rng, dtype=dtype)

    def check_input(self, shape):
        expected = (1, 1) + self.cfg.input_dims
        if tuple(shape) != expected:
            raise ShapeMismatch(f"generator expects input {expected}, got {tuple(shape)}")

    def encode_level(self, e, l):
        return self.encoder[l](e)

    def bottleneck_transform(self, b):
        return self.bottleneck(b)

    def decode_level(self, d, e, l):
        return self.decoder[l](d, e)

    def forward(self, u):
        u = T._as_tensor(u)
        self.check_input(u.shape)
        feats = [u]
        for l in range(self.cfg.levels):
            feats.append(self.encode_level(feats[-1], l))
        d = self.bottleneck_transform(feats[-1])
        for l in reversed(range(self.cfg.levels)):
            d = self.decode_level(d, feats[l], l)
        return T.sigmoid(self.head(d))


def generator_shape_trace(cfg: GeneratorConfig, batch=1) -> list[tuple[str, tuple]]:
    """Layer-by-layer output shapes, by shape arithmetic only."""
    cfg.validate()
    shape = (batch, 1) + cfg.input_dims
    trace = [("input", shape)]
    skips = [shape]
    for l in range(cfg.levels):
        spatial = tuple(T.conv_out_size(s, 4, 2, 1) for s in shape[2:])
        shape = (batch, cfg.level_channels(l + 1)) + spatial
        trace.append((f"encoder.{l}", shape))
        skips.append(shape)
    trace.append(("bottleneck.tokens", (batch, cfg.num_tokens, cfg.proj_dim)))
    trace.append(("bottleneck", shape))
    for l in reversed(range(cfg.levels)):
        spatial = tuple(T.conv_transpose_out_size(s, 4, 2, 1) for s in shape[2:])
        shape = (batch, cfg.level_channels(l)) + spatial
        if shape != skips[l]:
            raise ShapeMismatch(f"decoder level {l} yields {shape}, skip is {skips[l]}")
        trace.append((f"decoder.{l}", shape))
    trace.append(("head", shape))
    return trace


def generator_param_count(cfg: GeneratorConfig) -> int:
    """Trainable parameter count from the configuration alone."""
    conv = lambda ci, co, k: ci * co * k**3 + co
    cbr = lambda ci, co, k: conv(ci, co, k) + 2 * co
    res = lambda c: 2 * cbr(c, c, 3)
    total = 0
    for l in range(cfg.levels):
        lo, hi = cfg.level_channels(l), cfg.level_channels(l + 1)
        total += cbr(lo, hi, 4) + res(hi)  # encoder
        total += cbr(hi, lo, 4) + res(lo)  # decoder
    P, E = cfg.proj_dim, cfg.ffn_expansion * cfg.proj_dim
    layer = 2 * (2 * P) + 4 * (P * P + P) + (P * E + E) + (E * P + P)
    total += conv(cfg.channels[-1], P, 1) + cfg.num_tokens * P + cfg.tf_layers * layer + 2 * P
    total += conv(P, cfg.channels[-1], 1)
    return total + conv(1, 1, 3)
