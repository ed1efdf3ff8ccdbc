"""
Transformer-based small-target detector.

Pipeline: residual CNN embedding (no pooling) -> flattened tokens + learned
position embedding -> ``k`` encoder layers (multi-head self-attention followed
by a feature-enhancement block) -> U-Net style decoder with skip
concatenations -> per-pixel sigmoid confidence map.

All functions accept a leading batch axis; token tensors are (B, n, C1) and
feature maps are (B, C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from irformer.core import ops
from irformer.core.checkpoint import load_checkpoint, save_checkpoint
from irformer.core.tensor import Parameter, Tensor, as_tensor, no_grad
from irformer.errors import ConfigError, DimensionError


@dataclass
class ModelConfig:
    """Architecture hyperparameters.  Defaults are the desk-scale config."""

    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    total_stride: int = 8
    c1: int = 64
    heads: int = 4
    layers: int = 4
    c2: int = 64
    fem_kernel: int = 3
    fem_prenorm: bool = False
    decoder_channels: list[int] = field(default_factory=lambda: [64, 32, 16])
    norm_groups: int = 4        # GroupNorm groups in backbone/decoder convs; 0 disables
    head_bias: float = -4.0     # output bias init; sigmoid(-4) ~ 0.018 foreground prior
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        self.validate()

    @property
    def patch_side(self) -> int:
        """Side P of the per-token FEM map (c2 == P * P)."""
        return math.isqrt(self.c2)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.total_stride, w // self.total_stride

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("layers (k) must be >= 1")
        if self.heads < 1 or self.c1 % self.heads:
            raise ConfigError(f"c1={self.c1} not divisible by heads={self.heads}")
        if self.patch_side ** 2 != self.c2:
            raise ConfigError(f"c2={self.c2} is not a perfect square")
        if self.fem_kernel < 1 or self.fem_kernel % 2 == 0:
            raise ConfigError("fem_kernel must be a positive odd integer")
        if self.total_stride != 2 ** len(self.backbone_channels):
            raise ConfigError(
                f"total_stride={self.total_stride} must equal 2**len(backbone_channels)")
        if len(self.decoder_channels) != len(self.backbone_channels):
            raise ConfigError("decoder_channels needs one entry per backbone stage")
        if self.norm_groups < 0 or (self.norm_groups and any(
                c % self.norm_groups for c in self.backbone_channels + self.decoder_channels)):
            raise ConfigError(f"every conv width must be divisible by norm_groups={self.norm_groups}")
        h, w = self.input_size
        if h % self.total_stride or w % self.total_stride:
            raise ConfigError(f"input {h}x{w} not divisible by stride {self.total_stride}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def full_scale_config() -> ModelConfig:
    """224x224 input, 12 heads, 12 encoder layers (C1=768 so heads divide it)."""
    return ModelConfig(input_size=(224, 224), c1=768, heads=12, layers=12, c2=256)


class TokenBatch(NamedTuple):
    tokens: Tensor          # (B, n, C1)
    grid: tuple[int, int]   # (H', W')


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig) -> dict[str, Parameter]:
    """He-normal convs, N(0, 0.02) attention/FC weights, zero biases and E_pos."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Parameter] = {}

    def conv(name, cout, cin, k, norm=False):
        std = math.sqrt(2.0 / (cin * k * k))
        params[name + ".w"] = Parameter(rng.normal(0.0, std, (cout, cin, k, k)), name + ".w")
        params[name + ".b"] = Parameter(np.zeros(cout), name + ".b")
        if norm and cfg.norm_groups:
            params[name + ".gn.gain"] = Parameter(np.ones(cout), name + ".gn.gain")
            params[name + ".gn.bias"] = Parameter(np.zeros(cout), name + ".gn.bias")

    def dense(name, shape):
        params[name] = Parameter(rng.normal(0.0, 0.02, shape), name)

    def zeros(name, shape):
        params[name] = Parameter(np.zeros(shape), name)

    chans = cfg.backbone_channels
    conv("backbone.stem", chans[0], cfg.in_channels, 3, norm=True)
    for s, c in enumerate(chans):
        if s > 0:
            conv(f"backbone.down{s}", c, chans[s - 1], 3, norm=True)
        conv(f"backbone.stage{s}.conv1", c, c, 3, norm=True)
        conv(f"backbone.stage{s}.conv2", c, c, 3, norm=True)
    conv("backbone.proj", cfg.c1, chans[-1], 3)
    zeros("pos_embed", (cfg.num_tokens, cfg.c1))

    d = cfg.c1 // cfg.heads
    for i in range(cfg.layers):
        p = f"encoder.{i}"
        params[f"{p}.ln.gain"] = Parameter(np.ones(cfg.c1), f"{p}.ln.gain")
        zeros(f"{p}.ln.bias", (cfg.c1,))
        for proj in ("wq", "wk", "wv"):
            dense(f"{p}.msa.{proj}", (cfg.heads, d, d))
        dense(f"{p}.msa.wo", (cfg.c1, cfg.c1))
        zeros(f"{p}.msa.bo", (cfg.c1,))
        if cfg.fem_prenorm:
            params[f"{p}.fem.ln.gain"] = Parameter(np.ones(cfg.c1), f"{p}.fem.ln.gain")
            zeros(f"{p}.fem.ln.bias", (cfg.c1,))
        dense(f"{p}.fem.fc1.w", (cfg.c1, cfg.c2))
        zeros(f"{p}.fem.fc1.b", (cfg.c2,))
        conv(f"{p}.fem.conv", 1, 1, cfg.fem_kernel)
        dense(f"{p}.fem.fc2.w", (cfg.c2, cfg.c1))
        zeros(f"{p}.fem.fc2.b", (cfg.c1,))

    prev = cfg.c1
    for s, c in enumerate(cfg.decoder_channels):
        skip_c = chans[len(chans) - 1 - s]
        conv(f"decoder.{s}", c, prev + skip_c, 3, norm=True)
        prev = c
    conv("decoder.head", 1, prev, 1)
    params["decoder.head.b"].data[:] = cfg.head_bias
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _conv(x, params, name, stride=1, groups=0):
    """Same-padded conv, followed by GroupNorm when the layer has one."""
    w = params[name + ".w"]
    out = ops.conv2d(x, w, params[name + ".b"], stride=stride, padding=w.shape[-1] // 2)
    gain = params.get(name + ".gn.gain")
    if gain is not None:
        out = ops.group_norm(out, gain, params[name + ".gn.bias"], groups)
    return out


def _res_block(x, params, name, groups):
    h = ops.relu(_conv(x, params, name + ".conv1", groups=groups))
    h = _conv(h, params, name + ".conv2", groups=groups)
    return ops.relu(x + h)


def embed(image: Tensor, params: dict, cfg: ModelConfig) -> tuple[TokenBatch, list[Tensor]]:
    """
    Backbone features -> (tokens with position embedding, skip maps).

    Skips are ordered shallowest to deepest; each stage halves the spatial
    extent, and a final stride-2 projection produces the C1-wide token grid.
    """
    image = as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"embed expects (B, C, H, W), got {image.shape}")
    B, C, H, W = image.shape
    if C != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} input channels, got {C}")
    if H % cfg.total_stride or W % cfg.total_stride:
        raise DimensionError(f"input {H}x{W} not divisible by stride {cfg.total_stride}")
    gh, gw = H // cfg.total_stride, W // cfg.total_stride
    if gh * gw != params["pos_embed"].shape[0]:
        raise DimensionError(
            f"input {H}x{W} gives {gh * gw} tokens; model was built for {params['pos_embed'].shape[0]}")

    h = ops.relu(_conv(image, params, "backbone.stem", groups=cfg.norm_groups))
    skips = []
    for s in range(len(cfg.backbone_channels)):
        if s > 0:
            h = ops.relu(_conv(h, params, f"backbone.down{s}", stride=2, groups=cfg.norm_groups))
        h = _res_block(h, params, f"backbone.stage{s}", cfg.norm_groups)
        skips.append(h)
    feat = _conv(h, params, "backbone.proj", stride=2)          # (B, C1, H', W')
    tokens = feat.reshape(B, cfg.c1, gh * gw).transpose(0, 2, 1)  # (B, n, C1)
    tokens = tokens + params["pos_embed"]
    return TokenBatch(tokens, (gh, gw)), skips


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, c = x.shape
    return x.reshape(B, n, heads, c // heads).transpose(0, 2, 1, 3)  # (B, m, n, d)


def msa(e: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """
    ``MSA(LN(E)) + E``.

    Each head j sees its own channel slice E^j (width C1/m) and projects it
    with its own W^Q, W^K, W^V (stored stacked as (m, d, d)).  Scores are
    scaled by sqrt(C1/m); concatenated head outputs pass through an output
    projection before the residual add.
    """
    if e.ndim == 2:
        return msa(e.reshape(1, *e.shape), params, prefix, heads).reshape(e.shape)
    B, n, c = e.shape
    x = ops.layer_norm(e, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])
    z, _ = _attend(x, params, prefix, heads)
    out = z @ params[f"{prefix}.msa.wo"] + params[f"{prefix}.msa.bo"]
    return out + e


def _attend(x: Tensor, params: dict, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    B, n, c = x.shape
    xs = _split_heads(x, heads)
    q = xs @ params[f"{prefix}.msa.wq"]
    k = xs @ params[f"{prefix}.msa.wk"]
    v = xs @ params[f"{prefix}.msa.wv"]
    scores = ops.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(c // heads))
    attn = ops.softmax_rows(scores)                      # (B, m, n, n)
    z = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, c)
    return z, attn


def attention_maps(e: Tensor, params: dict, prefix: str, heads: int) -> np.ndarray:
    """Attention matrices (B, heads, n, n) of one encoder layer, for inspection."""
    e = as_tensor(e)
    if e.ndim == 2:
        e = e.reshape(1, *e.shape)
    with no_grad():
        x = ops.layer_norm(e, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])
        return _attend(x, params, prefix, heads)[1].data


def fem(e_a: Tensor, params: dict, prefix: str, cfg: ModelConfig) -> Tensor:
    """
    Feature enhancement: FC -> reshape each token to a PxP map -> shared conv
    + ReLU -> reshape back -> FC, added onto the input tokens.
    """
    if e_a.ndim == 2:
        return fem(e_a.reshape(1, *e_a.shape), params, prefix, cfg).reshape(e_a.shape)
    B, n, c1 = e_a.shape
    P = cfg.patch_side
    if P * P != cfg.c2:
        raise ConfigError(f"c2={cfg.c2} is not a perfect square")
    x = e_a
    if cfg.fem_prenorm:
        x = ops.layer_norm(x, params[f"{prefix}.fem.ln.gain"], params[f"{prefix}.fem.ln.bias"])
    f_a = x @ params[f"{prefix}.fem.fc1.w"] + params[f"{prefix}.fem.fc1.b"]   # (B, n, C2)
    f_3d = f_a.reshape(B * n, 1, P, P)
    w = params[f"{prefix}.fem.conv.w"]
    f_conv = ops.relu(ops.conv2d(f_3d, w, params[f"{prefix}.fem.conv.b"], padding=w.shape[-1] // 2))
    f_conv = f_conv.reshape(B, n, cfg.c2)
    f_al = f_conv @ params[f"{prefix}.fem.fc2.w"] + params[f"{prefix}.fem.fc2.b"]
    return f_al + e_a


def encode(e: TokenBatch, params: dict, cfg: ModelConfig) -> TokenBatch:
    x = e.tokens
    for i in range(cfg.layers):
        prefix = f"encoder.{i}"
        x = fem(msa(x, params, prefix, cfg.heads), params, prefix, cfg)
    return TokenBatch(x, e.grid)


def decode(tokens: TokenBatch, skips: list[Tensor], params: dict, cfg: ModelConfig) -> Tensor:
    """Tokens -> (B, 1, H, W) confidence map via upsample/concat/conv stages."""
    x = tokens.tokens
    B, n, c1 = x.shape
    gh, gw = tokens.grid
    if gh * gw != n:
        raise DimensionError(f"token count {n} does not match grid {tokens.grid}")
    if len(skips) != len(cfg.decoder_channels):
        raise DimensionError(f"expected {len(cfg.decoder_channels)} skip maps, got {len(skips)}")
    h = x.transpose(0, 2, 1).reshape(B, c1, gh, gw)
    for s, skip in enumerate(reversed(skips)):
        h = ops.upsample_nearest(h, 2)
        if skip.shape[0] != B or skip.shape[2:] != h.shape[2:]:
            raise DimensionError(f"decoder stage {s}: skip {skip.shape} vs upsampled {h.shape}")
        h = ops.concat([h, skip], axis=1)
        h = ops.relu(_conv(h, params, f"decoder.{s}", groups=cfg.norm_groups))
    return ops.sigmoid(_conv(h, params, "decoder.head"))


class Detector:
    """Parameter container plus the forward pipeline."""

    def __init__(self, cfg: Optional[ModelConfig] = None, params: Optional[dict] = None):
        self.cfg = cfg or ModelConfig()
        self.params: dict[str, Parameter] = params if params is not None else init_params(self.cfg)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, image) -> Tensor:
        """
        Confidence map for a batch.

        ``image`` may be (H, W), (B, H, W) or (B, C, H, W); output is
        (B, 1, H, W) with values in (0, 1).
        """
        x = as_tensor(image)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        tokens, skips = embed(x, self.params, self.cfg)
        return decode(encode(tokens, self.params, self.cfg), skips, self.params, self.cfg)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Numpy in, numpy out: (N, H, W) images -> (N, H, W) confidence maps."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 2
        if single:
            images = images[None]
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).data[:, 0])
        maps = np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[1:])
        return maps[0] if single else maps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path, meta: Optional[dict] = None) -> None:
        record = {"model_config": self.cfg.to_dict()}
        if meta:
            record.update(meta)
        save_checkpoint(path, self.state_dict(), record)

    @classmethod
    def load(cls, path) -> "Detector":
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]))
        model.load_state_dict(tensors)
        return model


def load_detector(path: str | Path) -> Detector:
    return Detector.load(path)
