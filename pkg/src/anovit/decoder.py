"""Convolutional decoder: token grid -> reconstructed image.

The encoder's class token is dropped, the remaining ``N`` tokens are
rearranged onto their original ``sqrt(N) x sqrt(N)`` grid positions (no
learned layer in between), and a stack of transposed-convolution + ReLU
blocks upsamples the grid back to image resolution. A nearest-neighbor
upsample guarantees the exact target extent, a 1x1 convolution maps to the
output channel count, and a sigmoid bounds pixels to [0, 1].

``VitAutoencoder`` composes encoder, rearrangement, and decoder into the
full reconstruction model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GeometryError, Parameter, ParameterStore, Tensor
from .vit import EncoderConfig, ViTEncoder


@dataclass(frozen=True)
class DecoderBlockSpec:
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def out_extent(self, extent: int) -> int:
        return (extent - 1) * self.stride - 2 * self.padding + self.kernel

    def to_dict(self) -> dict:
        return {"out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True)
class DecoderConfig:
    """Block stack plus the final upsample target and output channel count."""

    blocks: tuple[DecoderBlockSpec, ...]
    target_h: int
    target_w: int
    out_channels: int

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("decoder needs at least one block")

    def spatial_plan(self, in_h: int, in_w: int) -> list[tuple[int, int]]:
        """Spatial extents after each block; validates the composed geometry."""
        plan = []
        h, w = in_h, in_w
        for i, blk in enumerate(self.blocks):
            h, w = blk.out_extent(h), blk.out_extent(w)
            if h < 1 or w < 1:
                raise GeometryError(f"decoder block {i} produces nonpositive extent ({h}, {w})")
            plan.append((h, w))
        if h > self.target_h or w > self.target_w:
            raise GeometryError(
                f"decoder blocks reach ({h}, {w}), beyond target "
                f"({self.target_h}, {self.target_w}); the final upsample can only enlarge"
            )
        return plan

    @classmethod
    def default_for(
        cls,
        grid_size: int,
        embed_dim: int,
        target_h: int,
        target_w: int,
        out_channels: int,
        num_blocks: int = 6,
    ) -> "DecoderConfig":
        """Six-block default: enough stride-2 blocks to approach the target,
        stride-1 blocks after, channels halving down to max(D/16, 16)."""
        doublings = 0
        extent = grid_size
        while doublings < num_blocks and extent * 2 <= target_h and extent * 2 <= target_w:
            extent *= 2
            doublings += 1
        floor = max(embed_dim // 16, 16)
        blocks = []
        ch = embed_dim
        for i in range(num_blocks):
            ch = max(ch // 2, floor)
            if i < doublings:
                blocks.append(DecoderBlockSpec(ch, kernel=4, stride=2, padding=1))
            else:
                blocks.append(DecoderBlockSpec(ch, kernel=3, stride=1, padding=1))
        return cls(tuple(blocks), target_h, target_w, out_channels)

    def to_dict(self) -> dict:
        return {
            "blocks": [b.to_dict() for b in self.blocks],
            "target_h": self.target_h, "target_w": self.target_w,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        blocks = tuple(DecoderBlockSpec(**b) for b in d["blocks"])
        return cls(blocks, d["target_h"], d["target_w"], d["out_channels"])

    def param_count(self, in_channels: int) -> int:
        total = 0
        c = in_channels
        for blk in self.blocks:
            total += blk.kernel**2 * c * blk.out_channels + blk.out_channels
            c = blk.out_channels
        return total + c * self.out_channels + self.out_channels


def rearrange_feature_map(tokens):
    """Drop the class token and reshape rows ``1..N`` onto the patch grid.

    tokens (B, N+1, D) / (N+1, D) -> grid (B, g, g, D) / (g, g, D) with
    ``g = sqrt(N)``; grid[i][j] is token row ``1 + i*g + j``. Purely an index
    rearrangement, exactly invertible by ``flatten_feature_map``.
    """
    is_tensor = isinstance(tokens, Tensor)
    shape = tokens.data.shape if is_tensor else np.asarray(tokens).shape
    n = shape[-2] - 1
    g = int(np.sqrt(n))
    if g * g != n:
        raise ValueError(f"token count {n} (excluding class token) is not a perfect square")
    d = shape[-1]
    if is_tensor:
        body = tokens[..., 1:, :]
        return ad.reshape(body, shape[:-2] + (g, g, d))
    arr = np.asarray(tokens)
    return arr[..., 1:, :].reshape(shape[:-2] + (g, g, d))


def flatten_feature_map(grid):
    """Inverse of ``rearrange_feature_map`` (class-token row not restored)."""
    is_tensor = isinstance(grid, Tensor)
    shape = grid.data.shape if is_tensor else np.asarray(grid).shape
    g, d = shape[-2], shape[-1]
    n = shape[-3] * shape[-2]
    if is_tensor:
        return ad.reshape(grid, shape[:-3] + (n, d))
    return np.asarray(grid).reshape(shape[:-3] + (n, d))


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype):
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, shape).astype(dtype)


class ConvDecoder:
    """Transposed-conv / ReLU stack with an exact-size upsample + sigmoid head."""

    def __init__(
        self,
        config: DecoderConfig,
        in_channels: int,
        in_h: int,
        in_w: int,
        params: ParameterStore,
        rng: np.random.Generator,
        dtype=np.float32,
        prefix: str = "decoder",
    ):
        config.spatial_plan(in_h, in_w)  # fail at build time on bad geometry
        self.config = config
        self.in_channels = in_channels
        self.kernels = []
        self.biases = []
        c = in_channels
        for i, blk in enumerate(config.blocks):
            shape = (blk.kernel, blk.kernel, c, blk.out_channels)
            self.kernels.append(params.add(Parameter(
                f"{prefix}.block{i}.kernel",
                _he_uniform(rng, shape, blk.kernel**2 * c, dtype))))
            self.biases.append(params.add(Parameter(
                f"{prefix}.block{i}.bias", np.zeros(blk.out_channels, dtype=dtype))))
            c = blk.out_channels
        self.head_kernel = params.add(Parameter(
            f"{prefix}.head.kernel",
            _he_uniform(rng, (1, 1, c, config.out_channels), c, dtype)))
        self.head_bias = params.add(Parameter(
            f"{prefix}.head.bias", np.zeros(config.out_channels, dtype=dtype)))

    def decode(self, grid) -> Tensor:
        """grid (B, g, g, C_in) or (g, g, C_in) -> image in [0, 1] at target size."""
        x = ad.as_tensor(grid)
        if x.data.shape[-1] != self.in_channels:
            raise ad.ShapeError(
                f"feature grid has {x.data.shape[-1]} channels, decoder expects {self.in_channels}"
            )
        for blk, kernel, bias in zip(self.config.blocks, self.kernels, self.biases):
            x = ad.transposed_conv2d(x, kernel, bias, stride=blk.stride, padding=blk.padding)
            x = ad.relu(x)
        x = ad.upsample_nearest(x, self.config.target_h, self.config.target_w)
        x = ad.conv2d(x, self.head_kernel, self.head_bias, stride=1, padding=0)
        return ad.sigmoid(x)


class VitAutoencoder:
    """Transformer encoder + convolutional decoder reconstruction model."""

    kind = "anovit"

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.encoder_config = encoder_config
        if decoder_config is None:
            decoder_config = DecoderConfig.default_for(
                encoder_config.grid_size, encoder_config.embed_dim,
                encoder_config.image_h, encoder_config.image_w, encoder_config.channels,
            )
        if decoder_config.target_h != encoder_config.image_h or \
                decoder_config.target_w != encoder_config.image_w or \
                decoder_config.out_channels != encoder_config.channels:
            raise ValueError(
                f"decoder target {(decoder_config.target_h, decoder_config.target_w, decoder_config.out_channels)} "
                f"does not match encoder image "
                f"{(encoder_config.image_h, encoder_config.image_w, encoder_config.channels)}"
            )
        self.decoder_config = decoder_config
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        self.encoder = ViTEncoder(encoder_config, self.params, rng, dtype=dtype)
        self.decoder = ConvDecoder(
            decoder_config, encoder_config.embed_dim,
            encoder_config.grid_size, encoder_config.grid_size,
            self.params, rng, dtype=dtype,
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c = self.encoder_config
        return (c.image_h, c.image_w, c.channels)

    def forward(self, images) -> Tensor:
        """Differentiable reconstruction; images (B, H, W, C) or (H, W, C)."""
        tokens = self.encoder.encode(images)
        grid = rearrange_feature_map(tokens)
        return self.decoder.decode(grid)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Forward pass without tape recording; returns a numpy array."""
        with ad.no_grad():
            out = self.forward(np.asarray(images, dtype=self.dtype))
        return out.data

    def config_dict(self) -> dict:
        return {
            "encoder": self.encoder_config.to_dict(),
            "decoder": self.decoder_config.to_dict(),
        }

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0, dtype=np.float32) -> "VitAutoencoder":
        return cls(
            EncoderConfig.from_dict(d["encoder"]),
            DecoderConfig.from_dict(d["decoder"]),
            seed=seed, dtype=dtype,
        )

    def param_count(self) -> int:
        return self.params.total_size()
