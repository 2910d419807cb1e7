"""Convolutional-autoencoder baseline scored identically to the main model.

Strided conv + ReLU encoder down to a small spatial latent (no fully
connected bottleneck), mirrored transposed-conv decoder with the same
upsample + 1x1 conv + sigmoid head as the main decoder. The desk default is
a compact stand-in sized to stay within 2x the desk transformer model's
parameter count so comparisons are fair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GeometryError, Parameter, ParameterStore, Tensor
from .decoder import ConvDecoder, DecoderBlockSpec, DecoderConfig, _he_uniform
from .vit import EncoderConfig


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def out_extent(self, extent: int) -> int:
        return (extent + 2 * self.padding - self.kernel) // self.stride + 1

    def to_dict(self) -> dict:
        return {"out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True)
class CaeConfig:
    """Encoder block stack, implied spatial latent, mirrored decoder stack."""

    image_h: int
    image_w: int
    channels: int
    encoder_blocks: tuple[ConvBlockSpec, ...]
    decoder_blocks: tuple[DecoderBlockSpec, ...]

    def __post_init__(self):
        h, w = self.image_h, self.image_w
        for i, blk in enumerate(self.encoder_blocks):
            h, w = blk.out_extent(h), blk.out_extent(w)
            if h < 1 or w < 1:
                raise GeometryError(f"encoder block {i} produces nonpositive extent ({h}, {w})")
        # decoder geometry (incl. "reaches <= image size") validated here too
        self.decoder_config().spatial_plan(h, w)

    @property
    def latent_hw(self) -> tuple[int, int]:
        h, w = self.image_h, self.image_w
        for blk in self.encoder_blocks:
            h, w = blk.out_extent(h), blk.out_extent(w)
        return h, w

    @property
    def latent_channels(self) -> int:
        return self.encoder_blocks[-1].out_channels

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.decoder_blocks, self.image_h, self.image_w, self.channels)

    @classmethod
    def default_for(cls, image_h: int, image_w: int, channels: int) -> "CaeConfig":
        """Four stride-2 conv blocks to a small latent, mirrored decoder."""
        widths = [16, 32, 48, 64]
        n = 0
        extent = min(image_h, image_w)
        while n < 4 and extent % 2 == 0 and extent // 2 >= 2:
            extent //= 2
            n += 1
        if n == 0:
            raise GeometryError(f"image ({image_h}, {image_w}) too small for a strided autoencoder")
        enc = tuple(ConvBlockSpec(widths[i]) for i in range(n))
        dec_widths = [widths[i] for i in range(n - 2, -1, -1)] + [widths[0]]
        dec = tuple(DecoderBlockSpec(c) for c in dec_widths[:n])
        return cls(image_h, image_w, channels, enc, dec)

    @classmethod
    def desk_default(cls) -> "CaeConfig":
        """32x32x1 default, guarded to stay within 2x the desk transformer size."""
        cfg = cls.default_for(32, 32, 1)
        reference = EncoderConfig.desk_default()
        ref_count = reference.param_count() + DecoderConfig.default_for(
            reference.grid_size, reference.embed_dim,
            reference.image_h, reference.image_w, reference.channels,
        ).param_count(reference.embed_dim)
        own = cfg.param_count()
        ratio = max(own, ref_count) / min(own, ref_count)
        if ratio > 2.0:
            raise ValueError(
                f"fair-comparison guard: desk CAE has {own} parameters vs "
                f"{ref_count} for the desk transformer model (ratio {ratio:.2f} > 2)"
            )
        return cfg

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h, "image_w": self.image_w, "channels": self.channels,
            "encoder_blocks": [b.to_dict() for b in self.encoder_blocks],
            "decoder_blocks": [b.to_dict() for b in self.decoder_blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaeConfig":
        return cls(
            d["image_h"], d["image_w"], d["channels"],
            tuple(ConvBlockSpec(**b) for b in d["encoder_blocks"]),
            tuple(DecoderBlockSpec(**b) for b in d["decoder_blocks"]),
        )

    def param_count(self) -> int:
        total = 0
        c = self.channels
        for blk in self.encoder_blocks:
            total += blk.kernel**2 * c * blk.out_channels + blk.out_channels
            c = blk.out_channels
        return total + self.decoder_config().param_count(c)


class ConvAutoencoder:
    """Strided-conv encoder + transposed-conv decoder, sigmoid output in [0, 1]."""

    kind = "cae"

    def __init__(self, config: CaeConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        self.enc_kernels = []
        self.enc_biases = []
        c = config.channels
        for i, blk in enumerate(config.encoder_blocks):
            shape = (blk.kernel, blk.kernel, c, blk.out_channels)
            self.enc_kernels.append(self.params.add(Parameter(
                f"encoder.block{i}.kernel",
                _he_uniform(rng, shape, blk.kernel**2 * c, dtype))))
            self.enc_biases.append(self.params.add(Parameter(
                f"encoder.block{i}.bias", np.zeros(blk.out_channels, dtype=dtype))))
            c = blk.out_channels
        lat_h, lat_w = config.latent_hw
        self.decoder = ConvDecoder(
            config.decoder_config(), c, lat_h, lat_w, self.params, rng, dtype=dtype,
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.config.image_h, self.config.image_w, self.config.channels)

    def encode(self, images) -> Tensor:
        x = ad.as_tensor(images)
        if x.data.shape[-3:] != self.image_shape:
            raise ad.ShapeError(
                f"image shape {x.data.shape} does not match config {self.image_shape}"
            )
        for blk, kernel, bias in zip(self.config.encoder_blocks, self.enc_kernels, self.enc_biases):
            x = ad.conv2d(x, kernel, bias, stride=blk.stride, padding=blk.padding)
            x = ad.relu(x)
        return x

    def forward(self, images) -> Tensor:
        return self.decoder.decode(self.encode(images))

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self.forward(np.asarray(images, dtype=self.dtype))
        return out.data

    def config_dict(self) -> dict:
        return {"cae": self.config.to_dict()}

    @classmethod
    def from_config_dict(cls, d: dict, seed: int = 0, dtype=np.float32) -> "ConvAutoencoder":
        return cls(CaeConfig.from_dict(d["cae"]), seed=seed, dtype=dtype)

    def param_count(self) -> int:
        return self.params.total_size()
