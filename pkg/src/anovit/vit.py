"""Vision-transformer encoder: patching, token embedding, attention blocks.

The encoder turns an image into ``N = H*W / P^2`` patch tokens plus a leading
class token, adds a learned positional embedding, and runs the sequence
through a stack of pre-norm transformer blocks (multi-head self-attention +
GELU MLP, residual connections, final layer norm). All ``N + 1`` output tokens
are returned; there is no classification head.

Token layout is class-token-first: row 0 is the class token, rows ``1..N``
follow the patches in row-major order over the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ParameterStore, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and width settings for the transformer encoder."""

    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    head_dim: int | None = None

    def __post_init__(self):
        p = self.patch_size
        if self.image_h % p or self.image_w % p:
            raise ValueError(
                f"image ({self.image_h}, {self.image_w}) not divisible by patch size {p}"
            )
        if self.image_h // p != self.image_w // p:
            # the decoder rearranges tokens onto a sqrt(N) x sqrt(N) grid, which
            # is position-faithful only for square patch grids
            raise ValueError(
                f"patch grid ({self.image_h // p} x {self.image_w // p}) must be square"
            )
        n = self.num_patches
        if int(np.sqrt(n)) ** 2 != n:
            raise ValueError(f"patch count {n} is not a perfect square")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.head_dim is None:
            if self.embed_dim % self.heads:
                raise ValueError(
                    f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
                )
            object.__setattr__(self, "head_dim", self.embed_dim // self.heads)
        elif self.heads * self.head_dim != self.embed_dim:
            raise ValueError(
                f"heads * head_dim = {self.heads * self.head_dim} != embed_dim {self.embed_dim}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch_size**2)

    @property
    def grid_size(self) -> int:
        return self.image_h // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @classmethod
    def desk_default(cls) -> "EncoderConfig":
        """Small config trainable on a CPU in seconds: 32x32x1, 16 patches."""
        return cls(image_h=32, image_w=32, channels=1, patch_size=8,
                   embed_dim=64, heads=4, depth=4, mlp_ratio=4)

    @classmethod
    def full_default(cls) -> "EncoderConfig":
        """Full-scale config (384x384x3, 16px patches, 768-d tokens, 8 heads)."""
        return cls(image_h=384, image_w=384, channels=3, patch_size=16,
                   embed_dim=768, heads=8, depth=12, mlp_ratio=4)

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h, "image_w": self.image_w, "channels": self.channels,
            "patch_size": self.patch_size, "embed_dim": self.embed_dim,
            "heads": self.heads, "depth": self.depth, "mlp_ratio": self.mlp_ratio,
            "head_dim": self.head_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def param_count(self) -> int:
        d, k, dh, r = self.embed_dim, self.heads, self.head_dim, self.mlp_ratio
        per_block = 4 * d + k * (d * 3 * dh) + (k * dh) * d \
            + (d * r * d + r * d) + (r * d * d + d)
        return self.patch_dim * d + d + self.tokens * d + self.depth * per_block + 2 * d


def extract_patches(image, patch_size: int):
    """Cut an image into flattened ``P x P`` blocks, row-major over the grid.

    Accepts ``(H, W, C)`` / ``(B, H, W, C)`` numpy arrays or Tensors and
    returns ``(N, P*P*C)`` (or batched). Each patch flattens its block in
    row-major order with the channel axis fastest.
    """
    is_tensor = isinstance(image, Tensor)
    arr = image.data if is_tensor else np.asarray(image)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
        image = ad.reshape(image, arr.shape) if is_tensor else arr
    if arr.ndim != 4:
        raise ad.ShapeError(f"expected (H, W, C) or (B, H, W, C), got shape {arr.shape}")
    b, h, w, c = arr.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image extents ({h}, {w}) not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if is_tensor:
        x = ad.reshape(image, (b, gh, p, gw, p, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        out = ad.reshape(x, (b, gh * gw, p * p * c))
        return ad.reshape(out, out.data.shape[1:]) if squeeze else out
    x = arr.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = x.reshape(b, gh * gw, p * p * c)
    return out[0] if squeeze else out


def self_attention(tokens: Tensor, qkv_weight: Tensor, head_dim: int) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product self-attention.

    tokens (..., T, D), qkv_weight (D, 3*head_dim). Returns the attended
    values (..., T, head_dim) and the row-stochastic attention weights
    (..., T, T).
    """
    if qkv_weight.data.shape[-1] != 3 * head_dim:
        raise ad.ShapeError(
            f"qkv weight shape {qkv_weight.shape} does not provide 3 x head_dim={head_dim}"
        )
    qkv = ad.matmul(tokens, qkv_weight)
    q = qkv[..., :head_dim]
    k = qkv[..., head_dim:2 * head_dim]
    v = qkv[..., 2 * head_dim:]
    scores = ad.mul(ad.matmul(q, ad.swap_last_axes(k)), 1.0 / float(np.sqrt(head_dim)))
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, v), attn


def multi_head_attention(
    tokens: Tensor,
    qkv_weights: Sequence[Tensor],
    out_proj: Tensor,
) -> tuple[Tensor, list[Tensor]]:
    """Concatenate per-head attention outputs and project back to embed_dim."""
    head_dim = qkv_weights[0].data.shape[-1] // 3
    if out_proj.data.shape[0] != len(qkv_weights) * head_dim:
        raise ad.ShapeError(
            f"output projection shape {out_proj.shape} does not match "
            f"{len(qkv_weights)} heads x head_dim={head_dim}"
        )
    outs = []
    attns = []
    for w in qkv_weights:
        o, a = self_attention(tokens, w, head_dim)
        outs.append(o)
        attns.append(a)
    merged = ad.concat(outs, axis=-1)
    return ad.matmul(merged, out_proj), attns


class ViTEncoder:
    """Transformer encoder over patch tokens; parameters live in a shared store."""

    def __init__(
        self,
        config: EncoderConfig,
        params: ParameterStore,
        rng: np.random.Generator,
        dtype=np.float32,
        prefix: str = "encoder",
    ):
        self.config = config
        self.params = params
        self.prefix = prefix
        c = config

        def normal(name, shape, std=0.02):
            return params.add(Parameter(f"{prefix}.{name}",
                                        (rng.normal(0.0, std, shape)).astype(dtype)))

        def const(name, shape, value):
            return params.add(Parameter(f"{prefix}.{name}",
                                        np.full(shape, value, dtype=dtype)))

        self.patch_proj = normal("patch_proj", (c.patch_dim, c.embed_dim))
        self.cls_token = normal("cls_token", (1, 1, c.embed_dim))
        self.pos_embed = normal("pos_embed", (c.tokens, c.embed_dim))
        self.blocks = []
        for i in range(c.depth):
            blk = {
                "ln1_gamma": const(f"block{i}.ln1.gamma", (c.embed_dim,), 1.0),
                "ln1_beta": const(f"block{i}.ln1.beta", (c.embed_dim,), 0.0),
                "qkv": [normal(f"block{i}.attn.head{h}.qkv", (c.embed_dim, 3 * c.head_dim))
                        for h in range(c.heads)],
                "proj": normal(f"block{i}.attn.proj", (c.heads * c.head_dim, c.embed_dim)),
                "ln2_gamma": const(f"block{i}.ln2.gamma", (c.embed_dim,), 1.0),
                "ln2_beta": const(f"block{i}.ln2.beta", (c.embed_dim,), 0.0),
                "fc1_w": normal(f"block{i}.mlp.fc1.weight", (c.embed_dim, c.mlp_ratio * c.embed_dim)),
                "fc1_b": const(f"block{i}.mlp.fc1.bias", (c.mlp_ratio * c.embed_dim,), 0.0),
                "fc2_w": normal(f"block{i}.mlp.fc2.weight", (c.mlp_ratio * c.embed_dim, c.embed_dim)),
                "fc2_b": const(f"block{i}.mlp.fc2.bias", (c.embed_dim,), 0.0),
            }
            self.blocks.append(blk)
        self.final_gamma = const("final_ln.gamma", (c.embed_dim,), 1.0)
        self.final_beta = const("final_ln.beta", (c.embed_dim,), 0.0)

    def embed(self, patches) -> Tensor:
        """Project flattened patches, prepend the class token, add positions.

        patches (B, N, P*P*C) or (N, P*P*C) -> tokens (B, N+1, D) / (N+1, D).
        """
        patches = ad.as_tensor(patches)
        if patches.data.shape[-1] != self.config.patch_dim:
            raise ad.ShapeError(
                f"patch length {patches.data.shape[-1]} != P^2*C = {self.config.patch_dim}"
            )
        squeeze = patches.ndim == 2
        if squeeze:
            patches = ad.reshape(patches, (1,) + patches.data.shape)
        b = patches.data.shape[0]
        projected = ad.matmul(patches, self.patch_proj)
        cls = ad.broadcast_to(self.cls_token, (b, 1, self.config.embed_dim))
        tokens = ad.add(ad.concat([cls, projected], axis=1), self.pos_embed)
        return ad.reshape(tokens, tokens.data.shape[1:]) if squeeze else tokens

    def transformer_block(self, tokens: Tensor, index: int) -> Tensor:
        """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""
        blk = self.blocks[index]
        h = ad.layer_norm(tokens, blk["ln1_gamma"], blk["ln1_beta"])
        attn_out, _ = multi_head_attention(h, blk["qkv"], blk["proj"])
        tokens = ad.add(tokens, attn_out)
        h = ad.layer_norm(tokens, blk["ln2_gamma"], blk["ln2_beta"])
        m = ad.linear(h, blk["fc1_w"], blk["fc1_b"])
        m = ad.gelu(m)
        m = ad.linear(m, blk["fc2_w"], blk["fc2_b"])
        return ad.add(tokens, m)

    def encode(self, images) -> Tensor:
        """Full encoder pass: patches -> embedding -> blocks -> final LN.

        images (B, H, W, C) or (H, W, C); returns all N+1 tokens per image.
        """
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        c = self.config
        if arr.shape[-3:] != (c.image_h, c.image_w, c.channels):
            raise ad.ShapeError(
                f"image shape {arr.shape} does not match config "
                f"({c.image_h}, {c.image_w}, {c.channels})"
            )
        patches = extract_patches(images if isinstance(images, Tensor) else arr, c.patch_size)
        tokens = self.embed(patches)
        for i in range(c.depth):
            tokens = self.transformer_block(tokens, i)
        return ad.layer_norm(tokens, self.final_gamma, self.final_beta)
