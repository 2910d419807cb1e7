"""Encoder tests: patching, embedding, attention oracles, block behavior."""

import numpy as np
import pytest

from anovit import autodiff as ad
from anovit.autodiff import ParameterStore, Tensor
from anovit.vit import (
    EncoderConfig,
    ViTEncoder,
    extract_patches,
    multi_head_attention,
    self_attention,
)


def build_encoder(cfg, seed=0, dtype=np.float32):
    store = ParameterStore()
    enc = ViTEncoder(cfg, store, np.random.default_rng(seed), dtype=dtype)
    return enc, store


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        EncoderConfig(image_h=30, image_w=32, channels=1, patch_size=8, embed_dim=64)
    with pytest.raises(ValueError):
        EncoderConfig(image_h=16, image_w=64, channels=1, patch_size=8, embed_dim=64)
    with pytest.raises(ValueError):
        EncoderConfig(image_h=32, image_w=32, channels=1, patch_size=8,
                      embed_dim=64, heads=5)
    with pytest.raises(ValueError):
        EncoderConfig(image_h=32, image_w=32, channels=1, patch_size=8,
                      embed_dim=64, heads=4, head_dim=8)
    with pytest.raises(ValueError):
        EncoderConfig(image_h=32, image_w=32, channels=1, patch_size=8,
                      embed_dim=64, depth=0)


def test_config_derives_head_dim():
    cfg = EncoderConfig.desk_default()
    assert cfg.head_dim == cfg.embed_dim // cfg.heads
    assert cfg.heads * cfg.head_dim == cfg.embed_dim


# ---------------------------------------------------------------------------
# extract_patches
# ---------------------------------------------------------------------------


def test_extract_patches_blocking_definition():
    image = np.arange(16.0).reshape(4, 4, 1)
    patches = extract_patches(image, 2)
    assert patches.shape == (4, 4)
    np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])


def test_extract_patches_224_geometry():
    patches = extract_patches(np.zeros((224, 224, 3), dtype=np.float32), 16)
    assert patches.shape == (196, 16 * 16 * 3)


def test_extract_patches_384_geometry():
    patches = extract_patches(np.zeros((384, 384, 3), dtype=np.float32), 16)
    assert patches.shape == (576, 768)


def test_extract_patches_rejects_indivisible():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((5, 5, 1)), 2)


def test_extract_patches_tensor_path_matches_numpy(rng):
    image = rng.uniform(size=(2, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(extract_patches(Tensor(image), 4).data,
                                  extract_patches(image, 4))


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def test_embed_zero_patches_zero_cls_gives_positions(tiny_encoder_cfg):
    enc, _ = build_encoder(tiny_encoder_cfg)
    enc.cls_token.data = np.zeros_like(enc.cls_token.data)
    tokens = enc.embed(np.zeros((tiny_encoder_cfg.num_patches, tiny_encoder_cfg.patch_dim),
                                dtype=np.float32))
    np.testing.assert_array_equal(tokens.data, enc.pos_embed.data)


def test_embed_shape_contract(tiny_encoder_cfg):
    enc, _ = build_encoder(tiny_encoder_cfg)
    patches = np.zeros((3, tiny_encoder_cfg.num_patches, tiny_encoder_cfg.patch_dim),
                       dtype=np.float32)
    assert enc.embed(patches).shape == (3, tiny_encoder_cfg.tokens, tiny_encoder_cfg.embed_dim)


def test_embed_identical_patches_identical_rows_without_positions(tiny_encoder_cfg, rng):
    enc, _ = build_encoder(tiny_encoder_cfg)
    enc.pos_embed.data = np.zeros_like(enc.pos_embed.data)
    patch = rng.uniform(size=tiny_encoder_cfg.patch_dim).astype(np.float32)
    patches = np.tile(patch, (tiny_encoder_cfg.num_patches, 1))
    tokens = enc.embed(patches).data
    for row in tokens[2:]:
        np.testing.assert_array_equal(row, tokens[1])


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_self_attention_zero_weights_uniform_attention(rng):
    tokens = Tensor(rng.normal(size=(5, 6)).astype(np.float32))
    out, attn = self_attention(tokens, Tensor(np.zeros((6, 6), dtype=np.float32)), 2)
    np.testing.assert_allclose(attn.data, 1.0 / 5.0, atol=1e-7)
    np.testing.assert_allclose(out.data, 0.0)


def attention_oracle(tokens, qkv, head_dim):
    """Direct 64-bit loop attention."""
    t = tokens.shape[0]
    q = tokens @ qkv[:, :head_dim]
    k = tokens @ qkv[:, head_dim:2 * head_dim]
    v = tokens @ qkv[:, 2 * head_dim:]
    out = np.zeros((t, head_dim))
    attn = np.zeros((t, t))
    for i in range(t):
        logits = np.array([q[i] @ k[j] / np.sqrt(head_dim) for j in range(t)])
        e = np.exp(logits - logits.max())
        attn[i] = e / e.sum()
        for j in range(t):
            out[i] += attn[i, j] * v[j]
    return out, attn


def test_self_attention_matches_loop_oracle(rng):
    tokens = rng.normal(size=(3, 2)).astype(np.float64)
    qkv = rng.normal(size=(2, 6)).astype(np.float64)
    out, attn = self_attention(Tensor(tokens), Tensor(qkv), 2)
    exp_out, exp_attn = attention_oracle(tokens, qkv, 2)
    np.testing.assert_allclose(out.data, exp_out, atol=1e-6)
    np.testing.assert_allclose(attn.data, exp_attn, atol=1e-6)


def test_attention_rows_are_stochastic(rng):
    tokens = Tensor(rng.normal(size=(2, 7, 8)).astype(np.float32))
    _, attn = self_attention(tokens, Tensor(rng.normal(size=(8, 12)).astype(np.float32)), 4)
    assert np.all(attn.data >= 0)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_multi_head_single_head_identity_projection_degenerates(rng):
    tokens = Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    qkv = Tensor(rng.normal(size=(6, 18)).astype(np.float32))
    sa_out, _ = self_attention(tokens, qkv, 6)
    msa_out, _ = multi_head_attention(tokens, [qkv], Tensor(np.eye(6, dtype=np.float32)))
    np.testing.assert_allclose(msa_out.data, sa_out.data, atol=1e-6)


def test_multi_head_matches_concat_then_project_oracle(rng):
    tokens = rng.normal(size=(4, 6))
    qkvs = [rng.normal(size=(6, 9)) for _ in range(2)]
    proj = rng.normal(size=(6, 6))
    out, attns = multi_head_attention(Tensor(tokens), [Tensor(w) for w in qkvs], Tensor(proj))
    heads = [attention_oracle(tokens, w, 3)[0] for w in qkvs]
    expected = np.concatenate(heads, axis=-1) @ proj
    np.testing.assert_allclose(out.data, expected, atol=1e-6)
    assert len(attns) == 2
    assert out.shape == (4, 6)


def test_multi_head_head_count_mismatch_rejected(rng):
    tokens = Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    qkv = Tensor(rng.normal(size=(6, 9)).astype(np.float32))
    with pytest.raises(ad.ShapeError):
        multi_head_attention(tokens, [qkv], Tensor(np.eye(6, dtype=np.float32)))


# ---------------------------------------------------------------------------
# transformer block and encode
# ---------------------------------------------------------------------------


def test_zero_block_is_identity(tiny_encoder_cfg, rng):
    enc, store = build_encoder(tiny_encoder_cfg)
    for p in store:
        p.data = np.zeros_like(p.data)  # incl. layer-norm gains
    tokens = Tensor(rng.normal(size=(5, tiny_encoder_cfg.embed_dim)).astype(np.float32))
    out = enc.transformer_block(tokens, 0)
    np.testing.assert_array_equal(out.data, tokens.data)


def test_block_preserves_shape(tiny_encoder_cfg, rng):
    enc, _ = build_encoder(tiny_encoder_cfg)
    tokens = Tensor(rng.normal(size=(2, tiny_encoder_cfg.tokens,
                                     tiny_encoder_cfg.embed_dim)).astype(np.float32))
    assert enc.transformer_block(tokens, 0).shape == tokens.shape


def test_block_gradient_check(tiny_encoder_cfg):
    enc, store = build_encoder(tiny_encoder_cfg, dtype=np.float32)
    tokens = np.random.default_rng(4).normal(size=(tiny_encoder_cfg.tokens,
                                                   tiny_encoder_cfg.embed_dim)).astype(np.float32)
    report = ad.grad_check(
        lambda: ad.tensor_sum(ad.square(enc.transformer_block(Tensor(tokens), 0))),
        store, tol=1e-3, max_samples_per_param=4, seed=2)
    assert report.passed, report.format()


def test_encode_full_scale_token_shape():
    cfg = EncoderConfig(image_h=224, image_w=224, channels=3, patch_size=16,
                        embed_dim=768, heads=8, depth=1)
    enc, _ = build_encoder(cfg)
    image = np.random.default_rng(0).uniform(size=(224, 224, 3)).astype(np.float32)
    with ad.no_grad():
        tokens = enc.encode(image)
    assert tokens.shape == (197, 768)


def test_encode_desk_shape():
    cfg = EncoderConfig(image_h=32, image_w=32, channels=1, patch_size=8,
                        embed_dim=32, heads=4, depth=2)
    enc, _ = build_encoder(cfg)
    with ad.no_grad():
        tokens = enc.encode(np.zeros((32, 32, 1), dtype=np.float32))
    assert tokens.shape == (17, 32)


def test_encode_deterministic(tiny_encoder_cfg, rng):
    image = rng.uniform(size=(8, 8, 1)).astype(np.float32)
    outs = []
    for _ in range(2):
        enc, _ = build_encoder(tiny_encoder_cfg, seed=11)
        with ad.no_grad():
            outs.append(enc.encode(image).data)
    assert np.array_equal(outs[0], outs[1])


def test_encode_rejects_wrong_image_shape(tiny_encoder_cfg):
    enc, _ = build_encoder(tiny_encoder_cfg)
    with pytest.raises(ad.ShapeError):
        enc.encode(np.zeros((16, 16, 1), dtype=np.float32))


def test_encode_permutation_covariant_without_positions(tiny_encoder_cfg, rng):
    # with positions zeroed, permuting input patches permutes token rows 1..N
    enc, _ = build_encoder(tiny_encoder_cfg, seed=3)
    enc.pos_embed.data = np.zeros_like(enc.pos_embed.data)
    image = rng.uniform(size=(8, 8, 1)).astype(np.float32)
    perm = np.array([2, 0, 3, 1])

    patches = extract_patches(image, 4)
    permuted_patches = patches[perm]
    with ad.no_grad():
        base = enc.encode(image).data
        tokens = enc.embed(permuted_patches)
        for i in range(tiny_encoder_cfg.depth):
            tokens = enc.transformer_block(tokens, i)
        permuted = ad.layer_norm(tokens, enc.final_gamma, enc.final_beta).data
    np.testing.assert_allclose(permuted[0], base[0], atol=1e-5)
    np.testing.assert_allclose(permuted[1:], base[1:][perm], atol=1e-5)


def test_attention_shift_invariance_of_logits(tiny_encoder_cfg, rng):
    # adding a constant to all pre-softmax logits leaves attention unchanged
    logits = rng.normal(size=(5, 5)).astype(np.float64)
    a = ad.softmax(Tensor(logits), axis=-1).data
    b = ad.softmax(Tensor(logits + 13.25), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)
