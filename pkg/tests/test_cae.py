"""Baseline autoencoder tests: geometry, contracts, fair-comparison guard."""

import numpy as np
import pytest

from anovit import autodiff as ad
from anovit.autodiff import GeometryError
from anovit.cae import CaeConfig, ConvAutoencoder, ConvBlockSpec
from anovit.decoder import DecoderBlockSpec, DecoderConfig
from anovit.training import reconstruction_loss
from anovit.vit import EncoderConfig


def test_desk_shape_and_range(rng):
    model = ConvAutoencoder(CaeConfig.desk_default(), seed=0)
    image = rng.uniform(size=(32, 32, 1)).astype(np.float32)
    out = model.reconstruct(image)
    assert out.shape == (32, 32, 1)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_zero_parameters_output_half(rng):
    model = ConvAutoencoder(CaeConfig.desk_default(), seed=0)
    for p in model.params:
        p.data = np.zeros_like(p.data)
    out = model.reconstruct(rng.uniform(size=(32, 32, 1)).astype(np.float32))
    np.testing.assert_allclose(out, 0.5)


def test_latent_geometry():
    cfg = CaeConfig.desk_default()
    assert cfg.latent_hw == (2, 2)
    assert cfg.latent_channels == 64
    # encoder and decoder strides mirror each other back to the input extent
    plan = cfg.decoder_config().spatial_plan(*cfg.latent_hw)
    assert plan[-1] == (32, 32)


def test_two_block_gradient_check():
    cfg = CaeConfig(
        image_h=8, image_w=8, channels=1,
        encoder_blocks=(ConvBlockSpec(4), ConvBlockSpec(8)),
        decoder_blocks=(DecoderBlockSpec(4), DecoderBlockSpec(4)),
    )
    model = ConvAutoencoder(cfg, seed=1, dtype=np.float64)
    batch = np.random.default_rng(2).uniform(size=(1, 8, 8, 1))
    report = ad.grad_check(lambda: reconstruction_loss(batch, model),
                           model.params, tol=1e-5, max_samples_per_param=4, seed=0)
    assert report.passed, report.format()


def test_fair_comparison_guard_holds():
    cae_count = CaeConfig.desk_default().param_count()
    enc = EncoderConfig.desk_default()
    vit_count = enc.param_count() + DecoderConfig.default_for(
        enc.grid_size, enc.embed_dim, enc.image_h, enc.image_w, enc.channels,
    ).param_count(enc.embed_dim)
    ratio = max(cae_count, vit_count) / min(cae_count, vit_count)
    assert ratio <= 2.0


def test_param_count_formula_matches_store():
    cfg = CaeConfig.desk_default()
    model = ConvAutoencoder(cfg, seed=0)
    assert model.param_count() == cfg.param_count()


def test_scoring_interface_identical_to_main_model(small_synth_split):
    # evaluation runs unchanged against either model: same methods, same shapes
    from anovit.evaluation import evaluate_detection

    model = ConvAutoencoder(CaeConfig.desk_default(), seed=0)
    auroc_value, scores = evaluate_detection(model, small_synth_split, sigma=2.0)
    assert 0.0 <= auroc_value <= 1.0
    assert scores.shape == (small_synth_split.test.shape[0],)


def test_bad_geometry_rejected():
    with pytest.raises(GeometryError):
        CaeConfig(image_h=4, image_w=4, channels=1,
                  encoder_blocks=(ConvBlockSpec(4), ConvBlockSpec(8), ConvBlockSpec(8)),
                  decoder_blocks=(DecoderBlockSpec(4),))
    with pytest.raises(GeometryError):
        CaeConfig.default_for(3, 3, 1)


def test_wrong_image_shape_rejected(rng):
    model = ConvAutoencoder(CaeConfig.desk_default(), seed=0)
    with pytest.raises(ad.ShapeError):
        model.reconstruct(rng.uniform(size=(16, 16, 1)).astype(np.float32))


def test_config_dict_round_trip():
    cfg = CaeConfig.desk_default()
    model = ConvAutoencoder(cfg, seed=3)
    clone = ConvAutoencoder.from_config_dict(model.config_dict(), seed=3)
    for name in model.params.names():
        np.testing.assert_array_equal(clone.params[name].data, model.params[name].data)
