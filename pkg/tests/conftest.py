import numpy as np
import pytest

from anovit import EncoderConfig, SynthSpec, VitAutoencoder, generate_synth


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_encoder_cfg():
    # 8x8 image, 4 patches, 8-dim tokens: every test using this runs in ms
    return EncoderConfig(image_h=8, image_w=8, channels=1, patch_size=4,
                         embed_dim=8, heads=2, depth=1, mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_encoder_cfg):
    return VitAutoencoder(tiny_encoder_cfg, seed=5)


@pytest.fixture(scope="session")
def small_synth_split(tmp_path_factory):
    spec = SynthSpec(n_train=16, n_test_normal=6, n_test_anomalous=6, seed=7)
    return generate_synth(spec, tmp_path_factory.mktemp("synth"))
