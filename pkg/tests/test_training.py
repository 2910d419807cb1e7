"""Loss, optimizer step, epoch loop, and checkpoint format tests."""

import numpy as np
import pytest

from anovit.autodiff import Tensor, as_tensor
from anovit.cae import CaeConfig, ConvAutoencoder, ConvBlockSpec
from anovit.decoder import DecoderBlockSpec, VitAutoencoder
from anovit.training import (
    Adam,
    CheckpointError,
    TrainConfig,
    TrainingError,
    fit,
    load_checkpoint,
    load_into,
    make_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    train_step,
)


class IdentityModel:
    kind = "identity"

    def forward(self, batch):
        return as_tensor(batch)


class ConstantModel:
    kind = "constant"

    def __init__(self, value):
        self.value = value

    def forward(self, batch):
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        return Tensor(np.full_like(arr, self.value))


def tiny_cae(dtype=np.float32, seed=0):
    cfg = CaeConfig(image_h=8, image_w=8, channels=1,
                    encoder_blocks=(ConvBlockSpec(4), ConvBlockSpec(8)),
                    decoder_blocks=(DecoderBlockSpec(4), DecoderBlockSpec(4)))
    return ConvAutoencoder(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# reconstruction loss
# ---------------------------------------------------------------------------


def test_loss_zero_for_perfect_reconstruction(rng):
    batch = rng.uniform(size=(3, 4, 4, 1)).astype(np.float32)
    assert float(reconstruction_loss(batch, IdentityModel()).data) == 0.0


def test_loss_closed_form_uniform_residual():
    batch = np.full((1, 2, 2, 1), 0.5, dtype=np.float32)
    loss = reconstruction_loss(batch, ConstantModel(0.0))
    assert float(loss.data) == pytest.approx(1.0)  # 4 pixels * 0.25


def test_loss_matches_loop_oracle(rng):
    batch = rng.uniform(size=(3, 4, 4, 2)).astype(np.float32)
    model = ConstantModel(0.25)
    got = float(reconstruction_loss(batch, model).data)
    acc = 0.0
    for i in range(batch.shape[0]):
        img_sum = 0.0
        for v in batch[i].ravel():
            img_sum += (float(v) - 0.25) ** 2
        acc += img_sum
    assert abs(got - acc / batch.shape[0]) < 1e-6


def test_loss_mean_per_element_reduction(rng):
    batch = rng.uniform(size=(2, 4, 4, 1)).astype(np.float32)
    per_image = float(reconstruction_loss(batch, ConstantModel(0.0)).data)
    per_element = float(reconstruction_loss(batch, ConstantModel(0.0),
                                            reduction="mean_per_element").data)
    assert per_element == pytest.approx(per_image / 16.0, rel=1e-6)


def test_loss_invariant_under_batch_permutation(rng):
    batch = rng.uniform(size=(6, 4, 4, 1)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(6)
    a = float(reconstruction_loss(batch, ConstantModel(0.3)).data)
    b = float(reconstruction_loss(batch[perm], ConstantModel(0.3)).data)
    assert abs(a - b) < 1e-6


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((0, 4, 4, 1), dtype=np.float32), IdentityModel())


# ---------------------------------------------------------------------------
# train_step / Adam
# ---------------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters_bit_identical(rng):
    model = tiny_cae()
    before = {p.name: p.data.copy() for p in model.params}
    optimizer = Adam(model.params, lr=0.0)
    batch = rng.uniform(size=(2, 8, 8, 1)).astype(np.float32)
    train_step(batch, model, optimizer)
    for p in model.params:
        assert np.array_equal(p.data, before[p.name]), p.name


def test_identical_seeds_identical_loss_traces(rng):
    batch = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    traces = []
    for _ in range(2):
        model = tiny_cae(seed=3)
        optimizer = Adam(model.params, lr=1e-3)
        traces.append([train_step(batch, model, optimizer) for _ in range(5)])
    assert traces[0] == traces[1]


def test_non_finite_loss_aborts_naming_parameter(rng):
    model = tiny_cae()
    model.params["encoder.block0.kernel"].data[0, 0, 0, 0] = np.inf
    optimizer = Adam(model.params, lr=1e-3)
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingError) as err:
            train_step(rng.uniform(size=(1, 8, 8, 1)).astype(np.float32), model, optimizer)
    assert "encoder.block0.kernel" in str(err.value)


def test_train_step_zeroes_stale_gradients(rng):
    model = tiny_cae()
    for p in model.params:
        p.grad = np.full_like(p.data, 7.0)  # stale garbage must not leak in
    optimizer = Adam(model.params, lr=0.0)
    batch = rng.uniform(size=(1, 8, 8, 1)).astype(np.float32)
    train_step(batch, model, optimizer)
    reference = tiny_cae()
    reference.params.zero_grad()
    loss = reconstruction_loss(batch, reference)
    loss.backward()
    for p in model.params:
        np.testing.assert_allclose(p.grad, reference.params[p.name].grad, rtol=1e-6)


def test_overfit_small_batch_quickly(rng):
    # scaled-down version of the overfit acceptance gate
    model = tiny_cae(seed=1)
    optimizer = Adam(model.params, lr=3e-3)
    batch = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    first = train_step(batch, model, optimizer)
    last = first
    for _ in range(150):
        last = train_step(batch, model, optimizer)
    assert last <= 0.2 * first


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def test_fit_zero_epochs_keeps_initial_parameters(rng):
    model = tiny_cae(seed=2)
    before = {p.name: p.data.copy() for p in model.params}
    images = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    ckpt = fit(images, model, TrainConfig(epochs=0, batch_size=2, seed=0))
    assert ckpt.manifest["epoch"] == 0 and ckpt.manifest["step"] == 0
    for name, arr in before.items():
        np.testing.assert_array_equal(ckpt.arrays[name], arr)


def test_fit_loss_trend_downward(rng):
    model = tiny_cae(seed=2)
    images = rng.uniform(0.4, 0.6, size=(8, 8, 8, 1)).astype(np.float32)
    ckpt = fit(images, model, TrainConfig(epochs=20, batch_size=4,
                                          learning_rate=1e-3, seed=0))
    hist = ckpt.manifest["loss_history"]
    assert np.median(hist[-10:]) < np.median(hist[:10])


def test_fit_resume_continues_step_counter(tmp_path, rng):
    images = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    cfg_half = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, seed=5)
    model = tiny_cae(seed=5)
    half = fit(images, model, cfg_half, out_dir=tmp_path / "ckpt")
    assert half.manifest["epoch"] == 2 and half.manifest["step"] == 4

    cfg_full = TrainConfig(epochs=5, batch_size=2, learning_rate=1e-3, seed=5)
    resumed_model = tiny_cae(seed=99)  # weights replaced by the checkpoint
    resumed = fit(images, resumed_model, cfg_full,
                  resume=load_checkpoint(tmp_path / "ckpt"))
    assert resumed.manifest["epoch"] == 5
    assert resumed.manifest["step"] == 10
    assert len(resumed.manifest["loss_history"]) == 5


def test_fit_augmented_run_is_deterministic(rng):
    images = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    cfg = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, seed=4, augment=True)
    results = []
    for _ in range(2):
        model = tiny_cae(seed=4)
        results.append(fit(images, model, cfg).manifest["loss_history"])
    assert results[0] == results[1]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_identity(tmp_path):
    model = tiny_cae(seed=7)
    ckpt = make_checkpoint(model, seed=7, epoch=3, step=12, loss_history=[1.0, 0.5],
                           config_digest="abc", train_config=TrainConfig())
    save_checkpoint(ckpt, tmp_path / "c")
    loaded = load_checkpoint(tmp_path / "c")
    assert loaded.manifest == ckpt.manifest
    for name in ckpt.arrays:
        np.testing.assert_array_equal(loaded.arrays[name], ckpt.arrays[name])
    restored = tiny_cae(seed=0)
    load_into(restored, loaded)
    for p in model.params:
        np.testing.assert_array_equal(restored.params[p.name].data, p.data)


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    model = tiny_cae(seed=7)
    ckpt = make_checkpoint(model, seed=7, epoch=1, step=2, loss_history=[0.25])
    save_checkpoint(ckpt, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    for rel in ["manifest.json"] + [f"params/{n}.bin" for n in ckpt.arrays]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_checkpoint_corrupted_blob_rejected(tmp_path):
    model = tiny_cae(seed=7)
    save_checkpoint(make_checkpoint(model, seed=7, epoch=0, step=0, loss_history=[]),
                    tmp_path / "c")
    blob = tmp_path / "c" / "params" / "encoder.block0.kernel.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "c")
    assert "encoder.block0.kernel" in str(err.value)


def test_checkpoint_manifest_missing_parameter_rejected(tmp_path):
    import json

    model = tiny_cae(seed=7)
    save_checkpoint(make_checkpoint(model, seed=7, epoch=0, step=0, loss_history=[]),
                    tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    manifest["params"] = manifest["params"][1:]
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    loaded = load_checkpoint(tmp_path / "c")
    with pytest.raises(CheckpointError):
        load_into(tiny_cae(seed=0), loaded)


def test_checkpoint_wrong_model_kind_rejected(tmp_path, tiny_encoder_cfg):
    model = tiny_cae(seed=7)
    ckpt = make_checkpoint(model, seed=7, epoch=0, step=0, loss_history=[])
    with pytest.raises(CheckpointError):
        load_into(VitAutoencoder(tiny_encoder_cfg, seed=0), ckpt)


def test_checkpoint_unsupported_version_rejected(tmp_path):
    model = tiny_cae(seed=7)
    save_checkpoint(make_checkpoint(model, seed=7, epoch=0, step=0, loss_history=[]),
                    tmp_path / "c")
    import json
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
