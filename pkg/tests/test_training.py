import math

import numpy as np
import pandas as pd
import pytest

from lfxlms import training
from lfxlms.acoustics import ImpulseResponse, RoomSpec, simulate_rir
from lfxlms.anc import NoiseSource
from lfxlms.errors import ConfigError, DomainError, ShapeError, TrainingError
from lfxlms.neural import AutoencoderModel, decode, encode_with_tape
from lfxlms.training import (HISTORY_COLUMNS, BatchNoise, FilterDataset, MixupDraws, TrainingConfig,
                             _mixup_terms, _mmd_with_grad, batch_bounds, batch_objective,
                             build_training_config, fixed_point_ratio, generate_dataset, kl_loss,
                             mixup_losses, mmd_loss, normalization_scale, read_dataset, reconstruction_loss, train,
                             write_dataset)


def _dataset(filters, scale=1.0):
    filters = np.asarray(filters, dtype=np.float64)
    return FilterDataset(filters, np.zeros((filters.shape[0], 3)), scale)


# =============================================================================
# LOSSES
# =============================================================================

def test_kl_values(rng):
    assert kl_loss(np.zeros((1, 2)), np.zeros((1, 2))) == 0.0
    assert kl_loss(np.ones((1, 1)), np.zeros((1, 1))) == pytest.approx(0.5)
    for _ in range(10):
        assert kl_loss(rng.standard_normal((4, 3)), rng.standard_normal((4, 3))) >= 0.0


def test_mmd_of_identical_sets_is_near_zero(rng):
    z = rng.standard_normal((512, 2))
    value = mmd_loss(z, z.copy())
    assert -1e-6 <= value <= 3.0 / math.sqrt(512)


def test_mmd_two_point_masses():
    a = np.zeros((2, 1))
    b = np.full((2, 1), 0.1)
    expected = 2.0 - 2.0 * math.exp(-0.01 / 0.02)
    assert mmd_loss(a, b, kernel_variance=0.01) == pytest.approx(expected, rel=1e-12)


def test_mmd_symmetry_and_permutation(rng):
    a, b = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    assert mmd_loss(a, b) == pytest.approx(mmd_loss(b, a), rel=1e-12)
    perm = rng.permutation(6)
    assert mmd_loss(a[perm], b[perm]) == pytest.approx(mmd_loss(a, b), rel=1e-12)
    c = rng.standard_normal((9, 2))
    assert mmd_loss(a[rng.permutation(6)], c[rng.permutation(9)]) == pytest.approx(mmd_loss(a, c), rel=1e-12)


def test_mmd_needs_two_samples(rng):
    with pytest.raises(DomainError):
        mmd_loss(np.zeros((1, 2)), rng.standard_normal((5, 2)))
    with pytest.raises(ShapeError):
        mmd_loss(np.zeros((3, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("rows", [(5, 5), (4, 7)])
def test_mmd_gradient_matches_finite_differences(rng, rows):
    z = rng.standard_normal((rows[0], 2)) * 0.5
    prior = rng.standard_normal((rows[1], 2)) * 0.5
    _, grad = _mmd_with_grad(z, prior, 0.5)
    h = 1e-6
    numeric = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, down = z.copy(), z.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (mmd_loss(up, prior, 0.5) - mmd_loss(down, prior, 0.5)) / (2 * h)
    assert np.allclose(grad, numeric, rtol=1e-6, atol=1e-9)


def test_reconstruction_loss_of_zero_decoder(make_model, rng):
    model = make_model("plain", 8, 6, 3)
    model.decoder_l2.weight[:] = 0.0
    model.decoder_l2.bias[:] = 0.0
    batch = rng.standard_normal((5, 8))
    assert reconstruction_loss(model, batch) == pytest.approx(np.mean(np.sum(batch ** 2, axis=1)) / 8)


def test_mixup_endpoints_reduce_to_reconstruction(make_model, rng):
    model = make_model("plain", 8, 6, 3)
    batch = rng.standard_normal((4, 8))
    tape = encode_with_tape(model, batch)
    first, second = np.array([0, 2, 3]), np.array([1, 1, 0])

    loss_c, loss_z = _mixup_terms(model, batch, tape, MixupDraws(first, second, np.ones(3)), None)
    assert loss_c == pytest.approx(reconstruction_loss(model, batch[first]), rel=1e-12)
    assert loss_z < 1e-20

    loss_c, loss_z = _mixup_terms(model, batch, tape, MixupDraws(first, second, np.zeros(3)), None)
    assert loss_c == pytest.approx(reconstruction_loss(model, batch[second]), rel=1e-12)
    assert loss_z < 1e-20


def test_mixup_losses_are_seeded(make_model, rng):
    model = make_model("vae", 8, 6, 3)
    batch = rng.standard_normal((4, 8))
    assert mixup_losses(model, batch, 16, seed=3) == mixup_losses(model, batch, 16, seed=3)
    with pytest.raises(DomainError):
        mixup_losses(model, batch[:1], 16)


# =============================================================================
# OBJECTIVE GRADIENTS
# =============================================================================

def _numeric_gradients(model, batch, config, noise, h=1e-6):
    grads = {}
    for name, param in model.parameters().items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = batch_objective(model, batch, config, noise, with_grads=False)[0]["total"]
            param[idx] = saved - h
            down = batch_objective(model, batch, config, noise, with_grads=False)[0]["total"]
            param[idx] = saved
            numeric[idx] = (up - down) / (2 * h)
        grads[name] = numeric
    return grads


@pytest.mark.parametrize("variant", ["plain", "vae", "infovae"])
def test_objective_gradients_match_finite_differences(make_model, variant):
    rng = np.random.default_rng(21)
    model = make_model(variant, 4, 3, 2, seed=5)
    batch = rng.standard_normal((5, 4))
    config = TrainingConfig(mixup=True, mixup_count=6, kernel_variance=1.0, info_alpha=0.5)
    noise = BatchNoise(
        eta=rng.standard_normal((5, 2)) if variant != "plain" else None,
        prior=rng.standard_normal((5, 2)) if variant == "infovae" else None,
        mixup=MixupDraws.draw(rng, 5, 6),
    )
    losses, grads = batch_objective(model, batch, config, noise)
    assert losses["total"] > 0
    numeric = _numeric_gradients(model, batch, config, noise)
    for name, g in grads.items():
        scale = max(np.linalg.norm(numeric[name]), 1e-6)
        assert np.linalg.norm(g - numeric[name]) <= 1e-5 * scale, name


def test_objective_terms_by_variant(make_model, rng):
    batch = rng.standard_normal((4, 4))
    config = TrainingConfig()
    plain, _ = batch_objective(make_model("plain"), batch, config, BatchNoise(), with_grads=False)
    assert plain["kl"] == plain["mmd"] == 0.0
    assert plain["total"] == pytest.approx(plain["recon"])

    noise = BatchNoise(eta=rng.standard_normal((4, 2)), prior=rng.standard_normal((4, 2)))
    info, _ = batch_objective(make_model("infovae"), batch, config, noise, with_grads=False)
    # alpha = 1 leaves only the MMD term with weight lambda
    assert info["total"] == pytest.approx(info["recon"] + 1000.0 * info["mmd"])


def test_training_config_overrides():
    config = build_training_config({"epochs": 7}, mixup=True, learning_rate=None)
    assert config.epochs == 7 and config.mixup is True
    assert config.learning_rate == TrainingConfig().learning_rate
    assert config.loss_weights["mmd"] == 1000.0
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=0)


# =============================================================================
# TRAINING LOOP
# =============================================================================

def test_zero_epochs_leave_parameters_unchanged(make_model, rng):
    model = make_model("plain", 8, 6, 3)
    trained, history = train(model, _dataset(rng.standard_normal((4, 8))), TrainingConfig(epochs=0))
    assert list(history.columns) == HISTORY_COLUMNS
    assert len(history) == 0
    for name, param in model.parameters().items():
        assert np.array_equal(trained.parameters()[name], param)


def test_training_memorizes_a_repeated_filter():
    row = np.random.default_rng(0).standard_normal(8)
    row /= np.linalg.norm(row)
    model = AutoencoderModel.initialize(8, 16, 2, "plain", seed=0)
    config = TrainingConfig(batch_size=8, epochs=3000, learning_rate=3e-3, validation_stride=0, seed=0)
    trained, history = train(model, _dataset(np.tile(row, (8, 1))), config)
    assert len(history) == 3000
    assert np.all(np.isfinite(history["total"]))
    assert reconstruction_loss(trained, row[None, :]) < 1e-6
    assert trained.metadata["dataset_scale"] == 1.0


def test_batch_bounds_fold_a_lone_trailing_row():
    assert batch_bounds(65, 64) == [(0, 65)]
    assert batch_bounds(129, 64) == [(0, 64), (64, 129)]
    assert batch_bounds(66, 64) == [(0, 64), (64, 66)]
    assert batch_bounds(1, 64) == [(0, 1)]
    assert batch_bounds(3, 1) == [(0, 1), (1, 3)]


def test_infovae_trains_when_rows_leave_one_over():
    rng = np.random.default_rng(11)
    data = _dataset(rng.standard_normal((72, 4)))
    train_rows, _ = data.split(10)
    assert len(train_rows) % 64 == 1
    model = AutoencoderModel.initialize(4, 3, 2, "infovae", seed=0)
    trained, history = train(model, data, TrainingConfig(epochs=1))
    assert len(history) == 1
    assert np.all(np.isfinite(history[["total", "mmd"]].to_numpy()))
    assert history["mmd"].iloc[0] != 0.0


def test_single_row_infovae_batch_skips_mmd(make_model, rng):
    noise = BatchNoise(eta=rng.standard_normal((1, 2)), prior=rng.standard_normal((1, 2)))
    losses, grads = batch_objective(make_model("infovae"), rng.standard_normal((1, 4)), TrainingConfig(), noise)
    assert losses["mmd"] == 0.0
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    train(make_model("infovae"), _dataset(rng.standard_normal((3, 4))),
          TrainingConfig(batch_size=1, epochs=1, validation_stride=0))


def test_training_is_deterministic(make_model, rng):
    data = _dataset(rng.standard_normal((6, 4)))
    config = TrainingConfig(batch_size=3, epochs=5, mixup=True, mixup_count=4, validation_stride=3)
    runs = [train(make_model("vae"), data, config) for _ in range(2)]
    pd.testing.assert_frame_equal(runs[0][1], runs[1][1])
    assert runs[0][1]["validation"].notna().all()


def test_non_finite_loss_raises_training_error(make_model, rng, monkeypatch):
    def broken(model, batch, config, noise, with_grads=True):
        grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
        return {"total": float("nan")}, grads

    monkeypatch.setattr(training, "batch_objective", broken)
    with pytest.raises(TrainingError) as info:
        train(make_model(), _dataset(rng.standard_normal((4, 4))), TrainingConfig(epochs=2))
    assert info.value.epoch == 0
    assert info.value.batch == 0


def test_dataset_validation_and_split(rng):
    with pytest.raises(ShapeError):
        _dataset(np.ones((1, 4)))
    with pytest.raises(DomainError):
        _dataset(np.array([[np.nan, 0.0], [0.0, 0.0]]))
    data = _dataset(rng.standard_normal((20, 4)), scale=2.0)
    train_rows, val_rows = data.split(10)
    assert val_rows.tolist() == [9, 19]
    assert len(train_rows) == 18
    assert np.allclose(data.normalized(), data.filters * 2.0)
    assert normalization_scale(np.array([[3.0, 4.0], [0.0, 1.0]])) == pytest.approx(0.2)
    assert normalization_scale(np.zeros((2, 2))) == 1.0


def test_dataset_file(tmp_path, rng):
    data = FilterDataset(rng.standard_normal((3, 8)), rng.uniform(1, 2, (3, 3)), 0.5, metadata={"seed": 4})
    path = write_dataset(tmp_path / "dataset.bin", data)
    loaded = read_dataset(path)
    assert np.array_equal(loaded.filters, data.filters)
    assert np.allclose(loaded.positions, data.positions)
    assert loaded.scale == 0.5
    assert loaded.metadata["seed"] == 4


# =============================================================================
# DATASET GENERATION
# =============================================================================

def test_generated_filters_invert_primary_paths():
    room = RoomSpec(rir_length=256)
    segment = [[1.5, 1.0, 1.0], [3.0, 2.0, 2.0]]
    delta = ImpulseResponse.delta(256)
    data = generate_dataset(room, segment, 2, seed=3, secondary=delta)
    assert data.filters.shape == (2, 256)
    assert data.scale == pytest.approx(1.0 / np.max(np.linalg.norm(data.filters, axis=1)))
    for i, position in enumerate(data.positions):
        p = simulate_rir(room, position, [4.5, 3.0, 1.5]).taps
        assert np.linalg.norm(data.filters[i] + p) / np.linalg.norm(p) < 0.05
        ratio = fixed_point_ratio(p, delta.taps, delta.taps, data.filters[i], NoiseSource(seed=99), mu=5.0)
        assert ratio <= 1.05


def test_dataset_positions_must_be_farther_than_speaker():
    room = RoomSpec(rir_length=64)
    with pytest.raises(ConfigError):
        generate_dataset(room, [[4.0, 3.0, 1.5], [4.2, 3.0, 1.5]], 2)
    with pytest.raises(ConfigError):
        generate_dataset(room, [[-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], 2)
