import json

import numpy as np
import pytest

from conftest import LinearDecoder
from lfxlms.errors import ContainerError, ShapeError, UsageError
from lfxlms.neural import (PARAMETER_ORDER, AutoencoderModel, DenseLayer, LossAdjoint,
                           Reparameterization, decode, decode_with_tape, decoder_jvp, decoder_vjp,
                           encode, encode_with_tape, irfft_concat, irfft_concat_adjoint, layernorm,
                           layernorm_backward, load_model, parameter_gradients, rfft_concat,
                           rfft_concat_adjoint, save_model, silu, spectral_size)


def _dft(w):
    length = w.size
    k = np.arange(length // 2 + 1)[:, None]
    n = np.arange(length)[None, :]
    spectrum = (np.exp(-2j * np.pi * k * n / length) * w[None, :]).sum(axis=1)
    return np.concatenate((spectrum.real, spectrum.imag))


def _layernorm_reference(v, eps=1e-5):
    centered = v - v.mean()
    return centered / np.sqrt(max(np.mean(centered ** 2), eps))


def _silu_reference(v):
    return v / (1.0 + np.exp(-v))


# =============================================================================
# SPECTRAL MAPS
# =============================================================================

def test_rfft_of_delta_is_flat():
    w = np.zeros(8)
    w[0] = 1.0
    s = rfft_concat(w)
    assert s.size == spectral_size(8) == 10
    assert np.allclose(s[:5], 1.0)
    assert np.allclose(s[5:], 0.0)


@pytest.mark.parametrize("length", [4, 8, 16])
def test_rfft_matches_direct_dft_and_inverts(rng, length):
    w = rng.standard_normal(length)
    assert np.allclose(rfft_concat(w), _dft(w), atol=1e-12)
    assert np.allclose(irfft_concat(rfft_concat(w)), w, atol=1e-12)


def test_odd_filter_length_is_rejected():
    with pytest.raises(ShapeError):
        rfft_concat(np.ones(7))
    with pytest.raises(ShapeError):
        AutoencoderModel.initialize(7, 4, 2)


@pytest.mark.parametrize("length", [4, 10])
def test_spectral_adjoints_satisfy_inner_product_identity(rng, length):
    w = rng.standard_normal(length)
    s = rng.standard_normal(spectral_size(length))
    assert np.dot(rfft_concat(w), s) == pytest.approx(np.dot(w, rfft_concat_adjoint(s)), abs=1e-12)
    assert np.dot(irfft_concat(s), w) == pytest.approx(np.dot(s, irfft_concat_adjoint(w)), abs=1e-12)


# =============================================================================
# ACTIVATIONS
# =============================================================================

def test_silu_values():
    assert silu(np.array(0.0)) == 0.0
    assert silu(np.array(1.0)) == pytest.approx(0.7310585786300049)
    assert silu(np.array(-50.0)) == pytest.approx(0.0, abs=1e-18)


def test_layernorm_standardizes_rows(rng):
    v = rng.standard_normal((3, 12)) * 5.0 + 2.0
    out, _ = layernorm(v)
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-6)
    constant, cache = layernorm(np.full((1, 6), 3.0))
    assert np.array_equal(constant, np.zeros((1, 6)))
    assert cache.floored.all()


def test_layernorm_backward_matches_finite_differences(rng):
    v = rng.standard_normal(7)
    g = rng.standard_normal(7)
    _, cache = layernorm(v[None, :])
    analytic = layernorm_backward(g[None, :], cache)[0]
    h = 1e-6
    numeric = np.array([
        (np.dot(g, layernorm(v + h * e)[0]) - np.dot(g, layernorm(v - h * e)[0])) / (2 * h)
        for e in np.eye(7)
    ])
    assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


# =============================================================================
# FORWARD PASSES
# =============================================================================

def test_zero_weights_propagate_biases(rng):
    model = AutoencoderModel.initialize(4, 3, 2, seed=1)
    for layer in model.layers():
        layer.weight[:] = 0.0
    b1, b2 = model.encoder_l1.bias, model.encoder_l2.bias
    expected = _silu_reference(_layernorm_reference(b1)) @ model.encoder_l2.weight.T + b2
    assert np.allclose(encode(model, rng.standard_normal(4)), expected)
    assert np.allclose(encode(model, rng.standard_normal(4)), b2)


def test_all_zero_decoder_emits_zero_filter():
    model = AutoencoderModel.initialize(8, 5, 3, seed=2)
    model.decoder_l2.weight[:] = 0.0
    model.decoder_l2.bias[:] = 0.0
    assert np.array_equal(decode(model, np.ones(3)), np.zeros(8))


def test_forward_pass_matches_hand_computation(rng):
    model = AutoencoderModel.initialize(4, 3, 2, seed=3)
    w = rng.standard_normal(4)
    s = _dft(w)
    hidden = _silu_reference(_layernorm_reference(model.encoder_l1.weight @ s + model.encoder_l1.bias))
    z = model.encoder_l2.weight @ hidden + model.encoder_l2.bias
    assert np.allclose(encode(model, w), z, atol=1e-12)

    hidden = _silu_reference(_layernorm_reference(model.decoder_l1.weight @ z + model.decoder_l1.bias))
    spec = model.decoder_l2.weight @ hidden + model.decoder_l2.bias
    spectrum = spec[:3] + 1j * spec[3:]
    expected = np.fft.irfft(spectrum, n=4)
    assert np.allclose(decode(model, z), expected, atol=1e-12)


def test_variational_encoder_returns_two_heads(make_model, rng):
    model = make_model("vae", 8, 6, 3)
    assert model.head_dim == 6
    mean, logvar = encode(model, rng.standard_normal(8))
    assert mean.shape == logvar.shape == (3,)
    assert np.array_equal(model.encode_mean(np.zeros(8)), encode(model, np.zeros(8))[0])


def test_batched_and_single_passes_agree(make_model, rng):
    model = make_model("plain", 8, 6, 3)
    batch = rng.standard_normal((5, 8))
    z = encode(model, batch)
    for i in range(5):
        assert np.allclose(z[i], encode(model, batch[i]), atol=1e-13)
        assert np.allclose(decode(model, z)[i], decode(model, z[i]), atol=1e-13)
    with pytest.raises(ShapeError):
        encode(model, np.ones(6))
    with pytest.raises(ShapeError):
        decode(model, np.ones(4))


def test_initialization_is_seeded():
    a = AutoencoderModel.initialize(8, 6, 3, seed=5)
    b = AutoencoderModel.initialize(8, 6, 3, seed=5)
    c = AutoencoderModel.initialize(8, 6, 3, seed=6)
    for name in PARAMETER_ORDER:
        assert np.array_equal(a.parameters()[name], b.parameters()[name])
    assert not np.array_equal(a.encoder_l1.weight, c.encoder_l1.weight)
    bound = np.sqrt(1.0 / spectral_size(8))
    assert np.all(np.abs(a.encoder_l1.weight) <= bound)


def test_inconsistent_layer_shapes_are_rejected():
    model = AutoencoderModel.initialize(4, 3, 2)
    with pytest.raises(ShapeError):
        AutoencoderModel(model.encoder_l1, model.encoder_l2, model.decoder_l1,
                         DenseLayer.zeros(3, 5), filter_len=4, hidden_dim=3, latent_dim=2)


# =============================================================================
# DECODER DERIVATIVES
# =============================================================================

def _finite_difference_vjp(model, z, v, h=1e-5):
    return np.array([
        np.dot(decode(model, z + h * e) - decode(model, z - h * e), v) / (2 * h)
        for e in np.eye(z.size)
    ])


def test_vjp_matches_finite_differences():
    worst = 0.0
    for seed in range(100):
        model = AutoencoderModel.initialize(8, 6, 3, seed=seed)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(3)
        v = rng.standard_normal(8)
        analytic = decoder_vjp(model, z, v)
        numeric = _finite_difference_vjp(model, z, v)
        worst = max(worst, np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic))
    assert worst <= 1e-5


def test_jvp_matches_finite_differences(make_model, rng):
    model = make_model("plain", 8, 6, 3, seed=4)
    z, u = rng.standard_normal(3), rng.standard_normal(3)
    h = 1e-6
    numeric = (decode(model, z + h * u) - decode(model, z - h * u)) / (2 * h)
    analytic = decoder_jvp(model, z, u)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-6


def test_vjp_and_jvp_are_dual(make_model, rng):
    for seed in range(10):
        model = make_model("plain", 8, 6, 3, seed=seed)
        z, u, v = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(8)
        assert np.dot(v, decoder_jvp(model, z, u)) == pytest.approx(
            np.dot(decoder_vjp(model, z, v), u), abs=1e-10)


def test_vjp_is_linear_in_cotangent(make_model, rng):
    model = make_model("infovae", 8, 6, 3)
    z, v1, v2 = rng.standard_normal(3), rng.standard_normal(8), rng.standard_normal(8)
    combined = decoder_vjp(model, z, 2.0 * v1 - 0.5 * v2)
    separate = 2.0 * decoder_vjp(model, z, v1) - 0.5 * decoder_vjp(model, z, v2)
    assert np.allclose(combined, separate, atol=1e-10)


def test_batched_vjp_rows_match_single_calls(make_model, rng):
    model = make_model("plain", 8, 6, 3)
    z = rng.standard_normal(3)
    v = rng.standard_normal((4, 8))
    batched = decoder_vjp(model, z, v)
    assert batched.shape == (4, 3)
    for i in range(4):
        assert np.allclose(batched[i], decoder_vjp(model, z, v[i]), atol=1e-12)
    with pytest.raises(ShapeError):
        decoder_vjp(model, np.ones(2), v[0])


def test_linear_decoder_derivatives(rng):
    a = rng.standard_normal((6, 2))
    decoder = LinearDecoder(a)
    z, v, u = rng.standard_normal(2), rng.standard_normal(6), rng.standard_normal(2)
    assert np.allclose(decoder.decode(z), a @ z)
    assert np.allclose(decoder.vjp(z, v), a.T @ v)
    assert np.allclose(decoder.jvp(z, u), a @ u)
    assert np.allclose(decoder.encode_mean(a @ z), z)
    assert np.allclose(LinearDecoder(a, gain=2.0).decode(z), 2.0 * a @ z)


# =============================================================================
# PARAMETER GRADIENTS
# =============================================================================

def _reconstruction_probe(model, batch, c):
    """sum(c * D(E(w))) through the mean head"""
    return float(np.sum(c * decode(model, model.encode_mean(batch))))


def test_parameter_gradients_match_finite_differences(make_model, rng):
    model = make_model("plain", 4, 3, 2, seed=7)
    batch = rng.standard_normal((3, 4))
    c = rng.standard_normal((3, 4))

    tape = encode_with_tape(model, batch)
    _, dec_tape = decode_with_tape(model, tape.head, Reparameterization(tape))
    adjoint = LossAdjoint()
    adjoint.add_decoder(dec_tape, c)
    grads = parameter_gradients(model, adjoint)

    h = 1e-6
    for name, param in model.parameters().items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = _reconstruction_probe(model, batch, c)
            param[idx] = saved - h
            down = _reconstruction_probe(model, batch, c)
            param[idx] = saved
            numeric[idx] = (up - down) / (2 * h)
        assert np.linalg.norm(grads[name] - numeric) <= 1e-5 * max(np.linalg.norm(numeric), 1e-8), name


def test_parameter_gradients_need_a_tape(make_model):
    model = make_model()
    with pytest.raises(UsageError):
        parameter_gradients(model, None)
    with pytest.raises(UsageError):
        parameter_gradients(model, LossAdjoint())


def test_zero_cotangent_gives_zero_gradients(make_model, rng):
    model = make_model("vae", 4, 3, 2)
    tape = encode_with_tape(model, rng.standard_normal((2, 4)))
    adjoint = LossAdjoint()
    adjoint.add_encoder(tape, np.zeros((2, 4)))
    grads = parameter_gradients(model, adjoint)
    assert all(not np.any(g) for g in grads.values())
    assert set(grads) == set(PARAMETER_ORDER)


# =============================================================================
# MODEL FILES
# =============================================================================

@pytest.mark.parametrize("embed", [True, False])
def test_model_file_round_trip(tmp_path, make_model, rng, embed):
    model = make_model("infovae", 8, 6, 3, seed=9)
    model.metadata["dataset_scale"] = 2.5
    path = save_model(model, tmp_path / "model.json", embed=embed)
    assert (tmp_path / "model.bin").exists() != embed
    loaded = load_model(path)
    assert loaded.variant == "infovae"
    assert loaded.metadata["dataset_scale"] == 2.5
    for name in PARAMETER_ORDER:
        assert np.array_equal(loaded.parameters()[name], model.parameters()[name])
    z = rng.standard_normal(3)
    assert np.array_equal(loaded.decode(z), model.decode(z))


def test_model_file_shape_mismatch(tmp_path, make_model):
    path = save_model(make_model("plain", 8, 6, 3), tmp_path / "model.json")
    manifest = json.loads(path.read_text())
    manifest["hidden_dim"] = 7
    path.write_text(json.dumps(manifest))
    with pytest.raises(ShapeError):
        load_model(path)
    with pytest.raises(ContainerError):
        load_model(tmp_path / "missing.json")
