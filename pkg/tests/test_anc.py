import numpy as np
import pytest

from lfxlms.anc import (ControlLoop, ErrorTrace, FxLMSController, FxState, NoiseSource,
                        NullController, StopConfig, converge_filter, converge_filter_detailed,
                        filtered_reference, fxlms_block_update, generate_noise, mic_sample,
                        perturb_secondary_path, run_anc_trial, wiener_solution)
from lfxlms.errors import ConfigError, ContainerError, InstabilityError, NumericError, ShapeError


def _history(signal, n, length):
    """[s_n, s_{n-1}, ..., s_{n-length+1}] with zeros before the start"""
    out = np.zeros(length)
    for k in range(length):
        if n - k >= 0:
            out[k] = signal[n - k]
    return out


# =============================================================================
# NOISE
# =============================================================================

def test_white_noise_is_seeded_and_scaled():
    src = NoiseSource(variance=1.0, seed=7)
    x = generate_noise(src, 1_000_000)
    assert x.var() == pytest.approx(1.0, abs=0.01)
    assert np.array_equal(generate_noise(src, 100), x[:100])
    assert not np.array_equal(generate_noise(src.with_seed(8), 100), x[:100])
    assert generate_noise(src, 0).size == 0
    assert generate_noise(NoiseSource(variance=4.0, seed=1), 200_000).var() == pytest.approx(4.0, rel=0.02)


def test_noise_from_file(tmp_path):
    path = tmp_path / "hum.npy"
    np.save(path, np.arange(50, dtype=np.float64))
    src = NoiseSource(kind="file", path=str(path))
    assert np.array_equal(generate_noise(src, 10), np.arange(10.0))
    with pytest.raises(ContainerError):
        generate_noise(src, 51)
    with pytest.raises(ContainerError):
        generate_noise(NoiseSource(kind="file", path=str(tmp_path / "missing.npy")), 5)
    with pytest.raises(ConfigError):
        NoiseSource(kind="pink")
    with pytest.raises(ConfigError):
        NoiseSource(variance=0.0)


# =============================================================================
# PER-SAMPLE PRIMITIVES
# =============================================================================

def test_filtered_reference_with_delta_and_delay():
    x_history = np.array([3.0, -1.0, 2.0, 5.0])
    assert filtered_reference([1.0, 0.0, 0.0], x_history) == 3.0
    assert filtered_reference([0.0, 0.0, 1.0], x_history) == 2.0
    assert filtered_reference([0.5, 0.25], x_history) == pytest.approx(1.25)
    with pytest.raises(ShapeError):
        filtered_reference(np.ones(5), x_history)


def test_mic_sample_without_control_is_primary_only(rng):
    p = rng.standard_normal(4)
    x_history = rng.standard_normal(6)
    e, y = mic_sample(p, [1.0, 0.5], np.zeros(4), x_history, np.zeros(1))
    assert y == 0.0
    assert e == pytest.approx(np.dot(p, x_history[:4]))


def test_mic_sample_cancels_exactly_with_ideal_filter(rng):
    p = rng.standard_normal(4)
    x_history = rng.standard_normal(4)
    e, _ = mic_sample(p, [1.0, 0.0, 0.0, 0.0], -p, x_history, np.zeros(3))
    assert abs(e) < 1e-15


def test_mic_sample_matches_full_convolution(rng):
    n_samples = 20
    x = rng.standard_normal(n_samples)
    p, g, w = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
    y = np.convolve(x, w)[:n_samples]
    e = np.convolve(x, p)[:n_samples] + np.convolve(y, g)[:n_samples]
    for n in range(n_samples):
        y_history = np.array([y[n - 1] if n >= 1 else 0.0, y[n - 2] if n >= 2 else 0.0])
        e_n, y_n = mic_sample(p, g, w, _history(x, n, 3), y_history)
        assert y_n == pytest.approx(y[n], abs=1e-12)
        assert e_n == pytest.approx(e[n], abs=1e-12)


# =============================================================================
# BLOCK UPDATE
# =============================================================================

def test_zero_error_leaves_weights_unchanged(rng):
    state = FxState(rng.standard_normal(4), [1.0])
    before = state.weights.copy()
    fxlms_block_update(state, np.zeros(5), rng.standard_normal((5, 4)))
    assert np.array_equal(state.weights, before)


def test_scalar_update():
    state = FxState(np.zeros(1), [1.0], mu=1.0, epsilon=0.0)
    fxlms_block_update(state, np.array([3.0]), np.array([[2.0]]))
    assert state.weights[0] == pytest.approx(-1.5)


def test_block_update_averages_normalized_samples():
    state = FxState(np.array([1.0, 0.0]), [1.0], mu=0.5, epsilon=0.0)
    e = np.array([1.0, 2.0])
    xh = np.array([[1.0, 0.0], [0.0, 2.0]])
    fxlms_block_update(state, e, xh)
    expected = np.array([1.0, 0.0]) - 0.5 * (np.array([1.0, 0.0]) + np.array([0.0, 1.0])) / 2
    assert np.allclose(state.weights, expected)


def test_normalized_increment_is_bounded(rng):
    for _ in range(20):
        state = FxState(np.zeros(6), [1.0], mu=0.7, epsilon=1e-8)
        e = rng.standard_normal(1)
        xh = rng.standard_normal((1, 6)) * rng.uniform(0.01, 100.0)
        fxlms_block_update(state, e, xh)
        bound = 0.7 * abs(e[0]) / np.linalg.norm(xh[0])
        assert np.linalg.norm(state.weights) <= bound * (1 + 1e-9)


def test_block_update_rejects_bad_input(rng):
    state = FxState(np.zeros(3), [1.0])
    with pytest.raises(ShapeError):
        fxlms_block_update(state, np.zeros(2), np.zeros((2, 4)))
    with pytest.raises(NumericError):
        fxlms_block_update(state, np.array([np.nan, 0.0]), np.ones((2, 3)))
    with pytest.raises(ConfigError):
        FxState(np.zeros(3), [1.0], mu=-1.0)


# =============================================================================
# CONTROL LOOP
# =============================================================================

def test_control_loop_matches_sample_by_sample_model(rng):
    length, block, n_blocks = 4, 5, 3
    p, g, g_hat = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(2)
    x = rng.standard_normal(block * n_blocks)
    weights = [rng.standard_normal(length) for _ in range(n_blocks)]

    loop = ControlLoop(g, g_hat, length)
    results = [loop.step(x[k * block:(k + 1) * block], p, weights[k]) for k in range(n_blocks)]

    y = np.zeros(x.size)
    xhat = np.array([filtered_reference(g_hat, _history(x, n, 2)) for n in range(x.size)])
    for n in range(x.size):
        k = n // block
        y_history = _history(y, n - 1, 2) if n >= 1 else np.zeros(2)
        e_n, y[n] = mic_sample(p, g, weights[k], _history(x, n, 4), y_history)
        assert results[k].error[n % block] == pytest.approx(e_n, abs=1e-12)
        assert np.allclose(results[k].xhat_vectors[n % block], _history(xhat, n, length), atol=1e-12)
        assert np.allclose(results[k].x_vectors[n % block], _history(x, n, length))
    off = np.convolve(x, p)[:x.size]
    assert np.allclose(np.concatenate([r.primary for r in results]), off, atol=1e-12)


def test_state_histories_start_at_zero_and_track_the_loop(rng):
    length, block = 4, 5
    g, g_hat = rng.standard_normal(3), rng.standard_normal(6)
    state = FxState(np.zeros(length), g_hat)
    assert np.array_equal(state.x_history, np.zeros(6))
    assert np.array_equal(state.xhat_history, np.zeros(length))

    loop = ControlLoop(g, g_hat, length)
    x = rng.standard_normal(3 * block)
    for k in range(3):
        result = loop.step(x[k * block:(k + 1) * block], rng.standard_normal(4), np.zeros(length))
        vectors = state.filter_reference(result.x_vectors[:, 0])
        np.testing.assert_allclose(vectors, result.xhat_vectors, atol=1e-12)
    np.testing.assert_allclose(state.x_history, x[::-1][:6])
    np.testing.assert_allclose(state.xhat_history, result.xhat_vectors[-1], atol=1e-12)


def test_controller_update_uses_its_own_filtered_reference(rng):
    g = np.array([1.0, 0.4])
    p = rng.standard_normal(6)
    controller = FxLMSController(6, g, mu=0.5)
    reference = FxState(np.zeros(6), g, mu=0.5)
    loop = ControlLoop(g, g, 6)
    x = rng.standard_normal(200)
    for k in range(4):
        block = loop.step(x[k * 50:(k + 1) * 50], p, controller.weights)
        controller.update(block, k)
        fxlms_block_update(reference, block.error, block.xhat_vectors)
        np.testing.assert_allclose(controller.weights, reference.weights, atol=1e-12)


def test_zero_step_size_gives_anc_off_trace(rng):
    p = rng.standard_normal(8) * 0.3
    g = rng.standard_normal(8) * 0.3
    noise = NoiseSource(seed=3)
    trace = run_anc_trial([(0, p)], g, g, noise, FxLMSController(8, g, mu=0.0), 20, 50)
    x = generate_noise(noise, 1000)
    off = (np.convolve(x, p)[:1000] ** 2).reshape(20, 50).mean(axis=1)
    assert np.allclose(trace.block_mse, off, rtol=1e-12)
    assert np.allclose(trace.off_mse, off, rtol=1e-12)


def test_null_controller_matches_zero_step(rng):
    p, g = rng.standard_normal(8), rng.standard_normal(8)
    a = run_anc_trial([(0, p)], g, g, NoiseSource(seed=1), NullController(8), 10, 20)
    b = run_anc_trial([(0, p)], g, g, NoiseSource(seed=1), FxLMSController(8, g, mu=0.0), 10, 20)
    assert np.array_equal(a.block_mse, b.block_mse)


def test_fxlms_converges_with_ideal_secondary_path(rng):
    p = rng.standard_normal(16) * np.exp(-np.arange(16) / 4)
    g = np.zeros(16)
    g[0] = 1.0
    trace = run_anc_trial([(0, p)], g, g, NoiseSource(seed=4), FxLMSController(16, g, mu=1.0), 200, 100)
    assert trace.block_mse[-1] < 0.01 * trace.block_mse[0]


def test_trial_is_deterministic(rng):
    p, g = rng.standard_normal(8), rng.standard_normal(8)
    runs = [run_anc_trial([(0, p)], g, g, NoiseSource(seed=9), FxLMSController(8, g, mu=0.5), 30, 40)
            for _ in range(2)]
    assert np.array_equal(runs[0].block_mse, runs[1].block_mse)


def test_schedule_swaps_primary_path(rng):
    p1, p2 = rng.standard_normal(4), 3.0 * rng.standard_normal(4)
    g = np.array([1.0, 0.0, 0.0, 0.0])
    trace = run_anc_trial([(0, p1), (5, p2)], g, g, NoiseSource(seed=2), NullController(4), 10, 400)
    assert trace.off_mse[5:].mean() / trace.off_mse[:5].mean() == pytest.approx(
        np.sum(p2 ** 2) / np.sum(p1 ** 2), rel=0.2)


def test_schedule_validation():
    g = np.ones(2)
    with pytest.raises(ConfigError):
        run_anc_trial([(3, np.ones(2))], g, g, NoiseSource(), NullController(2), 5, 10)
    with pytest.raises(ConfigError):
        run_anc_trial([(0, np.ones(2)), (0, np.ones(2))], g, g, NoiseSource(), NullController(2), 5, 10)
    with pytest.raises(ConfigError):
        run_anc_trial([], g, g, NoiseSource(), NullController(2), 5, 10)


def test_divergence_is_reported():
    g = np.array([1.0, 0.0, 0.0, 0.0])
    p = np.array([0.5, -0.2, 0.1, 0.0])
    with pytest.raises(InstabilityError) as info:
        run_anc_trial([(0, p)], g, g, NoiseSource(seed=0), FxLMSController(4, g, mu=50.0), 50, 100,
                      divergence_factor=10.0)
    assert info.value.block_index is not None


def test_error_trace_csv(tmp_path, rng):
    trace = ErrorTrace(rng.uniform(0, 1, 12))
    path = trace.write_csv(tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "block,mse"
    loaded = ErrorTrace.read_csv(path)
    assert np.allclose(loaded.block_mse, trace.block_mse, rtol=1e-11)
    with pytest.raises(NumericError):
        ErrorTrace(np.array([0.1, -1.0]))


# =============================================================================
# CONVERGENCE TO A FIXED FILTER
# =============================================================================

def test_converge_filter_inverts_primary_with_delta_secondary(rng):
    p = rng.standard_normal(8)
    g = np.array([1.0])
    w = converge_filter(p, g, g, NoiseSource(seed=5), mu=1.0)
    assert np.linalg.norm(w + p) / np.linalg.norm(p) < 0.05


def test_converge_filter_with_silent_primary_stays_at_zero():
    result = converge_filter_detailed(np.zeros(8), np.array([1.0]), np.array([1.0]),
                                      NoiseSource(seed=1), mu=1.0)
    assert np.array_equal(result.weights, np.zeros(8))
    assert result.blocks == 2 * StopConfig().window


def test_converge_filter_stops_on_trailing_window_mse(rng):
    p, g = rng.standard_normal(6), np.array([1.0, 0.5])
    stop = StopConfig(max_blocks=300, tol=0.05, window=10)
    source = NoiseSource(seed=3)
    result = converge_filter_detailed(p, g, g, source, mu=0.5, stop_cfg=stop, block_size=64)

    x = generate_noise(source, stop.max_blocks * 64)
    mse = run_anc_trial([(0, p)], g, g, x, FxLMSController(6, g, mu=0.5), stop.max_blocks, 64).block_mse
    expected = stop.max_blocks
    for done in range(2 * stop.window, stop.max_blocks + 1):
        previous = mse[done - 2 * stop.window:done - stop.window].mean()
        current = mse[done - stop.window:done].mean()
        if abs(current - previous) / previous < stop.tol:
            expected = done
            break
    assert result.blocks == expected < stop.max_blocks
    assert result.final_mse == pytest.approx(mse[expected - stop.window:expected].mean())


def test_converge_filter_reaches_wiener_solution(rng):
    p = rng.standard_normal(4)
    g = np.array([1.0, 0.3, -0.2, 0.1])
    stop = StopConfig(max_blocks=1500, tol=0.0)
    w = converge_filter(p, g, g, NoiseSource(seed=11), mu=0.1, stop_cfg=stop, block_size=400)
    optimum = wiener_solution(p, g, 4)
    assert np.linalg.norm(w - optimum) / np.linalg.norm(optimum) < 0.05


def test_converge_filter_diverges_with_huge_step(rng):
    with pytest.raises(InstabilityError):
        converge_filter(rng.standard_normal(4), np.array([1.0]), np.array([1.0]),
                        NoiseSource(seed=0), mu=50.0)


def test_secondary_path_perturbation():
    g = np.linspace(1.0, 0.1, 10)
    assert np.array_equal(perturb_secondary_path(g, 0.0), g)
    a = perturb_secondary_path(g, 0.1, seed=3)
    assert np.array_equal(a, perturb_secondary_path(g, 0.1, seed=3))
    assert not np.array_equal(a, g)
