"""
Filtered-x LMS engine

Acoustic model at the error microphone:

    e_n = (p * x)_n + (g * y)_n,   y_n = w^T [x_n, x_{n-1}, ..., x_{n-L+1}]

Weights are frozen within a block of B samples; the controller adapts at
block boundaries from the block's errors and filtered-reference vectors
x_hat_n = [ (g_hat * x)_n, ..., (g_hat * x)_{n-L+1} ].

Histories passed to the per-sample helpers are most-recent-first.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .acoustics import ImpulseResponse
from .config import ANC, ROOM
from .errors import (ConfigError, ContainerError, InstabilityError, NumericError,
                     ShapeError)
from .logger import get_logger

FilterWeights = np.ndarray
Schedule = Sequence[Tuple[int, Union[ImpulseResponse, np.ndarray]]]

NOISE_KINDS = ("white_gaussian", "file")


def _taps(response) -> np.ndarray:
    if isinstance(response, ImpulseResponse):
        return response.taps
    return np.asarray(response, dtype=np.float64)


def _tail(signal: np.ndarray, count: int) -> np.ndarray:
    return signal[signal.size - count:].copy() if count > 0 else signal[:0].copy()


# =============================================================================
# NOISE
# =============================================================================

@dataclass(frozen=True)
class NoiseSource:
    """Reference noise x: seeded white Gaussian or a recorded signal file"""
    kind: str = ANC["noise_kind"]
    variance: float = ANC["noise_variance"]
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"Noise kind must be one of {NOISE_KINDS}, got '{self.kind}'")
        if self.kind == "white_gaussian" and not self.variance > 0:
            raise ConfigError(f"White noise variance must be > 0, got {self.variance}")
        if self.kind == "file" and not self.path:
            raise ConfigError("File noise needs a path")

    def with_seed(self, seed: int) -> "NoiseSource":
        return NoiseSource(self.kind, self.variance, int(seed), self.path)


def _read_signal_file(path: Path) -> np.ndarray:
    from scipy.io import wavfile

    suffix = path.suffix.lower()
    if suffix == ".wav":
        _, data = wavfile.read(path)
        if np.issubdtype(data.dtype, np.integer):
            data = data / float(np.iinfo(data.dtype).max)
    elif suffix == ".npy":
        data = np.load(path)
    else:
        data = np.loadtxt(path)
    data = np.asarray(data, dtype=np.float64)
    # first channel of multichannel recordings
    return data[:, 0] if data.ndim == 2 else data.ravel()


def generate_noise(src: NoiseSource, n_samples: int) -> np.ndarray:
    """n_samples of reference noise, deterministic given the source's seed"""
    if n_samples < 0:
        raise ConfigError(f"n_samples must be >= 0, got {n_samples}")
    if src.kind == "white_gaussian":
        rng = np.random.default_rng(src.seed)
        return rng.normal(0.0, np.sqrt(src.variance), n_samples)

    path = Path(src.path)
    if not path.exists():
        raise ContainerError(f"Noise file not found: {path}")
    data = _read_signal_file(path)
    if data.size < n_samples:
        raise ContainerError(f"Noise file {path} holds {data.size} samples, {n_samples} requested")
    return data[:n_samples].copy()


# =============================================================================
# PER-SAMPLE PRIMITIVES
# =============================================================================

def filtered_reference(g_hat, x_history: np.ndarray) -> float:
    """x_hat_n = g_hat^T [x_n, ..., x_{n-L+1}]"""
    g_hat = _taps(g_hat)
    x_history = np.asarray(x_history, dtype=np.float64)
    if x_history.size < g_hat.size:
        raise ShapeError(f"x history holds {x_history.size} samples, g_hat needs {g_hat.size}")
    return float(np.dot(g_hat, x_history[:g_hat.size]))


def mic_sample(p, g, w: FilterWeights, x_history: np.ndarray,
               y_history: np.ndarray) -> Tuple[float, float]:
    """
    Error-mic sample for the current instant.

    x_history holds x_n first; y_history holds the previously emitted
    control samples y_{n-1}, y_{n-2}, ... Returns (e_n, y_n).
    """
    p, g = _taps(p), _taps(g)
    w = np.asarray(w, dtype=np.float64)
    x_history = np.asarray(x_history, dtype=np.float64)
    y_history = np.asarray(y_history, dtype=np.float64)
    if x_history.size < max(p.size, w.size):
        raise ShapeError("x history shorter than the primary path or the filter")
    if y_history.size < g.size - 1:
        raise ShapeError("y history shorter than the secondary path")

    y_n = float(np.dot(w, x_history[:w.size]))
    emitted = np.concatenate(([y_n], y_history[:g.size - 1]))
    e_n = float(np.dot(p, x_history[:p.size]) + np.dot(g, emitted))
    return e_n, y_n


def normalized_gradient(e_block: np.ndarray, xhat_vectors: np.ndarray, epsilon: float) -> np.ndarray:
    """(1/B) sum_n e_n x_hat_n / (eps + ||x_hat_n||^2)"""
    e_block = np.asarray(e_block, dtype=np.float64)
    xhat_vectors = np.atleast_2d(np.asarray(xhat_vectors, dtype=np.float64))
    if xhat_vectors.shape[0] != e_block.size:
        raise ShapeError(f"{e_block.size} errors but {xhat_vectors.shape[0]} filtered-reference vectors")
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = e_block / (epsilon + np.einsum("ij,ij->i", xhat_vectors, xhat_vectors))
        return xhat_vectors.T @ scaled / e_block.size


@dataclass
class FxState:
    """
    Adaptive filter state of the normalized block FxLMS.

    x_history holds the newest max(L, len(g_hat)) reference samples and
    xhat_history the newest L filtered-reference samples, newest first.
    """
    weights: FilterWeights
    g_hat: np.ndarray
    mu: float = ANC["mu"]
    epsilon: float = ANC["epsilon"]
    block_size: int = ANC["block_size"]
    x_history: np.ndarray = None
    xhat_history: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).copy()
        self.g_hat = _taps(self.g_hat)
        length = self.weights.size
        if self.x_history is None:
            self.x_history = np.zeros(max(length, self.g_hat.size))
        if self.xhat_history is None:
            self.xhat_history = np.zeros(length)
        # mu = 0 is the frozen-filter (ANC-OFF) configuration
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")

    def filter_reference(self, x_block: np.ndarray) -> np.ndarray:
        """Advance both histories over a block; returns the B x L filtered-reference vectors"""
        x_block = np.asarray(x_block, dtype=np.float64)
        length = self.weights.size
        xx = np.concatenate((self.x_history[::-1], x_block))
        xhat = np.convolve(xx, self.g_hat, mode="valid")[-x_block.size:]
        xh_all = np.concatenate((self.xhat_history[:length - 1][::-1], xhat))
        vectors = sliding_window_view(xh_all, length)[:, ::-1]
        self.x_history = xx[::-1][:self.x_history.size].copy()
        self.xhat_history = xh_all[::-1][:length].copy()
        return np.ascontiguousarray(vectors)


def fxlms_block_update(state: FxState, e_block, xhat_vectors, block_index: Optional[int] = None) -> FilterWeights:
    """w <- w - mu (1/B) sum_n e_n x_hat_n / (eps + ||x_hat_n||^2)"""
    e_block = np.asarray(e_block, dtype=np.float64)
    xhat_vectors = np.atleast_2d(np.asarray(xhat_vectors, dtype=np.float64))
    if xhat_vectors.shape[1] != state.weights.size:
        raise ShapeError(f"x_hat vectors have {xhat_vectors.shape[1]} taps, filter has {state.weights.size}")
    if not (np.all(np.isfinite(e_block)) and np.all(np.isfinite(xhat_vectors))):
        raise NumericError("Non-finite error or filtered reference in FxLMS update", block_index=block_index)

    step = normalized_gradient(e_block, xhat_vectors, state.epsilon)
    weights = state.weights - state.mu * step
    if not np.all(np.isfinite(weights)):
        raise NumericError("FxLMS update produced non-finite weights", block_index=block_index)
    state.weights = weights
    return weights


def perturb_secondary_path(g, level: float, seed: int = 0) -> np.ndarray:
    """g_hat = g * (1 + level * eta), eta ~ N(0, 1) per tap"""
    g = _taps(g)
    if level == 0:
        return g.copy()
    eta = np.random.default_rng(seed).standard_normal(g.size)
    return g * (1.0 + level * eta)


def wiener_solution(p, g, length: Optional[int] = None) -> FilterWeights:
    """Least-squares optimum of min ||p + g * w|| for white reference noise"""
    p, g = _taps(p), _taps(g)
    length = length or p.size
    rows = g.size + length - 1
    conv = np.zeros((rows, length))
    for k in range(length):
        conv[k:k + g.size, k] = g
    target = np.zeros(rows)
    target[:p.size] = p
    w, *_ = np.linalg.lstsq(conv, -target, rcond=None)
    return w


# =============================================================================
# BLOCK SIMULATION
# =============================================================================

@dataclass
class BlockResult:
    error: np.ndarray          # e_n over the block
    primary: np.ndarray        # (p * x)_n over the block, the ANC-OFF signal
    xhat_vectors: np.ndarray   # B x L filtered-reference vectors
    x_vectors: np.ndarray      # B x L reference vectors

    @property
    def mse(self) -> float:
        return float(np.mean(self.error ** 2))

    @property
    def off_mse(self) -> float:
        return float(np.mean(self.primary ** 2))


class ControlLoop:
    """
    Sample-exact block simulation of one ANC channel.

    Carries the x, x_hat and y histories across blocks so the secondary path
    always convolves the control signal that was actually emitted.
    """

    def __init__(self, g, g_hat, length: int):
        self.g = _taps(g)
        self.g_hat = _taps(g_hat)
        self.length = int(length)
        self.reset()

    def reset(self):
        self.x_tail = np.zeros(max(self.length, self.g_hat.size) - 1)
        self.xhat_tail = np.zeros(self.length - 1)
        self.y_tail = np.zeros(self.g.size - 1)

    def step(self, x_block: np.ndarray, p, w: FilterWeights) -> BlockResult:
        p = _taps(p)
        w = np.asarray(w, dtype=np.float64)
        if w.size != self.length:
            raise ShapeError(f"Filter has {w.size} taps, loop expects {self.length}")
        block = x_block.size

        # pad the history so every path sees its full window
        need = max(self.length, self.g_hat.size, p.size) - 1
        x_tail = self.x_tail
        if x_tail.size < need:
            x_tail = np.concatenate((np.zeros(need - x_tail.size), x_tail))
        xx = np.concatenate((x_tail, x_block))

        primary = np.convolve(xx, p, mode="valid")[-block:]
        x_vectors = sliding_window_view(xx, self.length)[-block:, ::-1]
        y = x_vectors @ w
        yy = np.concatenate((self.y_tail, y))
        error = primary + np.convolve(yy, self.g, mode="valid")

        xhat = np.convolve(xx, self.g_hat, mode="valid")[-block:]
        xh_all = np.concatenate((self.xhat_tail, xhat))
        xhat_vectors = sliding_window_view(xh_all, self.length)[:, ::-1]

        self.x_tail = _tail(xx, max(need, self.x_tail.size))
        self.xhat_tail = _tail(xh_all, self.length - 1)
        self.y_tail = _tail(yy, self.g.size - 1)
        return BlockResult(error, primary, np.ascontiguousarray(xhat_vectors), np.ascontiguousarray(x_vectors))


# =============================================================================
# CONTROLLERS
# =============================================================================

class AdaptiveController:
    """Interface shared by the FxLMS and latent controllers"""
    name = "controller"

    @property
    def weights(self) -> FilterWeights:
        raise NotImplementedError

    def reset(self):
        raise NotImplementedError

    def update(self, block: BlockResult, block_index: int):
        raise NotImplementedError


class FxLMSController(AdaptiveController):
    """Normalized block FxLMS starting from the zero filter"""

    def __init__(self, length: int, g_hat, mu: float = ANC["mu"],
                 epsilon: float = ANC["epsilon"], name: str = "fxlms",
                 initial_weights: Optional[np.ndarray] = None):
        self.length = int(length)
        self.g_hat = _taps(g_hat)
        self.mu = float(mu)
        self.epsilon = float(epsilon)
        self.name = name
        self.initial_weights = (np.zeros(self.length) if initial_weights is None
                                else np.asarray(initial_weights, dtype=np.float64).copy())
        if self.initial_weights.size != self.length:
            raise ShapeError(f"Initial weights have {self.initial_weights.size} taps, expected {self.length}")
        self.reset()

    def reset(self):
        self.state = FxState(self.initial_weights, self.g_hat, mu=self.mu, epsilon=self.epsilon)

    @property
    def weights(self) -> FilterWeights:
        return self.state.weights

    def update(self, block: BlockResult, block_index: int):
        self.state.block_size = block.error.size
        xhat_vectors = self.state.filter_reference(block.x_vectors[:, 0])
        fxlms_block_update(self.state, block.error, xhat_vectors, block_index)


class NullController(AdaptiveController):
    """ANC OFF: zero filter, no adaptation"""

    def __init__(self, length: int, name: str = "anc_off"):
        self.length = int(length)
        self.name = name
        self._weights = np.zeros(self.length)

    def reset(self):
        self._weights = np.zeros(self.length)

    @property
    def weights(self) -> FilterWeights:
        return self._weights

    def update(self, block: BlockResult, block_index: int):
        pass


# =============================================================================
# TRIALS
# =============================================================================

@dataclass
class ErrorTrace:
    """Per-block error-mic MSE of one run"""
    block_mse: np.ndarray
    block_size: int = ANC["block_size"]
    sample_rate: int = ROOM["sample_rate"]
    off_mse: Optional[np.ndarray] = None

    def __post_init__(self):
        self.block_mse = np.asarray(self.block_mse, dtype=np.float64)
        if np.any(self.block_mse < 0):
            raise NumericError("Block MSE entries must be >= 0")

    def __len__(self) -> int:
        return self.block_mse.size

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"block": np.arange(self.block_mse.size), "mse": self.block_mse})

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.12e")
        return path

    @classmethod
    def read_csv(cls, path, block_size: int = ANC["block_size"],
                 sample_rate: int = ROOM["sample_rate"]) -> "ErrorTrace":
        path = Path(path)
        if not path.exists():
            raise ContainerError(f"Trace file not found: {path}")
        frame = pd.read_csv(path)
        if list(frame.columns[:2]) != ["block", "mse"]:
            raise ContainerError(f"{path}: expected header 'block,mse'")
        frame = frame.sort_values("block")
        return cls(frame["mse"].to_numpy(dtype=np.float64), block_size, sample_rate)


def _validate_schedule(schedule: Schedule) -> List[Tuple[int, np.ndarray]]:
    if not schedule:
        raise ConfigError("Primary-path schedule is empty")
    entries = [(int(b), _taps(p)) for b, p in schedule]
    if entries[0][0] != 0:
        raise ConfigError("Primary-path schedule must start at block 0")
    blocks = [b for b, _ in entries]
    if blocks != sorted(set(blocks)):
        raise ConfigError("Primary-path schedule blocks must be strictly increasing")
    return entries


def run_anc_trial(p_schedule: Schedule, g, g_hat, noise: Union[NoiseSource, np.ndarray],
                  controller: AdaptiveController, n_blocks: int,
                  block_size: int = ANC["block_size"], sample_rate: int = ROOM["sample_rate"],
                  divergence_factor: Optional[float] = None) -> ErrorTrace:
    """
    Simulate n_blocks * B samples with the primary path swapped on schedule.

    The controller restarts from its zero state. With divergence_factor set,
    a block MSE above that multiple of the running ANC-OFF mean raises
    InstabilityError.
    """
    entries = _validate_schedule(p_schedule)
    if n_blocks < 1 or block_size < 1:
        raise ConfigError("n_blocks and block_size must be >= 1")
    total = n_blocks * block_size
    x = generate_noise(noise, total) if isinstance(noise, NoiseSource) else np.asarray(noise, dtype=np.float64)
    if x.size < total:
        raise ShapeError(f"Noise holds {x.size} samples, trial needs {total}")

    controller.reset()
    loop = ControlLoop(g, g_hat, controller.weights.size)
    mse = np.empty(n_blocks)
    off = np.empty(n_blocks)
    swaps = dict(entries)
    p = entries[0][1]

    for k in range(n_blocks):
        p = swaps.get(k, p)
        block = loop.step(x[k * block_size:(k + 1) * block_size], p, controller.weights)
        mse[k] = block.mse
        off[k] = block.off_mse
        if not np.isfinite(mse[k]):
            raise NumericError(f"[{controller.name}] non-finite error signal", block_index=k)
        if divergence_factor is not None:
            level = off[:k + 1].mean()
            if mse[k] > divergence_factor * level and mse[k] > 0:
                get_logger().block_diverged(controller.name, k, float(mse[k]), float(level))
                raise InstabilityError(f"[{controller.name}] diverged: mse {mse[k]:.3e} vs ANC-OFF {level:.3e}",
                                       block_index=k)
        controller.update(block, k)

    return ErrorTrace(mse, block_size, sample_rate, off_mse=off)


@dataclass
class StopConfig:
    """Stop rule for converging a filter to build the dataset"""
    max_blocks: int = ANC["max_blocks"]
    tol: float = ANC["tol"]
    window: int = ANC["stop_window"]
    divergence_factor: float = ANC["divergence_factor"]

    def __post_init__(self):
        if self.max_blocks < 1 or self.window < 1:
            raise ConfigError("max_blocks and window must be >= 1")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")


@dataclass
class ConvergedFilter:
    weights: FilterWeights
    blocks: int
    final_mse: float
    off_mse: float

    @property
    def residual_db(self) -> float:
        if self.off_mse <= 0:
            return float("-inf")
        return float(10.0 * np.log10(max(self.final_mse, 1e-300) / self.off_mse))


def converge_filter_detailed(p, g, g_hat, noise: NoiseSource, mu: float,
                             stop_cfg: Optional[StopConfig] = None,
                             epsilon: float = ANC["epsilon"],
                             block_size: int = ANC["block_size"]) -> ConvergedFilter:
    """Run FxLMS on a fixed primary path until the trailing-window MSE settles"""
    stop_cfg = stop_cfg or StopConfig()
    p = _taps(p)
    controller = FxLMSController(p.size, g_hat, mu=mu, epsilon=epsilon, name="converge")
    loop = ControlLoop(g, g_hat, p.size)
    x = generate_noise(noise, stop_cfg.max_blocks * block_size)
    window = stop_cfg.window
    mse = np.empty(stop_cfg.max_blocks)
    off = np.empty(stop_cfg.max_blocks)

    blocks = stop_cfg.max_blocks
    for k in range(stop_cfg.max_blocks):
        block = loop.step(x[k * block_size:(k + 1) * block_size], p, controller.weights)
        mse[k], off[k] = block.mse, block.off_mse
        level = off[:k + 1].mean()
        if not np.isfinite(mse[k]) or (mse[k] > stop_cfg.divergence_factor * level and mse[k] > 0):
            raise InstabilityError(f"FxLMS diverged at mu={mu:g}: mse {mse[k]:.3e} vs ANC-OFF {level:.3e}",
                                   block_index=k)
        controller.update(block, k)

        done = k + 1
        if done >= 2 * window:
            previous = mse[done - 2 * window:done - window].mean()
            current = mse[done - window:done].mean()
            change = abs(current - previous) / previous if previous > 0 else abs(current)
            if change < stop_cfg.tol:
                blocks = done
                break

    tail = slice(max(0, blocks - window), blocks)
    return ConvergedFilter(controller.weights.copy(), blocks,
                           float(mse[tail].mean()), float(off[tail].mean()))


def converge_filter(p, g, g_hat, noise: NoiseSource, mu: float,
                    stop_cfg: Optional[StopConfig] = None,
                    epsilon: float = ANC["epsilon"],
                    block_size: int = ANC["block_size"]) -> FilterWeights:
    """Converged FxLMS weights for a fixed primary path"""
    return converge_filter_detailed(p, g, g_hat, noise, mu, stop_cfg, epsilon, block_size).weights
