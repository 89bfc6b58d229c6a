"""
Latent FxLMS: adapt a latent code z and emit w = D(z) / scale

Two update rules, both driven by the block's FxLMS quantities:

    data-normalized:    z <- z - mu_z * Ups(z) gbar
                        gbar = (1/B) sum e_n xhat_n / (eps + |xhat_n|^2)
    latent-normalized:  z <- z - mu_z * Ups(z) ((1/B) sum e_n xhat_n) / (|Ups(z) xhat_c|^2 + eps)

Ups(z) is the Jacobian of the physical-unit decoder, applied as a VJP. The
latent denominator uses the block's last xhat ("blockend") or is evaluated
per sample ("persample").
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .anc import (AdaptiveController, BlockResult, NoiseSource,
                  Schedule, normalized_gradient, run_anc_trial)
from .config import ANC, LATENT
from .errors import ConfigError, InstabilityError, NumericError, ShapeError, TuningError
from .logger import get_logger

SCHEMES = ("data", "latent")
DENOMINATOR_MODES = ("blockend", "persample")


@dataclass
class LatentControllerState:
    z: np.ndarray
    model: object   # AutoencoderModel or any decoder with encode_mean/decode/vjp
    scheme: str = LATENT["scheme"]
    mu_z: float = LATENT["mu_z"]
    epsilon: float = LATENT["epsilon"]
    block_size: int = ANC["block_size"]
    dataset_scale: float = 1.0
    denominator_mode: str = LATENT["denominator_mode"]

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).copy()
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got '{self.scheme}'")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.mu_z < 0:
            raise ConfigError(f"mu_z must be >= 0, got {self.mu_z}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.dataset_scale > 0:
            raise ConfigError(f"dataset_scale must be > 0, got {self.dataset_scale}")

    def physical_vjp(self, v: np.ndarray) -> np.ndarray:
        """VJP of z -> D(z) / scale"""
        return self.model.vjp(self.z, v) / self.dataset_scale


def init_latent(model, dataset_scale: float = 1.0, scheme: str = LATENT["scheme"],
                mu_z: float = LATENT["mu_z"], epsilon: float = LATENT["epsilon"],
                block_size: int = ANC["block_size"],
                denominator_mode: str = LATENT["denominator_mode"]) -> LatentControllerState:
    """State with z0 = mean-head encoding of the zero filter"""
    z0 = model.encode_mean(np.zeros(model.filter_len))
    return LatentControllerState(z0, model, scheme, mu_z, epsilon, block_size, dataset_scale, denominator_mode)


def current_weights(state: LatentControllerState) -> np.ndarray:
    """Active filter in physical units"""
    return state.model.decode(state.z) / state.dataset_scale


def _check_block(e_block, xhat_vectors, filter_len: int, block_index: Optional[int]):
    e_block = np.asarray(e_block, dtype=np.float64)
    xhat_vectors = np.atleast_2d(np.asarray(xhat_vectors, dtype=np.float64))
    if xhat_vectors.shape != (e_block.size, filter_len):
        raise ShapeError(f"Expected {e_block.size} x {filter_len} filtered-reference vectors, "
                         f"got {xhat_vectors.shape}")
    if not (np.all(np.isfinite(e_block)) and np.all(np.isfinite(xhat_vectors))):
        raise NumericError("Non-finite error or filtered reference in latent update", block_index=block_index)
    return e_block, xhat_vectors


def _commit(state: LatentControllerState, z: np.ndarray, block_index: Optional[int]) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericError("Latent update produced a non-finite code", block_index=block_index)
    state.z = z
    return z


def latent_block_update_data_norm(state: LatentControllerState, e_block, xhat_vectors,
                                  block_index: Optional[int] = None) -> np.ndarray:
    """z <- z - mu_z Ups(z) gbar with the normalized FxLMS gradient gbar"""
    e_block, xhat_vectors = _check_block(e_block, xhat_vectors, state.model.filter_len, block_index)
    gbar = normalized_gradient(e_block, xhat_vectors, state.epsilon)
    return _commit(state, state.z - state.mu_z * state.physical_vjp(gbar), block_index)


def latent_block_update_latent_norm(state: LatentControllerState, e_block, xhat_vectors,
                                    block_index: Optional[int] = None) -> np.ndarray:
    """z <- z - mu_z u / d with the gradient normalized in latent space"""
    e_block, xhat_vectors = _check_block(e_block, xhat_vectors, state.model.filter_len, block_index)
    blocks = e_block.size

    if state.denominator_mode == "persample":
        per_sample = state.physical_vjp(xhat_vectors)
        denom = np.sum(per_sample ** 2, axis=1) + state.epsilon
        step = (e_block / denom) @ per_sample / blocks
    else:
        u = state.physical_vjp(xhat_vectors.T @ e_block / blocks)
        last = state.physical_vjp(xhat_vectors[-1])
        step = u / (np.dot(last, last) + state.epsilon)
    return _commit(state, state.z - state.mu_z * step, block_index)


class LatentFxLMSController(AdaptiveController):
    """Adaptive controller whose weights always equal D(z) / scale"""

    def __init__(self, model, dataset_scale: float = 1.0, scheme: str = LATENT["scheme"],
                 mu_z: float = LATENT["mu_z"], epsilon: float = LATENT["epsilon"],
                 denominator_mode: str = LATENT["denominator_mode"], name: Optional[str] = None):
        self.model = model
        self.dataset_scale = dataset_scale
        self.scheme = scheme
        self.mu_z = float(mu_z)
        self.epsilon = float(epsilon)
        self.denominator_mode = denominator_mode
        self.name = name or f"lfxlms_{scheme}"
        self.reset()

    def reset(self):
        self.state = init_latent(self.model, self.dataset_scale, self.scheme, self.mu_z,
                                 self.epsilon, denominator_mode=self.denominator_mode)
        self._weights = current_weights(self.state)

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def update(self, block: BlockResult, block_index: int):
        self.state.block_size = block.error.size
        if self.scheme == "data":
            latent_block_update_data_norm(self.state, block.error, block.xhat_vectors, block_index)
        else:
            latent_block_update_latent_norm(self.state, block.error, block.xhat_vectors, block_index)
        self._weights = current_weights(self.state)


# =============================================================================
# STEP-SIZE TUNING
# =============================================================================

@dataclass
class ProbeTrial:
    p_schedule: Schedule
    g: np.ndarray
    g_hat: np.ndarray
    noise: NoiseSource


@dataclass
class ProbeScenario:
    """Seeded trials every candidate step size must survive"""
    trials: List[ProbeTrial] = field(default_factory=list)
    n_blocks: int = LATENT["probe_blocks"]
    block_size: int = ANC["block_size"]
    divergence_factor: float = ANC["divergence_factor"]


def _probe(controller: AdaptiveController, trial: ProbeTrial, scenario: ProbeScenario) -> Tuple[bool, float]:
    try:
        trace = run_anc_trial(trial.p_schedule, trial.g, trial.g_hat, trial.noise, controller,
                              scenario.n_blocks, scenario.block_size,
                              divergence_factor=scenario.divergence_factor)
    except (InstabilityError, NumericError):
        return False, float("inf")
    level = np.cumsum(trace.off_mse) / np.arange(1, len(trace) + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(level > 0, trace.block_mse / level, 0.0)
    return True, float(np.max(ratio))


def tune_step_size(controller_factory: Callable[[float], AdaptiveController],
                   scenario: ProbeScenario, grid: Sequence[float]) -> float:
    """
    Largest nonzero grid value with no divergent probe trial.

    Divergence is a block MSE above divergence_factor x the running ANC-OFF
    mean, or a non-finite signal.
    """
    logger = get_logger()
    candidates = sorted({float(s) for s in grid if s > 0}, reverse=True)
    if not candidates:
        raise TuningError("Step-size grid has no nonzero candidates")
    if not scenario.trials:
        raise ConfigError("Probe scenario has no trials")

    for step in candidates:
        worst = 0.0
        stable = True
        for trial in scenario.trials:
            controller = controller_factory(step)
            ok, ratio = _probe(controller, trial, scenario)
            worst = max(worst, ratio)
            if not ok:
                stable = False
                break
        logger.step_probe(controller.name, step, stable, worst)
        if stable:
            return step
    raise TuningError(f"Every candidate step size diverged: {candidates}")
