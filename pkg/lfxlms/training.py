"""
Converged-filter dataset and autoencoder training

The dataset holds FxLMS fixed points for primary sources spread along a
line segment. Training minimizes

    recon                                         plain
    recon + kl_w * KL                             vae
    recon + (1 - a) KL + (a + lambda - 1) MMD     infovae
    (+ mixup_c * L_C + mixup_z * L_z when mixup is on)

with Adam. Gradients are exact reverse-mode products from the recorded tapes.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .acoustics import ImpulseResponse, RoomSpec, segment_positions, simulate_rir
from .anc import (ControlLoop, FxLMSController, NoiseSource, StopConfig,
                  converge_filter_detailed, generate_noise, perturb_secondary_path)
from .config import ANC, GEOMETRY, TRAINING
from .errors import (ConfigError, ContainerError, DomainError, InstabilityError,
                     ShapeError, TrainingError)
from .logger import get_logger
from .neural import (AutoencoderModel, LossAdjoint, Reparameterization, decode,
                     decode_with_tape, encode_with_tape, parameter_gradients, split_head)
from .storage import DATASET_MAGIC, read_container, write_container


# =============================================================================
# DATASET
# =============================================================================

@dataclass
class FilterDataset:
    """Converged filters (physical units) with their source positions"""
    filters: np.ndarray
    positions: np.ndarray
    scale: float = 1.0
    sample_rate: int = 16000
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.filters = np.atleast_2d(np.asarray(self.filters, dtype=np.float64))
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.filters.shape[0] != self.positions.shape[0]:
            raise ShapeError(f"{self.filters.shape[0]} filters but {self.positions.shape[0]} positions")
        if self.filters.shape[0] < 2:
            raise ShapeError("A dataset needs at least two positions")
        if not np.all(np.isfinite(self.filters)):
            raise DomainError("Dataset holds non-finite filter taps")
        if not self.scale > 0:
            raise DomainError(f"Dataset scale must be > 0, got {self.scale}")

    def __len__(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_len(self) -> int:
        return self.filters.shape[1]

    def normalized(self) -> np.ndarray:
        """Filters in model units"""
        return self.filters * self.scale

    def split(self, stride: int) -> Tuple[np.ndarray, np.ndarray]:
        """(train, validation) row indices; every stride-th position is held out"""
        index = np.arange(len(self))
        if stride < 2:
            return index, index[:0]
        held = index % stride == stride - 1
        if held.all() or not held.any():
            return index, index[:0]
        return index[~held], index[held]


def normalization_scale(filters: np.ndarray) -> float:
    """Inverse of the largest row norm (1 for an all-zero set)"""
    largest = float(np.max(np.linalg.norm(filters, axis=1)))
    return 1.0 / largest if largest > 0 else 1.0


def _position_job(args) -> Tuple[np.ndarray, int, float, float, float]:
    room, position, mic, g, g_hat, seed, anc_cfg = args
    p = simulate_rir(room, position, mic).taps
    noise = NoiseSource(anc_cfg["noise_kind"], anc_cfg["noise_variance"], seed)
    stop = StopConfig(anc_cfg["max_blocks"], anc_cfg["tol"], anc_cfg["stop_window"], anc_cfg["divergence_factor"])
    mu = float(anc_cfg["dataset_mu"])
    for attempt in range(int(anc_cfg["max_retries"]) + 1):
        try:
            result = converge_filter_detailed(p, g, g_hat, noise, mu, stop,
                                              anc_cfg["epsilon"], anc_cfg["block_size"])
            return result.weights, result.blocks, result.residual_db, mu, attempt
        except InstabilityError:
            if attempt == int(anc_cfg["max_retries"]):
                raise
            mu *= 0.5
    raise InstabilityError("unreachable")


def generate_dataset(room: RoomSpec, segment: Sequence[Sequence[float]], n: int,
                     anc_cfg: Optional[Dict] = None, geometry: Optional[Dict] = None,
                     seed: int = 0, workers: int = 1,
                     secondary: Optional[ImpulseResponse] = None) -> FilterDataset:
    """
    Converge FxLMS for n primary positions evenly spread along the segment.

    A diverged position is re-run with halved mu (max_retries times) before
    the InstabilityError propagates. secondary overrides the simulated g.
    """
    anc_cfg = {**ANC, **(anc_cfg or {})}
    geometry = {**GEOMETRY, **(geometry or {})}
    logger = get_logger()
    speaker = np.asarray(geometry["speaker"], dtype=np.float64)
    mic = np.asarray(geometry["error_mic"], dtype=np.float64)

    positions = segment_positions(segment, n)
    outside = [i for i, pos in enumerate(positions) if not room.contains(pos)]
    if outside:
        raise ConfigError(f"Positions outside the room: {outside[:10]}{'...' if len(outside) > 10 else ''}")
    secondary_distance = np.linalg.norm(speaker - mic)
    too_close = np.flatnonzero(np.linalg.norm(positions - mic, axis=1) <= secondary_distance)
    if too_close.size:
        raise ConfigError(f"Primary positions not farther from the error mic than the speaker: "
                          f"{too_close[:10].tolist()}{'...' if too_close.size > 10 else ''}")

    g = secondary.taps if secondary is not None else simulate_rir(room, speaker, mic).taps
    g_hat = perturb_secondary_path(g, anc_cfg["g_hat_perturbation"], seed)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
    jobs = [(room, positions[i], mic, g, g_hat, seeds[i], anc_cfg) for i in range(n)]

    logger.info(f"Converging {n} filters (L={room.rir_length}, mu={anc_cfg['dataset_mu']}, workers={workers})")
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_position_job, jobs))
    else:
        results = [_position_job(job) for job in jobs]

    filters = np.empty((n, room.rir_length))
    retried = []
    for i, (weights, blocks, residual_db, mu, attempt) in enumerate(results):
        filters[i] = weights
        if attempt:
            retried.append(i)
        logger.dataset_row(i, positions[i], residual_db, blocks, mu)
    if retried:
        logger.warning(f"{len(retried)} positions needed a reduced step size: {retried[:10]}")

    return FilterDataset(filters, positions, normalization_scale(filters), room.sample_rate, metadata={
        "room": asdict(room),
        "geometry": {"speaker": speaker.tolist(), "error_mic": mic.tolist(),
                     "segment": [list(map(float, p)) for p in segment]},
        "anc": {k: anc_cfg[k] for k in ("block_size", "dataset_mu", "epsilon", "max_blocks",
                                        "tol", "stop_window", "g_hat_perturbation")},
        "seed": seed,
        "retried": retried,
    })


def fixed_point_ratio(p, g, g_hat, weights: np.ndarray, noise: NoiseSource,
                      mu: float, n_blocks: int = 100, block_size: int = ANC["block_size"]) -> float:
    """
    Mean MSE of FxLMS restarted at weights, over the MSE of the frozen filter.

    Close to 1 when weights is a genuine fixed point for this primary path.
    """
    x = generate_noise(noise, n_blocks * block_size)
    adaptive = FxLMSController(len(weights), g_hat, mu=mu, initial_weights=weights)
    frozen = FxLMSController(len(weights), g_hat, mu=0.0, initial_weights=weights)
    mse = {}
    for label, controller in (("adaptive", adaptive), ("frozen", frozen)):
        loop = ControlLoop(g, g_hat, len(weights))
        total = 0.0
        for k in range(n_blocks):
            block = loop.step(x[k * block_size:(k + 1) * block_size], p, controller.weights)
            total += block.mse
            controller.update(block, k)
        mse[label] = total / n_blocks
    return mse["adaptive"] / mse["frozen"] if mse["frozen"] > 0 else 1.0


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_dataset(path, dataset: FilterDataset) -> Path:
    """ANCDS1 container (float64 rows) plus JSON sidecar"""
    path = write_container(path, DATASET_MAGIC, dataset.filters, dataset.sample_rate, "<f8")
    with open(_sidecar(path), "w") as f:
        json.dump({"positions": dataset.positions.tolist(), "scale": dataset.scale,
                   **dataset.metadata}, f, indent=2, default=str)
    return path


def read_dataset(path) -> FilterDataset:
    path = Path(path)
    filters, header = read_container(path, DATASET_MAGIC)
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise ContainerError(f"Dataset sidecar not found: {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    positions = np.asarray(meta.pop("positions"), dtype=np.float64)
    scale = float(meta.pop("scale"))
    return FilterDataset(filters, positions, scale, header["fs"], meta)


# =============================================================================
# LOSSES
# =============================================================================

def _gaussian_kernel(a: np.ndarray, b: np.ndarray, kernel_variance: float) -> np.ndarray:
    sq = (np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :] - 2.0 * a @ b.T)
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * kernel_variance))


def _mmd_with_grad(z: np.ndarray, prior: np.ndarray, kernel_variance: float) -> Tuple[float, np.ndarray]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    prior = np.atleast_2d(np.asarray(prior, dtype=np.float64))
    m, n = z.shape[0], prior.shape[0]
    if m < 2 or n < 2:
        raise DomainError(f"Unbiased MMD needs at least 2 samples per set, got {m} and {n}")
    if z.shape[1] != prior.shape[1]:
        raise ShapeError(f"Sample dimensions differ: {z.shape[1]} vs {prior.shape[1]}")
    if not kernel_variance > 0:
        raise DomainError(f"kernel_variance must be > 0, got {kernel_variance}")

    kzz = _gaussian_kernel(z, z, kernel_variance)
    kpp = _gaussian_kernel(prior, prior, kernel_variance)
    kzp = _gaussian_kernel(z, prior, kernel_variance)
    np.fill_diagonal(kzz, 0.0)
    np.fill_diagonal(kpp, 0.0)
    s = kernel_variance

    grad = -(2.0 / s) * (kzz.sum(axis=1)[:, None] * z - kzz @ z) / (m * (m - 1))
    if m == n:
        # paired U-statistic: cross terms with i == j excluded
        cross = kzp.copy()
        np.fill_diagonal(cross, 0.0)
        value = (kzz.sum() + kpp.sum() - 2.0 * cross.sum()) / (m * (m - 1))
        grad += (2.0 / s) * (cross.sum(axis=1)[:, None] * z - cross @ prior) / (m * (m - 1))
    else:
        value = kzz.sum() / (m * (m - 1)) + kpp.sum() / (n * (n - 1)) - 2.0 * kzp.mean()
        grad += (2.0 / s) * (kzp.sum(axis=1)[:, None] * z - kzp @ prior) / (m * n)
    return float(value), grad


def mmd_loss(z_samples: np.ndarray, prior_samples: np.ndarray,
             kernel_variance: float = TRAINING["kernel_variance"]) -> float:
    """Unbiased MMD^2 with a Gaussian kernel exp(-|a-b|^2 / (2 s))"""
    return _mmd_with_grad(z_samples, prior_samples, kernel_variance)[0]


def kl_loss(mean: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mean, exp(logvar)) || N(0, I)), averaged over the batch"""
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    per_row = 0.5 * np.sum(np.exp(logvar) + mean ** 2 - 1.0 - logvar, axis=1)
    return float(per_row.mean())


def reconstruct(model, batch: np.ndarray) -> np.ndarray:
    """D(E(w)) through the mean head"""
    return decode(model, model.encode_mean(batch))


def reconstruction_loss(model, batch: np.ndarray) -> float:
    """Mean over rows of the per-tap squared error between w and D(E(w))"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    return float(np.mean((reconstruct(model, batch) - batch) ** 2))


@dataclass
class MixupDraws:
    first: np.ndarray
    second: np.ndarray
    gamma: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, batch_rows: int, count: int) -> "MixupDraws":
        if batch_rows < 2:
            raise DomainError("Mixup needs a batch of at least 2 rows")
        return cls(rng.integers(0, batch_rows, count), rng.integers(0, batch_rows, count),
                   rng.uniform(0.0, 1.0, count))


def _mean_head(model: AutoencoderModel, head: np.ndarray) -> np.ndarray:
    return split_head(model, head)[0] if model.is_variational else head


def _pad_head(model: AutoencoderModel, g_mean: np.ndarray) -> np.ndarray:
    if not model.is_variational:
        return g_mean
    return np.concatenate((g_mean, np.zeros_like(g_mean)), axis=-1)


def _mixup_terms(model: AutoencoderModel, batch: np.ndarray, batch_tape, draws: MixupDraws,
                 adjoint: Optional[LossAdjoint], weight_c: float = 1.0,
                 weight_z: float = 1.0) -> Tuple[float, float]:
    gamma = draws.gamma[:, None]
    w_mix = gamma * batch[draws.first] + (1.0 - gamma) * batch[draws.second]
    mix_tape = encode_with_tape(model, w_mix)
    z_mix = _mean_head(model, mix_tape.head)
    w_rec, dec_tape = decode_with_tape(model, z_mix, Reparameterization(mix_tape))
    residual = w_rec - w_mix
    loss_c = float(np.mean(residual ** 2))

    z_batch = _mean_head(model, batch_tape.head)
    diff = gamma * z_batch[draws.first] + (1.0 - gamma) * z_batch[draws.second] - z_mix
    loss_z = float(np.mean(np.sum(diff ** 2, axis=1)))

    if adjoint is not None:
        adjoint.add_decoder(dec_tape, weight_c * 2.0 * residual / residual.size)
        g_diff = weight_z * 2.0 * diff / diff.shape[0]
        g_batch = np.zeros_like(z_batch)
        np.add.at(g_batch, draws.first, gamma * g_diff)
        np.add.at(g_batch, draws.second, (1.0 - gamma) * g_diff)
        adjoint.add_encoder(batch_tape, _pad_head(model, g_batch))
        adjoint.add_encoder(mix_tape, _pad_head(model, -g_diff))
    return loss_c, loss_z


def mixup_losses(model: AutoencoderModel, batch: np.ndarray, mixup_count: int = TRAINING["mixup_count"],
                 seed: int = 0) -> Tuple[float, float]:
    """(L_C, L_z) over mixup_count seeded convex combinations of batch rows"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    draws = MixupDraws.draw(np.random.default_rng(seed), batch.shape[0], mixup_count)
    return _mixup_terms(model, batch, encode_with_tape(model, batch), draws, None)


# =============================================================================
# OBJECTIVE
# =============================================================================

@dataclass
class TrainingConfig:
    batch_size: int = TRAINING["batch_size"]
    mixup: bool = TRAINING["mixup"]
    mixup_count: int = TRAINING["mixup_count"]
    epochs: int = TRAINING["epochs"]
    learning_rate: float = TRAINING["learning_rate"]
    beta1: float = TRAINING["beta1"]
    beta2: float = TRAINING["beta2"]
    adam_epsilon: float = TRAINING["adam_epsilon"]
    loss_weights: Dict[str, float] = field(default_factory=lambda: dict(TRAINING["loss_weights"]))
    kernel_variance: float = TRAINING["kernel_variance"]
    info_alpha: float = TRAINING["info_alpha"]
    validation_stride: int = TRAINING["validation_stride"]
    seed: int = TRAINING["seed"]

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.kernel_variance > 0:
            raise ConfigError(f"kernel_variance must be > 0, got {self.kernel_variance}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        self.loss_weights = {**TRAINING["loss_weights"], **self.loss_weights}


def build_training_config(section: Dict, **overrides) -> TrainingConfig:
    """TrainingConfig from a config 'training' section plus CLI overrides"""
    values = {**TRAINING, **section, **{k: v for k, v in overrides.items() if v is not None}}
    known = TrainingConfig.__dataclass_fields__
    return TrainingConfig(**{k: v for k, v in values.items() if k in known})


@dataclass
class BatchNoise:
    """Randomness of one training step, drawn up front"""
    eta: Optional[np.ndarray] = None
    prior: Optional[np.ndarray] = None
    mixup: Optional[MixupDraws] = None


def draw_batch_noise(rng: np.random.Generator, model: AutoencoderModel, rows: int,
                     config: TrainingConfig) -> BatchNoise:
    noise = BatchNoise()
    if model.is_variational:
        noise.eta = rng.standard_normal((rows, model.latent_dim))
    if model.variant == "infovae":
        noise.prior = rng.standard_normal((rows, model.latent_dim))
    if config.mixup and rows >= 2:
        noise.mixup = MixupDraws.draw(rng, rows, config.mixup_count)
    return noise


def batch_objective(model: AutoencoderModel, batch: np.ndarray, config: TrainingConfig,
                    noise: BatchNoise, with_grads: bool = True) -> Tuple[Dict[str, float], Optional[Dict[str, np.ndarray]]]:
    """Loss terms of one batch and (optionally) their parameter gradients"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    weights = config.loss_weights
    rows = batch.shape[0]
    adjoint = LossAdjoint() if with_grads else None
    losses = {"recon": 0.0, "kl": 0.0, "mmd": 0.0, "mixup_c": 0.0, "mixup_z": 0.0}

    tape = encode_with_tape(model, batch)
    head = tape.head
    g_head = np.zeros_like(head)

    if model.is_variational:
        mean, logvar = split_head(model, head)
        std = np.exp(0.5 * logvar)
        z = mean + std * noise.eta
        link = Reparameterization(tape, noise.eta)
    else:
        z = head
        link = Reparameterization(tape)

    w_rec, dec_tape = decode_with_tape(model, z, link)
    residual = w_rec - batch
    losses["recon"] = float(np.mean(residual ** 2))
    total = weights["recon"] * losses["recon"]
    if with_grads:
        adjoint.add_decoder(dec_tape, weights["recon"] * 2.0 * residual / residual.size)

    if model.is_variational:
        losses["kl"] = kl_loss(mean, logvar)
        kl_weight = weights["kl"] if model.variant == "vae" else (1.0 - config.info_alpha)
        total += kl_weight * losses["kl"]
        k = model.latent_dim
        g_head[:, :k] += kl_weight * mean / rows
        g_head[:, k:] += kl_weight * 0.5 * (np.exp(logvar) - 1.0) / rows

    # unbiased MMD is undefined for a single row
    if model.variant == "infovae" and rows >= 2:
        mmd_weight = config.info_alpha + weights["mmd"] - 1.0
        losses["mmd"], g_z = _mmd_with_grad(z, noise.prior, config.kernel_variance)
        total += mmd_weight * losses["mmd"]
        k = model.latent_dim
        g_head[:, :k] += mmd_weight * g_z
        g_head[:, k:] += mmd_weight * g_z * noise.eta * 0.5 * std

    if noise.mixup is not None:
        losses["mixup_c"], losses["mixup_z"] = _mixup_terms(
            model, batch, tape, noise.mixup, adjoint, weights["mixup_c"], weights["mixup_z"])
        total += weights["mixup_c"] * losses["mixup_c"] + weights["mixup_z"] * losses["mixup_z"]

    losses["total"] = float(total)
    if not with_grads:
        return losses, None
    if np.any(g_head):
        adjoint.add_encoder(tape, g_head)
    return losses, parameter_gradients(model, adjoint)


# =============================================================================
# OPTIMIZER + LOOP
# =============================================================================

class AdamOptimizer:
    """Adam with bias correction; updates the parameter arrays in place"""

    def __init__(self, params: Dict[str, np.ndarray], learning_rate: float = TRAINING["learning_rate"],
                 beta1: float = TRAINING["beta1"], beta2: float = TRAINING["beta2"],
                 epsilon: float = TRAINING["adam_epsilon"]):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.epsilon)


def batch_bounds(rows: int, batch_size: int) -> List[Tuple[int, int]]:
    """Minibatch [start, stop) bounds; a lone trailing row joins the batch before it"""
    starts = list(range(0, rows, batch_size))
    if len(starts) > 1 and rows - starts[-1] == 1:
        starts.pop()
    stops = starts[1:] + [rows]
    return list(zip(starts, stops))


HISTORY_COLUMNS = ["epoch", "total", "recon", "kl", "mmd", "mixup_c", "mixup_z", "validation"]


def train(model: AutoencoderModel, dataset: FilterDataset,
          config: Optional[TrainingConfig] = None) -> Tuple[AutoencoderModel, pd.DataFrame]:
    """
    Train a copy of model on the normalized dataset.

    Returns the trained copy and a per-epoch loss history. A non-finite loss
    raises TrainingError naming the epoch and batch.
    """
    config = config or TrainingConfig()
    logger = get_logger()
    if dataset.filter_len != model.filter_len:
        raise ShapeError(f"Dataset has {dataset.filter_len} taps, model expects {model.filter_len}")

    model = model.copy()
    data = dataset.normalized()
    train_rows, val_rows = dataset.split(config.validation_stride)
    rng = np.random.default_rng(config.seed)
    optimizer = AdamOptimizer(model.parameters(), config.learning_rate, config.beta1,
                              config.beta2, config.adam_epsilon)
    records = []

    logger.info(f"Training {model.variant} AE (L={model.filter_len}, h={model.hidden_dim}, "
                f"k={model.latent_dim}) on {len(train_rows)} rows, {len(val_rows)} held out, "
                f"mixup={'on' if config.mixup else 'off'}")

    for epoch in range(config.epochs):
        order = train_rows[rng.permutation(len(train_rows))]
        sums: Dict[str, float] = {}
        batches = 0
        for b, (start, stop) in enumerate(batch_bounds(len(order), config.batch_size)):
            batch = data[order[start:stop]]
            noise = draw_batch_noise(rng, model, batch.shape[0], config)
            losses, grads = batch_objective(model, batch, config, noise)
            if not np.isfinite(losses["total"]) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError("Non-finite training loss", epoch=epoch, batch=b)
            optimizer.step(grads)
            for key, value in losses.items():
                sums[key] = sums.get(key, 0.0) + value
            batches += 1

        means = {key: value / batches for key, value in sums.items()}
        validation = reconstruction_loss(model, data[val_rows]) if len(val_rows) else None
        records.append({"epoch": epoch, **means, "validation": validation})
        logger.epoch(epoch, means, validation)

    history = pd.DataFrame.from_records(records, columns=HISTORY_COLUMNS)
    final = records[-1] if records else {}
    model.metadata.update({
        "training": {**asdict(config), "epochs_run": config.epochs},
        "dataset_scale": dataset.scale,
        "final_losses": {k: final.get(k) for k in HISTORY_COLUMNS[1:]},
    })
    return model, history
