"""
Shoebox room impulse responses via the image source model

Primary path p (noise source -> error mic) and secondary path g
(control speaker -> error mic) are both synthesized here. Every image
source is placed with a Hann-windowed sinc fractional delay, attenuated by
beta per wall bounce and by 1/(4 pi d) spherical spreading.

beta comes from the room's absorption model. "sabine" and "eyring" use
beta = sqrt(1 - alpha) with the closed-form inversions. "calibrated" (the
default) searches beta so the Schroeder RT60 of simulated responses equals
the requested rt60.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache, partial
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .config import ROOM
from .errors import ConfigError, DomainError, ShapeError
from .storage import (RIR_MAGIC, positions_path, read_container, read_positions,
                      write_container, write_positions)

# Sabine's constant 24 ln(10) / c at c = 343 m/s
SABINE_CONSTANT = 0.161

ABSORPTION_MODELS = ("calibrated", "sabine", "eyring")
INVERSION_MODELS = ("sabine", "eyring")

# source/mic pairs as fractions of the room dimensions
CALIBRATION_PAIRS = (
    ((0.25, 0.30, 0.35), (0.70, 0.65, 0.50)),
    ((0.60, 0.20, 0.30), (0.30, 0.75, 0.60)),
    ((0.40, 0.70, 0.70), (0.80, 0.40, 0.30)),
)
CALIBRATION_TOL = 0.005
CALIBRATION_STEPS = 12
KAPPA_BOUNDS = (1e-4, 60.0)


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room and the discretization of its impulse responses"""
    dimensions: Tuple[float, float, float] = tuple(ROOM["dimensions"])
    rt60: float = ROOM["rt60"]
    sample_rate: int = ROOM["sample_rate"]
    rir_length: int = ROOM["rir_length"]
    speed_of_sound: float = ROOM["speed_of_sound"]
    max_order: Optional[int] = ROOM["max_order"]
    sinc_taps: int = ROOM["sinc_taps"]
    absorption_model: str = ROOM["absorption_model"]

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ConfigError(f"Room dimensions must be three positive lengths, got {dims}")
        if self.rt60 < 0:
            raise ConfigError(f"rt60 must be >= 0, got {self.rt60}")
        if self.rir_length <= 0:
            raise ConfigError(f"rir_length must be > 0, got {self.rir_length}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.speed_of_sound <= 0:
            raise ConfigError(f"speed_of_sound must be > 0, got {self.speed_of_sound}")
        if self.max_order is not None and self.max_order < 0:
            raise ConfigError(f"max_order must be >= 0, got {self.max_order}")
        if self.sinc_taps < 1 or self.sinc_taps % 2 == 0:
            raise ConfigError(f"sinc_taps must be a positive odd count, got {self.sinc_taps}")
        if self.absorption_model not in ABSORPTION_MODELS:
            raise ConfigError(f"absorption_model must be one of {ABSORPTION_MODELS}")

    @property
    def volume(self) -> float:
        x, y, z = self.dimensions
        return x * y * z

    @property
    def surface_area(self) -> float:
        x, y, z = self.dimensions
        return 2.0 * (x * y + y * z + x * z)

    def contains(self, point: Sequence[float]) -> bool:
        """True when the point lies strictly inside the room"""
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions)))


@dataclass
class ImpulseResponse:
    """Fixed-length FIR tap vector with its sample rate"""
    taps: np.ndarray
    sample_rate: int = ROOM["sample_rate"]

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or self.taps.size == 0:
            raise ShapeError(f"Impulse response must be a non-empty vector, got shape {self.taps.shape}")
        if not np.all(np.isfinite(self.taps)):
            raise DomainError("Impulse response contains non-finite taps")

    def __len__(self) -> int:
        return self.taps.size

    @property
    def energy(self) -> float:
        return float(np.dot(self.taps, self.taps))

    @classmethod
    def delta(cls, length: int, sample_rate: int = ROOM["sample_rate"], delay: int = 0) -> "ImpulseResponse":
        """Unit impulse (optionally delayed)"""
        taps = np.zeros(length)
        taps[delay] = 1.0
        return cls(taps, sample_rate)


def build_room(section: dict) -> RoomSpec:
    """RoomSpec from a config 'room' section"""
    try:
        return RoomSpec(
            dimensions=tuple(section["dimensions"]),
            rt60=float(section["rt60"]),
            sample_rate=int(section["sample_rate"]),
            rir_length=int(section["rir_length"]),
            speed_of_sound=float(section.get("speed_of_sound", ROOM["speed_of_sound"])),
            max_order=section.get("max_order"),
            sinc_taps=int(section.get("sinc_taps", ROOM["sinc_taps"])),
            absorption_model=section.get("absorption_model", ROOM["absorption_model"]),
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Invalid room section: {e}") from e


def absorption_from_rt60(room: RoomSpec, model: str = "sabine") -> float:
    """
    Closed-form uniform wall absorption for the room's RT60.

    sabine: alpha = 0.161 V / (S rt60)
    eyring: alpha = 1 - exp(-0.161 V / (S rt60))
    Both are clamped to (0, 1]; rt60 = 0 is the anechoic sentinel (1.0).
    """
    if model not in INVERSION_MODELS:
        raise ConfigError(f"Unknown absorption model '{model}'")
    if room.rt60 == 0:
        return 1.0
    ratio = SABINE_CONSTANT * room.volume / (room.surface_area * room.rt60)
    alpha = ratio if model == "sabine" else -math.expm1(-ratio)
    return float(min(alpha, 1.0))


def derive_max_order(room: RoomSpec) -> int:
    """
    Smallest reflection order whose images all lie beyond the RIR window.

    An image with order N is at least (N - 3) * min_dim / sqrt(3) away from
    any receiver inside the room.
    """
    if room.rt60 == 0:
        return 0
    reach = room.speed_of_sound * (room.rir_length + room.sinc_taps / 2) / room.sample_rate
    return int(math.floor(math.sqrt(3.0) * reach / min(room.dimensions))) + 4


def _image_sources(room: RoomSpec, source: np.ndarray, max_order: int,
                   reach: float) -> Tuple[np.ndarray, np.ndarray]:
    """Image positions (n x 3) and their reflection orders"""
    dims = np.asarray(room.dimensions)
    axes = []
    for axis in range(3):
        bound = min(max_order, int(math.ceil(reach / dims[axis])) + 1)
        axes.append(np.arange(-bound, bound + 1))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    order = np.abs(grid).sum(axis=1)
    grid = grid[order <= max_order]
    order = order[order <= max_order]

    odd = (grid % 2) != 0
    # even n: n*L + s ; odd n: (n+1)*L - s
    positions = np.where(odd, (grid + 1) * dims - source, grid * dims + source)
    return positions, order


def reflection_coefficient(room: RoomSpec) -> float:
    """Per-bounce amplitude factor beta of the room's absorption model"""
    if room.rt60 == 0:
        return 0.0
    if room.absorption_model == "calibrated":
        return _calibrated_beta(room.dimensions, room.rt60, room.sample_rate,
                                room.speed_of_sound, room.sinc_taps, room.max_order)
    alpha = absorption_from_rt60(room, room.absorption_model)
    return math.sqrt(max(0.0, 1.0 - alpha))


@lru_cache(maxsize=32)
def _calibrated_beta(dimensions: Tuple[float, float, float], rt60: float, sample_rate: int,
                     speed_of_sound: float, sinc_taps: int, max_order: Optional[int]) -> float:
    """
    beta whose simulated Schroeder RT60, averaged over CALIBRATION_PAIRS,
    matches rt60 to within CALIBRATION_TOL.

    Image-source decay is slower than the diffuse-field (Eyring) law, most
    so at high absorption. The search starts from the Eyring loss per bounce
    kappa = -ln(beta^2) and rescales it by measured / target; the measured
    RT60 is close to proportional to 1 / kappa.
    """
    diagonal = math.sqrt(sum(d * d for d in dimensions))
    length = int(math.ceil(sample_rate * (0.9 * rt60 + diagonal / speed_of_sound))) + sinc_taps
    room = RoomSpec(dimensions, rt60, sample_rate, length, speed_of_sound, max_order,
                    sinc_taps, "eyring")
    order = max_order if max_order is not None else derive_max_order(room)
    dims = np.asarray(dimensions)
    pairs = [(dims * np.asarray(s), dims * np.asarray(m)) for s, m in CALIBRATION_PAIRS]

    kappa = SABINE_CONSTANT * room.volume / (room.surface_area * rt60)
    for _ in range(CALIBRATION_STEPS):
        beta = math.exp(-0.5 * kappa)
        estimates = []
        for source, mic in pairs:
            ir = ImpulseResponse(_render(room, source, mic, beta, order), sample_rate)
            try:
                estimates.append(schroeder_rt60(ir))
            except DomainError:
                # decay too slow for the calibration window
                estimates.append(2.0 * rt60)
        measured = float(np.mean(estimates))
        if abs(measured / rt60 - 1.0) <= CALIBRATION_TOL:
            break
        if measured <= 0:
            kappa = kappa / 2.0
        else:
            kappa = kappa * measured / rt60
        kappa = min(max(kappa, KAPPA_BOUNDS[0]), KAPPA_BOUNDS[1])
    return math.exp(-0.5 * kappa)


def simulate_rir(room: RoomSpec, source: Sequence[float], mic: Sequence[float]) -> ImpulseResponse:
    """Impulse response from source to mic, truncated to room.rir_length taps"""
    source = np.asarray(source, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if source.shape != (3,) or mic.shape != (3,):
        raise ShapeError("source and mic must be 3-vectors")
    if not room.contains(source):
        raise DomainError(f"Source {source.tolist()} is not strictly inside the room {room.dimensions}")
    if not room.contains(mic):
        raise DomainError(f"Mic {mic.tolist()} is not strictly inside the room {room.dimensions}")
    if np.array_equal(source, mic):
        raise DomainError("Source and mic coincide (infinite gain)")

    beta = reflection_coefficient(room)
    max_order = room.max_order if room.max_order is not None else derive_max_order(room)
    if beta <= 0.0:
        max_order = 0
    return ImpulseResponse(_render(room, source, mic, beta, max_order), room.sample_rate)


def _render(room: RoomSpec, source: np.ndarray, mic: np.ndarray, beta: float, max_order: int) -> np.ndarray:
    """Windowed-sinc image sum over room.rir_length taps"""
    fs = room.sample_rate
    c = room.speed_of_sound
    length = room.rir_length
    half = room.sinc_taps // 2

    reach = c * (length + half) / fs
    images, order = _image_sources(room, source, max_order, reach)
    distance = np.linalg.norm(images - mic, axis=1)
    delay = distance * fs / c
    keep = delay < length + half
    distance, delay, order = distance[keep], delay[keep], order[keep]

    amplitude = np.power(beta, order) / (4.0 * math.pi * distance)

    offsets = np.arange(-half, half + 1)
    taps_idx = np.rint(delay).astype(np.int64)[:, None] + offsets[None, :]
    t = taps_idx - delay[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * math.pi * t / room.sinc_taps))
    values = amplitude[:, None] * window * np.sinc(t)

    valid = (taps_idx >= 0) & (taps_idx < length)
    h = np.zeros(length)
    np.add.at(h, taps_idx[valid], values[valid])
    return h


def schroeder_rt60(ir: ImpulseResponse, start_db: float = -5.0, end_db: float = -25.0) -> float:
    """
    RT60 from Schroeder backward integration.

    Linear fit of the energy decay curve between start_db and end_db,
    extrapolated to 60 dB (three times the 20 dB span).
    """
    energy = np.square(ir.taps)
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise DomainError("All-zero impulse response has no decay")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    times = np.arange(edc.size) / ir.sample_rate

    window = (edc_db <= start_db) & (edc_db >= end_db)
    if np.count_nonzero(window) >= 2:
        slope, _ = np.polyfit(times[window], edc_db[window], 1)
        if slope >= 0:
            raise DomainError("Energy decay curve is not decreasing")
        return float(-60.0 / slope)

    # Decay faster than one sample per 20 dB (e.g. a lone impulse)
    below_start = np.flatnonzero(edc_db <= start_db)
    below_end = np.flatnonzero(edc_db <= end_db)
    if below_start.size == 0 or below_end.size == 0:
        raise DomainError(f"Energy decay never reaches {end_db} dB within {edc.size} taps")
    span = (below_end[0] - below_start[0]) / ir.sample_rate
    return float(3.0 * span)


def segment_positions(segment: Sequence[Sequence[float]], n: int) -> np.ndarray:
    """n evenly spaced points on a segment, endpoints included"""
    start, end = (np.asarray(p, dtype=np.float64) for p in segment)
    if n < 1:
        raise ConfigError(f"Need at least one position, got {n}")
    if n == 1:
        return start[None, :].copy()
    t = np.linspace(0.0, 1.0, n)
    return start[None, :] + t[:, None] * (end - start)[None, :]


def simulate_rir_bank(room: RoomSpec, sources: Iterable[Sequence[float]],
                      mic: Sequence[float], workers: int = 1) -> np.ndarray:
    """Impulse responses (count x L) for many source positions"""
    sources = [np.asarray(s, dtype=np.float64) for s in sources]
    job = partial(_bank_row, room, np.asarray(mic, dtype=np.float64))
    if workers > 1 and len(sources) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, sources, chunksize=max(1, len(sources) // (4 * workers))))
    else:
        rows = [job(s) for s in sources]
    return np.vstack(rows) if rows else np.zeros((0, room.rir_length))


def _bank_row(room: RoomSpec, mic: np.ndarray, source: np.ndarray) -> np.ndarray:
    return simulate_rir(room, source, mic).taps


def write_rir_bank(path, irs: np.ndarray, positions: np.ndarray, sample_rate: int) -> Path:
    """Write an RIR bank (float32 taps) and its position sidecar"""
    path = write_container(path, RIR_MAGIC, irs, sample_rate, "<f4")
    write_positions(positions_path(path), positions)
    return path


def read_rir_bank(path) -> Tuple[np.ndarray, np.ndarray, int]:
    """Read an RIR bank; returns (irs, positions, sample_rate)"""
    irs, header = read_container(path, RIR_MAGIC)
    positions = read_positions(positions_path(path))
    if len(positions) != header["count"]:
        raise ShapeError(f"{path}: {header['count']} responses but {len(positions)} positions")
    return irs, positions, header["fs"]
