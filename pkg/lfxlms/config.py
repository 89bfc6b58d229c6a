"""
Latent FxLMS - Simulation Configuration
Full-scale defaults, desk-scale overlay, and JSON config loading
"""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .errors import ConfigError

# =============================================================================
# ROOM (shoebox, image source model)
# =============================================================================

ROOM = {
    "dimensions": [6.0, 6.2, 3.0],  # meters
    "rt60": 0.15,                   # seconds
    "sample_rate": 16000,           # Hz
    "rir_length": 512,              # taps L (shared by p, g, g_hat and w)
    "speed_of_sound": 343.0,        # m/s
    "max_order": None,              # None = derived from rir_length
    "sinc_taps": 81,                # Hann-windowed sinc fractional delay
    "absorption_model": "calibrated",  # calibrated | sabine | eyring
}

# =============================================================================
# GEOMETRY
# =============================================================================

GEOMETRY = {
    "speaker": [3.0, 2.5, 1.5],     # secondary (control) source
    "error_mic": [4.5, 3.0, 1.5],   # cancellation point
    "segment": [[1.5, 1.0, 1.0], [3.0, 2.0, 2.0]],  # primary source region
}

# =============================================================================
# ANC (FxLMS baseline + convergence rule used to build the dataset)
# =============================================================================

ANC = {
    "block_size": 100,              # samples per block (6.25 ms at 16 kHz)
    "mu": 10.0,                     # baseline FxLMS step size
    "epsilon": 1e-8,                # normalization floor
    "noise_kind": "white_gaussian",
    "noise_variance": 1.0,
    "g_hat_perturbation": 0.0,      # 0 = g_hat equals g
    "dataset_mu": 5.0,              # step size for converge_filter
    "max_blocks": 1000,             # converge_filter stop rule
    "tol": 1e-3,                    # relative change of trailing-window block MSE
    "stop_window": 40,              # blocks
    "divergence_factor": 10.0,      # MSE above this x ANC-OFF = diverged
    "max_retries": 3,               # halve mu and retry a diverged position
}

# =============================================================================
# AUTOENCODER
# =============================================================================

MODEL = {
    "variant": "plain",             # plain | vae | infovae
    "hidden_dim": 256,
    "latent_dim": 32,
    "ln_epsilon": 1e-5,             # layer norm variance floor
    "seed": 0,
}

# =============================================================================
# TRAINING
# =============================================================================

TRAINING = {
    "batch_size": 64,
    "mixup": False,
    "mixup_count": 256,             # convex combinations per batch
    "epochs": 500,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_epsilon": 1e-8,
    "loss_weights": {
        "recon": 1.0,
        "kl": 1.0,
        "mmd": 1000.0,              # lambda
        "mixup_c": 1.0,
        "mixup_z": 1.0,
    },
    "kernel_variance": 0.01,
    "info_alpha": 1.0,
    "validation_stride": 10,        # every 10th position held out
    "seed": 0,
}

# =============================================================================
# LATENT FxLMS
# =============================================================================

LATENT = {
    "scheme": "latent",             # data | latent
    "mu_z": 0.1,
    "epsilon": 1e-8,
    "denominator_mode": "blockend", # blockend | persample
    "latent_grid": [0.05, 0.075, 0.1, 0.15, 0.2, 0.25, 0.3],
    "data_grid": [5.0, 10.0, 20.0, 35.0, 50.0, 75.0, 100.0],
    "fxlms_grid": [1.0, 2.0, 5.0, 10.0, 20.0, 35.0, 50.0],
    "probe_trials": 3,
    "probe_blocks": 150,
}

# =============================================================================
# EXPERIMENT
# =============================================================================

EXPERIMENT = {
    "n_trials": 50,
    "n_blocks": 300,
    "switch_block": 100,
    "steady_window": 40,
    "rho": 0.4,
    "n_positions": 2048,            # dataset size
    "seed": 1234,                   # master seed
    "workers": 1,                   # trial / dataset processes
    "output_dir": "results",
    "dataset": "results/dataset.bin",
    "models_dir": "results/models",
    "acceptance": False,            # evaluate the desk-scale pass/fail checks
    "controllers": [
        {"name": "fxlms", "kind": "fxlms", "mu": 10.0},
    ],
}

# =============================================================================
# LOGGING
# =============================================================================

LOGGING = {
    "log_level": "INFO",
    "log_dir": "logs",
}

# =============================================================================
# SCALE OVERLAYS
# =============================================================================

FULL_SCALE = {
    "room": {"rir_length": 512},
    "model": {"hidden_dim": 256, "latent_dim": 32},
    "experiment": {"n_trials": 50, "n_positions": 2048},
}

# 256 taps: at 128 the direct primary path (87-170 samples) leaves the window
DESK_SCALE = {
    "room": {"rir_length": 256},
    "model": {"hidden_dim": 128, "latent_dim": 16},
    "experiment": {"n_trials": 10, "n_positions": 256},
}

DEFAULTS = {
    "room": ROOM,
    "geometry": GEOMETRY,
    "anc": ANC,
    "model": MODEL,
    "training": TRAINING,
    "latent": LATENT,
    "experiment": EXPERIMENT,
    "logging": LOGGING,
}


def _deep_merge(base: Dict, override: Dict, path: str = "") -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value, f"{path}{key}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_config(scale: Optional[str] = None) -> Dict[str, Any]:
    """Defaults, optionally with the 'full' or 'desk' overlay applied"""
    config = copy.deepcopy(DEFAULTS)
    if scale is None:
        return config
    overlays = {"full": FULL_SCALE, "desk": DESK_SCALE}
    if scale not in overlays:
        raise ConfigError(f"Unknown scale '{scale}' (expected full or desk)")
    return _deep_merge(config, overlays[scale])


def merge_config(override: Dict[str, Any]) -> Dict[str, Any]:
    """Merge a (partial) config document over the defaults"""
    unknown = set(override) - set(DEFAULTS) - {"scale", "schema_version"}
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
    return _deep_merge(default_config(override.get("scale")), override)


def load_config(path: Union[str, Path, None]) -> Dict[str, Any]:
    """Load a JSON config file and merge it over the defaults"""
    if path is None:
        return default_config()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        with open(config_path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {config_path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"Config root must be an object: {config_path}")
    config = merge_config(document)
    config["config_path"] = str(config_path)
    return config
