"""Shared fixtures: quiet logger and tiny models"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from lfxlms import config as config_module
from lfxlms import logger as log_module
from lfxlms.errors import ShapeError
from lfxlms.neural import AutoencoderModel


@pytest.fixture(autouse=True)
def quiet_logger(tmp_path, monkeypatch):
    """Route the logger singleton's files into the test's temp dir"""
    monkeypatch.setitem(config_module.LOGGING, "log_dir", str(tmp_path / "logs"))
    monkeypatch.setitem(config_module.LOGGING, "log_level", "WARNING")
    instance = log_module.LfxlmsLogger(str(tmp_path / "logs"), console_level="WARNING")
    monkeypatch.setattr(log_module, "_logger", instance)
    return instance


@pytest.fixture
def make_model():
    def factory(variant="plain", filter_len=4, hidden_dim=3, latent_dim=2, seed=0):
        return AutoencoderModel.initialize(filter_len, hidden_dim, latent_dim, variant, seed=seed)
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class LinearDecoder:
    """Decoder double w = c A z; the encoder defaults to the pseudo-inverse"""

    def __init__(self, matrix, encoder=None, gain=1.0):
        self.matrix = np.asarray(matrix, dtype=np.float64) * gain
        if self.matrix.ndim != 2:
            raise ShapeError("Decoder matrix must be L x k")
        self.filter_len, self.latent_dim = self.matrix.shape
        self.encoder = np.linalg.pinv(self.matrix) if encoder is None else np.asarray(encoder, dtype=np.float64)

    def encode_mean(self, w):
        return np.asarray(w, dtype=np.float64) @ self.encoder.T

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) @ self.matrix.T

    def vjp(self, z, v):
        return np.asarray(v, dtype=np.float64) @ self.matrix

    def jvp(self, z, u):
        return self.matrix @ np.asarray(u, dtype=np.float64)
