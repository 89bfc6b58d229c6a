"""
Binary containers for impulse-response banks and filter datasets.

Layout: one ASCII header line, then little-endian row-major float data.

    ANCRIR1 L=512 fs=16000 count=2048 dtype=<f4\\n<raw bytes>
    ANCDS1 L=512 fs=16000 count=2048 dtype=<f8\\n<raw bytes>

Source positions travel in a sidecar whitespace table (index x y z).
"""

import hashlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ContainerError

RIR_MAGIC = "ANCRIR1"
DATASET_MAGIC = "ANCDS1"

PathLike = Union[str, Path]


def write_container(path: PathLike, magic: str, rows: np.ndarray,
                    sample_rate: int, dtype: str) -> Path:
    """Write a 2-D array (count x L) under a textual header"""
    rows = np.atleast_2d(np.asarray(rows))
    count, length = rows.shape
    data = rows.astype(np.dtype(dtype).newbyteorder("<"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{magic} L={length} fs={int(sample_rate)} count={count} dtype={data.dtype.str}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes(order="C"))
    return path


def read_container(path: PathLike, magic: str) -> Tuple[np.ndarray, Dict[str, int]]:
    """Read a container written by write_container; returns (rows, header)"""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"Container not found: {path}")
    with open(path, "rb") as f:
        header_line = f.readline().decode("ascii", errors="replace").strip()
        payload = f.read()

    tokens = header_line.split()
    if not tokens or tokens[0] != magic:
        raise ContainerError(f"{path}: expected magic {magic}, got '{tokens[0] if tokens else ''}'")
    try:
        fields = dict(token.split("=", 1) for token in tokens[1:])
        length = int(fields["L"])
        sample_rate = int(fields["fs"])
        count = int(fields["count"])
        dtype = np.dtype(fields["dtype"])
    except (KeyError, ValueError, TypeError) as e:
        raise ContainerError(f"{path}: malformed header '{header_line}'") from e

    expected = count * length * dtype.itemsize
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    rows = np.frombuffer(payload, dtype=dtype).reshape(count, length).astype(np.float64)
    return rows, {"L": length, "fs": sample_rate, "count": count}


def positions_path(container_path: PathLike) -> Path:
    """Sidecar path for the position table of a container"""
    path = Path(container_path)
    return path.with_name(path.stem + "_positions.txt")


def write_positions(path: PathLike, positions: np.ndarray) -> Path:
    """Write an (n x 3) position table as 'index x y z' rows"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    table = pd.DataFrame(positions, columns=["x", "y", "z"])
    table.insert(0, "index", np.arange(len(positions)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, sep=" ", index=False, float_format="%.9f")
    return path


def read_positions(path: PathLike) -> np.ndarray:
    """Read a position table back into an (n x 3) array ordered by index"""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"Position table not found: {path}")
    table = pd.read_csv(path, sep=r"\s+")
    missing = {"index", "x", "y", "z"} - set(table.columns)
    if missing:
        raise ContainerError(f"{path}: missing columns {sorted(missing)}")
    table = table.sort_values("index")
    return table[["x", "y", "z"]].to_numpy(dtype=np.float64)


def realization_hash(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw bytes of the given arrays (paired-trial audit)"""
    digest = hashlib.sha256()
    for array in arrays:
        a = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
        digest.update(str(a.shape).encode("ascii"))
        digest.update(a.tobytes())
    return digest.hexdigest()
