"""
Model Resource Module
Binary files for fitted projections (PRJ1) and PLDA models (PLDA1).
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from errors import CorruptArchive, UnsupportedFormat
from tools.plda import PldaModel
from tools.preprocess import Projection

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PROJECTION_MAGIC = b"PRJ1"
PLDA_MAGIC = b"PLDA1"


def _read_block(data: bytes, offset: int, count: int, path: PathLike) -> np.ndarray:
    end = offset + 8 * count
    if end > len(data):
        raise CorruptArchive(f"{path}: file is truncated")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)


def write_projection(projection: Projection, path: PathLike) -> None:
    """Mean, then the basis in column-major order, both as little-endian f64."""
    d, k = projection.basis.shape
    payload = [
        PROJECTION_MAGIC,
        struct.pack("<II", d, k),
        projection.mean.astype("<f8").tobytes(),
        projection.basis.astype("<f8").tobytes(order="F"),
    ]
    Path(path).write_bytes(b"".join(payload))
    logger.debug("wrote %dx%d projection to %s", d, k, path)


def read_projection(path: PathLike) -> Projection:
    data = Path(path).read_bytes()
    if data[:4] != PROJECTION_MAGIC:
        raise UnsupportedFormat(f"{path}: missing PRJ1 magic")
    if len(data) < 12:
        raise CorruptArchive(f"{path}: truncated header")
    d, k = struct.unpack_from("<II", data, 4)
    if d < 1 or k < 1:
        raise CorruptArchive(f"{path}: invalid projection shape {d}x{k}")
    expected = 12 + 8 * (d + d * k)
    if len(data) != expected:
        raise CorruptArchive(f"{path}: expected {expected} bytes, found {len(data)}")
    mean = _read_block(data, 12, d, path)
    basis = _read_block(data, 12 + 8 * d, d * k, path).reshape((d, k), order="F")
    return Projection(mean=mean, basis=basis)


def write_plda(model: PldaModel, path: PathLike) -> None:
    """Magic, u32 dim, u8 diag flag, then mu, Phi_B, Phi_W row-major f64."""
    payload = [
        PLDA_MAGIC,
        struct.pack("<IB", model.dim, 1 if model.diag_constrained else 0),
        model.mu.astype("<f8").tobytes(),
        model.phi_b.astype("<f8").tobytes(order="C"),
        model.phi_w.astype("<f8").tobytes(order="C"),
    ]
    Path(path).write_bytes(b"".join(payload))
    logger.debug("wrote dim-%d PLDA model to %s", model.dim, path)


def read_plda(path: PathLike) -> PldaModel:
    data = Path(path).read_bytes()
    if data[:5] != PLDA_MAGIC:
        raise UnsupportedFormat(f"{path}: missing PLDA1 magic")
    header = len(PLDA_MAGIC) + 5
    if len(data) < header:
        raise CorruptArchive(f"{path}: truncated header")
    d, flag = struct.unpack_from("<IB", data, len(PLDA_MAGIC))
    if d < 1 or flag not in (0, 1):
        raise CorruptArchive(f"{path}: invalid header (dim={d}, diag flag={flag})")
    expected = header + 8 * (d + 2 * d * d)
    if len(data) != expected:
        raise CorruptArchive(f"{path}: expected {expected} bytes, found {len(data)}")
    mu = _read_block(data, header, d, path)
    phi_b = _read_block(data, header + 8 * d, d * d, path).reshape(d, d)
    phi_w = _read_block(data, header + 8 * (d + d * d), d * d, path).reshape(d, d)
    try:
        return PldaModel(mu=mu, phi_b=phi_b, phi_w=phi_w, diag_constrained=bool(flag))
    except ValueError as exc:
        raise CorruptArchive(f"{path}: {exc}")
