"""Digitally reconstructed radiographs, Beer-Lambert counts and Poisson noise."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import CArmPose, pose_to_rays
from .phantom import Phantom, line_integrals

C_FLOOR = 0.5

STACK_MAGIC = b"TRJSTACK"
STACK_VERSION = 1
STACK_FLOAT = 0
STACK_COUNTS = 1
_VIEW_HEADER = struct.Struct("<ddII")


@dataclass(frozen=True)
class Projection:
    pose: CArmPose
    line_integrals: np.ndarray
    fluence_i0: float | None = None
    noisy_counts: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.pose.det_rows, self.pose.det_cols)
        if self.line_integrals.shape != shape:
            raise ValueError(f"raster shape {self.line_integrals.shape} != detector {shape}")
        if self.noisy_counts is not None and self.noisy_counts.shape != shape:
            raise ValueError("noisy_counts shape mismatch")

    def expected(self) -> np.ndarray:
        if self.fluence_i0 is None:
            raise ValueError("projection has no fluence")
        return expected_counts(self.line_integrals, self.fluence_i0)


def ray_grid(pose: CArmPose) -> tuple[np.ndarray, np.ndarray]:
    """(source, unit directions (rows*cols, 3)) for every pixel of a pose."""
    bundle = pose_to_rays(pose)
    return bundle.source_mm, bundle.directions().reshape(-1, 3)


def project(phantom: Phantom, pose: CArmPose, i0: float | None = None) -> Projection:
    src, dirs = ray_grid(pose)
    origins = np.broadcast_to(src, dirs.shape)
    p = line_integrals(phantom, origins, dirs).reshape(pose.det_rows, pose.det_cols)
    return Projection(pose, p, i0)


def expected_counts(p, i0: float):
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    return i0 * np.exp(-np.asarray(p, dtype=float))


def _stream(stream_seed: int, pose: CArmPose) -> np.random.Generator:
    # keyed by (seed, pose); pixel index is the position within the stream
    key = [int(stream_seed) & 0xFFFFFFFF, int(round(pose.phi_deg * 1e6)), int(round(pose.theta_deg * 1e6))]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def add_poisson_noise(projection: Projection, stream_seed: int) -> Projection:
    if projection.fluence_i0 is None:
        raise ValueError("fluence_i0 must be set before adding noise")
    ybar = projection.expected()
    counts = _stream(stream_seed, projection.pose).poisson(ybar.ravel()).reshape(ybar.shape)
    return replace(projection, noisy_counts=counts.astype(np.uint32))


def log_normalize(counts, i0: float) -> np.ndarray:
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    c = np.maximum(np.asarray(counts, dtype=float), C_FLOOR)
    return -np.log(c / i0)


# ---------------------------------------------------------------------------
# projection stack files


def write_stack(path, views, counts: bool = False) -> None:
    """Write ``(phi, theta, raster)`` records.

    Float stacks store 32-bit line integrals, count stacks 32-bit unsigned counts.
    """
    kind = STACK_COUNTS if counts else STACK_FLOAT
    dtype = "<u4" if counts else "<f4"
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC + struct.pack("<II", STACK_VERSION, kind))
        for phi, theta, raster in views:
            raster = np.asarray(raster)
            fh.write(_VIEW_HEADER.pack(float(phi), float(theta), raster.shape[0], raster.shape[1]))
            fh.write(np.ascontiguousarray(raster, dtype=dtype).tobytes())


def read_stack(path) -> tuple[bool, list[tuple[float, float, np.ndarray]]]:
    """Returns (is_counts, records)."""
    data = Path(path).read_bytes()
    if data[:8] != STACK_MAGIC:
        raise ValueError(f"{path}: not a projection stack")
    version, kind = struct.unpack_from("<II", data, 8)
    if version != STACK_VERSION:
        raise ValueError(f"{path}: unsupported stack version {version}")
    dtype = np.dtype("<u4") if kind == STACK_COUNTS else np.dtype("<f4")
    off = 16
    views = []
    while off < len(data):
        phi, theta, rows, cols = _VIEW_HEADER.unpack_from(data, off)
        off += _VIEW_HEADER.size
        n = rows * cols
        raster = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(rows, cols)
        off += n * dtype.itemsize
        views.append((phi, theta, raster))
    return kind == STACK_COUNTS, views
