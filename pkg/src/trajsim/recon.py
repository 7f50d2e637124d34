"""Matched voxel projector pair and CGLS reconstruction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from ._parallel import ordered_map, worker_count
from ._pgm import write_pgm16
from .geometry import CArmPose, pose_to_rays
from .phantom import Phantom, mu_at

VOLUME_MAGIC = b"TRJVOL01"
_VOLUME_HEADER = struct.Struct("<3dd3I")


@dataclass
class ReconVolume:
    origin_mm: tuple  # corner of voxel (0, 0, 0)
    voxel_mm: float
    dims: tuple
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_mm <= 0:
            raise ValueError("voxel spacing must be positive")
        if min(self.dims) < 1:
            raise ValueError("volume needs at least one voxel per axis")
        if self.values is None:
            self.values = np.zeros(self.dims)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.dims:
            raise ValueError(f"values shape {self.values.shape} != dims {self.dims}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume values must be finite")

    @classmethod
    def centered(cls, n: int = 64, voxel_mm: float = 3.0, values=None) -> "ReconVolume":
        half = 0.5 * n * voxel_mm
        return cls((-half, -half, -half), voxel_mm, (n, n, n), values)

    def like(self, values) -> "ReconVolume":
        return ReconVolume(self.origin_mm, self.voxel_mm, self.dims, values)

    def centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) voxel centers in mm."""
        axes = [self.origin_mm[k] + self.voxel_mm * (np.arange(self.dims[k]) + 0.5) for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def same_geometry(self, other: "ReconVolume") -> bool:
        return (
            np.allclose(self.origin_mm, other.origin_mm)
            and np.isclose(self.voxel_mm, other.voxel_mm)
            and self.dims == other.dims
        )


def ground_truth_volume(phantom: Phantom, geometry: ReconVolume, supersample: int = 2, include_metal=True):
    """Analytic attenuation averaged over ``supersample**3`` points per voxel."""
    s = supersample
    offsets = (np.arange(s) + 0.5) / s - 0.5
    centers = geometry.centers()
    acc = np.zeros(geometry.dims)
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                pts = centers + geometry.voxel_mm * np.array([ox, oy, oz])
                acc += mu_at(phantom, pts, include_metal=include_metal)
    return geometry.like(acc / s**3)


class SystemOperator:
    """Ray-driven projector for a list of poses onto one volume grid."""

    def __init__(self, poses, geometry: ReconVolume):
        self.poses = list(poses)
        if not self.poses:
            raise ValueError("need at least one pose")
        self.geometry = geometry
        self.shape = (self.poses[0].det_rows, self.poses[0].det_cols)
        starts, ends = [], []
        for pose in self.poses:
            if (pose.det_rows, pose.det_cols) != self.shape:
                raise ValueError("all poses must share the detector shape")
            bundle = pose_to_rays(pose)
            ends.append(bundle.pixel_centers().reshape(-1, 3))
            starts.append(np.broadcast_to(bundle.source_mm, ends[-1].shape))
        self._starts = [np.ascontiguousarray(s) for s in starts]
        self._ends = ends
        self.starts = np.concatenate(self._starts)
        self.ends = np.concatenate(ends)

    @property
    def stack_shape(self) -> tuple:
        return (len(self.poses), *self.shape)

    def forward(self, values: np.ndarray) -> np.ndarray:
        g = self.geometry
        vol = np.ascontiguousarray(values, dtype=float)
        if worker_count() > 1:
            views = ordered_map(
                lambda k: kernels.forward(vol, g.origin_mm, g.voxel_mm, self._starts[k], self._ends[k]),
                range(len(self.poses)),
            )
            return np.stack(views).reshape(self.stack_shape)
        out = kernels.forward(vol, g.origin_mm, g.voxel_mm, self.starts, self.ends)
        return out.reshape(self.stack_shape)

    def adjoint(self, stack: np.ndarray) -> np.ndarray:
        stack = np.asarray(stack, dtype=float)
        if stack.shape != self.stack_shape:
            raise ValueError(f"stack shape {stack.shape} != {self.stack_shape}")
        g = self.geometry
        # sequential ray order keeps the accumulation bitwise reproducible
        return kernels.back(stack.ravel(), g.dims, g.origin_mm, g.voxel_mm, self.starts, self.ends)


def forward_project_volume(volume: ReconVolume, pose: CArmPose) -> np.ndarray:
    return SystemOperator([pose], volume).forward(volume.values)[0]


def backproject(stack, operator: SystemOperator) -> ReconVolume:
    return operator.geometry.like(operator.adjoint(stack))


@dataclass
class CGLSResult:
    volume: ReconVolume
    residual_norms: list  # ||b - A x_k||, k = 0..iters
    normal_residual_norms: list  # ||A^T (b - A x_k)||
    iterations: int
    stopped_early: bool = False


def cgls(projections, operator: SystemOperator, n_iters: int) -> CGLSResult:
    """Conjugate-gradient least squares from a zero volume."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    b = np.asarray(projections, dtype=float).reshape(operator.stack_shape)
    x = np.zeros(operator.geometry.dims)
    r = b.copy()
    s = operator.adjoint(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    res = [float(np.linalg.norm(r))]
    nres = [np.sqrt(gamma)]
    done = 0
    early = False
    for _ in range(n_iters):
        if gamma == 0.0:
            early = True
            break
        q = operator.forward(p)
        qq = float(np.vdot(q, q))
        if qq == 0.0:
            early = True
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = operator.adjoint(r)
        gamma_new = float(np.vdot(s, s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        res.append(float(np.linalg.norm(r)))
        nres.append(np.sqrt(gamma))
        done += 1
    return CGLSResult(operator.geometry.like(x), res, nres, done, early)


# ---------------------------------------------------------------------------
# files


def write_volume(volume: ReconVolume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(_VOLUME_HEADER.pack(*volume.origin_mm, volume.voxel_mm, *volume.dims))
        fh.write(np.ascontiguousarray(volume.values, dtype="<f4").tobytes())


def read_volume(path) -> ReconVolume:
    data = Path(path).read_bytes()
    if data[:8] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume file")
    ox, oy, oz, vs, nx, ny, nz = _VOLUME_HEADER.unpack_from(data, 8)
    off = 8 + _VOLUME_HEADER.size
    vals = np.frombuffer(data, dtype="<f4", count=nx * ny * nz, offset=off).reshape(nx, ny, nz)
    return ReconVolume((ox, oy, oz), vs, (nx, ny, nz), vals.astype(float))


def axial_slice(volume: ReconVolume, z_mm: float = 0.0) -> np.ndarray:
    """Slice nearest to ``z_mm`` as a (ny, nx) image."""
    k = int(np.floor((z_mm - volume.origin_mm[2]) / volume.voxel_mm))
    k = min(max(k, 0), volume.dims[2] - 1)
    return volume.values[:, :, k].T


def write_slice_pgm(volume: ReconVolume, path, z_mm: float = 0.0, vmin=0.0, vmax=None) -> np.ndarray:
    img = axial_slice(volume, z_mm)
    write_pgm16(img, path, vmin=vmin, vmax=vmax)
    return img
