"""Task-based detectability index of a single view.

The local penalized-likelihood model gives

    mtf(f) = A / (A + beta R),   nps(f) = A / (A + beta R)**2

with Fisher information ``A`` concentrated on a softened central slice
perpendicular to the ray through the task center, and the first-difference
penalty spectrum ``R(f) = sum_k 4 sin^2(pi f_k dx)``. The detectability index
is the ratio of the squared task-weighted signal integral to the noise
integral, evaluated as a Riemann sum on a cubic frequency grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from ._pgm import write_pgm16
from .geometry import CArmPose, pose_to_rays
from .phantom import Phantom, TaskRegion, line_integral


class DetectabilityError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    n: int = 32
    df: float = 1.0 / 96.0

    def __post_init__(self):
        if self.n < 8 or self.n % 2:
            raise DetectabilityError("grid size must be even and >= 8")
        if self.df <= 0:
            raise DetectabilityError("df must be positive")

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.df

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.axis
        return np.meshgrid(a, a, a, indexing="ij")

    @property
    def cell(self) -> float:
        return self.df**3


@dataclass(frozen=True)
class DetectabilityConfig:
    beta: float = 1e3
    slab_sigma: float | None = None  # defaults to 2 * df
    epsilon_a: float = 1.0
    i0: float = 20000.0
    voxel_mm: float = 3.0
    grid_n: int = 32

    def __post_init__(self):
        if self.beta <= 0:
            raise DetectabilityError("beta must be positive")
        if self.slab_sigma is not None and self.slab_sigma <= 0:
            raise DetectabilityError("slab_sigma must be positive")
        if self.epsilon_a < 0:
            raise DetectabilityError("epsilon_a must be non-negative")
        if self.i0 <= 0:
            raise DetectabilityError("i0 must be positive")
        if self.voxel_mm <= 0:
            raise DetectabilityError("voxel_mm must be positive")

    def grid(self) -> FrequencyGrid:
        # spans up to the voxel Nyquist frequency
        return FrequencyGrid(self.grid_n, 1.0 / (self.grid_n * self.voxel_mm))

    def sigma(self, grid: FrequencyGrid) -> float:
        return self.slab_sigma if self.slab_sigma is not None else 2.0 * grid.df


@dataclass(frozen=True)
class TaskFunction:
    grid: FrequencyGrid
    w: np.ndarray

    def __post_init__(self):
        if self.w.shape != (self.grid.n,) * 3:
            raise DetectabilityError("task raster does not match grid")
        if np.any(self.w < 0) or not np.any(self.w > 0):
            raise DetectabilityError("task weights must be non-negative with a positive entry")

    def scaled(self, c: float) -> "TaskFunction":
        return TaskFunction(self.grid, c * self.w)


@dataclass(frozen=True)
class SpectralResponse:
    grid: FrequencyGrid
    a: np.ndarray
    mtf: np.ndarray
    nps: np.ndarray


@dataclass
class DetectabilityMap:
    phis: np.ndarray
    thetas: np.ndarray
    d2: np.ndarray  # (len(phis), len(thetas))

    def __post_init__(self):
        self.phis = np.asarray(self.phis, dtype=float)
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.d2 = np.asarray(self.d2, dtype=float)
        if self.d2.shape != (self.phis.size, self.thetas.size):
            raise DetectabilityError("map shape does not match its grids")

    def _index(self, values, v, name):
        idx = np.flatnonzero(np.abs(values - v) < 1e-9)
        if idx.size == 0:
            raise DetectabilityError(f"{name}={v} is not on the map grid")
        return int(idx[0])

    def lookup(self, phi: float, theta: float) -> float:
        return float(self.d2[self._index(self.phis, phi % 360.0, "phi"), self._index(self.thetas, theta, "theta")])

    def bilinear(self, phi: float, theta: float) -> float:
        """Bilinear lookup; phi wraps when the grid covers the full circle."""
        fi = np.interp(phi, self.phis, np.arange(self.phis.size))
        fj = np.interp(theta, self.thetas, np.arange(self.thetas.size))
        if not (self.phis[0] - 1e-9 <= phi <= self.phis[-1] + 1e-9):
            raise DetectabilityError(f"phi={phi} outside map range")
        if not (self.thetas[0] - 1e-9 <= theta <= self.thetas[-1] + 1e-9):
            raise DetectabilityError(f"theta={theta} outside map range")
        i0, j0 = int(np.floor(fi)), int(np.floor(fj))
        i1, j1 = min(i0 + 1, self.phis.size - 1), min(j0 + 1, self.thetas.size - 1)
        a, b = fi - i0, fj - j0
        d = self.d2
        return float(
            (1 - a) * (1 - b) * d[i0, j0] + a * (1 - b) * d[i1, j0] + (1 - a) * b * d[i0, j1] + a * b * d[i1, j1]
        )


# ---------------------------------------------------------------------------


def task_function_gaussian(task: TaskRegion, grid: FrequencyGrid) -> TaskFunction:
    fx, fy, fz = grid.mesh()
    w = np.exp(-2.0 * np.pi**2 * task.radius_mm**2 * (fx * fx + fy * fy + fz * fz))
    return TaskFunction(grid, w / w.max())


def penalty_spectrum(grid: FrequencyGrid, voxel_mm: float) -> np.ndarray:
    fx, fy, fz = grid.mesh()
    s = lambda f: np.sin(np.pi * f * voxel_mm) ** 2  # noqa: E731
    return 4.0 * (s(fx) + s(fy) + s(fz))


def roi_ray(phantom: Phantom, pose: CArmPose, task_center) -> tuple[float, np.ndarray]:
    """Path attenuation and unit direction of the ray from the source through the task center."""
    src = pose_to_rays(pose).source_mm
    d = np.asarray(task_center, dtype=float) - src
    d = d / np.linalg.norm(d)
    return line_integral(phantom, src, d), d


def fisher_from_ray(ybar: float, direction, cfg: DetectabilityConfig, grid: FrequencyGrid) -> np.ndarray:
    fx, fy, fz = grid.mesh()
    dist = fx * direction[0] + fy * direction[1] + fz * direction[2]
    sigma = cfg.sigma(grid)
    return ybar * np.exp(-0.5 * (dist / sigma) ** 2) + cfg.epsilon_a


def view_fisher_info(phantom: Phantom, pose: CArmPose, task_center, cfg: DetectabilityConfig, grid: FrequencyGrid):
    p_roi, d = roi_ray(phantom, pose, task_center)
    return fisher_from_ray(cfg.i0 * np.exp(-p_roi), d, cfg, grid)


def spectral_response(a, cfg: DetectabilityConfig, grid: FrequencyGrid, r=None) -> SpectralResponse:
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise DetectabilityError("Fisher information must be non-negative")
    if r is None:
        r = penalty_spectrum(grid, cfg.voxel_mm)
    denom = a + cfg.beta * r
    if np.any(denom == 0):
        raise DetectabilityError("degenerate response: A = 0 where the penalty vanishes")
    mtf = a / denom
    nps = a / denom**2
    return SpectralResponse(grid, a, mtf, nps)


def detectability_index(sr: SpectralResponse, w: TaskFunction) -> float:
    if sr.grid != w.grid:
        raise DetectabilityError("spectral response and task live on different grids")
    s = sr.mtf**2 * w.w**2
    num = (s.sum() * sr.grid.cell) ** 2
    if num == 0:
        return 0.0
    den = (sr.nps * s).sum() * sr.grid.cell
    if den <= 0:
        raise DetectabilityError("zero noise integral with non-zero signal")
    return float(num / den)


class DetectabilityModel:
    """Precomputed grid, penalty and task for repeated per-view evaluation."""

    def __init__(self, task: TaskRegion, cfg: DetectabilityConfig):
        self.task = task
        self.cfg = cfg
        self.grid = cfg.grid()
        self.w = task_function_gaussian(task, self.grid)
        self.r = penalty_spectrum(self.grid, cfg.voxel_mm)

    def d2_from_ray(self, ybar: float, direction) -> float:
        a = fisher_from_ray(ybar, direction, self.cfg, self.grid)
        return detectability_index(spectral_response(a, self.cfg, self.grid, self.r), self.w)

    def d2(self, phantom: Phantom, pose: CArmPose) -> float:
        p_roi, d = roi_ray(phantom, pose, self.task.center_mm)
        return self.d2_from_ray(self.cfg.i0 * np.exp(-p_roi), d)


def detectability_map(phantom: Phantom, poses, task: TaskRegion, cfg: DetectabilityConfig) -> DetectabilityMap:
    poses = list(poses)
    phis = sorted({p.phi_deg for p in poses})
    thetas = sorted({p.theta_deg for p in poses})
    if len(phis) * len(thetas) != len(poses):
        raise DetectabilityError("poses do not form a rectangular grid")
    model = DetectabilityModel(task, cfg)
    values = ordered_map(lambda pose: model.d2(phantom, pose), poses)
    d2 = np.zeros((len(phis), len(thetas)))
    pi = {v: i for i, v in enumerate(phis)}
    ti = {v: j for j, v in enumerate(thetas)}
    for pose, v in zip(poses, values):
        d2[pi[pose.phi_deg], ti[pose.theta_deg]] = v
    return DetectabilityMap(np.array(phis), np.array(thetas), d2)


# ---------------------------------------------------------------------------
# files


def write_map_csv(dmap: DetectabilityMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phi", "theta", "d2"])
        for i, ph in enumerate(dmap.phis):
            for j, th in enumerate(dmap.thetas):
                w.writerow([f"{ph:.17g}", f"{th:.17g}", f"{dmap.d2[i, j]:.17g}"])


def read_map_csv(path) -> DetectabilityMap:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"phi", "theta", "d2"}:
        raise DetectabilityError(f"{path}: expected header phi,theta,d2")
    phis = sorted({float(r["phi"]) for r in rows})
    thetas = sorted({float(r["theta"]) for r in rows})
    d2 = np.full((len(phis), len(thetas)), np.nan)
    pi = {v: i for i, v in enumerate(phis)}
    ti = {v: j for j, v in enumerate(thetas)}
    for r in rows:
        d2[pi[float(r["phi"])], ti[float(r["theta"])]] = float(r["d2"])
    if np.isnan(d2).any():
        raise DetectabilityError(f"{path}: map is not a full rectangular grid")
    return DetectabilityMap(np.array(phis), np.array(thetas), d2)


def write_map_pgm(dmap: DetectabilityMap, path) -> None:
    """theta along rows (top = 45), phi along columns."""
    write_pgm16(dmap.d2.T, path)
