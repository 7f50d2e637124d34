"""Diminished C-arm coordinate system and view grids.

World frame is right-handed with z up. The in-plane angle ``phi`` rotates the
source about +z; the out-of-plane angle ``theta`` is the polar angle of the
source measured from +z, so ``theta = 90`` is the planar short-scan orbit.
At (phi=0, theta=90) the source sits at (+sid, 0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

THETA_MIN = 45.0
THETA_MAX = 135.0
GRID_STEP = 5.0
#: absolute out-of-plane candidates predicted for the next view
CANDIDATE_THETAS = tuple(float(t) for t in range(65, 116, 5))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CArmPose:
    phi_deg: float
    theta_deg: float
    sid_mm: float = 600.0
    sdd_mm: float = 1000.0
    det_rows: int = 128
    det_cols: int = 128
    pitch_mm: float = 2.0

    def __post_init__(self):
        if not (self.sdd_mm > self.sid_mm > 0):
            raise GeometryError(f"need sdd > sid > 0, got sid={self.sid_mm} sdd={self.sdd_mm}")
        if not (0.0 <= self.phi_deg < 360.0):
            raise GeometryError(f"phi_deg={self.phi_deg} outside [0, 360)")
        if not (THETA_MIN <= self.theta_deg <= THETA_MAX):
            raise GeometryError(f"theta_deg={self.theta_deg} outside [{THETA_MIN}, {THETA_MAX}]")
        if self.det_rows < 1 or self.det_cols < 1:
            raise GeometryError("detector needs at least one pixel")
        if self.pitch_mm <= 0:
            raise GeometryError("pitch_mm must be positive")

    def at(self, phi_deg: float, theta_deg: float) -> "CArmPose":
        """Same detector/orbit, different angles."""
        return replace(self, phi_deg=float(phi_deg), theta_deg=float(theta_deg))


@dataclass(frozen=True)
class RayBundle:
    source_mm: np.ndarray
    det_origin_mm: np.ndarray  # center of pixel (row 0, col 0)
    det_u_mm: np.ndarray  # column step
    det_v_mm: np.ndarray  # row step
    rows: int
    cols: int

    def pixel_centers(self) -> np.ndarray:
        """(rows, cols, 3) array of detector pixel centers in mm."""
        i = np.arange(self.rows, dtype=float)[:, None, None]
        j = np.arange(self.cols, dtype=float)[None, :, None]
        return self.det_origin_mm + i * self.det_v_mm + j * self.det_u_mm

    def directions(self) -> np.ndarray:
        """(rows, cols, 3) unit vectors from the source to each pixel center."""
        d = self.pixel_centers() - self.source_mm
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def source_direction(phi_deg: float, theta_deg: float) -> np.ndarray:
    """Unit vector from the isocenter towards the source."""
    p = np.radians(phi_deg)
    t = np.radians(theta_deg)
    return np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])


def pose_to_rays(pose: CArmPose) -> RayBundle:
    e_r = source_direction(pose.phi_deg, pose.theta_deg)
    p = np.radians(pose.phi_deg)
    t = np.radians(pose.theta_deg)
    e_phi = np.array([-np.sin(p), np.cos(p), 0.0])
    # -d/dtheta, i.e. +z at theta = 90
    e_up = np.array([-np.cos(t) * np.cos(p), -np.cos(t) * np.sin(p), np.sin(t)])

    source = pose.sid_mm * e_r
    center = -(pose.sdd_mm - pose.sid_mm) * e_r
    u = pose.pitch_mm * e_phi
    v = pose.pitch_mm * e_up
    origin = center - 0.5 * (pose.det_cols - 1) * u - 0.5 * (pose.det_rows - 1) * v
    return RayBundle(source, origin, u, v, pose.det_rows, pose.det_cols)


def _steps(lo: float, hi: float, step: float, closed: bool) -> np.ndarray:
    n = (hi - lo) / step
    if n < 0 or abs(n - round(n)) > 1e-9:
        raise GeometryError(f"step {step} does not divide range [{lo}, {hi}]")
    n = int(round(n)) + (1 if closed else 0)
    return lo + step * np.arange(n)


def grid_poses(phi_range, theta_range, step_deg: float, template: CArmPose) -> list[CArmPose]:
    """Row-major (phi outer, half-open; theta inner, closed) pose grid."""
    phis = _steps(phi_range[0], phi_range[1], step_deg, closed=False)
    thetas = _steps(theta_range[0], theta_range[1], step_deg, closed=True)
    return [template.at(ph, th) for ph in phis for th in thetas]


def grid_axes(phi_range, theta_range, step_deg: float) -> tuple[np.ndarray, np.ndarray]:
    return (
        _steps(phi_range[0], phi_range[1], step_deg, closed=False),
        _steps(theta_range[0], theta_range[1], step_deg, closed=True),
    )


def candidate_poses(current_phi: float, template: CArmPose) -> list[CArmPose]:
    """The 11 poses one 5 degree step ahead, ascending theta in 90 +/- 25."""
    nxt = current_phi + GRID_STEP
    if nxt >= 360.0:
        raise GeometryError(f"no candidate step beyond phi={current_phi}")
    return [template.at(nxt, th) for th in CANDIDATE_THETAS]
