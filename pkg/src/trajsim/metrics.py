"""Trajectory and reconstruction quality measures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .detectability import DetectabilityError, DetectabilityMap
from .phantom import Phantom, Primitive
from .planner import Trajectory, _check_grid
from .recon import ReconVolume, ground_truth_volume

#: headline numbers reported for the clinical CT data; context only
PAPER_CONTEXT = {
    "angular_error_deg": (8.35, 11.61),
    "degradation_pct": (13.69, 18.92),
    "noise_distance_deg": {400000: (0.83, 1.56), 100000: (1.13, 1.63), 50000: (1.64, 1.73)},
    "circular_scan_gain_pct": 19.0,
}


class MetricError(ValueError):
    pass


def angular_distance_error(theta_pred: float, theta_opt: float) -> float:
    return abs(float(theta_pred) - float(theta_opt))


def detectability_degradation(d2_pred_action: float, d2_opt_action: float) -> float:
    """Percent of the optimal detectability lost by taking the predicted action."""
    if d2_opt_action == 0:
        raise MetricError("optimal detectability is zero")
    return 100.0 * (d2_opt_action - d2_pred_action) / d2_opt_action


def trajectory_distance(a: Trajectory, b: Trajectory) -> float:
    _check_grid(a, b)
    return float(np.mean(np.abs(a.thetas - b.thetas)))


def accumulated_detectability(dmap: DetectabilityMap, traj: Trajectory, interpolate: bool = False) -> float:
    """Sum of map values along the trajectory; off-grid poses need ``interpolate``."""
    total = 0.0
    for p, t in traj.views:
        try:
            total += dmap.lookup(p, t)
        except DetectabilityError:
            if not interpolate:
                raise MetricError(f"pose ({p}, {t}) is not on the map grid") from None
            total += dmap.bilinear(p, t)
    return total


# ---------------------------------------------------------------------------
# reconstruction


def _axis_coords(prim: Primitive, points):
    rel = points - np.asarray(prim.center_mm)
    a = np.asarray(prim.axis)
    s = rel @ a
    radial = np.linalg.norm(rel - s[..., None] * a, axis=-1)
    return s, radial


def metal_exclusion(phantom: Phantom, geometry: ReconVolume, margin_vox: float = 2.0) -> np.ndarray:
    """Voxels within ``radius + margin`` of any metal primitive (mask = True)."""
    pts = geometry.centers()
    mask = np.zeros(geometry.dims, dtype=bool)
    margin = margin_vox * geometry.voxel_mm
    for prim in phantom.metal:
        if prim.kind != "capped-cylinder":
            raise MetricError("metal exclusion expects cylindrical metal")
        s, radial = _axis_coords(prim, pts)
        mask |= (np.abs(s) <= prim.half_length_mm + margin) & (radial < prim.radius_mm + margin)
    return mask


def annulus_masks(phantom: Phantom, geometry: ReconVolume, inner_vox=2.0, outer_vox=8.0) -> list[np.ndarray]:
    """One annular shell per metal cylinder, with every metal neighbourhood removed."""
    pts = geometry.centers()
    excluded = metal_exclusion(phantom, geometry, inner_vox)
    masks = []
    for prim in phantom.metal:
        s, radial = _axis_coords(prim, pts)
        lo = prim.radius_mm + inner_vox * geometry.voxel_mm
        hi = prim.radius_mm + outer_vox * geometry.voxel_mm
        m = (np.abs(s) <= prim.half_length_mm) & (radial >= lo) & (radial <= hi) & ~excluded
        masks.append(m)
    return masks


def streak_index(volume: ReconVolume, phantom: Phantom, truth: ReconVolume | None = None) -> float:
    """Mean annulus standard deviation around each screw, minus the same on the truth."""
    if truth is None:
        truth = ground_truth_volume(phantom, volume)
    if not truth.same_geometry(volume):
        raise MetricError("truth and reconstruction grids differ")
    masks = annulus_masks(phantom, volume)
    if not masks or any(not m.any() for m in masks):
        raise MetricError("empty annulus around a metal primitive")
    rec = np.mean([volume.values[m].std() for m in masks])
    ref = np.mean([truth.values[m].std() for m in masks])
    return float(rec - ref)


def volume_rmse(volume: ReconVolume, phantom: Phantom, truth: ReconVolume | None = None) -> float:
    """RMSE against the analytic volume over voxels away from metal."""
    if truth is None:
        truth = ground_truth_volume(phantom, volume)
    if not truth.same_geometry(volume):
        raise MetricError("truth and reconstruction grids differ")
    keep = ~metal_exclusion(phantom, volume, 0.0) if phantom.metal else np.ones(volume.dims, bool)
    diff = volume.values[keep] - truth.values[keep]
    return float(np.sqrt(np.mean(diff**2)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class StepRecord:
    phi: float
    theta_pred: float
    theta_opt: float
    d2_pred: float
    d2_opt: float

    @property
    def angular_error(self) -> float:
        return angular_distance_error(self.theta_pred, self.theta_opt)

    @property
    def degradation(self) -> float:
        return detectability_degradation(self.d2_pred, self.d2_opt)


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    noise_distances: dict = field(default_factory=dict)  # i0 -> (mean, std)
    context: dict = field(default_factory=lambda: dict(PAPER_CONTEXT))

    def __post_init__(self):
        for r in self.records:
            if r.d2_opt < r.d2_pred:
                raise MetricError(f"record at phi={r.phi}: predicted action beats the optimum")

    def aggregates(self) -> dict:
        if not self.records:
            return {}
        ang = np.array([r.angular_error for r in self.records])
        deg = np.array([r.degradation for r in self.records])
        return {
            "angular_error_mean": float(ang.mean()),
            "angular_error_std": float(ang.std()),
            "degradation_mean": float(deg.mean()),
            "degradation_std": float(deg.std()),
            "n_steps": len(self.records),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phi", "theta_pred", "theta_opt", "d2_pred", "d2_opt", "angular_error", "degradation_pct"])
            for r in self.records:
                w.writerow(
                    [f"{r.phi:.17g}", f"{r.theta_pred:.17g}", f"{r.theta_opt:.17g}", f"{r.d2_pred:.17g}",
                     f"{r.d2_opt:.17g}", f"{r.angular_error:.17g}", f"{r.degradation:.17g}"]
                )

    def summary(self) -> str:
        agg = self.aggregates()
        lines = []
        if agg:
            lines.append(f"steps evaluated: {agg['n_steps']}")
            lines.append(f"angular distance error: {agg['angular_error_mean']:.2f} +/- {agg['angular_error_std']:.2f} deg")
            lines.append(f"detectability degradation: {agg['degradation_mean']:.2f} +/- {agg['degradation_std']:.2f} %")
        prev = None
        for i0 in sorted(self.noise_distances, reverse=True):
            m, s = self.noise_distances[i0]
            flag = ""
            if prev is not None and m < prev:
                flag = "  [note: smaller than at higher fluence]"
            lines.append(f"trajectory distance at i0={i0:g}: {m:.2f} +/- {s:.2f} deg{flag}")
            prev = m
        c = self.context
        lines.append(
            "reference (clinical CT, not reproduced): angular {0[0]} +/- {0[1]} deg, degradation {1[0]} +/- {1[1]} %".format(
                c["angular_error_deg"], c["degradation_pct"]
            )
        )
        return "\n".join(lines) + "\n"


def step_records(traj: Trajectory, predicted: list, truth: list) -> list[StepRecord]:
    """Unconstrained argmax of predicted vs true candidates at every planned step."""
    from .geometry import CANDIDATE_THETAS
    from .planner import next_theta

    thetas = np.array(CANDIDATE_THETAS)
    out = []
    for (phi, theta), pred, true in zip(traj.views, predicted, truth):
        tp = next_theta(pred, theta, None)
        to = next_theta(true, theta, None)
        true = np.asarray(true)
        out.append(StepRecord(phi, tp, to, float(true[thetas == tp][0]), float(true[thetas == to][0])))
    return out
