"""Greedy closed-loop selection of the out-of-plane angle."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .detectability import DetectabilityConfig, DetectabilityModel
from .geometry import CANDIDATE_THETAS, GRID_STEP, CArmPose, candidate_poses
from .phantom import Phantom
from .projector import add_poisson_noise, project

THETA_LO, THETA_HI = CANDIDATE_THETAS[0], CANDIDATE_THETAS[-1]
SHORT_SCAN = (0.0, 200.0)
DEFAULT_SLEW = 5.0


class PlannerError(RuntimeError):
    pass


@dataclass
class Trajectory:
    views: list  # [(phi, theta), ...]
    backend: str = "planar"
    slew_limit_deg: float | None = DEFAULT_SLEW
    d2_chosen: list = field(default_factory=list)
    d2_planar: list = field(default_factory=list)

    def __post_init__(self):
        self.views = [(float(p), float(t)) for p, t in self.views]
        phis = [p for p, _ in self.views]
        if any(b <= a for a, b in zip(phis, phis[1:])):
            raise PlannerError("phi must be strictly increasing")
        for _, t in self.views:
            if not THETA_LO <= t <= THETA_HI:
                raise PlannerError(f"theta={t} outside [{THETA_LO}, {THETA_HI}]")
        if self.slew_limit_deg is not None:
            for (_, a), (_, b) in zip(self.views, self.views[1:]):
                if abs(b - a) > self.slew_limit_deg + 1e-9:
                    raise PlannerError(f"slew {abs(b - a)} exceeds limit {self.slew_limit_deg}")

    @property
    def phis(self) -> np.ndarray:
        return np.array([p for p, _ in self.views])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([t for _, t in self.views])

    def poses(self, template: CArmPose) -> list[CArmPose]:
        return [template.at(p, t) for p, t in self.views]

    def __len__(self):
        return len(self.views)


def next_theta(d2_candidates, current_theta: float, slew_limit: float | None = None) -> float:
    """Reachable argmax; ties go to the smaller move, then the smaller angle."""
    vals = np.asarray(d2_candidates, dtype=float)
    if vals.shape != (len(CANDIDATE_THETAS),) or not np.all(np.isfinite(vals)):
        raise PlannerError("need 11 finite candidate values")
    best = None
    for th, v in zip(CANDIDATE_THETAS, vals):
        move = abs(th - current_theta)
        if slew_limit is not None and move > slew_limit + 1e-9:
            continue
        key = (-v, move, th)
        if best is None or key < best[0]:
            best = (key, th)
    if best is None:
        raise PlannerError(f"no candidate reachable from theta={current_theta} with slew limit {slew_limit}")
    return best[1]


def interpolate_theta(d2_candidates, phi_fraction: float, current_theta: float) -> float:
    """Linear ramp from the current angle towards the best candidate one step ahead."""
    if not 0.0 <= phi_fraction <= 1.0:
        raise PlannerError("phi_fraction must lie in [0, 1]")
    target = next_theta(d2_candidates, current_theta, None)
    return current_theta + phi_fraction * (target - current_theta)


# ---------------------------------------------------------------------------
# backends


class OracleBackend:
    """Candidate detectabilities computed from the phantom itself."""

    name = "oracle"
    needs_projection = False

    def __init__(self, phantom: Phantom, cfg: DetectabilityConfig):
        self.phantom = phantom
        self.model = DetectabilityModel(phantom.task, cfg)

    def candidates(self, pose: CArmPose, projection) -> np.ndarray:
        return np.array([self.model.d2(self.phantom, c) for c in candidate_poses(pose.phi_deg, pose)])


class SurrogateBackend:
    """Candidate detectabilities regressed from the live (noisy) projection."""

    name = "surrogate"
    needs_projection = True

    def __init__(self, model, i0: float, noisy: bool = True):
        self.model = model
        self.i0 = float(i0)
        self.noisy = noisy

    def candidates(self, pose: CArmPose, projection) -> np.ndarray:
        from .surrogate import featurize, predict

        counts = projection.noisy_counts if self.noisy else projection.expected()
        return predict(self.model, featurize(counts, self.i0, model=self.model))[0]


@dataclass
class PlanResult:
    trajectory: Trajectory
    candidates: list  # 11 values used at each step (empty for the last view)
    projections: list


def run_trajectory(
    phantom: Phantom,
    backend,
    phi_start: float = SHORT_SCAN[0],
    phi_end: float = SHORT_SCAN[1],
    theta_init: float = 90.0,
    *,
    template: CArmPose | None = None,
    slew_limit: float | None = DEFAULT_SLEW,
    i0: float = 20000.0,
    seed: int = 0,
    truth: DetectabilityConfig | None = None,
    keep_projections: bool = False,
) -> PlanResult:
    """Acquire, predict the 11 next-view detectabilities, step theta, repeat."""
    if not THETA_LO <= theta_init <= THETA_HI:
        raise PlannerError(f"theta_init={theta_init} outside [{THETA_LO}, {THETA_HI}]")
    if not (0.0 <= phi_start < phi_end <= 360.0):
        raise PlannerError(f"invalid phi range [{phi_start}, {phi_end})")
    template = template or CArmPose(0.0, 90.0)
    truth_model = DetectabilityModel(phantom.task, truth or DetectabilityConfig(i0=i0))

    views, cands, projs, d2c, d2p = [], [], [], [], []
    theta = float(theta_init)
    phis = np.arange(phi_start, phi_end, GRID_STEP)
    for k, phi in enumerate(phis):
        pose = template.at(phi, theta)
        views.append((float(phi), theta))
        d2c.append(truth_model.d2(phantom, pose))
        d2p.append(truth_model.d2(phantom, pose.at(phi, 90.0)))
        proj = None
        if backend.needs_projection or keep_projections:
            proj = add_poisson_noise(project(phantom, pose, i0), seed)
            if keep_projections:
                projs.append(proj)
        if k == len(phis) - 1:
            break
        try:
            values = backend.candidates(pose, proj)
        except PlannerError:
            raise
        except Exception as exc:
            raise PlannerError(f"{backend.name} backend failed at phi={phi}, theta={theta}: {exc}") from exc
        cands.append(np.asarray(values, dtype=float))
        theta = next_theta(values, theta, slew_limit)
    traj = Trajectory(views, backend.name, slew_limit, d2c, d2p)
    return PlanResult(traj, cands, projs)


def planar_trajectory(phi_start: float = SHORT_SCAN[0], phi_end: float = SHORT_SCAN[1]) -> Trajectory:
    phis = np.arange(phi_start, phi_end, GRID_STEP)
    return Trajectory([(p, 90.0) for p in phis], "planar", 0.0)


def _check_grid(a: Trajectory, b: Trajectory):
    if len(a) != len(b) or not np.array_equal(a.phis, b.phis):
        raise PlannerError("trajectories are on different phi grids")


def first_shared_state(a: Trajectory, b: Trajectory) -> int | None:
    _check_grid(a, b)
    for i, (sa, sb) in enumerate(zip(a.views, b.views)):
        if sa == sb:
            return i
    return None


def merge_check(a: Trajectory, b: Trajectory) -> int | None:
    """Index of the first shared state if the trajectories coincide from there on."""
    i = first_shared_state(a, b)
    if i is None or a.views[i:] != b.views[i:]:
        return None
    return i


def servo_commands(traj: Trajectory, substeps: int = 5) -> list[tuple[float, float]]:
    """Sub-step (phi, theta) commands, ramping linearly between planned views."""
    out = []
    for (p0, t0), (p1, t1) in zip(traj.views, traj.views[1:]):
        for s in range(substeps):
            frac = s / substeps
            out.append((p0 + frac * (p1 - p0), t0 + frac * (t1 - t0)))
    out.append(traj.views[-1])
    return out


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "phi", "theta", "d2_chosen", "d2_planar"])
        for k, (p, t) in enumerate(traj.views):
            dc = traj.d2_chosen[k] if k < len(traj.d2_chosen) else float("nan")
            dp = traj.d2_planar[k] if k < len(traj.d2_planar) else float("nan")
            w.writerow([k, f"{p:.17g}", f"{t:.17g}", f"{dc:.17g}", f"{dp:.17g}"])


def read_trajectory_csv(path, backend: str = "file", slew_limit=None) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    views = [(float(r["phi"]), float(r["theta"])) for r in rows]
    return Trajectory(
        views,
        backend,
        slew_limit,
        [float(r["d2_chosen"]) for r in rows],
        [float(r["d2_planar"]) for r in rows],
    )
