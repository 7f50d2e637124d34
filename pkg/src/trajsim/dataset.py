"""Grid-scan corpora: paired clean/noisy projection stacks and detectability targets."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .detectability import DetectabilityConfig, DetectabilityMap, detectability_map, read_map_csv, write_map_csv
from .geometry import CANDIDATE_THETAS, GRID_STEP, CArmPose, grid_axes
from .phantom import Phantom, build_chest_phantom, save_scene
from .projector import (
    STACK_COUNTS,
    STACK_FLOAT,
    STACK_MAGIC,
    STACK_VERSION,
    _VIEW_HEADER,
    add_poisson_noise,
    project,
    read_stack,
)

MANIFEST_FIELDS = ["seed", "projections_path", "noisy_path", "map_path", "i0"]


class DatasetError(RuntimeError):
    pass


class SplitLeakageError(DatasetError):
    """A phantom seed is listed in both the training and validation split."""


@dataclass(frozen=True)
class ScanConfig:
    template: CArmPose = CArmPose(0.0, 90.0)
    i0: float = 20000.0
    phi_range: tuple = (0.0, 360.0)
    theta_range: tuple = (45.0, 135.0)
    step_deg: float = GRID_STEP
    isocenter_jitter_mm: float = 20.0
    detect: DetectabilityConfig = field(default_factory=DetectabilityConfig)

    def __post_init__(self):
        if self.i0 <= 0:
            raise DatasetError("i0 must be positive")
        if self.isocenter_jitter_mm < 0:
            raise DatasetError("isocenter_jitter_mm must be non-negative")
        grid_axes(self.phi_range, self.theta_range, self.step_deg)  # validates spans

    def detectability(self) -> DetectabilityConfig:
        """Targets are computed at the scan fluence."""
        return replace(self.detect, i0=self.i0)


@dataclass(frozen=True)
class ScanRecord:
    phantom_seed: int
    phis: tuple
    thetas: tuple
    projections_path: Path
    noisy_path: Path
    map_path: Path
    fluence_i0: float

    @property
    def n_views(self) -> int:
        return len(self.phis) * len(self.thetas)

    def validate(self) -> None:
        for p in (self.projections_path, self.noisy_path, self.map_path):
            if not Path(p).is_file():
                raise DatasetError(f"scan {self.phantom_seed}: missing file {p}")
        dmap = read_map_csv(self.map_path)
        if tuple(dmap.phis) != tuple(self.phis) or tuple(dmap.thetas) != tuple(self.thetas):
            raise DatasetError(f"{self.map_path}: map grid differs from the scan grid")
        for path, want_counts in ((self.projections_path, False), (self.noisy_path, True)):
            is_counts, views = read_stack(path)
            if is_counts != want_counts or len(views) != self.n_views:
                raise DatasetError(f"{path}: expected {self.n_views} {'count' if want_counts else 'float'} views")


@dataclass
class Manifest:
    records: list
    train_seeds: tuple = ()
    val_seeds: tuple = ()

    @property
    def total_views(self) -> int:
        return sum(r.n_views for r in self.records)

    def split(self, name: str) -> list:
        seeds = {"train": self.train_seeds, "val": self.val_seeds}[name]
        return [r for r in self.records if r.phantom_seed in seeds]


@dataclass(frozen=True)
class TrainingSample:
    features: np.ndarray  # raw (unstandardized) 4096-vector
    target: np.ndarray  # 11 d2 values at (phi + 5, CANDIDATE_THETAS)
    phi: float
    theta: float
    phantom_seed: int


class StackWriter:
    """Streams view records to a stack file without holding the whole scan."""

    def __init__(self, path, counts: bool):
        self.path = Path(path)
        self.counts = counts
        self._dtype = "<u4" if counts else "<f4"
        self._fh = None

    def __enter__(self):
        try:
            self._fh = open(self.path, "wb")
        except OSError as exc:
            raise DatasetError(f"cannot write {self.path}: {exc}") from exc
        kind = STACK_COUNTS if self.counts else STACK_FLOAT
        self._fh.write(STACK_MAGIC + struct.pack("<II", STACK_VERSION, kind))
        return self

    def write(self, phi: float, theta: float, raster) -> None:
        raster = np.asarray(raster)
        self._fh.write(_VIEW_HEADER.pack(float(phi), float(theta), raster.shape[0], raster.shape[1]))
        self._fh.write(np.ascontiguousarray(raster, dtype=self._dtype).tobytes())

    def __exit__(self, *exc):
        self._fh.close()
        return False


def isocenter_offset(seed: int, jitter_mm: float) -> np.ndarray:
    """Per-scan uniform offset of the rotation center, in mm."""
    if jitter_mm == 0:
        return np.zeros(3)
    rng = np.random.default_rng([int(seed), 0x1C0])
    return rng.uniform(-jitter_mm, jitter_mm, size=3)


def scan_phantom(seed: int, cfg: ScanConfig) -> Phantom:
    # moving the isocenter by +o is the same as moving the object by -o
    return build_chest_phantom(seed).translated(-isocenter_offset(seed, cfg.isocenter_jitter_mm))


def _paths(out_dir: Path, seed: int):
    stem = out_dir / f"scan_{seed:05d}"
    return (Path(f"{stem}_clean.stk"), Path(f"{stem}_noisy.stk"), Path(f"{stem}_map.csv"), Path(f"{stem}.scene"))


def generate_scan(seed: int, cfg: ScanConfig, out_dir, phantom: Phantom | None = None) -> ScanRecord:
    """Project every grid pose, add Poisson noise at ``cfg.i0`` and write the map."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc
    ph = phantom if phantom is not None else scan_phantom(seed, cfg)
    phis, thetas = grid_axes(cfg.phi_range, cfg.theta_range, cfg.step_deg)
    poses = [cfg.template.at(p, t) for p in phis for t in thetas]
    clean_path, noisy_path, map_path, scene_path = _paths(out_dir, seed)

    with StackWriter(clean_path, counts=False) as clean, StackWriter(noisy_path, counts=True) as noisy:
        for pose in poses:
            proj = add_poisson_noise(project(ph, pose, cfg.i0), seed)
            clean.write(pose.phi_deg, pose.theta_deg, proj.line_integrals)
            noisy.write(pose.phi_deg, pose.theta_deg, proj.noisy_counts)

    dmap = detectability_map(ph, poses, ph.task, cfg.detectability())
    try:
        write_map_csv(dmap, map_path)
        save_scene(ph, scene_path)
    except OSError as exc:
        raise DatasetError(f"cannot write scan {seed} outputs in {out_dir}: {exc}") from exc
    return ScanRecord(seed, tuple(phis), tuple(thetas), clean_path, noisy_path, map_path, cfg.i0)


def split_seeds(seeds, val_fraction: float = 0.25) -> tuple[tuple, tuple]:
    """Phantom-level split; the last ``ceil(n * val_fraction)`` seeds validate."""
    seeds = list(seeds)
    if len(seeds) < 2:
        return tuple(seeds), ()
    n_val = min(len(seeds) - 1, max(1, math.ceil(len(seeds) * val_fraction - 1e-9)))
    return tuple(seeds[:-n_val]), tuple(seeds[-n_val:])


def build_corpus(n_scans: int, seed0: int, cfg: ScanConfig, out_dir, seeds=None, val_fraction=0.25) -> Manifest:
    if seeds is None:
        if n_scans < 1:
            raise DatasetError("n_scans must be >= 1")
        seeds = list(range(seed0, seed0 + n_scans))
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise DatasetError("duplicate phantom seeds in corpus")
    records = ordered_map(lambda s: generate_scan(s, cfg, out_dir), seeds)
    train, val = split_seeds(seeds, val_fraction)
    manifest = Manifest(records, train, val)
    write_manifest(manifest, Path(out_dir) / "manifest.csv")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.phantom_seed, r.projections_path.name, r.noisy_path.name, r.map_path.name, f"{r.fluence_i0:.17g}"])
    with open(path.with_suffix(".split.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "split"])
        for s in manifest.train_seeds:
            w.writerow([s, "train"])
        for s in manifest.val_seeds:
            w.writerow([s, "val"])


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != MANIFEST_FIELDS:
        raise DatasetError(f"{path}: unexpected manifest columns")
    records = []
    for r in rows:
        dmap = read_map_csv(base / r["map_path"])
        records.append(
            ScanRecord(
                int(r["seed"]), tuple(dmap.phis), tuple(dmap.thetas), base / r["projections_path"],
                base / r["noisy_path"], base / r["map_path"], float(r["i0"]),
            )
        )
    train, val = [], []
    split_path = path.with_suffix(".split.csv")
    if split_path.is_file():
        with open(split_path, newline="") as fh:
            for r in csv.DictReader(fh):
                (train if r["split"] == "train" else val).append(int(r["seed"]))
    if set(train) & set(val):
        raise SplitLeakageError(f"{split_path}: seeds {sorted(set(train) & set(val))} appear in both splits")
    return Manifest(records, tuple(train), tuple(val))


def candidate_targets(dmap: DetectabilityMap, phi: float) -> np.ndarray | None:
    """Direct map entries at (phi + 5 mod 360, 65..115); None if any is missing."""
    nxt = (phi + GRID_STEP) % 360.0
    i = np.flatnonzero(np.isclose(dmap.phis, nxt))
    if i.size == 0:
        return None
    cols = [np.flatnonzero(np.isclose(dmap.thetas, t)) for t in CANDIDATE_THETAS]
    if any(c.size == 0 for c in cols):
        return None
    return np.array([dmap.d2[i[0], c[0]] for c in cols])


def make_samples(scan: ScanRecord) -> list[TrainingSample]:
    from .surrogate import featurize

    dmap = read_map_csv(scan.map_path)
    is_counts, views = read_stack(scan.noisy_path)
    if not is_counts:
        raise DatasetError(f"{scan.noisy_path}: expected a count stack")
    if len(views) != len(dmap.phis) * len(dmap.thetas):
        raise DatasetError(f"{scan.noisy_path}: {len(views)} views but map has {dmap.d2.size} entries")
    out = []
    for phi, theta, counts in views:
        t = candidate_targets(dmap, phi)
        if t is None:
            continue
        out.append(TrainingSample(featurize(counts, scan.fluence_i0), t, phi, theta, scan.phantom_seed))
    return out


def sample_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (features, targets, meta[phi, theta, seed]) over several scans."""
    xs, ts, meta = [], [], []
    for rec in records:
        for s in make_samples(rec):
            xs.append(s.features)
            ts.append(s.target)
            meta.append((s.phi, s.theta, s.phantom_seed))
    if not xs:
        raise DatasetError("no training samples")
    return np.array(xs), np.array(ts), np.array(meta)
