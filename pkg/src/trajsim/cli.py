"""Command-line front end: ``trajsim <command> [--config PATH] [...]``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


def _floats(raw: str) -> tuple:
    return tuple(float(v) for v in raw.split(",") if v.strip())


@dataclass
class RunConfig:
    # detector / orbit
    sid_mm: float = 600.0
    sdd_mm: float = 1000.0
    det_rows: int = 128
    det_cols: int = 128
    pitch_mm: float = 2.0
    i0: float = 20000.0
    # view grid
    phi_min: float = 0.0
    phi_max: float = 360.0
    theta_min: float = 45.0
    theta_max: float = 135.0
    grid_step: float = 5.0
    # detectability model
    beta: float = 1e3
    slab_sigma: float = 0.0  # 0 selects 2 * df
    epsilon_a: float = 1.0
    detect_voxel_mm: float = 3.0
    detect_grid_n: int = 32
    # phantom and corpus
    phantom: str = "chest"
    seed: int = 1
    n_scans: int = 8
    seed0: int = 1
    val_fraction: float = 0.25
    isocenter_jitter_mm: float = 20.0
    # planner
    slew_limit: float = 5.0
    theta_init: float = 90.0
    scan_phi_start: float = 0.0
    scan_phi_end: float = 200.0
    # training
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 30
    train_seed: int = 0
    validation_fraction: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.97
    # reconstruction and evaluation
    recon_n: int = 64
    recon_voxel_mm: float = 3.0
    cgls_iters: int = 20
    eval_fluences: tuple = (400000.0, 100000.0, 50000.0)
    out_dir: str = "runs"

    # -- construction -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                if types[key] == "tuple":
                    values[key] = _floats(val)
                elif types[key] == "int":
                    values[key] = int(val)
                elif types[key] == "float":
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {val!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    def validate(self) -> None:
        from .geometry import GeometryError, grid_axes

        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.theta_min >= 45.0 and self.theta_max <= 135.0, "theta_min/theta_max", "must lie within [45, 135]")
        need(self.theta_min < self.theta_max, "theta_min/theta_max", "theta_min must be below theta_max")
        need(0.0 <= self.phi_min < self.phi_max <= 360.0, "phi_min/phi_max", "need 0 <= phi_min < phi_max <= 360")
        need(self.grid_step == 5.0, "grid_step", "the candidate set assumes 5 degree steps")
        try:
            grid_axes((self.phi_min, self.phi_max), (self.theta_min, self.theta_max), self.grid_step)
        except GeometryError as exc:
            raise ConfigError(f"theta_min/theta_max/phi_min/phi_max: {exc}") from None
        need(self.i0 > 0, "i0", "must be positive")
        need(all(f > 0 for f in self.eval_fluences), "eval_fluences", "must be positive")
        need(self.slew_limit >= 0, "slew_limit", "must be non-negative")
        need(65.0 <= self.theta_init <= 115.0, "theta_init", "must lie within [65, 115]")
        need(0.0 <= self.scan_phi_start < self.scan_phi_end <= 360.0, "scan_phi_start/scan_phi_end", "bad span")
        need(self.phantom in ("chest", "sphere"), "phantom", "must be 'chest' or 'sphere'")
        need(self.n_scans >= 1, "n_scans", "must be >= 1")
        need(self.recon_n >= 1 and self.recon_voxel_mm > 0, "recon_n/recon_voxel_mm", "must be positive")
        need(self.cgls_iters >= 1, "cgls_iters", "must be >= 1")
        need(self.slab_sigma >= 0, "slab_sigma", "must be non-negative")
        need(self.isocenter_jitter_mm >= 0, "isocenter_jitter_mm", "must be non-negative")
        # constructing the module objects applies their own invariants
        from .dataset import DatasetError

        for build in (self.template, self.detect_config, self.train_config, self.scan_config):
            try:
                build()
            except (ValueError, DatasetError) as exc:
                raise ConfigError(str(exc)) from None

    # -- module objects -----------------------------------------------------

    def template(self):
        from .geometry import CArmPose

        return CArmPose(0.0, 90.0, self.sid_mm, self.sdd_mm, self.det_rows, self.det_cols, self.pitch_mm)

    def detect_config(self, i0: float | None = None):
        from .detectability import DetectabilityConfig

        return DetectabilityConfig(
            self.beta, self.slab_sigma or None, self.epsilon_a, i0 or self.i0, self.detect_voxel_mm, self.detect_grid_n
        )

    def train_config(self):
        from .surrogate import TrainConfig

        return TrainConfig(
            self.learning_rate, self.batch_size, self.epochs, self.train_seed, self.validation_fraction,
            self.momentum, self.lr_decay,
        )

    def scan_config(self):
        from .dataset import ScanConfig

        return ScanConfig(
            self.template(), self.i0, (self.phi_min, self.phi_max), (self.theta_min, self.theta_max),
            self.grid_step, self.isocenter_jitter_mm, self.detect_config(),
        )

    def recon_geometry(self):
        from .recon import ReconVolume

        return ReconVolume.centered(self.recon_n, self.recon_voxel_mm)

    def build_phantom(self, seed: int):
        from .phantom import build_chest_phantom, build_sphere_phantom

        return build_chest_phantom(seed) if self.phantom == "chest" else build_sphere_phantom()


# ---------------------------------------------------------------------------
# helpers


def _say(msg: str) -> None:
    print(msg, flush=True)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x: float) -> str:
    return f"{x:.17g}"


def _map_overlay(dmap, trajectories) -> np.ndarray:
    """Map image (theta rows, phi columns) with trajectory cells set above the map maximum."""
    img = dmap.d2.T.copy()
    top = float(img.max()) * 1.25 if img.max() > 0 else 1.0
    for traj in trajectories:
        for p, t in traj.views:
            i = np.flatnonzero(np.isclose(dmap.phis, p))
            j = np.flatnonzero(np.isclose(dmap.thetas, t))
            if i.size and j.size:
                img[j[0], i[0]] = top
    return img


def _full_map(cfg: RunConfig, phantom, i0: float | None = None):
    from .detectability import detectability_map
    from .geometry import grid_poses

    poses = grid_poses((cfg.phi_min, cfg.phi_max), (cfg.theta_min, cfg.theta_max), cfg.grid_step, cfg.template())
    return detectability_map(phantom, poses, phantom.task, cfg.detect_config(i0))


def _backend(cfg: RunConfig, args, phantom, i0: float):
    from .planner import OracleBackend, SurrogateBackend
    from .surrogate import load_model

    if args.backend == "surrogate":
        if not args.model:
            raise UsageError("--backend surrogate requires --model PATH")
        if not Path(args.model).is_file():
            raise FileNotFoundError(f"model file not found: {args.model}")
        return SurrogateBackend(load_model(args.model), i0)
    return OracleBackend(phantom, cfg.detect_config(i0))


def _plan(cfg: RunConfig, args, phantom, seed: int, i0: float):
    from .planner import run_trajectory

    return run_trajectory(
        phantom,
        _backend(cfg, args, phantom, i0),
        cfg.scan_phi_start,
        cfg.scan_phi_end,
        cfg.theta_init,
        template=cfg.template(),
        slew_limit=cfg.slew_limit,
        i0=i0,
        seed=seed,
        truth=cfg.detect_config(i0),
    )


def _reconstruct(cfg: RunConfig, phantom, traj, seed: int, i0: float):
    from .projector import add_poisson_noise, log_normalize, project
    from .recon import SystemOperator, cgls

    poses = traj.poses(cfg.template())
    data = [log_normalize(add_poisson_noise(project(phantom, p, i0), seed).noisy_counts, i0) for p in poses]
    return cgls(np.stack(data), SystemOperator(poses, cfg.recon_geometry()), cfg.cgls_iters)


def _recon_metrics(phantom, volume):
    from .metrics import streak_index, volume_rmse
    from .recon import ground_truth_volume

    truth = ground_truth_volume(phantom, volume)
    streak = streak_index(volume, phantom, truth) if phantom.metal else float("nan")
    return streak, volume_rmse(volume, phantom, truth)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(cfg, args):
    from .phantom import save_scene
    from .recon import ground_truth_volume, write_slice_pgm

    out = _out(cfg)
    ph = cfg.build_phantom(cfg.seed)
    save_scene(ph, out / f"phantom_{cfg.seed}.scene")
    truth = ground_truth_volume(ph, cfg.recon_geometry())
    z = ph.task.center_mm[2] if ph.task else 0.0
    write_slice_pgm(truth, out / f"phantom_{cfg.seed}_slice.pgm", z_mm=z)
    _say(f"phantom seed={cfg.seed}: {len(ph.primitives)} primitives, {len(ph.metal)} metal -> {out}")


def cmd_scan_grid(cfg, args):
    from .dataset import generate_scan

    rec = generate_scan(cfg.seed, cfg.scan_config(), _out(cfg))
    _say(f"scan seed={cfg.seed}: {rec.n_views} views at i0={rec.fluence_i0:g}")
    _say(f"  {rec.projections_path}\n  {rec.noisy_path}\n  {rec.map_path}")


def cmd_detect_map(cfg, args):
    from .detectability import write_map_csv, write_map_pgm

    out = _out(cfg)
    ph = cfg.build_phantom(cfg.seed)
    dmap = _full_map(cfg, ph)
    write_map_csv(dmap, out / f"map_{cfg.seed}.csv")
    write_map_pgm(dmap, out / f"map_{cfg.seed}.pgm")
    i, j = np.unravel_index(np.argmax(dmap.d2), dmap.d2.shape)
    _say(f"map seed={cfg.seed}: {dmap.d2.size} poses, max d2 {dmap.d2[i, j]:.6g} at phi={dmap.phis[i]:g} theta={dmap.thetas[j]:g}")


def cmd_build_corpus(cfg, args):
    from .dataset import build_corpus

    seed0 = cfg.seed if args.seed is not None else cfg.seed0
    man = build_corpus(cfg.n_scans, seed0, cfg.scan_config(), _out(cfg), val_fraction=cfg.val_fraction)
    _say(f"corpus: {len(man.records)} scans, {man.total_views} images")
    _say(f"  train seeds {list(man.train_seeds)}, validation seeds {list(man.val_seeds)}")


def _manifest(cfg):
    from .dataset import SplitLeakageError, read_manifest

    path = Path(cfg.out_dir) / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"no corpus manifest at {path}; run build-corpus first")
    try:
        return read_manifest(path)
    except SplitLeakageError as exc:
        raise ConfigError(f"split leakage: {exc}") from None


def cmd_train(cfg, args):
    from .dataset import sample_arrays
    from .surrogate import save_model, train

    out = _out(cfg)
    man = _manifest(cfg)
    records = man.split("train") if man.train_seeds else man.records
    x, t, _ = sample_arrays(records)
    _say(f"training on {x.shape[0]} samples from seeds {[r.phantom_seed for r in records]}")
    res = train(x, t, cfg.train_config())
    model_path = Path(args.model) if args.model else out / "model.bin"
    save_model(res.model, model_path)
    rows = []
    for k, tl in enumerate(res.train_loss):
        vl = res.val_loss[k] if k < len(res.val_loss) else float("nan")
        rows.append([k, _g(tl), _g(vl)])
    _write_rows(out / "loss.csv", ["epoch", "train_loss", "val_loss"], rows)
    _say(f"final training loss {res.train_loss[-1]:.4g}; model -> {model_path}")


def cmd_plan(cfg, args):
    from ._pgm import write_pgm16
    from .planner import planar_trajectory, servo_commands, write_trajectory_csv

    out = _out(cfg)
    ph = cfg.build_phantom(cfg.seed)
    i0 = cfg.i0
    res = _plan(cfg, args, ph, cfg.seed, i0)
    traj = res.trajectory
    write_trajectory_csv(traj, out / "trajectory.csv")
    _write_rows(out / "servo.csv", ["phi", "theta"], [[_g(p), _g(t)] for p, t in servo_commands(traj)])
    dmap = _full_map(cfg, ph, i0)
    write_pgm16(_map_overlay(dmap, [traj, planar_trajectory(cfg.scan_phi_start, cfg.scan_phi_end)]), out / "plan_overlay.pgm")
    planned, planar = sum(traj.d2_chosen), sum(traj.d2_planar)
    _say(f"backend={traj.backend} theta_init={cfg.theta_init:g}: {len(traj)} views")
    _say(f"accumulated d2: planned {planned:.6g}, planar {planar:.6g}, ratio {planned / planar:.4f}")


def _trajectory_input(cfg, args, ph):
    """Trajectory to reconstruct: out_dir/trajectory.csv if present, else freshly planned."""
    from .planner import read_trajectory_csv

    path = Path(cfg.out_dir) / "trajectory.csv"
    if path.is_file():
        return read_trajectory_csv(path, "file", cfg.slew_limit)
    return _plan(cfg, args, ph, cfg.seed, cfg.i0).trajectory


def _recon_and_write(cfg, ph, traj, name, out):
    from .recon import write_slice_pgm, write_volume

    res = _reconstruct(cfg, ph, traj, cfg.seed, cfg.i0)
    write_volume(res.volume, out / f"volume_{name}.vol")
    z = ph.task.center_mm[2] if ph.task else 0.0
    write_slice_pgm(res.volume, out / f"slice_{name}.pgm", z_mm=z, vmax=0.05)
    streak, rmse = _recon_metrics(ph, res.volume)
    return [name, _g(streak), _g(rmse), _g(sum(traj.d2_chosen)) if traj.d2_chosen else "nan", res.iterations]


def cmd_recon(cfg, args):
    from .planner import _check_grid, planar_trajectory

    out = _out(cfg)
    ph = cfg.build_phantom(cfg.seed)
    traj = _trajectory_input(cfg, args, ph)
    _check_grid(traj, planar_trajectory(cfg.scan_phi_start, cfg.scan_phi_end))
    row = _recon_and_write(cfg, ph, traj, "planned", out)
    _write_rows(out / "recon_metrics.csv", ["trajectory", "streak_index", "rmse", "sum_d2", "iterations"], [row])
    _say(f"recon: streak_index {float(row[1]):.4g}, rmse {float(row[2]):.4g}")


def cmd_compare(cfg, args):
    from .planner import _check_grid, planar_trajectory

    out = _out(cfg)
    ph = cfg.build_phantom(cfg.seed)
    traj = _trajectory_input(cfg, args, ph)
    flat = planar_trajectory(cfg.scan_phi_start, cfg.scan_phi_end)
    _check_grid(traj, flat)
    rows = [_recon_and_write(cfg, ph, traj, "planned", out), _recon_and_write(cfg, ph, flat, "planar", out)]
    _write_rows(out / "compare.csv", ["trajectory", "streak_index", "rmse", "sum_d2", "iterations"], rows)
    for r in rows:
        _say(f"{r[0]:>8}: streak_index {float(r[1]):.4g}  rmse {float(r[2]):.4g}")


def cmd_eval(cfg, args):
    from .dataset import scan_phantom
    from .detectability import DetectabilityModel
    from .geometry import candidate_poses
    from .metrics import EvalReport, step_records, trajectory_distance
    from .planner import SurrogateBackend, run_trajectory

    out = _out(cfg)
    man = _manifest(cfg)
    seeds = list(man.val_seeds) or [cfg.seed]
    scfg = cfg.scan_config()
    tpl = cfg.template()
    records, dists = [], {}
    model = None
    if args.backend == "surrogate":
        backend = _backend(cfg, args, None, cfg.i0)
        model = backend.model
    for seed in seeds:
        ph = scan_phantom(seed, scfg)
        truth_model = DetectabilityModel(ph.task, cfg.detect_config())
        res = _plan(cfg, args, ph, seed, cfg.i0)
        views = res.trajectory.views[:-1]
        truth = [[truth_model.d2(ph, c) for c in candidate_poses(p, tpl)] for p, _ in views]
        pred = res.candidates if args.backend == "surrogate" else truth
        records += step_records(dataclasses.replace(res.trajectory, views=views, d2_chosen=[], d2_planar=[]), pred, truth)
    if model is not None:
        for i0 in cfg.eval_fluences:
            per_seed = []
            for seed in seeds:
                ph = scan_phantom(seed, scfg)
                kw = dict(template=tpl, slew_limit=cfg.slew_limit, i0=i0, seed=seed, truth=cfg.detect_config(i0))
                noisy = run_trajectory(ph, SurrogateBackend(model, i0, True), cfg.scan_phi_start, cfg.scan_phi_end, cfg.theta_init, **kw)
                clean = run_trajectory(ph, SurrogateBackend(model, i0, False), cfg.scan_phi_start, cfg.scan_phi_end, cfg.theta_init, **kw)
                per_seed.append(trajectory_distance(noisy.trajectory, clean.trajectory))
            dists[i0] = (float(np.mean(per_seed)), float(np.std(per_seed)))
    report = EvalReport(records, dists)
    report.write_csv(out / "eval_steps.csv")
    _write_rows(
        out / "eval_noise.csv", ["i0", "distance_mean", "distance_std"],
        [[_g(k), _g(m), _g(s)] for k, (m, s) in sorted(dists.items(), reverse=True)],
    )
    text = report.summary()
    (out / "eval_summary.txt").write_text(text)
    sys.stdout.write(text)


def cmd_plot(cfg, args):
    from ._pgm import write_pgm16
    from .detectability import read_map_csv
    from .planner import read_trajectory_csv

    out = _out(cfg)
    map_path = out / f"map_{cfg.seed}.csv"
    if not map_path.is_file():
        raise FileNotFoundError(f"no map at {map_path}; run detect-map first")
    dmap = read_map_csv(map_path)
    trajs = []
    tpath = out / "trajectory.csv"
    if tpath.is_file():
        trajs.append(read_trajectory_csv(tpath))
    write_pgm16(_map_overlay(dmap, trajs), out / f"map_{cfg.seed}_overlay.pgm")
    _say(f"plot -> {out / f'map_{cfg.seed}_overlay.pgm'} ({len(trajs)} trajectory overlays)")


COMMANDS = {
    "phantom": cmd_phantom,
    "scan-grid": cmd_scan_grid,
    "detect-map": cmd_detect_map,
    "build-corpus": cmd_build_corpus,
    "train": cmd_train,
    "plan": cmd_plan,
    "recon": cmd_recon,
    "compare": cmd_compare,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajsim", description="Task-driven C-arm trajectory simulation.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="phantom seed (corpus seed0 for build-corpus)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", choices=("oracle", "surrogate"), default="oracle")
    p.add_argument("--model", help="surrogate model file")
    p.add_argument("--i0", type=float, help="photons per pixel for an unattenuated ray")
    p.add_argument("--theta-init", type=float, dest="theta_init", help="initial out-of-plane angle (deg)")
    return p


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.i0 is not None:
        overrides["i0"] = args.i0
    if args.theta_init is not None:
        overrides["theta_init"] = args.theta_init
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    from .dataset import DatasetError
    from .surrogate import TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
        if args.backend == "surrogate" and args.command in ("plan", "eval") and not args.model:
            raise UsageError("--backend surrogate requires --model PATH")
        cfg = _resolve(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"trajsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError, TrainingDiverged, OSError, RuntimeError) as exc:
        print(f"trajsim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"trajsim: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
