import csv
import dataclasses
from pathlib import Path

import numpy as np
import pytest

from trajsim.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, ConfigError, RunConfig, main

ROOT = Path(__file__).resolve().parents[1]

FAST = """\
# small detector, short grid, coarse volume
det_rows = 64
det_cols = 64
pitch_mm = 4.0
i0 = 2000
phi_min = 0
phi_max = 20
theta_min = 65
theta_max = 115
detect_grid_n = 16
n_scans = 3
seed0 = 1
epochs = 1
batch_size = 16
recon_n = 16
recon_voxel_mm = 8.0
cgls_iters = 3
scan_phi_end = 20
eval_fluences = 400000
"""


def _run(cfg_path, out, *extra):
    return main(["--config", str(cfg_path), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def fast_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "fast.cfg"
    p.write_text(FAST)
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, fast_cfg):
    """Corpus, model and trajectory produced once through the command line."""
    out = tmp_path_factory.mktemp("run")
    codes = {}
    for cmd in ("build-corpus", "train"):
        codes[cmd] = _run(fast_cfg, out, cmd)
    return out, codes


def test_default_config_file_matches_defaults():
    assert RunConfig.load(ROOT / "configs" / "default.cfg") == RunConfig()
    RunConfig.load(ROOT / "configs" / "ci.cfg").validate()


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError, match="theta_min"):
        RunConfig.from_text("theta_min = 120\ntheta_max = 100\n")
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        RunConfig.from_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="'det_rows'"):
        RunConfig.from_text("det_rows = many\n")
    with pytest.raises(ConfigError, match="key = value"):
        RunConfig.from_text("just words\n")
    with pytest.raises(ConfigError, match="isocenter_jitter_mm"):
        RunConfig.from_text("isocenter_jitter_mm = -2\n")


def test_config_comments_and_tuples():
    cfg = RunConfig.from_text("eval_fluences = 1e5, 5e4  # two levels\n\n# done\n")
    assert cfg.eval_fluences == (1e5, 5e4)


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        ["plan", "--backend", "quantum"],
        ["plan", "--seed", "one"],
        ["plan", "--backend", "surrogate"],
        ["eval", "--backend", "surrogate"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_invalid_theta_span_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("theta_min = 100\ntheta_max = 90\n")
    assert main(["scan-grid", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "theta_min" in capsys.readouterr().err


def test_theta_init_flag_is_validated(fast_cfg, tmp_path):
    assert _run(fast_cfg, tmp_path, "plan", "--theta-init", "50") == EXIT_VALIDATION


def test_missing_config_file(tmp_path):
    assert main(["phantom", "--config", str(tmp_path / "none.cfg")]) == EXIT_VALIDATION


def test_missing_model_is_runtime_error(fast_cfg, tmp_path, capsys):
    code = _run(fast_cfg, tmp_path, "plan", "--backend", "surrogate", "--model", str(tmp_path / "none.bin"))
    assert code == EXIT_RUNTIME
    assert "model file not found" in capsys.readouterr().err


def test_train_without_corpus(fast_cfg, tmp_path):
    assert _run(fast_cfg, tmp_path, "train") == EXIT_RUNTIME


def test_plot_without_map(fast_cfg, tmp_path):
    assert _run(fast_cfg, tmp_path, "plot") == EXIT_RUNTIME


def test_phantom_and_detect_map(fast_cfg, tmp_path):
    assert _run(fast_cfg, tmp_path, "phantom", "--seed", "4") == EXIT_OK
    assert (tmp_path / "phantom_4.scene").is_file()
    assert (tmp_path / "phantom_4_slice.pgm").is_file()
    assert _run(fast_cfg, tmp_path, "detect-map", "--seed", "4") == EXIT_OK
    rows = (tmp_path / "map_4.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 11
    assert _run(fast_cfg, tmp_path, "plot", "--seed", "4") == EXIT_OK
    assert (tmp_path / "map_4_overlay.pgm").is_file()


def test_scan_grid_is_byte_identical(fast_cfg, tmp_path):
    for sub in ("a", "b"):
        assert _run(fast_cfg, tmp_path / sub, "scan-grid", "--seed", "2") == EXIT_OK
    for name in ("scan_00002_noisy.stk", "scan_00002_clean.stk", "scan_00002_map.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plan_oracle_outputs(fast_cfg, tmp_path, capsys):
    assert _run(fast_cfg, tmp_path / "a", "plan") == EXIT_OK
    assert "accumulated d2" in capsys.readouterr().out
    for name in ("trajectory.csv", "servo.csv", "plan_overlay.pgm"):
        assert (tmp_path / "a" / name).is_file()
    assert _run(fast_cfg, tmp_path / "b", "plan") == EXIT_OK
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_plan_sphere_is_flat(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(FAST + "phantom = sphere\n")
    assert _run(cfg, tmp_path, "plan", "--theta-init", "90") == EXIT_OK
    with open(tmp_path / "trajectory.csv") as fh:
        thetas = {float(r["theta"]) for r in csv.DictReader(fh)}
    assert thetas == {90.0}


def test_recon_and_compare(fast_cfg, tmp_path):
    assert _run(fast_cfg, tmp_path, "recon") == EXIT_OK
    assert (tmp_path / "volume_planned.vol").is_file()
    assert _run(fast_cfg, tmp_path, "compare") == EXIT_OK
    with open(tmp_path / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["trajectory"] for r in rows] == ["planned", "planar"]
    assert all(np.isfinite(float(r["rmse"])) for r in rows)
    from trajsim._pgm import read_pgm16

    assert read_pgm16(tmp_path / "slice_planar.pgm").shape == (16, 16)


def test_recon_rejects_foreign_trajectory(fast_cfg, tmp_path):
    from trajsim.planner import Trajectory, write_trajectory_csv

    write_trajectory_csv(Trajectory([(0, 90), (5, 90)]), tmp_path / "trajectory.csv")
    assert _run(fast_cfg, tmp_path, "recon") == EXIT_RUNTIME


def test_corpus_and_training(pipeline):
    out, codes = pipeline
    assert codes == {"build-corpus": EXIT_OK, "train": EXIT_OK}
    assert (out / "manifest.csv").is_file() and (out / "model.bin").is_file()
    assert len((out / "loss.csv").read_text().splitlines()) == 2


def test_training_is_reproducible(pipeline, fast_cfg, tmp_path):
    out, _ = pipeline
    model2 = tmp_path / "m2.bin"
    assert _run(fast_cfg, out, "train", "--model", str(model2)) == EXIT_OK
    assert model2.read_bytes() == (out / "model.bin").read_bytes()


def test_eval_oracle_self_eval(pipeline, fast_cfg, capsys):
    out, _ = pipeline
    assert _run(fast_cfg, out, "eval") == EXIT_OK
    text = (out / "eval_summary.txt").read_text()
    assert "angular distance error: 0.00 +/- 0.00" in text
    assert "detectability degradation: 0.00 +/- 0.00" in text
    head = (out / "eval_steps.csv").read_text().splitlines()[0]
    assert head.startswith("phi,theta_pred,theta_opt,d2_pred,d2_opt")


def test_eval_surrogate(pipeline, fast_cfg):
    out, _ = pipeline
    assert _run(fast_cfg, out, "eval", "--backend", "surrogate", "--model", str(out / "model.bin")) == EXIT_OK
    rows = (out / "eval_noise.csv").read_text().splitlines()
    assert rows[0] == "i0,distance_mean,distance_std" and len(rows) == 2


def test_plan_surrogate(pipeline, fast_cfg, tmp_path):
    out, _ = pipeline
    assert _run(fast_cfg, tmp_path, "plan", "--backend", "surrogate", "--model", str(out / "model.bin")) == EXIT_OK


def test_eval_detects_leakage(pipeline, fast_cfg, tmp_path, capsys):
    import shutil

    out, _ = pipeline
    leak = tmp_path / "leak"
    shutil.copytree(out, leak)
    (leak / "manifest.split.csv").write_text("seed,split\n1,train\n2,train\n3,val\n2,val\n")
    assert _run(fast_cfg, leak, "eval") == EXIT_VALIDATION
    assert "leakage" in capsys.readouterr().err


def test_thread_cap_does_not_change_outputs(fast_cfg, tmp_path, monkeypatch):
    assert _run(fast_cfg, tmp_path / "a", "detect-map") == EXIT_OK
    monkeypatch.setenv("TRAJSIM_THREADS", "4")
    assert _run(fast_cfg, tmp_path / "b", "detect-map") == EXIT_OK
    assert (tmp_path / "a" / "map_1.csv").read_bytes() == (tmp_path / "b" / "map_1.csv").read_bytes()


def test_flag_overrides(fast_cfg, tmp_path):
    cfg = dataclasses.replace(RunConfig.load(fast_cfg), out_dir=str(tmp_path))
    assert cfg.det_rows == 64
    assert _run(fast_cfg, tmp_path, "phantom", "--seed", "9", "--i0", "500") == EXIT_OK
    assert (tmp_path / "phantom_9.scene").is_file()
