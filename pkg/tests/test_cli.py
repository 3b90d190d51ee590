import json

import numpy as np
import pytest

from jumpland.cli import EXIT_INVALID, EXIT_OK, main
from jumpland.formats import data_section, read_rollout_log, read_trajectory


@pytest.fixture(scope="module")
def planned(tmp_path_factory):
    d = tmp_path_factory.mktemp("plan")
    assert main(["plan", "--dx", "0.8", "--out", str(d / "traj.csv")]) == EXIT_OK
    return d


def test_plan_writes_trajectory_and_report(planned):
    knots, _, meta = read_trajectory(planned / "traj.csv")
    assert knots.status == "Converged"
    rows = [ln for ln in (planned / "traj.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 201
    report = json.loads((planned / "traj.report.json").read_text())
    assert report["status"] == "Converged"
    assert report["landing_com"][0] == pytest.approx(0.8, abs=0.05)
    assert report["checks"]["stance_dynamics"] <= 1e-6
    assert meta["config_hash"] == report["config_hash"]


def test_plan_narrow_polygon(tmp_path):
    assert main(["plan", "--dx", "0.8", "--polygon", "narrow", "--out", str(tmp_path / "n.csv")]) == EXIT_OK
    rep = json.loads((tmp_path / "n.report.json").read_text())
    home, land = rep["homing_polygon"], rep["landing_polygon"]
    assert land["front_width"] - home["front_width"] == pytest.approx(-0.12, abs=1e-9)
    assert land["rear_x"] - home["rear_x"] == pytest.approx(0.06, abs=1e-9)


def test_plan_rejects_out_of_box_command(tmp_path, capsys):
    code = main(["plan", "--dx", "9", "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_INVALID
    assert "sanity box" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


@pytest.mark.parametrize("argv", [
    ["plan", "--polygon", "1,2,3"],
    ["plan", "--dx", "abc"],
    ["eval", "--checkpoint", "missing.pt", "--scenario", "front"],
    ["rollout", "--traj", "missing.csv"],
    ["bogus"],
])
def test_invalid_usage_exits_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INVALID


def test_bad_config_exits_2(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("ppo:\n  learning_rate_typo: 1\n")
    assert main(["plan", "--config", str(tmp_path / "c.yaml")]) == EXIT_INVALID
    assert "learning_rate_typo" in capsys.readouterr().err


# -- rollout -----------------------------------------------------------------------------


def test_rollout_has_airborne_window(planned, capsys):
    out = planned / "roll.csv"
    assert main(["rollout", "--traj", str(planned / "traj.csv"), "--out", str(out)]) == EXIT_OK
    cols, meta = read_rollout_log(out)
    air = sum(cols[f"contact_{i}"] for i in range(4)) == 0
    assert air.any()
    assert meta["trajectory"] == "traj.csv"
    assert "airborne windows [(" in capsys.readouterr().out


def test_rollout_same_seed_identical_data(planned):
    a, b = planned / "a.csv", planned / "b.csv"
    for p in (a, b):
        assert main(["rollout", "--traj", str(planned / "traj.csv"), "--seed", "3", "--out", str(p)]) == EXIT_OK
    assert data_section(a) == data_section(b)


def test_rollout_corrupted_trajectory(planned, tmp_path, capsys):
    lines = (planned / "traj.csv").read_text().splitlines()
    bad = next(i for i, ln in enumerate(lines) if ln.startswith("time_s,")) + 57
    lines[bad] = lines[bad].replace(",", ",nope", 3)
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    assert main(["rollout", "--traj", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "r.csv")]) == EXIT_INVALID
    assert f"bad.csv:{bad + 1}:" in capsys.readouterr().err


# -- train / eval / export ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("train") / "run"
    argv = ["train", "--terrain", "flat", "--relaxation", "off", "--out", str(d), "--iterations", "2",
            "--num-envs", "8", "--seed", "2"]
    assert main(argv) == EXIT_OK
    return d


def test_train_outputs(tiny_run):
    man = json.loads((tiny_run / "manifest.json").read_text())
    assert man["variant"] == "baseline"
    assert man["reward_sigma_joint"] == [0.2, 0.2]
    assert man["seed"] == 2 and man["iterations"] == 2
    for name in ("config.yaml", "trajectory.csv", "metrics.csv", "model_final.pt", "policy_rollout.csv"):
        assert (tiny_run / name).exists(), name


def test_train_refuses_to_overwrite(tiny_run, capsys):
    assert main(["train", "--out", str(tiny_run), "--iterations", "1"]) == EXIT_INVALID
    assert "--force" in capsys.readouterr().err


def test_proposed_variant_manifest(tmp_path):
    d = tmp_path / "run"
    assert main(["train", "--terrain", "rough", "--relaxation", "on", "--out", str(d), "--iterations", "1",
                 "--num-envs", "4"]) == EXIT_OK
    man = json.loads((d / "manifest.json").read_text())
    assert man["variant"] == "proposed" and man["reward_sigma_joint"] == [0.2, 2.0]


def test_eval_writes_csv(tiny_run, capsys):
    out = tiny_run / "eval.csv"
    assert main(["eval", "--checkpoint", str(tiny_run / "model_final.pt"), "--scenario", "hind",
                 "--height", "0.13", "--episodes", "4", "--out", str(out)]) == EXIT_OK
    body = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert body[0].startswith("episode,outcome,score") and len(body) == 5
    assert "hind @ 0.13 m" in capsys.readouterr().out


@pytest.mark.parametrize("what, prefixes", [
    ("rewards", ("mean_reward", "term_")),
    ("tracking", ("q_measured_", "q_action_", "q_reference_")),
    ("energy", ("energy_",)),
])
def test_export(tiny_run, tmp_path, what, prefixes):
    out = tmp_path / f"{what}.csv"
    assert main(["export", "--run", str(tiny_run), "--what", what, "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    series = {ln.split(",")[0] for ln in lines[1:]}
    for p in prefixes:
        assert any(s.startswith(p) for s in series), p
    if what == "tracking":
        assert len(series) == 36
    if what == "energy":
        vals = np.array([float(ln.split(",")[2]) for ln in lines[1:] if ln.startswith("energy_FL")])
        assert np.all(np.diff(vals) >= 0)


def test_export_empty_dir(tmp_path):
    assert main(["export", "--run", str(tmp_path), "--what", "rewards"]) == EXIT_INVALID
    assert main(["export", "--run", str(tmp_path), "--what", "tracking"]) == EXIT_INVALID
