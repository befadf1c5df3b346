import json

from acsharp.cli import main


def test_cli_runs_and_writes(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: sample-noise\npaths: 20\nroot_seed: 1\noptions: {n_steps: 5, n_x: 7}\n")
    out = tmp_path / "out"
    assert main(["sample-noise", "--config", str(cfg), "--out", str(out), "--root-seed", "4"]) == 0
    summary = json.loads((out / "report.json").read_text())
    assert summary["root_seed"] == 4
    assert (out / "records.ndjson").exists()
    assert json.loads(capsys.readouterr().out)["failures"] == 0


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: evolve\nnonsense: 1\n")
    assert main(["evolve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "ConfigurationError" in capsys.readouterr().err


def test_cli_dump_trajectories(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: scalar-deviation\neps_list: [0.04]\npaths: 5\ngamma: 2.0\n"
                   "kappa: 1.1\nalpha: 0.6\noptions: {n_xi: 8, n_x: 3}\n")
    out = tmp_path / "o"
    assert main(["scalar-deviation", "--config", str(cfg), "--out", str(out), "--dump-trajectories"]) == 0
    header = (out / "trajectory_eps0.04_path0000.csv").read_text().splitlines()[0]
    assert header.startswith("tau,Y,Y_xi,A")
