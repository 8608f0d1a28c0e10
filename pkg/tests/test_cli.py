import json
import subprocess
import sys

import pytest

from dualfed.cli import build_parser, main

TINY = ["rounds=1", "local_epochs=1", "target=0", "dataset.n_per_class=20", "dataset.n_domains=3",
        "dataset.n_classes=3", "dataset.d_in=6", "model.d_h=8", "model.rank=2", "model.heads=2"]


def ov(extra=()):
    out = []
    for item in [*TINY, *extra]:
        out += ["--override", item]
    return out


SUBCOMMANDS = ["train", "motivation", "ablate", "sweep-alpha", "sweep-alpha-dynamic", "sweep-clients",
               "fusion-sweep", "export-features", "comm-report"]


def test_parser_has_all_subcommands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)


def test_train_then_comm_report(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "t"), "--seed", "4", *ov()]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["command"] == "train" and out["target_acc"]["per_seed"].keys() == {"4"}
    run = tmp_path / "t" / "seed_4" / "target_0"
    assert main(["comm-report", str(run), "--out", str(tmp_path / "c")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["total_bytes"] == rep["transcript_bytes"]
    assert (tmp_path / "c" / "comm_report.csv").exists()
    assert main(["export-features", "--run", str(run), "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "features.csv").exists()


@pytest.mark.parametrize("cmd,extra,files", [
    ("motivation", [], ["motivation.csv", "motivation_matrix.csv", "motivation.json"]),
    ("ablate", [], ["ablation.csv", "ablation.json"]),
    ("sweep-alpha", ["--alphas", "0,1"], ["sweep_alpha.csv"]),
    ("sweep-alpha-dynamic", ["--alpha-max", "1", "--taus", "10,100"], ["sweep_alpha_dynamic.csv"]),
    ("sweep-clients", ["--ks", "2,4"], ["sweep_clients.csv"]),
    ("fusion-sweep", ["--lambdas", "1"], ["fusion_sweep.csv"]),
])
def test_commands_write_tables(tmp_path, capsys, cmd, extra, files):
    assert main([cmd, "--out", str(tmp_path), *extra, *ov()]) == 0
    json.loads(capsys.readouterr().out)
    for f in files:
        assert (tmp_path / f).exists(), f


def test_env_default_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DUALFED_OUT", str(tmp_path / "root"))
    assert main(["train", *ov()]) == 0
    assert (tmp_path / "root" / "train" / "summary.json").exists()


def test_config_file_with_cli_override(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("rounds: 7\nseeds: [2]\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), *ov()]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [2]
    metrics = (tmp_path / "o" / "seed_2" / "target_0" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 1 + 2  # header, round 0, round 1 (override beats file)


@pytest.mark.parametrize("argv,kind", [
    (["train", "--override", "toggles.a_dw=false"], "config_error"),
    (["train", "--override", "nonsense=1"], "config_error"),
    (["comm-report", "/nonexistent/run"], "file_error"),
])
def test_errors_emit_json_and_nonzero(tmp_path, capsys, argv, kind):
    assert main([*argv, "--out", str(tmp_path)]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == kind and err["message"]


def test_config_error_names_field(tmp_path, capsys):
    assert main(["train", "--override", "optim.momentum=2", "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "optim.momentum"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dualfed", "train", "--out", str(tmp_path), *ov()],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["command"] == "train"
