import subprocess
import sys

import pytest

from dmsb.cli import build_parser, main
from dmsb.experiments import read_csv

SPEC = """
[experiment]
name = "cli"
repetitions = 1
steps = 150
eval_rounds = 40
smoothing = 50
out_dir = "out"
agents = ["diffusion", "ppo", "random"]
mechanisms = ["dmsb", "spa"]

[sweep]
variable = "task_size_mb"
values = [20.0, 40.0]

[scenario]
episode_length = 50

[trainer]
batch_size = 16
warmup = 40
hidden = [16, 16]
log_every = 50
"""


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "cli.toml"
    path.write_text(SPEC)
    return path


def test_train_evaluate_sweep_chart(spec_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--spec", str(spec_file)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"dmsb_seed0.ckpt", "ppo_seed0.ckpt", "train_log_seed0.csv", "train_log_ppo_seed0.csv",
            "convergence.csv", "convergence.svg"} <= names
    assert (out / "train_log_seed0.csv").read_text().startswith("# dmsb-trainlog v1\n")

    assert main(["evaluate", "--spec", str(spec_file)]) == 0
    _, _, rows = read_csv(out / "evaluation.csv")
    assert [r["method"] for r in rows] == ["dmsb", "spa", "diffusion", "ppo", "random"]

    assert main(["sweep", "--spec", str(spec_file)]) == 0
    _, _, rows = read_csv(out / "sweep_task_size_mb.csv")
    assert len(rows) == 2 * 5
    assert (out / "sweep_task_size_mb.svg").exists()
    assert (out / "sweep_task_size_mb_latency.svg").exists()

    chart = tmp_path / "c.svg"
    assert main(["chart", str(out / "convergence.csv"), "-o", str(chart), "--title", "T"]) == 0
    assert "<polyline" in chart.read_text()


def test_flags_override_spec(spec_file, tmp_path):
    out = tmp_path / "elsewhere"
    code = main(["sweep", "--spec", str(spec_file), "--out-dir", str(out), "--seed", "3",
                 "--mechanisms", "spa", "--agents", "greedy"])
    assert code == 0
    _, _, rows = read_csv(out / "sweep_task_size_mb.csv")
    assert {(r["method"], r["seed"]) for r in rows} == {("spa", "3"), ("greedy", "3")}


def test_same_spec_same_bytes(spec_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["train", "--spec", str(spec_file), "--out-dir", str(d),
                     "--agents", "diffusion", "--mechanisms", "dmsb"]) == 0
        assert main(["sweep", "--spec", str(spec_file), "--out-dir", str(d),
                     "--agents", "diffusion", "--mechanisms", "dmsb"]) == 0
    for name in ("convergence.csv", "sweep_task_size_mb.csv", "train_log_seed0.csv",
                 "dmsb_seed0.ckpt", "convergence.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_domain_errors_exit_2(spec_file, tmp_path, capsys):
    assert main(["train", "--spec", str(spec_file), "--mechanisms", "vcg"]) == 2
    assert "unknown mechanism" in capsys.readouterr().err
    assert main(["evaluate", "--spec", str(spec_file), "--out-dir", str(tmp_path / "none")]) == 2
    assert main(["sweep", "--steps", "10"]) == 2


def test_chart_of_empty_csv(tmp_path, capsys):
    from dmsb.experiments import write_sweep_csv
    path = write_sweep_csv(tmp_path / "e.csv", [])
    assert main(["chart", str(path)]) == 2
    assert not (tmp_path / "e.svg").exists()


def test_property_check(capsys):
    assert main(["property-check", "--markets", "300", "--seed", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(line.startswith("PASS") for line in out)


def test_parser_lists_every_verb():
    sub = next(a for a in build_parser()._actions if a.dest == "verb")
    assert set(sub.choices) == {"train", "evaluate", "sweep", "chart", "property-check"}


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "dmsb.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "property-check" in out
