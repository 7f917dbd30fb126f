import io
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from defuse.cli import main, parse_args, run
from defuse.errors import UsageError
from defuse.loss import LossWeights


def test_study_example():
    cfg = parse_args("study --problem ex4_1 --grids 10,20,40,80,160 --tau-minus 1e12 --tau-plus 1 --seed 0".split())
    assert cfg.grids == [10, 20, 40, 80, 160]
    assert cfg.params == {"tau_minus": 1e12, "tau_plus": 1.0}
    assert cfg.seed == 0 and cfg.train.seed == 0


def test_single_grid_study_is_rejected():
    with pytest.raises(UsageError) as info:
        parse_args("study --problem ex4_1 --grids 10".split())
    assert info.value.flag == "--grids"


def test_solve_example():
    cfg = parse_args("solve --problem ex4_3 --n 80 --seed 7 --out r/".split())
    assert (cfg.command, cfg.problem, cfg.n, cfg.seed, cfg.out) == ("solve", "ex4_3", 80, 7, "r/")


@pytest.mark.parametrize("argv", [
    "solve --problem ex4_3",
    "solve --n 20",
    "solve --problem nope --n 20",
    "solve --problem ex4_11 --n 20 --tau-minus 2",
    "train --problem ex4_1 --n 20 --weights 1,2,3",
    "train --problem ex4_1 --n 20 --optimizer rmsprop",
    "train --problem ex4_1 --n 20 --bogus",
    "train --problem ex4_1 --n 20 --epo 3",
    "study --problem ex4_1 --grids 10,30",
    "launch",
])
def test_usage_errors(argv):
    with pytest.raises(UsageError):
        parse_args(argv.split())
    assert main(argv.split()) == 2


def test_weights_flag():
    cfg = parse_args("train --problem ex4_1 --n 20 --weights 1,2,3,4".split())
    assert cfg.train.weights == LossWeights(1, 2, 3, 4)


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# demo\nproblem = ex4_3\nn=40\nseed=5  # trailing comment\nepochs=9\noracle=true\n")
    cfg = parse_args(["solve", "--config", str(path), "--seed", "8"])
    assert (cfg.problem, cfg.n, cfg.seed, cfg.train.epochs, cfg.oracle) == ("ex4_3", 40, 8, 9, True)
    path.write_text("colour=blue\n")
    with pytest.raises(UsageError):
        parse_args(["solve", "--config", str(path)])


TOKENS = ["study", "solve", "train", "inspect", "list-problems", "check-gradients", "--problem", "ex4_1", "ex4_3",
          "--n", "--grids", "10,20", "20", "-3", "abc", "--seed", "--epochs", "0", "--tau-minus", "1e12",
          "--weights", "auto", "--format", "md", "--config", "/nonexistent", "--", "=", ""]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.one_of(st.sampled_from(TOKENS), st.text(max_size=8)), max_size=8))
def test_parse_args_is_total(argv):
    if any(a.startswith("-h") or a.startswith("--h") for a in argv):
        return
    try:
        parse_args(argv)
    except UsageError:
        pass


def test_list_problems():
    out = io.StringIO()
    assert run(parse_args(["list-problems"]), out) == 0
    lines = out.getvalue().splitlines()
    assert len(lines) == 10
    assert lines[0].startswith("ex4_1\t1D\tdegenerate")


def test_band_covers_domain_exit_status():
    err = io.StringIO()
    assert run(parse_args("solve --problem ex4_1 --n 2 --oracle".split()), io.StringIO(), err) == 1
    assert "BandCoversDomain" in err.getvalue() and "(3,)" in err.getvalue()


def test_inspect_writes_regions(tmp_path):
    out = io.StringIO()
    assert run(parse_args(["inspect", "--problem", "ex4_3", "--n", "20", "--out", str(tmp_path)]), out) == 0
    assert (tmp_path / "regions.csv").read_text().startswith("i,j,label\n")
    assert "omega1=" in out.getvalue()


def test_oracle_solve_outputs(tmp_path):
    out = io.StringIO()
    assert run(parse_args(["solve", "--problem", "ex4_3", "--n", "20", "--oracle", "--out", str(tmp_path)]), out) == 0
    for name in ("solution.csv", "solution_minus.csv", "solution_plus.csv"):
        assert (tmp_path / name).read_text().startswith("x1,x2,u\n")
    assert out.getvalue().startswith("n=20 metric=l2 err_o1=")


@pytest.mark.parametrize("name, files", [("ex4_1", ["net.bin"]), ("ex4_2", ["net_minus.bin", "net_plus.bin"])])
def test_train_outputs(tmp_path, name, files):
    argv = ["train", "--problem", name, "--n", "20", "--epochs", "2", "--out", str(tmp_path)]
    assert run(parse_args(argv), io.StringIO()) == 0
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 3
    assert "epochs=2" in (tmp_path / "config.txt").read_text()
    assert sorted(p.name for p in tmp_path.glob("*.bin")) == files


def test_study_markdown(tmp_path):
    out = io.StringIO()
    argv = ["study", "--problem", "ex4_3", "--grids", "20,40", "--oracle", "--format", "md", "--out", str(tmp_path)]
    assert run(parse_args(argv), out) == 0
    assert (tmp_path / "study.md").read_text().startswith("**ex4_3**")
    assert len(out.getvalue().splitlines()) == 2


def test_console_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "defuse", "list-problems"], capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 10
    proc = subprocess.run([sys.executable, "-m", "defuse", "study", "--problem", "ex4_1", "--grids", "10"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "usage error" in proc.stderr
