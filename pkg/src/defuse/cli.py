"""Command-line entry point: ``defuse <command> [flags]``.

Exit status is 0 on success, 1 when a numerical step fails and 2 for usage
errors.  ``--config FILE`` reads ``key=value`` lines whose keys are the flag
names without the leading dashes; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DefuseError, UnknownParam, UnknownProblem, UsageError
from .fdsolver import ExactOracle, GridFunction, solve_decoupled
from .geometry import GridSpec, Label
from .gradcheck import run_all
from .harness import check_grids, convergence_study, emit, region_errors, write_atomic
from .jetnet import save_params
from .loss import LossWeights, history_csv
from .problems import get_problem, problem_names, region_map, tunables
from .trainer import OPTIMIZERS, TrainConfig, train

COMMANDS = ("list-problems", "inspect", "train", "solve", "study", "check-gradients")
NEEDS_PROBLEM = ("inspect", "train", "solve", "study")
NEEDS_N = ("inspect", "train", "solve")


@dataclass
class RunConfig:
    command: str
    problem: Optional[str] = None
    params: dict = field(default_factory=dict)
    n: Optional[int] = None
    grids: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    band_width: Optional[int] = None
    band_halfwidth: Optional[float] = None
    oracle: bool = False
    out: str = "."
    seed: int = 0
    format: str = "csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag_table():
    """(flag, argparse kwargs) shared by the parser and the config-file reader."""
    return [
        ("--problem", {}),
        ("--n", {"type": int}),
        ("--grids", {}),
        ("--tau-minus", {"type": float}),
        ("--tau-plus", {"type": float}),
        ("--seed", {"type": int}),
        ("--epochs", {"type": int}),
        ("--lr", {"type": float}),
        ("--optimizer", {"choices": OPTIMIZERS}),
        ("--band-width", {"type": int}),
        ("--band-halfwidth", {"type": float}),
        ("--weights", {}),
        ("--out", {}),
        ("--format", {"choices": ("csv", "md")}),
        ("--oracle", {"action": "store_true", "default": None}),
    ]


def _build_parser() -> _Parser:
    p = _Parser(prog="defuse", allow_abbrev=False, description="DNN and finite-difference solver for degenerate interface problems")
    p.add_argument("command", choices=COMMANDS)
    for flag, kw in _flag_table():
        p.add_argument(flag, **{"default": None, **kw})
    p.add_argument("--config")
    return p


def _read_config_file(path: str) -> list:
    """Turn ``key=value`` lines into an argv fragment."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}", "--config") from exc
    known = {flag[2:]: kw for flag, kw in _flag_table()}
    argv = []
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key=value", "--config")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{num}: unknown key {key!r}", f"--{key}")
        if known[key].get("action") == "store_true":
            if value.lower() in ("1", "true", "yes"):
                argv.append(f"--{key}")
            continue
        argv += [f"--{key}", value]
    return argv


def _parse_weights(text: str):
    if text == "auto":
        return "auto"
    try:
        parts = [float(t) for t in text.split(",")]
        if len(parts) != 4:
            raise ValueError
        return LossWeights(*parts)
    except ValueError:
        raise UsageError(f"--weights expects 'auto' or four positive numbers, got {text!r}", "--weights") from None


def _parse_grids(text: str) -> list:
    try:
        grids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--grids expects comma-separated integers, got {text!r}", "--grids") from None
    try:
        return check_grids(grids)
    except ValueError as exc:
        raise UsageError(f"--grids: {exc}", "--grids") from None


def parse_args(argv: Sequence[str]) -> RunConfig:
    """Validate flags and build a :class:`RunConfig`; raises :class:`UsageError`."""
    argv = [str(a) for a in argv]
    parser = _build_parser()
    ns = parser.parse_args(argv)
    if ns.config:
        file_ns = parser.parse_args([ns.command] + _read_config_file(ns.config))
        for key, value in vars(file_ns).items():
            if getattr(ns, key) is None:
                setattr(ns, key, value)

    cfg = RunConfig(ns.command)
    if ns.command in NEEDS_PROBLEM:
        if not ns.problem:
            raise UsageError(f"{ns.command} requires --problem", "--problem")
        if ns.problem not in problem_names():
            raise UsageError(f"unknown problem {ns.problem!r}; known: {', '.join(problem_names())}", "--problem")
        cfg.problem = ns.problem
        for flag, key in (("--tau-minus", "tau_minus"), ("--tau-plus", "tau_plus")):
            value = getattr(ns, key)
            if value is None:
                continue
            if key not in tunables(ns.problem):
                raise UsageError(f"{ns.problem} has no parameter {key}", flag)
            if not value > 0:
                raise UsageError(f"{flag} must be positive", flag)
            cfg.params[key] = value
    if ns.command in NEEDS_N:
        if ns.n is None:
            raise UsageError(f"{ns.command} requires --n", "--n")
        if ns.n < 2:
            raise UsageError("--n must be at least 2", "--n")
        cfg.n = ns.n
    if ns.command == "study":
        if ns.grids is None:
            raise UsageError("study requires --grids", "--grids")
        cfg.grids = _parse_grids(ns.grids)
    if ns.band_width is not None and ns.band_width < 0:
        raise UsageError("--band-width must be >= 0", "--band-width")
    if ns.band_halfwidth is not None and not ns.band_halfwidth > 0:
        raise UsageError("--band-halfwidth must be positive", "--band-halfwidth")
    if ns.epochs is not None and ns.epochs < 1:
        raise UsageError("--epochs must be >= 1", "--epochs")
    if ns.lr is not None and not ns.lr > 0:
        raise UsageError("--lr must be positive", "--lr")

    cfg.seed = ns.seed if ns.seed is not None else 0
    cfg.band_width = ns.band_width
    cfg.band_halfwidth = ns.band_halfwidth
    cfg.oracle = bool(ns.oracle)
    cfg.out = ns.out or "."
    cfg.format = ns.format or "csv"
    cfg.train = TrainConfig(
        epochs=ns.epochs,
        learning_rate=ns.lr if ns.lr is not None else TrainConfig.learning_rate,
        optimizer=ns.optimizer,
        seed=cfg.seed,
        weights=_parse_weights(ns.weights) if ns.weights is not None else "auto",
    )
    return cfg


# -- commands -------------------------------------------------------------------

def _problem(cfg: RunConfig):
    return get_problem(cfg.problem, **cfg.params)


def _rmap(cfg: RunConfig, problem, n: int):
    grid = GridSpec.uniform(problem.bounds, n)
    return grid, region_map(problem, grid, cfg.band_width, cfg.band_halfwidth)


def _cmd_list(cfg: RunConfig, out) -> int:
    for name in problem_names():
        p = get_problem(name)
        knobs = ",".join(tunables(name)) or "-"
        kind = "degenerate" if p.degenerate else "regular"
        exact = "exact" if p.has_exact else "no-exact"
        out.write(f"{name}\t{p.dim}D\t{kind}\t{p.jump_type}\t{exact}\ttunables={knobs}\n")
    return 0


def _cmd_inspect(cfg: RunConfig, out) -> int:
    problem = _problem(cfg)
    grid, rmap = _rmap(cfg, problem, cfg.n)
    out.write(f"problem={problem.name} dim={problem.dim} n={cfg.n} h={','.join(f'{h:.6g}' for h in grid.h)}\n")
    for lab in Label:
        out.write(f"{lab.text}={rmap.count(lab)}\n")
    out.write(f"band_cells={int(rmap.band_cells.sum())} node_pairs={len(rmap.node_pairs)}\n")
    write_atomic(os.path.join(cfg.out, "regions.csv"), rmap.to_csv())
    return 0


def _train(cfg: RunConfig, problem, rmap):
    return train(problem, rmap, cfg.train)


def _write_training(cfg: RunConfig, trained) -> None:
    tc = trained.config
    write_atomic(os.path.join(cfg.out, "loss.csv"), history_csv(trained.loss_history))
    write_atomic(os.path.join(cfg.out, "config.txt"), tc.echo())
    os.makedirs(cfg.out, exist_ok=True)
    if trained.net.shared:
        save_params(os.path.join(cfg.out, "net.bin"), trained.net.plus)
    else:
        save_params(os.path.join(cfg.out, "net_minus.bin"), trained.net.minus)
        save_params(os.path.join(cfg.out, "net_plus.bin"), trained.net.plus)


def _cmd_train(cfg: RunConfig, out) -> int:
    problem = _problem(cfg)
    _, rmap = _rmap(cfg, problem, cfg.n)
    trained = _train(cfg, problem, rmap)
    _write_training(cfg, trained)
    b = trained.loss_history[-1]
    out.write(f"steps={len(trained.loss_history)} l1={b.l1:.6g} l2={b.l2:.6g} l3={b.l3:.6g} "
              f"l4={b.l4:.6g} total={b.total:.6g}\n")
    return 0


def _cmd_solve(cfg: RunConfig, out) -> int:
    problem = _problem(cfg)
    grid, rmap = _rmap(cfg, problem, cfg.n)
    if cfg.oracle:
        source = ExactOracle(problem)
    else:
        source = _train(cfg, problem, rmap)
        _write_training(cfg, source)
    sol = solve_decoupled(source, problem, grid, rmap)
    u = sol.composite()
    mask = np.isfinite(u)
    write_atomic(os.path.join(cfg.out, "solution.csv"), GridFunction(grid, np.where(mask, u, np.nan), mask).to_csv())
    write_atomic(os.path.join(cfg.out, "solution_minus.csv"), sol.minus.to_csv())
    write_atomic(os.path.join(cfg.out, "solution_plus.csv"), sol.plus.to_csv())
    metric = "l2" if problem.has_exact else "residual"
    e1, e2, ea, linf = region_errors(u, problem, rmap, metric)
    out.write(f"n={cfg.n} metric={metric} err_o1={e1:.6g} err_o2={e2:.6g} err_all={ea:.6g}"
              + (f" linf_all={linf:.6g}" if metric == "l2" else "") + "\n")
    return 0


def _cmd_study(cfg: RunConfig, out) -> int:
    problem = _problem(cfg)

    def echo(line):
        out.write(line + "\n")
        out.flush()

    table = convergence_study(problem, cfg.grids, cfg.train, oracle=cfg.oracle, band_cells=cfg.band_width,
                              halfwidth=cfg.band_halfwidth, echo=echo)
    name = "study.csv" if cfg.format == "csv" else "study.md"
    emit(table, cfg.format, os.path.join(cfg.out, name))
    return 0


def _cmd_check(cfg: RunConfig, out) -> int:
    results = run_all(cfg.seed)
    for r in results:
        out.write(r.line() + "\n")
    return 0 if all(r.passed for r in results) else 1


_DISPATCH = {
    "list-problems": _cmd_list,
    "inspect": _cmd_inspect,
    "train": _cmd_train,
    "solve": _cmd_solve,
    "study": _cmd_study,
    "check-gradients": _cmd_check,
}


def run(cfg: RunConfig, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        return _DISPATCH[cfg.command](cfg, out)
    except (UsageError, UnknownProblem, UnknownParam) as exc:
        err.write(f"usage error: {exc}\n")
        return 2
    except DefuseError as exc:
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
