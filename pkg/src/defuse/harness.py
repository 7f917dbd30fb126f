"""Grid-refinement studies, the empirical order and report emission."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .errors import IoError, NonPositiveError
from .fdsolver import ExactOracle, GridFunction, solve_decoupled
from .geometry import GridSpec
from .loss import LossBreakdown, history_csv
from .problems import ProblemSpec, exact_error, region_map, residual_metric
from .trainer import TrainConfig, TrainedNet, train

REGIONS = ("omega1", "omega2", "omega")
CSV_HEADER = ("n", "err_o1", "ord_o1", "err_o2", "ord_o2", "err_all", "ord_all")


def order(e_coarse: float, e_fine: float) -> float:
    """``log2(e_coarse / e_fine)``."""
    if not (e_coarse > 0 and e_fine > 0):
        raise NonPositiveError(f"orders need positive errors, got {e_coarse!r} and {e_fine!r}")
    return math.log2(e_coarse / e_fine)


@dataclass
class StudyRow:
    n: int
    err_o1: float
    err_o2: float
    err_all: float
    linf_all: float = float("nan")
    seed: int = 0
    seconds: float = 0.0
    loss_history: list = field(default_factory=list, repr=False)


def _safe_order(a, b) -> Optional[float]:
    try:
        return order(a, b)
    except NonPositiveError:
        return None


@dataclass
class StudyTable:
    problem: str
    params: dict
    rows: list = field(default_factory=list)
    metric: str = "l2"

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.n)

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.rows]

    def orders(self, attr: str = "err_all") -> list:
        """Orders between consecutive rows; ``None`` for the first row or when undefined."""
        out = [None]
        for prev, row in zip(self.rows, self.rows[1:]):
            out.append(_safe_order(getattr(prev, attr), getattr(row, attr)))
        return out

    def summary_line(self, i: int) -> str:
        row = self.rows[i]
        o = self.orders()[i]
        ord_txt = "-" if o is None else f"{o:.4f}"
        return f"n={row.n} err_all={row.err_all:.6g} ord_all={ord_txt} seconds={row.seconds:.2f}"


def region_errors(u, problem: ProblemSpec, rmap, metric: str) -> tuple:
    if metric == "residual":
        return tuple(residual_metric(u, problem, rmap, r) for r in REGIONS) + (float("nan"),)
    l2 = [exact_error(u, problem, rmap, r) for r in REGIONS]
    return l2[0][0], l2[1][0], l2[2][0], l2[2][1]


def run_row(problem: ProblemSpec, n: int, config: TrainConfig, *, oracle: bool = False,
            band_cells=None, halfwidth=None, metric: Optional[str] = None):
    """Train (or use the exact oracle), solve and measure on one grid.

    Returns ``(StudyRow, composite solution, TrainedNet or None)``.
    """
    metric = metric or ("l2" if problem.has_exact else "residual")
    start = time.perf_counter()
    grid = GridSpec.uniform(problem.bounds, n)
    rmap = region_map(problem, grid, band_cells, halfwidth)
    seed = config.seed + n
    trained = None
    if oracle:
        source = ExactOracle(problem)
    else:
        trained = train(problem, rmap, replace(config, seed=seed))
        source = trained
    sol = solve_decoupled(source, problem, grid, rmap)
    u = sol.composite()
    e1, e2, ea, linf = region_errors(u, problem, rmap, metric)
    row = StudyRow(n, e1, e2, ea, linf, seed, time.perf_counter() - start,
                   trained.loss_history if trained else [])
    return row, u, trained


def _annotated(exc: BaseException, n: int) -> BaseException:
    if exc.args and isinstance(exc.args[0], str):
        exc.args = (f"grid n={n}: {exc.args[0]}",) + exc.args[1:]
    else:
        exc.args = (f"grid n={n}",) + exc.args
    return exc


def check_grids(grids: Sequence[int]) -> list:
    grids = [int(g) for g in grids]
    if len(grids) < 2:
        raise ValueError("a study needs at least two grids")
    for a, b in zip(grids, grids[1:]):
        if b != 2 * a:
            raise ValueError(f"grids must double strictly, got {a} then {b}")
    return grids


def convergence_study(problem: ProblemSpec, grids: Sequence[int], config: TrainConfig = TrainConfig(), *,
                      oracle: bool = False, band_cells=None, halfwidth=None, metric: Optional[str] = None,
                      workers: int = 1, echo: Optional[Callable[[str], None]] = None) -> StudyTable:
    """One row per grid, each trained afresh with seed ``config.seed + n``.

    ``oracle=True`` replaces the networks by exact Dirichlet data on the
    frontier, which isolates the finite-difference half.  Problems without an
    exact solution are measured with :func:`residual_metric`.
    """
    grids = check_grids(grids)
    metric = metric or ("l2" if problem.has_exact else "residual")

    def one(n):
        try:
            return run_row(problem, n, config, oracle=oracle, band_cells=band_cells,
                           halfwidth=halfwidth, metric=metric)[0]
        except Exception as exc:
            raise _annotated(exc, n)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, grids))
    else:
        rows = []
        for n in grids:
            rows.append(one(n))
            if echo is not None:
                echo(StudyTable(problem.name, problem.params, rows, metric).summary_line(len(rows) - 1))
    table = StudyTable(problem.name, dict(problem.params), rows, metric)
    if workers > 1 and echo is not None:
        for i in range(len(rows)):
            echo(table.summary_line(i))
    return table


# -- emission -----------------------------------------------------------------

def _fmt_err(e: float) -> str:
    return f"{e:.6g}"


def _fmt_ord(o: Optional[float]) -> str:
    return "" if o is None else f"{o:.4f}"


def table_csv(table: StudyTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    cols = [table.orders(a) for a in ("err_o1", "err_o2", "err_all")]
    for i, r in enumerate(table.rows):
        writer.writerow([r.n, _fmt_err(r.err_o1), _fmt_ord(cols[0][i]), _fmt_err(r.err_o2), _fmt_ord(cols[1][i]),
                         _fmt_err(r.err_all), _fmt_ord(cols[2][i])])
    return buf.getvalue()


def table_markdown(table: StudyTable) -> str:
    name = "residual" if table.metric == "residual" else "L2 error"
    params = ", ".join(f"{k}={v:g}" for k, v in table.params.items())
    lines = [f"**{table.problem}**" + (f" ({params})" if params else ""), "",
             f"| N | Ω1 {name} | order | Ω2 {name} | order | Ω {name} | order |",
             "|---|---|---|---|---|---|---|"]
    cols = [table.orders(a) for a in ("err_o1", "err_o2", "err_all")]
    for i, r in enumerate(table.rows):
        cells = [str(r.n), f"{r.err_o1:.2e}", _fmt_ord(cols[0][i]) or "-", f"{r.err_o2:.2e}",
                 _fmt_ord(cols[1][i]) or "-", f"{r.err_all:.2e}", _fmt_ord(cols[2][i]) or "-"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_table_csv(text: str) -> list:
    """Rows of an emitted study CSV as dicts of floats (``None`` for empty cells)."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    return [{k: (int(v) if k == "n" else (float(v) if v != "" else None)) for k, v in row.items()} for row in reader]


def render(obj, fmt: str = "csv") -> str:
    """Text form of a study table, grid function or loss history."""
    if fmt not in ("csv", "md", "markdown"):
        raise ValueError(f"unknown format {fmt!r}")
    if isinstance(obj, StudyTable):
        return table_csv(obj) if fmt == "csv" else table_markdown(obj)
    if isinstance(obj, GridFunction):
        return obj.to_csv()
    if isinstance(obj, TrainedNet):
        return history_csv(obj.loss_history)
    if isinstance(obj, (list, tuple)) and all(isinstance(b, LossBreakdown) for b in obj):
        return history_csv(obj)
    raise TypeError(f"cannot emit {type(obj).__name__}")


def write_atomic(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def emit(obj, fmt: str, path) -> str:
    text = render(obj, fmt)
    write_atomic(path, text)
    return text
