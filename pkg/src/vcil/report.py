"""Summaries of finished run directories: text tables, tidy CSV and PNG figures."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from . import analyzer
from .harness import SIG, AccuracyMatrix, avg_acc, bwf, missing_run_files


class IncompleteRunError(FileNotFoundError):
    def __init__(self, run_dir: Path, missing: list[str]):
        super().__init__(f"incomplete run {run_dir}: missing {', '.join(missing)}")
        self.missing = missing


@dataclass
class RunSummary:
    name: str
    matrix: AccuracyMatrix
    ratios: list[float]
    storage_bytes: list[int]
    exemplar_bytes: int
    flags: dict

    @property
    def acc_n(self) -> float:
        return self.matrix.pooled[-1]

    @property
    def bwf(self) -> float | None:
        return bwf(self.matrix) if self.matrix.n >= 2 else None

    @property
    def avg(self) -> float:
        return avg_acc(self.matrix)

    @property
    def avg_paper(self) -> float | None:
        return avg_acc(self.matrix, paper_formula=True) if self.matrix.n >= 2 else None


def load_run(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    missing = missing_run_files(run_dir)
    if missing:
        raise IncompleteRunError(run_dir, missing)
    matrix = AccuracyMatrix.from_csv((run_dir / "accuracy_matrix.csv").read_text())
    budget = json.loads((run_dir / "budget.json").read_text())
    train = json.loads((run_dir / "config.json").read_text())["train"]
    flags = {k: bool(train.get(k, False)) for k in ("sep_ada", "relation_recovery", "compensation", "mlp_adapter")}
    return RunSummary(run_dir.name, matrix, budget["ratio"], budget["storage_bytes"], budget["exemplar_bytes"], flags)


def _fmt(v) -> str:
    return "n/a" if v is None else SIG.format(v)


def summary_rows(run: RunSummary) -> list[list[str]]:
    rows = [["after_task", "acc", "trainable_ratio", "storage_bytes"]]
    for i, a in enumerate(run.matrix.pooled):
        rows.append([str(i), SIG.format(a), SIG.format(run.ratios[i]), str(run.storage_bytes[i])])
    return rows


def totals(run: RunSummary) -> list[list[str]]:
    return [["acc_n", _fmt(run.acc_n)], ["bwf", _fmt(run.bwf)], ["avg_acc", _fmt(run.avg)],
            ["avg_acc_n_minus_1", _fmt(run.avg_paper)], ["exemplar_bytes", str(run.exemplar_bytes)]]


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def render_single(run: RunSummary) -> str:
    return f"run {run.name}\n" + _table(summary_rows(run)) + "\n\n" + _table([["metric", "value"]] + totals(run)) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


GRID_FLAGS = (("Sep-Ada", "sep_ada"), ("RR", "relation_recovery"), ("CC", "compensation"))


def grid_rows(runs: list[RunSummary]) -> list[list[str]]:
    rows = [["run"] + [g for g, _ in GRID_FLAGS] + ["acc_n", "bwf", "avg_acc", "avg_acc_n_minus_1"]]
    for r in runs:
        rows.append([r.name] + ["x" if r.flags.get(k) else "" for _, k in GRID_FLAGS]
                    + [_fmt(r.acc_n), _fmt(r.bwf), _fmt(r.avg), _fmt(r.avg_paper)])
    return rows


def render_grid(runs: list[RunSummary]) -> str:
    return _table([[c if c else "-" for c in r] for r in grid_rows(runs)]) + "\n"


def plot_accuracy(runs: list[RunSummary], path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in runs:
        ax.plot(range(1, r.matrix.n + 1), r.matrix.pooled, marker="o", label=r.name)
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("top-1 accuracy (seen classes)")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curve(rows: list[dict], title: str, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = [r["step"] for r in rows]
    for col in analyzer.CURVE_COLUMNS[1:5]:
        ax.plot(steps, [r[col] for r in rows], marker=".", label=col[4:])
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_ylim(-1.05, 1.05)
    ax.set_xlabel("step")
    ax.set_ylabel("gradient cosine")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def report(run_dirs: list[str | Path], out: str | Path | None = None, plots: bool = True) -> str:
    """Summarise one run (detailed table) or several (ablation grid).

    Writes report.csv and, with ``plots``, PNG figures into ``out``
    (default: the single run's directory, or the first run's parent).
    """
    runs = [load_run(d) for d in run_dirs]
    if out is None:
        out = Path(run_dirs[0]) if len(runs) == 1 else Path(run_dirs[0]).parent
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if len(runs) == 1:
        text = render_single(runs[0])
        (out / "report.csv").write_text(_csv(summary_rows(runs[0]) + [[]] + totals(runs[0])))
    else:
        text = render_grid(runs)
        (out / "report.csv").write_text(_csv(grid_rows(runs)))
    acc_rows = [["run", "after_task", "acc"]] + [[r.name, str(i), SIG.format(a)]
                                                 for r in runs for i, a in enumerate(r.matrix.pooled)]
    (out / "accuracy_vs_task.csv").write_text(_csv(acc_rows))
    if plots:
        plot_accuracy(runs, out / "accuracy_vs_task.png")
        for d in run_dirs:
            for f in sorted(Path(d, "relation_curves").glob("*.csv")):
                rows = analyzer.read_curve(f)
                if rows:
                    name = f"{Path(d).name}_{f.stem}" if len(runs) > 1 else f.stem
                    plot_curve(rows, name, out / f"curve_{name}.png")
    return text
