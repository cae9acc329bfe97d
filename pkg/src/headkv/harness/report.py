"""Summary tables and figures rendered from run outputs."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..errors import HeadKVError  # noqa: E402
from .runner import RESULT_HEADER, Row  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "headkv",
}

SUMMARY_HEADER = ["suite", "method", "b", "mean_accuracy", "mean_retained_fraction", "cells"]


def rows_csv(rows: Iterable[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def read_rows(path) -> list[Row]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_HEADER:
            raise HeadKVError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for d in reader:
            b = d["b"] if d["b"] == "full" else int(d["b"])
            depth = float(d["depth"]) if d["depth"] else None
            rows.append(Row(d["method"], b, int(d["length"]), depth,
                            float(d["accuracy"]), float(d["retained_fraction"])))
    return rows


def _budget_key(b) -> float:
    return float("inf") if b == "full" else float(b)


def summarize(suites: dict[str, Sequence[Row]]) -> str:
    """Mean accuracy per (suite, method, budget), in first-seen method order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for suite, rows in suites.items():
        groups: dict[tuple, list[Row]] = defaultdict(list)
        for r in rows:
            groups[(r.method, r.b)].append(r)
        for (method, b), rs in groups.items():
            w.writerow([suite, method, b, f"{np.mean([r.accuracy for r in rs]):.6f}",
                        f"{np.mean([r.retained_fraction for r in rs]):.6f}", len(rs)])
    return buf.getvalue()


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def heatmap_figure(matrix: np.ndarray, title: str, path, cmap: str = "viridis") -> Path:
    m = np.asarray(matrix, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(m, cmap=cmap, aspect="auto", origin="upper")
        ax.set_xlabel("head")
        ax.set_ylabel("layer")
        ax.set_title(title)
        ax.grid(False)
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
        return _save(fig, Path(path))


def accuracy_vs_budget(rows: Sequence[Row], title: str, path) -> Path:
    by_method: dict[str, dict] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_method[r.method][r.b].append(r.accuracy)
    budgets = sorted({r.b for r in rows}, key=_budget_key)
    x = np.arange(len(budgets))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for method, per_b in by_method.items():
            y = [np.mean(per_b[b]) if b in per_b else np.nan for b in budgets]
            ax.plot(x, y, marker="o", label=method)
        ax.set_xticks(x, [str(b) for b in budgets])
        ax.set_xlabel("per-head budget b")
        ax.set_ylabel("mean accuracy")
        ax.set_ylim(-0.05, 1.05)
        ax.set_title(title)
        ax.legend(fontsize=7, loc="lower right")
        fig.tight_layout()
        return _save(fig, Path(path))


def needle_grid_figure(rows: Sequence[Row], method: str, b, path) -> Path:
    sel = [r for r in rows if r.method == method and r.b == b and r.depth is not None]
    if not sel:
        raise HeadKVError(f"no needle rows for {method} at b={b}")
    lengths = sorted({r.length for r in sel})
    depths = sorted({r.depth for r in sel})
    grid = np.full((len(depths), len(lengths)), np.nan)
    for r in sel:
        grid[depths.index(r.depth), lengths.index(r.length)] = r.accuracy
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        im = ax.imshow(grid, cmap="RdYlGn", vmin=0, vmax=1, aspect="auto")
        ax.set_xticks(range(len(lengths)), [str(n) for n in lengths])
        ax.set_yticks(range(len(depths)), [f"{d:g}" for d in depths])
        ax.set_xlabel("context length")
        ax.set_ylabel("needle depth")
        ax.set_title(f"{method}, b={b}")
        ax.grid(False)
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
        return _save(fig, Path(path))


def render(out: Path, needle: Sequence[Row], reasoning: Sequence[Row] = (),
           scores=None, plan=None) -> list[Path]:
    """Write summary.csv and every figure the available inputs allow."""
    out = Path(out)
    written = []
    suites = {"needle": needle}
    if reasoning:
        suites["reasoning"] = reasoning
    summary = out / "summary.csv"
    summary.write_text(summarize(suites), encoding="utf-8", newline="\n")
    written.append(summary)
    if needle:
        written.append(accuracy_vs_budget(needle, "needle grid", out / "needle_accuracy.png"))
        low = min({r.b for r in needle}, key=_budget_key)
        fig_dir = out / "needle_grids"
        fig_dir.mkdir(exist_ok=True)
        for method in dict.fromkeys(r.method for r in needle):
            safe = method.replace("@", "_").replace("=", "")
            written.append(needle_grid_figure(needle, method, low, fig_dir / f"{safe}_b{low}.png"))
    if reasoning:
        written.append(accuracy_vs_budget(reasoning, "reasoning suite", out / "reasoning_accuracy.png"))
    if scores is not None:
        written.append(heatmap_figure(scores.normalized, f"importance ({scores.estimator_tag})",
                                      out / "scores_heatmap.png"))
    if plan is not None:
        written.append(heatmap_figure(plan.per_head, f"budget plan ({plan.policy})",
                                      out / "plan_heatmap.png", cmap="magma"))
    return written
