"""CSV tables and SVG plots, byte-stable for identical inputs."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import FormatError  # noqa: E402
from .suites import AblationReport, AblationResult, AblationRow, LightingReport  # noqa: E402

NOT_APPLICABLE = "n/a"

plt.rcParams.update({"svg.hashsalt": "pathfusion", "svg.fonttype": "none"})


def _num(x: float | None) -> str:
    return NOT_APPLICABLE if x is None else repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def ablation_rows(report: AblationReport) -> list[list[str]]:
    return [[r.combo, _num(r.rmse_day), _num(r.rmse_night), _num(r.change_pct)] for r in report.rows]


def parse_ablation_csv(path) -> AblationReport:
    """Inverse of the ablation table writer."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["combo", "rmse_day_db", "rmse_night_db", "change_pct"]:
        raise FormatError(f"{path}: not an ablation table")

    def val(s: str) -> float | None:
        return None if s == NOT_APPLICABLE else float(s)

    return AblationReport([AblationRow(r[0], float(r[1]), val(r[2]), val(r[3])) for r in rows[1:]])


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(result: AblationResult, directory, lighting: LightingReport | None = None) -> list[Path]:
    """Write tables and plots for an ablation run (and optional lighting sweep)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []

    p = d / "ablation.csv"
    _write_csv(p, ["combo", "rmse_day_db", "rmse_night_db", "change_pct"], ablation_rows(result.report))
    written.append(p)

    cdf_rows = []
    for (combo, cond), m in result.metrics.items():
        cdf_rows += [[combo, cond, repr(e), repr(f)] for e, f in m.cdf]
    p = d / "cdf.csv"
    _write_csv(p, ["combo", "condition", "abs_error_db", "fraction"], cdf_rows)
    written.append(p)

    hist_rows = []
    for combo, h in result.histories.items():
        for ep, tl in enumerate(h.train_loss):
            vl = h.val_loss[ep] if ep < len(h.val_loss) else None
            hist_rows.append([combo, ep, repr(tl), _num(vl)])
    p = d / "history.csv"
    _write_csv(p, ["combo", "epoch", "train_loss", "val_loss"], hist_rows)
    written.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    for (combo, cond), m in result.metrics.items():
        if cond != "day":
            continue
        xs = [0.0] + [e for e, _ in m.cdf]
        ys = [0.0] + [f for _, f in m.cdf]
        ax.step(xs, ys, where="post", label=combo)
    ax.set_xlabel("absolute error (dB)")
    ax.set_ylabel("CDF")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    p = d / "cdf.svg"
    _save_svg(fig, p)
    written.append(p)

    rows = result.report.rows
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(rows))
    ax.bar([x - 0.2 for x in xs], [r.rmse_day for r in rows], width=0.4, label="day")
    ax.bar([x + 0.2 for x in xs], [r.rmse_night or 0.0 for r in rows], width=0.4, label="night")
    ax.set_xticks(list(xs), [r.combo for r in rows], rotation=20, fontsize=7)
    ax.set_ylabel("RMSE (dB)")
    ax.legend()
    fig.tight_layout()
    p = d / "rmse_bars.svg"
    _save_svg(fig, p)
    written.append(p)

    if lighting is not None:
        p = d / "lighting.csv"
        _write_csv(
            p,
            ["combo", "alpha", "rmse_db"],
            [[c, repr(a), repr(v)] for c, vals in lighting.rmse.items() for a, v in zip(lighting.alphas, vals)],
        )
        written.append(p)
        p = d / "reductions.csv"
        _write_csv(
            p,
            ["combo", "baseline", "alpha", "reduction_pct"],
            [[r.combo, r.baseline, repr(r.alpha), repr(r.reduction_pct)] for r in lighting.reductions],
        )
        written.append(p)
    return written
