"""Presentation artifacts: comparison table, radar charts, summaries.

Everything here is a pure transformation of finished run records, and
all graphic output is hand-built SVG text so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from gompertz_kd.errors import InputError, MissingRunError
from gompertz_kd.trainer import RunRecord

BASELINE_MODE = "hinton_kd"
TREATMENT_MODE = "gompertz_full"
STUDENT_ALONE_MODE = "student_only"
_REQUIRED_MODES = (STUDENT_ALONE_MODE, BASELINE_MODE, TREATMENT_MODE)


@dataclass(frozen=True)
class RunSummary:
    """Final accuracy of one run, the report modules' input unit."""

    dataset: str
    teacher_id: str
    student_id: str
    mode: str
    seed: int
    final_test_acc: float
    teacher_test_acc: float | None = None


@dataclass
class TableRow:
    dataset: str
    teacher_id: str
    student_id: str
    teacher_acc: float | None = None
    student_alone: float | None = None
    baseline_kd: float | None = None
    gompertz: float | None = None
    missing: list[str] = field(default_factory=list)

    @property
    def improvement(self) -> float | None:
        if self.baseline_kd is None or self.gompertz is None:
            return None
        return self.gompertz - self.baseline_kd


@dataclass
class ComparisonTable:
    rows: list[TableRow]

    def datasets(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.dataset not in seen:
                seen.append(row.dataset)
        return seen


def run_summary(record: RunRecord) -> RunSummary:
    return RunSummary(
        dataset=record.dataset,
        teacher_id=record.teacher_id or "",
        student_id=record.student_id,
        mode=record.mode,
        seed=record.seed,
        final_test_acc=record.final_test_acc,
        teacher_test_acc=record.teacher_test_acc,
    )


def load_run_summaries(root: str | Path) -> list[RunSummary]:
    """Collect student-run summaries from every run.json under `root`."""
    summaries = []
    for path in sorted(Path(root).rglob("run.json")):
        record = RunRecord.load(path)
        if record.role == "student":
            summaries.append(run_summary(record))
    return summaries


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def build_table(summaries: Iterable[RunSummary], strict: bool = False) -> ComparisonTable:
    """Aggregate per-cell runs (mean over seeds) into the comparison grid.

    A cell is one (dataset, teacher, student) combination; it needs a
    student-alone run, a baseline KD run, and a dynamic-schedule run.
    Missing entries are marked, never fabricated; `strict` raises
    instead.
    """
    cells: dict[tuple[str, str, str], dict[str, list[float]]] = {}
    teacher_accs: dict[tuple[str, str, str], list[float]] = {}
    for s in summaries:
        key = (s.dataset, s.teacher_id, s.student_id)
        cells.setdefault(key, {}).setdefault(s.mode, []).append(s.final_test_acc)
        if s.teacher_test_acc is not None:
            teacher_accs.setdefault(key, []).append(s.teacher_test_acc)

    rows = []
    for key in sorted(cells):
        dataset, teacher_id, student_id = key
        modes = cells[key]
        row = TableRow(dataset=dataset, teacher_id=teacher_id, student_id=student_id)
        if key in teacher_accs:
            row.teacher_acc = _mean(teacher_accs[key])
        else:
            row.missing.append("teacher accuracy")
        for mode, attr in (
            (STUDENT_ALONE_MODE, "student_alone"),
            (BASELINE_MODE, "baseline_kd"),
            (TREATMENT_MODE, "gompertz"),
        ):
            if mode in modes:
                setattr(row, attr, _mean(modes[mode]))
            else:
                row.missing.append(f"missing run: {mode}")
        if row.missing and strict:
            raise MissingRunError(
                f"cell {dataset}/{teacher_id}->{student_id}: " + "; ".join(row.missing)
            )
        rows.append(row)
    return ComparisonTable(rows=rows)


def summarize_improvement(table: ComparisonTable) -> dict[str, float]:
    """Mean (treatment - baseline) per dataset, in percentage points."""
    if not table.rows:
        raise InputError("comparison table is empty")
    per_dataset: dict[str, list[float]] = {}
    for row in table.rows:
        if row.improvement is None:
            raise InputError(
                f"cell {row.dataset}/{row.teacher_id}->{row.student_id} is incomplete: "
                + "; ".join(row.missing)
            )
        per_dataset.setdefault(row.dataset, []).append(row.improvement)
    return {ds: 100.0 * _mean(vals) for ds, vals in sorted(per_dataset.items())}


# ---------------------------------------------------------------------------
# SVG rendering


def radar_points(
    values: list[float], center: float = 210.0, radius: float = 150.0
) -> list[tuple[float, float]]:
    """Vertex positions of a radar polygon, first axis at 12 o'clock."""
    pts = []
    n = len(values)
    for k, v in enumerate(values):
        angle = -math.pi / 2.0 + 2.0 * math.pi * k / n
        pts.append(
            (center + radius * v * math.cos(angle), center + radius * v * math.sin(angle))
        )
    return pts


def polygon_area(points: list[tuple[float, float]]) -> float:
    """Shoelace area (absolute)."""
    n = len(points)
    acc = 0.0
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg_polygon(points, stroke, fill, opacity) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    return (
        f'<polygon points="{pts}" stroke="{stroke}" fill="{fill}" '
        f'fill-opacity="{opacity}" stroke-width="2"/>'
    )


def render_radar(table: ComparisonTable, dataset: str) -> str:
    """Radar chart comparing baseline vs dynamic-schedule accuracy.

    One axis per teacher->student combination, axis range [0, 1]; output
    is deterministic SVG text.
    """
    rows = [r for r in table.rows if r.dataset == dataset]
    if len(rows) < 3:
        raise InputError(
            f"radar chart needs >= 3 model-combination axes, got {len(rows)} for "
            f"{dataset!r}; use a bar chart for fewer combinations"
        )
    for row in rows:
        if row.baseline_kd is None or row.gompertz is None:
            raise InputError(
                f"cell {row.teacher_id}->{row.student_id} lacks both methods: "
                + "; ".join(row.missing)
            )
    size, center, radius = 420.0, 210.0, 150.0
    labels = [f"{r.teacher_id}->{r.student_id}" for r in rows]
    baseline = [r.baseline_kd for r in rows]
    treatment = [r.gompertz for r in rows]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(size)}" '
        f'height="{int(size + 40)}" viewBox="0 0 {int(size)} {int(size + 40)}">',
        f'<rect width="{int(size)}" height="{int(size + 40)}" fill="white"/>',
        f'<text x="{_fmt(center)}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">accuracy comparison: {dataset}</text>',
    ]
    for ring in (0.2, 0.4, 0.6, 0.8, 1.0):
        ring_pts = radar_points([ring] * len(rows), center, radius)
        parts.append(_svg_polygon(ring_pts, "#cccccc", "none", "1.0"))
    axis_ends = radar_points([1.0] * len(rows), center, radius)
    for (x, y), label in zip(axis_ends, labels):
        parts.append(
            f'<line x1="{_fmt(center)}" y1="{_fmt(center)}" x2="{_fmt(x)}" '
            f'y2="{_fmt(y)}" stroke="#cccccc" stroke-width="1"/>'
        )
        lx = center + (x - center) * 1.12
        ly = center + (y - center) * 1.12
        anchor = "middle" if abs(lx - center) < 1.0 else ("start" if lx > center else "end")
        parts.append(
            f'<text x="{_fmt(lx)}" y="{_fmt(ly)}" text-anchor="{anchor}" '
            f'font-family="sans-serif" font-size="10">{label}</text>'
        )
    parts.append(
        _svg_polygon(radar_points(baseline, center, radius), "#1f4e9c", "#1f4e9c", "0.25")
    )
    parts.append(
        _svg_polygon(radar_points(treatment, center, radius), "#c0392b", "#c0392b", "0.25")
    )
    legend_y = size + 20.0
    parts.append(
        f'<rect x="60" y="{_fmt(legend_y - 10)}" width="12" height="12" fill="#1f4e9c" '
        f'fill-opacity="0.25" stroke="#1f4e9c"/>'
        f'<text x="78" y="{_fmt(legend_y)}" font-family="sans-serif" font-size="12">'
        f"baseline KD</text>"
    )
    parts.append(
        f'<rect x="220" y="{_fmt(legend_y - 10)}" width="12" height="12" fill="#c0392b" '
        f'fill-opacity="0.25" stroke="#c0392b"/>'
        f'<text x="238" y="{_fmt(legend_y)}" font-family="sans-serif" font-size="12">'
        f"dynamic schedule</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_curve(
    points: list[tuple[float, float]],
    title: str,
    x_label: str = "t",
    y_label: str = "beta",
) -> str:
    """Line plot of (x, y) samples as deterministic SVG text."""
    if not points:
        raise InputError("no points to plot")
    width, height, margin = 480.0, 320.0, 50.0
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x: float) -> float:
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    poly = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in points)
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(width)}" '
            f'height="{int(height)}" viewBox="0 0 {int(width)} {int(height)}">',
            f'<rect width="{int(width)}" height="{int(height)}" fill="white"/>',
            f'<text x="{_fmt(width / 2)}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>',
            f'<line x1="{_fmt(margin)}" y1="{_fmt(height - margin)}" '
            f'x2="{_fmt(width - margin)}" y2="{_fmt(height - margin)}" stroke="black"/>',
            f'<line x1="{_fmt(margin)}" y1="{_fmt(height - margin)}" '
            f'x2="{_fmt(margin)}" y2="{_fmt(margin)}" stroke="black"/>',
            f'<text x="{_fmt(width - margin)}" y="{_fmt(height - margin + 30)}" '
            f'text-anchor="end" font-family="sans-serif" font-size="11">{x_label} '
            f"[{_fmt(x_lo)}, {_fmt(x_hi)}]</text>",
            f'<text x="{_fmt(margin - 35)}" y="{_fmt(margin)}" '
            f'font-family="sans-serif" font-size="11">{y_label}</text>',
            f'<text x="{_fmt(margin - 40)}" y="{_fmt(height - margin)}" '
            f'font-family="sans-serif" font-size="9">{_fmt(y_lo)}</text>',
            f'<text x="{_fmt(margin - 40)}" y="{_fmt(margin + 10)}" '
            f'font-family="sans-serif" font-size="9">{_fmt(y_hi)}</text>',
            f'<polyline points="{poly}" fill="none" stroke="#c0392b" stroke-width="2"/>',
            "</svg>",
        ]
    ) + "\n"


# ---------------------------------------------------------------------------
# File output


def _cell(v: float | None) -> str:
    return f"{v:.4f}" if v is not None else "-"


def table_markdown(table: ComparisonTable) -> str:
    lines = [
        "| dataset | teacher | student | teacher acc | student alone | baseline KD "
        "| dynamic schedule | improvement (pt) |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in table.rows:
        imp = f"{100.0 * r.improvement:+.2f}" if r.improvement is not None else "missing run"
        lines.append(
            f"| {r.dataset} | {r.teacher_id} | {r.student_id} | {_cell(r.teacher_acc)} "
            f"| {_cell(r.student_alone)} | {_cell(r.baseline_kd)} | {_cell(r.gompertz)} "
            f"| {imp} |"
        )
    return "\n".join(lines) + "\n"


def table_csv(table: ComparisonTable) -> str:
    lines = [
        "dataset,teacher,student,teacher_acc,student_alone,baseline_kd,gompertz,improvement_pt"
    ]
    for r in table.rows:
        imp = repr(100.0 * r.improvement) if r.improvement is not None else ""
        cells = [
            r.dataset,
            r.teacher_id,
            r.student_id,
            repr(r.teacher_acc) if r.teacher_acc is not None else "",
            repr(r.student_alone) if r.student_alone is not None else "",
            repr(r.baseline_kd) if r.baseline_kd is not None else "",
            repr(r.gompertz) if r.gompertz is not None else "",
            imp,
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_report(table: ComparisonTable, out_dir: str | Path) -> dict:
    """Write table.md, table.csv, radar SVGs, and summary.json.

    Returns the summary dict. Radar charts are skipped (with a note in
    the summary) for datasets with fewer than three complete cells.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(table_markdown(table))
    (out / "table.csv").write_text(table_csv(table))

    summary: dict = {"datasets": {}}
    complete = [r for r in table.rows if r.improvement is not None]
    for dataset in table.datasets():
        ds_rows = [r for r in table.rows if r.dataset == dataset]
        ds_complete = [r for r in ds_rows if r.improvement is not None]
        entry: dict = {"cells": len(ds_rows), "complete_cells": len(ds_complete)}
        if ds_complete and len(ds_complete) == len(ds_rows):
            mean_pts = 100.0 * _mean([r.improvement for r in ds_rows])
            entry["mean_improvement_points"] = mean_pts
            entry["mean_improvement_display"] = f"{mean_pts:+.1f} pt"
        try:
            svg = render_radar(table, dataset)
            radar_path = out / f"radar_{dataset}.svg"
            radar_path.write_bytes(svg.encode())
            entry["radar"] = radar_path.name
        except InputError as exc:
            entry["radar_skipped"] = str(exc)
        summary["datasets"][dataset] = entry
    summary["complete_cells"] = len(complete)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
