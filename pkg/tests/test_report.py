from __future__ import annotations

import json

import pytest

from gompertz_kd.errors import InputError, MissingRunError
from gompertz_kd.report import (
    ComparisonTable,
    RunSummary,
    build_table,
    polygon_area,
    radar_points,
    render_curve,
    render_radar,
    summarize_improvement,
    table_csv,
    table_markdown,
    write_report,
)


def make_summaries(cells, seeds=(0,)):
    """cells: list of (dataset, teacher, student, teacher_acc, alone, base, gomp)."""
    out = []
    for dataset, teacher, student, t_acc, alone, base, gomp in cells:
        for seed in seeds:
            for mode, acc in (
                ("student_only", alone),
                ("hinton_kd", base),
                ("gompertz_full", gomp),
            ):
                out.append(
                    RunSummary(dataset, teacher, student, mode, seed, acc, t_acc)
                )
    return out


FOUR_CELLS = [
    ("demo", "t1", "s1", 0.85, 0.70, 0.72, 0.78),
    ("demo", "t1", "s2", 0.85, 0.60, 0.65, 0.71),
    ("demo", "t2", "s1", 0.80, 0.70, 0.71, 0.70),
    ("demo", "t2", "s2", 0.80, 0.55, 0.62, 0.69),
]


class TestBuildTable:
    def test_populates_and_sorts(self):
        table = build_table(make_summaries(FOUR_CELLS))
        assert [
            (r.teacher_id, r.student_id) for r in table.rows
        ] == [("t1", "s1"), ("t1", "s2"), ("t2", "s1"), ("t2", "s2")]
        row = table.rows[0]
        assert row.teacher_acc == pytest.approx(0.85)
        assert row.student_alone == pytest.approx(0.70)
        assert row.baseline_kd == pytest.approx(0.72)
        assert row.gompertz == pytest.approx(0.78)
        assert row.improvement == pytest.approx(0.06)
        assert row.missing == []

    def test_multi_seed_mean(self):
        summaries = make_summaries(FOUR_CELLS[:1], seeds=(0, 1, 2))
        extra = RunSummary("demo", "t1", "s1", "gompertz_full", 3, 0.90, 0.85)
        table = build_table(summaries + [extra])
        assert table.rows[0].gompertz == pytest.approx((0.78 * 3 + 0.90) / 4)

    def test_missing_run_marked_not_fabricated(self):
        summaries = [
            s for s in make_summaries(FOUR_CELLS[:1]) if s.mode != "hinton_kd"
        ]
        table = build_table(summaries)
        row = table.rows[0]
        assert row.baseline_kd is None
        assert row.improvement is None
        assert any("hinton_kd" in m for m in row.missing)

    def test_strict_raises(self):
        summaries = [
            s for s in make_summaries(FOUR_CELLS[:1]) if s.mode != "gompertz_full"
        ]
        with pytest.raises(MissingRunError):
            build_table(summaries, strict=True)

    def test_identical_methods_give_zero_improvement(self):
        cells = [("demo", "t1", "s1", 0.8, 0.7, 0.75, 0.75)]
        table = build_table(make_summaries(cells))
        assert table.rows[0].improvement == pytest.approx(0.0)


class TestSummarizeImprovement:
    def test_mean_in_points(self):
        table = build_table(make_summaries(FOUR_CELLS))
        means = summarize_improvement(table)
        expected = 100.0 * ((0.78 - 0.72) + (0.71 - 0.65) + (0.70 - 0.71) + (0.69 - 0.62)) / 4
        assert means["demo"] == pytest.approx(expected)

    def test_swapping_methods_negates(self):
        swapped = [
            (ds, t, s, ta, alone, gomp, base)
            for ds, t, s, ta, alone, base, gomp in FOUR_CELLS
        ]
        m1 = summarize_improvement(build_table(make_summaries(FOUR_CELLS)))
        m2 = summarize_improvement(build_table(make_summaries(swapped)))
        assert m1["demo"] == pytest.approx(-m2["demo"])

    def test_empty_table_rejected(self):
        with pytest.raises(InputError):
            summarize_improvement(ComparisonTable(rows=[]))

    def test_incomplete_cell_rejected(self):
        summaries = [
            s for s in make_summaries(FOUR_CELLS) if s.mode != "hinton_kd"
        ]
        with pytest.raises(InputError):
            summarize_improvement(build_table(summaries))


class TestRadar:
    def test_refuses_fewer_than_three_axes(self):
        table = build_table(make_summaries(FOUR_CELLS[:2]))
        with pytest.raises(InputError) as exc:
            render_radar(table, "demo")
        assert "bar chart" in str(exc.value)

    def test_byte_deterministic(self):
        t1 = build_table(make_summaries(FOUR_CELLS))
        t2 = build_table(make_summaries(FOUR_CELLS))
        assert render_radar(t1, "demo").encode() == render_radar(t2, "demo").encode()

    def test_pointwise_dominance_implies_area_dominance(self):
        table = build_table(make_summaries(FOUR_CELLS))
        rows = table.rows
        base_area = polygon_area(radar_points([r.baseline_kd for r in rows]))
        # three of four cells dominate; construct a strictly dominating set
        dom = [max(r.gompertz, r.baseline_kd) for r in rows]
        dom_area = polygon_area(radar_points(dom))
        assert dom_area >= base_area

    def test_identical_methods_overlap_exactly(self):
        values = [0.7, 0.6, 0.8, 0.75]
        assert radar_points(values) == radar_points(list(values))
        assert polygon_area(radar_points(values)) == pytest.approx(
            polygon_area(radar_points(list(values)))
        )

    def test_svg_structure(self):
        table = build_table(make_summaries(FOUR_CELLS))
        svg = render_radar(table, "demo")
        assert svg.startswith("<svg")
        assert svg.count("<polygon") == 7  # 5 grid rings + 2 method polygons
        assert "t1-&gt;s1" in svg or "t1->s1" in svg


class TestCurve:
    def test_deterministic_and_structured(self):
        pts = [(t / 10.0, t * t / 100.0) for t in range(11)]
        a = render_curve(pts, "curve")
        b = render_curve(pts, "curve")
        assert a == b
        assert "<polyline" in a

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            render_curve([], "x")


class TestWriteReport:
    def test_writes_all_artifacts(self, tmp_path):
        table = build_table(make_summaries(FOUR_CELLS))
        summary = write_report(table, tmp_path)
        assert (tmp_path / "table.md").exists()
        assert (tmp_path / "table.csv").exists()
        assert (tmp_path / "radar_demo.svg").exists()
        loaded = json.loads((tmp_path / "summary.json").read_text())
        assert loaded == summary
        assert "mean_improvement_points" in loaded["datasets"]["demo"]
        md = (tmp_path / "table.md").read_text()
        assert "| demo | t1 | s1 |" in md

    def test_radar_skip_note_for_small_tables(self, tmp_path):
        table = build_table(make_summaries(FOUR_CELLS[:1]))
        summary = write_report(table, tmp_path)
        assert "radar_skipped" in summary["datasets"]["demo"]
        assert not (tmp_path / "radar_demo.svg").exists()

    def test_csv_round_trips_floats(self, tmp_path):
        table = build_table(make_summaries(FOUR_CELLS))
        csv_text = table_csv(table)
        line = csv_text.splitlines()[1].split(",")
        assert float(line[6]) == table.rows[0].gompertz

    def test_markdown_marks_missing(self):
        summaries = [s for s in make_summaries(FOUR_CELLS[:1]) if s.mode != "hinton_kd"]
        md = table_markdown(build_table(summaries))
        assert "missing run" in md
