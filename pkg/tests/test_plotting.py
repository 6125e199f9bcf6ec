import csv

from seraser.evaluation import GroupReport
from seraser.plotting import plot_group_accuracy, write_group_csv


def report(method, outcomes):
    recs = [
        {"id": f"{g}{i}", "label": "a", "group": g, "prediction": "a", "correct": ok}
        for g, oks in outcomes.items()
        for i, ok in enumerate(oks)
    ]
    return GroupReport.from_records(method, recs, 0, "f")


class TestPlotting:
    def test_csv_rows(self, tmp_path):
        reports = [report("vanilla", {"g1": [True, False], "g2": [True]}), report("seraser", {"g1": [True, True]})]
        path = write_group_csv(reports, tmp_path / "groups.csv")
        rows = list(csv.DictReader(path.open()))
        assert [(r["method"], r["group"]) for r in rows] == [("vanilla", "g1"), ("vanilla", "g2"), ("seraser", "g1")]
        assert rows[0]["accuracy"] == "0.500000" and rows[0]["total"] == "2"

    def test_png_written(self, tmp_path):
        reports = [report("vanilla", {"g1": [True, False], "g2": [True]}), report("mask", {"g2": [False]})]
        path = plot_group_accuracy(reports, tmp_path / "groups.png", title="toy")
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
