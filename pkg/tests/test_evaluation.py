import json
import os
import random

import numpy as np
import pytest

from conftest import as_grouped
from seraser.backend import ToyWorldSpec, build_toy_world
from seraser.config import RunConfig
from seraser.errors import InvalidArgument, ReportError, StrategyUnavailable
from seraser.evaluation import (
    GroupedSample,
    GroupReport,
    confusion_matrix,
    evaluate,
    hard_subset_from_predictions,
    load_manifest,
    read_report,
    select_hard_subset,
    write_manifest,
    write_report,
)
from seraser.images import write_mask, write_png


def record(i, group, correct):
    return {"id": f"s{i:03d}", "label": "a", "group": group, "prediction": "a" if correct else "b", "correct": correct}


def config(**eval_kwargs):
    return RunConfig.from_dict({"eval": eval_kwargs})


class TestGroupReport:
    def test_single_group_all_correct(self):
        r = GroupReport.from_records("vanilla", [record(i, "g", True) for i in range(5)], 0, "f")
        assert r.avg_accuracy == r.worst_group_accuracy == 1.0

    def test_weighted_average(self):
        recs = [record(i, "g1", i < 9) for i in range(10)] + [record(10 + i, "g2", i < 4) for i in range(10)]
        r = GroupReport.from_records("vanilla", recs, 0, "f")
        assert r.avg_accuracy == pytest.approx(0.65) and r.worst_group_accuracy == pytest.approx(0.4)
        assert r.per_group["g1"] == {"correct": 9, "total": 10, "accuracy": 0.9}

    def test_sample_weighted_not_group_mean(self):
        recs = [record(i, "big", True) for i in range(9)] + [record(9, "small", False)]
        r = GroupReport.from_records("vanilla", recs, 0, "f")
        assert r.avg_accuracy == pytest.approx(0.9) and r.worst_group_accuracy == 0.0

    def test_records_sorted_by_id(self):
        recs = [record(i, "g", True) for i in (3, 1, 2)]
        assert [s["id"] for s in GroupReport.from_records("m", recs, 0, "f").samples] == ["s001", "s002", "s003"]


class TestReportFiles:
    def report(self):
        recs = [record(i, f"g{i % 3}", i % 4 != 0) for i in range(12)]
        recs[0]["diagnostics"] = {"loss_trace": [0.5, 0.25]}
        return GroupReport.from_records("seraser", recs, 7, "abc", errors=[{"id": "z", "error": "boom"}])

    def test_round_trip(self, tmp_path):
        r = self.report()
        write_report(r, tmp_path / "r.json")
        assert read_report(tmp_path / "r.json") == r

    def test_no_temp_files_left(self, tmp_path):
        write_report(self.report(), tmp_path / "r.json")
        assert os.listdir(tmp_path) == ["r.json"]

    def test_failed_write_keeps_old_file(self, tmp_path, monkeypatch):
        path = tmp_path / "r.json"
        write_report(self.report(), path)
        before = path.read_bytes()

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(json, "dump", boom)
        with pytest.raises(OSError):
            write_report(self.report(), path)
        assert path.read_bytes() == before and os.listdir(tmp_path) == ["r.json"]

    def test_unknown_field_rejected(self, tmp_path):
        d = self.report().to_dict()
        d["extra"] = 1
        (tmp_path / "r.json").write_text(json.dumps(d))
        with pytest.raises(ReportError, match="extra"):
            read_report(tmp_path / "r.json")

    def test_bad_field_named(self, tmp_path):
        d = self.report().to_dict()
        d["per_group"]["g0"]["accuracy"] = 1.5
        (tmp_path / "r.json").write_text(json.dumps(d))
        with pytest.raises(ReportError, match="per_group/g0/accuracy"):
            read_report(tmp_path / "r.json")

    def test_totals_must_match(self, tmp_path):
        d = self.report().to_dict()
        d["n"] = 99
        (tmp_path / "r.json").write_text(json.dumps(d))
        with pytest.raises(ReportError, match="field n"):
            read_report(tmp_path / "r.json")

    def test_parse_error_line(self, tmp_path):
        (tmp_path / "r.json").write_text('{\n "method": "x",\n oops\n}')
        with pytest.raises(ReportError, match="line 3"):
            read_report(tmp_path / "r.json")


class TestManifest:
    def write_samples(self, tmp_path, samples):
        recs = []
        for s in samples:
            write_png(s.image, tmp_path / f"{s.id}.png")
            write_mask(s.mask, tmp_path / f"{s.id}_m.png")
            recs.append({"id": s.id, "image": f"{s.id}.png", "label": s.label, "group": s.group, "mask": f"{s.id}_m.png"})
        return write_manifest(recs, tmp_path / "m.jsonl")

    def test_round_trip_pixels(self, tmp_path, small_world):
        path = self.write_samples(tmp_path, small_world.samples[:3])
        loaded = load_manifest(path)
        for s, g in zip(small_world.samples[:3], loaded):
            np.testing.assert_array_equal(g.load_image(), s.image)
            np.testing.assert_array_equal(g.load_mask(), s.mask)
            assert (g.label, g.group) == (s.label, s.group)

    @pytest.mark.parametrize(
        "line,match",
        [
            ('{"id": "a", "image": "a.png", "label": "x", "group": "g", "weight": 1}', "unknown key"),
            ('{"id": "a", "image": "a.png", "label": "x"}', "group"),
            ('{"id": "a", "image": "a.png", "label": "x", "group": ""}', "group"),
            ("[1, 2]", "expected an object"),
            ("{not json", "line 1"),
        ],
    )
    def test_rejects(self, tmp_path, line, match):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ReportError, match=match):
            load_manifest(tmp_path / "m.jsonl")

    def test_duplicate_id(self, tmp_path):
        line = '{"id": "a", "image": "a.png", "label": "x", "group": "g"}\n'
        (tmp_path / "m.jsonl").write_text(line * 2)
        with pytest.raises(ReportError, match="line 2: duplicate id"):
            load_manifest(tmp_path / "m.jsonl")

    def test_label_outside_task(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "a", "image": "a.png", "label": "x", "group": "g"}\n')
        with pytest.raises(ReportError, match="label"):
            load_manifest(tmp_path / "m.jsonl", labels=("y", "z"))

    def test_empty_group(self):
        with pytest.raises(InvalidArgument):
            GroupedSample("a", np.zeros((2, 2, 3)), "x", "")


class TestEvaluate:
    def test_vanilla_report(self, small_world):
        r = evaluate("vanilla", as_grouped(small_world.samples), config(), small_world.model)
        assert r.n == 40 and sum(g["total"] for g in r.per_group.values()) == 40
        assert r.worst_group_accuracy <= r.avg_accuracy
        assert r.config_fingerprint == config().fingerprint()

    def test_missing_mask_aborts(self, small_world):
        samples = as_grouped(small_world.samples, with_mask=False)
        with pytest.raises(StrategyUnavailable, match=samples[0].id):
            evaluate("mask", samples, config(), small_world.model)

    def test_skip_errors(self, small_world):
        samples = as_grouped(small_world.samples)
        samples[0] = GroupedSample(samples[0].id, samples[0].image, samples[0].label, samples[0].group)
        r = evaluate("seraser", samples, config(skip_errors=True), small_world.model)
        assert r.n == 39 and r.errors[0]["id"] == samples[0].id and "mask" in r.errors[0]["error"]

    def test_label_outside_task(self, small_world):
        samples = as_grouped(small_world.samples[:2])
        cfg = RunConfig.from_dict({"model": {"labels": ["class0", "class9"]}})
        with pytest.raises(InvalidArgument):
            evaluate("vanilla", samples, cfg, small_world.model)

    @pytest.mark.parametrize("method", ["vanilla", "mask", "tpt", "seraser"])
    def test_permutation_invariant(self, small_world, method):
        samples = as_grouped(small_world.samples)
        shuffled = samples[:]
        random.Random(3).shuffle(shuffled)
        a = evaluate(method, samples, config(), small_world.model)
        b = evaluate(method, shuffled, config(), small_world.model)
        assert a.to_dict() == b.to_dict()

    def test_parallel_matches_serial(self, small_world):
        samples = as_grouped(small_world.samples)
        a = evaluate("seraser", samples, config(parallelism=1), small_world.model)
        b = evaluate("seraser", samples, config(parallelism=4), small_world.model)
        assert a.to_dict() == b.to_dict()

    def test_seraser_diagnostics_recorded(self, small_world):
        r = evaluate("seraser", as_grouped(small_world.samples[:3]), config(), small_world.model)
        assert all(len(s["diagnostics"]["loss_trace"]) == 5 for s in r.samples)


def brute_force_confusion(labels, truth, pred):
    cm = [[0] * len(labels) for _ in labels]
    for t, p in zip(truth, pred):
        cm[labels.index(t)][labels.index(p)] += 1
    return cm


class TestHardSubset:
    def test_ten_classes_gives_all(self):
        labels = [f"c{i}" for i in range(10)]
        truth = labels * 3
        rng = np.random.default_rng(0)
        pred = [labels[i] for i in rng.integers(0, 10, size=30)]
        assert sorted(hard_subset_from_predictions(labels, truth, pred)) == sorted(labels)

    def test_all_tied_picks_lowest_index(self):
        labels = [f"c{i:02d}" for i in range(15)]
        out = hard_subset_from_predictions(labels, labels, labels)
        assert out == labels[:10]

    def test_planted_confusion_pair(self):
        labels = [f"c{i:02d}" for i in range(20)]
        rng = np.random.default_rng(11)
        truth, pred = [], []
        for k, name in enumerate(labels):
            for j in range(20):
                truth.append(name)
                if k == 7 and j < 14:
                    pred.append("c13")
                elif rng.random() < 0.2:
                    pred.append(labels[int(rng.integers(20))])
                else:
                    pred.append(name)
        assert confusion_matrix(labels, truth, pred).tolist() == brute_force_confusion(labels, truth, pred)
        out = hard_subset_from_predictions(labels, truth, pred)
        assert len(out) == 10 and len(set(out)) == 10
        assert "c07" in out and "c13" in out
        assert out[:2] == ["c07", "c13"]

    def test_partner_follows_worst_class(self):
        labels = [f"c{i:02d}" for i in range(12)]
        truth, pred = [], []
        for k, name in enumerate(labels):
            truth += [name] * 10
            pred += [name] * 10
        # c11 is the worst class and is mostly mistaken for c00
        pred[110:116] = ["c00"] * 6
        out = hard_subset_from_predictions(labels, truth, pred)
        assert out[:2] == ["c11", "c00"]

    def test_too_few_classes(self):
        labels = [f"c{i}" for i in range(9)]
        with pytest.raises(InvalidArgument):
            hard_subset_from_predictions(labels, labels, labels)

    def test_from_model(self):
        w = build_toy_world(ToyWorldSpec(num_classes=10, num_backgrounds=3, num_samples=60, num_reference=0))
        p = w.model.initial_prompt(w.labels)
        out = select_hard_subset(w.model, p, as_grouped(w.samples))
        assert sorted(out) == sorted(w.labels)
