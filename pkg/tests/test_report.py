"""Tests for report.py — JSON run reports and training-history sidecars."""

import dataclasses
import json

import pytest
from freezegun import freeze_time

from config import EvalConfig, RunConfig, TOOL_VERSION
from errors import DataError, DatasetIOError
from models import CategoryResult, EpochRecord, EvalReport
from report import history_path, read_history, read_report, write_history, write_report


@pytest.fixture
def two_category_report():
    return EvalReport.from_results([
        CategoryResult("a", image_auroc=1.0, pixel_auroc=0.9, n_images=4, mean_defect_score=0.3),
        CategoryResult("b", image_auroc=0.5, pixel_auroc=0.7, n_images=6, mean_defect_score=0.1),
    ])


@pytest.fixture
def timeless_config():
    return RunConfig(eval=EvalConfig(include_timing=False))


def test_mean_is_arithmetic(tmp_path, two_category_report, timeless_config):
    """Categories at 1.0 and 0.5 → mean 0.75 in the document."""
    path = write_report(two_category_report, str(tmp_path / "report.json"), timeless_config)
    with open(path) as f:
        doc = json.load(f)
    assert doc["mean_image_auroc"] == 0.75
    assert doc["mean_pixel_auroc"] == pytest.approx(0.8)
    assert [row["category"] for row in doc["per_category"]] == ["a", "b"]


def test_document_fields(tmp_path, two_category_report, timeless_config):
    histories = {"distill": [EpochRecord("distill", 1, 0.25)]}
    write_report(two_category_report, str(tmp_path / "r.json"), timeless_config, histories)
    _, doc = read_report(str(tmp_path / "r.json"))
    assert doc["tool_version"] == TOOL_VERSION
    assert doc["seed"] == 0
    assert doc["config"]["distill"]["learning_rate"] == 0.4
    assert doc["histories"]["distill"] == [{"phase": "distill", "epoch": 1, "loss": 0.25, "accuracy": None}]
    assert "generated_at" not in doc
    assert "wall_clock_seconds" not in doc


def test_reserialization_is_byte_identical(tmp_path, two_category_report, timeless_config):
    a = write_report(two_category_report, str(tmp_path / "a.json"), timeless_config)
    b = write_report(two_category_report, str(tmp_path / "b.json"), timeless_config)
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()


def test_keys_are_sorted(tmp_path, two_category_report, timeless_config):
    path = write_report(two_category_report, str(tmp_path / "r.json"), timeless_config)
    with open(path) as f:
        text = f.read()
    assert text.endswith("\n")
    doc = json.loads(text)
    assert list(doc) == sorted(doc)


def test_round_trip_equals_report(tmp_path, two_category_report, timeless_config):
    write_report(two_category_report, str(tmp_path / "r.json"), timeless_config)
    report, _ = read_report(str(tmp_path / "r.json"))
    assert report == two_category_report


def test_undefined_metrics_written_as_null(tmp_path, timeless_config):
    report = EvalReport.from_results([
        CategoryResult("a", image_auroc=None, pixel_auroc=None, n_images=3),
        CategoryResult("b", image_auroc=0.8, pixel_auroc=0.6, n_images=3),
    ])
    write_report(report, str(tmp_path / "r.json"), timeless_config)
    parsed, doc = read_report(str(tmp_path / "r.json"))
    assert doc["per_category"][0]["image_auroc"] is None
    assert parsed.mean_image_auroc == 0.8


@freeze_time("2026-03-01 09:30:00", tz_offset=0)
def test_timing_fields_when_enabled(tmp_path, two_category_report):
    path = write_report(two_category_report, str(tmp_path / "r.json"), RunConfig(), wall_clock_seconds=12.5)
    _, doc = read_report(path)
    assert doc["generated_at"] == "2026-03-01T09:30:00+00:00"
    assert doc["wall_clock_seconds"] == 12.5


@freeze_time("2026-03-01 09:30:00", tz_offset=0)
def test_timed_reports_identical_under_fixed_clock(tmp_path, two_category_report):
    cfg = RunConfig()
    a = write_report(two_category_report, str(tmp_path / "a.json"), cfg, wall_clock_seconds=1.0)
    b = write_report(two_category_report, str(tmp_path / "b.json"), cfg, wall_clock_seconds=1.0)
    with open(a) as fa, open(b) as fb:
        assert fa.read() == fb.read()


def test_unwritable_path(tmp_path, two_category_report, timeless_config):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetIOError):
        write_report(two_category_report, str(blocker / "r.json"), timeless_config)


def test_malformed_report(tmp_path):
    path = tmp_path / "r.json"
    path.write_text("{")
    with pytest.raises(DataError):
        read_report(str(path))


# --- history sidecars ---

def test_history_round_trip(tmp_path):
    records = [EpochRecord("head_only", 1, 1.1, 0.5), EpochRecord("all", 1, 0.4, 1.0)]
    path = history_path(str(tmp_path / "teacher.ckpt"))
    assert path.endswith("teacher.ckpt.history.json")
    write_history(records, path)
    assert read_history(path) == records
    assert [dataclasses.asdict(r) for r in read_history(path)][1]["accuracy"] == 1.0
