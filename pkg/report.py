import dataclasses
import json
import os
from datetime import datetime, timezone

from config import TOOL_VERSION, RunConfig
from errors import DataError, DatasetIOError
from models import CategoryResult, EpochRecord, EvalReport


def build_report_document(
    report: EvalReport,
    config: RunConfig,
    histories: dict[str, list[EpochRecord]] | None = None,
    wall_clock_seconds: float | None = None,
) -> dict:
    """Assemble the JSON-ready run report."""
    doc = {
        "tool_version": TOOL_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "per_category": [dataclasses.asdict(c) for c in report.per_category],
        "mean_image_auroc": report.mean_image_auroc,
        "mean_pixel_auroc": report.mean_pixel_auroc,
        "histories": {
            stage: [dataclasses.asdict(r) for r in records]
            for stage, records in (histories or {}).items()
        },
    }
    if config.eval.include_timing:
        doc["generated_at"] = datetime.now(timezone.utc).isoformat()
        doc["wall_clock_seconds"] = wall_clock_seconds
    return doc


def write_report(
    report: EvalReport,
    path: str,
    config: RunConfig,
    histories: dict[str, list[EpochRecord]] | None = None,
    wall_clock_seconds: float | None = None,
) -> str:
    """Write the run report as JSON with stable key order. Returns the path."""
    doc = build_report_document(report, config, histories, wall_clock_seconds)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(f"Cannot write report {path}: {e}") from e
    return path


def read_report(path: str) -> tuple[EvalReport, dict]:
    """Parse a report back into an EvalReport plus the full document."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise DatasetIOError(f"Cannot read report {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"Report {path} is not valid JSON: {e}") from e
    report = EvalReport(
        per_category=[CategoryResult(**row) for row in doc["per_category"]],
        mean_image_auroc=doc["mean_image_auroc"],
        mean_pixel_auroc=doc["mean_pixel_auroc"],
    )
    return report, doc


def write_history(records: list[EpochRecord], path: str) -> str:
    """Training-history sidecar next to a checkpoint."""
    try:
        with open(path, "w") as f:
            json.dump([dataclasses.asdict(r) for r in records], f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write history {path}: {e}") from e
    return path


def read_history(path: str) -> list[EpochRecord]:
    with open(path) as f:
        return [EpochRecord(**row) for row in json.load(f)]


def history_path(checkpoint_path: str) -> str:
    return f"{checkpoint_path}.history.json"
