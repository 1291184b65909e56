"""Run artifacts: log.csv and header.json."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from . import __version__
from .config import ScenarioFile
from .constants import GENERATOR_ID, LOG_COLUMNS
from .errors import MissingColumn
from .sim import LogRecord

LOG_FILENAME = "log.csv"
HEADER_FILENAME = "header.json"


@dataclass(frozen=True)
class RunArtifacts:
    out_dir: Path
    log_path: Path
    header_path: Path


def record_row(record: LogRecord) -> List[Any]:
    """One log.csv row in column order."""
    return (
        [record.t]
        + list(record.state.as_vector())
        + list(record.measurement)
        + list(record.estimate)
        + list(record.weights)
        + [record.dominant_mode, record.true_mode]
        + list(record.q.sliders)
        + list(record.q.spools)
        + list(record.tensions)
        + [record.error_norm, "|".join(record.flags) or "-"]
    )


def records_to_frame(records: Sequence[LogRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([record_row(r) for r in records], columns=LOG_COLUMNS)
    float_columns = [c for c in LOG_COLUMNS if c not in ("dom_mode", "true_mode", "flags")]
    frame[float_columns] = frame[float_columns].astype(np.float64)
    return frame.astype({"dom_mode": np.int64, "true_mode": np.int64})


def write_log_csv(records: Sequence[LogRecord], path: Union[str, Path]) -> Path:
    """Write the log with 17 significant digits, header row first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, index=False, float_format="%.17g")
    return path


def header_document(scenario: ScenarioFile) -> Dict[str, Any]:
    return {
        "scenario": scenario.model_dump(mode="json"),
        "seed": scenario.run.seed,
        "generator": GENERATOR_ID,
        "version": __version__,
        "columns": list(LOG_COLUMNS),
    }


def write_header(scenario: ScenarioFile, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header_document(scenario), indent=2) + "\n", encoding="utf-8")
    return path


def write_run_artifacts(
    records: Sequence[LogRecord], scenario: ScenarioFile, out_dir: Union[str, Path]
) -> RunArtifacts:
    out_dir = Path(out_dir)
    log_path = write_log_csv(records, out_dir / LOG_FILENAME)
    header_path = write_header(scenario, out_dir / HEADER_FILENAME)
    return RunArtifacts(out_dir, log_path, header_path)


def read_log(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False)


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def require_columns(frame: pd.DataFrame, columns: Sequence[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MissingColumn(f"log is missing column(s): {', '.join(missing)}")
