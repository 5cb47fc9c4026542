import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from timecon.models import ExperimentConfig, ExperimentReport
from timecon.settings import get_settings

logger = logging.getLogger(__name__)


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.12g" % float(value)
    return "" if value is None else str(value)


def _jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


class ArtifactStore:
    """One directory per run: {experiment}-{seed}-{config hash}; reruns overwrite identically."""

    def __init__(self, config: ExperimentConfig, root: Optional[str] = None):
        base = root or config.output_dir or get_settings().output_dir
        self.name = f"{config.experiment.value}-{config.run_seed}-{config.config_hash()}"
        self.path = Path(base) / self.name
        self.files: List[str] = []

    def prepare(self) -> Path:
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"Failed to create run directory {self.path}: {e}") from e
        return self.path

    def _record(self, name: str) -> None:
        if name not in self.files:
            self.files.append(name)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        self.prepare()
        target = self.path / name
        with target.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
        self._record(name)
        logger.debug("Wrote %s", target)
        return target

    def write_records(self, name: str, records: Sequence[Mapping[str, Any]]) -> Path:
        """CSV from dict rows; the header is the keys of the first row."""
        header = list(records[0].keys()) if records else []
        return self.write_csv(name, header, ([r.get(k) for k in header] for r in records))

    def write_json(self, name: str, payload: Any) -> Path:
        self.prepare()
        target = self.path / name
        text = json.dumps(_jsonable(payload), sort_keys=True, ensure_ascii=False, indent=2)
        target.write_text(text + "\n", encoding="utf-8")
        self._record(name)
        return target

    def write_report(self, report: ExperimentReport) -> Path:
        report.artifacts = sorted(self.files)
        return self.write_json("report.json", report.model_dump(mode="python"))
