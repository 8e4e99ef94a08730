"""On-disk run artifacts: snapshot, score tables, histories, result and checkpoints."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable

logger = logging.getLogger(__name__)

SNAPSHOT_FILE = "config.snapshot"
STEP1_FILE = "step1_scores.jsonl"
STEP2_FILE = "step2_history.jsonl"
RANDOM_FILE = "random_scores.jsonl"
RESULT_FILE = "result.json"
TIMING_FILE = "timing.json"
CHECKPOINT_DIR = "checkpoints"


def dumps(obj: Any) -> str:
    """Canonical JSON used for every artifact, so equal runs give equal bytes."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class RunArtifacts:
    """Manages the files of one run under ``output_dir``."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Writing run artifacts to {self.output_dir}")

    def path(self, name: str) -> Path:
        return self.output_dir / name

    @property
    def checkpoint_dir(self) -> Path:
        path = self.output_dir / CHECKPOINT_DIR
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text)
        return path

    def write_json(self, name: str, obj: Any) -> Path:
        return self.write_text(name, dumps(obj))

    def write_jsonl(self, name: str, rows: Iterable[Dict[str, Any]]) -> Path:
        lines = [json.dumps(row, sort_keys=True) + "\n" for row in rows]
        path = self.write_text(name, "".join(lines))
        logger.debug(f"Wrote {len(lines)} records to {path}")
        return path

    def write_snapshot(self, text: str) -> Path:
        return self.write_text(SNAPSHOT_FILE, text)
