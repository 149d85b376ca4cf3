import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

from pydantic import BaseModel

logger = logging.getLogger(__name__)


def config_hash(payload: Dict[str, Any]) -> str:
    """Stable short id for an effective configuration."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.md5(canonical.encode()).hexdigest()[:12]


def ensure_dir(path: str) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_csv(path: Path, header: Sequence[str], rows: List[Sequence[Any]]) -> Path:
    """Write rows under a mandatory header row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"CSV row has {len(row)} fields, header has {len(header)}")
            writer.writerow(list(row))
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def write_json(path: Path, model: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2))
    logger.info(f"Wrote {type(model).__name__} to {path}")
    return path


def write_json_lines(path: Path, models: Sequence[BaseModel]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for model in models:
            handle.write(model.model_dump_json() + "\n")
    return path
