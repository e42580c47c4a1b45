"""
Writers for campaign outputs.

``records.csv`` and ``summary.csv`` hold only seeded quantities, so two runs of
the same config produce byte-identical files; wall-clock data goes to
``meta.json``.
"""

import dataclasses
import json
import logging
import subprocess
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

logger = logging.getLogger(__name__)

RECORDS_FILE = 'records.csv'
SUMMARY_FILE = 'summary.csv'
META_FILE = 'meta.json'
CONSTANTS_FILE = 'constants.json'
TRACES_DIR = 'traces'


def write_frame(rows, path, columns=None):
    """
    Write rows (dicts or a DataFrame) as CSV with a fixed column order.

    Returns:
        pandas.DataFrame: The frame that was written.
    """
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    if columns is not None:
        frame = frame[columns]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n')
    logger.info('csv written path=%s rows=%d', path, len(frame))
    return frame


def export_trace(point, path):
    """Write a solver trace as CSV rows ``(iteration, grad_norm, step_norm)``."""
    return write_frame(
        [row._asdict() for row in point.trace],
        path,
        columns=['iteration', 'grad_norm', 'step_norm'],
    )


def export_bounds(rows, path):
    """Write bound evaluations ``(regime, n, p, r, prob, smin_bound)``."""
    return write_frame(rows, path, columns=['regime', 'n', 'p', 'r', 'prob', 'smin_bound'])


def git_hash():
    """Commit of the working tree, or None outside a git checkout."""
    try:
        result = subprocess.run(
            ['git', 'rev-parse', 'HEAD'],
            cwd=settings.BASE_DIR,
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return result.stdout.strip() or None


def jsonable(value):
    if dataclasses.is_dataclass(value):
        return jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {key: jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(payload, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=True))
    return path


def write_meta(path, cfg, started_at, wall_seconds, extra=None):
    """Write the metadata sidecar: config echo, git hash and timings."""
    payload = {
        'config': cfg,
        'git_hash': git_hash(),
        'started_at': started_at.isoformat(),
        'finished_at': datetime.now(timezone.utc).isoformat(),
        'wall_seconds': wall_seconds,
    }
    payload.update(extra or {})
    return write_json(payload, path)
