"""
Utility Functions for the Cyclone Grid Forecaster.

Common helpers for coordinate parsing and formatting, JSON-lines logs,
atomic file writes and logging setup used across the application.
"""

import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Optional, Union

logger = logging.getLogger(__name__)

# Hemisphere-suffixed coordinate, e.g. "28.0N" or "94.8W"
COORDINATE_PATTERN = re.compile(r"^(\d{1,3}(?:\.\d+)?)([NSEW])$")


def parse_coordinate(text: str) -> float:
    """
    Parse a hemisphere-suffixed coordinate into signed degrees.

    Args:
        text: Coordinate such as "9.7N" or "28.5W".

    Returns:
        Degrees; south latitudes and west longitudes are negative.

    Raises:
        ValueError: If the text is not a valid coordinate.
    """
    match = COORDINATE_PATTERN.match(text.strip().upper())
    if not match:
        raise ValueError(f"Invalid coordinate: {text!r}")

    magnitude, hemisphere = float(match.group(1)), match.group(2)
    limit = 90.0 if hemisphere in "NS" else 180.0
    if magnitude > limit:
        raise ValueError(f"Coordinate out of range: {text!r}")
    return -magnitude if hemisphere in "SW" else magnitude


def format_coordinate(value: float, axis: str) -> str:
    """Format signed degrees back into the hemisphere-suffixed form."""
    if axis == "lat":
        hemisphere = "N" if value >= 0 else "S"
    else:
        hemisphere = "E" if value >= 0 else "W"
    return f"{abs(value):.1f}{hemisphere}"


def write_jsonl(path: Union[str, Path], record: dict) -> None:
    """Append one JSON record as a line."""
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def write_json(path: Union[str, Path], payload: dict) -> None:
    """Write a JSON document with stable key order."""
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def atomic_write(path: Union[str, Path], data: bytes) -> None:
    """
    Write bytes to a file via a temporary sibling and rename.

    Readers never observe a partially written file.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Configure application logging."""
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )
