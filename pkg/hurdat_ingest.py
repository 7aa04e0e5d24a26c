"""
HURDAT2 Ingestion Module.

Parses the NOAA HURDAT2 best-track text format into storm tracks, writes
it back out, and applies the cleaning rules that turn the raw archive
into a strictly 6-hourly training set.
"""

import logging
import re
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from typing import Iterable, List, Optional, Sequence, Tuple

from errors import ParseError
from models import DatasetSummary, StormHeader, StormTrack, TrackPoint
from utils import format_coordinate, parse_coordinate

logger = logging.getLogger(__name__)

EARLIEST_YEAR = 1944
SYNOPTIC_SPACING = timedelta(hours=6)
MISSING_SENTINEL = -999

# Some early records use -99 for an unknown wind; anything at or below it is missing
_MISSING_THRESHOLD = -99

STORM_ID_PATTERN = re.compile(r"^([A-Z]{2})(\d{2})(\d{4})$")


def _split_fields(line: str) -> List[str]:
    fields = [f.strip() for f in line.split(",")]
    if fields and fields[-1] == "":
        fields.pop()
    return fields


def _is_header(fields: Sequence[str]) -> bool:
    return len(fields) >= 1 and bool(STORM_ID_PATTERN.match(fields[0]))


def _parse_header(fields: Sequence[str], line_no: int, basin: str) -> StormHeader:
    if len(fields) != 3:
        raise ParseError(line_no, f"header needs 3 fields, found {len(fields)}")

    match = STORM_ID_PATTERN.match(fields[0])
    if not match:
        raise ParseError(line_no, f"invalid storm id {fields[0]!r}")
    basin_id, number, year = match.group(1), int(match.group(2)), int(match.group(3))
    if basin_id != basin:
        raise ParseError(line_no, f"basin {basin_id!r} is not {basin!r}")
    if not 1 <= number <= 99:
        raise ParseError(line_no, f"cyclone number {number} outside 1-99")

    try:
        row_count = int(fields[2])
    except ValueError:
        raise ParseError(line_no, f"non-numeric row count {fields[2]!r}") from None
    if row_count < 0:
        raise ParseError(line_no, f"negative row count {row_count}")

    name = fields[1].upper() or "UNNAMED"
    return StormHeader(basin_id, number, year, name, row_count)


def _parse_optional(value: str, line_no: int, label: str) -> Optional[int]:
    if value == "":
        return None
    try:
        number = int(value)
    except ValueError:
        raise ParseError(line_no, f"non-numeric {label} {value!r}") from None
    return None if number <= _MISSING_THRESHOLD else number


def _parse_point(fields: Sequence[str], line_no: int) -> TrackPoint:
    if len(fields) < 8:
        raise ParseError(line_no, f"data row needs at least 8 fields, found {len(fields)}")

    date, clock, kind, status, lat, lon, wind, pressure = fields[:8]
    try:
        timestamp = datetime.strptime(f"{date}{clock.zfill(4)}", "%Y%m%d%H%M")
    except ValueError:
        raise ParseError(line_no, f"invalid timestamp {date!r} {clock!r}") from None

    try:
        latitude = parse_coordinate(lat)
        longitude = parse_coordinate(lon)
    except ValueError as e:
        raise ParseError(line_no, str(e)) from None
    if lat[-1:].upper() not in ("N", "S") or lon[-1:].upper() not in ("E", "W"):
        raise ParseError(line_no, f"hemisphere mismatch in {lat!r}, {lon!r}")

    min_pressure = _parse_optional(pressure, line_no, "pressure")
    if min_pressure is not None and min_pressure <= 0:
        min_pressure = None

    return TrackPoint(
        timestamp=timestamp,
        status=status,
        latitude=latitude,
        longitude=longitude,
        max_wind=_parse_optional(wind, line_no, "wind"),
        min_pressure=min_pressure,
        record_kind=kind or None,
        extra=tuple(fields[8:]),
    )


def parse_hurdat2(text: str, basin: str = "AL") -> List[StormTrack]:
    """
    Parse HURDAT2 text into storm tracks.

    Args:
        text: Full file contents.
        basin: Basin code every header must carry.

    Returns:
        One StormTrack per header, points in file order.

    Raises:
        ParseError: On a malformed header or row, a row-count mismatch,
            a bad coordinate or non-increasing timestamps.
    """
    tracks: List[StormTrack] = []
    header: Optional[StormHeader] = None
    header_line = 0
    points: List[TrackPoint] = []

    def close_storm(line_no: int) -> None:
        if header is None:
            return
        if len(points) != header.declared_row_count:
            raise ParseError(
                line_no,
                f"storm {header.storm_id} (header line {header_line}) declares "
                f"{header.declared_row_count} rows, found {len(points)}",
            )
        tracks.append(StormTrack(header, tuple(points)))

    lines = text.splitlines()
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = _split_fields(line)

        expecting_rows = header is not None and len(points) < header.declared_row_count
        if not expecting_rows:
            if not _is_header(fields):
                if header is not None:
                    raise ParseError(
                        line_no,
                        f"storm {header.storm_id} declares {header.declared_row_count} rows, "
                        "found more",
                    )
                raise ParseError(line_no, "expected a storm header line")
            close_storm(line_no)
            header = _parse_header(fields, line_no, basin)
            header_line = line_no
            points = []
            continue

        if _is_header(fields):
            close_storm(line_no)

        point = _parse_point(fields, line_no)
        if points and point.timestamp <= points[-1].timestamp:
            raise ParseError(
                line_no, f"timestamp {point.timestamp:%Y-%m-%d %H:%M} is not after the previous fix"
            )
        points.append(point)

    close_storm(len(lines) + 1)
    logger.info(
        "Parsed %d storms with %d fixes", len(tracks), sum(len(t) for t in tracks)
    )
    return tracks


def _format_optional(value: Optional[int]) -> str:
    return str(MISSING_SENTINEL if value is None else value)


def serialize_hurdat2(tracks: Iterable[StormTrack]) -> str:
    """Write tracks back out in the HURDAT2 comma-separated layout."""
    lines = []
    for track in tracks:
        h = track.header
        lines.append(f"{h.storm_id}, {h.name:>18}, {len(track.points):>6},")
        for p in track.points:
            fields = [
                p.timestamp.strftime("%Y%m%d"),
                p.timestamp.strftime("%H%M"),
                f"{p.record_kind or '':>1}",
                f"{p.status:>2}",
                f"{format_coordinate(p.latitude, 'lat'):>5}",
                f"{format_coordinate(p.longitude, 'lon'):>6}",
                f"{_format_optional(p.max_wind):>4}",
                f"{_format_optional(p.min_pressure):>5}",
                *p.extra,
            ]
            lines.append(", ".join(fields) + ",")
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class FilterReport:
    """How many storms and fixes each cleaning rule removed."""

    storms_in: int = 0
    storms_out_of_years: int = 0
    points_non_synoptic: int = 0
    points_missing_intensity: int = 0
    points_gap_trimmed: int = 0
    storms_too_short: int = 0
    storms_kept: int = 0
    points_kept: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _longest_contiguous(points: Sequence[TrackPoint]) -> Tuple[TrackPoint, ...]:
    """Longest run of fixes exactly six hours apart; the first wins ties."""
    best: Tuple[int, int] = (0, 0)
    start = 0
    for i in range(1, len(points) + 1):
        if i == len(points) or points[i].timestamp - points[i - 1].timestamp != SYNOPTIC_SPACING:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = i
    return tuple(points[best[0]:best[1]])


def filter_tracks_with_report(
    tracks: Iterable[StormTrack], min_year: int = EARLIEST_YEAR, max_year: int = 2022
) -> Tuple[List[StormTrack], FilterReport]:
    """
    Apply the cleaning rules and count what each one removed.

    Keeps storms whose year lies in ``[min_year, max_year]``; within each,
    keeps synoptic fixes (00/06/12/18 UTC, no record flag) with positive
    wind and pressure, then the longest run of fixes six hours apart.
    Storms left with fewer than two fixes are dropped.
    """
    if min_year < EARLIEST_YEAR:
        raise ValueError(f"min_year {min_year} is before {EARLIEST_YEAR}")
    if min_year > max_year:
        raise ValueError(f"min_year {min_year} is after max_year {max_year}")

    report = FilterReport()
    kept: List[StormTrack] = []
    for track in tracks:
        report.storms_in += 1
        if not min_year <= track.year <= max_year:
            report.storms_out_of_years += 1
            continue

        synoptic = [p for p in track.points if p.is_synoptic]
        report.points_non_synoptic += len(track.points) - len(synoptic)
        complete = [p for p in synoptic if p.has_intensity]
        report.points_missing_intensity += len(synoptic) - len(complete)
        contiguous = _longest_contiguous(complete)
        report.points_gap_trimmed += len(complete) - len(contiguous)

        if len(contiguous) < 2:
            report.storms_too_short += 1
            logger.debug("Dropped %s: %d usable fixes", track.storm_id, len(contiguous))
            continue

        header = track.header
        if len(contiguous) != header.declared_row_count:
            header = StormHeader(
                header.basin_id, header.cyclone_number, header.year, header.name, len(contiguous)
            )
        kept.append(StormTrack(header, contiguous))
        report.storms_kept += 1
        report.points_kept += len(contiguous)

    logger.info(
        "Kept %d/%d storms (%d fixes) for %d-%d",
        report.storms_kept,
        report.storms_in,
        report.points_kept,
        min_year,
        max_year,
    )
    return kept, report


def filter_tracks(
    tracks: Iterable[StormTrack], min_year: int = EARLIEST_YEAR, max_year: int = 2022
) -> List[StormTrack]:
    """Clean tracks; see ``filter_tracks_with_report``."""
    return filter_tracks_with_report(tracks, min_year, max_year)[0]


def dataset_summary(tracks: Sequence[StormTrack]) -> DatasetSummary:
    """Count storms, fixes, the year range and the longest track."""
    if not tracks:
        return DatasetSummary()
    years = [t.year for t in tracks]
    return DatasetSummary(
        storms=len(tracks),
        points=sum(len(t) for t in tracks),
        min_year=min(years),
        max_year=max(years),
        max_track_length=max(len(t) for t in tracks),
    )


def load_hurdat2(path: str, basin: str = "AL") -> List[StormTrack]:
    """Read and parse a HURDAT2 file."""
    with open(path, "r") as f:
        return parse_hurdat2(f.read(), basin=basin)
