"""
Data Models for the Cyclone Grid Forecaster.

Defines best-track records, geographic points, the coordinate grid,
per-step features, window samples, forecasts and metrics.
"""

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import GridRangeError

FEATURE_NAMES: Tuple[str, ...] = ("wind", "pressure", "distance", "bearing", "grid_id")


@dataclass(frozen=True)
class StormHeader:
    """Header line of one HURDAT2 storm block."""

    basin_id: str
    cyclone_number: int
    year: int
    name: str
    declared_row_count: int

    @property
    def storm_id(self) -> str:
        return f"{self.basin_id}{self.cyclone_number:02d}{self.year:04d}"


@dataclass(frozen=True)
class TrackPoint:
    """One best-track fix. Missing wind/pressure are ``None``."""

    timestamp: datetime
    status: str
    latitude: float
    longitude: float
    max_wind: Optional[int] = None
    min_pressure: Optional[int] = None
    record_kind: Optional[str] = None
    extra: Tuple[str, ...] = ()

    @property
    def is_synoptic(self) -> bool:
        return (
            self.record_kind is None
            and self.timestamp.minute == 0
            and self.timestamp.hour in (0, 6, 12, 18)
        )

    @property
    def has_intensity(self) -> bool:
        return (
            self.max_wind is not None
            and self.min_pressure is not None
            and self.max_wind > 0
            and self.min_pressure > 0
        )

    @property
    def position(self) -> "GeoPoint":
        return GeoPoint(self.latitude, self.longitude)


@dataclass(frozen=True)
class StormTrack:
    """A storm header and its fixes in time order."""

    header: StormHeader
    points: Tuple[TrackPoint, ...]

    @property
    def storm_id(self) -> str:
        return self.header.storm_id

    @property
    def year(self) -> int:
        return self.header.year

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class DatasetSummary:
    """Exact counts over a list of tracks."""

    storms: int = 0
    points: int = 0
    min_year: int = 0
    max_year: int = 0
    max_track_length: int = 0

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class GeoPoint:
    """A position in degrees: latitude north, longitude east."""

    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class GridSpec:
    """
    Regular latitude/longitude grid.

    Cells are numbered column-major: the longitude index is multiplied by
    the number of latitude rows, so for a 1 degree grid
    ``id = floor(lon - lon_min) * lat_span + floor(lat - lat_min)``.
    """

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    resolution: float = 1.0

    def __post_init__(self):
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min {self.lon_min} must be below lon_max {self.lon_max}")
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min {self.lat_min} must be below lat_max {self.lat_max}")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        for span in (self.lon_max - self.lon_min, self.lat_max - self.lat_min):
            cells = span / self.resolution
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"span {span} is not a multiple of resolution {self.resolution}")

    @property
    def lat_span(self) -> float:
        return self.lat_max - self.lat_min

    @property
    def n_lat(self) -> int:
        return int(round(self.lat_span / self.resolution))

    @property
    def n_lon(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.resolution))

    @property
    def cell_count(self) -> int:
        return self.n_lat * self.n_lon

    def contains(self, point: GeoPoint) -> bool:
        return (
            self.lat_min <= point.lat < self.lat_max
            and self.lon_min <= point.lon < self.lon_max
        )

    def check_id(self, cell_id: int) -> None:
        if not 0 <= cell_id < self.cell_count:
            raise GridRangeError("grid id", cell_id, (0, self.cell_count))

    def clamp(self, point: GeoPoint) -> GeoPoint:
        """Pull a position onto the nearest in-bounds location."""
        inset = self.resolution * 1e-6
        lat = min(max(point.lat, self.lat_min), self.lat_max - inset)
        lon = min(max(point.lon, self.lon_min), self.lon_max - inset)
        return GeoPoint(lat, lon)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "GridSpec":
        return cls(**data)


@dataclass(frozen=True)
class MotionFeatures:
    """Distance in statute miles and bearing in [0, 360) degrees."""

    distance: float
    bearing: float


@dataclass(frozen=True)
class StepFeatures:
    """The five model features of one 6-hourly fix."""

    wind: float
    pressure: float
    distance: float
    bearing: float
    grid_id: int

    def __post_init__(self):
        values = (self.wind, self.pressure, self.distance, self.bearing)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite step features: {values}")

    def as_row(self) -> Tuple[float, ...]:
        return (self.wind, self.pressure, self.distance, self.bearing, float(self.grid_id))

    @classmethod
    def from_row(cls, row) -> "StepFeatures":
        wind, pressure, distance, bearing, grid_id = (float(v) for v in row)
        return cls(wind, pressure, distance, bearing, int(round(grid_id)))


@dataclass(frozen=True)
class WindowSample:
    """
    A ``window x 5`` input block plus the grid id it should predict.

    ``normalized`` tells whether ``inputs`` and ``label`` are raw feature
    values or already mapped onto [-1, 1].
    """

    storm_id: str
    inputs: np.ndarray
    label: float
    raw_label: int
    normalized: bool = False


@dataclass(frozen=True)
class ForecastStep:
    """One predicted cell, ``step_index`` six-hour periods ahead."""

    step_index: int
    grid_id: int
    center: GeoPoint
    bearing_carried: bool = False


@dataclass
class Trajectory:
    """Observed positions of a storm and the steps forecast after them."""

    storm_id: str
    observed: List[GeoPoint] = field(default_factory=list)
    forecast: List[ForecastStep] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Metrics:
    """Test-set scores; mse is in normalized label units."""

    mse: float
    accuracy: float
    accuracy_within_1: float
    n_samples: int = 0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)
