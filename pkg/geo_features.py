"""
Geodesy and Grid Arithmetic.

Great-circle distance and initial bearing on a spherical earth, the
direct problem used to extrapolate a motion vector, and the mapping
between positions and 1-degree grid cells.
"""

import math
from typing import Iterable

from errors import BearingUndefinedError, GridRangeError
from models import GeoPoint, GridSpec, MotionFeatures

EARTH_RADIUS_KM = 6371.0088
KM_PER_MILE = 1.609344
EARTH_RADIUS_MILES = EARTH_RADIUS_KM / KM_PER_MILE


def bearing(p1: GeoPoint, p2: GeoPoint) -> float:
    """
    Initial great-circle heading from ``p1`` to ``p2``.

    Returns:
        Degrees clockwise from north in [0, 360).

    Raises:
        BearingUndefinedError: If the two positions coincide.
    """
    phi1, phi2 = math.radians(p1.lat), math.radians(p2.lat)
    d_lambda = math.radians(p2.lon - p1.lon)

    y = math.sin(d_lambda) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(d_lambda)
    if (p1.lat == p2.lat and p1.lon == p2.lon) or (x == 0.0 and y == 0.0):
        raise BearingUndefinedError(f"bearing undefined between identical points {p1}")

    beta = math.degrees(math.atan2(y, x))
    if beta < 0:
        beta += 360.0
    # -1e-15 + 360 rounds to 360.0
    return 0.0 if beta >= 360.0 else beta


def great_circle_distance(p1: GeoPoint, p2: GeoPoint) -> float:
    """Haversine distance in statute miles on a sphere of mean radius."""
    phi1, phi2 = math.radians(p1.lat), math.radians(p2.lat)
    d_phi = phi2 - phi1
    d_lambda = math.radians(p2.lon - p1.lon)
    a = math.sin(d_phi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(d_lambda / 2) ** 2
    sigma = 2 * math.asin(min(1.0, math.sqrt(a)))
    return EARTH_RADIUS_MILES * sigma


def motion(p1: GeoPoint, p2: GeoPoint) -> MotionFeatures:
    """Distance and bearing of the move from ``p1`` to ``p2``."""
    return MotionFeatures(great_circle_distance(p1, p2), bearing(p1, p2))


def destination_point(start: GeoPoint, distance: float, heading: float) -> GeoPoint:
    """
    Position reached after travelling ``distance`` miles from ``start``
    along the great circle with initial ``heading`` degrees.
    """
    sigma = distance / EARTH_RADIUS_MILES
    theta = math.radians(heading)
    phi1, lambda1 = math.radians(start.lat), math.radians(start.lon)

    sin_phi2 = math.sin(phi1) * math.cos(sigma) + math.cos(phi1) * math.sin(sigma) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lambda2 = lambda1 + math.atan2(
        math.sin(theta) * math.sin(sigma) * math.cos(phi1),
        math.cos(sigma) - math.sin(phi1) * sin_phi2,
    )
    lon = (math.degrees(lambda2) + 540.0) % 360.0 - 180.0
    return GeoPoint(math.degrees(phi2), lon)


def grid_id(point: GeoPoint, spec: GridSpec) -> int:
    """
    Cell id of ``point``: ``floor(lon - lon_min) * lat_span + floor(lat - lat_min)``
    in units of the grid resolution.

    Raises:
        GridRangeError: If the point lies outside the grid.
    """
    if not spec.lon_min <= point.lon < spec.lon_max:
        raise GridRangeError("longitude", point.lon, (spec.lon_min, spec.lon_max))
    if not spec.lat_min <= point.lat < spec.lat_max:
        raise GridRangeError("latitude", point.lat, (spec.lat_min, spec.lat_max))

    col = math.floor((point.lon - spec.lon_min) / spec.resolution)
    row = math.floor((point.lat - spec.lat_min) / spec.resolution)
    return col * spec.n_lat + row


def grid_center(cell_id: int, spec: GridSpec) -> GeoPoint:
    """Center of cell ``cell_id``; inverse of ``grid_id`` up to the cell."""
    spec.check_id(cell_id)
    col, row = divmod(cell_id, spec.n_lat)
    return GeoPoint(
        spec.lat_min + (row + 0.5) * spec.resolution,
        spec.lon_min + (col + 0.5) * spec.resolution,
    )


def fit_grid(points: Iterable[GeoPoint], resolution: float = 1.0) -> GridSpec:
    """
    Smallest resolution-aligned grid holding every point, padded by one
    cell on each side.

    Raises:
        ValueError: If ``points`` is empty.
    """
    points = list(points)
    if not points:
        raise ValueError("cannot fit a grid to zero points")

    lats = [p.lat for p in points]
    lons = [p.lon for p in points]

    def lower(value: float) -> float:
        return (math.floor(value / resolution) - 1) * resolution

    def upper(value: float) -> float:
        return (math.ceil(value / resolution) + 1) * resolution

    return GridSpec(
        lon_min=lower(min(lons)),
        lon_max=upper(max(lons)),
        lat_min=lower(min(lats)),
        lat_max=upper(max(lats)),
        resolution=resolution,
    )
