"""
Spherical-earth geometry between GNSS fixes.

All formulas assume a sphere with the mean earth radius, which is what the
feature extraction is defined against. Scalar functions take GeoPoint
objects, the `_array` variants take numpy arrays of decimal degrees and are
what the feature pipeline uses on whole trajectories.
"""

import math
from dataclasses import dataclass

import numpy as np

# Mean earth radius in meters
EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoPoint:
    """Latitude and longitude in decimal degrees"""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not is_valid_coordinate(self.lat, self.lon):
            raise ValueError(
                f"Coordinate out of range: lat={self.lat}, lon={self.lon}"
            )


def is_valid_coordinate(lat: float, lon: float) -> bool:
    # NaN fails both comparisons
    return -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0


def _normalise_bearing(bearing: float) -> float:
    """atan2 may return -pi, the range we promise is (-pi, pi]"""
    if bearing <= -math.pi:
        return math.pi
    return bearing


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points"""
    lat1, lon1, lat2, lon2 = map(math.radians, [a.lat, a.lon, b.lat, b.lon])

    dlat = lat2 - lat1
    dlon = lon2 - lon1

    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(
        dlon / 2
    ) ** 2
    h = min(max(h, 0.0), 1.0)

    return EARTH_RADIUS_M * 2 * math.atan2(math.sqrt(h), math.sqrt(1 - h))


def initial_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """
    Initial bearing from a towards b in radians, 0 is north and pi/2 is east.

    The result lies in (-pi, pi]. Coincident points have no direction, 0 is
    returned for them.
    """
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0

    lat1, lon1, lat2, lon2 = map(math.radians, [a.lat, a.lon, b.lat, b.lon])
    dlon = lon2 - lon1

    x = math.cos(lat2) * math.sin(dlon)
    y = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(
        lat2
    ) * math.cos(dlon)

    return _normalise_bearing(math.atan2(x, y))


def destination_point(origin: GeoPoint, bearing: float, distance_m: float) -> GeoPoint:
    """
    Point reached by travelling distance_m along a great circle that leaves
    origin with the given initial bearing (radians).
    """
    lat1 = math.radians(origin.lat)
    lon1 = math.radians(origin.lon)
    delta = distance_m / EARTH_RADIUS_M

    sin_lat2 = math.sin(lat1) * math.cos(delta) + math.cos(lat1) * math.sin(
        delta
    ) * math.cos(bearing)
    sin_lat2 = min(max(sin_lat2, -1.0), 1.0)
    lat2 = math.asin(sin_lat2)
    lon2 = lon1 + math.atan2(
        math.sin(bearing) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * sin_lat2,
    )

    # Wrap longitude back into [-180, 180]
    lon2_deg = (math.degrees(lon2) + 540.0) % 360.0 - 180.0
    return GeoPoint(lat=math.degrees(lat2), lon=lon2_deg)


def haversine_distance_array(
    lats1: np.ndarray, lons1: np.ndarray, lats2: np.ndarray, lons2: np.ndarray
) -> np.ndarray:
    """Vectorised haversine_distance, inputs in decimal degrees"""
    lats1, lons1, lats2, lons2 = map(np.radians, [lats1, lons1, lats2, lons2])

    dlat = lats2 - lats1
    dlon = lons2 - lons1

    h = np.sin(dlat / 2) ** 2 + np.cos(lats1) * np.cos(lats2) * np.sin(dlon / 2) ** 2
    h = np.clip(h, 0.0, 1.0)

    return EARTH_RADIUS_M * 2 * np.arctan2(np.sqrt(h), np.sqrt(1 - h))


def initial_bearing_array(
    lats1: np.ndarray, lons1: np.ndarray, lats2: np.ndarray, lons2: np.ndarray
) -> np.ndarray:
    """Vectorised initial_bearing, same conventions"""
    coincident = (np.asarray(lats1) == np.asarray(lats2)) & (
        np.asarray(lons1) == np.asarray(lons2)
    )
    lats1, lons1, lats2, lons2 = map(np.radians, [lats1, lons1, lats2, lons2])
    dlon = lons2 - lons1

    x = np.cos(lats2) * np.sin(dlon)
    y = np.cos(lats1) * np.sin(lats2) - np.sin(lats1) * np.cos(lats2) * np.cos(dlon)

    bearing = np.arctan2(x, y)
    bearing = np.where(bearing <= -np.pi, np.pi, bearing)
    return np.where(coincident, 0.0, bearing)
