"""Pure 2-D propagation geometry: delays, arrival angles, virtual scatters.

Angles follow the convention of a uniform linear array aligned with the
horizontal axis: the direction of arrival is measured from the +y axis,
``doa = atan2(dx, dy)``, so a source straight "above" the array sits at
0 rad and one on the +x side at +pi/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .errors import DegenerateGeometry

__all__ = [
    "Location",
    "PathGeometry",
    "Rect",
    "toa_los",
    "toa_nlos",
    "doa",
    "path_geometry",
    "canonicalise_virtual_scatter",
]


@dataclass(frozen=True)
class Location:
    """A 2-D point in metres."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"location components must be finite, got ({self.x}, {self.y})")

    def distance_to(self, other: "Location") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


class PathGeometry(NamedTuple):
    """Time of arrival (s) and direction of arrival (rad) of one path."""

    toa: float
    doa: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle, used for scene bounds and search domains."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("rectangle must have positive width and height")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def contains(self, p: Location, margin: float = 0.0) -> bool:
        return (self.xmin - margin <= p.x <= self.xmax + margin
                and self.ymin - margin <= p.y <= self.ymax + margin)

    def clip(self, x: float, y: float) -> tuple[float, float]:
        return (min(max(x, self.xmin), self.xmax), min(max(y, self.ymin), self.ymax))


def toa_los(mobile: Location, base: Location, c: float) -> float:
    """Direct-path time of arrival: straight-line distance over ``c``."""
    if c <= 0:
        raise ValueError("speed of light must be positive")
    return mobile.distance_to(base) / c


def toa_nlos(mobile: Location, scatter: Location, base: Location, c: float) -> float:
    """Single-bounce time of arrival: mobile->scatter plus scatter->base over ``c``."""
    if c <= 0:
        raise ValueError("speed of light must be positive")
    return (mobile.distance_to(scatter) + scatter.distance_to(base)) / c


def doa(source: Location, base: Location) -> float:
    """Direction of arrival at ``base`` of a ray from ``source``.

    Full-quadrant arctangent of (dx, dy), measured from the +y axis;
    result lies in (-pi, pi]. For a scattered path the source is the
    scatter: the arrival angle does not depend on the mobile at all.
    """
    dx = source.x - base.x
    dy = source.y - base.y
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometry(f"DoA undefined: source coincides with base at ({base.x}, {base.y})")
    angle = math.atan2(dx, dy)
    if angle <= -math.pi:
        angle += 2.0 * math.pi
    return angle


def path_geometry(mobile: Location, scatter: Location, base: Location, c: float) -> PathGeometry:
    """ToA and DoA of the (possibly virtual-scatter) path mobile->scatter->base."""
    return PathGeometry(toa=toa_nlos(mobile, scatter, base, c), doa=doa(scatter, base))


def canonicalise_virtual_scatter(mobile: Location, scatter: Optional[Location]) -> Location:
    """Scatter position after virtual-scatter placement.

    A direct path (``scatter is None``) gets a virtual scatter at the mobile
    itself, which is the unique most parsimonious placement when several
    direct paths meet there; physical scatters pass through unchanged.
    Idempotent: feeding the result back in returns the same point.
    """
    return mobile if scatter is None else scatter
