"""3-D points, the room grid, and body blockage of ceiling-to-user links.

A link is the open straight segment between a ceiling transmitter (VAP or
SBS) and a user's receiver. Other users' bodies are vertical cylinders of
configurable radius; a link is blocked when its XY projection passes within
a body's radius at a point whose height is at or below the body top. With
radius 0 the cylinder degenerates to the vertical line segment of an
infinitely thin body.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Point3:
    """Position in meters. z is height above the floor."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if self.z < 0:
            raise ValueError(f"z must be nonnegative, got {self.z}")


@dataclass(frozen=True)
class BodyOccupancy:
    """Vertical cylinder approximating a standing user's body."""

    center_xy: tuple[float, float]
    height: float
    radius: float

    def __post_init__(self):
        if self.height <= 0:
            raise ValueError(f"body height must be positive, got {self.height}")
        if self.radius < 0:
            raise ValueError(f"body radius must be nonnegative, got {self.radius}")


@dataclass(frozen=True)
class RoomGrid:
    """Square room divided into cells_per_side**2 equal cells.

    Cell index convention: idx = iy * cells_per_side + ix, center at
    ((ix + 0.5) * cell, (iy + 0.5) * cell).
    """

    room_side: float
    cells_per_side: int
    cell_centers: tuple[tuple[float, float], ...]

    @property
    def num_cells(self) -> int:
        return self.cells_per_side * self.cells_per_side

    def cell_center(self, idx: int) -> tuple[float, float]:
        return self.cell_centers[idx]


def make_grid(room_side: float, cells_per_side: int) -> RoomGrid:
    if room_side <= 0 or cells_per_side < 1:
        raise ValueError("room_side must be positive and cells_per_side >= 1")
    cell = room_side / cells_per_side
    centers = tuple(
        ((ix + 0.5) * cell, (iy + 0.5) * cell)
        for iy in range(cells_per_side)
        for ix in range(cells_per_side)
    )
    return RoomGrid(room_side=room_side, cells_per_side=cells_per_side, cell_centers=centers)


def distance(a: Point3, b: Point3) -> float:
    """Euclidean distance in meters."""
    dx = a.x - b.x
    dy = a.y - b.y
    dz = a.z - b.z
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def _blocks(tx: Point3, rx: Point3, body: BodyOccupancy) -> bool:
    """True when `body` obstructs the open segment rx -> tx.

    Points on the segment are P(g) = rx + g*(tx - rx), 0 < g < 1. The set of
    g where the XY projection lies within the body radius is the solution of
    a quadratic; z(g) is linear, so the lowest point of the segment inside
    that g-interval sits at one of the interval's ends. The body blocks iff
    that lowest z is at or below the body top.
    """
    ex = tx.x - rx.x
    ey = tx.y - rx.y
    ez = tx.z - rx.z
    dx = rx.x - body.center_xy[0]
    dy = rx.y - body.center_xy[1]

    a = ex * ex + ey * ey
    b = 2.0 * (dx * ex + dy * ey)
    c = dx * dx + dy * dy - body.radius * body.radius

    if a == 0.0:
        # XY-vertical link: projection is a single point.
        if c > 0.0:
            return False
        lo, hi = 0.0, 1.0
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return False
        root = math.sqrt(disc)
        lo = (-b - root) / (2.0 * a)
        hi = (-b + root) / (2.0 * a)
        if hi <= 0.0 or lo >= 1.0:
            return False
        lo = max(lo, 0.0)
        hi = min(hi, 1.0)

    g_low = lo if ez >= 0.0 else hi
    z_min = rx.z + g_low * ez
    return z_min <= body.height


def los_clear(tx: Point3, rx: Point3, blockers: list[BodyOccupancy]) -> bool:
    """True when no body in `blockers` obstructs the tx-rx segment.

    The receiving user's own body must not be in `blockers`; that is the
    caller's responsibility. An empty blocker list is a clear link.
    """
    if tx == rx:
        raise ValueError("tx and rx must be distinct points")
    return all(not _blocks(tx, rx, body) for body in blockers)
