"""Cube-face quadtree cells over the sphere.

Points are projected gnomonically onto the six faces of the cube (S2 face
numbering and orientation) and quantized with a *linear* ST transform, so a
level-L cell on face f is the square ``[i, i+1) x [j, j+1)`` of a
``2^L x 2^L`` grid over ``(u, v) in [-1, 1]^2``.

Scalar helpers work on :class:`GeoPoint` / :class:`CellId`; the ``*_array``
functions are their vectorized counterparts on radians and packed ids and are
what the rest of the package uses in hot loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
MAX_LEVEL = 20

_FACE_SHIFT = 61
_LEVEL_SHIFT = 56
_I_SHIFT = 28
_COORD_MASK = (1 << 28) - 1


class InvalidArgument(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude in radians; longitude is wrapped into [-pi, pi)."""

    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidArgument(f"non-finite coordinates ({lat}, {lon})")
        if abs(lat) > math.pi / 2 + 1e-12:
            raise InvalidArgument(f"latitude {lat} outside [-pi/2, pi/2]")
        object.__setattr__(self, "lat", min(max(lat, -math.pi / 2), math.pi / 2))
        object.__setattr__(self, "lon", wrap_lon(lon))

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float) -> "GeoPoint":
        return cls(math.radians(lat_deg), math.radians(lon_deg))

    def to_xyz(self) -> np.ndarray:
        return latlon_to_xyz(np.array([self.lat]), np.array([self.lon]))[0]


def wrap_lon(lon):
    """Wrap longitude(s) into [-pi, pi); values already in range pass through unchanged."""
    if np.isscalar(lon):
        if -math.pi <= lon < math.pi:
            return float(lon)
        out = math.fmod(lon + math.pi, 2 * math.pi)
        if out < 0:
            out += 2 * math.pi
        out -= math.pi
        return -math.pi if out >= math.pi else out
    lon = np.asarray(lon, dtype=np.float64)
    out = np.mod(lon + np.pi, 2 * np.pi) - np.pi
    out = np.where(out >= np.pi, -np.pi, out)
    return np.where((lon >= -np.pi) & (lon < np.pi), lon, out)


@dataclass(frozen=True, order=False)
class CellId:
    face: int
    level: int
    i: int
    j: int

    def __post_init__(self):
        if not 0 <= self.face < 6:
            raise InvalidArgument(f"face {self.face} out of range")
        if not 0 <= self.level <= MAX_LEVEL:
            raise InvalidArgument(f"level {self.level} out of range")
        n = 1 << self.level
        if not (0 <= self.i < n and 0 <= self.j < n):
            raise InvalidArgument(f"(i, j)=({self.i}, {self.j}) outside level {self.level}")

    def pack(self) -> int:
        return (
            (self.face << _FACE_SHIFT)
            | (self.level << _LEVEL_SHIFT)
            | (self.i << _I_SHIFT)
            | self.j
        )

    @classmethod
    def unpack(cls, packed: int) -> "CellId":
        packed = int(packed)
        if packed < 0 or packed >= 1 << 64:
            raise InvalidArgument(f"packed id {packed} is not a u64")
        return cls(
            face=packed >> _FACE_SHIFT,
            level=(packed >> _LEVEL_SHIFT) & 0x1F,
            i=(packed >> _I_SHIFT) & _COORD_MASK,
            j=packed & _COORD_MASK,
        )

    def __lt__(self, other: "CellId") -> bool:
        return self.pack() < other.pack()


# ---------------------------------------------------------------------------
# face projection


def latlon_to_xyz(lat, lon) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    lat = np.arctan2(z, np.hypot(x, y))
    lon = wrap_lon(np.arctan2(y, x))
    return lat, lon


def xyz_to_face_uv(xyz: np.ndarray):
    """Face index and (u, v) in [-1, 1] for points (need not be unit length)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    axis = np.argmax(np.abs(xyz), axis=-1)
    comp = np.take_along_axis(xyz, axis[..., None], axis=-1)[..., 0]
    face = np.where(comp < 0, axis + 3, axis)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = np.select(
            [face == 0, face == 1, face == 2, face == 3, face == 4],
            [y / x, -x / y, -x / z, z / x, z / y],
            -y / z,
        )
        v = np.select(
            [face == 0, face == 1, face == 2, face == 3, face == 4],
            [z / x, z / y, -y / z, y / x, -x / y],
            -x / z,
        )
    return face, np.clip(u, -1.0, 1.0), np.clip(v, -1.0, 1.0)


def face_uv_to_xyz(face, u, v) -> np.ndarray:
    face = np.asarray(face)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    one = np.ones_like(u)
    x = np.select([face == 0, face == 1, face == 2, face == 3, face == 4], [one, -u, -u, -one, v], v)
    y = np.select([face == 0, face == 1, face == 2, face == 3, face == 4], [u, one, -v, -v, -one], u)
    z = np.select([face == 0, face == 1, face == 2, face == 3, face == 4], [v, v, one, -u, -u], -one)
    xyz = np.stack([x, y, z], axis=-1)
    return xyz / np.linalg.norm(xyz, axis=-1, keepdims=True)


def _check_level(level: int) -> None:
    if not 0 <= int(level) <= MAX_LEVEL:
        raise InvalidArgument(f"level {level} outside 0..{MAX_LEVEL}")


def pack_array(face, level, i, j) -> np.ndarray:
    face = np.asarray(face, dtype=np.uint64)
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    lvl = np.uint64(level) if np.isscalar(level) else np.asarray(level, dtype=np.uint64)
    return (
        (face << np.uint64(_FACE_SHIFT))
        | (lvl << np.uint64(_LEVEL_SHIFT))
        | (i << np.uint64(_I_SHIFT))
        | j
    )


def unpack_array(packed):
    packed = np.asarray(packed, dtype=np.uint64)
    face = (packed >> np.uint64(_FACE_SHIFT)).astype(np.int64)
    level = ((packed >> np.uint64(_LEVEL_SHIFT)) & np.uint64(0x1F)).astype(np.int64)
    i = ((packed >> np.uint64(_I_SHIFT)) & np.uint64(_COORD_MASK)).astype(np.int64)
    j = (packed & np.uint64(_COORD_MASK)).astype(np.int64)
    return face, level, i, j


def cells_from_xyz(xyz: np.ndarray, level: int) -> np.ndarray:
    _check_level(level)
    face, u, v = xyz_to_face_uv(xyz)
    n = 1 << level
    i = np.clip(np.floor(0.5 * (u + 1.0) * n), 0, n - 1).astype(np.int64)
    j = np.clip(np.floor(0.5 * (v + 1.0) * n), 0, n - 1).astype(np.int64)
    return pack_array(face, level, i, j)


def cells_from_latlon(lat, lon, level: int) -> np.ndarray:
    """Packed cell ids (uint64) of the level-``level`` cells containing the points."""
    return cells_from_xyz(latlon_to_xyz(lat, lon), level)


def cell_centers_xyz(packed) -> np.ndarray:
    face, level, i, j = unpack_array(packed)
    n = np.left_shift(1, level).astype(np.float64)
    u = 2.0 * (i + 0.5) / n - 1.0
    v = 2.0 * (j + 0.5) / n - 1.0
    return face_uv_to_xyz(face, u, v)


def cell_centers_latlon(packed) -> tuple[np.ndarray, np.ndarray]:
    return xyz_to_latlon(cell_centers_xyz(packed))


def parent_array(packed, target_level: int) -> np.ndarray:
    face, level, i, j = unpack_array(packed)
    if np.any(level < target_level):
        raise InvalidArgument("target level finer than cell level")
    shift = level - target_level
    return pack_array(face, target_level, i >> shift, j >> shift)


# ---------------------------------------------------------------------------
# scalar API


def cell_from_point(p: GeoPoint, level: int) -> CellId:
    _check_level(level)
    return CellId.unpack(int(cells_from_latlon(np.array([p.lat]), np.array([p.lon]), level)[0]))


def cell_center(c: CellId) -> GeoPoint:
    lat, lon = cell_centers_latlon(np.array([c.pack()], dtype=np.uint64))
    return GeoPoint(float(lat[0]), float(lon[0]))


def parent(c: CellId, target_level: int) -> CellId:
    if target_level > c.level or target_level < 0:
        raise InvalidArgument(f"cannot take level-{target_level} parent of a level-{c.level} cell")
    shift = c.level - target_level
    return CellId(c.face, target_level, c.i >> shift, c.j >> shift)


def children(c: CellId) -> list[CellId]:
    if c.level >= MAX_LEVEL:
        raise InvalidArgument("level-20 cells have no children")
    return [
        CellId(c.face, c.level + 1, 2 * c.i + a, 2 * c.j + b)
        for a in (0, 1)
        for b in (0, 1)
    ]


def haversine_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in meters, broadcasting over inputs."""
    dlat = np.asarray(lat2) - np.asarray(lat1)
    dlon = np.asarray(lon2) - np.asarray(lon1)
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine_array(a.lat, a.lon, b.lat, b.lon))


def _mean_face_line_arc() -> float:
    # Mean arc length (radians) of the lines u = c, c in [-1, 1], across a face.
    # Line u=c on the plane x=1 runs from (1, c, -1) to (1, c, 1).
    nodes, weights = np.polynomial.legendre.leggauss(64)
    arcs = 2.0 * np.arctan(1.0 / np.sqrt(1.0 + nodes**2))
    return float(np.sum(weights * arcs) / 2.0)


_FACE_EDGE_ARC_M = _mean_face_line_arc() * EARTH_RADIUS_M


def avg_edge_length(level: int) -> float:
    """Average cell edge in meters: mean face grid-line arc / 2^level."""
    _check_level(level)
    return _FACE_EDGE_ARC_M / (1 << level)


# ---------------------------------------------------------------------------
# local tangent plane


def tangent_basis(lat, lon) -> tuple[np.ndarray, np.ndarray]:
    """East and north unit vectors at the given points."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    east = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=-1)
    north = np.stack(
        [-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)], axis=-1
    )
    return east, north


def offset_xyz(lat, lon, east_m, north_m) -> np.ndarray:
    """Unit vectors displaced by (east, north) meters in the gnomonic tangent plane.

    ``lat``/``lon`` broadcast against ``east_m``/``north_m`` after a trailing
    axis is appended to the offsets' shape where needed.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    east, north = tangent_basis(lat, lon)
    base = latlon_to_xyz(lat, lon)
    e = np.asarray(east_m, dtype=np.float64)[..., None] / EARTH_RADIUS_M
    n = np.asarray(north_m, dtype=np.float64)[..., None] / EARTH_RADIUS_M
    out = base + e * east + n * north
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def offset_latlon(lat, lon, east_m, north_m):
    return xyz_to_latlon(offset_xyz(lat, lon, east_m, north_m))


def heading_vector(heading) -> tuple[np.ndarray, np.ndarray]:
    """(east, north) components of an azimuth measured clockwise from north."""
    heading = np.asarray(heading, dtype=np.float64)
    return np.sin(heading), np.cos(heading)


# ---------------------------------------------------------------------------
# neighborhoods


def k_nearest_cells(p: GeoPoint, level: int, k: int) -> list[CellId]:
    """The ``k`` cells whose centers are nearest to ``p`` (ties by packed id)."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    _check_level(level)
    home = cells_from_latlon(np.array([p.lat]), np.array([p.lon]), level)
    edge = avg_edge_length(level)
    # Probe a disk in the tangent plane (spacing well below the smallest
    # cell width, so seams and shrunken corner cells are caught), growing it
    # until every cell that could beat the k-th distance lies inside.
    reach = (math.isqrt(k - 1) + 2) * 2 * edge
    while True:
        g = np.arange(-reach, reach + edge / 4, edge / 4)
        ge, gn = np.meshgrid(g, g)
        keep = np.hypot(ge, gn) <= reach
        probes = offset_xyz(p.lat, p.lon, ge[keep], gn[keep])
        cand = np.unique(np.concatenate([home, cells_from_xyz(probes, level)]))
        clat, clon = cell_centers_latlon(cand)
        d = haversine_array(p.lat, p.lon, clat, clon)
        order = np.lexsort((cand, d))[:k]
        if len(order) == k and d[order[-1]] + 1.5 * edge <= reach:
            return [CellId.unpack(int(c)) for c in cand[order]]
        reach *= 2


def _triangle_centroids(n: int = 32) -> np.ndarray:
    """Barycentric (a, b) centroids of the n^2 congruent sub-triangles of a triangle."""
    pts = []
    for i in range(n):
        for j in range(n - i):
            pts.append(((i + 1 / 3) / n, (j + 1 / 3) / n))
            if i + j <= n - 2:
                pts.append(((i + 2 / 3) / n, (j + 2 / 3) / n))
    return np.asarray(pts)


_TRI_SAMPLES = _triangle_centroids(32)


def frustum_vertices(heading, fov, depth) -> tuple[np.ndarray, np.ndarray]:
    """Tangent-plane (east, north) offsets of the two far frustum corners."""
    heading = np.asarray(heading, dtype=np.float64)
    fov = np.asarray(fov, dtype=np.float64)
    left = heading - fov / 2
    right = heading + fov / 2
    corners_e = np.stack([np.sin(left), np.sin(right)], axis=-1) * np.asarray(depth)[..., None]
    corners_n = np.stack([np.cos(left), np.cos(right)], axis=-1) * np.asarray(depth)[..., None]
    return corners_e, corners_n


def triangle_sample_offsets(heading, fov, depth, samples: np.ndarray | None = None):
    """(east, north) offsets of the stratified sample points of each frustum triangle."""
    s = _TRI_SAMPLES if samples is None else samples
    ce, cn = frustum_vertices(heading, fov, depth)
    a, b = s[:, 0], s[:, 1]
    east = a * ce[..., 0:1] + b * ce[..., 1:2]
    north = a * cn[..., 0:1] + b * cn[..., 1:2]
    return east, north


def cells_overlapping_triangle(
    apex: GeoPoint, heading: float, fov: float, depth: float, level: int
) -> list[tuple[CellId, float]]:
    """Cells intersecting a 2D camera frustum with their overlap fraction.

    Fractions come from 1024 stratified samples (centroids of a 32-way
    subdivision of the triangle), so they sum to exactly 1.
    """
    if not 0 < fov < math.pi:
        raise InvalidArgument("fov must be in (0, pi)")
    if depth <= 0:
        raise InvalidArgument("depth must be positive")
    ids, fracs = triangle_overlap_array(
        np.array([apex.lat]), np.array([apex.lon]), np.array([heading]), np.array([fov]), depth, level
    )[0]
    return [(CellId.unpack(int(c)), float(f)) for c, f in zip(ids, fracs)]


def triangle_overlap_array(lat, lon, heading, fov, depth, level: int, chunk: int = 512):
    """Vectorized :func:`cells_overlapping_triangle`; one (ids, fractions) pair per apex.

    Cells are convex under any gnomonic projection, so a triangle whose three
    vertices share a cell lies entirely inside it and skips sampling.
    """
    _check_level(level)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    heading = np.broadcast_to(np.asarray(heading, dtype=np.float64), lat.shape)
    fov = np.broadcast_to(np.asarray(fov, dtype=np.float64), lat.shape)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), lat.shape)
    n = lat.shape[0]
    out: list = [None] * n

    ce, cn = frustum_vertices(heading, fov, depth)
    apex_cells = cells_from_latlon(lat, lon, level)
    corner_cells = cells_from_xyz(offset_xyz(lat[:, None], lon[:, None], ce, cn), level)
    inside = (corner_cells[:, 0] == apex_cells) & (corner_cells[:, 1] == apex_cells)
    one = np.ones(1)
    for k in np.flatnonzero(inside):
        out[k] = (apex_cells[k : k + 1], one)

    rest = np.flatnonzero(~inside)
    m = len(_TRI_SAMPLES)
    for start in range(0, len(rest), chunk):
        idx = rest[start : start + chunk]
        se, sn = triangle_sample_offsets(heading[idx], fov[idx], depth[idx])
        cells = cells_from_xyz(offset_xyz(lat[idx, None], lon[idx, None], se, sn), level)
        for row, k in enumerate(idx):
            ids, counts = np.unique(cells[row], return_counts=True)
            out[k] = (ids, counts / m)
    return out


def cells_in_cap(center: GeoPoint, radius_m: float, level: int) -> np.ndarray:
    """Sorted packed ids of level cells whose centers lie within a spherical cap."""
    edge = avg_edge_length(level)
    reach = radius_m + 2 * edge
    # Probe spacing well below the smallest cell edge on a linear-ST face.
    step = edge / 4
    g = np.arange(-reach, reach + step, step)
    ge, gn = np.meshgrid(g, g)
    keep = np.hypot(ge, gn) <= reach
    probes = offset_xyz(center.lat, center.lon, ge[keep], gn[keep])
    cand = np.unique(cells_from_xyz(probes, level))
    clat, clon = cell_centers_latlon(cand)
    d = haversine_array(center.lat, center.lon, clat, clon)
    return cand[d <= radius_m]


def sort_cells(cells: Sequence[CellId]) -> list[CellId]:
    return sorted(cells, key=CellId.pack)
