"""Deterministic synthetic world standing in for street-level and aerial imagery.

The world is a latent appearance field over the unit sphere built from random
Fourier features. The first half of the latent coordinates uses long
wavelengths (regional character), the second half short wavelengths (local
detail). Ground views read the field along the camera heading, aerial tiles
read its mean over the tile footprint; fixed random matrices turn both into
observation feature vectors.

All metric constants of the observation model (frustum depths, tile side,
pairing offset, place spacing) are multiplied by ``geometry_scale`` so a
coarser cell grid can keep the same proportions.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cellgrid as cg
from .cellgrid import GeoPoint

FRUSTUM_DEPTHS_M = (10.0, 25.0, 45.0)
FRUSTUM_DEPTH_M = 50.0
TILE_SIDE_M = 256 * 0.6
MAX_PAIR_OFFSET_M = 80.0
MIN_PLACE_SPACING_M = 40.0
VIEWS_PER_PLACE = 4
FOV_RANGE = (math.radians(45.0), math.radians(75.0))


class CapacityError(RuntimeError):
    """The requested place count cannot be reached under the spacing constraint."""


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    region_center: GeoPoint = GeoPoint.from_degrees(47.0, 8.0)
    region_radius: float = 60_000.0
    latent_dim: int = 32
    n_low_freq: int = 16
    n_high_freq: int = 64
    ground_feature_dim: int = 96
    aerial_feature_dim: int = 80
    noise_sigma: float = 0.1
    seed: int = 0
    low_wavelength_m: tuple[float, float] = (20_000.0, 80_000.0)
    high_wavelength_m: tuple[float, float] = (1_000.0, 4_000.0)
    # Scales the high-frequency latent half in aerial observations relative to the regional half.
    aerial_local_gain: float = 1.0
    geometry_scale: float = 1.0

    def __post_init__(self):
        if min(self.latent_dim, self.ground_feature_dim, self.aerial_feature_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2 (regional + local halves)")
        if self.region_radius <= 0:
            raise ValueError("region_radius must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.geometry_scale <= 0:
            raise ValueError("geometry_scale must be positive")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["region_center"] = [self.region_center.lat, self.region_center.lon]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorldConfig":
        d = json.loads(text)
        d["region_center"] = GeoPoint(*d["region_center"])
        d["low_wavelength_m"] = tuple(d["low_wavelength_m"])
        d["high_wavelength_m"] = tuple(d["high_wavelength_m"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class WorldModel:
    config: WorldConfig
    low_freq: np.ndarray  # (n_low, 3), radians per unit-sphere length
    low_phase: np.ndarray
    low_mix: np.ndarray  # (m_low, n_low)
    high_freq: np.ndarray
    high_phase: np.ndarray
    high_mix: np.ndarray
    W_G: np.ndarray  # (ground_dim, m + 2)
    W_A: np.ndarray  # (aerial_dim, m)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def max_frequency(self) -> float:
        return float(np.linalg.norm(self.high_freq, axis=1).max())


def _bank(rng, n, wavelengths, rows):
    lo, hi = wavelengths
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    wavelength = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    freq = direction * (2 * np.pi * cg.EARTH_RADIUS_M / wavelength)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=n)
    mix = rng.uniform(-1.0, 1.0, size=(rows, n)) * math.sqrt(6.0 / n)
    return freq, phase, mix


def generate_world(config: WorldConfig) -> WorldModel:
    rng = np.random.default_rng([config.seed, 0x574F524C44])
    m = config.latent_dim
    m_low = m // 2
    low = _bank(rng, config.n_low_freq, config.low_wavelength_m, m_low)
    high = _bank(rng, config.n_high_freq, config.high_wavelength_m, m - m_low)
    W_G = rng.normal(size=(config.ground_feature_dim, m + 2)) / math.sqrt(m + 2)
    W_A = rng.normal(size=(config.aerial_feature_dim, m)) / math.sqrt(m)
    W_A[:, m_low:] *= config.aerial_local_gain
    return WorldModel(config, *low, *high, W_G, W_A)


def latent_field_xyz(world: WorldModel, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    low = np.cos(xyz @ world.low_freq.T + world.low_phase) @ world.low_mix.T
    high = np.cos(xyz @ world.high_freq.T + world.high_phase) @ world.high_mix.T
    return np.concatenate([low, high], axis=-1)


def latent_field(world: WorldModel, p: GeoPoint) -> np.ndarray:
    """Latent appearance vector (length ``latent_dim``) at a point."""
    return latent_field_xyz(world, p.to_xyz())


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class GroundObservation:
    features: np.ndarray
    location: GeoPoint
    heading: float
    fov: float
    epoch: int = 0


@dataclass(frozen=True)
class AerialObservation:
    features: np.ndarray
    tile_center: GeoPoint
    rotation: float
    offset_m: float = 0.0


def ground_features(world: WorldModel, lat, lon, heading, rng) -> np.ndarray:
    """Ground-view features for arrays of camera poses."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    depths = np.asarray(FRUSTUM_DEPTHS_M) * world.config.geometry_scale
    de, dn = cg.heading_vector(heading)
    pts = cg.offset_xyz(lat[..., None], lon[..., None], de[..., None] * depths, dn[..., None] * depths)
    latent = latent_field_xyz(world, pts).mean(axis=-2)
    x = np.concatenate([latent, np.cos(heading)[..., None], np.sin(heading)[..., None]], axis=-1)
    out = x @ world.W_G.T
    noise = rng.normal(size=out.shape)
    return out + world.config.noise_sigma * noise


def _tile_grid() -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(4) + 0.5) / 4 - 0.5
    gx, gy = np.meshgrid(c, c)
    return gx.ravel(), gy.ravel()


_TILE_GX, _TILE_GY = _tile_grid()


def aerial_features(world: WorldModel, lat, lon, rotation, rng) -> np.ndarray:
    """Aerial-tile features: mean latent over a rotated 4x4 grid on the footprint."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    side = TILE_SIDE_M * world.config.geometry_scale
    c, s = np.cos(rotation)[..., None], np.sin(rotation)[..., None]
    # Tile x axis points east when rotation = 0; rotation is clockwise.
    east = side * (c * _TILE_GX + s * _TILE_GY)
    north = side * (-s * _TILE_GX + c * _TILE_GY)
    pts = cg.offset_xyz(lat[..., None], lon[..., None], east, north)
    latent = latent_field_xyz(world, pts).mean(axis=-2)
    out = latent @ world.W_A.T
    noise = rng.normal(size=out.shape)
    return out + world.config.noise_sigma * noise


def sample_ground_view(world, location: GeoPoint, heading: float, fov: float, rng, epoch: int = 0):
    if not FOV_RANGE[0] - 1e-12 <= fov <= FOV_RANGE[1] + 1e-12:
        raise ValueError(f"fov {fov} outside [45deg, 75deg]")
    feats = ground_features(world, np.array([location.lat]), np.array([location.lon]), np.array([heading]), rng)[0]
    return GroundObservation(feats, location, float(heading), float(fov), epoch)


def sample_aerial_tile(world, tile_center: GeoPoint, rotation: float, rng, offset_m: float = 0.0):
    feats = aerial_features(world, np.array([tile_center.lat]), np.array([tile_center.lon]), np.array([rotation]), rng)[0]
    return AerialObservation(feats, tile_center, float(rotation), float(offset_m))


def sample_pairings(world: WorldModel, lat, lon, rng):
    """Random aerial pairing for ground locations: offset within the max radius, uniform rotation.

    Returns (tile_lat, tile_lon, rotation, offset_m, features).
    """
    lat = np.asarray(lat, dtype=np.float64)
    n = lat.shape[0]
    rmax = MAX_PAIR_OFFSET_M * world.config.geometry_scale
    r = rmax * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0, 2 * np.pi, size=n)
    rot = rng.uniform(0, 2 * np.pi, size=n)
    tlat, tlon = cg.offset_latlon(lat, lon, r * np.sin(ang), r * np.cos(ang))
    feats = aerial_features(world, tlat, tlon, rot, rng)
    offset = cg.haversine_array(lat, lon, tlat, tlon)
    return tlat, tlon, rot, offset, feats


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DensitySpec:
    """Place intensity: a uniform floor plus Gaussian bumps (lat, lon, sigma_m, weight)."""

    background: float
    bumps: tuple[tuple[float, float, float, float], ...]

    def intensity(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        out = np.zeros(np.broadcast(lat, lon).shape)
        for blat, blon, sigma, w in self.bumps:
            d = cg.haversine_array(lat, lon, blat, blon)
            out += w * np.exp(-0.5 * (d / sigma) ** 2) / (2 * np.pi * sigma**2)
        return out


def default_density(config: WorldConfig, n_bumps: int = 12, background: float = 0.2, seed: int = 0) -> DensitySpec:
    """Random urban bumps inside the region; ``background`` is the rural mass fraction."""
    rng = np.random.default_rng([seed, config.seed, 0x44454E53])
    c = config.region_center
    R = config.region_radius
    r = 0.8 * R * np.sqrt(rng.uniform(size=n_bumps))
    ang = rng.uniform(0, 2 * np.pi, size=n_bumps)
    blat, blon = cg.offset_latlon(c.lat, c.lon, r * np.sin(ang), r * np.cos(ang))
    sigma = R * np.exp(rng.uniform(np.log(0.03), np.log(0.12), size=n_bumps))
    w = rng.uniform(0.5, 1.5, size=n_bumps)
    w = (1 - background) * w / w.sum()
    bumps = tuple((float(a), float(b), float(s), float(x)) for a, b, s, x in zip(blat, blon, sigma, w))
    return DensitySpec(background=background, bumps=bumps)


@dataclass(eq=False)
class Dataset:
    """Struct-of-arrays ground/aerial pairs; one row per ground view."""

    world_config: WorldConfig
    prototype_level: int
    place: np.ndarray  # uint32
    epoch: np.ndarray  # uint8, 0 train / 1 test
    cell: np.ndarray  # uint64 packed id at prototype_level
    lat: np.ndarray
    lon: np.ndarray
    heading: np.ndarray  # float32
    fov: np.ndarray  # float32
    tile_lat: np.ndarray
    tile_lon: np.ndarray
    rotation: np.ndarray  # float32
    offset_m: np.ndarray  # float32
    ground: np.ndarray  # float32 (n, ground_dim)
    aerial: np.ndarray  # float32 (n, aerial_dim)

    def __len__(self) -> int:
        return len(self.place)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name, value in kw.items():
            if isinstance(value, np.ndarray):
                kw[name] = value[idx]
        return Dataset(**kw)

    @property
    def train(self) -> "Dataset":
        return self.subset(self.epoch == 0)

    @property
    def test(self) -> "Dataset":
        return self.subset(self.epoch == 1)

    def density_index(self) -> dict[int, int]:
        """Training ground views per prototype-level cell."""
        cells, counts = np.unique(self.cell[self.epoch == 0], return_counts=True)
        return {int(c): int(n) for c, n in zip(cells, counts)}


def _sample_candidates(config: WorldConfig, density: DensitySpec, n: int, rng):
    c = config.region_center
    R = config.region_radius
    weights = np.array([density.background] + [b[3] for b in density.bumps])
    weights = weights / weights.sum()
    comp = rng.choice(len(weights), size=n, p=weights)
    r = R * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0, 2 * np.pi, size=n)
    east, north = r * np.sin(ang), r * np.cos(ang)
    lat, lon = cg.offset_latlon(c.lat, c.lon, east, north)
    gauss = rng.normal(size=(n, 2))
    for k, (blat, blon, sigma, _) in enumerate(density.bumps, start=1):
        sel = comp == k
        if np.any(sel):
            lat[sel], lon[sel] = cg.offset_latlon(blat, blon, sigma * gauss[sel, 0], sigma * gauss[sel, 1])
    inside = cg.haversine_array(c.lat, c.lon, lat, lon) <= R
    return lat[inside], lon[inside]


def _accept_spaced(lat, lon, target: int, spacing: float, accepted: list, buckets: dict, center: GeoPoint):
    # Sequential pass in candidate order; buckets hash planar coords at `spacing`.
    east_axis, north_axis = cg.tangent_basis(center.lat, center.lon)
    xyz = cg.latlon_to_xyz(lat, lon)
    px = xyz @ east_axis * cg.EARTH_RADIUS_M
    py = xyz @ north_axis * cg.EARTH_RADIUS_M
    bx = np.floor(px / spacing).astype(np.int64)
    by = np.floor(py / spacing).astype(np.int64)
    for k in range(len(lat)):
        if len(accepted) >= target:
            break
        key = (int(bx[k]), int(by[k]))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for q in buckets.get((key[0] + dx, key[1] + dy), ()):
                    qa, qo = accepted[q]
                    if cg.haversine_array(lat[k], lon[k], qa, qo) < spacing:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            buckets.setdefault(key, []).append(len(accepted))
            accepted.append((float(lat[k]), float(lon[k])))


def sample_places(config: WorldConfig, density: DensitySpec, count: int, seed: int, max_candidates: int | None = None):
    """Spacing-constrained places drawn proportionally to ``density``."""
    spacing = MIN_PLACE_SPACING_M * config.geometry_scale
    budget = max_candidates if max_candidates is not None else 20 * count + 10_000
    accepted: list = []
    buckets: dict = {}
    block = 8192
    drawn = 0
    b = 0
    while len(accepted) < count and drawn < budget:
        rng = np.random.default_rng([seed, config.seed, 0x504C4143, b])
        n = min(block, budget - drawn)
        lat, lon = _sample_candidates(config, density, n, rng)
        _accept_spaced(lat, lon, count, spacing, accepted, buckets, config.region_center)
        drawn += n
        b += 1
    if len(accepted) < count:
        raise CapacityError(
            f"placed {len(accepted)} of {count} places after {drawn} candidates "
            f"at {spacing:.1f} m spacing"
        )
    arr = np.asarray(accepted)
    return arr[:, 0], arr[:, 1]


def generate_dataset(
    world: WorldModel,
    density: DensitySpec,
    counts: tuple[int, int],
    seed: int,
    prototype_level: int,
    max_candidates: int | None = None,
) -> Dataset:
    """Train/test places (``counts`` = (n_train, n_test)) with four views each."""
    n_train, n_test = counts
    n_places = n_train + n_test
    plat, plon = sample_places(world.config, density, n_places, seed, max_candidates)
    rng = np.random.default_rng([seed, world.config.seed, 0x56494557])
    test_places = rng.permutation(n_places)[:n_test]
    place_epoch = np.zeros(n_places, dtype=np.uint8)
    place_epoch[test_places] = 1

    v = VIEWS_PER_PLACE
    place = np.repeat(np.arange(n_places, dtype=np.uint32), v)
    lat = np.repeat(plat, v)
    lon = np.repeat(plon, v)
    h0 = rng.uniform(0, 2 * np.pi, size=n_places)
    heading = np.mod(np.repeat(h0, v) + np.tile(np.arange(v) * (2 * np.pi / v), n_places), 2 * np.pi)
    fov = rng.uniform(*FOV_RANGE, size=n_places * v)
    ground = ground_features(world, lat, lon, heading, rng)
    tlat, tlon, rot, offset, aerial = sample_pairings(world, lat, lon, rng)
    return Dataset(
        world_config=world.config,
        prototype_level=prototype_level,
        place=place,
        epoch=np.repeat(place_epoch, v),
        cell=cg.cells_from_latlon(lat, lon, prototype_level),
        lat=lat,
        lon=lon,
        heading=heading.astype(np.float32),
        fov=fov.astype(np.float32),
        tile_lat=tlat,
        tile_lon=tlon,
        rotation=rot.astype(np.float32),
        offset_m=offset.astype(np.float32),
        ground=ground.astype(np.float32),
        aerial=aerial.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# GWDS file format

GWDS_MAGIC = b"GWDS"
GWDS_VERSION = 1
_GWDS_HEADER = struct.Struct("<4sHBBQIII")


def _gwds_record_dtype(ground_dim: int, aerial_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("place", "<u4"),
            ("epoch", "u1"),
            ("cell", "<u8"),
            ("lat", "<f8"),
            ("lon", "<f8"),
            ("heading", "<f4"),
            ("fov", "<f4"),
            ("tile_lat", "<f8"),
            ("tile_lon", "<f8"),
            ("rotation", "<f4"),
            ("offset_m", "<f4"),
            ("ground", "<f4", (ground_dim,)),
            ("aerial", "<f4", (aerial_dim,)),
        ]
    )


def dataset_to_bytes(ds: Dataset) -> bytes:
    gdim = ds.ground.shape[1]
    adim = ds.aerial.shape[1]
    cfg = ds.world_config.to_json().encode("utf-8")
    header = _GWDS_HEADER.pack(GWDS_MAGIC, GWDS_VERSION, ds.prototype_level, 0, len(ds), gdim, adim, len(cfg))
    rec = np.zeros(len(ds), dtype=_gwds_record_dtype(gdim, adim))
    for name in rec.dtype.names:
        rec[name] = getattr(ds, name)
    return header + cfg + rec.tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _GWDS_HEADER.size:
        raise FormatError(f"truncated GWDS header at byte {len(buf)}")
    magic, version, level, _, count, gdim, adim, cfg_len = _GWDS_HEADER.unpack_from(buf, 0)
    if magic != GWDS_MAGIC:
        raise FormatError(f"bad GWDS magic {magic!r} at byte 0")
    if version != GWDS_VERSION:
        raise FormatError(f"unsupported GWDS version {version} at byte 4")
    off = _GWDS_HEADER.size
    if len(buf) < off + cfg_len:
        raise FormatError(f"truncated GWDS config at byte {len(buf)}")
    config = WorldConfig.from_json(buf[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    dtype = _gwds_record_dtype(gdim, adim)
    need = off + count * dtype.itemsize
    if len(buf) != need:
        raise FormatError(f"GWDS payload size mismatch: expected {need} bytes, got {len(buf)} (records start at byte {off})")
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    kw = {name: np.array(rec[name]) for name in dtype.names}
    kw["lat"] = kw["lat"].astype(np.float64)
    return Dataset(world_config=config, prototype_level=level, **kw)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
