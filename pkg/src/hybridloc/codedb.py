"""Retrieval databases (ground / aerial / prototype / hybrid), search and recall."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import cellgrid as cg
from . import encoder as enc
from .loss import CoverageError, lookup
from .train import PrototypeTable
from .world import WorldModel, aerial_features

MODES = ("ground", "aerial", "prototype", "hybrid")
_MODE_CODE = {m: k for k, m in enumerate(MODES)}
EVAL_HEADER = ("mode", "K", "distance_m", "slice", "recall", "count")
SLICES = ("all", "low", "mid", "high")


class CalibrationError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(eq=False)
class CellCodeDB:
    mode: str
    level: int
    kappa: float
    ids: np.ndarray  # uint64, ascending
    vectors: np.ndarray  # (n, D)
    anchor_lat: np.ndarray
    anchor_lon: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if np.any(self.ids[1:] <= self.ids[:-1]):
            raise ValueError("database ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def nbytes(self) -> int:
        return _GCDB_HEADER.size + len(self) * (24 + 4 * self.dim)


def _sorted_db(mode, level, kappa, ids, vectors, lat, lon) -> CellCodeDB:
    ids = np.asarray(ids, dtype=np.uint64)
    order = np.argsort(ids, kind="stable")
    return CellCodeDB(mode, level, float(kappa), ids[order], np.asarray(vectors)[order], np.asarray(lat)[order], np.asarray(lon)[order])


def build_ground_db(enc_ground: enc.EncoderParams, features, lat, lon, record_ids=None) -> CellCodeDB:
    """One entry per database image, anchored at the image location."""
    ids = np.arange(len(lat), dtype=np.uint64) if record_ids is None else record_ids
    return _sorted_db("ground", 0, 0.0, ids, enc.encode(enc_ground, features), lat, lon)


def build_aerial_db(enc_aerial: enc.EncoderParams, world: WorldModel, cells, seed: int = 0) -> CellCodeDB:
    """One north-aligned tile per cell, centered on the cell."""
    cells = np.unique(np.asarray(cells, dtype=np.uint64))
    if len(cells) == 0:
        raise ValueError("no cells to index")
    level = int(cg.unpack_array(cells[:1])[1][0])
    lat, lon = cg.cell_centers_latlon(cells)
    rng = np.random.default_rng([seed, world.config.seed, 0x41444221])
    feats = aerial_features(world, lat, lon, np.zeros(len(cells)), rng)
    return CellCodeDB("aerial", level, 0.0, cells, enc.encode(enc_aerial, feats), lat, lon)


def build_prototype_db(table: PrototypeTable) -> CellCodeDB:
    lat, lon = cg.cell_centers_latlon(table.ids)
    return CellCodeDB("prototype", table.level, 0.0, table.ids.copy(), table.vectors.copy(), lat, lon)


def build_hybrid_db(table: PrototypeTable, aerial_db: CellCodeDB, kappa: float, fallback: bool = False) -> CellCodeDB:
    """Cell codes ``kappa * prototype(parent(i)) + aerial(i)`` at the aerial level.

    With ``fallback`` cells lacking a parent prototype keep their aerial-only
    vector; otherwise they raise :class:`CoverageError`.
    """
    if aerial_db.level < table.level:
        raise ValueError("aerial level must not be coarser than the prototype level")
    parents = cg.parent_array(aerial_db.ids, table.level)
    pos, found = lookup(table.ids, parents)
    if not fallback and not np.all(found):
        missing = cg.CellId.unpack(int(parents[np.flatnonzero(~found)[0]]))
        raise CoverageError(f"no prototype for parent cell {missing}")
    vectors = aerial_db.vectors.copy()
    vectors[found] += kappa * table.vectors[pos[found]]
    return CellCodeDB(
        "hybrid", aerial_db.level, float(kappa), aerial_db.ids.copy(), vectors,
        aerial_db.anchor_lat.copy(), aerial_db.anchor_lon.copy(),
    )


def build_db(mode: str, **inputs) -> CellCodeDB:
    """Dispatch to the mode-specific builder."""
    if mode == "ground":
        return build_ground_db(inputs["enc_ground"], inputs["features"], inputs["lat"], inputs["lon"], inputs.get("record_ids"))
    if mode == "aerial":
        return build_aerial_db(inputs["enc_aerial"], inputs["world"], inputs["cells"], inputs.get("seed", 0))
    if mode == "prototype":
        return build_prototype_db(inputs["table"])
    if mode == "hybrid":
        return build_hybrid_db(inputs["table"], inputs["aerial_db"], inputs["kappa"], inputs.get("fallback", False))
    raise ValueError(f"unknown mode {mode!r}")


def aerial_cells_for(table: PrototypeTable, aerial_level: int) -> np.ndarray:
    """All aerial-level descendants of the prototype cells."""
    face, level, i, j = cg.unpack_array(table.ids)
    k = aerial_level - table.level
    if k < 0:
        raise ValueError("aerial level must not be coarser than the prototype level")
    di, dj = np.meshgrid(np.arange(1 << k), np.arange(1 << k), indexing="ij")
    ci = (i[:, None] << k) + di.ravel()
    cj = (j[:, None] << k) + dj.ravel()
    return np.unique(cg.pack_array(np.repeat(face, di.size), aerial_level, ci.ravel(), cj.ravel()))


# ---------------------------------------------------------------------------
# calibration and search


def top1_similarity(queries: np.ndarray, db: CellCodeDB, chunk: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(queries), chunk):
        out.append(np.max(queries[s : s + chunk] @ db.vectors.T, axis=1))
    return np.concatenate(out)


def calibrate_kappa(queries: np.ndarray, prototype_db: CellCodeDB, aerial_db: CellCodeDB) -> float:
    """Ratio of mean top-1 aerial similarity to mean top-1 prototype similarity."""
    queries = np.atleast_2d(queries)
    if len(queries) < 100:
        raise CalibrationError(f"need >= 100 calibration queries, got {len(queries)}")
    sa = float(np.mean(top1_similarity(queries, aerial_db)))
    sp = float(np.mean(top1_similarity(queries, prototype_db)))
    if sa <= 0 or sp <= 0:
        raise CalibrationError(f"non-positive mean top-1 similarity (aerial {sa:.4f}, prototype {sp:.4f})")
    return sa / sp


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    anchor_lat: np.ndarray
    anchor_lon: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _rank_rows(scores: np.ndarray, K: int) -> np.ndarray:
    """Positions of the top-K per row, descending score, ties by ascending position."""
    n = scores.shape[1]
    K = min(K, n)
    if K == n:
        return np.lexsort((np.broadcast_to(np.arange(n), scores.shape), -scores), axis=1)
    out = np.empty((len(scores), K), dtype=np.int64)
    part = np.argpartition(-scores, K - 1, axis=1)[:, :K]
    kth = np.min(np.take_along_axis(scores, part, axis=1), axis=1)
    for r in range(len(scores)):
        cand = np.flatnonzero(scores[r] >= kth[r])
        order = np.lexsort((cand, -scores[r, cand]))
        out[r] = cand[order[:K]]
    return out


def search_batch(db: CellCodeDB, queries: np.ndarray, K: int, chunk: int = 1024) -> np.ndarray:
    """Exact top-K entry positions for each query row (ids ascend with position)."""
    if len(db) == 0:
        raise ValueError("cannot search an empty database")
    if K < 1:
        raise ValueError("K must be >= 1")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return np.concatenate(
        [_rank_rows(queries[s : s + chunk] @ db.vectors.T, K) for s in range(0, len(queries), chunk)]
    )


def search_topk(db: CellCodeDB, query: np.ndarray, K: int) -> SearchResult:
    pos = search_batch(db, np.asarray(query)[None, :], K)[0]
    scores = db.vectors[pos] @ np.asarray(query, dtype=np.float64)
    return SearchResult(db.ids[pos], scores, db.anchor_lat[pos], db.anchor_lon[pos])


def hits_within(db: CellCodeDB, ranked: np.ndarray, gt_lat, gt_lon, distance_m: float) -> np.ndarray:
    """Boolean (n, K) matrix: ranked anchor within ``distance_m`` of ground truth."""
    d = cg.haversine_array(
        np.asarray(gt_lat)[:, None], np.asarray(gt_lon)[:, None], db.anchor_lat[ranked], db.anchor_lon[ranked]
    )
    return d <= distance_m


def recall_at(anchor_lat: np.ndarray, anchor_lon: np.ndarray, gt_lat, gt_lon, K: int, distance_m: float) -> float:
    """Fraction of queries with any of their first K anchors within ``distance_m``.

    ``anchor_lat``/``anchor_lon`` are (n_queries, >= K) ranked anchors.
    """
    if len(anchor_lat) == 0:
        return 0.0
    d = cg.haversine_array(
        np.asarray(gt_lat)[:, None], np.asarray(gt_lon)[:, None], anchor_lat[:, :K], anchor_lon[:, :K]
    )
    return float(np.mean(np.any(d <= distance_m, axis=1)))


# ---------------------------------------------------------------------------
# evaluation


def density_terciles(counts: np.ndarray) -> np.ndarray:
    """Split queries into equal thirds by their cell's training count: 0 low, 1 mid, 2 high."""
    counts = np.asarray(counts)
    order = np.lexsort((np.arange(len(counts)), counts))
    out = np.empty(len(counts), dtype=np.int64)
    out[order] = (np.arange(len(counts)) * 3) // max(len(counts), 1)
    return out


@dataclass
class EvalReport:
    rows: list[tuple[str, int, float, str, float, int]] = field(default_factory=list)

    def recall(self, mode: str, K: int, distance_m: float, slice_: str = "all") -> float:
        for m, k, d, s, r, _ in self.rows:
            if m == mode and k == K and d == distance_m and s == slice_:
                return r
        raise KeyError((mode, K, distance_m, slice_))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            for m, k, d, s, r, c in self.rows:
                w.writerow([m, k, repr(float(d)), s, repr(float(r)), c])


def eval_suite(
    dbs: Mapping[str, CellCodeDB],
    queries: np.ndarray,
    gt_lat,
    gt_lon,
    Ks: Sequence[int],
    distances: Sequence[float],
    density_counts=None,
) -> EvalReport:
    """Recall grid per database, overall and per density tercile."""
    gt_lat = np.asarray(gt_lat)
    gt_lon = np.asarray(gt_lon)
    slices = {"all": np.ones(len(gt_lat), dtype=bool)}
    if density_counts is not None:
        t = density_terciles(density_counts)
        slices.update({"low": t == 0, "mid": t == 1, "high": t == 2})
    kmax = max(Ks)
    report = EvalReport()
    for mode, db in dbs.items():
        ranked = search_batch(db, queries, kmax)
        for dist in distances:
            hits = hits_within(db, ranked, gt_lat, gt_lon, dist)
            first = np.cumsum(hits, axis=1) > 0
            for K in Ks:
                col = first[:, min(K, first.shape[1]) - 1]
                for name, sel in slices.items():
                    n = int(sel.sum())
                    r = float(col[sel].mean()) if n else 0.0
                    report.rows.append((mode, int(K), float(dist), name, r, n))
    return report


# ---------------------------------------------------------------------------
# GCDB format: magic, u16 version, u8 mode, u8 level, u32 dim, u64 count,
# f64 kappa, then count x (u64 id, f64 lat, f64 lon, f32 x dim); little-endian.

GCDB_MAGIC = b"GCDB"
GCDB_VERSION = 1
_GCDB_HEADER = struct.Struct("<4sHBBIQd")


def _gcdb_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("lat", "<f8"), ("lon", "<f8"), ("v", "<f4", (dim,))])


def gcdb_to_bytes(db: CellCodeDB) -> bytes:
    rec = np.zeros(len(db), dtype=_gcdb_dtype(db.dim))
    rec["id"] = db.ids
    rec["lat"] = db.anchor_lat
    rec["lon"] = db.anchor_lon
    rec["v"] = db.vectors
    header = _GCDB_HEADER.pack(GCDB_MAGIC, GCDB_VERSION, _MODE_CODE[db.mode], db.level, db.dim, len(db), db.kappa)
    return header + rec.tobytes()


def gcdb_from_bytes(buf: bytes) -> CellCodeDB:
    if len(buf) < _GCDB_HEADER.size:
        raise FormatError(f"truncated GCDB header: {len(buf)} bytes, need {_GCDB_HEADER.size} (offset {len(buf)})")
    magic, version, mode, level, dim, count, kappa = _GCDB_HEADER.unpack_from(buf)
    if magic != GCDB_MAGIC:
        raise FormatError(f"bad GCDB magic {magic!r} at byte offset 0")
    if version != GCDB_VERSION:
        raise FormatError(f"unsupported GCDB version {version} at byte offset 4")
    if mode >= len(MODES):
        raise FormatError(f"unknown GCDB mode {mode} at byte offset 6")
    dtype = _gcdb_dtype(dim)
    need = _GCDB_HEADER.size + count * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated GCDB payload at byte offset {len(buf)} (expected {need} bytes)")
    if len(buf) > need:
        raise FormatError(f"trailing bytes after GCDB payload at byte offset {need}")
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=_GCDB_HEADER.size)
    return CellCodeDB(
        MODES[mode], level, kappa, np.array(rec["id"]), rec["v"].astype(np.float64),
        np.array(rec["lat"], dtype=np.float64), np.array(rec["lon"], dtype=np.float64),
    )


def save_db(db: CellCodeDB, path) -> None:
    Path(path).write_bytes(gcdb_to_bytes(db))


def load_db(path) -> CellCodeDB:
    return gcdb_from_bytes(Path(path).read_bytes())
