"""Joint training of the ground encoder, aerial encoder and cell prototypes."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import cellgrid as cg
from . import encoder as enc
from . import loss as L
from .world import (
    FRUSTUM_DEPTH_M,
    Dataset,
    WorldModel,
    generate_world,
    sample_pairings,
)

log = logging.getLogger(__name__)

REPORT_HEADER = ("step", "loss", "pos", "neg", "lr_enc", "lr_proto")


class NumericError(FloatingPointError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# prototype table


@dataclass(eq=False)
class PrototypeTable:
    level: int
    ids: np.ndarray  # sorted unique packed ids, uint64
    vectors: np.ndarray  # (N, D), unit rows

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if np.any(self.ids[1:] <= self.ids[:-1]):
            raise ValueError("prototype ids must be strictly increasing")
        self._index = {int(c): k for k, c in enumerate(self.ids)}
        self._xyz = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def index_of(self) -> dict[int, int]:
        return self._index

    @property
    def centers_xyz(self) -> np.ndarray:
        if self._xyz is None:
            self._xyz = cg.cell_centers_xyz(self.ids)
        return self._xyz

    def copy(self) -> "PrototypeTable":
        return PrototypeTable(self.level, self.ids.copy(), self.vectors.copy())

    def drop(self, ids) -> "PrototypeTable":
        keep = ~np.isin(self.ids, np.asarray(ids, dtype=np.uint64))
        return PrototypeTable(self.level, self.ids[keep], self.vectors[keep])


def init_prototypes(cells, level: int, dim: int, seed: int) -> PrototypeTable:
    ids = np.unique(np.asarray(cells, dtype=np.uint64))
    rng = np.random.default_rng([seed, 0x50524F54])
    v = rng.normal(size=(len(ids), dim))
    return PrototypeTable(level, ids, v / np.linalg.norm(v, axis=1, keepdims=True))


# GPRT: magic, u16 version, u8 level, u8 reserved, u32 dim, u64 count,
# then count records of (packed id u64, f32 x dim), little-endian.
GPRT_MAGIC = b"GPRT"
GPRT_VERSION = 1
_GPRT_HEADER = struct.Struct("<4sHBBIQ")


def table_to_bytes(table: PrototypeTable) -> bytes:
    rec = np.zeros(len(table), dtype=[("id", "<u8"), ("v", "<f4", (table.dim,))])
    rec["id"] = table.ids
    rec["v"] = table.vectors
    return _GPRT_HEADER.pack(GPRT_MAGIC, GPRT_VERSION, table.level, 0, table.dim, len(table)) + rec.tobytes()


def table_from_bytes(buf: bytes) -> PrototypeTable:
    if len(buf) < _GPRT_HEADER.size:
        raise FormatError(f"truncated GPRT header at byte {len(buf)}")
    magic, version, level, _, dim, count = _GPRT_HEADER.unpack_from(buf)
    if magic != GPRT_MAGIC:
        raise FormatError(f"bad GPRT magic {magic!r} at byte 0")
    if version != GPRT_VERSION:
        raise FormatError(f"unsupported GPRT version {version} at byte 4")
    dtype = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    need = _GPRT_HEADER.size + count * dtype.itemsize
    if len(buf) != need:
        raise FormatError(f"GPRT payload size mismatch: expected {need} bytes, got {len(buf)}")
    rec = np.frombuffer(buf, dtype=dtype, offset=_GPRT_HEADER.size)
    return PrototypeTable(level, np.array(rec["id"]), rec["v"].astype(np.float64))


def save_table(table: PrototypeTable, path) -> None:
    Path(path).write_bytes(table_to_bytes(table))


def load_table(path) -> PrototypeTable:
    return table_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# configuration, schedule, optimizer


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    embed_dim: int = 64
    hidden: int | None = None
    lr_encoders: float = 0.003
    lr_prototypes: float = 0.01
    lr_floor: float = 1e-6
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shard_count: int = 1
    checkpoint_every: int = 0
    loss: L.LossConfig = field(default_factory=L.LossConfig)


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``floor`` at step ``total_steps - 1``."""
    if lr0 <= floor:
        return lr0
    if total_steps <= 1:
        return lr0
    t = min(step, total_steps - 1) / (total_steps - 1)
    return floor + (lr0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, a: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(a), np.zeros_like(a))


def _adam(p, g, st: AdamState, t: int, lr: float, cfg: TrainConfig, rows=None):
    """In-place Adam update; with ``rows`` only those rows (and their moments) change."""
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    if rows is None:
        st.m *= b1
        st.m += (1 - b1) * g
        st.v *= b2
        st.v += (1 - b2) * g * g
        if lr:
            p -= lr * (st.m / c1) / (np.sqrt(st.v / c2) + cfg.adam_eps)
        return
    if len(rows) == len(p):
        _adam(p, g, st, t, lr, cfg)
        return
    gr = g[rows]
    st.m[rows] = b1 * st.m[rows] + (1 - b1) * gr
    st.v[rows] = b2 * st.v[rows] + (1 - b2) * gr * gr
    if lr:
        p[rows] -= lr * (st.m[rows] / c1) / (np.sqrt(st.v[rows] / c2) + cfg.adam_eps)


@dataclass(eq=False)
class TrainState:
    enc_ground: enc.EncoderParams
    enc_aerial: enc.EncoderParams
    table: PrototypeTable
    step: int = 0
    opt: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.opt:
            for tag, p in (("g", self.enc_ground), ("a", self.enc_aerial)):
                for name, arr in p.arrays().items():
                    self.opt[f"{tag}.{name}"] = AdamState.like(arr)
            self.opt["proto"] = AdamState.like(self.table.vectors)

    def copy(self) -> "TrainState":
        return TrainState(
            self.enc_ground.copy(),
            self.enc_aerial.copy(),
            self.table.copy(),
            self.step,
            {k: AdamState(s.m.copy(), s.v.copy()) for k, s in self.opt.items()},
        )


def init_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    tr = dataset.train
    if len(tr) == 0:
        raise ValueError("dataset has no training records")
    D = config.embed_dim
    g = enc.init_params(tr.ground.shape[1], D, config.hidden, seed=config.seed * 2 + 1)
    a = enc.init_params(tr.aerial.shape[1], D, config.hidden, seed=config.seed * 2 + 2)
    table = init_prototypes(tr.cell, dataset.prototype_level, D, config.seed)
    return TrainState(g, a, table)


# ---------------------------------------------------------------------------
# targets


def _restrict(rows, ids, w, fallback, sorted_ids):
    """Drop cells without prototypes, renormalize; rows left empty use ``fallback``."""
    keep = L.lookup(sorted_ids, ids)[1] & (w > 0)
    rows, ids, w = rows[keep], ids[keep], w[keep]
    n = len(fallback)
    tot = np.bincount(rows, weights=w, minlength=n)
    empty = np.flatnonzero(tot <= 0)
    if len(empty):
        rows = np.concatenate([rows, empty])
        ids = np.concatenate([ids, fallback[empty]])
        w = np.concatenate([w, np.ones(len(empty))])
        tot[empty] = 1.0
    return rows, ids, w / tot[rows]


def ground_targets(ds: Dataset, table: PrototypeTable, mode: str, depth: float) -> sparse.csr_matrix:
    """(n_records, N) positive weights for ground views."""
    n = len(ds)
    if mode == "nearest":
        rows, ids, w = np.arange(n), ds.cell, np.ones(n)
    else:
        overlaps = cg.triangle_overlap_array(
            ds.lat, ds.lon, ds.heading.astype(np.float64), ds.fov.astype(np.float64), depth, table.level
        )
        rows = np.concatenate([np.full(len(c), k) for k, (c, _) in enumerate(overlaps)])
        ids = np.concatenate([c for c, _ in overlaps])
        w = np.concatenate([f for _, f in overlaps])
        if mode == "frustum_all_cells":
            w = np.ones_like(w)
    rows, ids, w = _restrict(rows, ids, w, ds.cell, table.ids)
    return L.weights_to_csr(rows, ids, w, n, table.ids)


def aerial_targets(tile_lat, tile_lon, own_cell, table: PrototypeTable, mode: str) -> sparse.csr_matrix:
    n = len(tile_lat)
    if mode == "nearest":
        rows, ids, w = np.arange(n), cg.cells_from_latlon(tile_lat, tile_lon, table.level), np.ones(n)
    else:
        ids4, w4 = L.bilinear_weights_array(tile_lat, tile_lon, table.level)
        rows, ids, w = np.repeat(np.arange(n), 4), ids4.ravel(), w4.ravel()
    rows, ids, w = _restrict(rows, ids, w, own_cell, table.ids)
    return L.weights_to_csr(rows, ids, w, n, table.ids)


@dataclass(eq=False)
class Batch:
    ground: np.ndarray
    aerial: np.ndarray
    targets: L.BatchTargets


def make_batch(ds: Dataset, idx, aerial_feats, g_csr, a_csr, table: PrototypeTable, cfg: L.LossConfig) -> Batch:
    mask = L.negative_mask(ds.lat[idx], ds.lon[idx], table.centers_xyz, cfg.exclusion_radius(table.level))
    targets = L.BatchTargets(
        ground=g_csr[idx],
        aerial=a_csr[idx],
        neg_mask=mask,
        ground_multi=cfg.interp_mode_ground == "frustum_all_cells",
    )
    return Batch(ds.ground[idx].astype(np.float64), np.asarray(aerial_feats[idx], dtype=np.float64), targets)


# ---------------------------------------------------------------------------
# steps


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    pos: float
    neg: float
    lr_enc: float
    lr_proto: float
    grad_norm_enc: float
    grad_norm_proto: float
    touched: int


def compute_loss(state: TrainState, batch: Batch, cfg: TrainConfig):
    """Forward + backward; returns (LossOutput, ground grads, aerial grads)."""
    zq, cq = enc.forward(state.enc_ground, batch.ground)
    za, ca = enc.forward(state.enc_aerial, batch.aerial)
    shards = L.shard_ranges(len(state.table), cfg.shard_count)
    out = L.ms_loss(zq, za, state.table.vectors, batch.targets, cfg.loss, shards)
    gg = enc.backward(state.enc_ground, cq, out.grad_zQ)
    ga = enc.backward(state.enc_aerial, ca, out.grad_zA)
    return out, gg, ga


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> StepMetrics:
    """One Adam step on encoders and touched prototypes, in place."""
    out, gg, ga = compute_loss(state, batch, cfg)
    if not math.isfinite(out.loss):
        raise NumericError(f"non-finite loss {out.loss} at step {state.step}")
    t = state.step + 1
    lr_e = cosine_lr(state.step, cfg.steps, cfg.lr_encoders, cfg.lr_floor)
    lr_p = cosine_lr(state.step, cfg.steps, cfg.lr_prototypes, cfg.lr_floor)
    for tag, params, grads in (("g", state.enc_ground, gg), ("a", state.enc_aerial, ga)):
        for name, g in grads.arrays().items():
            _adam(getattr(params, name), g, state.opt[f"{tag}.{name}"], t, lr_e, cfg)
    touched = out.touched
    P = state.table.vectors
    _adam(P, out.grad_P, state.opt["proto"], t, lr_p, cfg, rows=touched)
    if lr_p:
        if len(touched) == len(P):
            P /= np.linalg.norm(P, axis=1, keepdims=True)
        else:
            P[touched] /= np.linalg.norm(P[touched], axis=1, keepdims=True)
    state.step = t
    gn_e = math.sqrt(sum(float(np.sum(g * g)) for b in (gg, ga) for g in b.arrays().values()))
    return StepMetrics(
        step=t - 1,
        loss=out.loss,
        pos=float(np.sum(out.pos)),
        neg=float(np.sum(out.neg)),
        lr_enc=lr_e,
        lr_proto=lr_p,
        grad_norm_enc=gn_e,
        grad_norm_proto=float(np.linalg.norm(out.grad_P)),
        touched=len(touched),
    )


# ---------------------------------------------------------------------------
# loop


@dataclass(eq=False)
class TrainResult:
    enc_ground: enc.EncoderParams
    enc_aerial: enc.EncoderParams
    table: PrototypeTable
    report: list[StepMetrics]
    state: TrainState


class EpochFeed:
    """Seeded per-epoch shuffling with aerial pairings resampled every epoch after the first."""

    def __init__(self, ds: Dataset, world: WorldModel, table: PrototypeTable, cfg: TrainConfig):
        self.ds = ds
        self.world = world
        self.table = table
        self.cfg = cfg
        depth = FRUSTUM_DEPTH_M * world.config.geometry_scale
        self.g_csr = ground_targets(ds, table, cfg.loss.interp_mode_ground, depth)
        self.epoch = -1
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def _start_epoch(self):
        self.epoch += 1
        ds, cfg = self.ds, self.cfg
        rng = np.random.default_rng([cfg.seed, self.epoch, 0x53485546])
        self.order = rng.permutation(len(ds))
        self.pos = 0
        if self.epoch == 0:
            tlat, tlon, feats = ds.tile_lat, ds.tile_lon, ds.aerial
        else:
            prng = np.random.default_rng([cfg.seed, self.epoch, 0x50414952])
            tlat, tlon, _, _, feats = sample_pairings(self.world, ds.lat, ds.lon, prng)
        self.aerial = np.asarray(feats, dtype=np.float64)
        self.a_csr = aerial_targets(tlat, tlon, ds.cell, self.table, cfg.loss.interp_mode_aerial)

    def next_batch(self) -> Batch:
        bs = min(self.cfg.batch_size, len(self.ds))
        if self.epoch < 0 or self.pos + bs > len(self.order):
            self._start_epoch()
        idx = np.sort(self.order[self.pos : self.pos + bs])
        self.pos += bs
        return make_batch(self.ds, idx, self.aerial, self.g_csr, self.a_csr, self.table, self.cfg.loss)


def write_report(rows: list[StepMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.step, repr(r.loss), repr(r.pos), repr(r.neg), repr(r.lr_enc), repr(r.lr_proto)])


def save_checkpoint(state: TrainState, out_dir, suffix: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc.save_params(state.enc_ground, out / f"enc_ground{suffix}.genc")
    enc.save_params(state.enc_aerial, out / f"enc_aerial{suffix}.genc")
    save_table(state.table, out / f"prototypes{suffix}.gprt")


def train(
    dataset: Dataset,
    config: TrainConfig,
    world: WorldModel | None = None,
    checkpoint_dir=None,
    state: TrainState | None = None,
) -> TrainResult:
    """Train on the epoch-0 records of ``dataset``; pure function of (dataset, config)."""
    world = world if world is not None else generate_world(dataset.world_config)
    tr = dataset.train
    state = state if state is not None else init_state(dataset, config)
    feed = EpochFeed(tr, world, state.table, config)
    report: list[StepMetrics] = []
    for k in range(config.steps):
        batch = feed.next_batch()
        report.append(train_step(state, batch, config))
        if checkpoint_dir and config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir, suffix=f"_{k + 1:06d}")
        if (k + 1) % 500 == 0:
            log.info("step %d loss %.4f", k + 1, report[-1].loss)
    return TrainResult(state.enc_ground, state.enc_aerial, state.table, report, state)


def validation_batch(dataset: Dataset, table: PrototypeTable, cfg: TrainConfig, size: int = 512, depth=None) -> Batch:
    """Fixed batch of held-out views whose cells have prototypes."""
    te = dataset.test
    te = te.subset(np.isin(te.cell, table.ids))
    idx = np.arange(min(size, len(te)))
    depth = FRUSTUM_DEPTH_M * te.world_config.geometry_scale if depth is None else depth
    sub = te.subset(idx)
    g_csr = ground_targets(sub, table, cfg.loss.interp_mode_ground, depth)
    a_csr = aerial_targets(sub.tile_lat, sub.tile_lon, sub.cell, table, cfg.loss.interp_mode_aerial)
    return make_batch(sub, np.arange(len(sub)), sub.aerial, g_csr, a_csr, table, cfg.loss)
