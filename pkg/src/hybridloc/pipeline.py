"""End-to-end benchmark: data, training, database construction and evaluation.

Shared by the command line and the acceptance tests so both exercise the
same code path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import cellgrid as cg
from . import codedb as db
from . import encoder as enc
from . import loss as L
from . import train as T
from . import world as W


@dataclass(frozen=True)
class BenchmarkConfig:
    # Footprints scaled to the level-13 cell size; noise and aerial gain tuned
    # so that neither source alone dominates.
    world: W.WorldConfig = field(
        default_factory=lambda: W.WorldConfig(geometry_scale=8.0, noise_sigma=1.0, aerial_local_gain=3.0)
    )
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    prototype_level: int = 12
    aerial_level: int = 13
    n_train_places: int = 40_000
    n_test_places: int = 2_000
    data_seed: int = 0
    density_bumps: int = 12
    density_background: float = 0.2
    Ks: tuple[int, ...] = (1, 5, 100)
    # Recall radii as multiples of the aerial cell edge.
    distance_factors: tuple[float, ...] = (1.43, 7.15)
    kappa_factors: tuple[float, ...] = (0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 2.8, 4.0)
    calibration_queries: int = 1_000
    gap_fraction: float = 0.2

    def __post_init__(self):
        if self.aerial_level < self.prototype_level:
            raise ValueError("aerial_level must be >= prototype_level")
        if not 0.0 <= self.gap_fraction < 1.0:
            raise ValueError("gap_fraction must be in [0, 1)")

    @property
    def distances(self) -> tuple[float, ...]:
        edge = cg.avg_edge_length(self.aerial_level)
        return tuple(f * edge for f in self.distance_factors)

    @property
    def recall_distance(self) -> float:
        return self.distances[0]

    def with_seed(self, seed: int) -> "BenchmarkConfig":
        """Same benchmark with world, data and training all reseeded."""
        return dataclasses.replace(
            self,
            world=dataclasses.replace(self.world, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            data_seed=seed,
        )

    def with_loss(self, **changes) -> "BenchmarkConfig":
        loss = dataclasses.replace(self.train.loss, **changes)
        return dataclasses.replace(self, train=dataclasses.replace(self.train, loss=loss))


def make_data(cfg: BenchmarkConfig) -> tuple[W.WorldModel, W.Dataset]:
    world = W.generate_world(cfg.world)
    density = W.default_density(cfg.world, cfg.density_bumps, cfg.density_background, seed=cfg.data_seed)
    ds = W.generate_dataset(
        world, density, (cfg.n_train_places, cfg.n_test_places), cfg.data_seed, cfg.prototype_level
    )
    return world, ds


@dataclass
class Databases:
    aerial: db.CellCodeDB
    prototype: db.CellCodeDB
    hybrid: db.CellCodeDB
    kappa: float

    def as_dict(self) -> dict[str, db.CellCodeDB]:
        return {"aerial": self.aerial, "prototype": self.prototype, "hybrid": self.hybrid}


def calibration_features(ds: W.Dataset, count: int) -> np.ndarray:
    """Evenly strided training views used to estimate kappa."""
    train = ds.train
    idx = np.linspace(0, len(train) - 1, min(count, len(train))).astype(np.int64)
    return train.ground[idx]


def build_databases(
    cfg: BenchmarkConfig, world: W.WorldModel, ds: W.Dataset, model: T.TrainResult, kappa: float | None = None
) -> Databases:
    aerial = db.build_aerial_db(
        model.enc_aerial, world, db.aerial_cells_for(model.table, cfg.aerial_level), seed=cfg.data_seed
    )
    proto = db.build_prototype_db(model.table)
    if kappa is None and not (cfg.train.loss.edge_gp or cfg.train.loss.edge_ap):
        kappa = 0.0  # prototypes never trained
    if kappa is None:
        zc = enc.encode(model.enc_ground, calibration_features(ds, cfg.calibration_queries))
        kappa = db.calibrate_kappa(zc, proto, aerial)
    return Databases(aerial, proto, db.build_hybrid_db(model.table, aerial, kappa), kappa)


def query_density(ds: W.Dataset, queries: W.Dataset) -> np.ndarray:
    counts = ds.density_index()
    return np.array([counts.get(int(c), 0) for c in queries.cell], dtype=np.int64)


@dataclass
class BenchmarkRun:
    config: BenchmarkConfig
    world: W.WorldModel
    dataset: W.Dataset
    model: T.TrainResult
    dbs: Databases
    report: db.EvalReport
    queries: np.ndarray  # test-set ground embeddings

    def top1(self, mode: str, slice_: str = "all") -> float:
        return self.report.recall(mode, 1, self.config.recall_distance, slice_)


def evaluate(cfg: BenchmarkConfig, world, ds, model: T.TrainResult, kappa: float | None = None):
    dbs = build_databases(cfg, world, ds, model, kappa)
    test = ds.test
    zq = enc.encode(model.enc_ground, test.ground)
    report = db.eval_suite(
        dbs.as_dict(), zq, test.lat, test.lon, cfg.Ks, cfg.distances, query_density(ds, test)
    )
    return dbs, report, zq


def run_benchmark(cfg: BenchmarkConfig, data=None) -> BenchmarkRun:
    """Generate (or reuse) data, train, build databases and evaluate."""
    world, ds = make_data(cfg) if data is None else data
    model = T.train(ds.train, cfg.train, world=world)
    dbs, report, zq = evaluate(cfg, world, ds, model)
    return BenchmarkRun(cfg, world, ds, model, dbs, report, zq)


# ---------------------------------------------------------------------------
# experiments on a finished run


def kappa_sweep(run: BenchmarkRun, factors=None, K: int = 1) -> list[tuple[float, float]]:
    """(kappa, top-K recall) for multiples of the calibrated kappa, ascending."""
    factors = run.config.kappa_factors if factors is None else factors
    test = run.dataset.test
    out = []
    for f in sorted(factors):
        kappa = run.dbs.kappa * f
        hyb = db.build_hybrid_db(run.model.table, run.dbs.aerial, kappa)
        ranked = db.search_batch(hyb, run.queries, K)
        r = db.recall_at(
            hyb.anchor_lat[ranked], hyb.anchor_lon[ranked], test.lat, test.lon, K, run.config.recall_distance
        )
        out.append((kappa, r))
    return out


@dataclass(frozen=True)
class GapResult:
    dropped: int
    covered_full: float
    covered_gap: float
    gap_full: float
    gap_gap: float
    n_covered: int
    n_gap: int


def gap_experiment(run: BenchmarkRun, fraction: float | None = None, seed: int = 0) -> GapResult:
    """Delete a fraction of prototypes, fall back to aerial-only codes in the gaps."""
    fraction = run.config.gap_fraction if fraction is None else fraction
    table = run.model.table
    rng = np.random.default_rng([seed, 0x474150])
    n_drop = int(round(fraction * len(table)))
    dropped = np.sort(table.ids[rng.permutation(len(table))[:n_drop]])
    reduced = table.drop(dropped)
    hyb_gap = db.build_hybrid_db(reduced, run.dbs.aerial, run.dbs.kappa, fallback=True)

    test = run.dataset.test
    in_gap = np.isin(test.cell, dropped)
    covered = np.isin(test.cell, reduced.ids)
    dist = run.config.recall_distance

    def top1(database, sel):
        if not np.any(sel):
            return 0.0
        ranked = db.search_batch(database, run.queries[sel], 1)
        return db.recall_at(
            database.anchor_lat[ranked], database.anchor_lon[ranked], test.lat[sel], test.lon[sel], 1, dist
        )

    return GapResult(
        dropped=n_drop,
        covered_full=top1(run.dbs.hybrid, covered),
        covered_gap=top1(hyb_gap, covered),
        gap_full=top1(run.dbs.hybrid, in_gap),
        gap_gap=top1(hyb_gap, in_gap),
        n_covered=int(covered.sum()),
        n_gap=int(in_gap.sum()),
    )


def tercile_gaps(run: BenchmarkRun) -> dict[str, float]:
    """Hybrid minus prototype-only top-1 recall per density tercile."""
    return {s: run.top1("hybrid", s) - run.top1("prototype", s) for s in ("low", "mid", "high")}


# Loss-edge arms with at least one edge, as (G-A, G-P, A-P).
EDGE_ARMS: tuple[tuple[bool, bool, bool], ...] = (
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def edge_arm_config(cfg: BenchmarkConfig, arm: tuple[bool, bool, bool]) -> BenchmarkConfig:
    ga, gp, ap = arm
    return cfg.with_loss(edge_ga=ga, edge_gp=gp, edge_ap=ap)


def pca_components(vectors: np.ndarray):
    """Top-3 principal directions of the rows with a fixed sign convention.

    Returns (scores (n, 3), components (3, D), explained variances (3,)).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) < 3:
        raise ValueError(f"need >= 3 prototypes for PCA, got {len(vectors)}")
    centered = vectors - vectors.mean(axis=0)
    cov = centered.T @ centered / (len(vectors) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:3]
    comps = evecs[:, order].T
    big = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(3), big])[:, None]
    return centered @ comps.T, comps, evals[order]
