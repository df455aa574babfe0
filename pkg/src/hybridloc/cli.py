"""Command line entry point: ``hybridloc <command> [--config PATH] [--seed N] [--out DIR]``.

Artifacts live in the output directory under fixed names so commands can be
chained; every command also writes ``resolved.cfg`` there.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import cellgrid as cg
from . import codedb as db
from . import encoder as enc
from . import pipeline as P
from . import train as T
from . import world as W
from .config import ConfigError, apply_overrides, parse_config, resolved_text

log = logging.getLogger("hybridloc")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

DATASET = "dataset.gwds"
ENC_GROUND = "enc_ground.genc"
ENC_AERIAL = "enc_aerial.genc"
PROTOTYPES = "prototypes.gprt"
REPORT = "train_report.csv"
KAPPA = "kappa.txt"
EVAL = "eval.csv"
DB_MODES = ("ground", "aerial", "prototype", "hybrid")
AXES = ("loss", "interp", "kappa", "density", "granularity", "gap")

QUERY_HEADER = ("rank", "id", "score", "lat_deg", "lon_deg")
PCA_HEADER = ("cell_id", "lat_deg", "lon_deg", "pc1", "pc2", "pc3")
LOSS_HEADER = ("edge_ga", "edge_gp", "edge_ap", "mode", "K", "distance_m", "recall")
INTERP_HEADER = ("interp_ground", "interp_aerial", "mode", "K", "distance_m", "recall")
KAPPA_HEADER = ("kappa", "factor", "K", "distance_m", "recall")
DENSITY_HEADER = ("slice", "mode", "K", "distance_m", "recall", "count")
GRANULARITY_HEADER = ("prototype_level", "dim", "db_bytes", "mode", "K", "distance_m", "recall")
GAP_HEADER = ("subset", "database", "recall", "count")


class MissingArtifact(FileNotFoundError):
    pass


def db_name(mode: str) -> str:
    return f"db_{mode}.gcdb"


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _fmt_bool(b: bool) -> str:
    return "true" if b else "false"


# ---------------------------------------------------------------------------
# shared loading


class Context:
    def __init__(self, cfg: P.BenchmarkConfig, out: Path, args):
        self.cfg = cfg
        self.out = out
        self.args = args

    def path(self, name: str) -> Path:
        return self.out / name

    def dataset_path(self) -> Path:
        return Path(self.args.data) if getattr(self.args, "data", None) else self.path(DATASET)

    def checkpoint_dir(self) -> Path:
        return Path(self.args.checkpoint) if getattr(self.args, "checkpoint", None) else self.out

    def load_data(self) -> tuple[W.WorldModel, W.Dataset]:
        ds = W.load_dataset(_need(self.dataset_path()))
        return W.generate_world(ds.world_config), ds

    def load_model(self) -> T.TrainResult:
        ck = self.checkpoint_dir()
        g = enc.load_params(_need(ck / ENC_GROUND))
        a = enc.load_params(_need(ck / ENC_AERIAL))
        table = T.load_table(_need(ck / PROTOTYPES))
        return T.TrainResult(g, a, table, [], None)

    def cfg_for(self, ds: W.Dataset) -> P.BenchmarkConfig:
        # The dataset header is authoritative for the world and prototype level.
        return dataclasses.replace(self.cfg, world=ds.world_config, prototype_level=ds.prototype_level)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(ctx: Context) -> None:
    _, ds = P.make_data(ctx.cfg)
    W.save_dataset(ds, ctx.path(DATASET))
    print(f"wrote {ctx.path(DATASET)} ({len(ds)} records)")


def cmd_train(ctx: Context) -> None:
    world, ds = ctx.load_data()
    cfg = ctx.cfg_for(ds)
    every = ctx.out / "checkpoints" if cfg.train.checkpoint_every else None
    result = T.train(ds.train, cfg.train, world=world, checkpoint_dir=every)
    T.save_checkpoint(result.state, ctx.out)
    T.write_report(result.report, ctx.path(REPORT))
    print(f"trained {cfg.train.steps} steps, final loss {result.report[-1].loss:.6f}")


def _kappa(ctx: Context, cfg, world, ds, model) -> float:
    aerial = db.build_aerial_db(
        model.enc_aerial, world, db.aerial_cells_for(model.table, cfg.aerial_level), seed=cfg.data_seed
    )
    zc = enc.encode(model.enc_ground, P.calibration_features(ds, cfg.calibration_queries))
    return db.calibrate_kappa(zc, db.build_prototype_db(model.table), aerial)


def cmd_calibrate(ctx: Context) -> None:
    world, ds = ctx.load_data()
    kappa = _kappa(ctx, ctx.cfg_for(ds), world, ds, ctx.load_model())
    ctx.path(KAPPA).write_text(repr(kappa) + "\n")
    print(f"kappa {kappa!r}")


def _stored_kappa(ctx: Context) -> float | None:
    p = ctx.path(KAPPA)
    return float(p.read_text().strip()) if p.exists() else None


def cmd_build_db(ctx: Context) -> None:
    world, ds = ctx.load_data()
    cfg = ctx.cfg_for(ds)
    model = ctx.load_model()
    modes = DB_MODES if ctx.args.mode == "all" else (ctx.args.mode,)
    built: dict[str, db.CellCodeDB] = {}
    for mode in modes:
        if mode == "ground":
            tr = ds.train
            built[mode] = db.build_ground_db(model.enc_ground, tr.ground, tr.lat, tr.lon)
        elif mode == "prototype":
            built[mode] = db.build_prototype_db(model.table)
        else:
            if "aerial" not in built:
                built["aerial"] = db.build_aerial_db(
                    model.enc_aerial, world, db.aerial_cells_for(model.table, cfg.aerial_level), seed=cfg.data_seed
                )
            if mode == "hybrid":
                kappa = _stored_kappa(ctx)
                if kappa is None:
                    kappa = _kappa(ctx, cfg, world, ds, model)
                    ctx.path(KAPPA).write_text(repr(kappa) + "\n")
                built[mode] = db.build_hybrid_db(model.table, built["aerial"], kappa, fallback=ctx.args.fallback)
    for mode in modes:
        db.save_db(built[mode], ctx.path(db_name(mode)))
        print(f"wrote {ctx.path(db_name(mode))} ({len(built[mode])} entries)")


def cmd_query(ctx: Context) -> None:
    a = ctx.args
    database = db.load_db(_need(Path(a.db) if a.db else ctx.path(db_name("hybrid"))))
    if a.embedding:
        z = np.loadtxt(_need(Path(a.embedding)), delimiter=",", ndmin=1)
        z = enc.l2_normalize(z)
    else:
        if a.lat is None or a.lon is None or a.heading is None:
            raise ConfigError("query needs --lat, --lon and --heading, or --embedding")
        world, _ = ctx.load_data()
        g = enc.load_params(_need(ctx.checkpoint_dir() / ENC_GROUND))
        rng = np.random.default_rng([ctx.cfg.train.seed, 0x51525259])
        feats = W.ground_features(
            world, np.radians([a.lat]), np.radians([a.lon]), np.radians([a.heading]), rng
        )
        z = enc.encode(g, feats)[0]
    res = db.search_topk(database, z, a.k)
    rows = [
        (r + 1, int(res.ids[r]), float(res.scores[r]), math.degrees(res.anchor_lat[r]), math.degrees(res.anchor_lon[r]))
        for r in range(len(res))
    ]
    _write_csv(ctx.path("query.csv"), QUERY_HEADER, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(QUERY_HEADER)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def cmd_eval(ctx: Context) -> None:
    world, ds = ctx.load_data()
    cfg = ctx.cfg_for(ds)
    g = enc.load_params(_need(ctx.checkpoint_dir() / ENC_GROUND))
    dbs = {m: db.load_db(ctx.path(db_name(m))) for m in DB_MODES if ctx.path(db_name(m)).exists()}
    if not dbs:
        raise MissingArtifact(f"missing artifact: no {db_name('<mode>')} files in {ctx.out}")
    test = ds.test
    zq = enc.encode(g, test.ground)
    report = db.eval_suite(dbs, zq, test.lat, test.lon, cfg.Ks, cfg.distances, P.query_density(ds, test))
    report.write_csv(ctx.path(EVAL))
    for mode in dbs:
        print(f"{mode:9s} top-1 recall@{cfg.recall_distance:.0f}m = {report.recall(mode, 1, cfg.recall_distance):.4f}")


def _recall_rows(report: db.EvalReport, modes):
    for mode, K, d, s, r, _ in report.rows:
        if s == "all" and mode in modes:
            yield mode, K, d, r


def _train_arm(cfg: P.BenchmarkConfig, data) -> P.BenchmarkRun:
    log.info("training arm %s", cfg.train.loss)
    return P.run_benchmark(cfg, data)


def cmd_ablate(ctx: Context) -> None:
    axes = AXES if ctx.args.axes == "all" else tuple(ctx.args.axes.split(","))
    bad = [x for x in axes if x not in AXES]
    if bad:
        raise ConfigError(f"unknown ablation axis {bad[0]!r}; choose from {','.join(AXES)}")
    cfg = ctx.cfg
    data = ctx.load_data() if ctx.dataset_path().exists() else P.make_data(cfg)
    if ctx.dataset_path().exists():
        cfg = ctx.cfg_for(data[1])

    base_run = None

    def base() -> P.BenchmarkRun:
        nonlocal base_run
        if base_run is None:
            ck = ctx.checkpoint_dir()
            if (ck / ENC_GROUND).exists():
                model = ctx.load_model()
                dbs, report, zq = P.evaluate(cfg, data[0], data[1], model, _stored_kappa(ctx))
                base_run = P.BenchmarkRun(cfg, data[0], data[1], model, dbs, report, zq)
            else:
                base_run = _train_arm(cfg, data)
        return base_run

    if "loss" in axes:
        rows = []
        for arm in P.EDGE_ARMS:
            run = _train_arm(P.edge_arm_config(cfg, arm), data)
            for mode, K, d, r in _recall_rows(run.report, ("aerial", "prototype", "hybrid")):
                rows.append((*map(_fmt_bool, arm), mode, K, d, r))
        _write_csv(ctx.path("ablate_loss.csv"), LOSS_HEADER, rows)
    if "interp" in axes:
        rows = []
        for gm in ("nearest", "frustum_weights", "frustum_all_cells"):
            for am in ("nearest", "bilinear"):
                run = _train_arm(cfg.with_loss(interp_mode_ground=gm, interp_mode_aerial=am), data)
                for mode, K, d, r in _recall_rows(run.report, ("hybrid",)):
                    rows.append((gm, am, mode, K, d, r))
        _write_csv(ctx.path("ablate_interp.csv"), INTERP_HEADER, rows)
    if "kappa" in axes:
        run = base()
        rows = []
        for K in cfg.Ks:
            for f, (kappa, r) in zip(sorted(cfg.kappa_factors), P.kappa_sweep(run, K=K)):
                rows.append((kappa, f, K, cfg.recall_distance, r))
        rows.sort(key=lambda r: (r[2], r[0]))
        _write_csv(ctx.path("ablate_kappa.csv"), KAPPA_HEADER, rows)
    if "density" in axes:
        run = base()
        rows = [
            (s, mode, K, d, r, c)
            for s in ("low", "mid", "high")
            for mode, K, d, s2, r, c in run.report.rows
            if s2 == s
        ]
        _write_csv(ctx.path("ablate_density.csv"), DENSITY_HEADER, rows)
    if "gap" in axes:
        g = P.gap_experiment(base())
        rows = [
            ("covered", "full", g.covered_full, g.n_covered),
            ("covered", "gap_fallback", g.covered_gap, g.n_covered),
            ("gap", "full", g.gap_full, g.n_gap),
            ("gap", "gap_fallback", g.gap_gap, g.n_gap),
        ]
        _write_csv(ctx.path("ablate_gap.csv"), GAP_HEADER, rows)
    if "granularity" in axes:
        rows = []
        # Prototype payload (cells x D) held fixed across arms.
        for dl, dim in ((-1, 4 * cfg.train.embed_dim), (0, cfg.train.embed_dim), (1, cfg.train.embed_dim // 4)):
            lp = cfg.prototype_level + dl
            arm = dataclasses.replace(
                cfg,
                prototype_level=lp,
                aerial_level=lp + (cfg.aerial_level - cfg.prototype_level),
                train=dataclasses.replace(cfg.train, embed_dim=dim),
            )
            run = _train_arm(arm, data if dl == 0 else None)
            size = run.dbs.prototype.nbytes()
            for mode, K, d, r in _recall_rows(run.report, ("prototype", "hybrid")):
                rows.append((lp, dim, size, mode, K, d, r))
        _write_csv(ctx.path("ablate_granularity.csv"), GRANULARITY_HEADER, rows)
    print(f"wrote ablation CSVs for {','.join(axes)} to {ctx.out}")


def cmd_export_pca(ctx: Context) -> None:
    table = T.load_table(_need(ctx.checkpoint_dir() / PROTOTYPES))
    scores, _, _ = P.pca_components(table.vectors)
    lat, lon = cg.cell_centers_latlon(table.ids)
    rows = [
        (int(table.ids[k]), math.degrees(lat[k]), math.degrees(lon[k]), *map(float, scores[k]))
        for k in range(len(table))
    ]
    _write_csv(ctx.path("pca.csv"), PCA_HEADER, rows)
    print(f"wrote {ctx.path('pca.csv')} ({len(rows)} rows)")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "build-db": cmd_build_db,
    "query": cmd_query,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-pca": cmd_export_pca,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override world, data and training seed")
    common.add_argument("--out", default=".", help="artifact directory (default: current)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--data", help="dataset file (default: OUT/dataset.gwds)")
    common.add_argument("--checkpoint", help="checkpoint directory (default: OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hybridloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "build-db":
            p.add_argument("--mode", choices=(*DB_MODES, "all"), default="all")
            p.add_argument("--fallback", action="store_true", help="aerial-only codes where prototypes are missing")
        elif name == "query":
            p.add_argument("--db", help="database file (default: OUT/db_hybrid.gcdb)")
            p.add_argument("--lat", type=float, help="degrees")
            p.add_argument("--lon", type=float, help="degrees")
            p.add_argument("--heading", type=float, help="degrees clockwise from north")
            p.add_argument("--embedding", help="comma-separated query embedding file")
            p.add_argument("-k", "--k", type=int, default=5)
        elif name == "ablate":
            p.add_argument("--axes", default="all", help=f"comma list from {','.join(AXES)} or 'all'")
    return parser


def load_config(args) -> P.BenchmarkConfig:
    cfg = P.BenchmarkConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"missing artifact: {path}")
        cfg = parse_config(path.read_text(), source=str(path))
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(resolved_text(cfg))
        COMMANDS[args.command](Context(cfg, out, args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, W.FormatError, enc.FormatError, T.FormatError, db.FormatError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except (T.NumericError, enc.DegenerateInput, db.CalibrationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
