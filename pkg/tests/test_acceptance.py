"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The benchmark criteria share one set of training runs on the committed
reference configuration (``bench/reference.cfg``). Those runs take roughly
thirty minutes on one core; they are computed once per session.
"""

from __future__ import annotations

import dataclasses
import gc
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

from hybridloc import cellgrid as cg
from hybridloc import codedb as C
from hybridloc import encoder as enc
from hybridloc import loss as L
from hybridloc import pipeline as P
from hybridloc import train as T
from hybridloc import world as W
from hybridloc.cellgrid import CellId, GeoPoint
from hybridloc.config import parse_config

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = parse_config((ROOT / "bench" / "reference.cfg").read_text(), source="bench/reference.cfg")
GOLDEN = Path(__file__).parent / "golden"
SEEDS = (0, 1, 2)
MODES = ("aerial", "prototype", "hybrid")
SLICES = ("all", "low", "mid", "high")
ALL_EDGES = (True, True, True)
SINGLE_EDGE_REMOVED = ((False, True, True), (True, False, True), (True, True, False))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# shared benchmark runs


@dataclasses.dataclass
class RunSummary:
    top1: dict[tuple[str, str], float]
    kappa: float
    seconds: float
    sweep: list[tuple[float, float]] | None = None
    gap: P.GapResult | None = None


def _summarize(run: P.BenchmarkRun, seconds: float, extras: bool) -> RunSummary:
    s = RunSummary({(m, sl): run.top1(m, sl) for m in MODES for sl in SLICES}, run.dbs.kappa, seconds)
    if extras:
        s.sweep = P.kappa_sweep(run, factors=(0.5, 1.0, 2.0))
        s.gap = P.gap_experiment(run)
    return s


@pytest.fixture(scope="session")
def bench():
    """Every benchmark arm the criteria need, keyed by (seed, arm)."""
    out: dict[tuple[int, str], RunSummary] = {}
    data_seconds: dict[int, float] = {}
    for seed in SEEDS:
        cfg = REFERENCE.with_seed(seed)
        t0 = time.perf_counter()
        data = P.make_data(cfg)
        data_seconds[seed] = time.perf_counter() - t0
        arms = {"default": cfg, "nearest": cfg.with_loss(interp_mode_ground="nearest", interp_mode_aerial="nearest")}
        if seed == 0:
            for arm in SINGLE_EDGE_REMOVED:
                arms["edges" + "".join("1" if e else "0" for e in arm)] = P.edge_arm_config(cfg, arm)
        for name, arm_cfg in arms.items():
            t0 = time.perf_counter()
            run = P.run_benchmark(arm_cfg, data)
            out[seed, name] = _summarize(run, time.perf_counter() - t0, extras=(name == "default" and seed == 0))
            del run
            gc.collect()
        del data
        gc.collect()
    for seed in SEEDS:
        out[seed, "default"].seconds += data_seconds[seed]
    return out


# ---------------------------------------------------------------------------
# 1-4, 10, 12: benchmark ordering criteria


def test_c01_hybrid_beats_both_sources(bench, criterion):
    h = np.mean([bench[s, "default"].top1["hybrid", "all"] for s in SEEDS])
    p = np.mean([bench[s, "default"].top1["prototype", "all"] for s in SEEDS])
    a = np.mean([bench[s, "default"].top1["aerial", "all"] for s in SEEDS])
    minutes = sum(bench[s, "default"].seconds for s in SEEDS) / 60
    ok = h - p >= 0.03 and h - a >= 0.03 and minutes <= 15.0
    assert criterion(
        1, "hybrid >= prototype+3 and aerial+3 (top-1, mean of 3 seeds)", ok,
        f"hybrid {h:.4f} prototype {p:.4f} aerial {a:.4f}; {minutes:.1f} min",
    )


def test_c02_kappa_calibration_shape(bench, criterion):
    s = bench[0, "default"]
    (k_half, r_half), (k_hat, r_hat), (k_two, r_two) = s.sweep
    assert math.isclose(k_hat, s.kappa)
    assert REFERENCE.aerial_level > REFERENCE.prototype_level
    ok = r_hat >= r_half and r_hat >= r_two - 0.01 and s.kappa > 1.0
    assert criterion(
        2, "recall(k) >= recall(k/2), >= recall(2k)-0.01, k > 1", ok,
        f"k {s.kappa:.4f}; recall k/2 {r_half:.4f} k {r_hat:.4f} 2k {r_two:.4f}",
    )


def test_c03_density_complementarity(bench, criterion):
    def gap(sl):
        return np.mean([bench[s, "default"].top1["hybrid", sl] - bench[s, "default"].top1["prototype", sl] for s in SEEDS])

    low, high = gap("low"), gap("high")
    assert criterion(3, "hybrid-prototype gap: low tercile > high tercile", low > high, f"low {low:.4f} high {high:.4f}")


def test_c04_loss_edge_ablation(bench, criterion):
    full = bench[0, "default"].top1["hybrid", "all"]
    removed = {k[1]: v.top1["hybrid", "all"] for k, v in bench.items() if k[0] == 0 and k[1].startswith("edges")}
    assert len(removed) == 3
    ok = all(full >= r - 0.005 for r in removed.values())
    detail = f"all edges {full:.4f}; " + " ".join(f"{k[5:]} {v:.4f}" for k, v in sorted(removed.items()))
    assert criterion(4, "all edges >= each single-edge-removed arm - 0.005", ok, detail)


def test_c10_interpolation_ablation(bench, criterion):
    interp = np.mean([bench[s, "default"].top1["hybrid", "all"] for s in SEEDS])
    nearest = np.mean([bench[s, "nearest"].top1["hybrid", "all"] for s in SEEDS])
    assert criterion(
        10, "frustum+bilinear >= nearest+nearest (hybrid top-1, 3 seeds)", interp >= nearest,
        f"frustum+bilinear {interp:.4f} nearest+nearest {nearest:.4f}",
    )


def test_c12_gap_fallback(bench, criterion):
    g = bench[0, "default"].gap
    loss = g.covered_full - g.covered_gap
    assert REFERENCE.gap_fraction == 0.2
    ok = loss <= 0.005 and g.gap_gap > 0.0
    assert criterion(
        12, "20% prototypes dropped: covered loss <= 0.5 pt, gap recall > 0", ok,
        f"covered {g.covered_full:.4f} -> {g.covered_gap:.4f}; gap cells {g.gap_gap:.4f} (n={g.n_gap})",
    )


# ---------------------------------------------------------------------------
# 5: shard equivalence


def test_c05_shard_equivalence(criterion):
    t0 = time.perf_counter()
    cfg = dataclasses.replace(REFERENCE, train=dataclasses.replace(REFERENCE.train, steps=100))
    world, ds = P.make_data(cfg)
    test = ds.test
    losses, decisions = {}, {}
    for d in (1, 2, 4, 8):
        model = T.train(ds, dataclasses.replace(cfg.train, shard_count=d), world=world)
        losses[d] = np.array([r.loss for r in model.report])
        dbs = P.build_databases(cfg, world, ds, model)
        z = enc.encode(model.enc_ground, test.ground)
        decisions[d] = dbs.hybrid.ids[C.search_batch(dbs.hybrid, z, 1)[:, 0]]
    seconds = time.perf_counter() - t0
    rel = max(float(np.max(np.abs(losses[d] - losses[1]) / np.abs(losses[1]))) for d in (2, 4, 8))
    agree = min(float(np.mean(decisions[d] == decisions[1])) for d in (2, 4, 8))
    ok = rel <= 1e-6 and agree >= 0.999 and seconds <= 180
    assert criterion(
        5, "shards 1/2/4/8: step loss within 1e-6, top-1 decisions >= 99.9% equal", ok,
        f"max rel {rel:.2e}; agreement {agree:.4%}; {seconds:.0f} s",
    )


# ---------------------------------------------------------------------------
# 6: gradient checks


def _directional(f, grads, params, rng, h=1e-6):
    """Relative error between analytic and central-difference slope along a random direction."""
    dirs = [rng.normal(size=p.shape) for p in params]
    analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, dirs))
    saved = [p.copy() for p in params]
    for p, s, v in zip(params, saved, dirs):
        p[...] = s + h * v
    fp = f()
    for p, s, v in zip(params, saved, dirs):
        p[...] = s - h * v
    fm = f()
    for p, s in zip(params, saved):
        p[...] = s
    numeric = (fp - fm) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _ms_problem(rng, n=6, N=10, D=5):
    def weights():
        m = np.zeros((n, N))
        for r in range(n):
            k = rng.integers(1, 4)
            m[r, rng.choice(N, size=k, replace=False)] = rng.uniform(0.1, 1.0, size=k)
        return sparse.csr_matrix(m / m.sum(axis=1, keepdims=True))

    return (
        unit(rng.normal(size=(n, D))), unit(rng.normal(size=(n, D))), unit(rng.normal(size=(N, D))),
        weights(), weights(), rng.uniform(size=(n, N)) < 0.6,
    )


def _split_loss(zQ, zA, P_live, P_frozen, Wg, Wa, mask, cfg):
    """Single-interpolation loss with the aerial-side prototypes taken from a frozen copy."""
    a, b, lam = cfg.alpha, cfg.beta, cfg.lam
    G = L.gamma(np.sum(zQ * zA, 1), a, lam) + L.gamma(np.sum(zQ * (Wg @ P_live), 1), a, lam)
    G = G + L.gamma(np.sum(zA * (Wa @ P_frozen), 1), a, lam)
    E = L.delta(zQ @ zA.T, b, lam)
    np.fill_diagonal(E, 0.0)
    S = E.sum(1) + E.sum(0) + np.sum(L.delta(zQ @ P_live.T, b, lam) * mask, 1)
    S = S + np.sum(L.delta(zA @ P_frozen.T, b, lam) * mask, 1)
    return float(np.sum(np.log1p(G) / a + np.log1p(S) / b))


def _probe_encoder(rng):
    p = enc.EncoderParams(
        rng.normal(size=(5, 7)) * 0.8, rng.normal(size=5) * 0.3, rng.normal(size=(4, 5)) * 0.8, rng.normal(size=4) * 0.3
    )
    x = rng.normal(size=(6, 7))
    up = rng.normal(size=(6, 4))
    g = enc.encode_backward(p, x, up)
    params = [p.W1, p.b1, p.W2, p.b2, x]
    grads = [g.W1, g.b1, g.W2, g.b2, g.features]
    return _directional(lambda: float(np.sum(up * enc.encode(p, x))), grads, params, rng)


def _probe_ms_loss(rng, k):
    variants = [
        L.LossConfig(detach_ap_edge=False),
        L.LossConfig(detach_ap_edge=False, beta=10.0, alpha=2.0),
        L.LossConfig(edge_gp=False),
        L.LossConfig(edge_ga=False, detach_ap_edge=False, renormalize_interp=True),
    ]
    zQ, zA, Pm, Wg, Wa, mask = _ms_problem(rng)
    multi = bool(k % 2)
    t = L.BatchTargets(Wg, Wa, mask, ground_multi=multi)
    if k % 5 == 4:
        # Detached A-P edge: prototypes see the loss with aerial-side copies frozen.
        cfg = L.LossConfig()
        t = L.BatchTargets(Wg, Wa, mask)
        out = L.ms_loss(zQ, zA, Pm, t, cfg)
        frozen = Pm.copy()
        e1 = _directional(lambda: L.ms_loss(zQ, zA, Pm, t, cfg).loss, [out.grad_zQ, out.grad_zA], [zQ, zA], rng)
        e2 = _directional(lambda: _split_loss(zQ, zA, Pm, frozen, Wg, Wa, mask, cfg), [out.grad_P], [Pm], rng)
        return max(e1, e2)
    cfg = variants[k % 4]
    out = L.ms_loss(zQ, zA, Pm, t, cfg)
    grads = [out.grad_zQ, out.grad_zA, out.grad_P]
    return _directional(lambda: L.ms_loss(zQ, zA, Pm, t, cfg).loss, grads, [zQ, zA, Pm], rng)


def _probe_infonce(rng, k):
    zQ, zA = unit(rng.normal(size=(5, 4))), unit(rng.normal(size=(5, 4)))
    kw = dict(tau=0.1, label_smoothing=0.1, decoupled=bool(k % 2))
    out = L.infonce_bidirectional(zQ, zA, **kw)
    return _directional(lambda: L.infonce_bidirectional(zQ, zA, **kw).loss, [out.grad_q, out.grad_other], [zQ, zA], rng)


def _probe_haversine(rng):
    zq, Pm = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(6, 4)))
    lat, lon = np.radians(47.0 + rng.uniform(0, 0.01, 6)), np.radians(8.0 + rng.uniform(0, 0.01, 6))
    glat, glon = np.radians(47.0 + rng.uniform(0, 0.01, 3)), np.radians(8.0 + rng.uniform(0, 0.01, 3))
    temp = np.array([0.1])

    def f():
        return L.haversine_smoothed_ce(zq, Pm, lat, lon, glat, glon, 300.0, temp[0]).loss

    out = L.haversine_smoothed_ce(zq, Pm, lat, lon, glat, glon, 300.0, temp[0])
    return _directional(f, [out.grad_q, out.grad_other, np.array([out.grad_temperature])], [zq, Pm, temp], rng)


_HIER_CENTER = CellId.unpack(int(cg.cell_from_point(GeoPoint.from_degrees(47.0, 8.0), 8).pack()))
_HIER_IDS = np.sort(
    np.array(
        [CellId(_HIER_CENTER.face, 8, _HIER_CENTER.i + a, _HIER_CENTER.j + b).pack() for a in range(-3, 5) for b in range(-3, 5)],
        dtype=np.uint64,
    )
)


def _probe_hierarchical(rng):
    Pm = unit(rng.normal(size=(len(_HIER_IDS), 4)))
    zq = unit(rng.normal(size=(3, 4)))
    gt = _HIER_IDS[rng.choice(len(_HIER_IDS), 3, replace=False)]
    temp = np.array([0.3])

    def f():
        return L.hierarchical_ce(zq, Pm, _HIER_IDS, gt, [8, 6], temp[0]).loss

    out = L.hierarchical_ce(zq, Pm, _HIER_IDS, gt, [8, 6], temp[0])
    return _directional(f, [out.grad_q, out.grad_other, np.array([out.grad_temperature])], [zq, Pm, temp], rng)


def _probe_cosface(rng):
    zq, Pm = unit(rng.normal(size=(4, 3))), unit(rng.normal(size=(7, 3)))
    gt = rng.integers(0, 7, 4)
    out = L.cosface_loss(zq, Pm, gt)
    return _directional(lambda: L.cosface_loss(zq, Pm, gt).loss, [out.grad_q, out.grad_other], [zq, Pm], rng)


def test_c06_gradient_checks(criterion):
    t0 = time.perf_counter()
    worst = {}
    for k in range(20):
        rng = np.random.default_rng([6, k])
        for name, probe in (
            ("encoder", lambda: _probe_encoder(rng)),
            ("ms_loss", lambda: _probe_ms_loss(rng, k)),
            ("infonce", lambda: _probe_infonce(rng, k)),
            ("haversine_ce", lambda: _probe_haversine(rng)),
            ("hierarchical_ce", lambda: _probe_hierarchical(rng)),
            ("cosface", lambda: _probe_cosface(rng)),
        ):
            worst[name] = max(worst.get(name, 0.0), probe())
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and seconds <= 60
    detail = " ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {seconds:.1f} s"
    assert criterion(6, "central differences, 20 probes per operation, rel err <= 1e-4", ok, detail)


# ---------------------------------------------------------------------------
# 7: closed-form loss values

FIX_ZQ = unit([[0.9, 0.3, -0.2, 0.1], [0.1, 0.8, 0.4, -0.3]])
FIX_ZA = unit([[0.7, 0.5, 0.1, -0.1], [-0.2, 0.6, 0.7, 0.1]])
FIX_P = unit([[0.8, 0.2, 0.0, 0.1], [0.3, 0.3, 0.6, -0.5], [-0.1, 0.4, 0.5, 0.2]])
FIX_WG = [[(0, 0.7), (1, 0.3)], [(2, 1.0)]]
FIX_WA = [[(0, 1.0)], [(1, 0.5), (2, 0.5)]]
FIX_NEG = [[False, False, True], [True, False, False]]


def _loop_loss(alpha, beta, lam):
    """Two-example loss with plain Python loops."""
    dot = lambda u, v: math.fsum(x * y for x, y in zip(u, v))
    mix = lambda items: [math.fsum(w * FIX_P[c][d] for c, w in items) for d in range(4)]
    g = lambda s: math.exp(-alpha * (s - lam))
    e = lambda s: math.exp(beta * (s - lam))
    zq, za = FIX_ZQ.tolist(), FIX_ZA.tolist()
    total = 0.0
    for i in range(2):
        pos = 1 + g(dot(zq[i], za[i])) + g(dot(zq[i], mix(FIX_WG[i]))) + g(dot(za[i], mix(FIX_WA[i])))
        s = 0.0
        for j in range(2):
            if j != i:
                s += e(dot(zq[i], za[j])) + e(dot(za[i], zq[j]))
        for c in range(3):
            if FIX_NEG[i][c]:
                s += e(dot(zq[i], FIX_P[c])) + e(dot(za[i], FIX_P[c]))
        total += math.log(pos) / alpha + math.log(1 + s) / beta
    return total


def test_c07_closed_form_loss(criterion):
    def csr(rows):
        m = np.zeros((2, 3))
        for r, items in enumerate(rows):
            for c, w in items:
                m[r, c] = w
        return sparse.csr_matrix(m)

    t = L.BatchTargets(csr(FIX_WG), csr(FIX_WA), np.array(FIX_NEG))
    worst = 0.0
    for alpha, beta, lam in ((0.2, 100.0, 0.2), (2.0, 10.0, 0.5), (1.0, 40.0, -0.1)):
        got = L.ms_loss(FIX_ZQ, FIX_ZA, FIX_P, t, L.LossConfig(alpha=alpha, beta=beta, lam=lam)).loss
        worst = max(worst, abs(got - _loop_loss(alpha, beta, lam)) / abs(got))
    exact = all(L.gamma(lam, a, lam) == 1.0 and L.delta(lam, b, lam) == 1.0 for lam in (0.2, -0.3, 0.7) for a, b in ((0.2, 100.0), (2.0, 10.0)))
    ok = worst <= 1e-9 and exact
    assert criterion(7, "batch-of-2 fixture matches loop evaluation; gamma=delta=1 at lambda", ok, f"max rel {worst:.1e}")


# ---------------------------------------------------------------------------
# 8: geometry


def test_c08_geometry_suite(criterion):
    counts_ok = True
    cells = [CellId(f, 0, 0, 0) for f in range(6)]
    for level in range(0, 9):
        if level:
            cells = [k for c in cells for k in cg.children(c)]
        counts_ok &= len({c.pack() for c in cells}) == 6 * 4**level
    rng = np.random.default_rng(8)
    v = unit(rng.normal(size=(100_000, 3)))
    lat, lon = np.arcsin(v[:, 2]), np.arctan2(v[:, 1], v[:, 0])
    failures = 0
    for level in (8, 13, 16, 20):
        c = cg.cells_from_latlon(lat, lon, level)
        clat, clon = cg.cell_centers_latlon(c)
        failures += int(np.sum(cg.cells_from_latlon(clat, clon, level) != c))
        coarse = cg.cells_from_latlon(lat, lon, level - 3)
        failures += int(np.sum(cg.parent_array(c, level - 3) != coarse))
    e15, e16 = cg.avg_edge_length(15), cg.avg_edge_length(16)
    ok = counts_ok and failures == 0 and abs(e15 / 281 - 1) <= 0.15 and abs(e16 / 140 - 1) <= 0.15
    assert criterion(
        8, "6*4^L counts, 1e5-point round-trip and nesting, edge lengths", ok,
        f"failures {failures}; edge L15 {e15:.1f} m L16 {e16:.1f} m",
    )


# ---------------------------------------------------------------------------
# 9: retrieval oracle


def test_c09_retrieval_oracle(criterion):
    rng = np.random.default_rng(9)
    ids = cg.cells_in_cap(GeoPoint.from_degrees(47.0, 8.0), 8000.0, 13)
    vec = unit(rng.normal(size=(len(ids), 6)))
    vec[7] = vec[2]
    vec[40] = vec[2]
    lat, lon = cg.cell_centers_latlon(ids)
    database = C.CellCodeDB("aerial", 13, 0.0, ids, vec, lat, lon)
    q = unit(rng.normal(size=(1000, 6)))
    q[::25] = vec[2]
    K = 5
    mismatches = 0
    rows = vec.tolist()
    for r in range(1000):
        scores = [math.fsum(a * b for a, b in zip(row, q[r])) for row in rows]
        order = sorted(range(len(rows)), key=lambda k: (-scores[k], int(ids[k])))[:K]
        res = C.search_topk(database, q[r], K)
        mismatches += res.ids.tolist() != [int(ids[k]) for k in order]
    ranked = C.search_batch(database, q, K)
    pick = rng.integers(0, len(ids), 1000)
    gl, go = cg.offset_latlon(lat[pick], lon[pick], *rng.uniform(-2500, 2500, (2, 1000)))
    alat, alon = lat[ranked], lon[ranked]
    recall_mismatch = 0
    for K_, dist in ((1, 1557.0), (5, 2500.0)):
        hits = sum(
            any(cg.haversine_distance(GeoPoint(gl[r], go[r]), GeoPoint(alat[r, k], alon[r, k])) <= dist for k in range(K_))
            for r in range(1000)
        )
        recall_mismatch += C.recall_at(alat, alon, gl, go, K_, dist) != hits / 1000
    ok = mismatches == 0 and recall_mismatch == 0
    assert criterion(9, "search_topk and recall_at equal full-sort and brute-force oracles", ok,
                     f"rank mismatches {mismatches}; recall mismatches {recall_mismatch}")


# ---------------------------------------------------------------------------
# 11: persistence


def test_c11_persistence(criterion):
    rng = np.random.default_rng(11)
    results = {}
    # Round trips of freshly built artifacts.
    cfg = W.WorldConfig(seed=2, region_radius=4000.0)
    ds = W.generate_dataset(W.generate_world(cfg), W.default_density(cfg, 3), (120, 30), seed=1, prototype_level=13)
    buf = W.dataset_to_bytes(ds)
    results["gwds"] = W.dataset_to_bytes(W.dataset_from_bytes(buf)) == buf
    p = enc.init_params(9, 5, hidden=7, seed=3)
    buf = enc.params_to_bytes(p)
    results["genc"] = enc.params_to_bytes(enc.params_from_bytes(buf)) == buf
    table = T.init_prototypes(ds.train.cell, 13, 6, seed=1)
    buf = T.table_to_bytes(table)
    results["gprt"] = T.table_to_bytes(T.table_from_bytes(buf)) == buf
    lat, lon = cg.cell_centers_latlon(table.ids)
    database = C.CellCodeDB("hybrid", 13, 1.3, table.ids, unit(rng.normal(size=(len(table), 6))), lat, lon)
    buf = C.gcdb_to_bytes(database)
    results["gcdb"] = C.gcdb_to_bytes(C.gcdb_from_bytes(buf)) == buf
    # Committed golden files.
    f32 = lambda x: np.asarray(x, dtype=np.float32).astype(np.float64)
    g = C.gcdb_from_bytes((GOLDEN / "three.gcdb").read_bytes())
    results["golden gcdb"] = (
        (g.mode, g.level, g.kappa, g.dim) == ("hybrid", 12, 1.25, 4)
        and g.ids.tolist() == [5476377188758456054, 5476377189295326976, 5476377197885261824]
        and np.array_equal(g.vectors, f32([[1, 0, 0, 0], [0.5, 0.5, 0.5, 0.5], [0, -0.6, 0.8, 0]]))
    )
    e = enc.params_from_bytes((GOLDEN / "tiny.genc").read_bytes())
    results["golden genc"] = np.array_equal(e.W1, [[0.5, -0.25, 1.0], [0.0, 2.0, -1.5]]) and np.array_equal(e.b2, [0.0, 0.5])
    t = T.table_from_bytes((GOLDEN / "two.gprt").read_bytes())
    results["golden gprt"] = t.level == 12 and np.array_equal(t.vectors, f32([[0.6, 0.8, 0.0], [0.0, 0.0, -1.0]]))
    d = W.dataset_from_bytes((GOLDEN / "two.gwds").read_bytes())
    results["golden gwds"] = (
        d.world_config.seed == 5 and np.array_equal(d.ground, [[1, 2, 3], [0.5, -0.5, 0]])
        and np.array_equal(d.aerial, [[-1, 0.25], [8, -8]])
    )
    for name in ("three.gcdb", "tiny.genc", "two.gprt", "two.gwds"):
        buf = (GOLDEN / name).read_bytes()
        reader, writer = {
            "gcdb": (C.gcdb_from_bytes, C.gcdb_to_bytes),
            "genc": (enc.params_from_bytes, enc.params_to_bytes),
            "gprt": (T.table_from_bytes, T.table_to_bytes),
            "gwds": (W.dataset_from_bytes, W.dataset_to_bytes),
        }[name.rsplit(".", 1)[1]]
        results[f"re-encode {name}"] = writer(reader(buf)) == buf
    failed = [k for k, v in results.items() if not v]
    assert criterion(11, "GCDB/GWDS/GENC/GPRT bitwise round-trip; golden files decode", not failed,
                     "failed: " + ", ".join(failed) if failed else f"{len(results)} checks")
