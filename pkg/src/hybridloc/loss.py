"""Three-edge multi-similarity loss and the classification/retrieval baselines.

The main loss ties together ground embeddings ``zQ``, aerial embeddings ``zA``
and cell prototypes ``P``. For each example ``i``::

    pos_i = 1/alpha * log(1 + g(zQ_i.zA_i) + g(zQ_i.zPg_i) + g(zA_i.zPa_i))
    neg_i = 1/beta  * log(1 + sum_{j!=i} [d(zQ_i.zA_j) + d(zA_i.zQ_j)]
                            + sum_{j in N(i)} [d(zQ_i.P_j) + d(zA_i.P_j)])

with ``g(s) = exp(-alpha (s - lam))`` and ``d(s) = exp(beta (s - lam))``.
``zPg``/``zPa`` are prototypes interpolated around the ground pose and the
aerial tile center. Every function returns exact gradients.

Reductions run in a fixed order (ascending example index, prototypes in
ascending packed-id order, shards in ascending index) so results do not
depend on how the prototype table is split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from . import cellgrid as cg
from .cellgrid import CellId, GeoPoint
from .encoder import l2_normalize, l2_normalize_vjp

GROUND_MODES = ("nearest", "frustum_weights", "frustum_all_cells")
AERIAL_MODES = ("nearest", "bilinear")


class CoverageError(KeyError):
    """A positive cell has no prototype."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    beta: float = 100.0
    lam: float = 0.2
    # None resolves to 2x the average prototype-level edge.
    neg_exclusion_radius: float | None = None
    detach_ap_edge: bool = True
    interp_mode_ground: str = "frustum_all_cells"
    interp_mode_aerial: str = "bilinear"
    renormalize_interp: bool = False
    edge_ga: bool = True
    edge_gp: bool = True
    edge_ap: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.interp_mode_ground not in GROUND_MODES:
            raise ValueError(f"interp_mode_ground must be one of {GROUND_MODES}")
        if self.interp_mode_aerial not in AERIAL_MODES:
            raise ValueError(f"interp_mode_aerial must be one of {AERIAL_MODES}")
        if not (self.edge_ga or self.edge_gp or self.edge_ap):
            raise ValueError("at least one loss edge must be enabled")

    def exclusion_radius(self, prototype_level: int) -> float:
        if self.neg_exclusion_radius is not None:
            return self.neg_exclusion_radius
        return 2.0 * cg.avg_edge_length(prototype_level)

    @property
    def ap_detached(self) -> bool:
        # Without a G-P edge the prototypes have no other training signal.
        return self.detach_ap_edge and self.edge_gp


def gamma(s, alpha: float, lam: float):
    return np.exp(-alpha * (np.asarray(s, dtype=np.float64) - lam))


def delta(s, beta: float, lam: float):
    return np.exp(beta * (np.asarray(s, dtype=np.float64) - lam))


def positive_term(zQ, zA, zP_interp, alpha: float, lam: float) -> float:
    """Single-example positive term with one interpolated prototype for both P edges."""
    zQ, zA, zP = (np.asarray(v, dtype=np.float64) for v in (zQ, zA, zP_interp))
    total = 1.0 + gamma(zQ @ zA, alpha, lam) + gamma(zQ @ zP, alpha, lam) + gamma(zA @ zP, alpha, lam)
    return float(np.log(total) / alpha)


def negative_term(
    i: int,
    zQ: np.ndarray,
    zA: np.ndarray,
    prototypes: np.ndarray,
    negatives: Sequence[int],
    beta: float,
    lam: float,
) -> float:
    """Negative term for example ``i`` of a batch; plain sequential reference sum."""
    total = 0.0
    for j in range(len(zQ)):
        if j != i:
            total += float(delta(zQ[i] @ zA[j], beta, lam)) + float(delta(zA[i] @ zQ[j], beta, lam))
    for j in negatives:
        total += float(delta(zQ[i] @ prototypes[j], beta, lam)) + float(delta(zA[i] @ prototypes[j], beta, lam))
    return math.log1p(total) / beta


# ---------------------------------------------------------------------------
# negative sets and interpolation weights


def negative_mask(lat, lon, proto_xyz: np.ndarray, radius: float) -> np.ndarray:
    """Boolean (n, N) mask of prototypes farther than ``radius`` from each query."""
    q = cg.latlon_to_xyz(np.atleast_1d(lat), np.atleast_1d(lon))
    dots = q @ proto_xyz.T
    if not math.isfinite(radius):
        return np.zeros(dots.shape, dtype=bool)
    cos_r = math.cos(min(radius / cg.EARTH_RADIUS_M, math.pi))
    mask = dots < cos_r - 1e-9
    near = (dots < cos_r + 1e-9) & ~mask
    if np.any(near):
        r, c = np.nonzero(near)
        plat, plon = cg.xyz_to_latlon(proto_xyz[c])
        qlat, qlon = cg.xyz_to_latlon(q[r])
        mask[r, c] = cg.haversine_array(qlat, qlon, plat, plon) > radius
    return mask


def negative_set(query_location: GeoPoint, prototype_ids: np.ndarray, radius: float) -> np.ndarray:
    """Indices into ``prototype_ids`` of cells whose centers lie beyond ``radius``."""
    xyz = cg.cell_centers_xyz(np.asarray(prototype_ids, dtype=np.uint64))
    return np.flatnonzero(negative_mask(query_location.lat, query_location.lon, xyz, radius)[0])


def frustum_weights(
    location: GeoPoint, heading: float, fov: float, prototype_level: int, depth: float = 50.0
) -> dict[CellId, float]:
    return {
        c: w for c, w in cg.cells_overlapping_triangle(location, heading, fov, depth, prototype_level)
    }


def bilinear_weights_array(lat, lon, level: int):
    """Product-form bilinear weights over the 4 cells around each point.

    Works in the continuous (i, j) frame of the point's face, with grid nodes
    at cell centers. Returns packed ids (n, 4) and weights (n, 4); weights of
    cells clipped at a face border fold onto the border cell.
    """
    xyz = cg.latlon_to_xyz(np.atleast_1d(lat), np.atleast_1d(lon))
    face, u, v = cg.xyz_to_face_uv(xyz)
    n = 1 << level
    a = np.clip(0.5 * (u + 1.0) * n - 0.5, 0.0, n - 1.0)
    b = np.clip(0.5 * (v + 1.0) * n - 0.5, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(a), max(n - 2, 0)).astype(np.int64)
    j0 = np.minimum(np.floor(b), max(n - 2, 0)).astype(np.int64)
    fa = a - i0
    fb = b - j0
    i1 = np.minimum(i0 + 1, n - 1)
    j1 = np.minimum(j0 + 1, n - 1)
    ids = np.stack(
        [
            cg.pack_array(face, level, i0, j0),
            cg.pack_array(face, level, i1, j0),
            cg.pack_array(face, level, i0, j1),
            cg.pack_array(face, level, i1, j1),
        ],
        axis=1,
    )
    w = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb], axis=1)
    return ids, w


def bilinear_weights(tile_center: GeoPoint, prototype_level: int) -> dict[CellId, float]:
    ids, w = bilinear_weights_array(tile_center.lat, tile_center.lon, prototype_level)
    out: dict[CellId, float] = {}
    for c, x in zip(ids[0], w[0]):
        if x > 0:
            key = CellId.unpack(int(c))
            out[key] = out.get(key, 0.0) + float(x)
    return out


def lookup(sorted_ids: np.ndarray, query) -> tuple[np.ndarray, np.ndarray]:
    """Positions of ``query`` ids in ``sorted_ids`` and a found mask."""
    query = np.asarray(query, dtype=np.uint64)
    pos = np.searchsorted(sorted_ids, query)
    pos_c = np.minimum(pos, max(len(sorted_ids) - 1, 0))
    found = (pos < len(sorted_ids)) & (sorted_ids[pos_c] == query) if len(sorted_ids) else np.zeros(len(query), bool)
    return pos_c, found


def weights_to_csr(rows, cols, vals, n_rows: int, sorted_ids: np.ndarray) -> sparse.csr_matrix:
    """Sparse (n_rows, N) matrix from (row, packed id, weight) triples; zero weights dropped."""
    vals = np.asarray(vals, dtype=np.float64)
    keep = vals > 0
    rows, cols, vals = np.asarray(rows)[keep], np.asarray(cols, dtype=np.uint64)[keep], vals[keep]
    col_idx, found = lookup(sorted_ids, cols)
    if not np.all(found):
        missing = CellId.unpack(int(cols[np.flatnonzero(~found)[0]]))
        raise CoverageError(f"no prototype for positive cell {missing}")
    m = sparse.csr_matrix((vals, (rows, col_idx)), shape=(n_rows, len(sorted_ids)))
    m.sum_duplicates()
    m.sort_indices()
    return m


# ---------------------------------------------------------------------------
# the multi-similarity loss


@dataclass(eq=False)
class BatchTargets:
    """Positive interpolation weights and negative sets for a batch.

    ``ground`` and ``aerial`` are (n, N) CSR matrices with rows summing to 1.
    With ``ground_multi`` the G-P positive averages gamma over the support
    cells instead of taking gamma of the interpolated prototype.
    """

    ground: sparse.csr_matrix
    aerial: sparse.csr_matrix
    neg_mask: np.ndarray
    ground_multi: bool = False


@dataclass(eq=False)
class LossOutput:
    loss: float
    pos: np.ndarray  # per-example positive terms
    neg: np.ndarray  # per-example negative terms
    grad_zQ: np.ndarray
    grad_zA: np.ndarray
    grad_P: np.ndarray  # dense (N, D); zero rows untouched

    @property
    def touched(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.grad_P != 0.0, axis=1))


def shard_ranges(n: int, d: int) -> list[tuple[int, int]]:
    """Contiguous near-equal partition of ``range(n)`` into ``d`` pieces."""
    if d < 1:
        raise ValueError("shard count must be >= 1")
    if d > n:
        raise ValueError(f"cannot split {n} prototypes into {d} shards")
    base, extra = divmod(n, d)
    out = []
    start = 0
    for s in range(d):
        size = base + (1 if s < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def sharded_negative_sums(zQ, zA, prototypes, neg_mask, beta, lam, shards, use_q=True, use_a=True, keep=None):
    """Per-shard partial sums of prototype delta terms, shape (d, n).

    Shard ``s`` only reads its own prototype rows ``prototypes[lo:hi]``. When
    ``keep`` is a list, the masked delta matrices of each shard are appended
    to it for the backward pass.
    """
    out = np.zeros((len(shards), len(zQ)))
    for s, (lo, hi) in enumerate(shards):
        P = prototypes[lo:hi]
        m = neg_mask[:, lo:hi]
        Eq = delta(zQ @ P.T, beta, lam) * m if use_q else None
        Ea = delta(zA @ P.T, beta, lam) * m if use_a else None
        if use_q:
            out[s] += Eq.sum(axis=1)
        if use_a:
            out[s] += Ea.sum(axis=1)
        if keep is not None:
            keep.append((Eq, Ea))
    return out


def ms_loss(
    zQ: np.ndarray,
    zA: np.ndarray,
    prototypes: np.ndarray,
    targets: BatchTargets,
    config: LossConfig,
    shards: Sequence[tuple[int, int]] | None = None,
) -> LossOutput:
    """Loss and exact gradients w.r.t. embeddings and prototypes."""
    a, b, lam = config.alpha, config.beta, config.lam
    zQ = np.asarray(zQ, dtype=np.float64)
    zA = np.asarray(zA, dtype=np.float64)
    P = np.asarray(prototypes, dtype=np.float64)
    n, N = len(zQ), len(P)
    if shards is None:
        shards = [(0, N)]
    dzQ = np.zeros_like(zQ)
    dzA = np.zeros_like(zA)
    dP = np.zeros_like(P)

    # positives
    G = np.zeros(n)
    if config.edge_ga:
        s_qa = np.sum(zQ * zA, axis=1)
        g_qa = gamma(s_qa, a, lam)
        G += g_qa
    if config.edge_gp:
        Wg = targets.ground
        if targets.ground_multi:
            rows = np.repeat(np.arange(n), np.diff(Wg.indptr))
            s_gp = np.sum(zQ[rows] * P[Wg.indices], axis=1)
            g_gp = gamma(s_gp, a, lam)
            G += np.bincount(rows, weights=Wg.data * g_gp, minlength=n)
        else:
            zPg_raw = Wg @ P
            zPg = l2_normalize(zPg_raw) if config.renormalize_interp else zPg_raw
            g_gp = gamma(np.sum(zQ * zPg, axis=1), a, lam)
            G += g_gp
    if config.edge_ap:
        zPa_raw = targets.aerial @ P
        zPa = l2_normalize(zPa_raw) if config.renormalize_interp else zPa_raw
        g_ap = gamma(np.sum(zA * zPa, axis=1), a, lam)
        G += g_ap
    pos = np.log1p(G) / a
    cp = -1.0 / (1.0 + G)  # d pos / d s = cp * gamma(s)

    # negatives: in-batch pairs, then prototype partial sums per shard
    S = np.zeros(n)
    if config.edge_ga:
        M = zQ @ zA.T
        E = delta(M, b, lam)
        np.fill_diagonal(E, 0.0)
        S += E.sum(axis=1) + E.sum(axis=0)
    use_q, use_a = config.edge_gp, config.edge_ap
    if use_q or use_a:
        kept: list = []
        partials = sharded_negative_sums(zQ, zA, P, targets.neg_mask, b, lam, shards, use_q, use_a, kept)
        for s in range(len(shards)):
            S += partials[s]
    neg = np.log1p(S) / b
    cn = 1.0 / (1.0 + S)  # d neg / d s = cn * delta(s)

    # backward: positives
    if config.edge_ga:
        g = cp * g_qa
        dzQ += g[:, None] * zA
        dzA += g[:, None] * zQ
    if config.edge_gp:
        if targets.ground_multi:
            coef = Wg.data * (cp[rows] * g_gp)
            C = sparse.csr_matrix((coef, Wg.indices, Wg.indptr), shape=Wg.shape)
            dzQ += C @ P
            dP += C.T @ zQ
        else:
            g = cp * g_gp
            dzQ += g[:, None] * zPg
            d_zPg = g[:, None] * zQ
            if config.renormalize_interp:
                d_zPg = l2_normalize_vjp(zPg_raw, d_zPg)
            dP += Wg.T @ d_zPg
    if config.edge_ap:
        g = cp * g_ap
        dzA += g[:, None] * zPa
        if not config.ap_detached:
            d_zPa = g[:, None] * zA
            if config.renormalize_interp:
                d_zPa = l2_normalize_vjp(zPa_raw, d_zPa)
            dP += targets.aerial.T @ d_zPa

    # backward: negatives
    if config.edge_ga:
        C = E * (cn[:, None] + cn[None, :])
        dzQ += C @ zA
        dzA += C.T @ zQ
    if use_q or use_a:
        for (lo, hi), (Eq, Ea) in zip(shards, kept):
            Ps = P[lo:hi]
            if use_q:
                C = Eq * cn[:, None]
                dzQ += C @ Ps
                dP[lo:hi] += C.T @ zQ
            if use_a:
                C = Ea * cn[:, None]
                dzA += C @ Ps
                if not config.ap_detached:
                    dP[lo:hi] += C.T @ zA

    return LossOutput(float(np.sum(pos + neg)), pos, neg, dzQ, dzA, dP)


# ---------------------------------------------------------------------------
# baselines


@dataclass(eq=False)
class BaselineOutput:
    loss: float
    grad_q: np.ndarray
    grad_other: np.ndarray  # aerial embeddings or prototypes
    grad_temperature: float = 0.0


def _log_softmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mx = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - mx)
    tot = e.sum(axis=1, keepdims=True)
    logp = x - mx - np.log(tot)
    return logp, e / tot


def infonce_bidirectional(
    zQ: np.ndarray,
    zA: np.ndarray,
    tau: float = 1.0 / 36.0,
    label_smoothing: float = 0.1,
    decoupled: bool = True,
) -> BaselineOutput:
    """Symmetric ground<->aerial cross-entropy over in-batch similarities.

    Targets put ``1 - eps + eps/n`` on the paired index and ``eps/n``
    elsewhere. The decoupled form drops the positive from each softmax
    denominator. The loss is the mean over rows, averaged over directions.
    """
    zQ = np.asarray(zQ, dtype=np.float64)
    zA = np.asarray(zA, dtype=np.float64)
    n = len(zQ)
    if n < 2:
        raise ValueError("in-batch contrast needs at least 2 examples")
    eps = label_smoothing
    T = np.full((n, n), eps / n) + (1.0 - eps) * np.eye(n)
    mask = ~np.eye(n, dtype=bool) if decoupled else None
    X = zQ @ zA.T / tau

    def one_direction(logits):
        masked = logits if mask is None else np.where(mask, logits, -np.inf)
        mx = masked.max(axis=1, keepdims=True)
        e = np.exp(masked - mx)
        tot = e.sum(axis=1, keepdims=True)
        # every entry (the excluded positive too) is scored against the same normalizer
        logp = logits - (mx + np.log(tot))
        loss = -np.sum(T * logp) / n
        grad = (e / tot - T) / n
        return loss, grad

    l1, g1 = one_direction(X)
    l2, g2 = one_direction(X.T)
    G = 0.5 * (g1 + g2.T) / tau
    return BaselineOutput(0.5 * (l1 + l2), G @ zA, G.T @ zQ)


def haversine_targets(centers_lat, centers_lon, gt_lat, gt_lon, tau_m: float) -> np.ndarray:
    """Soft labels proportional to exp(-haversine/tau), rows normalized."""
    if tau_m <= 0:
        raise ValueError("tau must be positive")
    d = cg.haversine_array(
        np.atleast_1d(gt_lat)[:, None], np.atleast_1d(gt_lon)[:, None], centers_lat[None, :], centers_lon[None, :]
    )
    logits = -(d - d.min(axis=1, keepdims=True)) / tau_m
    q = np.exp(logits)
    return q / q.sum(axis=1, keepdims=True)


def _soft_ce(zq, prototypes, targets, temperature) -> BaselineOutput:
    zq = np.atleast_2d(np.asarray(zq, dtype=np.float64))
    P = np.asarray(prototypes, dtype=np.float64)
    n = len(zq)
    sims = zq @ P.T
    logp, p = _log_softmax(sims / temperature)
    loss = -np.sum(targets * logp) / n
    dlogits = (p - targets) / n
    dsims = dlogits / temperature
    dtemp = -float(np.sum(dlogits * sims)) / temperature**2
    return BaselineOutput(float(loss), dsims @ P, dsims.T @ zq, dtemp)


def haversine_smoothed_ce(
    zq, prototypes, centers_lat, centers_lon, gt_lat, gt_lon, tau_m: float = 200.0, temperature: float = 0.01
) -> BaselineOutput:
    """Cross-entropy of softmax(sims / temperature) against haversine-smoothed labels."""
    q = haversine_targets(np.asarray(centers_lat), np.asarray(centers_lon), gt_lat, gt_lon, tau_m)
    return _soft_ce(zq, prototypes, q, temperature)


def hierarchical_ce(
    zq, prototypes, prototype_ids, gt_cells, levels: Sequence[int], temperature: float = 0.01
) -> BaselineOutput:
    """Sum over levels of -log(total probability of the ground-truth ancestor)."""
    zq = np.atleast_2d(np.asarray(zq, dtype=np.float64))
    P = np.asarray(prototypes, dtype=np.float64)
    ids = np.asarray(prototype_ids, dtype=np.uint64)
    gt = np.atleast_1d(np.asarray(gt_cells, dtype=np.uint64))
    n = len(zq)
    sims = zq @ P.T
    _, p = _log_softmax(sims / temperature)
    loss = 0.0
    dlogits = np.zeros_like(p)
    for level in levels:
        group = cg.parent_array(ids, level)
        target = cg.parent_array(gt, level)
        member = group[None, :] == target[:, None]
        mass = np.sum(np.where(member, p, 0.0), axis=1)
        if np.any(mass <= 0):
            raise CoverageError("ground-truth ancestor has no prototypes")
        loss -= float(np.sum(np.log(mass)))
        dlogits += p - np.where(member, p, 0.0) / mass[:, None]
    dlogits /= n
    dsims = dlogits / temperature
    dtemp = -float(np.sum(dlogits * sims)) / temperature**2
    return BaselineOutput(loss / n, dsims @ P, dsims.T @ zq, dtemp)


def aggregated_probabilities(zq, prototypes, prototype_ids, level: int, temperature: float = 0.01):
    """Softmax mass per level-``level`` ancestor; returns (ancestor ids, probs (n, k))."""
    zq = np.atleast_2d(zq)
    _, p = _log_softmax(zq @ np.asarray(prototypes).T / temperature)
    group = cg.parent_array(np.asarray(prototype_ids, dtype=np.uint64), level)
    uniq, inv = np.unique(group, return_inverse=True)
    out = np.zeros((len(zq), len(uniq)))
    for k in range(len(uniq)):
        out[:, k] = p[:, inv == k].sum(axis=1)
    return uniq, out


def cosface_loss(zq, prototypes, gt_index, margin: float = 0.35, scale: float = 64.0) -> BaselineOutput:
    """Softmax cross-entropy over ``scale * (sim - margin * [j == gt])``."""
    if not 0 <= margin < 1:
        raise ValueError("margin must be in [0, 1)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    zq = np.atleast_2d(np.asarray(zq, dtype=np.float64))
    P = np.asarray(prototypes, dtype=np.float64)
    gt = np.atleast_1d(np.asarray(gt_index))
    n = len(zq)
    onehot = np.zeros((n, len(P)))
    onehot[np.arange(n), gt] = 1.0
    logits = scale * (zq @ P.T - margin * onehot)
    logp, p = _log_softmax(logits)
    loss = -np.sum(onehot * logp) / n
    dsims = scale * (p - onehot) / n
    return BaselineOutput(float(loss), dsims @ P, dsims.T @ zq)
