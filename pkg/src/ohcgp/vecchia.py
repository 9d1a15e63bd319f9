"""Vecchia process: ordering, conditioning sets, grouping, likelihood, U, prediction.

Indices inside a plan are *ordered* indices (positions in ``plan.order``);
``plan.order[k]`` is the original index of the k-th ordered point.

Covariance blocks are assembled per group: every member of a group reads its
(|g(j)| + 1)^2 block out of one covariance matrix evaluated over the group's
nodes (the union of conditioning sets plus members). Each member still
conditions only on its own g(j), so grouping changes the cost of kernel
evaluation but never the value of the likelihood.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import InvalidArgument, NumericFailure
from .geometry import as_latlon, circular_mean_lon, pairwise_cyl_distance
from .kernels import PointParams

ORDERING_VERSION = 1
LOG_2PI = math.log(2 * math.pi)
# rows of blocks assembled at once; bounds memory at ~chunk * (m+1)^2 doubles
CHUNK_ROWS = 4096


def maxmin_order(locs) -> np.ndarray:
    """Greedy max-min ordering under the cylindrical distance.

    Starts from the point nearest the centroid (mean latitude, circular mean
    longitude); ties go to the lowest input index.
    """
    ll = as_latlon(locs)
    n = len(ll)
    if n == 0:
        return np.zeros(0, dtype=int)
    centre = np.array([[ll[:, 0].mean(), circular_mean_lon(ll[:, 1])]])
    first = int(np.argmin(pairwise_cyl_distance(ll, centre)[:, 0]))
    order = np.empty(n, dtype=int)
    order[0] = first
    mind = pairwise_cyl_distance(ll, ll[first:first + 1])[:, 0]
    mind[first] = -np.inf
    for k in range(1, n):
        nxt = int(np.argmax(mind))
        order[k] = nxt
        d = pairwise_cyl_distance(ll, ll[nxt:nxt + 1])[:, 0]
        # already-ordered points sit at -inf and stay there
        np.minimum(mind, d, out=mind)
        mind[nxt] = -np.inf
    return order


def _nearest_earlier(query_ll, cand_ll, cand_limit, m, block=256):
    """For each query row q, the m nearest candidates with index < cand_limit[q].

    Ties are broken by lower candidate index. Returns (q, m) padded with -1 on
    the left, entries ascending.
    """
    nq = len(query_ll)
    out = np.full((nq, m), -1, dtype=int)
    if m == 0:
        return out
    for s in range(0, nq, block):
        e = min(nq, s + block)
        lim = cand_limit[s:e]
        top = int(lim.max()) if e > s else 0
        if top == 0:
            continue
        d = pairwise_cyl_distance(query_ll[s:e], cand_ll[:top])
        d[np.arange(top)[None, :] >= lim[:, None]] = np.inf
        for r in range(e - s):
            k = min(m, int(lim[r]))
            if k == 0:
                continue
            row = d[r]
            if k < top:
                kth = np.partition(row, k - 1)[k - 1]
                cand = np.flatnonzero(row <= kth)
            else:
                cand = np.flatnonzero(np.isfinite(row))
            cand = cand[np.lexsort((cand, row[cand]))][:k]
            out[s + r, m - k:] = np.sort(cand)
    return out


def nearest_neighbor_sets(ordered_locs, m) -> np.ndarray:
    """Conditioning sets: the min(m, j) nearest earlier points of each ordered point.

    Returned as an (n, m) array of ordered indices, left-padded with -1.
    """
    if m < 1:
        raise InvalidArgument("m must be at least 1")
    ll = as_latlon(ordered_locs)
    n = len(ll)
    return _nearest_earlier(ll, ll, np.arange(n), int(m))


def _row_sets(cond):
    return [row[row >= 0] for row in cond]


def group_conditioning_sets(cond, offset=0) -> list:
    """Greedy grouping of consecutive points whose conditioning sets overlap.

    A candidate joins the current group while
    |union|^3 + |union| * group_size <= sum_j (|g(j)| + 1)^3.
    """
    sets = _row_sets(cond)
    groups = []
    if not sets:
        return groups
    cur = [0]
    union = set(sets[0].tolist())
    indiv = (len(sets[0]) + 1) ** 3
    for j in range(1, len(sets)):
        cand = union | set(sets[j].tolist())
        cost_j = (len(sets[j]) + 1) ** 3
        size = len(cur) + 1
        if len(cand) ** 3 + len(cand) * size <= indiv + cost_j:
            cur.append(j)
            union = cand
            indiv += cost_j
        else:
            groups.append(np.array(cur) + offset)
            cur = [j]
            union = set(sets[j].tolist())
            indiv = cost_j
    groups.append(np.array(cur) + offset)
    return groups


@dataclass
class VecchiaPlan:
    latlon: np.ndarray          # original-order coordinates
    order: np.ndarray           # ordered position -> original index
    cond: np.ndarray            # (n, m) ordered indices, left-padded with -1
    groups: list                # partition of ordered indices
    m: int
    _gather: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return len(self.order)

    @property
    def sizes(self):
        return (self.cond >= 0).sum(axis=1)

    def cond_set(self, j):
        row = self.cond[j]
        return row[row >= 0]

    def gather(self):
        """Index arrays that assemble all (m+1)^2 blocks from group covariances.

        Cached on the plan; chunked so the largest temporary stays bounded.
        """
        if "chunks" not in self._gather:
            self._gather["chunks"] = _build_gather(self)
        return self._gather["chunks"]


def _build_gather(plan: VecchiaPlan):
    n, m = plan.n, plan.m
    width = m + 1
    group_of = np.empty(n, dtype=int)
    for g, members in enumerate(plan.groups):
        group_of[members] = g
    chunks = []
    start = 0
    while start < n:
        # chunk boundaries fall on group boundaries
        stop = start
        gset = []
        while stop < n and (stop - start) < CHUNK_ROWS:
            g = group_of[stop]
            gset.append(g)
            stop = int(plan.groups[g][-1]) + 1
        pi, pj = [], []
        gidx = np.empty((stop - start, width, width), dtype=np.int64)
        idx = np.empty((stop - start, width), dtype=np.int64)
        offset = 0
        layouts = []
        for g in gset:
            members = plan.groups[g]
            nodes = np.unique(np.concatenate([plan.cond[members][plan.cond[members] >= 0], members]))
            k = len(nodes)
            a, b = np.meshgrid(nodes, nodes, indexing="ij")
            pi.append(a.ravel())
            pj.append(b.ravel())
            layouts.append((members, nodes, offset, k))
            offset += k * k
        total = offset
        zero_slot, one_slot = total, total + 1
        for members, nodes, off, k in layouts:
            for j in members:
                row = plan.cond[j]
                full = np.concatenate([row, [j]])
                valid = full >= 0
                pos = np.searchsorted(nodes, np.where(valid, full, nodes[0]))
                flat = off + pos[:, None] * k + pos[None, :]
                both = valid[:, None] & valid[None, :]
                pad_diag = np.eye(width, dtype=bool) & ~both
                r = j - start
                gidx[r] = np.where(both, flat, np.where(pad_diag, one_slot, zero_slot))
                idx[r] = np.where(valid, full, -1)
        chunks.append({
            "rows": np.arange(start, stop),
            "pi": np.concatenate(pi) if pi else np.zeros(0, int),
            "pj": np.concatenate(pj) if pj else np.zeros(0, int),
            "gidx": gidx,
            "idx": idx,
        })
        start = stop
    return chunks


def build_plan(locs, m, grouping=True) -> VecchiaPlan:
    ll = as_latlon(locs)
    order = maxmin_order(ll)
    cond = nearest_neighbor_sets(ll[order], m) if len(ll) else np.zeros((0, m), int)
    groups = group_conditioning_sets(cond) if grouping else [np.array([j]) for j in range(len(ll))]
    return VecchiaPlan(ll, order, cond, groups, int(m))


def plan_key(locs, m, grouping=True) -> str:
    ll = np.ascontiguousarray(as_latlon(locs), dtype="<f8")
    h = hashlib.sha256()
    h.update(ll.tobytes())
    h.update(f"m={int(m)};grouping={bool(grouping)};ordering={ORDERING_VERSION}".encode())
    return h.hexdigest()[:32]


def save_plan(plan: VecchiaPlan, path, grouping=True):
    bounds = np.array([g[0] for g in plan.groups] + [plan.n], dtype=np.int64)
    np.savez(path, latlon=plan.latlon, order=plan.order, cond=plan.cond, group_starts=bounds,
             m=np.array(plan.m), grouping=np.array(grouping), version=np.array(ORDERING_VERSION))


def load_plan(path) -> VecchiaPlan:
    with np.load(path) as d:
        if int(d["version"]) != ORDERING_VERSION:
            raise InvalidArgument("plan sidecar written by a different ordering version")
        b = d["group_starts"]
        groups = [np.arange(b[i], b[i + 1]) for i in range(len(b) - 1)]
        return VecchiaPlan(d["latlon"], d["order"], d["cond"], groups, int(d["m"]))


def cached_plan(locs, m, cache_dir=None, grouping=True) -> VecchiaPlan:
    """Build a plan, reusing a sidecar in ``cache_dir`` keyed by content hash."""
    if cache_dir is None:
        return build_plan(locs, m, grouping)
    path = Path(cache_dir) / f"plan-{plan_key(locs, m, grouping)}.npz"
    if path.exists():
        return load_plan(path)
    plan = build_plan(locs, m, grouping)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_plan(plan, path, grouping)
    return plan


# ---------------------------------------------------------------------------
# block evaluation


def _blocks(plan: VecchiaPlan, params: PointParams, chunk):
    orig = plan.order
    vals = params.cov_pairs(orig[chunk["pi"]], orig[chunk["pj"]], include_nugget=True)
    ext = np.concatenate([vals, [0.0, 1.0]])
    return ext[chunk["gidx"]]


def _factor(blocks, rows):
    try:
        return np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError:
        for r in range(len(blocks)):
            try:
                np.linalg.cholesky(blocks[r])
            except np.linalg.LinAlgError:
                raise NumericFailure(f"conditioning covariance singular at ordered index {rows[r]}",
                                     index=int(rows[r])) from None
        raise NumericFailure("conditioning covariance factorization failed")


def _check_params(plan, params):
    if len(params) != plan.n:
        raise InvalidArgument(f"parameters for {len(params)} points, plan has {plan.n}")


def vecchia_loglik(values, means, plan: VecchiaPlan, params: PointParams) -> float:
    """Sum of univariate conditional log-densities log p(y_j | y_g(j))."""
    _check_params(plan, params)
    r = np.asarray(values, float) - np.asarray(means, float)
    if r.size == 0:
        return 0.0
    r_ext = np.concatenate([r[plan.order], [0.0]])
    terms = []
    for chunk in plan.gather():
        L = _factor(_blocks(plan, params, chunk), chunk["rows"])
        v = r_ext[chunk["idx"]]
        z = np.linalg.solve(L, v[..., None])[..., -1, 0]
        ljj = L[:, -1, -1]
        terms.append(-0.5 * z * z - np.log(ljj) - 0.5 * LOG_2PI)
    return float(np.sum(np.concatenate(terms)))


@dataclass
class SparseFactor:
    """Upper-triangular U (ordered index space) with U U^T the Vecchia precision."""

    U: sp.csc_matrix
    order: np.ndarray

    @property
    def n(self):
        return self.U.shape[0]

    def loglik(self, residuals) -> float:
        r = np.asarray(residuals, float)[self.order]
        z = self.U.T @ r
        return float(-0.5 * z @ z + np.sum(np.log(self.U.diagonal())) - 0.5 * r.size * LOG_2PI)

    def whiten(self, x):
        """U^T x[order] for vectors or column stacks in original order."""
        x = np.asarray(x, float)
        return self.U.T @ x[self.order]


def build_U(plan: VecchiaPlan, params: PointParams) -> SparseFactor:
    _check_params(plan, params)
    n, m = plan.n, plan.m
    rows_all, cols_all, vals_all = [], [], []
    for chunk in plan.gather():
        L = _factor(_blocks(plan, params, chunk), chunk["rows"])
        Lgg = L[:, :m, :m]
        lj = L[:, -1, :m]
        ljj = L[:, -1, -1]
        if m:
            Bt = np.linalg.solve(np.swapaxes(Lgg, 1, 2), lj[..., None])[..., 0]
        else:
            Bt = np.zeros((len(ljj), 0))
        idx = chunk["idx"]
        cols = chunk["rows"]
        valid = idx[:, :m] >= 0
        rr, cc = np.nonzero(valid)
        rows_all.append(idx[:, :m][valid])
        cols_all.append(cols[rr])
        vals_all.append(-Bt[rr, cc] / ljj[rr])
        rows_all.append(cols)
        cols_all.append(cols)
        vals_all.append(1.0 / ljj)
    U = sp.csc_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                      shape=(n, n))
    U.sort_indices()
    return SparseFactor(U, plan.order)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PredictionExtension:
    plan: VecchiaPlan           # over obs followed by preds (original indexing)
    n_obs: int

    @property
    def n_pred(self):
        return self.plan.n - self.n_obs


def extend_for_prediction(plan: VecchiaPlan, pred_locs, m=None, grouping=True) -> PredictionExtension:
    """Append prediction points after the observations (observation-first ordering).

    Predictions are max-min ordered among themselves; each conditions on its m
    nearest among all observations and earlier predictions.
    """
    m = plan.m if m is None else int(m)
    if m != plan.m:
        raise InvalidArgument("extension must use the plan's m")
    pred = as_latlon(pred_locs)
    n_obs, p = plan.n, len(pred)
    latlon = np.vstack([plan.latlon, pred]) if p else plan.latlon.copy()
    if p == 0:
        return PredictionExtension(VecchiaPlan(latlon, plan.order.copy(), plan.cond.copy(),
                                               list(plan.groups), m), n_obs)
    porder = maxmin_order(pred)
    order = np.concatenate([plan.order, n_obs + porder])
    ordered_ll = latlon[order]
    limits = np.arange(n_obs, n_obs + p)
    pcond = _nearest_earlier(ordered_ll[n_obs:], ordered_ll, limits, m)
    cond = np.vstack([plan.cond, pcond])
    if grouping:
        pgroups = group_conditioning_sets(pcond, offset=n_obs)
    else:
        pgroups = [np.array([j]) for j in range(n_obs, n_obs + p)]
    return PredictionExtension(VecchiaPlan(latlon, order, cond, list(plan.groups) + pgroups, m), n_obs)


class VecchiaPrediction:
    """Latent prediction distribution N(mean, W^{-1}) with W = U_pp U_pp^T."""

    def __init__(self, mean, Upp, pred_order):
        self.mean = mean
        self._Upp = Upp.tocsr()
        self._pos = np.empty_like(pred_order)
        self._pos[pred_order] = np.arange(len(pred_order))
        self._pred_order = pred_order

    def _solve_upper(self, rhs):
        return spsolve_triangular(self._Upp, rhs, lower=False)

    def quad_form(self, a) -> float:
        """a^T W^{-1} a for a weight vector in original prediction order."""
        a = np.asarray(a, float)
        if not np.any(a):
            return 0.0
        x = self._solve_upper(a[self._pred_order])
        return float(x @ x)

    def covariance(self) -> np.ndarray:
        p = len(self.mean)
        X = self._solve_upper(np.eye(p))
        W_inv = X.T @ X
        return W_inv[np.ix_(self._pos, self._pos)]

    def variances(self, idx=None, block=512) -> np.ndarray:
        p = len(self.mean)
        idx = np.arange(p) if idx is None else np.asarray(idx, int)
        out = np.empty(len(idx))
        for s in range(0, len(idx), block):
            sel = idx[s:s + block]
            E = np.zeros((p, len(sel)))
            E[self._pos[sel], np.arange(len(sel))] = 1.0
            X = self._solve_upper(E)
            out[s:s + block] = np.sum(X * X, axis=0)
        return out


def vecchia_predict(ext: PredictionExtension, obs_values, obs_means, params: PointParams,
                    pred_means=None) -> VecchiaPrediction:
    """Condition the latent field at the prediction points on the observations.

    ``params`` covers obs followed by preds; prediction points should carry a
    zero nugget so the target is the latent field.
    """
    n, p = ext.n_obs, ext.n_pred
    F = build_U(ext.plan, params)
    U = F.U.tocsc()
    r = np.asarray(obs_values, float) - np.asarray(obs_means, float)
    r_ord = r[ext.plan.order[:n]]
    Uop = U[:n, n:]
    Upp = U[n:, n:]
    rhs = Uop.T @ r_ord
    try:
        mean_ord = -spsolve_triangular(Upp.T.tocsr(), rhs, lower=True)
    except Exception as exc:  # scipy raises LinAlgError on singular triangles
        raise NumericFailure("prediction solve failed") from exc
    pred_order = ext.plan.order[n:] - n
    mean = np.empty(p)
    mean[pred_order] = mean_ord
    if pred_means is not None:
        mean = mean + np.asarray(pred_means, float)
    return VecchiaPrediction(mean, Upp, pred_order)
