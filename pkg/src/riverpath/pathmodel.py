"""Process PLS path modelling over a directed network of data blocks.

Each block holds one site's concentration matrix (rows = synchronized water
volumes). The outer model extracts latent variables per block with SIMPLS,
the inner model regresses every block's latent variables on those of its
upstream neighbours, and the fitted chain predicts downstream concentration
profiles in original units.
"""

from __future__ import annotations

import csv
import json
import statistics
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np


class PathModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SIMPLS


@dataclass
class SimplsFit:
    """de Jong's SIMPLS on centered data.

    ``weights`` (R) map centered X to scores, ``scores`` (T) are unit-norm and
    mutually orthogonal, ``x_loadings`` = X'T, ``y_loadings`` = Y'T and
    ``coef`` = R Q' so that ``Y_hat = (X - x_mean) @ coef + y_mean``.
    """

    weights: np.ndarray
    scores: np.ndarray
    x_loadings: np.ndarray
    y_loadings: np.ndarray
    y_scores: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray

    @property
    def n_lv(self) -> int:
        return self.weights.shape[1]

    def coef(self, n_lv: int | None = None) -> np.ndarray:
        a = self.n_lv if n_lv is None else n_lv
        return self.weights[:, :a] @ self.y_loadings[:, :a].T

    def predict(self, X: np.ndarray, n_lv: int | None = None) -> np.ndarray:
        return (np.asarray(X, float) - self.x_mean) @ self.coef(n_lv) + self.y_mean

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, float) - self.x_mean) @ self.weights


def _orthogonal_score(X0, r, T, R):
    """Score ``X0 r`` made orthogonal to the earlier scores, with ``r`` adjusted to match.

    Exact arithmetic keeps SIMPLS scores orthogonal through the deflation of
    the cross product; rounding does not once that cross product is nearly
    exhausted, so the projection is applied explicitly (twice, for accuracy).
    """
    t = X0 @ r
    t = t - t.mean()
    for _ in range(2):
        if T.shape[1]:
            c = T.T @ t
            t = t - T @ c
            r = r - R @ c
    return t, r


def simpls_fit(X: np.ndarray, Y: np.ndarray, n_lv: int) -> SimplsFit:
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise PathModelError("X and Y must be 2-d with matching rows")
    N, p = X.shape
    if N < 2:
        raise PathModelError("SIMPLS needs at least two observations")
    if not 1 <= n_lv <= min(N - 1, p):
        raise PathModelError(f"n_lv={n_lv} outside 1..{min(N - 1, p)}")
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    X0, Y0 = X - x_mean, Y - y_mean
    if np.any(np.sum(X0 ** 2, axis=0) <= 1e-300):
        raise PathModelError("zero-variance column in X; scale or drop it first")
    q_dim = Y.shape[1]
    R = np.zeros((p, n_lv))
    T = np.zeros((N, n_lv))
    P = np.zeros((p, n_lv))
    Q = np.zeros((q_dim, n_lv))
    U = np.zeros((N, n_lv))
    V = np.zeros((p, n_lv))
    S = X0.T @ Y0
    x_norm = np.linalg.norm(X0)
    for a in range(n_lv):
        if q_dim == 1:
            r = S[:, 0].copy()
        else:
            # dominant left singular vector of the deflated cross product
            u_, s_, _ = np.linalg.svd(S, full_matrices=False)
            r = u_[:, 0] * s_[0]
        if not np.any(r):
            r = np.zeros(p)
            r[a % p] = 1.0
        t, r = _orthogonal_score(X0, r, T[:, :a], R[:, :a])
        nt = np.linalg.norm(t)
        if nt <= 1e-12 * x_norm:
            # cross product exhausted (earlier LVs already fit Y): continue along
            # the largest remaining X direction so scores stay orthogonal
            resid = X0 - T[:, :a] @ (T[:, :a].T @ X0)
            r = np.linalg.svd(resid, full_matrices=False)[2][0]
            t, r = _orthogonal_score(X0, r, T[:, :a], R[:, :a])
            nt = np.linalg.norm(t)
            if nt <= 1e-12 * x_norm:
                raise PathModelError("degenerate SIMPLS component")
        t /= nt
        r /= nt
        pa = X0.T @ t
        qa = Y0.T @ t
        ua = Y0 @ qa
        v = pa.copy()
        if a > 0:
            v -= V[:, :a] @ (V[:, :a].T @ pa)
            v -= V[:, :a] @ (V[:, :a].T @ v)
            ua -= T[:, :a] @ (T[:, :a].T @ ua)
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else v
        S = S - np.outer(v, v @ S)
        R[:, a], T[:, a], P[:, a], Q[:, a], U[:, a], V[:, a] = r, t, pa, qa, ua, v
    return SimplsFit(R, T, P, Q, U, x_mean, y_mean)


# ---------------------------------------------------------------------------
# double cross-validation


class LvChoice(NamedTuple):
    n_lv: int
    outer_choices: tuple[int, ...]
    outer_rmsep: tuple[float, ...]
    fallback: bool


def _canonical_order(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Row order determined by content alone, so folds follow rows when the
    input is permuted."""
    Z = np.hstack([X, Y])
    return np.lexsort(Z.T[::-1])


def _folds(n: int, k: int, rng: np.random.Generator, order: np.ndarray) -> np.ndarray:
    assign = np.empty(n, dtype=int)
    perm = rng.permutation(n)
    assign[order[perm]] = np.arange(n) % k
    return assign


def _rmsecv_curve(X, Y, max_lv, n_folds, rng, order) -> np.ndarray:
    N = X.shape[0]
    k = min(n_folds, N)
    fold = _folds(N, k, rng, order)
    sse = np.zeros(max_lv)
    for f in range(k):
        tr, te = fold != f, fold == f
        Xtr = X[tr]
        keep = np.std(Xtr, axis=0) > 0
        a_max = min(max_lv, int(tr.sum()) - 1, int(keep.sum()))
        fit = simpls_fit(Xtr[:, keep], Y[tr], a_max)
        for a in range(1, max_lv + 1):
            pred = fit.predict(X[te][:, keep], min(a, a_max))
            sse[a - 1] += np.sum((Y[te] - pred) ** 2)
    return np.sqrt(sse / Y.size)


def _max_lv(X: np.ndarray, max_lv: int | None, n_train: int) -> int:
    cap = min(X.shape[1], n_train - 1)
    return max(1, cap if max_lv is None else min(max_lv, cap))


def select_lv_doublecv(X, Y, max_lv: int | None = None, outer_folds: int = 5,
                       inner_folds: int = 5, seed: int = 0) -> LvChoice:
    """Pick a latent-variable count by nested cross-validation.

    Inner folds choose the count minimizing RMSECV on each outer training
    set; the outer test fold records the prediction error of that choice.
    The final count is the (lower) median of the outer choices. Fewer than
    10 rows falls back to a single 5-fold CV.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N = X.shape[0]
    rng = np.random.default_rng(seed)
    order = _canonical_order(X, Y)
    if N < 10:
        a_max = _max_lv(X, max_lv, N - N // min(5, N) if N > 2 else N)
        curve = _rmsecv_curve(X, Y, a_max, 5, rng, order)
        best = int(np.argmin(curve)) + 1
        return LvChoice(best, (best,), (float(curve[best - 1]),), True)
    k = min(outer_folds, N)
    fold = _folds(N, k, rng, order)
    choices, rmsep = [], []
    for f in range(k):
        tr, te = fold != f, fold == f
        Xtr, Ytr = X[tr], Y[tr]
        n_inner_train = int(tr.sum()) - int(np.ceil(tr.sum() / inner_folds))
        a_max = _max_lv(X, max_lv, n_inner_train)
        curve = _rmsecv_curve(Xtr, Ytr, a_max, inner_folds, rng, _canonical_order(Xtr, Ytr))
        best = int(np.argmin(curve)) + 1
        keep = np.std(Xtr, axis=0) > 0
        fit = simpls_fit(Xtr[:, keep], Ytr, min(best, int(tr.sum()) - 1, int(keep.sum())))
        err = np.sqrt(np.mean((Y[te] - fit.predict(X[te][:, keep])) ** 2))
        choices.append(best)
        rmsep.append(float(err))
    return LvChoice(int(statistics.median_low(choices)), tuple(choices), tuple(rmsep), False)


# ---------------------------------------------------------------------------
# path specification and scaling


@dataclass(frozen=True)
class PathSpec:
    blocks: tuple[tuple[str, int], ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        ids = [b for b, _ in self.blocks]
        if len(set(ids)) != len(ids):
            raise PathModelError("duplicate block id")
        for b, n in self.blocks:
            if n < 1:
                raise PathModelError(f"block {b} has no variables")
        for s, t in self.edges:
            if s not in ids or t not in ids:
                raise PathModelError(f"edge {s}->{t} references an unknown block")
            if s == t:
                raise PathModelError(f"self-loop on {s}")
        if len(set(self.edges)) != len(self.edges):
            raise PathModelError("duplicate edge")
        self.topological_order()

    @property
    def block_ids(self) -> list[str]:
        return [b for b, _ in self.blocks]

    def predecessors(self, block: str) -> list[str]:
        return [s for s, t in self.edges if t == block]

    def successors(self, block: str) -> list[str]:
        return [t for s, t in self.edges if s == block]

    def topological_order(self) -> list[str]:
        indeg = {b: 0 for b in self.block_ids}
        for _, t in self.edges:
            indeg[t] += 1
        queue = deque(b for b in self.block_ids if indeg[b] == 0)
        order = []
        while queue:
            b = queue.popleft()
            order.append(b)
            for t in self.successors(b):
                indeg[t] -= 1
                if indeg[t] == 0:
                    queue.append(t)
        if len(order) != len(self.block_ids):
            raise PathModelError("path specification contains a cycle")
        return order


def load_edges(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"source", "target"} <= set(reader.fieldnames):
            raise PathModelError(f"{path}: edge list needs columns source,target")
        return [(r["source"].strip(), r["target"].strip()) for r in reader]


def save_edges(path: str | Path, edges: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target"])
        w.writerows(edges)


@dataclass
class BlockScaling:
    """Per-variable autoscaling followed by ``1/sqrt(p)`` block weighting."""

    mean: np.ndarray
    std: np.ndarray
    block_factor: float

    @classmethod
    def fit(cls, X: np.ndarray) -> "BlockScaling":
        X = np.asarray(X, float)
        std = X.std(axis=0, ddof=1)
        if np.any(~(std > 0)):
            bad = np.nonzero(~(std > 0))[0].tolist()
            raise PathModelError(f"zero-variance variables at columns {bad}")
        return cls(X.mean(axis=0), std, 1.0 / np.sqrt(X.shape[1]))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, float) - self.mean) / self.std * self.block_factor

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, float) / self.block_factor * self.std + self.mean


# ---------------------------------------------------------------------------
# outer and inner model


@dataclass
class BlockOuter:
    block_id: str
    n_lv: int
    scores: np.ndarray                   # N x a, orthonormal columns
    x_loadings: np.ndarray               # p x a, used for reconstruction
    r2: float
    terminal: bool
    weights: np.ndarray | None = None    # p x a (non-terminal: new data -> scores)
    y_loadings: np.ndarray | None = None # terminal: Q of the joint predecessor regression
    lv_choice: LvChoice | None = None


@dataclass
class OuterModel:
    blocks: dict[str, BlockOuter]
    scalings: dict[str, BlockScaling]
    n_obs: int


@dataclass
class InnerBlock:
    target: str
    predecessors: list[str]
    n_lv: int
    coef: np.ndarray                    # (sum a_z) x a_m
    coef_blocks: dict[str, np.ndarray]
    p2: float
    partial_p2: dict[str, float]
    lv_choice: LvChoice | None = None


@dataclass
class InnerModel:
    blocks: dict[str, InnerBlock]


@dataclass
class PathModel:
    spec: PathSpec
    outer: OuterModel
    inner: InnerModel
    seed: int = 0
    settings: dict = field(default_factory=dict)


def _block_seed(seed: int, *parts) -> int:
    return zlib.crc32("|".join([str(seed), *map(str, parts)]).encode())


def _check_blocks(blocks: Mapping[str, np.ndarray], spec: PathSpec) -> int:
    ns = set()
    for b, p in spec.blocks:
        if b not in blocks:
            raise PathModelError(f"no data for block {b}")
        X = np.asarray(blocks[b])
        if X.ndim != 2 or X.shape[1] != p:
            raise PathModelError(f"block {b}: expected {p} columns, got {X.shape}")
        ns.add(X.shape[0])
    if len(ns) != 1:
        raise PathModelError("blocks do not share the same rows")
    return ns.pop()


def spec_from_blocks(blocks: Mapping[str, np.ndarray], edges: Sequence[tuple[str, str]]) -> PathSpec:
    return PathSpec(tuple((b, int(np.asarray(X).shape[1])) for b, X in blocks.items()), tuple(edges))


def _orthonormal_basis(M: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if len(s) == 0 or s[0] == 0:
        raise PathModelError("empty score space")
    return U[:, s > rel_tol * s[0]]


def fit_outer(blocks: Mapping[str, np.ndarray], spec: PathSpec, max_lv: int | None = None,
              outer_folds: int = 5, inner_folds: int = 5, seed: int = 0) -> OuterModel:
    """Outer model: per-block latent variables and explained variance R^2.

    Every variable is autoscaled and each block weighted to unit total
    variance. A block with successors is regressed (SIMPLS) onto the joined
    variables of all its successors; its scores are the SIMPLS X-scores and
    ``R^2 = trace(L'L)/(N-1)``. A block without successors is the target of
    a joint regression from its predecessors' variables; ``R^2`` uses the
    Y-loadings Q of that regression and its scores are the orthonormalized
    Y-scores.
    """
    N = _check_blocks(blocks, spec)
    scalings = {b: BlockScaling.fit(blocks[b]) for b in spec.block_ids}
    Z = {b: scalings[b].transform(blocks[b]) for b in spec.block_ids}
    out = {}
    for b in spec.topological_order():
        succ = spec.successors(b)
        if succ:
            Y = np.hstack([Z[s] for s in succ])
            choice = select_lv_doublecv(Z[b], Y, max_lv, outer_folds, inner_folds, _block_seed(seed, "outer", b))
            fit = simpls_fit(Z[b], Y, choice.n_lv)
            L = fit.x_loadings
            r2 = float(np.trace(L.T @ L) / (N - 1))
            out[b] = BlockOuter(b, choice.n_lv, fit.scores, L, r2, False, weights=fit.weights,
                                lv_choice=choice)
        else:
            pred = spec.predecessors(b)
            if not pred:
                raise PathModelError(f"block {b} is not connected")
            X = np.hstack([Z[s] for s in pred])
            choice = select_lv_doublecv(X, Z[b], max_lv, outer_folds, inner_folds, _block_seed(seed, "outer", b))
            fit = simpls_fit(X, Z[b], choice.n_lv)
            Q = fit.y_loadings
            r2 = float(np.trace(Q.T @ Q) / (N - 1))
            scores = _orthonormal_basis(Z[b] @ Q)
            out[b] = BlockOuter(b, scores.shape[1], scores, Z[b].T @ scores, r2, True,
                                y_loadings=Q, lv_choice=choice)
    return OuterModel(out, scalings, N)


def inner_regression(target: np.ndarray, predictors: Sequence[np.ndarray], names: Sequence[str],
                     max_lv: int | None = None, outer_folds: int = 5, inner_folds: int = 5,
                     seed: int = 0) -> tuple[int, np.ndarray, float, dict[str, float], LvChoice]:
    """Regress one block's scores on its predecessors' scores.

    Returns (n_lv, coefficients, P^2, partial P^2 per predictor, lv audit).
    ``P^2 = 1 - SS(residual)/SS(target)``. Partial values split ``P^2`` in
    proportion to the sum of squares each predictor's share of the joint
    prediction, ``chi_z B_z``, removes from the target; negative shares count
    as zero, and an all-zero split is shared equally.
    """
    chi = np.hstack(predictors)
    xi = np.asarray(target, float)
    choice = select_lv_doublecv(chi, xi, max_lv, outer_folds, inner_folds, seed)
    n_lv = min(choice.n_lv, chi.shape[1], chi.shape[0] - 1)
    fit = simpls_fit(chi, xi, n_lv)
    coef = fit.coef()
    ss_tot = float(np.sum((xi - xi.mean(axis=0)) ** 2))
    resid = xi - fit.predict(chi)
    p2 = float(np.clip(1.0 - np.sum(resid ** 2) / ss_tot, 0.0, 1.0)) if ss_tot > 0 else 0.0
    contrib = []
    start = 0
    xi_c = xi - xi.mean(axis=0)
    for z in predictors:
        width = z.shape[1]
        part = (z - fit.x_mean[start:start + width]) @ coef[start:start + width]
        contrib.append(max(ss_tot - float(np.sum((xi_c - part) ** 2)), 0.0))
        start += width
    total = sum(contrib)
    if total > 0:
        shares = [c / total for c in contrib]
    else:
        shares = [1.0 / len(predictors)] * len(predictors)
    partial = {n: p2 * s for n, s in zip(names, shares)}
    # make the split sum exactly to P^2
    last = names[-1]
    partial[last] = p2 - sum(v for n, v in partial.items() if n != last)
    return n_lv, coef, p2, partial, choice


def fit_inner(outer: OuterModel, spec: PathSpec, max_lv: int | None = None, outer_folds: int = 5,
              inner_folds: int = 5, seed: int = 0) -> InnerModel:
    out = {}
    for b in spec.topological_order():
        pred = spec.predecessors(b)
        if not pred:
            continue
        preds = [outer.blocks[z].scores for z in pred]
        n_lv, coef, p2, partial, choice = inner_regression(
            outer.blocks[b].scores, preds, pred, max_lv, outer_folds, inner_folds,
            _block_seed(seed, "inner", b))
        blocks_coef, start = {}, 0
        for z, s in zip(pred, preds):
            blocks_coef[z] = coef[start:start + s.shape[1]]
            start += s.shape[1]
        out[b] = InnerBlock(b, pred, n_lv, coef, blocks_coef, p2, partial, choice)
    return InnerModel(out)


def fit_path_model(blocks: Mapping[str, np.ndarray], edges: Sequence[tuple[str, str]],
                   max_lv: int | None = None, outer_folds: int = 5, inner_folds: int = 5,
                   seed: int = 0) -> PathModel:
    """Outer then inner model for the given blocks and directed edges."""
    spec = spec_from_blocks(blocks, edges)
    outer = fit_outer(blocks, spec, max_lv, outer_folds, inner_folds, seed)
    inner = fit_inner(outer, spec, max_lv, outer_folds, inner_folds, seed)
    return PathModel(spec, outer, inner, seed,
                     dict(max_lv=max_lv, outer_folds=outer_folds, inner_folds=inner_folds))


# ---------------------------------------------------------------------------
# prediction


def predict_block(model: PathModel, target: str, predecessor_data: Mapping[str, np.ndarray]) -> np.ndarray:
    """Predict a block's concentration matrix from its predecessors' raw data.

    Raw predecessor data are scaled, projected onto their outer weights,
    pushed through the inner regression, mapped back to the target's
    variables with its outer loadings, and unscaled.
    """
    if target not in model.inner.blocks:
        if target not in model.spec.block_ids:
            raise PathModelError(f"unknown block {target}")
        raise PathModelError(f"block {target} has no predecessors to predict from")
    inner = model.inner.blocks[target]
    chi = []
    for z in inner.predecessors:
        if z not in predecessor_data:
            raise PathModelError(f"missing data for predecessor {z}")
        bo = model.outer.blocks[z]
        Zs = model.outer.scalings[z].transform(predecessor_data[z])
        chi.append(Zs @ bo.weights)
    chi = np.hstack(chi)
    # scores of the training data are centered, so the inner model has no intercept
    xi_hat = chi @ inner.coef
    tb = model.outer.blocks[target]
    Z_hat = xi_hat @ tb.x_loadings.T
    return model.outer.scalings[target].inverse(Z_hat)


def nrmse(measured, predicted) -> float:
    """Root-mean-square error divided by the (population) std of ``measured``."""
    m = np.asarray(measured, float).ravel()
    p = np.asarray(predicted, float).ravel()
    if m.shape != p.shape or len(m) < 2:
        raise PathModelError("need equal-length vectors of length >= 2")
    sd = m.std()
    if not sd > 0:
        raise PathModelError("measured profile has zero standard deviation")
    return float(np.sqrt(np.mean((m - p) ** 2)) / sd)


# ---------------------------------------------------------------------------
# reporting and persistence


class BlockRow(NamedTuple):
    block: str
    n_lv: int
    r2: float
    p2: float | None


class EdgeRow(NamedTuple):
    source: str
    target: str
    partial_p2: float


def report_model(model: PathModel) -> tuple[list[BlockRow], list[EdgeRow]]:
    blocks = []
    for b in model.spec.block_ids:
        bo = model.outer.blocks[b]
        ib = model.inner.blocks.get(b)
        blocks.append(BlockRow(b, bo.n_lv, bo.r2, ib.p2 if ib else None))
    edges = []
    for s, t in model.spec.edges:
        edges.append(EdgeRow(s, t, model.inner.blocks[t].partial_p2[s]))
    return blocks, edges


def report_rows(model: PathModel) -> list[tuple[str, str, str, str, float]]:
    """Flat ``kind,id,source,target,value`` rows."""
    blocks, edges = report_model(model)
    rows = []
    for r in blocks:
        rows.append(("R2", r.block, "", "", r.r2))
        rows.append(("n_lv", r.block, "", "", float(r.n_lv)))
        if r.p2 is not None:
            rows.append(("P2", r.block, "", "", r.p2))
    for e in edges:
        rows.append(("partial_P2", f"{e.source}->{e.target}", e.source, e.target, e.partial_p2))
    return rows


def format_summary(model: PathModel) -> str:
    blocks, edges = report_model(model)
    lines = ["block   LVs   R2(%)   P2(%)"]
    for r in blocks:
        p2 = "" if r.p2 is None else f"{100 * r.p2:.1f}"
        lines.append(f"{r.block:<7} {r.n_lv:>3} {100 * r.r2:>7.1f} {p2:>7}")
    lines.append("")
    lines.append("edge            partial P2(%)")
    for e in edges:
        lines.append(f"{e.source + '->' + e.target:<15} {100 * e.partial_p2:>8.1f}")
    return "\n".join(lines)


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def model_to_dict(model: PathModel) -> dict:
    return {
        "spec": {"blocks": [list(b) for b in model.spec.blocks], "edges": [list(e) for e in model.spec.edges]},
        "seed": model.seed,
        "settings": model.settings,
        "n_obs": model.outer.n_obs,
        "scalings": {b: {"mean": _arr(s.mean), "std": _arr(s.std), "block_factor": s.block_factor}
                     for b, s in model.outer.scalings.items()},
        "outer": {b: {"n_lv": o.n_lv, "r2": o.r2, "terminal": o.terminal, "scores": _arr(o.scores),
                      "x_loadings": _arr(o.x_loadings), "weights": _arr(o.weights),
                      "y_loadings": _arr(o.y_loadings),
                      "lv_outer_choices": list(o.lv_choice.outer_choices) if o.lv_choice else None}
                  for b, o in model.outer.blocks.items()},
        "inner": {b: {"predecessors": i.predecessors, "n_lv": i.n_lv, "coef": _arr(i.coef),
                      "p2": i.p2, "partial_p2": i.partial_p2}
                  for b, i in model.inner.blocks.items()},
    }


def model_from_dict(d: dict) -> PathModel:
    spec = PathSpec(tuple((b, int(n)) for b, n in d["spec"]["blocks"]),
                    tuple((s, t) for s, t in d["spec"]["edges"]))
    scal = {b: BlockScaling(np.array(s["mean"]), np.array(s["std"]), float(s["block_factor"]))
            for b, s in d["scalings"].items()}

    def opt(a):
        return None if a is None else np.array(a, dtype=float)

    outer = {}
    for b, o in d["outer"].items():
        sc = np.array(o["scores"], dtype=float)
        outer[b] = BlockOuter(b, int(o["n_lv"]), sc, np.array(o["x_loadings"], dtype=float),
                              float(o["r2"]), bool(o["terminal"]), opt(o["weights"]), opt(o["y_loadings"]))
    inner = {}
    for b, i in d["inner"].items():
        coef = np.array(i["coef"], dtype=float)
        blocks_coef, start = {}, 0
        for z in i["predecessors"]:
            w = outer[z].scores.shape[1]
            blocks_coef[z] = coef[start:start + w]
            start += w
        inner[b] = InnerBlock(b, list(i["predecessors"]), int(i["n_lv"]), coef, blocks_coef,
                              float(i["p2"]), {k: float(v) for k, v in i["partial_p2"].items()})
    return PathModel(spec, OuterModel(outer, scal, int(d["n_obs"])), InnerModel(inner),
                     int(d.get("seed", 0)), dict(d.get("settings", {})))


def save_model(model: PathModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


def load_model(path: str | Path) -> PathModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def block_variances(blocks: Mapping[str, np.ndarray]) -> dict[str, float]:
    return {b: float(np.var(np.asarray(X, float), axis=0, ddof=1).sum()) for b, X in blocks.items()}


def group_edges(edges: Sequence[tuple[str, str]]) -> dict[str, list[str]]:
    out = defaultdict(list)
    for s, t in edges:
        out[t].append(s)
    return dict(out)
