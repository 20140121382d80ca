"""Windowed PARAFAC2 deconvolution of aligned GC-MS sample sets.

Each sample slab ``T_k`` (mass channels x retention times) is modelled as
``A diag(c_k) B_k^T`` with ``B_k = P_k B`` and orthonormal ``P_k``, so the
cross product ``B_k^T B_k`` is the same for every sample while the elution
profiles themselves may shift. Mass spectra ``A`` are kept non-negative.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import nnls

log = logging.getLogger(__name__)

CHEMICAL = "chemical"
BASELINE = "baseline"


class Parafac2Error(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    window_id: int
    j_start: int
    j_end: int
    rt_start: float
    rt_end: float

    @property
    def width(self) -> int:
        return self.j_end - self.j_start


def segment_windows(grid: np.ndarray, boundaries: Sequence[float]) -> list[WindowSpec]:
    """Contiguous windows between consecutive retention-time boundaries.

    Boundaries snap to the nearest grid point. The last window includes the
    final boundary point, so windows tile ``[b_0, b_last]`` without gaps.
    """
    grid = np.asarray(grid, float)
    b = np.asarray(boundaries, float)
    if len(b) < 2:
        raise Parafac2Error("need at least two boundaries")
    if np.any(np.diff(b) <= 0):
        raise Parafac2Error("boundaries must be strictly increasing")
    step = grid[1] - grid[0] if len(grid) > 1 else 1.0
    if b[0] < grid[0] - 0.5 * step or b[-1] > grid[-1] + 0.5 * step:
        raise Parafac2Error("boundary outside the retention-time grid")
    idx = np.array([int(np.argmin(np.abs(grid - v))) for v in b])
    if np.any(np.diff(idx) <= 0):
        raise Parafac2Error("boundaries collapse onto the same grid point")
    ends = idx[1:].copy()
    ends[-1] += 1
    return [WindowSpec(w, int(idx[w]), int(ends[w]), float(b[w]), float(b[w + 1]))
            for w in range(len(b) - 1)]


@dataclass
class Parafac2Model:
    """Fitted PARAFAC2 model for one window.

    ``A`` columns are unit-norm mass spectra, ``B`` columns are unit-norm so
    every ``B_k`` column is too; scale lives in ``C``.
    """

    A: np.ndarray            # I x F
    B: np.ndarray            # F x F
    P: np.ndarray            # K x J x F, orthonormal columns per sample
    C: np.ndarray            # K x F
    sse: float
    ss_total: float
    iterations: int
    converged: bool
    objective_history: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    core_consistency: float = float("nan")
    start_index: int = 0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def Bk(self) -> np.ndarray:
        """Elution profiles per sample, K x J x F."""
        return self.P @ self.B

    @property
    def fit_percent(self) -> float:
        return 100.0 * (1.0 - self.sse / self.ss_total)

    @property
    def phi(self) -> np.ndarray:
        return self.B.T @ self.B

    def reconstruct(self) -> np.ndarray:
        return np.einsum("if,kf,kjf->kij", self.A, self.C, self.Bk)

    def concentrations(self) -> np.ndarray:
        """Relative concentrations with per-slab signs resolved (K x F).

        With non-negative spectra, a slab's contribution of component f is
        ``c_kf * A_f * B_k[:, f]'``. When elution profiles barely overlap the
        sign of ``c_kf`` and ``B_k[:, f]`` can flip together at no cost. Each
        entry is signed by the agreement of its profile with the component's
        consensus profile, so slabs where the component is absent (profile
        fitted to noise) scatter around zero instead of being biased upward.
        """
        return self.C * self.slab_signs()

    def slab_signs(self) -> np.ndarray:
        """Per-slab signs (K x F, entries +-1) aligning each profile with the consensus."""
        ref = self.mean_elution(weighted=True)
        agree = np.einsum("kjf,jf->kf", self.Bk, ref)
        return np.where(agree < 0, -1.0, 1.0)

    def signed_elution(self) -> np.ndarray:
        """Elution profiles with the slab signs of :meth:`concentrations` applied (K x J x F)."""
        return self.Bk * self.slab_signs()[:, None, :]

    def profile_agreement(self) -> np.ndarray:
        """Cosine between each slab's elution profile and the consensus (K x F).

        Values near one mean the component elutes with the expected peak shape
        in that sample; low values mean the profile was fitted to something
        else and the component is most likely absent.
        """
        ref = self.mean_elution(weighted=True)
        rn = np.linalg.norm(ref, axis=0)
        bn = np.linalg.norm(self.Bk, axis=1)
        den = bn * rn[None, :]
        num = np.abs(np.einsum("kjf,jf->kf", self.Bk, ref))
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    def mean_elution(self, weighted: bool = False) -> np.ndarray:
        """Average elution profile per component (J x F).

        ``weighted=True`` weights each slab by ``|C[k, f]|`` after flipping
        its profile to positive area; slabs where a component is absent carry
        an arbitrary profile and are then ignored.
        """
        if not weighted:
            return self.Bk.mean(axis=0)
        Bk = self.Bk
        w = np.abs(self.C) * np.where(Bk.sum(axis=1) < 0, -1.0, 1.0)
        tot = np.abs(self.C).sum(axis=0)
        tot[tot == 0] = 1.0
        return np.einsum("kjf,kf->jf", Bk, w) / tot


def _as_stack(stack) -> np.ndarray:
    X = np.asarray(stack, dtype=float)
    if X.ndim != 3:
        raise Parafac2Error("stack must be K x I x J")
    if not np.all(np.isfinite(X)):
        raise Parafac2Error("stack contains non-finite values")
    return X


def _compress(X: np.ndarray):
    """Per-slab QR of ``T_k^T``; the optimal ``P_k`` lies in the span of ``Q_k``."""
    K, I, J = X.shape
    if J <= I:
        return X, None
    Q, R = np.linalg.qr(X.transpose(0, 2, 1))  # K x J x I, K x I x I
    return R.transpose(0, 2, 1), Q


def _nnls_rows(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Row-wise ``min_a a'Ga - 2a'r, a >= 0``."""
    F = G.shape[0]
    Gr = G + np.eye(F) * (1e-12 * max(np.trace(G) / F, 1e-300))
    try:
        cf = cho_factor(Gr)
        X = cho_solve(cf, rhs.T).T
    except np.linalg.LinAlgError:
        X = rhs @ np.linalg.pinv(Gr)
        cf = None
    bad = np.nonzero(np.any(X < 0, axis=1))[0]
    if len(bad):
        w, V = np.linalg.eigh(Gr)
        w = np.clip(w, 0, None)
        R = (V * np.sqrt(w)).T                      # R'R = G
        Rinv_t = V / np.where(w > 0, np.sqrt(w), np.inf)  # maps r -> R^{-T} r
        for i in bad:
            d = Rinv_t.T @ rhs[i]
            X[i], _ = nnls(R, d, maxiter=50 * F)
    return X


def _solve_sym(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``rhs @ inv(G)`` for symmetric PSD G, falling back to the pseudo-inverse."""
    try:
        return cho_solve(cho_factor(G), rhs.T).T
    except np.linalg.LinAlgError:
        return rhs @ np.linalg.pinv(G)


class _State:
    __slots__ = ("A", "B", "C", "Pc", "sse", "history", "it")

    def __init__(self, A, B, C):
        self.A, self.B, self.C = A, B, C
        self.Pc = None
        self.sse = np.inf
        self.history: list[float] = []
        self.it = 0


def _sweep(Xc: np.ndarray, ss_total: float, st: _State, nonneg: bool) -> None:
    A, B, C = st.A, st.B, st.C
    # P_k: orthogonal Procrustes on X_k^T A D_k B^T
    W = np.einsum("if,kf->kif", A, C) @ B.T                 # K x I x F
    M = Xc.transpose(0, 2, 1) @ W                           # K x m x F
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    Pc = U @ Vt
    Y = Xc @ Pc                                             # K x I x F, Y_k ~ A D_k B^T
    AtA, CtC = A.T @ A, C.T @ C
    B = _solve_sym(AtA * CtC, np.einsum("kif,ig,kg->fg", Y, A, C))
    BtB = B.T @ B
    rhs = np.einsum("kif,fg,kg->ig", Y, B, C)
    A = _nnls_rows(BtB * CtC, rhs) if nonneg else _solve_sym(BtB * CtC, rhs)
    AtA = A.T @ A
    C = _solve_sym(BtB * AtA, np.einsum("if,kig,gf->kf", A, Y, B))
    # rebalance scale into C (objective unchanged)
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    A, B, C = A / na, B / nb, C * (na * nb)
    AtA, BtB = A.T @ A, B.T @ B
    cross = np.einsum("kif,if,kf->", Y @ B, A, C)   # sum_k <Y_k B, A D_k> = sum_k <Y_k, A D_k B^T>
    model_ss = np.einsum("kf,fg,kg->", C, AtA * BtB, C)
    st.A, st.B, st.C, st.Pc = A, B, C, Pc
    st.sse = max(ss_total - 2.0 * cross + model_ss, 0.0)
    st.history.append(st.sse)
    st.it += 1


def _init_state(Xc: np.ndarray, F: int, rng: np.random.Generator | None) -> _State:
    K, I, _ = Xc.shape
    if rng is None:
        # rational start: dominant eigenvectors of sum_k X_k X_k^T
        S = np.einsum("kim,kjm->ij", Xc, Xc)
        w, V = np.linalg.eigh(S)
        A = np.abs(V[:, ::-1][:, :F]) + 1e-3
        return _State(A, np.eye(F), np.ones((K, F)))
    A = rng.random((I, F))
    B = np.eye(F) + 0.1 * rng.standard_normal((F, F))
    C = rng.random((K, F)) + 0.1
    return _State(A, B, C)


def _loss(Xc: np.ndarray, ss_total: float, A, B, C) -> float:
    """Objective with every ``P_k`` at its Procrustes optimum."""
    W = np.einsum("if,kf->kif", A, C) @ B.T
    nuc = np.linalg.svd(Xc.transpose(0, 2, 1) @ W, compute_uv=False).sum()
    model_ss = np.einsum("kf,fg,kg->", C, (A.T @ A) * (B.T @ B), C)
    return max(ss_total - 2.0 * nuc + model_ss, 0.0)


def _run(Xc, ss_total, st, nonneg, max_iter, tol, absolute=False):
    converged = False
    while st.it < max_iter:
        prev = st.sse
        old = (st.A, st.B, st.C)
        _sweep(Xc, ss_total, st, nonneg)
        if st.it >= 3 and np.isfinite(prev):
            # line search along the last update; kept only when it lowers the loss
            step = st.it ** (1.0 / 3.0)
            A = st.A + step * (st.A - old[0])
            if nonneg:
                A = np.maximum(A, 0.0)
            B = st.B + step * (st.B - old[1])
            C = st.C + step * (st.C - old[2])
            sse = _loss(Xc, ss_total, A, B, C)
            if sse < st.sse:
                st.A, st.B, st.C, st.sse = A, B, C, sse
                st.history[-1] = sse
        scale = ss_total if absolute else prev
        if np.isfinite(prev) and (abs(prev - st.sse) < tol * scale or st.sse <= 1e-15 * ss_total):
            converged = True
            break
    return converged


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a tuple of ints/strings."""
    key = "|".join(str(p) for p in parts).encode()
    return zlib.crc32(key)


def fit_parafac2(stack, rank: int, n_starts: int = 5, max_iter: int = 2000, tol: float = 1e-8,
                 seed: int = 0, nonneg: bool = True, screen_iter: int = 200,
                 compute_core: bool = True) -> Parafac2Model:
    """Fit a PARAFAC2 model by direct-fitting alternating least squares.

    Parameters
    ----------
    stack : array, K x I x J
        Aligned sample slabs of one retention-time window.
    rank : int
        Number of components F, ``1 <= F <= min(I, J)``.
    n_starts : int
        Number of initializations. Start 0 uses the dominant eigenvectors of
        the summed slab cross products; the rest are random draws seeded
        from ``seed``. Every start runs at most ``screen_iter`` sweeps,
        stopping early once the decrease falls below ``tol`` times the total
        sum of squares; the best one is then iterated to full convergence.
        ``screen_iter=0`` runs every start to full convergence and keeps the
        best.
    max_iter, tol : convergence control. Stops when the decrease of the
        residual sum of squares falls below ``tol`` times its previous
        value.
    nonneg : bool
        Non-negative mass spectra (row-wise NNLS update of ``A``).
    """
    X = _as_stack(stack)
    K, I, J = X.shape
    F = int(rank)
    if K < 2:
        raise Parafac2Error("need at least two samples")
    if F < 1 or F > min(I, J):
        raise Parafac2Error(f"rank {F} outside 1..{min(I, J)}")
    ss_total = float(np.sum(X * X))
    if ss_total == 0:
        raise Parafac2Error("all-zero stack")
    Xc, Q = _compress(X)
    rng = np.random.default_rng(seed)
    starts = [_init_state(Xc, F, None)] + [_init_state(Xc, F, rng) for _ in range(max(n_starts, 1) - 1)]

    if screen_iter > 0 and len(starts) > 1:
        for st in starts:
            _run(Xc, ss_total, st, nonneg, min(screen_iter, max_iter), tol, absolute=True)
        best_i = int(np.argmin([st.sse for st in starts]))
        best = starts[best_i]
        converged = _run(Xc, ss_total, best, nonneg, max_iter, tol)
    else:
        results = []
        for st in starts:
            results.append(_run(Xc, ss_total, st, nonneg, max_iter, tol))
        best_i = int(np.argmin([st.sse for st in starts]))
        best, converged = starts[best_i], results[best_i]

    P = best.Pc if Q is None else Q @ best.Pc
    model = Parafac2Model(best.A.copy(), best.B.copy(), P, best.C.copy(), best.sse, ss_total,
                          best.it, converged, np.array(best.history), start_index=best_i)
    _canonicalize(model)
    model.sse = float(np.sum((X - model.reconstruct()) ** 2))
    if compute_core:
        model.core_consistency = core_consistency(model, X)
    return model


def _canonicalize(model: Parafac2Model) -> None:
    """Unit-norm spectra and elution columns, positive concentration sums,
    components ordered by elution position."""
    A, B, C = model.A, model.B, model.C
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    A, B, C = A / na, B / nb, C * (na * nb)
    sign = np.where(C.sum(axis=0) < 0, -1.0, 1.0)
    B, C = B * sign, C * sign
    model.A, model.B, model.C = A, B, C
    prof = np.abs(model.mean_elution())
    order = np.argsort(np.argmax(prof, axis=0), kind="stable")
    model.A, model.B, model.C = A[:, order], B[:, order], C[:, order]


def fit_percent(model: Parafac2Model, stack) -> float:
    """``100 * (1 - sum_k ||T_k - model_k||^2 / sum_k ||T_k||^2)``."""
    X = _as_stack(stack)
    ss = float(np.sum(X * X))
    if ss == 0:
        raise Parafac2Error("zero-norm stack")
    return 100.0 * (1.0 - float(np.sum((X - model.reconstruct()) ** 2)) / ss)


def phi_deviation(model: Parafac2Model) -> float:
    """Largest relative departure of ``B_k^T B_k`` from their common value."""
    Bk = model.Bk
    cross = np.einsum("kjf,kjg->kfg", Bk, Bk)
    phi = cross[0]
    ref = np.linalg.norm(phi)
    return float(np.max(np.linalg.norm(cross - phi, axis=(1, 2))) / ref) if ref > 0 else 0.0


def _core(T: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Least-squares Tucker core of an I x J x K tensor for fixed loadings."""
    Ap, Bp, Cp = np.linalg.pinv(A), np.linalg.pinv(B), np.linalg.pinv(C)
    return np.einsum("pi,qj,rk,ijk->pqr", Ap, Bp, Cp, T, optimize=True)


def core_consistency(model: Parafac2Model, stack, method: str = "projected") -> float:
    """Core consistency diagnostic, ``100 * (1 - ||G - I||^2 / F)``.

    ``method="projected"`` evaluates the Tucker core of the slabs projected
    onto their own elution bases, ``T_k P_k``, with loadings (A, B, C): the
    model there is exactly trilinear. ``method="mean_elution"`` uses the raw
    slabs with the mean elution profile ``mean_k P_k B`` as second-mode
    loading. A one-component model scores 100 by definition.
    """
    F = model.rank
    if F == 1:
        return 100.0
    X = _as_stack(stack)
    if method == "projected":
        T = np.einsum("kij,kjf->ifk", X, model.P)
        G = _core(T, model.A, model.B, model.C)
    elif method == "mean_elution":
        G = _core(X.transpose(1, 2, 0), model.A, model.mean_elution(), model.C)
    else:
        raise Parafac2Error(f"unknown core consistency method {method!r}")
    ideal = np.zeros((F, F, F))
    ideal[np.arange(F), np.arange(F), np.arange(F)] = 1.0
    return float(100.0 * (1.0 - np.sum((G - ideal) ** 2) / F))


@dataclass(frozen=True)
class RankRow:
    rank: int
    fit_percent: float
    core_consistency: float
    fit_gain: float
    iterations: int
    converged: bool
    accepted: bool


def select_rank(stack, f_range: Sequence[int] = range(1, 8), core_threshold: float = 80.0,
                min_gain: float = 1.0, n_starts: int = 5, seed: int = 0, max_iter: int = 2000,
                tol: float = 1e-8, screen_iter: int = 200, core_method: str = "projected",
                ) -> tuple[int, list[RankRow], dict[int, Parafac2Model]]:
    """Fit every rank in ``f_range`` and pick one by core consistency and fit gain.

    A rank is acceptable when its core consistency reaches ``core_threshold``
    and it improves the fit of the previous rank by at least ``min_gain``
    percentage points (the rank below the first is taken to fit 0%). The
    chosen rank is the largest acceptable one reached without passing an
    unacceptable rank; rank 1 is the fallback. Returns the choice, the full
    audit table and the fitted models.
    """
    X = _as_stack(stack)
    K, I, J = X.shape
    ranks = [f for f in f_range if 1 <= f <= min(I, J)]
    models: dict[int, Parafac2Model] = {}
    rows: list[RankRow] = []
    prev_fit = 0.0
    for f in ranks:
        m = fit_parafac2(X, f, n_starts=n_starts, max_iter=max_iter, tol=tol,
                         seed=derive_seed(seed, f), screen_iter=screen_iter, compute_core=False)
        m.core_consistency = core_consistency(m, X, core_method)
        models[f] = m
        gain = m.fit_percent - prev_fit
        ok = m.core_consistency >= core_threshold and gain >= min_gain
        rows.append(RankRow(f, m.fit_percent, m.core_consistency, gain, m.iterations, m.converged, ok))
        prev_fit = m.fit_percent
    chosen = ranks[0] if ranks else 1
    for row in rows:
        if not row.accepted:
            break
        chosen = row.rank
    return chosen, rows, models


# ---------------------------------------------------------------------------
# components


@dataclass
class ComponentRecord:
    component_id: str
    window_id: int
    index: int
    spectrum: np.ndarray
    classification: str
    profile: np.ndarray
    peak_ratio: float = float("nan")
    span_fraction: float = float("nan")
    is_standard: bool = False
    annotation: str | None = None
    agreement: np.ndarray | None = None


def profile_statistics(profile: np.ndarray, level: float = 0.1) -> tuple[float, float]:
    """(max/median ratio, fraction of points above ``level`` * max)."""
    prof = np.asarray(profile, float)
    if prof.sum() < 0:
        prof = -prof
    mx = float(prof.max())
    med = float(np.median(prof))
    if mx <= 0:
        return 0.0, 1.0
    ratio = mx / med if med > 0 else float("inf")
    span = float(np.mean(prof > level * mx))
    return ratio, span


def classify_profile(profile: np.ndarray, ratio_threshold: float = 5.0,
                     span_threshold: float = 0.8, level: float = 0.1) -> str:
    """Baseline when the profile is not peak-shaped or covers most of the window."""
    ratio, span = profile_statistics(profile, level)
    if ratio < ratio_threshold or span > span_threshold:
        return BASELINE
    return CHEMICAL


def classify_component(model: Parafac2Model, index: int, ratio_threshold: float = 5.0,
                       span_threshold: float = 0.8, level: float = 0.1) -> str:
    """Classify on the concentration-weighted mean elution profile."""
    return classify_profile(model.mean_elution(weighted=True)[:, index], ratio_threshold,
                            span_threshold, level)


def component_records(model: Parafac2Model, window_id: int, prefix: str = "",
                      **classify_kw) -> list[ComponentRecord]:
    prof = model.mean_elution(weighted=True)
    conc = model.concentrations()
    agree = model.profile_agreement()
    out = []
    for f in range(model.rank):
        ratio, span = profile_statistics(prof[:, f], classify_kw.get("level", 0.1))
        spec = np.clip(model.A[:, f], 0, None)
        nrm = np.linalg.norm(spec)
        out.append(ComponentRecord(
            f"{prefix}w{window_id}c{f}", window_id, f, spec / nrm if nrm > 0 else spec,
            classify_component(model, f, **classify_kw), conc[:, f].copy(), ratio, span,
            agreement=agree[:, f].copy()))
    return out


def extract_concentrations(records_by_window: Sequence[Sequence[ComponentRecord]],
                           keep: str | None = CHEMICAL) -> tuple[np.ndarray, list[ComponentRecord]]:
    """Stack concentration columns of the kept components, window by window."""
    kept = []
    n = None
    for recs in records_by_window:
        for r in sorted(recs, key=lambda r: (r.window_id, r.index)):
            if n is None:
                n = len(r.profile)
            elif len(r.profile) != n:
                raise Parafac2Error("windows were fitted on different sample counts")
            if keep is None or r.classification == keep:
                kept.append(r)
    kept.sort(key=lambda r: (r.window_id, r.index))
    if not kept:
        return np.zeros((n or 0, 0)), []
    return np.column_stack([r.profile for r in kept]), kept


def detect_presence(agreement: np.ndarray, groups: Sequence[Sequence[int]],
                    threshold: float = 0.6) -> np.ndarray:
    """Per-group presence flags from profile agreement (G x F booleans).

    A component counts as present in a group of samples (one site) when the
    median agreement of its elution profiles over those samples reaches
    ``threshold``.
    """
    agreement = np.asarray(agreement, float)
    if agreement.ndim == 1:
        agreement = agreement[:, None]
    return np.array([np.median(agreement[list(g)], axis=0) >= threshold for g in groups], dtype=bool)


def normalize_internal_standards(conc: np.ndarray, standard_cols: Sequence[int]
                                 ) -> tuple[np.ndarray, np.ndarray]:
    """Divide every row by the mean of its internal-standard entries.

    Returns the normalized matrix and a boolean mask flagging the standard
    columns (kept in the output).
    """
    conc = np.asarray(conc, float)
    cols = list(standard_cols)
    if not cols:
        raise Parafac2Error("at least one internal standard column is required")
    ref = conc[:, cols].mean(axis=1)
    bad = np.nonzero(~(ref > 0))[0]
    if len(bad):
        raise Parafac2Error(f"non-positive internal standard mean in row {int(bad[0])}")
    flags = np.zeros(conc.shape[1], dtype=bool)
    flags[cols] = True
    return conc / ref[:, None], flags


# ---------------------------------------------------------------------------
# factor matching for validation


def congruence(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def match_components(true_factors: Sequence[np.ndarray], est_factors: Sequence[np.ndarray]
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Greedy permutation/sign matching by the product of per-mode congruences.

    Each entry of the factor lists is a matrix whose columns are components
    (modes may be flattened beforehand). Returns ``perm`` (est index for each
    true component) and the per-component minimum |congruence| over modes.
    """
    F = true_factors[0].shape[1]
    score = np.ones((F, F))
    per_mode = []
    for T, E in zip(true_factors, est_factors):
        Tn = T / np.linalg.norm(T, axis=0)
        En = E / np.linalg.norm(E, axis=0)
        cm = np.abs(Tn.T @ En)
        per_mode.append(cm)
        score *= cm
    perm = -np.ones(F, dtype=int)
    worst = np.zeros(F)
    free_t, free_e = set(range(F)), set(range(F))
    while free_t:
        best = max(((score[i, j], i, j) for i in free_t for j in free_e))
        _, i, j = best
        perm[i] = j
        worst[i] = min(cm[i, j] for cm in per_mode)
        free_t.remove(i)
        free_e.remove(j)
    return perm, worst
