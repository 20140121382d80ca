"""Retention-time gridding, baseline removal and peak-shift correction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import solveh_banded

from .chromio import ChromatogramSample, compute_tic

# grid points used by the reference processing: one high-resolution site
# (Bad Honnef), everything else on the coarser grid
PAPER_GRID_POINTS = {"HON": 7000}
DEFAULT_GRID_POINTS = 4300


class PreprocessError(ValueError):
    pass


def default_grid_points(site_id: str) -> int:
    return PAPER_GRID_POINTS.get(site_id, DEFAULT_GRID_POINTS)


@dataclass(frozen=True)
class ReferenceGrid:
    """Equally spaced retention times ``0 .. t_max`` with ``r`` intervals (r + 1 points)."""

    r: int
    t_max: float

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.r + 1)

    @property
    def step(self) -> float:
        return self.t_max / self.r

    def __len__(self):
        return self.r + 1


def build_reference_grid(samples: Sequence[ChromatogramSample], r: int) -> ReferenceGrid:
    if r < 2:
        raise PreprocessError("grid needs r >= 2 intervals")
    if not samples:
        raise PreprocessError("no samples to build a grid from")
    t_max = max(float(s.rt_axis[-1]) for s in samples)
    if not t_max > 0:
        raise PreprocessError("maximum retention time must be > 0")
    return ReferenceGrid(int(r), t_max)


def nearest_grid_index(rt: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the closest grid point; exact ties go to the lower index."""
    rt = np.asarray(rt, dtype=float)
    hi = np.clip(np.searchsorted(grid, rt, side="left"), 1, len(grid) - 1)
    lo = hi - 1
    return np.where(np.abs(rt - grid[lo]) <= np.abs(grid[hi] - rt), lo, hi)


def resample_sample(sample: ChromatogramSample, grid: ReferenceGrid) -> ChromatogramSample:
    """Add each source column into its nearest grid column.

    Collisions are summed so the total ion current is conserved.
    """
    g = grid.grid
    rt = sample.rt_axis
    tol = 1e-9 * grid.t_max
    if rt[0] < -tol or rt[-1] > grid.t_max + tol:
        raise PreprocessError(
            f"sample {sample.site_id}@{sample.timestamp}: rt range exceeds the grid [0, {grid.t_max}]")
    idx = nearest_grid_index(rt, g)
    out = np.zeros((sample.intensity.shape[0], len(g)))
    np.add.at(out.T, idx, sample.intensity.T)
    return sample.replace(rt_axis=g, intensity=out)


# ---------------------------------------------------------------------------
# asymmetric least squares baseline


class BaselineFit(NamedTuple):
    baseline: np.ndarray
    converged: bool
    n_iter: int


def _second_difference_banded(n: int, lam: float) -> np.ndarray:
    """Upper banded form (3 x n) of lam * D'D for the second-difference D."""
    main = np.full(n, 6.0)
    main[[0, -1]] = 1.0
    main[[1, -2]] = 5.0
    off1 = np.full(n, -4.0)
    off1[[1, -1]] = -2.0
    off2 = np.ones(n)
    if n == 3:
        main = np.array([1.0, 4.0, 1.0])
        off1 = np.array([0.0, -2.0, -2.0])
    ab = np.zeros((3, n))
    ab[2] = main
    ab[1, 1:] = off1[1:]
    ab[0, 2:] = off2[2:]
    return lam * ab


def asls_baseline(signal, lam: float = 1e6, p: float = 0.001, max_iter: int = 20) -> BaselineFit:
    """Asymmetric least squares baseline (Eilers & Boelens).

    Minimizes ``sum w_i (y_i - z_i)^2 + lam * sum (second diff z)^2`` and
    reweights with ``p`` above the baseline, ``1 - p`` below, until the
    weights stop changing or ``max_iter`` is reached.
    """
    y = np.asarray(signal, dtype=float).ravel()
    n = len(y)
    if n < 3:
        raise PreprocessError("signal needs at least 3 points")
    if not np.all(np.isfinite(y)):
        raise PreprocessError("signal must be finite")
    if lam < 0 or not 0 < p < 1:
        raise PreprocessError("need lam >= 0 and 0 < p < 1")
    penalty = _second_difference_banded(n, lam)
    w = np.ones(n)
    z = y.copy()
    for it in range(1, max_iter + 1):
        ab = penalty.copy()
        ab[2] += w
        z = solveh_banded(ab, w * y, check_finite=False)
        w_new = np.where(y > z, p, 1.0 - p)
        if np.array_equal(w_new, w):
            return BaselineFit(z, True, it)
        w = w_new
    return BaselineFit(z, False, max_iter)


# ---------------------------------------------------------------------------
# correlation optimized warping


@dataclass(frozen=True)
class WarpPath:
    """Segment boundaries: ``signal_knots[b]`` in the sample maps to ``target_knots[b]``."""

    target_knots: np.ndarray
    signal_knots: np.ndarray

    def is_valid(self, n: int) -> bool:
        return (self.signal_knots[0] == 0 and self.signal_knots[-1] == n - 1
                and self.target_knots[0] == 0 and self.target_knots[-1] == n - 1
                and bool(np.all(np.diff(self.signal_knots) > 0)))

    @property
    def shifts(self) -> np.ndarray:
        return self.signal_knots - self.target_knots


class WarpResult(NamedTuple):
    path: WarpPath
    warped: np.ndarray
    score: float


def segment_knots(n: int, seg_len: int) -> np.ndarray:
    """Target boundaries every ``seg_len`` points; the last segment takes the remainder."""
    n_seg = max(1, (n - 1) // seg_len)
    knots = np.arange(n_seg + 1) * seg_len
    knots[-1] = n - 1
    return knots


def _interp_segments(signal: np.ndarray, starts: np.ndarray, ends: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample ``signal[start..end]`` to ``length + 1`` points, batched over pairs."""
    frac = np.linspace(0.0, 1.0, length + 1)
    pos = starts[:, None] + (ends - starts)[:, None] * frac[None, :]
    i0 = np.clip(np.floor(pos).astype(int), 0, len(signal) - 2)
    w = pos - i0
    return signal[i0] * (1 - w) + signal[i0 + 1] * w


def _rowwise_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    num = np.sum(a * b, axis=-1)
    den = np.sqrt(np.sum(a * a, axis=-1) * np.sum(b * b, axis=-1))
    scale = np.maximum(np.max(np.abs(a), axis=-1), np.max(np.abs(b), axis=-1))
    degenerate = (den <= 1e-12 * np.maximum(scale, 1e-300) ** 2) | (den == 0)
    return np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))


def segment_correlation(signal, target, knots_sig, knots_tgt) -> np.ndarray:
    """Correlation of every segment for one fixed boundary assignment."""
    signal = np.asarray(signal, float)
    target = np.asarray(target, float)
    out = []
    for b in range(len(knots_tgt) - 1):
        L = int(knots_tgt[b + 1] - knots_tgt[b])
        seg = _interp_segments(signal, np.array([knots_sig[b]], float), np.array([knots_sig[b + 1]], float), L)
        out.append(_rowwise_corr(seg, target[knots_tgt[b]:knots_tgt[b + 1] + 1][None, :])[0])
    return np.array(out)


def apply_warp(signal: np.ndarray, path: WarpPath) -> np.ndarray:
    """Piecewise-linear warp of a vector (or of each row of a matrix)."""
    x = np.asarray(signal, float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    n = rows.shape[1]
    pos = np.interp(np.arange(n), path.target_knots, path.signal_knots)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    w = pos - i0
    out = rows[:, i0] * (1 - w) + rows[:, i0 + 1] * w
    return out[0] if single else out


def cow_warp(signal, target, seg_len: int = 50, slack: int = 5) -> WarpResult:
    """Correlation optimized warping by exact dynamic programming.

    Interior segment boundaries may move by ``-slack..slack`` points; the
    first and last boundary are fixed. Each segment of ``signal`` is linearly
    resampled to the corresponding target segment and scored by its Pearson
    correlation (0 for zero-variance segments). The path maximizing the sum
    of segment correlations is returned; ties keep the smallest shift.
    """
    x = np.asarray(signal, float).ravel()
    t = np.asarray(target, float).ravel()
    n = len(t)
    if len(x) != n:
        raise PreprocessError("signal and target must have equal length")
    if seg_len < 5 or not 0 <= slack < seg_len:
        raise PreprocessError("need seg_len >= 5 and 0 <= slack < seg_len")
    knots = segment_knots(n, seg_len)
    n_seg = len(knots) - 1
    shifts = np.arange(-slack, slack + 1)
    S = len(shifts)
    score = np.full((n_seg + 1, S), -np.inf)
    back = np.zeros((n_seg + 1, S), dtype=int)
    zero = slack
    score[0, zero] = 0.0
    for b in range(n_seg):
        L = int(knots[b + 1] - knots[b])
        tseg = t[knots[b]:knots[b + 1] + 1]
        from_pos = knots[b] + shifts
        to_shifts = shifts if b + 1 < n_seg else np.array([0])
        to_pos = knots[b + 1] + to_shifts
        fi, ti = np.meshgrid(np.arange(S), np.arange(len(to_shifts)), indexing="ij")
        fi, ti = fi.ravel(), ti.ravel()
        starts, ends = from_pos[fi], to_pos[ti]
        ok = (np.isfinite(score[b, fi]) & (starts >= 0) & (ends <= n - 1) & (ends > starts))
        corr = np.full(len(fi), -np.inf)
        if np.any(ok):
            segs = _interp_segments(x, starts[ok].astype(float), ends[ok].astype(float), L)
            corr[ok] = _rowwise_corr(segs, tseg[None, :])
        total = np.where(ok, score[b, fi] + corr, -np.inf).reshape(S, len(to_shifts))
        # tie-break: prefer the source state with the smallest |shift|, then the lower shift
        pref = np.lexsort((shifts, np.abs(shifts)))
        best_src = pref[np.argmax(total[pref], axis=0)]
        dest = np.arange(len(to_shifts)) if b + 1 < n_seg else np.array([zero])
        score[b + 1, dest] = total[best_src, np.arange(len(to_shifts))]
        back[b + 1, dest] = best_src
    sig_knots = np.empty(n_seg + 1, dtype=int)
    state = zero
    sig_knots[-1] = n - 1
    for b in range(n_seg, 0, -1):
        state_prev = back[b, state]
        sig_knots[b - 1] = knots[b - 1] + shifts[state_prev]
        state = state_prev
    path = WarpPath(knots.copy(), sig_knots)
    return WarpResult(path, apply_warp(x, path), float(score[n_seg, zero]))


def cow_bruteforce(signal, target, seg_len: int, slack: int) -> WarpResult:
    """Exhaustive search over every interior boundary combination (small cases only)."""
    import itertools

    x = np.asarray(signal, float).ravel()
    t = np.asarray(target, float).ravel()
    n = len(t)
    knots = segment_knots(n, seg_len)
    best = None
    for combo in itertools.product(range(-slack, slack + 1), repeat=len(knots) - 2):
        sk = knots.copy()
        sk[1:-1] += np.array(combo, dtype=int)
        if np.any(np.diff(sk) <= 0) or sk.min() < 0 or sk.max() > n - 1:
            continue
        s = float(np.sum(segment_correlation(x, t, sk, knots)))
        if best is None or s > best[0] + 1e-12:
            best = (s, sk)
    path = WarpPath(knots.copy(), best[1])
    return WarpResult(path, apply_warp(x, path), best[0])


# ---------------------------------------------------------------------------
# group alignment


@dataclass(frozen=True)
class AlignmentRecord:
    site_id: str
    timestamp: int
    corr_before: float
    corr_after: float
    baseline_converged: bool
    is_reference: bool


@dataclass
class AlignedGroup:
    grid: ReferenceGrid
    samples: list[ChromatogramSample]
    paths: list[WarpPath]
    report: list[AlignmentRecord]
    reference_index: int


def _pearson(a, b) -> float:
    return float(_rowwise_corr(np.asarray(a, float)[None], np.asarray(b, float)[None])[0])


def subtract_tic_baseline(sample: ChromatogramSample, lam: float, p: float,
                          max_iter: int) -> tuple[ChromatogramSample, bool]:
    """Estimate the baseline on the TIC and remove it from each channel in
    proportion to that channel's share of the TIC at each retention time."""
    tic = compute_tic(sample)
    fit = asls_baseline(tic, lam, p, max_iter)
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = np.where(tic > 0, 1.0 - fit.baseline / tic, 0.0)
    keep = np.clip(keep, 0.0, 1.0)
    return sample.replace(intensity=sample.intensity * keep[None, :]), fit.converged


def reference_index(samples: Sequence[ChromatogramSample]) -> int:
    """Sample with the median total intensity (lower median; ties by site/time)."""
    totals = [float(s.intensity.sum()) for s in samples]
    order = sorted(range(len(samples)),
                   key=lambda i: (totals[i], samples[i].site_id, samples[i].timestamp))
    return order[(len(order) - 1) // 2]


def align_dataset(samples: Sequence[ChromatogramSample], r: int | None = None,
                  lam: float = 1e6, p: float = 0.001, max_iter: int = 20,
                  seg_len: int = 50, slack: int = 5,
                  grid: ReferenceGrid | None = None) -> AlignedGroup:
    """Grid, baseline-correct and warp one resolution group.

    Steps run in a fixed order: (1) nearest-point resampling onto a common
    grid, (2) AsLS baseline removal on the TIC, (3) COW of each TIC against
    the median-intensity sample, with the warp applied to every channel.
    The output order follows the input order; the result does not depend on
    it otherwise.
    """
    if not samples:
        raise PreprocessError("empty site group")
    if grid is None:
        if r is None:
            raise PreprocessError("need r or a grid")
        grid = build_reference_grid(samples, r)
    gridded = [resample_sample(s, grid) for s in samples]
    corrected, conv = [], []
    for s in gridded:
        c, ok = subtract_tic_baseline(s, lam, p, max_iter)
        corrected.append(c)
        conv.append(ok)
    ref = reference_index(corrected)
    ref_tic = compute_tic(corrected[ref])
    out, paths, report = [], [], []
    for i, s in enumerate(corrected):
        tic = compute_tic(s)
        before = _pearson(tic, ref_tic)
        if i == ref:
            knots = segment_knots(len(tic), seg_len)
            path = WarpPath(knots.copy(), knots.copy())
            warped = s
        else:
            res = cow_warp(tic, ref_tic, seg_len, slack)
            path = res.path
            warped = s.replace(intensity=np.clip(apply_warp(s.intensity, path), 0.0, None))
        after = _pearson(compute_tic(warped), ref_tic)
        out.append(warped)
        paths.append(path)
        report.append(AlignmentRecord(s.site_id, s.timestamp, before, after, conv[i], i == ref))
    return AlignedGroup(grid, out, paths, report, ref)


def mean_pairwise_correlation(vectors: Sequence[np.ndarray]) -> float:
    vals = [_pearson(vectors[i], vectors[j])
            for i in range(len(vectors)) for j in range(i + 1, len(vectors))]
    return float(np.mean(vals)) if vals else 1.0
