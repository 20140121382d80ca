"""Flow-time estimation and sample synchronization across monitoring sites.

A water volume sampled at site A at time ``t_A`` reaches the connected site B
at ``t_A + t_f``, where ``t_f`` comes from a cubic fit of flow time against
water level for the reach. A sample at B belongs to the same volume when it
falls within the reach tolerance of that predicted arrival.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .chromio import FlowTableRow, SiteRecord, reach_id

log = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0


class SyncError(ValueError):
    pass


class UnderdeterminedFitError(SyncError):
    pass


class MissingFlowModelError(SyncError):
    pass


@dataclass(frozen=True)
class FlowModel:
    """Cubic flow-time model for one reach (hours as a function of water level in cm)."""

    reach_id: str
    coefficients: tuple[float, float, float, float]
    fit_residual_rms: float
    level_range: tuple[float, float] = (-np.inf, np.inf)

    def __call__(self, level):
        c0, c1, c2, c3 = self.coefficients
        L = np.asarray(level, dtype=float)
        return c0 + L * (c1 + L * (c2 + L * c3))


class FlowEstimate(NamedTuple):
    hours: float
    extrapolated: bool
    valid: bool


def fit_flow_model(rows: Sequence[FlowTableRow]) -> FlowModel:
    """Least-squares cubic fit of flow time on water level for one reach.

    The Vandermonde columns are rescaled before solving; levels of a few
    hundred cm otherwise make the cubic column dominate by ~1e9.
    """
    if not rows:
        raise UnderdeterminedFitError("no flow table rows")
    rids = {r.reach_id for r in rows}
    if len(rids) != 1:
        raise SyncError(f"rows from several reaches: {sorted(rids)}")
    L = np.array([r.water_level for r in rows], dtype=float)
    t = np.array([r.flow_time for r in rows], dtype=float)
    if len(np.unique(L)) < 4:
        raise UnderdeterminedFitError(
            f"reach {rows[0].reach_id}: need >= 4 distinct water levels, got {len(np.unique(L))}")
    V = np.vander(L, 4, increasing=True)
    scale = np.linalg.norm(V, axis=0)
    coef, *_ = np.linalg.lstsq(V / scale, t, rcond=None)
    coef = coef / scale
    resid = t - V @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return FlowModel(rows[0].reach_id, tuple(float(c) for c in coef), rms,
                     (float(L.min()), float(L.max())))


def estimate_flow_time(model: FlowModel, water_level: float) -> FlowEstimate:
    """Evaluate the cubic; flags extrapolation and non-positive predictions."""
    if not np.isfinite(water_level):
        raise SyncError("water level must be finite")
    hours = float(model(water_level))
    lo, hi = model.level_range
    extrapolated = not (lo <= water_level <= hi)
    valid = bool(np.isfinite(hours) and hours > 0)
    return FlowEstimate(hours, extrapolated, valid)


# ---------------------------------------------------------------------------
# volume matching


class SampleTime(NamedTuple):
    """A sample's collection time (seconds since epoch) and the gauge level then."""

    timestamp: int
    water_level: float | None = None


@dataclass(frozen=True)
class SynchronizedVolume:
    """One sample per site, ordered as the configured path."""

    members: tuple[tuple[str, int], ...]

    @property
    def sites(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.members)

    def timestamp(self, site: str) -> int:
        for s, t in self.members:
            if s == site:
                return t
        raise KeyError(site)


@dataclass(frozen=True)
class Reach:
    upstream: str
    downstream: str
    tolerance_h: float

    @property
    def id(self) -> str:
        return reach_id(self.upstream, self.downstream)


@dataclass
class MatchReport:
    volumes: list[SynchronizedVolume]
    n_extrapolated: int = 0
    n_invalid: int = 0
    order: list[str] = field(default_factory=list)


def default_reaches(path: Sequence[str], sites: Mapping[str, SiteRecord]) -> list[Reach]:
    """Consecutive pairs along ``path``; tolerance read from the upstream site record."""
    out = []
    for a, b in zip(path[:-1], path[1:]):
        out.append(Reach(a, b, _tolerance(sites, a)))
    return out


def _tolerance(sites: Mapping[str, SiteRecord], site: str) -> float:
    rec = sites.get(site)
    if rec is None or rec.tolerance_to_next is None:
        raise SyncError(f"no flow tolerance for site {site}")
    return float(rec.tolerance_to_next)


def parse_reaches(text: str, sites: Mapping[str, SiteRecord]) -> list[Reach]:
    """``"A-B,B-C"`` -> reaches with tolerances from the upstream site record."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        a, _, b = tok.partition("-")
        out.append(Reach(a, b, _tolerance(sites, a)))
    return out


def _matching_order(path: Sequence[str], reaches: Sequence[Reach]) -> list[tuple[str, Reach, bool]]:
    """Order in which sites get matched, each with the reach anchoring it.

    Returns ``(site, reach, forward)``; ``forward`` means the site is the
    downstream end of its reach. Sites reachable only as the upstream end of
    a reach (tributaries) are matched backwards from their junction.
    """
    if len(set(path)) != len(path):
        raise SyncError("path lists a site twice")
    inpath = set(path)
    for r in reaches:
        if r.upstream not in inpath or r.downstream not in inpath:
            raise SyncError(f"reach {r.id} leaves the configured path")
    matched = {path[0]}
    order: list[tuple[str, Reach, bool]] = []
    pending = list(path[1:])
    while pending:
        progressed = False
        for site in list(pending):
            anchor = None
            for r in reaches:
                if r.downstream == site and r.upstream in matched:
                    anchor = (site, r, True)
                    break
            if anchor is None:
                for r in reaches:
                    if r.upstream == site and r.downstream in matched:
                        anchor = (site, r, False)
                        break
            if anchor is not None:
                order.append(anchor)
                matched.add(site)
                pending.remove(site)
                progressed = True
                break
        if not progressed:
            raise SyncError(f"sites {pending} are not connected to {path[0]} by any reach")
    return order


def _level(st: SampleTime, model: FlowModel) -> float:
    if st.water_level is not None and np.isfinite(st.water_level):
        return float(st.water_level)
    # no gauge reading: middle of the training range (0 for hand-built models without one)
    mid = 0.5 * (model.level_range[0] + model.level_range[1])
    return float(mid) if np.isfinite(mid) else 0.0


def match_volumes(samples: Mapping[str, Sequence[SampleTime | int]],
                  flow_models: Mapping[str, FlowModel],
                  sites: Mapping[str, SiteRecord] | None,
                  path: Sequence[str],
                  reaches: Sequence[Reach] | None = None) -> MatchReport:
    """Chain samples through the site list into synchronized water volumes.

    Every sample at the first site of ``path`` starts a search. Sites are
    matched one reach at a time; within each reach's tolerance window,
    candidates are tried nearest-arrival first (ties: earlier timestamp).
    When the nearest candidate cannot be completed downstream, the next one
    is tried, so the chain returned for a start sample is the
    lexicographically nearest complete one. Start samples with no complete
    chain produce nothing.

    Parameters
    ----------
    samples : mapping site -> sequence of SampleTime (or bare timestamps)
    flow_models : mapping reach id ("UP-DOWN") -> FlowModel
    sites : site table, used for tolerances when ``reaches`` is None
    path : ordered site ids; a volume must cover all of them
    reaches : explicit reach list; defaults to consecutive pairs of ``path``.
        A tributary is declared as a reach into its junction and is matched
        backwards from the junction's sample.
    """
    if reaches is None:
        if sites is None:
            raise SyncError("either reaches or a site table is required")
        reaches = default_reaches(path, sites)
    for r in reaches:
        if r.id not in flow_models:
            raise MissingFlowModelError(f"no flow model for reach {r.id}")
    order = _matching_order(path, reaches)

    table: dict[str, list[SampleTime]] = {}
    for site in path:
        raw = samples.get(site, ())
        sts = [s if isinstance(s, SampleTime) else SampleTime(int(s)) for s in raw]
        table[site] = sorted(sts, key=lambda s: s.timestamp)
    times = {s: np.array([st.timestamp for st in v], dtype=float) / SECONDS_PER_HOUR
             for s, v in table.items()}

    # arrival offsets (hours) per upstream sample, precomputed once per reach
    offsets: dict[str, np.ndarray] = {}
    n_ext = n_bad = 0
    for r in reaches:
        model = flow_models[r.id]
        lv = np.array([_level(st, model) for st in table[r.upstream]])
        offsets[r.id] = np.asarray(model(lv), dtype=float).reshape(-1)
        lo, hi = model.level_range
        n_ext += int(np.sum((lv < lo) | (lv > hi)))
        n_bad += int(np.sum(~(offsets[r.id] > 0)))
    if n_ext:
        log.info("%d flow-time estimates extrapolate beyond the training levels", n_ext)
    if n_bad:
        log.warning("%d flow-time estimates are non-positive; those samples cannot start a reach", n_bad)

    def candidates(site, reach, forward, chosen):
        off = offsets[reach.id]
        if forward:
            iu = chosen[reach.upstream]
            if not off[iu] > 0:
                return []
            dev = np.abs(times[site] - (times[reach.upstream][iu] + off[iu]))
        else:
            idn = chosen[reach.downstream]
            ok = off > 0
            dev = np.where(ok, np.abs(times[reach.downstream][idn] - (times[site] + off)), np.inf)
        idx = np.nonzero(dev <= reach.tolerance_h)[0]
        return sorted(idx.tolist(), key=lambda i: (dev[i], times[site][i]))

    def consistent(site, idx, chosen):
        # reaches beyond the anchor whose both ends are now fixed
        for r in reaches:
            if site not in (r.upstream, r.downstream):
                continue
            other = r.downstream if r.upstream == site else r.upstream
            if other not in chosen:
                continue
            iu = idx if r.upstream == site else chosen[other]
            idn = idx if r.downstream == site else chosen[other]
            off = offsets[r.id][iu]
            if not off > 0:
                return False
            if abs(times[r.downstream][idn] - (times[r.upstream][iu] + off)) > r.tolerance_h:
                return False
        return True

    def search(depth, chosen):
        if depth == len(order):
            return dict(chosen)
        site, reach, forward = order[depth]
        for idx in candidates(site, reach, forward, chosen):
            if not consistent(site, idx, chosen):
                continue
            chosen[site] = idx
            found = search(depth + 1, chosen)
            del chosen[site]
            if found is not None:
                return found
        return None

    volumes = []
    root = path[0]
    for i0 in range(len(table[root])):
        found = search(0, {root: i0})
        if found is not None:
            volumes.append(SynchronizedVolume(
                tuple((s, table[s][found[s]].timestamp) for s in path)))
    return MatchReport(volumes, n_ext, n_bad, [root] + [o[0] for o in order])


def chain_satisfies_windows(volume: SynchronizedVolume, levels: Mapping[tuple[str, int], float],
                            flow_models: Mapping[str, FlowModel], reaches: Sequence[Reach]) -> bool:
    """Check every reach window of a volume directly."""
    t = {s: ts / SECONDS_PER_HOUR for s, ts in volume.members}
    for r in reaches:
        model = flow_models[r.id]
        lv = levels.get((r.upstream, volume.timestamp(r.upstream)))
        lv = _level(SampleTime(0, lv), model)
        off = float(model(lv))
        if not off > 0 or abs(t[r.downstream] - (t[r.upstream] + off)) > r.tolerance_h:
            return False
    return True
