"""Synthetic multi-site river datasets with known ground truth.

Concentrations are simulated in *volume coordinates*: a volume is labelled by
the time ``tau`` it passes the most upstream site, and ``T_s(tau)`` gives the
time the same water passes site ``s``. Along each transport edge the upstream
series is broadened with a Gaussian kernel, weighted by its mixing fraction
and optionally decayed; local injections are added at the receiving site.
Samples are then drawn along the synchronization reaches with offsets inside
the match tolerance, and each sample's chromatogram is synthesized from true
spectra and elution peaks.
"""

from __future__ import annotations

import logging
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .chromio import (ChromatogramSample, FlowTableRow, ManifestEntry, SiteRecord, reach_id,
                      save_flow_table, save_sample, save_site_table, write_manifest, write_rows)
from .specmatch import LibrarySpectrum, write_library

log = logging.getLogger(__name__)

STANDARD = "standard"
SOURCE = "source"


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class SiteSpec:
    site_id: str
    name: str
    river_km: float
    bank: str
    tolerance_h: float | None
    group: str = "main"


@dataclass(frozen=True)
class FlowSpec:
    """True flow time of a synchronization reach: ``base * poly((L - 300)/100)`` hours."""

    upstream: str
    downstream: str
    base_h: float
    shape: tuple[float, float, float] = (-0.25, 0.04, -0.01)

    @property
    def id(self) -> str:
        return reach_id(self.upstream, self.downstream)

    def hours(self, level):
        x = (np.asarray(level, dtype=float) - 300.0) / 100.0
        a, b, c = self.shape
        return self.base_h * (1.0 + x * (a + x * (b + x * c)))


@dataclass(frozen=True)
class TransportEdge:
    source: str
    target: str
    weight: float
    dispersion_h: float = 0.0
    decay: float = 0.0          # fraction lost along the edge


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    kind: str                   # "standard" or "source"
    origin: str | None          # site where the component enters (None for standards)
    rt_min: float               # elution apex
    width_min: float = 0.2      # Gaussian sigma of the elution peak
    level: float = 1.0          # mean amount at the origin


@dataclass(frozen=True)
class Scenario:
    sites: tuple[SiteSpec, ...]
    flows: tuple[FlowSpec, ...]
    transport: tuple[TransportEdge, ...]
    components: tuple[ComponentSpec, ...]
    windows: tuple[float, ...]
    sync_path: tuple[str, ...]
    n_volumes: int = 80
    n_incomplete: int = 6
    n_distractors: int = 3
    volume_spacing_h: float = 12.0
    tolerance_use: float = 0.3          # sampling offsets drawn within this fraction of the tolerance
    n_mz: int = 30
    mz_start: float = 40.0
    mz_step: float = 5.0
    rt_max_min: float = 24.0
    n_rt: Mapping[str, int] = field(default_factory=lambda: {"main": 241})
    noise: float = 0.005                # noise sd as a fraction of the intensity scale
    intensity_scale: float = 100.0
    shift_sd_min: float = 0.08          # per-sample retention shift
    baseline_level: float = 0.05        # drift amplitude relative to the intensity scale
    sensitivity_sd: float = 0.1         # lognormal sd of the per-sample response factor
    local_cv: float = 0.03              # multiplicative per-sample concentration scatter
    event_rate_per_h: float = 1 / 20
    flow_table_rows: int = 24
    flow_table_noise: float = 0.01
    n_decoys: int = 40
    decimals: int | None = 2
    seed: int = 17

    def site(self, site_id: str) -> SiteSpec:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise ScenarioError(f"unknown site {site_id}")

    @property
    def site_ids(self) -> list[str]:
        return [s.site_id for s in self.sites]

    @property
    def mz_axis(self) -> np.ndarray:
        return self.mz_start + self.mz_step * np.arange(self.n_mz)

    def rt_axis(self, site_id: str) -> np.ndarray:
        n = self.n_rt.get(self.site(site_id).group, self.n_rt.get("main", 241))
        return np.linspace(0.0, self.rt_max_min, n)

    def flow(self, up: str, down: str) -> FlowSpec:
        for f in self.flows:
            if f.upstream == up and f.downstream == down:
                return f
        raise ScenarioError(f"no flow spec for {up}-{down}")


def mini_rhine(seed: int = 17, **overrides) -> Scenario:
    """Nine sites wired like the lower Rhine network with the Lippe tributary.

    Twelve components: two internal standards, eight sources entering at
    Bad Honnef, one tributary-only source (Wesel Lippe) and one injection
    between Wesel Rhine and Rees.
    """
    sites = (
        SiteSpec("HON", "Bad Honnef", 640.0, "middle", 3.0, "HON"),
        SiteSpec("ORL", "Orsoy Left", 793.0, "left", 1.0),
        SiteSpec("ORM", "Orsoy Middle", 793.0, "middle", 1.0),
        SiteSpec("ORR", "Orsoy Right", 793.0, "right", 2.0),
        SiteSpec("WSL", "Wesel Lippe", 814.0, "left", 2.0),
        SiteSpec("WSR", "Wesel Rhine", 814.0, "right", 2.0),
        SiteSpec("REE", "Rees", 837.0, "right", 2.0),
        SiteSpec("LOB", "Lobith", 862.0, "right", 1.0),
        SiteSpec("BIM", "Bimmen", 865.0, "left", None),
    )
    flows = (
        FlowSpec("HON", "ORL", 30.0),
        FlowSpec("ORL", "ORM", 0.5, (-0.1, 0.0, 0.0)),
        FlowSpec("ORM", "ORR", 0.5, (-0.1, 0.0, 0.0)),
        FlowSpec("ORR", "WSR", 5.0),
        FlowSpec("WSL", "WSR", 3.0),
        FlowSpec("WSR", "REE", 5.0),
        FlowSpec("REE", "LOB", 5.0),
        FlowSpec("LOB", "BIM", 0.6, (-0.1, 0.0, 0.0)),
    )
    transport = (
        TransportEdge("HON", "ORL", 1.0, 2.0),
        TransportEdge("HON", "ORM", 1.0, 2.0),
        TransportEdge("HON", "ORR", 1.0, 2.0),
        TransportEdge("ORL", "WSR", 0.2, 1.0),
        TransportEdge("ORM", "WSR", 0.3, 1.0),
        TransportEdge("ORR", "WSR", 0.35, 1.0),
        TransportEdge("WSL", "WSR", 0.15, 1.0),
        TransportEdge("WSR", "REE", 1.0, 1.0),
        TransportEdge("REE", "LOB", 1.0, 1.0),
        TransportEdge("ORL", "BIM", 0.5, 2.0),
        TransportEdge("LOB", "BIM", 0.5, 0.5),
    )
    comps = (
        ComponentSpec("IS1", STANDARD, None, 2.3),
        ComponentSpec("H1", SOURCE, "HON", 3.1),
        ComponentSpec("H2", SOURCE, "HON", 3.9),
        ComponentSpec("H3", SOURCE, "HON", 8.2),
        ComponentSpec("H4", SOURCE, "HON", 9.0),
        ComponentSpec("TRIB", SOURCE, "WSL", 9.8, level=5.0),
        ComponentSpec("H5", SOURCE, "HON", 14.2),
        ComponentSpec("H6", SOURCE, "HON", 15.0),
        ComponentSpec("INJ", SOURCE, "REE", 15.8),
        ComponentSpec("H7", SOURCE, "HON", 20.1),
        ComponentSpec("H8", SOURCE, "HON", 20.9),
        ComponentSpec("IS2", STANDARD, None, 21.7),
    )
    sc = Scenario(
        sites=sites, flows=flows, transport=transport, components=comps,
        windows=(0.0, 6.0, 12.0, 18.0, 24.0),
        sync_path=("HON", "ORL", "ORM", "ORR", "WSL", "WSR", "REE", "LOB", "BIM"),
        n_rt={"main": 241, "HON": 361}, seed=seed)
    return replace(sc, **overrides) if overrides else sc


def sync_reaches(scenario: Scenario) -> list[tuple[str, str]]:
    return [(f.upstream, f.downstream) for f in scenario.flows]


def transport_order(scenario: Scenario) -> list[str]:
    """Topological order of the transport graph (raises on cycles)."""
    ids = scenario.site_ids
    indeg = {s: 0 for s in ids}
    succ: dict[str, list[str]] = {s: [] for s in ids}
    for e in scenario.transport:
        if e.source not in indeg or e.target not in indeg:
            raise ScenarioError(f"transport edge {e.source}->{e.target} names an unknown site")
        indeg[e.target] += 1
        succ[e.source].append(e.target)
    queue = deque(s for s in ids if indeg[s] == 0)
    order = []
    while queue:
        s = queue.popleft()
        order.append(s)
        for t in succ[s]:
            indeg[t] -= 1
            if indeg[t] == 0:
                queue.append(t)
    if len(order) != len(ids):
        raise ScenarioError("transport graph contains a cycle")
    return order


def sub_rng(seed: int, *parts) -> np.random.Generator:
    key = zlib.crc32("|".join([str(seed), *map(str, parts)]).encode())
    return np.random.default_rng([seed & 0xFFFFFFFF, key])


# ---------------------------------------------------------------------------
# river series


@dataclass
class RiverSeries:
    """Volume-coordinate ledger.

    ``conc[site]`` is ``n_tau x n_components``; ``arrival[site]`` maps each
    ``tau`` to the physical passage time at that site. ``injection[site]``
    holds the locally added part (zero where nothing enters).
    """

    tau: np.ndarray
    components: list[str]
    conc: dict[str, np.ndarray]
    injection: dict[str, np.ndarray]
    arrival: dict[str, np.ndarray]
    level_time: np.ndarray
    levels: dict[str, np.ndarray]

    def level_at(self, site: str, t) -> np.ndarray:
        return np.interp(t, self.level_time, self.levels[site])

    def volume_coordinate(self, site: str, t) -> np.ndarray:
        return np.interp(t, self.arrival[site], self.tau)

    def concentration_at(self, site: str, t) -> np.ndarray:
        """Physical concentrations at ``site`` at time(s) ``t`` (hours)."""
        v = np.atleast_1d(self.volume_coordinate(site, np.asarray(t, float)))
        return np.stack([np.interp(v, self.tau, self.conc[site][:, c])
                         for c in range(len(self.components))], axis=-1)


def _source_series(rng: np.random.Generator, tau: np.ndarray, level: float, rate: float) -> np.ndarray:
    """Positive series: slowly varying background plus random pulse events.

    Events are kept shorter than the volume spacing so that successive
    volumes are close to independent draws.
    """
    n = len(tau)
    span = tau[-1] - tau[0]
    dt = tau[1] - tau[0]
    slow = gaussian_filter1d(rng.standard_normal(n), 36.0 / dt, mode="reflect")
    slow = slow / (slow.std() + 1e-12)
    series = level * (0.6 + 0.1 * slow)
    n_events = rng.poisson(rate * span)
    centers = rng.uniform(tau[0], tau[-1], n_events)
    widths = rng.uniform(2.0, 6.0, n_events)
    heights = level * rng.lognormal(0.0, 0.5, n_events)
    for c, w, h in zip(centers, widths, heights):
        series = series + h * np.exp(-0.5 * ((tau - c) / w) ** 2)
    return np.clip(series, 0.05 * level, None)


def _level_series(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    dt = t[1] - t[0]
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(250.0, 400.0)
    wander = gaussian_filter1d(rng.standard_normal(len(t)), 24.0 / dt, mode="reflect")
    wander = 15.0 * wander / (wander.std() + 1e-12)
    return 300.0 + 60.0 * np.sin(2 * np.pi * t / period + phase) + wander


def broaden(series: np.ndarray, sigma_h: float, dt: float) -> np.ndarray:
    """Gaussian broadening along axis 0; the kernel sums to one."""
    if sigma_h <= 0:
        return np.array(series, dtype=float, copy=True)
    return gaussian_filter1d(np.asarray(series, float), sigma_h / dt, axis=0, mode="constant", truncate=6.0)


def transport_step(upstream: Mapping[str, np.ndarray], edges: Sequence[TransportEdge],
                   injection: np.ndarray, dt: float) -> np.ndarray:
    """One site's series from its upstream neighbours (volume coordinates)."""
    out = np.array(injection, dtype=float, copy=True)
    for e in edges:
        out += e.weight * (1.0 - e.decay) * broaden(upstream[e.source], e.dispersion_h, dt)
    return out


def _arrival_maps(scenario: Scenario, tau: np.ndarray, level_t: np.ndarray,
                  levels: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    root = scenario.sync_path[0]
    arrival = {root: tau.copy()}
    pending = [f for f in scenario.flows]
    while pending:
        progressed = False
        for f in list(pending):
            if f.upstream in arrival and f.downstream not in arrival:
                t_up = arrival[f.upstream]
                arrival[f.downstream] = t_up + f.hours(np.interp(t_up, level_t, levels[f.upstream]))
            elif f.downstream in arrival and f.upstream not in arrival:
                # tributary: departure time t with t + flow(level(t)) = arrival downstream
                target = arrival[f.downstream]
                t = target - f.base_h
                for _ in range(50):
                    t = target - f.hours(np.interp(t, level_t, levels[f.upstream]))
                arrival[f.upstream] = t
            elif f.upstream in arrival and f.downstream in arrival:
                pass
            else:
                continue
            pending.remove(f)
            progressed = True
        if not progressed:
            raise ScenarioError("synchronization reaches do not connect all sites")
    for s in scenario.site_ids:
        if s not in arrival:
            raise ScenarioError(f"site {s} is not reached by any synchronization reach")
        if np.any(np.diff(arrival[s]) <= 0):
            raise ScenarioError(f"arrival map of {s} is not monotone; flow times vary too fast")
    return arrival


def gen_river_series(scenario: Scenario, dt: float = 0.5) -> RiverSeries:
    """Simulate true concentrations at every site in volume coordinates."""
    order = transport_order(scenario)
    names = [c.name for c in scenario.components]
    n_comp = len(names)
    span = scenario.volume_spacing_h * (scenario.n_volumes + scenario.n_incomplete + 8)
    tau = np.arange(0.0, span, dt)
    max_delay = sum(f.base_h for f in scenario.flows) * 2.0 + 48.0
    level_t = np.arange(-max_delay, span + max_delay, dt)
    levels = {s: _level_series(sub_rng(scenario.seed, "level", s), level_t) for s in scenario.site_ids}
    arrival = _arrival_maps(scenario, tau, level_t, levels)

    injection = {s: np.zeros((len(tau), n_comp)) for s in scenario.site_ids}
    for c, comp in enumerate(scenario.components):
        if comp.kind == SOURCE:
            if comp.origin not in injection:
                raise ScenarioError(f"component {comp.name} enters at unknown site {comp.origin}")
            rng = sub_rng(scenario.seed, "source", comp.name)
            injection[comp.origin][:, c] = _source_series(rng, tau, comp.level, scenario.event_rate_per_h)
    incoming: dict[str, list[TransportEdge]] = {s: [] for s in scenario.site_ids}
    for e in scenario.transport:
        incoming[e.target].append(e)
    conc: dict[str, np.ndarray] = {}
    for s in order:
        conc[s] = transport_step(conc, incoming[s], injection[s], dt)
    for c, comp in enumerate(scenario.components):
        if comp.kind == STANDARD:
            for s in scenario.site_ids:
                conc[s][:, c] = comp.level
    return RiverSeries(tau, names, conc, injection, arrival, level_t, levels)


# ---------------------------------------------------------------------------
# sampling schedule


@dataclass(frozen=True)
class PlannedSample:
    site_id: str
    time_h: float
    level_cm: float
    volume: int | None          # planned volume index; None for distractors
    complete: bool              # whether the volume was sampled at every site
    conc: np.ndarray            # true amounts at sampling time


@dataclass
class SampleSchedule:
    samples: list[PlannedSample]
    n_volumes: int
    epoch_s: int

    def timestamp(self, s: PlannedSample) -> int:
        return self.epoch_s + int(round(s.time_h * 3600.0))


def _match_order(scenario: Scenario) -> list[tuple[FlowSpec, bool]]:
    done = {scenario.sync_path[0]}
    order = []
    pending = list(scenario.flows)
    while pending:
        for f in pending:
            if f.upstream in done and f.downstream not in done:
                order.append((f, True))
                done.add(f.downstream)
                break
            if f.downstream in done and f.upstream not in done:
                order.append((f, False))
                done.add(f.upstream)
                break
        else:
            raise ScenarioError("synchronization reaches do not form a tree from the root")
        pending.remove(f)
    return order


def plan_samples(scenario: Scenario, series: RiverSeries) -> SampleSchedule:
    """Sample times chained along the synchronization reaches.

    Each downstream sample is taken at the predicted arrival plus an offset
    within ``tolerance_use`` of the reach tolerance; tributary samples are
    timed backwards from their junction. Incomplete volumes miss one site;
    distractors fall well outside every match window.
    """
    rng = sub_rng(scenario.seed, "schedule")
    n_total = scenario.n_volumes + scenario.n_incomplete
    incomplete = set(rng.choice(n_total, scenario.n_incomplete, replace=False).tolist())
    non_root = [s for s in scenario.site_ids if s != scenario.sync_path[0]]
    order = _match_order(scenario)
    root = scenario.sync_path[0]
    start = 4 * scenario.volume_spacing_h
    planned: list[PlannedSample] = []
    times: dict[str, list[float]] = {s: [] for s in scenario.site_ids}
    for v in range(n_total):
        t = {root: start + v * scenario.volume_spacing_h + rng.uniform(-1.0, 1.0)}
        for f, forward in order:
            tol = scenario.site(f.upstream).tolerance_h
            eps = rng.uniform(-1.0, 1.0) * scenario.tolerance_use * tol
            if forward:
                lvl = series.level_at(f.upstream, t[f.upstream])
                t[f.downstream] = t[f.upstream] + float(f.hours(lvl)) + eps
            else:
                target = t[f.downstream] - eps
                x = target - f.base_h
                for _ in range(50):
                    x = target - float(f.hours(series.level_at(f.upstream, x)))
                t[f.upstream] = x
        skip = rng.choice(non_root) if v in incomplete else None
        for s in scenario.site_ids:
            if s == skip:
                continue
            planned.append(_draw(scenario, series, rng, s, t[s], v, v not in incomplete))
            times[s].append(t[s])
    # distractors: far from every real sample of the same site
    for s in scenario.site_ids:
        real = np.array(times[s])
        tol = max(x.tolerance_h or 0.0 for x in scenario.sites)
        lo, hi = real.min(), real.max()
        placed = misses = 0
        while placed < scenario.n_distractors:
            # short schedules may leave no room between samples; widen the range then
            pad = scenario.volume_spacing_h * (misses // 200)
            t = rng.uniform(lo - pad, hi + pad)
            if np.min(np.abs(real - t)) < tol + 2.5:
                misses += 1
                continue
            planned.append(_draw(scenario, series, rng, s, t, None, False))
            real = np.append(real, t)
            placed += 1
    planned.sort(key=lambda p: (p.time_h, p.site_id))
    return SampleSchedule(planned, scenario.n_volumes, 1_400_000_000)


def _draw(scenario, series, rng, site, t, volume, complete) -> PlannedSample:
    conc = series.concentration_at(site, t)[0]
    kinds = np.array([c.kind == SOURCE for c in scenario.components])
    scatter = rng.lognormal(0.0, scenario.local_cv, len(conc))
    conc = np.where(kinds, conc * scatter, conc)
    return PlannedSample(site, float(t), float(series.level_at(site, t)), volume, complete, conc)


# ---------------------------------------------------------------------------
# chromatograms


@dataclass
class GroundTruth:
    mz_axis: np.ndarray
    spectra: np.ndarray                 # n_mz x n_components, unit max
    rt_apex: np.ndarray
    widths: np.ndarray
    names: list[str]
    shifts: dict[tuple[str, int], float]
    sensitivity: dict[tuple[str, int], float]


def component_spectra(scenario: Scenario) -> np.ndarray:
    rng = sub_rng(scenario.seed, "spectra")
    n, F = scenario.n_mz, len(scenario.components)
    S = np.zeros((n, F))
    for f in range(F):
        idx = rng.choice(n, size=8, replace=False)
        S[idx, f] = rng.uniform(0.05, 1.0, 8) ** 2
        S[idx[0], f] = 1.0
    return S


def _bleed_spectrum(scenario: Scenario) -> np.ndarray:
    rng = sub_rng(scenario.seed, "bleed")
    b = rng.uniform(0.2, 1.0, scenario.n_mz)
    return b / b.sum()


def elution(rt: np.ndarray, apex: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((rt - apex) / width) ** 2)


def gen_chromatograms(scenario: Scenario, schedule: SampleSchedule
                      ) -> tuple[list[ChromatogramSample], GroundTruth]:
    """Synthesize ``T_k = A D_k B_k' + baseline + noise`` for every planned sample."""
    spectra = component_spectra(scenario)
    bleed = _bleed_spectrum(scenario)
    apex = np.array([c.rt_min for c in scenario.components])
    width = np.array([c.width_min for c in scenario.components])
    mz = scenario.mz_axis
    scale = scenario.intensity_scale
    out, shifts, sens = [], {}, {}
    for k, ps in enumerate(schedule.samples):
        rng = sub_rng(scenario.seed, "chrom", ps.site_id, k)
        rt = scenario.rt_axis(ps.site_id)
        shift = float(rng.normal(0.0, scenario.shift_sd_min))
        s_k = float(rng.lognormal(0.0, scenario.sensitivity_sd))
        prof = elution(rt[:, None], apex[None, :] + shift, width[None, :])     # J x F
        X = scale * s_k * (spectra * ps.conc[None, :]) @ prof.T
        phase = rng.uniform(0, 2 * np.pi)
        drift = scenario.baseline_level * scale * (1.0 + 0.5 * np.sin(2 * np.pi * rt / scenario.rt_max_min + phase)
                                                    + 0.5 * rt / scenario.rt_max_min)
        X += bleed[:, None] * drift[None, :] * scenario.n_mz
        X += rng.normal(0.0, scenario.noise * scale, X.shape)
        X = np.clip(X, 0.0, None)
        if scenario.decimals is not None:
            X = np.round(X, scenario.decimals)
        ts = schedule.timestamp(ps)
        out.append(ChromatogramSample(ps.site_id, ts, mz, rt, X))
        shifts[(ps.site_id, ts)] = shift
        sens[(ps.site_id, ts)] = s_k
    names = [c.name for c in scenario.components]
    return out, GroundTruth(mz, spectra, apex, width, names, shifts, sens)


# ---------------------------------------------------------------------------
# auxiliary tables


def flow_table_rows(scenario: Scenario) -> list[FlowTableRow]:
    rows = []
    for f in scenario.flows:
        rng = sub_rng(scenario.seed, "flowtable", f.id)
        levels = np.sort(rng.uniform(150.0, 450.0, scenario.flow_table_rows))
        hours = f.hours(levels) * (1.0 + rng.normal(0.0, scenario.flow_table_noise, len(levels)))
        for L, h in zip(levels, hours):
            rows.append(FlowTableRow(f.id, round(float(L), 1), round(float(h), 3)))
    return rows


def site_records(scenario: Scenario) -> list[SiteRecord]:
    return [SiteRecord(s.site_id, s.name, s.river_km, s.bank, s.tolerance_h) for s in scenario.sites]


def _peaks_from(mz: np.ndarray, vec: np.ndarray, decimals: int = 1) -> tuple[np.ndarray, np.ndarray]:
    keep = vec > 0
    inten = np.round(999.0 * vec[keep] / vec.max(), decimals)
    return mz[keep], inten


def reference_library(scenario: Scenario, truth: GroundTruth) -> list[LibrarySpectrum]:
    """Library with a slightly perturbed entry per component plus random decoys."""
    rng = sub_rng(scenario.seed, "library")
    lib = []
    for f, comp in enumerate(scenario.components):
        vec = truth.spectra[:, f] * rng.lognormal(0.0, 0.1, scenario.n_mz)
        mz, inten = _peaks_from(truth.mz_axis, vec)
        lib.append(LibrarySpectrum(_library_name(comp), mz, inten, {"COMMENT": f"component {comp.name}"}))
    for d in range(scenario.n_decoys):
        vec = np.zeros(scenario.n_mz)
        idx = rng.choice(scenario.n_mz, size=8, replace=False)
        vec[idx] = rng.uniform(0.05, 1.0, 8) ** 2
        mz, inten = _peaks_from(truth.mz_axis, vec)
        lib.append(LibrarySpectrum(f"decoy-{d:03d}", mz, inten))
    return sorted(lib, key=lambda s: s.name)


def standards_library(scenario: Scenario, truth: GroundTruth) -> list[LibrarySpectrum]:
    lib = []
    for f, comp in enumerate(scenario.components):
        if comp.kind == STANDARD:
            mz, inten = _peaks_from(truth.mz_axis, truth.spectra[:, f])
            lib.append(LibrarySpectrum(_library_name(comp), mz, inten))
    return lib


def _library_name(comp: ComponentSpec) -> str:
    return f"standard-{comp.name}" if comp.kind == STANDARD else f"compound-{comp.name}"


def inner_edges(scenario: Scenario) -> list[tuple[str, str]]:
    return [(e.source, e.target) for e in scenario.transport]


# ---------------------------------------------------------------------------
# dataset writer


@dataclass
class Dataset:
    scenario: Scenario
    series: RiverSeries
    schedule: SampleSchedule
    samples: list[ChromatogramSample]
    truth: GroundTruth


def generate(scenario: Scenario) -> Dataset:
    series = gen_river_series(scenario)
    schedule = plan_samples(scenario, series)
    samples, truth = gen_chromatograms(scenario, schedule)
    return Dataset(scenario, series, schedule, samples, truth)


def write_dataset(ds: Dataset, out: str | Path) -> dict[str, Path]:
    """Write bundles, manifest, tables, libraries, ledger and a pipeline config."""
    out = Path(out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    sc = ds.scenario
    entries = []
    for ps, smp in zip(ds.schedule.samples, ds.samples):
        stem = out / "samples" / f"{smp.site_id}_{smp.timestamp}"
        save_sample(smp, stem)
        entries.append(ManifestEntry(smp.site_id, smp.timestamp, Path(str(stem)), round(ps.level_cm, 1)))
    paths = {
        "manifest": out / "manifest.csv",
        "flow_table": out / "flow_table.csv",
        "site_table": out / "sites.csv",
        "ledger": out / "ledger.csv",
        "spectra": out / "true_spectra.csv",
        "library": out / "library.msp",
        "standards": out / "standards.msp",
        "edges": out / "edges.csv",
        "windows": out / "windows.csv",
        "config": out / "pipeline.cfg",
    }
    write_manifest(paths["manifest"], entries)
    save_flow_table(paths["flow_table"], flow_table_rows(sc))
    save_site_table(paths["site_table"], site_records(sc))
    names = ds.truth.names
    write_rows(paths["ledger"],
               ["site_id", "timestamp", "time_h", "volume", "complete", "water_level_cm", *names],
               [[ps.site_id, smp.timestamp, ps.time_h, "" if ps.volume is None else ps.volume,
                 int(ps.complete), ps.level_cm, *ps.conc.tolist()]
                for ps, smp in zip(ds.schedule.samples, ds.samples)])
    write_rows(paths["spectra"], ["mz", *names],
               [[m, *row] for m, row in zip(ds.truth.mz_axis.tolist(), ds.truth.spectra.tolist())])
    write_library(paths["library"], reference_library(sc, ds.truth))
    write_library(paths["standards"], standards_library(sc, ds.truth))
    write_rows(paths["edges"], ["source", "target"], inner_edges(sc))
    groups = sorted({s.group for s in sc.sites})
    write_rows(paths["windows"], ["group", "rt_start", "rt_end"],
               [[g, a, b] for g in groups for a, b in zip(sc.windows[:-1], sc.windows[1:])])
    write_rows(out / "components.csv", ["name", "kind", "origin", "rt_min", "width_min"],
               [[c.name, c.kind, c.origin or "", c.rt_min, c.width_min] for c in sc.components])
    paths["config"].write_text(default_pipeline_config(sc), encoding="utf-8")
    return paths


def default_pipeline_config(scenario: Scenario) -> str:
    separate = sorted({s.group for s in scenario.sites} - {"main"})
    grid = ",".join(f"{g}:{n - 1}" for g, n in sorted(scenario.n_rt.items()))
    path = ",".join(scenario.sync_path)
    reaches = ",".join(f.id for f in scenario.flows)
    return "\n".join([
        "# generated with the synthetic scenario; paths are relative to this file",
        "output.dir = run",
        "data.manifest = manifest.csv",
        "data.flow_table = flow_table.csv",
        "data.site_table = sites.csv",
        "data.edges = edges.csv",
        "data.windows = windows.csv",
        "data.library = library.msp",
        "data.standards = standards.msp",
        f"sync.path = {path}",
        f"sync.reaches = {reaches}",
        f"preprocess.separate_sites = {','.join(separate)}",
        f"preprocess.grid_points = {grid}",
        "preprocess.asls_lambda = 1e4",
        "preprocess.seg_len = 30",
        "preprocess.slack = 3",
        "decompose.f_max = 5",
        "decompose.max_iter = 500",
        f"seed = {scenario.seed}",
        "",
    ])


def parse_scenario_text(text: str) -> Scenario:
    """``key = value`` lines; ``name`` selects the base scenario, other keys override it."""
    kv = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {ln}: expected 'key = value'")
        kv[key.strip().removeprefix("scenario.")] = val.strip()
    name = kv.pop("name", "mini-rhine")
    if name != "mini-rhine":
        raise ScenarioError(f"unknown scenario {name!r}")
    base = mini_rhine()
    over = {}
    for key, val in kv.items():
        if key not in Scenario.__dataclass_fields__ or key in ("sites", "flows", "transport",
                                                               "components", "windows", "sync_path", "n_rt"):
            raise ScenarioError(f"unknown or non-scalar scenario key {key!r}")
        cur = getattr(base, key)
        if cur is None or isinstance(cur, int) and not isinstance(cur, bool):
            over[key] = None if val.lower() == "none" else int(val)
        else:
            over[key] = float(val)
    return replace(base, **over)


# ---------------------------------------------------------------------------
# small stacks for tests


def random_parafac2_stack(rng: np.random.Generator, F: int, K: int = 20, I: int = 40, J: int = 60,
                          noise: float = 0.0, max_shift: int = 3):
    """Stack ``X_k = A diag(C_k) B_k'`` with ``B_k`` circular shifts of Gaussian peaks.

    Circular shifts are permutations, so every ``B_k`` has the same cross
    product. Returns ``(X, A, B, Bk, C)``; ``noise`` is the residual norm as a
    fraction of the clean stack norm.
    """
    A = rng.random((I, F)) ** 3
    centers = np.linspace(0.25 * J, 0.75 * J, F) + rng.uniform(-2, 2, F)
    j = np.arange(J)
    B = np.exp(-0.5 * ((j[:, None] - centers[None, :]) / rng.uniform(3.0, 5.0, F)) ** 2)
    C = rng.uniform(0.1, 1.0, (K, F))
    shifts = rng.integers(-max_shift, max_shift + 1, K)
    Bk = np.stack([np.roll(B, s, axis=0) for s in shifts])
    X = np.einsum("if,kf,kjf->kij", A, C, Bk)
    if noise > 0:
        E = rng.standard_normal(X.shape)
        X = X + noise * np.linalg.norm(X) / np.linalg.norm(E) * E
    return X, A, B, Bk, C
