"""End-to-end pipeline: sync, preprocess, decompose, pathmodel, predict, match, report.

Each stage reads its inputs from the output directory (or the configured data
files) and writes its results there before the next stage starts, so any
stage can be rerun on its own from persisted intermediates. Stage metadata
(timings and diagnostics) goes to ``stages/<name>.json``; ``run_report.json``
collects it at the end. Those two are the only outputs that vary between
identical runs.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .chromio import (ChromioError, format_timestamp, group_entries, load_flow_table, load_labeled_matrix,
                      load_sample, load_site_table, parse_timestamp, read_manifest, read_rows,
                      save_labeled_matrix, write_rows)
from .config import ConfigError, PipelineConfig
from .flowsync import SampleTime, SyncError, default_reaches, fit_flow_model, match_volumes, parse_reaches
from .parafac2 import (CHEMICAL, Parafac2Error, component_records, derive_seed, detect_presence,
                       normalize_internal_standards, segment_windows, select_rank)
from .pathmodel import (PathModelError, fit_path_model, format_summary, load_edges, load_model, nrmse,
                        predict_block, report_rows, save_model)
from .preprocess import PreprocessError, align_dataset
from .specmatch import LibraryFormatError, match_spectrum, parse_library, search_library

log = logging.getLogger(__name__)

STAGES = ("sync", "preprocess", "decompose", "pathmodel", "predict", "match", "report")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# which stage first reads each configured file
_FILE_STAGE = {
    "data.manifest": "sync",
    "data.flow_table": "sync",
    "data.site_table": "sync",
    "data.windows": "decompose",
    "data.standards": "decompose",
    "data.edges": "pathmodel",
    "data.library": "match",
}


class PipelineDataError(ValueError):
    """Input data inconsistent with what a stage needs."""


class StageError(RuntimeError):
    """A stage failed; ``exit_code`` follows the CLI convention."""

    def __init__(self, stage: str, error: BaseException):
        self.stage = stage
        self.error = error
        self.exit_code = error_exit_code(error)
        super().__init__(f"stage {stage}: {error}")


def error_exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (Parafac2Error, PreprocessError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ChromioError, SyncError, PathModelError, LibraryFormatError, PipelineDataError,
                        OSError, KeyError, ValueError)):
        return EXIT_DATA
    return EXIT_NUMERIC


# ---------------------------------------------------------------------------
# shared helpers


def site_groups(cfg: PipelineConfig) -> dict[str, list[str]]:
    """Alignment groups: each separate site alone, the rest together as ``main``.

    Groups are ordered by their first site along ``sync.path``.
    """
    path = list(cfg["sync.path"])
    separate = set(cfg["preprocess.separate_sites"])
    unknown = separate - set(path)
    if unknown:
        raise ConfigError(f"preprocess.separate_sites not on sync.path: {sorted(unknown)}")
    groups: dict[str, list[str]] = {}
    for s in path:
        g = s if s in separate else "main"
        groups.setdefault(g, []).append(s)
    return groups


def _stage_dir(out: Path, name: str) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def read_volumes(out: Path) -> tuple[list[str], list[dict[str, int]]]:
    rows = read_rows(out / "sync" / "volumes.csv")
    if not rows:
        raise PipelineDataError("no synchronized volumes")
    sites = [k for k in rows[0] if k != "volume"]
    return sites, [{s: parse_timestamp(r[s]) for s in sites} for r in rows]


def read_windows(path: Path) -> dict[str, list[float]]:
    """Contiguous window boundaries per group from ``group,rt_start,rt_end`` rows."""
    spans: dict[str, list[tuple[float, float]]] = {}
    for r in read_rows(path):
        try:
            spans.setdefault(r["group"].strip(), []).append((float(r["rt_start"]), float(r["rt_end"])))
        except (KeyError, ValueError):
            raise PipelineDataError(f"{path}: rows need group,rt_start,rt_end") from None
    out = {}
    for g, sp in spans.items():
        sp.sort()
        for (a0, a1), (b0, _) in zip(sp[:-1], sp[1:]):
            if a1 != b0:
                raise PipelineDataError(f"{path}: windows of group {g} are not contiguous")
        out[g] = [sp[0][0]] + [b for _, b in sp]
    return out


def _read_vector(path: Path) -> np.ndarray:
    return np.array([float(r["value"]) for r in read_rows(path)])


def _write_vector(path: Path, values: np.ndarray) -> None:
    write_rows(path, ["value"], [[float(v)] for v in values])


def _load_block(out: Path, site: str) -> tuple[np.ndarray, list[str]]:
    X, cols, _ = load_labeled_matrix(out / "blocks" / f"{site}.csv", index_name="volume")
    return X, cols


# ---------------------------------------------------------------------------
# stages


@dataclass
class SyncResult:
    path: list[str]
    reaches: list
    models: dict
    volumes: list
    report: object
    samples_per_site: dict[str, int]


def sync_volumes(manifest: Path, flow_table: Path, site_table: Path, path, reaches=()) -> SyncResult:
    """Fit reach flow models and chain the manifest's samples into volumes."""
    sites = load_site_table(site_table)
    table = load_flow_table(flow_table)
    path = list(path)
    missing = [s for s in path if s not in sites]
    if missing:
        raise PipelineDataError(f"path sites missing from the site table: {missing}")
    rlist = parse_reaches(",".join(reaches), sites) if reaches else default_reaches(path, sites)
    models = {}
    for r in rlist:
        if r.id not in table:
            raise SyncError(f"flow table has no rows for reach {r.id}")
        models[r.id] = fit_flow_model(table[r.id])
    groups = group_entries(read_manifest(manifest), sites)
    samples = {s: [SampleTime(e.timestamp, e.water_level_cm) for e in v] for s, v in groups.items()}
    rep = match_volumes(samples, models, sites, path, rlist)
    return SyncResult(path, rlist, models, rep.volumes, rep,
                      {s: len(samples.get(s, ())) for s in path})


def write_volumes(path: Path, res: SyncResult) -> None:
    """One row per volume; columns are site ids, values ISO timestamps."""
    write_rows(path, ["volume", *res.path],
               [[i, *(format_timestamp(v.timestamp(s)) for s in res.path)]
                for i, v in enumerate(res.volumes)])


def stage_sync(cfg: PipelineConfig, out: Path) -> dict:
    res = sync_volumes(cfg.path("data.manifest"), cfg.path("data.flow_table"), cfg.path("data.site_table"),
                       cfg["sync.path"], cfg["sync.reaches"])
    if not res.volumes:
        raise SyncError("no synchronized volumes found")
    d = _stage_dir(out, "sync")
    write_volumes(d / "volumes.csv", res)
    write_rows(d / "flow_models.csv",
               ["reach_id", "c0", "c1", "c2", "c3", "residual_rms_h", "level_min_cm", "level_max_cm",
                "tolerance_h"],
               [[r.id, *res.models[r.id].coefficients, res.models[r.id].fit_residual_rms,
                 *res.models[r.id].level_range, r.tolerance_h] for r in res.reaches])
    return {"n_volumes": len(res.volumes), "n_extrapolated": res.report.n_extrapolated,
            "n_invalid": res.report.n_invalid, "samples_per_site": res.samples_per_site}


def stage_preprocess(cfg: PipelineConfig, out: Path) -> dict:
    _, vols = read_volumes(out)
    bundles = {(e.site_id, e.timestamp): e.bundle_path for e in read_manifest(cfg.path("data.manifest"))}
    d = _stage_dir(out, "preprocess")
    diag = {}
    for g, gsites in site_groups(cfg).items():
        keys = [(s, v[s]) for s in gsites for v in vols]
        samples = []
        for site, ts in keys:
            if (site, ts) not in bundles:
                raise PipelineDataError(f"no bundle for {site} at {format_timestamp(ts)}")
            smp = load_sample(bundles[(site, ts)])
            if smp.site_id != site or smp.timestamp != ts:
                raise PipelineDataError(f"{bundles[(site, ts)]}: header disagrees with the manifest")
            samples.append(smp)
        mz = samples[0].mz_axis
        if any(not np.array_equal(s.mz_axis, mz) for s in samples):
            raise PipelineDataError(f"group {g}: samples have different mass axes")
        r = cfg["preprocess.grid_points"].get(g, cfg["preprocess.default_grid_points"])
        al = align_dataset(samples, r=r, lam=cfg["preprocess.asls_lambda"], p=cfg["preprocess.asls_p"],
                           max_iter=cfg["preprocess.asls_max_iter"], seg_len=cfg["preprocess.seg_len"],
                           slack=cfg["preprocess.slack"])
        np.save(d / f"{g}.npy", np.stack([s.intensity for s in al.samples]))
        _write_vector(d / f"{g}_rt.csv", al.grid.grid)
        _write_vector(d / f"{g}_mz.csv", mz)
        nv = len(vols)
        write_rows(d / f"{g}_samples.csv",
                   ["row", "site_id", "timestamp", "volume", "corr_before", "corr_after",
                    "baseline_converged", "is_reference"],
                   [[i, rec.site_id, format_timestamp(rec.timestamp), i % nv, rec.corr_before,
                     rec.corr_after, int(rec.baseline_converged), int(rec.is_reference)]
                    for i, rec in enumerate(al.report)])
        diag[g] = {"n_samples": len(samples), "grid_points": len(al.grid),
                   "corr_before": float(np.mean([x.corr_before for x in al.report])),
                   "corr_after": float(np.mean([x.corr_after for x in al.report]))}
    return diag


def assign_standards(records, mz: np.ndarray, standards, min_score: float, **match_kw) -> dict[str, float]:
    """Mark the best-matching component of each standard entry as that standard.

    Each internal standard is one compound, so it is assigned to at most one
    component: the one scoring highest against it, provided the score reaches
    ``min_score``. Returns the best standard score of every record.
    """
    if not records:
        return {}
    scores = np.array([[match_spectrum(r.spectrum, mz, ref, **match_kw) for ref in standards]
                       for r in records])
    for j, ref in enumerate(standards):
        i = int(np.argmax(scores[:, j]))
        if scores[i, j] >= min_score and not records[i].is_standard:
            records[i].is_standard = True
            records[i].annotation = ref.name
    return {r.component_id: float(scores[i].max()) for i, r in enumerate(records)}


def stage_decompose(cfg: PipelineConfig, out: Path) -> dict:
    windows = read_windows(cfg.path("data.windows"))
    standards = parse_library(cfg.path("data.standards"))
    if len(standards) == 0:
        raise PipelineDataError("standards library is empty")
    groups = site_groups(cfg)
    _, vols = read_volumes(out)
    nv = len(vols)
    pre = out / "preprocess"
    d = _stage_dir(out, "decompose")
    bd = _stage_dir(out, "blocks")
    mkw = dict(mz_tol=cfg["match.mz_tol"], mz_power=cfg["match.mz_power"],
               intensity_power=cfg["match.intensity_power"], noise_floor=cfg["match.noise_floor"])
    registry, rank_rows, block_rows = [], [], []
    diag = {}
    for g, gsites in groups.items():
        if g not in windows:
            raise PipelineDataError(f"no retention-time windows for group {g}")
        X = np.load(pre / f"{g}.npy")
        rt = _read_vector(pre / f"{g}_rt.csv")
        mz = _read_vector(pre / f"{g}_mz.csv")
        labels = [f"{r['site_id']}@{r['timestamp']}" for r in read_rows(pre / f"{g}_samples.csv")]
        recs = []
        chosen = {}
        for w in segment_windows(rt, windows[g]):
            f, rows, models = select_rank(
                X[:, :, w.j_start:w.j_end],
                f_range=range(cfg["decompose.f_min"], cfg["decompose.f_max"] + 1),
                core_threshold=cfg["decompose.core_threshold"], min_gain=cfg["decompose.min_gain"],
                n_starts=cfg["decompose.n_starts"], seed=derive_seed(cfg.seed, g, w.window_id),
                max_iter=cfg["decompose.max_iter"], tol=cfg["decompose.tol"],
                core_method=cfg["decompose.core_method"])
            log.info("group %s window %d: rank %d", g, w.window_id, f)
            chosen[w.window_id] = f
            rank_rows += [[g, w.window_id, r.rank, r.fit_percent, r.core_consistency, r.fit_gain,
                           r.iterations, int(r.converged), int(r.accepted), int(r.rank == f)] for r in rows]
            recs += component_records(models[f], w.window_id, prefix=f"{g}_",
                                      ratio_threshold=cfg["decompose.ratio_threshold"],
                                      span_threshold=cfg["decompose.span_threshold"])
        chem = [r for r in recs if r.classification == CHEMICAL]
        std_score = assign_standards(chem, mz, standards, cfg["decompose.standard_min_score"], **mkw)
        for rec in recs:
            registry.append([rec.component_id, g, rec.window_id, rec.index, rec.classification,
                             int(rec.is_standard), rec.annotation or "",
                             std_score.get(rec.component_id, float("nan")), rec.peak_ratio, rec.span_fraction])
        ids = [r.component_id for r in recs]
        save_labeled_matrix(d / f"{g}_concentrations.csv", np.column_stack([r.profile for r in recs]),
                            ids, labels, "sample")
        save_labeled_matrix(d / f"{g}_agreement.csv", np.column_stack([r.agreement for r in recs]),
                            ids, labels, "sample")
        save_labeled_matrix(d / f"{g}_spectra.csv", np.column_stack([r.spectrum for r in recs]),
                            ids, [repr(float(m)) for m in mz], "mz")

        std_idx = [i for i, r in enumerate(chem) if r.is_standard]
        if not std_idx:
            raise PipelineDataError(f"group {g}: no internal standard found among the components")
        conc = np.column_stack([r.profile for r in chem])
        norm, is_std = normalize_internal_standards(conc, std_idx)
        keep = [r for r, s in zip(chem, is_std) if not s]
        norm = norm[:, ~is_std]
        agree = np.column_stack([r.agreement for r in keep]) if keep else np.zeros((len(conc), 0))
        present = detect_presence(agree, [range(i * nv, (i + 1) * nv) for i in range(len(gsites))],
                                  cfg["decompose.presence_threshold"])
        for i, site in enumerate(gsites):
            B = norm[i * nv:(i + 1) * nv]
            cols = [j for j in range(B.shape[1]) if present[i, j] and B[:, j].std() > 0]
            if not cols:
                raise PipelineDataError(f"site {site}: no component detected")
            save_labeled_matrix(bd / f"{site}.csv", B[:, cols], [keep[j].component_id for j in cols],
                                [str(v) for v in range(nv)], "volume")
            block_rows.append([site, g, len(cols), ";".join(keep[j].component_id for j in cols)])
        diag[g] = {"ranks": {str(k): v for k, v in chosen.items()}, "n_components": len(recs),
                   "n_chemical": len(chem), "n_standards": len(std_idx)}

    write_rows(d / "components.csv",
               ["component_id", "group", "window_id", "index", "classification", "is_standard",
                "standard_name", "standard_score", "peak_ratio", "span_fraction"], registry)
    write_rows(d / "ranks.csv", ["group", "window_id", "rank", "fit_percent", "core_consistency",
                                 "fit_gain", "iterations", "converged", "accepted", "chosen"], rank_rows)
    order = {s: i for i, s in enumerate(cfg["sync.path"])}
    block_rows.sort(key=lambda r: order[r[0]])
    write_rows(bd / "blocks.csv", ["site_id", "group", "n_components", "components"], block_rows)
    return diag


def stage_pathmodel(cfg: PipelineConfig, out: Path) -> dict:
    edges = load_edges(cfg.path("data.edges"))
    blocks = {s: _load_block(out, s)[0] for s in cfg["sync.path"]}
    model = fit_path_model(blocks, edges, max_lv=cfg["pathmodel.max_lv"],
                           outer_folds=cfg["pathmodel.outer_folds"],
                           inner_folds=cfg["pathmodel.inner_folds"], seed=cfg.seed)
    d = _stage_dir(out, "pathmodel")
    save_model(model, d / "model.json")
    write_rows(d / "report.csv", ["kind", "id", "source", "target", "value"], report_rows(model))
    summary = format_summary(model)
    (d / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    return {"summary": summary.splitlines()}


def stage_predict(cfg: PipelineConfig, out: Path) -> dict:
    model = load_model(out / "pathmodel" / "model.json")
    d = _stage_dir(out, "predict")
    rows = []
    for target in model.spec.topological_order():
        if target not in model.inner.blocks:
            continue
        meas, cols = _load_block(out, target)
        preds = {z: _load_block(out, z)[0] for z in model.inner.blocks[target].predecessors}
        pred = predict_block(model, target, preds)
        save_labeled_matrix(d / f"{target}.csv", pred, cols, [str(v) for v in range(len(pred))], "volume")
        for j, c in enumerate(cols):
            m, p = meas[:, j], pred[:, j]
            corr = float(np.corrcoef(m, p)[0, 1]) if p.std() > 0 else float("nan")
            rows.append([target, c, nrmse(m, p), corr])
    write_rows(d / "nrmse.csv", ["site_id", "component_id", "nrmse", "correlation"], rows)
    vals = np.array([r[2] for r in rows])
    return {"n_profiles": len(rows), "median_nrmse": float(np.median(vals)) if len(vals) else None}


def stage_match(cfg: PipelineConfig, out: Path) -> dict:
    d = _stage_dir(out, "match")
    header = ["component_id", "rank", "name", "score"]
    lib_path = cfg.path("data.library")
    if lib_path is None:
        write_rows(d / "hits.csv", header, [])
        return {"skipped": True}
    library = parse_library(lib_path)
    registry = read_rows(out / "decompose" / "components.csv")
    rows = []
    spectra = {}
    for g in site_groups(cfg):
        S, ids, mz = load_labeled_matrix(out / "decompose" / f"{g}_spectra.csv", index_name="mz")
        spectra[g] = (S, ids, np.array([float(m) for m in mz]))
    for r in registry:
        if r["classification"] != CHEMICAL or r["is_standard"] == "1":
            continue
        S, ids, mz = spectra[r["group"]]
        hits = search_library(S[:, ids.index(r["component_id"])], mz, library, top_n=cfg["match.top_n"],
                              mz_tol=cfg["match.mz_tol"], mz_power=cfg["match.mz_power"],
                              intensity_power=cfg["match.intensity_power"],
                              noise_floor=cfg["match.noise_floor"])
        rows += [[r["component_id"], h.rank, h.name, h.score] for h in hits]
    write_rows(d / "hits.csv", header, rows)
    return {"n_components": len({r[0] for r in rows}), "library_size": len(library)}


def _figures(out: Path, d: Path) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    with matplotlib.rc_context({"svg.hashsalt": "riverpath", "svg.fonttype": "none"}):
        for path in sorted((out / "predict").glob("*.csv")):
            if path.name == "nrmse.csv":
                continue
            site = path.stem
            pred, cols, _ = load_labeled_matrix(path, index_name="volume")
            meas, mcols = _load_block(out, site)
            if mcols != cols:
                raise PipelineDataError(f"prediction columns for {site} differ from its block")
            vol = np.arange(len(meas))
            header = ["volume"] + [f"{c}_{k}" for c in cols for k in ("measured", "predicted")]
            write_rows(d / f"{site}_profiles.csv", header,
                       [[int(v), *np.ravel(np.column_stack([meas[v], pred[v]])).tolist()] for v in vol])
            n = len(cols)
            fig, axes = plt.subplots(n, 1, figsize=(7, 1.6 * n + 0.6), sharex=True, squeeze=False)
            for ax, j in zip(axes[:, 0], range(n)):
                ax.plot(vol, meas[:, j], color="black", lw=1.0, label="measured")
                ax.plot(vol, pred[:, j], color="tab:red", lw=1.0, ls="--", label="predicted")
                ax.set_ylabel(cols[j], fontsize=7)
                ax.tick_params(labelsize=7)
            axes[0, 0].set_title(f"{site}: measured vs predicted", fontsize=9)
            axes[0, 0].legend(fontsize=7, loc="upper right")
            axes[-1, 0].set_xlabel("volume")
            fig.tight_layout()
            fig.savefig(d / f"{site}_profiles.svg", format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(site)
    return written


def stage_report(cfg: PipelineConfig, out: Path) -> dict:
    d = _stage_dir(out, "figures")
    sites = _figures(out, d) if cfg["report.figures"] else []
    return {"figures": sites}


STAGE_FUNCS: dict[str, Callable[[PipelineConfig, Path], dict]] = {
    "sync": stage_sync,
    "preprocess": stage_preprocess,
    "decompose": stage_decompose,
    "pathmodel": stage_pathmodel,
    "predict": stage_predict,
    "match": stage_match,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# driver


@dataclass
class StageResult:
    name: str
    seconds: float
    diagnostics: dict


def check_inputs(cfg: PipelineConfig, stages=STAGES) -> None:
    """Every configured file needed by ``stages`` must exist; failures name the stage."""
    for key, stage in _FILE_STAGE.items():
        if stage not in stages:
            continue
        p = cfg.path(key)
        if p is not None and not p.is_file():
            raise StageError(stage, PipelineDataError(f"{key} not found: {p}"))


def run_stage(name: str, cfg: PipelineConfig, out: Path | None = None) -> StageResult:
    """Run one stage and record its metadata under ``stages/``."""
    if name not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}")
    out = Path(out) if out is not None else cfg.out_dir
    check_inputs(cfg, (name,))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        diag = STAGE_FUNCS[name](cfg, out)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    res = StageResult(name, time.perf_counter() - t0, diag)
    meta = _stage_dir(out, "stages") / f"{name}.json"
    meta.write_text(json.dumps({"stage": name, "seconds": res.seconds, "diagnostics": diag},
                               indent=1, default=_json_default), encoding="utf-8")
    if name == "report":
        write_run_report(cfg, out)
    return res


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_run_report(cfg: PipelineConfig, out: Path) -> dict:
    stages = []
    for name in STAGES:
        meta = out / "stages" / f"{name}.json"
        if meta.is_file():
            stages.append(json.loads(meta.read_text(encoding="utf-8")))
    report = {
        "versions": {"riverpath": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "seed": cfg.seed,
        "config": cfg.to_text().splitlines(),
        "stages": stages,
        "total_seconds": sum(s["seconds"] for s in stages),
    }
    (out / "run_report.json").write_text(json.dumps(report, indent=1, default=_json_default),
                                         encoding="utf-8")
    return report


def run_pipeline(cfg: PipelineConfig, out: Path | None = None) -> dict:
    """Run all stages in order; returns the run report.

    Raises ``StageError`` naming the failing stage.
    """
    out = Path(out) if out is not None else cfg.out_dir
    check_inputs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "stages"
    if stale.is_dir():
        for f in stale.glob("*.json"):
            f.unlink()
    for name in STAGES:
        log.info("stage %s", name)
        run_stage(name, cfg, out)
    return json.loads((out / "run_report.json").read_text(encoding="utf-8"))
