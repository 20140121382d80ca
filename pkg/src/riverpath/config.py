"""Flat ``section.key = value`` pipeline configuration.

Blank lines and ``#`` comments are ignored. Relative paths are resolved
against the directory of the config file. ``riverpath config --defaults``
prints the schema below with its defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

REQUIRED = object()


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _grid_points(text: str) -> dict[str, int]:
    out = {}
    for tok in _list(text):
        group, sep, n = tok.partition(":")
        if not sep:
            raise ValueError(f"expected group:points, got {tok!r}")
        out[group.strip()] = int(n)
    return out


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    path: bool = False


SCHEMA: tuple[Option, ...] = (
    Option("seed", int, REQUIRED, "master seed; every random draw derives from it"),
    Option("output.dir", str, "run", "output directory", path=True),
    Option("data.manifest", str, REQUIRED, "sample manifest CSV", path=True),
    Option("data.flow_table", str, REQUIRED, "flow-time table CSV", path=True),
    Option("data.site_table", str, REQUIRED, "site table CSV", path=True),
    Option("data.edges", str, REQUIRED, "path-model edge list CSV (source,target)", path=True),
    Option("data.windows", str, REQUIRED, "retention-time windows CSV (group,rt_start,rt_end)", path=True),
    Option("data.standards", str, REQUIRED, "internal-standard spectra (MSP)", path=True),
    Option("data.library", str, "", "reference library for annotation (MSP); empty skips matching",
           path=True),
    Option("sync.path", _list, REQUIRED, "site order a synchronized volume must cover"),
    Option("sync.reaches", _list, (), "reaches UP-DOWN; default consecutive pairs of sync.path"),
    Option("preprocess.separate_sites", _list, (), "sites aligned on their own grid (own group)"),
    Option("preprocess.grid_points", _grid_points, {}, "group:r pairs; grid has r+1 points"),
    Option("preprocess.default_grid_points", int, 4300, "r for groups not listed"),
    Option("preprocess.asls_lambda", float, 1e6, "AsLS smoothness penalty"),
    Option("preprocess.asls_p", float, 0.001, "AsLS asymmetry weight"),
    Option("preprocess.asls_max_iter", int, 20, "AsLS reweighting iterations"),
    Option("preprocess.seg_len", int, 50, "COW segment length (grid points)"),
    Option("preprocess.slack", int, 5, "COW slack (grid points)"),
    Option("decompose.f_min", int, 1, "smallest PARAFAC2 rank tried"),
    Option("decompose.f_max", int, 7, "largest PARAFAC2 rank tried"),
    Option("decompose.n_starts", int, 5, "initializations per rank"),
    Option("decompose.max_iter", int, 2000, "ALS sweep limit"),
    Option("decompose.tol", float, 1e-8, "relative SSE decrease for convergence"),
    Option("decompose.core_threshold", float, 80.0, "minimum core consistency of an accepted rank"),
    Option("decompose.min_gain", float, 1.0, "minimum fit gain (percentage points) per added rank"),
    Option("decompose.core_method", str, "projected", "core consistency variant: projected or mean_elution"),
    Option("decompose.ratio_threshold", float, 5.0, "peak max/median ratio below which a profile is baseline"),
    Option("decompose.span_threshold", float, 0.8, "window fraction above which a profile is baseline"),
    Option("decompose.presence_threshold", float, 0.6,
           "median elution-profile agreement for a component to count as present at a site"),
    Option("decompose.standard_min_score", float, 0.7,
           "minimum match score for the best component of each standard entry"),
    Option("pathmodel.max_lv", _optional_int, None, "upper bound on latent variables; none = data limit"),
    Option("pathmodel.outer_folds", int, 5, "outer cross-validation folds"),
    Option("pathmodel.inner_folds", int, 5, "inner cross-validation folds"),
    Option("match.top_n", int, 5, "library hits kept per component"),
    Option("match.mz_tol", float, 0.3, "m/z binning tolerance"),
    Option("match.mz_power", float, 1.3, "m/z weighting exponent"),
    Option("match.intensity_power", float, 0.53, "intensity weighting exponent"),
    Option("match.noise_floor", float, 0.05, "query channels below this fraction of the base peak are ignored"),
    Option("report.figures", _bool, True, "write SVG figures"),
)

_BY_KEY = {o.key: o for o in SCHEMA}


@dataclass
class PipelineConfig:
    values: dict[str, Any]
    source: Path | None = None
    raw: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["output.dir"])

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        return Path(v) if v else None

    def to_text(self) -> str:
        lines = []
        for o in SCHEMA:
            v = self.values.get(o.key)
            lines.append(f"{o.key} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return ",".join(f"{k}:{n}" for k, n in v.items())
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config_text(text: str, base_dir: str | Path | None = None,
                      overrides: Mapping[str, str] | None = None) -> PipelineConfig:
    """Parse config text; ``overrides`` are raw ``key -> text`` pairs applied last."""
    raw: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        if key not in _BY_KEY:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        raw[key] = val.strip()
    for k, v in (overrides or {}).items():
        if k not in _BY_KEY:
            raise ConfigError(f"unknown key {k!r}")
        raw[k] = str(v)

    base = Path(base_dir) if base_dir is not None else Path.cwd()
    values: dict[str, Any] = {}
    for o in SCHEMA:
        if o.key not in raw:
            if o.default is REQUIRED:
                raise ConfigError(f"missing required key {o.key!r}")
            v = o.default
        else:
            try:
                v = o.parse(raw[o.key])
            except ValueError as exc:
                raise ConfigError(f"{o.key}: {exc}") from None
        if o.path and v:
            p = Path(v)
            v = str(p if p.is_absolute() else base / p)
        values[o.key] = v
    _check_values(values)
    return PipelineConfig(values, None, raw)


def _check_values(v: Mapping[str, Any]) -> None:
    if len(v["sync.path"]) < 2:
        raise ConfigError("sync.path needs at least two sites")
    if not 1 <= v["decompose.f_min"] <= v["decompose.f_max"]:
        raise ConfigError("need 1 <= decompose.f_min <= decompose.f_max")
    if v["decompose.core_method"] not in ("projected", "mean_elution"):
        raise ConfigError("decompose.core_method must be 'projected' or 'mean_elution'")
    for key in ("preprocess.asls_lambda", "preprocess.seg_len", "preprocess.default_grid_points",
                "decompose.n_starts", "decompose.max_iter", "decompose.tol",
                "pathmodel.outer_folds", "pathmodel.inner_folds", "match.mz_tol"):
        if not v[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if not 0 <= v["match.noise_floor"] < 1:
        raise ConfigError("match.noise_floor must lie in [0, 1)")
    if not 0 < v["preprocess.asls_p"] < 1:
        raise ConfigError("preprocess.asls_p must lie in (0, 1)")
    if v["preprocess.slack"] < 0:
        raise ConfigError("preprocess.slack must be non-negative")
    if any(n < 2 for n in v["preprocess.grid_points"].values()):
        raise ConfigError("preprocess.grid_points entries must be >= 2")
    if v["pathmodel.max_lv"] is not None and v["pathmodel.max_lv"] < 1:
        raise ConfigError("pathmodel.max_lv must be >= 1")


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    cfg = parse_config_text(text, path.parent, overrides)
    cfg.source = path
    return cfg


def defaults_text() -> str:
    """Schema listing: one commented entry per key with its default."""
    lines = ["# riverpath pipeline configuration (key = value; paths relative to this file)"]
    for o in SCHEMA:
        lines.append(f"# {o.help}")
        if o.default is REQUIRED:
            lines.append(f"{o.key} =    # required")
        else:
            lines.append(f"{o.key} = {_format_value(o.default)}")
    return "\n".join(lines) + "\n"
