"""Reading and writing chromatographic samples, flow tables, site tables and
labelled matrices.

A sample bundle is two files sharing a stem: ``<name>.hdr`` holds ``key: value``
lines and ``<name>.csv`` holds the intensity matrix (rows are mass channels,
columns are retention times). Floats are written with their shortest
round-trip representation so that save/load is bit-exact.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

HEADER_KEYS = ("site", "timestamp", "n_mz", "n_rt", "mz_axis", "rt_axis")
BANKS = ("left", "middle", "right")


class ChromioError(ValueError):
    """Base class for data errors raised by the loaders."""

    code = "data_error"


class HeaderError(ChromioError):
    code = "malformed_header"


class DimensionMismatchError(ChromioError):
    code = "dimension_mismatch"


class NonFiniteError(ChromioError):
    code = "non_finite"


class AxisOrderError(ChromioError):
    code = "non_increasing_rt"


class EmptyAxisError(ChromioError):
    code = "empty_axis"


class NegativeIntensityError(ChromioError):
    code = "negative_intensity"


class DuplicateSampleError(ChromioError):
    code = "duplicate_sample"


class UnknownSiteError(ChromioError):
    code = "unknown_site"


class TableFormatError(ChromioError):
    code = "table_format"


# ---------------------------------------------------------------------------
# timestamps


def parse_timestamp(text: str) -> int:
    """ISO-8601 string (or integer seconds) to integer seconds since epoch, UTC."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise HeaderError(f"bad timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(seconds: int) -> str:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _fmt(x: float) -> str:
    return repr(float(x))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class ChromatogramSample:
    """One GC-MS measurement: an intensity matrix with its axes.

    Arrays are copied and frozen on construction, so instances can be shared
    freely between threads.
    """

    site_id: str
    timestamp: int
    mz_axis: np.ndarray
    rt_axis: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "mz_axis", _readonly(np.ravel(self.mz_axis)))
        object.__setattr__(self, "rt_axis", _readonly(np.ravel(self.rt_axis)))
        object.__setattr__(self, "intensity", _readonly(np.atleast_2d(self.intensity)))
        validate_sample(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    def replace(self, **changes) -> "ChromatogramSample":
        fields = dict(site_id=self.site_id, timestamp=self.timestamp, mz_axis=self.mz_axis,
                      rt_axis=self.rt_axis, intensity=self.intensity)
        fields.update(changes)
        return ChromatogramSample(**fields)

    def __eq__(self, other):
        if not isinstance(other, ChromatogramSample):
            return NotImplemented
        return (self.site_id == other.site_id
                and self.timestamp == other.timestamp
                and np.array_equal(self.mz_axis, other.mz_axis)
                and np.array_equal(self.rt_axis, other.rt_axis)
                and np.array_equal(self.intensity, other.intensity))

    __hash__ = None


def validate_sample(sample: ChromatogramSample) -> None:
    if not sample.site_id or any(c in sample.site_id for c in " ,\n"):
        raise HeaderError(f"invalid site id {sample.site_id!r}")
    n_mz, n_rt = len(sample.mz_axis), len(sample.rt_axis)
    if n_rt == 0 or n_mz == 0:
        raise EmptyAxisError("mz_axis and rt_axis must be non-empty")
    if sample.intensity.ndim != 2 or sample.intensity.shape != (n_mz, n_rt):
        raise DimensionMismatchError(
            f"intensity shape {sample.intensity.shape} does not match axes ({n_mz}, {n_rt})")
    if not (np.all(np.isfinite(sample.intensity)) and np.all(np.isfinite(sample.rt_axis))
            and np.all(np.isfinite(sample.mz_axis))):
        raise NonFiniteError("non-finite values in sample")
    if n_rt > 1 and np.any(np.diff(sample.rt_axis) <= 0):
        raise AxisOrderError("rt_axis must be strictly increasing")
    if np.any(sample.intensity < 0):
        raise NegativeIntensityError("intensities must be >= 0")


def _bundle_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".hdr", ".csv"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".hdr"), path.with_name(path.name + ".csv")


def save_sample(sample: ChromatogramSample, path: str | Path) -> None:
    """Write ``sample`` as ``<path>.hdr`` + ``<path>.csv``."""
    validate_sample(sample)
    hdr, mat = _bundle_paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"site: {sample.site_id}",
        f"timestamp: {format_timestamp(sample.timestamp)}",
        f"n_mz: {len(sample.mz_axis)}",
        f"n_rt: {len(sample.rt_axis)}",
        "mz_axis: " + ",".join(map(_fmt, sample.mz_axis.tolist())),
        "rt_axis: " + ",".join(map(_fmt, sample.rt_axis.tolist())),
    ]
    hdr.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_matrix_csv(mat, sample.intensity)


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    rows = np.atleast_2d(np.asarray(matrix, dtype=np.float64)).tolist()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(",".join(map(repr, row)) for row in rows))
        fh.write("\n")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        return np.zeros((0, 0))
    try:
        data = [[float(v) for v in ln.split(",")] for ln in rows]
    except ValueError as exc:
        raise TableFormatError(f"{path}: non-numeric matrix entry") from exc
    widths = {len(r) for r in data}
    if len(widths) != 1:
        raise DimensionMismatchError(f"{path}: ragged matrix rows")
    return np.array(data, dtype=np.float64)


def read_header(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise HeaderError(f"{path}:{n}: expected 'key: value'")
        out[key.strip()] = value.strip()
    return out


def _parse_axis(text: str, key: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip() != ""])
    except ValueError as exc:
        raise HeaderError(f"bad {key} list") from exc


def load_sample(path: str | Path) -> ChromatogramSample:
    """Load and validate a sample bundle.

    ``path`` may name the stem or either of the two files.
    """
    hdr_path, mat_path = _bundle_paths(path)
    if not hdr_path.exists() or not mat_path.exists():
        raise FileNotFoundError(f"sample bundle {hdr_path.with_suffix('')} incomplete")
    header = read_header(hdr_path)
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise HeaderError(f"{hdr_path}: missing keys {missing}")
    try:
        n_mz, n_rt = int(header["n_mz"]), int(header["n_rt"])
    except ValueError as exc:
        raise HeaderError(f"{hdr_path}: n_mz/n_rt must be integers") from exc
    mz = _parse_axis(header["mz_axis"], "mz_axis")
    rt = _parse_axis(header["rt_axis"], "rt_axis")
    if len(mz) != n_mz or len(rt) != n_rt:
        raise DimensionMismatchError(f"{hdr_path}: axis lengths disagree with n_mz/n_rt")
    intensity = read_matrix_csv(mat_path)
    if intensity.shape != (n_mz, n_rt):
        raise DimensionMismatchError(
            f"{mat_path}: matrix is {intensity.shape}, header declares ({n_mz}, {n_rt})")
    return ChromatogramSample(header["site"], parse_timestamp(header["timestamp"]), mz, rt, intensity)


def compute_tic(sample: ChromatogramSample) -> np.ndarray:
    """Total ion current: sum over mass channels at every retention time."""
    return sample.intensity.sum(axis=0)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    site_id: str
    timestamp: int
    bundle_path: Path
    water_level_cm: float | None = None


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"site_id", "timestamp", "bundle_path"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise TableFormatError(f"{path}: manifest needs columns {sorted(need)}")
        for row in reader:
            bundle = Path(row["bundle_path"])
            if not bundle.is_absolute():
                bundle = path.parent / bundle
            level = row.get("water_level_cm")
            entries.append(ManifestEntry(
                row["site_id"].strip(), parse_timestamp(row["timestamp"]), bundle,
                float(level) if level not in (None, "") else None))
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "timestamp", "bundle_path", "water_level_cm"])
        for e in entries:
            bundle = Path(e.bundle_path)
            try:
                bundle = bundle.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([e.site_id, format_timestamp(e.timestamp), bundle.as_posix(),
                        "" if e.water_level_cm is None else _fmt(e.water_level_cm)])


def group_entries(entries: Sequence[ManifestEntry],
                  known_sites: Iterable[str] | None = None) -> dict[str, list[ManifestEntry]]:
    """Group manifest entries by site, sorted by timestamp.

    Raises on duplicate (site, timestamp) pairs and, when ``known_sites`` is
    given, on sites not in that set.
    """
    known = set(known_sites) if known_sites is not None else None
    groups: dict[str, list[ManifestEntry]] = defaultdict(list)
    seen = set()
    for e in entries:
        if known is not None and e.site_id not in known:
            raise UnknownSiteError(f"unknown site id {e.site_id!r}")
        key = (e.site_id, e.timestamp)
        if key in seen:
            raise DuplicateSampleError(
                f"duplicate sample for site {e.site_id} at {format_timestamp(e.timestamp)}")
        seen.add(key)
        groups[e.site_id].append(e)
    return {s: sorted(v, key=lambda e: e.timestamp) for s, v in sorted(groups.items())}


def load_dataset(manifest: str | Path,
                 known_sites: Iterable[str] | None = None) -> dict[str, list[ChromatogramSample]]:
    """Load every bundle listed in ``manifest``; returns time-sorted lists per site."""
    groups = group_entries(read_manifest(manifest), known_sites)
    out = {}
    for site, entries in groups.items():
        samples = []
        for e in entries:
            s = load_sample(e.bundle_path)
            if s.site_id != site or s.timestamp != e.timestamp:
                raise HeaderError(f"{e.bundle_path}: header (site, timestamp) disagrees with manifest")
            samples.append(s)
        out[site] = samples
    return out


# ---------------------------------------------------------------------------
# flow and site tables


def reach_id(upstream: str, downstream: str) -> str:
    return f"{upstream}-{downstream}"


def split_reach(rid: str) -> tuple[str, str]:
    up, sep, down = rid.partition("-")
    if not sep or not up or not down:
        raise TableFormatError(f"reach id {rid!r} must look like 'UP-DOWN'")
    return up, down


@dataclass(frozen=True)
class FlowTableRow:
    reach_id: str
    water_level: float
    flow_time: float

    def __post_init__(self):
        split_reach(self.reach_id)
        if not (self.water_level > 0 and self.flow_time > 0):
            raise TableFormatError(
                f"flow table row {self.reach_id}: water level and flow time must be > 0")


def load_flow_table(path: str | Path) -> dict[str, list[FlowTableRow]]:
    out: dict[str, list[FlowTableRow]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"reach_id", "water_level_cm", "flow_time_h"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise TableFormatError(f"{path}: flow table needs columns {sorted(need)}")
        for row in reader:
            try:
                r = FlowTableRow(row["reach_id"].strip(), float(row["water_level_cm"]),
                                 float(row["flow_time_h"]))
            except ValueError as exc:
                raise TableFormatError(f"{path}: {exc}") from exc
            out[r.reach_id].append(r)
    return dict(out)


def save_flow_table(path: str | Path, rows: Iterable[FlowTableRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["reach_id", "water_level_cm", "flow_time_h"])
        for r in rows:
            w.writerow([r.reach_id, _fmt(r.water_level), _fmt(r.flow_time)])


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    name: str
    river_km: float
    bank: str
    tolerance_to_next: float | None

    def __post_init__(self):
        if self.bank not in BANKS:
            raise TableFormatError(f"site {self.site_id}: bank must be one of {BANKS}")
        if self.tolerance_to_next is not None and not self.tolerance_to_next > 0:
            raise TableFormatError(f"site {self.site_id}: tolerance must be > 0")


def load_site_table(path: str | Path) -> dict[str, SiteRecord]:
    out: dict[str, SiteRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"site_id", "name", "river_km", "bank", "tolerance_h"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise TableFormatError(f"{path}: site table needs columns {sorted(need)}")
        for row in reader:
            tol = row["tolerance_h"].strip()
            rec = SiteRecord(row["site_id"].strip(), row["name"].strip(), float(row["river_km"]),
                             row["bank"].strip(), float(tol) if tol not in ("", "-") else None)
            if rec.site_id in out:
                raise DuplicateSampleError(f"{path}: site {rec.site_id} listed twice")
            out[rec.site_id] = rec
    return out


def save_site_table(path: str | Path, sites: Iterable[SiteRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "name", "river_km", "bank", "tolerance_h"])
        for s in sites:
            w.writerow([s.site_id, s.name, _fmt(s.river_km), s.bank,
                        "" if s.tolerance_to_next is None else _fmt(s.tolerance_to_next)])


# ---------------------------------------------------------------------------
# labelled matrices (concentration tables, predictions)


def save_labeled_matrix(path: str | Path, matrix: np.ndarray, columns: Sequence[str],
                        index: Sequence[str] | None = None, index_name: str = "row") -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape[1] != len(columns):
        raise DimensionMismatchError("column labels do not match matrix width")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if index is None:
            w.writerow(list(columns))
            for row in matrix.tolist():
                w.writerow([repr(v) for v in row])
        else:
            w.writerow([index_name, *columns])
            for label, row in zip(index, matrix.tolist()):
                w.writerow([label, *(repr(v) for v in row)])


def load_labeled_matrix(path: str | Path, index_name: str | None = "row"
                        ) -> tuple[np.ndarray, list[str], list[str] | None]:
    """Returns (matrix, column labels, row labels or None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableFormatError(f"{path}: empty table")
    header, body = rows[0], [r for r in rows[1:] if r]
    has_index = index_name is not None and header and header[0] == index_name
    if has_index:
        labels = [r[0] for r in body]
        data = [[float(v) for v in r[1:]] for r in body]
        columns = header[1:]
    else:
        labels = None
        data = [[float(v) for v in r] for r in body]
        columns = header
    mat = np.array(data, dtype=np.float64).reshape(len(body), len(columns))
    if not np.all(np.isfinite(mat)):
        raise NonFiniteError(f"{path}: non-finite entries")
    return mat, columns, labels


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def samples_by_key(groups: Mapping[str, Sequence[ChromatogramSample]]
                   ) -> dict[tuple[str, int], ChromatogramSample]:
    return {(s.site_id, s.timestamp): s for v in groups.values() for s in v}

