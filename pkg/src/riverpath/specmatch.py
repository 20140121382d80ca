"""Tentative annotation of component mass spectra against a reference library.

Library files use a subset of the MSP text format::

    NAME: acetonitrile
    NUMPEAKS: 3
    41 999
    40 500
    39 120

Records are separated by blank lines. Extra ``KEY: value`` lines before
``NUMPEAKS`` are kept as metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_MZ_TOL = 0.3
DEFAULT_MZ_POWER = 1.3
DEFAULT_INTENSITY_POWER = 0.53


class LibraryFormatError(ValueError):
    """Malformed library file; ``record`` is the 0-based record index."""

    def __init__(self, message: str, record: int | None = None, line: int | None = None):
        loc = []
        if record is not None:
            loc.append(f"record {record}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.record = record
        self.line = line


@dataclass(frozen=True)
class LibrarySpectrum:
    name: str
    mz: np.ndarray
    intensity: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        mz = np.array(self.mz, dtype=float).reshape(-1)
        inten = np.array(self.intensity, dtype=float).reshape(-1)
        if not self.name:
            raise ValueError("spectrum name must not be empty")
        if mz.shape != inten.shape:
            raise ValueError(f"{self.name}: mz and intensity lengths differ")
        if not (np.all(np.isfinite(mz)) and np.all(np.isfinite(inten))):
            raise ValueError(f"{self.name}: non-finite peak values")
        if np.any(inten < 0):
            raise ValueError(f"{self.name}: negative intensity")
        if len(np.unique(mz)) != len(mz):
            raise ValueError(f"{self.name}: duplicate mz values")
        order = np.argsort(mz, kind="stable")
        mz, inten = mz[order], inten[order]
        mz.setflags(write=False)
        inten.setflags(write=False)
        object.__setattr__(self, "mz", mz)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, LibrarySpectrum):
            return NotImplemented
        return (self.name == other.name and np.array_equal(self.mz, other.mz)
                and np.array_equal(self.intensity, other.intensity) and self.metadata == other.metadata)

    __hash__ = None


class SpectralLibrary(tuple):
    """Immutable sequence of uniquely named spectra."""

    def __new__(cls, spectra: Iterable[LibrarySpectrum]):
        spectra = tuple(spectra)
        seen = set()
        for i, s in enumerate(spectra):
            if s.name in seen:
                raise LibraryFormatError(f"duplicate name {s.name!r}", record=i)
            seen.add(s.name)
        return super().__new__(cls, spectra)

    def names(self) -> list[str]:
        return [s.name for s in self]

    def get(self, name: str) -> LibrarySpectrum:
        for s in self:
            if s.name == name:
                return s
        raise KeyError(name)


class MatchHit(NamedTuple):
    name: str
    score: float
    rank: int


def _parse_number(tok: str, what: str, rec: int, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise LibraryFormatError(f"bad {what} {tok!r}", rec, line) from None
    if not np.isfinite(v):
        raise LibraryFormatError(f"non-finite {what}", rec, line)
    return v


def parse_library_text(text: str) -> SpectralLibrary:
    records: list[list[tuple[int, str]]] = []
    cur: list[tuple[int, str]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            if cur:
                records.append(cur)
                cur = []
            continue
        cur.append((ln, line))
    if cur:
        records.append(cur)

    out = []
    for ri, rec in enumerate(records):
        name = None
        npeaks = None
        meta = {}
        peaks: list[tuple[float, float]] = []
        for ln, line in rec:
            if npeaks is None:
                key, sep, val = line.partition(":")
                if not sep:
                    raise LibraryFormatError(f"expected 'KEY: value', got {line!r}", ri, ln)
                key, val = key.strip().upper(), val.strip()
                if key == "NAME":
                    name = val
                elif key in ("NUMPEAKS", "NUM PEAKS"):
                    try:
                        npeaks = int(val)
                    except ValueError:
                        raise LibraryFormatError(f"bad peak count {val!r}", ri, ln) from None
                    if npeaks < 0:
                        raise LibraryFormatError("negative peak count", ri, ln)
                else:
                    meta[key] = val
                continue
            toks = line.replace(",", " ").replace(";", " ").split()
            if len(toks) != 2:
                raise LibraryFormatError(f"expected '<mz> <intensity>', got {line!r}", ri, ln)
            mz = _parse_number(toks[0], "mz", ri, ln)
            inten = _parse_number(toks[1], "intensity", ri, ln)
            if inten < 0:
                raise LibraryFormatError("negative intensity", ri, ln)
            peaks.append((mz, inten))
        if not name:
            raise LibraryFormatError("missing NAME", ri)
        if npeaks is None:
            raise LibraryFormatError("missing NUMPEAKS", ri)
        if len(peaks) != npeaks:
            raise LibraryFormatError(f"NUMPEAKS says {npeaks}, found {len(peaks)} peaks", ri)
        arr = np.array(peaks, dtype=float).reshape(-1, 2)
        try:
            out.append(LibrarySpectrum(name, arr[:, 0], arr[:, 1], meta))
        except ValueError as exc:
            raise LibraryFormatError(str(exc), ri) from None
    return SpectralLibrary(out)


def parse_library(path: str | Path) -> SpectralLibrary:
    """Read an MSP-subset library file."""
    return parse_library_text(Path(path).read_text(encoding="utf-8"))


def format_library(library: Sequence[LibrarySpectrum]) -> str:
    chunks = []
    for s in library:
        lines = [f"NAME: {s.name}"]
        lines += [f"{k}: {v}" for k, v in s.metadata.items()]
        lines.append(f"NUMPEAKS: {len(s.mz)}")
        lines += [f"{m!r} {i!r}" for m, i in zip(s.mz.tolist(), s.intensity.tolist())]
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def write_library(path: str | Path, library: Sequence[LibrarySpectrum]) -> None:
    Path(path).write_text(format_library(library), encoding="utf-8")


def bin_to_axis(ref: LibrarySpectrum, mz_axis: np.ndarray, mz_tol: float = DEFAULT_MZ_TOL) -> np.ndarray:
    """Sum reference peaks onto the nearest query channel within ``mz_tol``.

    Peaks farther than ``mz_tol`` from every channel are dropped; ties go to
    the lower channel.
    """
    axis = np.asarray(mz_axis, dtype=float)
    out = np.zeros(len(axis))
    if len(axis) == 0 or len(ref.mz) == 0:
        return out
    order = np.argsort(axis, kind="stable")
    sa = axis[order]
    pos = np.searchsorted(sa, ref.mz)
    lo = np.clip(pos - 1, 0, len(sa) - 1)
    hi = np.clip(pos, 0, len(sa) - 1)
    dlo = np.abs(ref.mz - sa[lo])
    dhi = np.abs(sa[hi] - ref.mz)
    near = np.where(dhi < dlo, hi, lo)
    dist = np.minimum(dlo, dhi)
    ok = dist <= mz_tol
    np.add.at(out, order[near[ok]], ref.intensity[ok])
    return out


def weighted_cosine(mz: np.ndarray, a: np.ndarray, b: np.ndarray,
                    mz_power: float = DEFAULT_MZ_POWER,
                    intensity_power: float = DEFAULT_INTENSITY_POWER) -> float:
    """Cosine of ``mz**m * I**n`` weighted vectors; 0 if either is all zero."""
    mz = np.asarray(mz, dtype=float)
    wa = mz ** mz_power * np.clip(np.asarray(a, float), 0, None) ** intensity_power
    wb = mz ** mz_power * np.clip(np.asarray(b, float), 0, None) ** intensity_power
    na, nb = np.linalg.norm(wa), np.linalg.norm(wb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(wa @ wb / (na * nb), 0.0, 1.0))


def clean_query(query: np.ndarray, noise_floor: float = 0.0) -> np.ndarray:
    """Clip negatives and zero every channel below ``noise_floor`` * base peak."""
    q = np.clip(np.asarray(query, dtype=float).reshape(-1), 0.0, None)
    if noise_floor > 0 and q.size:
        q = np.where(q >= noise_floor * q.max(), q, 0.0)
    return q


def match_spectrum(query: np.ndarray, mz_axis: np.ndarray, ref: LibrarySpectrum,
                   mz_tol: float = DEFAULT_MZ_TOL, mz_power: float = DEFAULT_MZ_POWER,
                   intensity_power: float = DEFAULT_INTENSITY_POWER, noise_floor: float = 0.0) -> float:
    """Score a component spectrum (intensities on ``mz_axis``) against one reference.

    Returns a weighted cosine in [0, 1]. Negative query values (possible in
    unconstrained fits) are clipped to zero. With ``noise_floor`` > 0, query
    channels below that fraction of the base peak are ignored; the
    intensity exponent otherwise inflates small fitting residue.
    """
    axis = np.asarray(mz_axis, dtype=float).reshape(-1)
    if np.asarray(query).size != axis.size:
        raise ValueError("query and mz_axis lengths differ")
    q = clean_query(query, noise_floor)
    if not np.any(q > 0):
        raise ValueError("query spectrum is all zero")
    return weighted_cosine(axis, q, bin_to_axis(ref, axis, mz_tol), mz_power, intensity_power)


def search_library(query: np.ndarray, mz_axis: np.ndarray, library: Sequence[LibrarySpectrum],
                   top_n: int = 5, mz_tol: float = DEFAULT_MZ_TOL, mz_power: float = DEFAULT_MZ_POWER,
                   intensity_power: float = DEFAULT_INTENSITY_POWER, noise_floor: float = 0.0
                   ) -> list[MatchHit]:
    """Best ``top_n`` library entries by score; ties ordered by name."""
    if len(library) == 0:
        raise ValueError("library is empty")
    scored = [(match_spectrum(query, mz_axis, ref, mz_tol, mz_power, intensity_power, noise_floor),
               ref.name)
              for ref in library]
    scored.sort(key=lambda x: (-x[0], x[1]))
    return [MatchHit(name, score, i + 1) for i, (score, name) in enumerate(scored[:max(top_n, 0)])]
