import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import weighted_cosine_direct
from riverpath.specmatch import (LibraryFormatError, LibrarySpectrum, SpectralLibrary, bin_to_axis,
                                 clean_query, format_library, match_spectrum, parse_library,
                                 parse_library_text, search_library, weighted_cosine, write_library)

TWO = """NAME: toluene
FORMULA: C7H8
NUMPEAKS: 3
91 999
92 620
65 80

NAME: benzene
NUMPEAKS: 2
78 999
52 190
"""

AXIS = np.arange(40.0, 200.0)


def random_spectrum(rng, name, n=12):
    mz = np.sort(rng.choice(AXIS, n, replace=False))
    return LibrarySpectrum(name, mz, rng.uniform(1, 999, n).round(1))


def on_axis(spec):
    return bin_to_axis(spec, AXIS)


class TestParse:
    def test_two_records(self):
        lib = parse_library_text(TWO)
        assert lib.names() == ["toluene", "benzene"]
        tol = lib.get("toluene")
        np.testing.assert_array_equal(tol.mz, [65, 91, 92])
        assert tol.metadata == {"FORMULA": "C7H8"}

    def test_negative_intensity_reports_record(self):
        with pytest.raises(LibraryFormatError) as exc:
            parse_library_text(TWO.replace("52 190", "52 -190"))
        assert exc.value.record == 1

    @pytest.mark.parametrize("bad", [TWO.replace("NUMPEAKS: 2", "NUMPEAKS: 3"),
                                     TWO.replace("NAME: benzene\n", ""),
                                     TWO.replace("78 999", "78 abc"),
                                     TWO.replace("benzene", "toluene")])
    def test_malformed(self, bad):
        with pytest.raises(LibraryFormatError):
            parse_library_text(bad)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        lib = SpectralLibrary([random_spectrum(rng, f"c{i}") for i in range(5)]
                              + [LibrarySpectrum("x", [50.1, 60.25], [1e-3, 7.0], {"CAS": "1-2-3"})])
        write_library(tmp_path / "lib.msp", lib)
        back = parse_library(tmp_path / "lib.msp")
        assert back == lib
        assert format_library(back) == format_library(lib)


class TestScore:
    def test_self_match_is_one(self):
        ref = random_spectrum(np.random.default_rng(1), "a")
        assert match_spectrum(on_axis(ref), AXIS, ref) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_support_is_zero(self):
        ref = LibrarySpectrum("a", [50.0, 51.0], [1.0, 1.0])
        q = np.zeros(len(AXIS))
        q[100] = 5.0
        assert match_spectrum(q, AXIS, ref) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_spectrum(rng, "r", 20)
        q = rng.random(len(AXIS)) * (rng.random(len(AXIS)) < 0.2)
        q[0] = 1.0
        b = on_axis(ref)
        assert match_spectrum(q, AXIS, ref) == pytest.approx(weighted_cosine_direct(AXIS, q, b), abs=1e-12)

    def test_binning_tolerance(self):
        ref = LibrarySpectrum("a", [60.2, 70.4, 80.5], [1.0, 2.0, 3.0])
        b = bin_to_axis(ref, AXIS, 0.3)
        assert b[20] == 1.0 and b[30] == 0.0 and b[40] == 0.0
        assert bin_to_axis(ref, AXIS, 0.5)[40] == 3.0   # tie goes to the lower channel

    def test_noise_floor(self):
        q = np.array([0.01, 1.0, -0.2, 0.2])
        np.testing.assert_array_equal(clean_query(q, 0.05), [0.0, 1.0, 0.0, 0.2])

    def test_zero_query_rejected(self):
        with pytest.raises(ValueError):
            match_spectrum(np.zeros(len(AXIS)), AXIS, LibrarySpectrum("a", [50.0], [1.0]))

    @given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_property_symmetric_and_scale_invariant(self, seed, s1, s2):
        rng = np.random.default_rng(seed)
        a, b = on_axis(random_spectrum(rng, "a")), on_axis(random_spectrum(rng, "b"))
        base = weighted_cosine(AXIS, a, b)
        assert weighted_cosine(AXIS, b, a) == base
        assert weighted_cosine(AXIS, s1 * a, s2 * b) == pytest.approx(base, abs=1e-12)
        assert 0.0 <= base <= 1.0


class TestSearch:
    def library(self, n=100, seed=2):
        rng = np.random.default_rng(seed)
        return SpectralLibrary([random_spectrum(rng, f"c{i:03d}") for i in range(n)])

    def test_query_in_library(self):
        lib = self.library(20)
        hits = search_library(on_axis(lib[7]), AXIS, lib)
        assert hits[0].name == "c007" and hits[0].rank == 1
        assert hits[0].score == pytest.approx(1.0, abs=1e-12)

    def test_top_n_larger_than_library(self):
        lib = self.library(4)
        assert len(search_library(on_axis(lib[0]), AXIS, lib, top_n=10)) == 4

    def test_rank_one_is_bruteforce_argmax(self):
        lib = self.library()
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = on_axis(lib[int(rng.integers(100))]) * rng.uniform(0.5, 1.5, len(AXIS))
            q += 50 * rng.random(len(AXIS)) * (rng.random(len(AXIS)) < 0.1)
            scores = [weighted_cosine_direct(AXIS, q, on_axis(r)) for r in lib]
            best = max(range(len(lib)), key=lambda i: (scores[i], -i))
            assert search_library(q, AXIS, lib, top_n=1)[0].name == lib[best].name

    def test_order_stable_under_library_permutation(self):
        lib = self.library(30)
        q = on_axis(lib[3]) + on_axis(lib[9])
        a = search_library(q, AXIS, lib, top_n=30)
        b = search_library(q, AXIS, SpectralLibrary(list(lib)[::-1]), top_n=30)
        assert a == b
        assert [h.rank for h in a] == list(range(1, 31))

    def test_empty_library(self):
        with pytest.raises(ValueError):
            search_library(np.ones(len(AXIS)), AXIS, SpectralLibrary([]))
