import filecmp
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from riverpath.parafac2 import fit_parafac2, match_components
from riverpath.synthgen import (SOURCE, STANDARD, ScenarioError, TransportEdge, broaden, generate,
                                gen_river_series, mini_rhine, parse_scenario_text, transport_order,
                                transport_step, write_dataset)


def gaussian_smooth_direct(x, sigma, dt):
    # oracle: explicit truncated, normalized kernel with zero padding
    s = sigma / dt
    radius = int(6.0 * s + 0.5)
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / s) ** 2)
    k /= k.sum()
    return np.convolve(x, k, mode="same")


@pytest.fixture(scope="module")
def series():
    return gen_river_series(mini_rhine())


class TestTransport:
    def test_zero_dispersion_is_copy(self):
        x = np.random.default_rng(0).random((50, 3))
        out = transport_step({"A": x}, [TransportEdge("A", "B", 1.0, 0.0)], np.zeros((50, 3)), 0.5)
        np.testing.assert_array_equal(out, x)

    def test_pulse_area_conserved(self):
        x = np.zeros(2000)
        x[1000] = 7.0
        y = broaden(x, 3.0, 0.5)
        assert abs(y.sum() - 7.0) <= 1e-6
        assert y.max() < 7.0

    def test_decay(self):
        x = np.ones((20, 1))
        out = transport_step({"A": x}, [TransportEdge("A", "B", 0.5, 0.0, 0.2)], np.zeros((20, 1)), 0.5)
        np.testing.assert_allclose(out, 0.4)

    def test_ledger_satisfies_recurrence(self, series):
        sc = mini_rhine()
        dt = series.tau[1] - series.tau[0]
        src = [i for i, c in enumerate(sc.components) if c.kind == SOURCE]
        for s in sc.site_ids:
            expected = series.injection[s][:, src].copy()
            for e in sc.transport:
                if e.target == s:
                    for j, c in enumerate(src):
                        expected[:, j] += e.weight * (1 - e.decay) * gaussian_smooth_direct(
                            series.conc[e.source][:, c], e.dispersion_h, dt)
            np.testing.assert_allclose(series.conc[s][:, src], expected, rtol=1e-10, atol=1e-12)

    def test_standards_constant(self, series):
        sc = mini_rhine()
        for i, c in enumerate(sc.components):
            if c.kind == STANDARD:
                for s in sc.site_ids:
                    assert np.all(series.conc[s][:, i] == c.level)

    def test_tributary_and_injection_confined(self, series):
        names = series.components
        trib, inj = names.index("TRIB"), names.index("INJ")
        for s in ("HON", "ORL", "ORM", "ORR"):
            assert np.all(series.conc[s][:, trib] == 0)
        for s in ("HON", "ORL", "ORM", "ORR", "WSL", "WSR"):
            assert np.all(series.conc[s][:, inj] == 0)
        assert series.conc["BIM"][:, inj].max() > 0

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 5.0))
    def test_property_mass_balance(self, seed, sigma):
        rng = np.random.default_rng(seed)
        x = np.zeros(600)
        x[200:400] = rng.random(200)
        out = transport_step({"A": x}, [TransportEdge("A", "B", 1.0, sigma)], np.zeros(600), 0.5)
        assert abs(out.sum() - x.sum()) <= 1e-6 * max(1.0, x.sum())

    def test_cycle_rejected(self):
        sc = mini_rhine()
        bad = replace(sc, transport=sc.transport + (TransportEdge("BIM", "HON", 1.0),))
        with pytest.raises(ScenarioError):
            transport_order(bad)


class TestSchedule:
    def test_complete_volumes(self):
        sc = mini_rhine()
        ds = generate(sc)
        vols = {}
        for ps in ds.schedule.samples:
            if ps.complete:
                vols.setdefault(ps.volume, []).append(ps.site_id)
        assert len(vols) == sc.n_volumes
        assert all(sorted(v) == sorted(sc.site_ids) for v in vols.values())

    def test_mini_rhine_shape(self):
        sc = mini_rhine()
        assert len(sc.sites) == 9 and len(sc.components) == 12 and len(sc.transport) == 11
        assert sum(c.kind == STANDARD for c in sc.components) == 2


class TestChromatograms:
    def clean_window(self):
        sc = mini_rhine(noise=0.0, shift_sd_min=0.0, baseline_level=0.0, decimals=None,
                        n_volumes=20, n_incomplete=0, n_distractors=0)
        ds = generate(sc)
        keep = [k for k, s in enumerate(ds.samples) if s.site_id != "HON"]
        rt = ds.samples[keep[0]].rt_axis
        cols = (rt >= 0.0) & (rt < 6.0)
        X = np.stack([ds.samples[k].intensity[:, cols] for k in keep])
        return ds, keep, X, rt[cols]

    def test_noiseless_recovery(self):
        ds, keep, X, rt = self.clean_window()
        comps = [ds.truth.names.index(n) for n in ("IS1", "H1", "H2")]
        m = fit_parafac2(X, 3, seed=0)
        true_A = ds.truth.spectra[:, comps]
        true_B = np.exp(-0.5 * ((rt[:, None] - ds.truth.rt_apex[comps]) / ds.truth.widths[comps]) ** 2)
        true_C = np.array([ds.schedule.samples[k].conc[comps] * ds.truth.sensitivity[
            (ds.samples[k].site_id, ds.samples[k].timestamp)] for k in keep])
        _, worst = match_components([true_A, true_B, true_C], [m.A, m.mean_elution(), m.concentrations()])
        assert worst.min() >= 0.99

    def test_standard_normalization_recovers_amounts(self):
        ds, keep, X, rt = self.clean_window()
        m = fit_parafac2(X, 3, seed=0)
        names = ds.truth.names
        perm, _ = match_components([ds.truth.spectra[:, [names.index(n) for n in ("IS1", "H1", "H2")]]],
                                   [m.A])
        C = m.concentrations()
        ratio = C[:, perm[1]] / C[:, perm[0]]
        truth = np.array([ds.schedule.samples[k].conc[names.index("H1")] for k in keep])
        present = truth > 0            # the tributary site never sees H1
        scale = ratio[present] / truth[present]
        assert np.ptp(scale) / np.mean(scale) <= 1e-6
        assert np.all(np.abs(ratio[~present]) <= 1e-6 * np.max(ratio))

    def test_sensitivity_scales_samples(self):
        ds = generate(mini_rhine(n_volumes=5, n_incomplete=0))
        assert len(set(np.round(list(ds.truth.sensitivity.values()), 12))) > 1


class TestDeterminism:
    def test_bit_identical_files(self, tmp_path):
        sc = mini_rhine(n_volumes=8, n_incomplete=1)
        a = write_dataset(generate(sc), tmp_path / "a")
        b = write_dataset(generate(sc), tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and len(files_a) > 10
        for rel in files_a:
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False), rel
        assert set(a) == set(b)

    def test_seed_changes_data(self):
        a = generate(mini_rhine(seed=1, n_volumes=5, n_incomplete=0))
        b = generate(mini_rhine(seed=2, n_volumes=5, n_incomplete=0))
        assert not np.array_equal(a.samples[0].intensity, b.samples[0].intensity)


class TestScenarioText:
    def test_overrides(self):
        sc = parse_scenario_text("name = mini-rhine\nn_volumes = 12\nnoise = 0.01  # lower\nseed = 3\n")
        assert sc.n_volumes == 12 and sc.noise == 0.01 and sc.seed == 3

    @pytest.mark.parametrize("text", ["name = other", "sites = x", "bogus = 1", "n_volumes 3"])
    def test_rejects(self, text):
        with pytest.raises(ScenarioError):
            parse_scenario_text(text)
