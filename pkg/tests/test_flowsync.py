import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import random_schedule, sync_oracle
from riverpath.chromio import FlowTableRow, SiteRecord
from riverpath.flowsync import (FlowModel, MissingFlowModelError, Reach, SampleTime,
                                UnderdeterminedFitError, chain_satisfies_windows,
                                estimate_flow_time, fit_flow_model, match_volumes)

CUBIC = (10.0, -0.01, 1e-5, -1e-9)
PATH9 = ["HON", "ORL", "ORM", "ORR", "WSL", "WSR", "REE", "LOB", "BIM"]


def cubic_rows(coef=CUBIC, levels=None, rid="A-B"):
    levels = np.linspace(100.0, 600.0, 12) if levels is None else levels
    c0, c1, c2, c3 = coef
    return [FlowTableRow(rid, float(L), float(c0 + c1 * L + c2 * L ** 2 + c3 * L ** 3)) for L in levels]


def as_inputs(sites, samples, tols):
    st_in = {s: [SampleTime(t, lv) for t, lv in v] for s, v in samples.items()}
    reaches = [Reach(a, b, tols[a]) for a, b in zip(sites[:-1], sites[1:])]
    return st_in, reaches


class TestFlowModel:
    def test_exact_cubic_recovered(self):
        rows = cubic_rows()
        m = fit_flow_model(rows)
        # independent normal-equations solve in the same (unscaled) basis
        L = np.array([r.water_level for r in rows])
        t = np.array([r.flow_time for r in rows])
        V = np.vander(L, 4, increasing=True)
        D = np.diag(1.0 / np.abs(V).max(axis=0))
        oracle = D @ np.linalg.solve((V @ D).T @ (V @ D), (V @ D).T @ t)
        np.testing.assert_allclose(m.coefficients, oracle, rtol=1e-6)
        np.testing.assert_allclose(m.coefficients, CUBIC, rtol=1e-6)
        assert m.fit_residual_rms >= 0 and m.fit_residual_rms < 1e-9

    def test_constant_rows(self):
        rows = [FlowTableRow("A-B", L, 12.0) for L in (100.0, 200.0, 300.0, 400.0, 500.0)]
        m = fit_flow_model(rows)
        assert m.coefficients[0] == pytest.approx(12.0, abs=1e-8)
        np.testing.assert_allclose(m.coefficients[1:], 0.0, atol=1e-9)

    def test_three_levels_underdetermined(self):
        rows = [FlowTableRow("A-B", L, 12.0) for L in (100.0, 200.0, 300.0, 300.0, 100.0)]
        with pytest.raises(UnderdeterminedFitError):
            fit_flow_model(rows)

    def test_finite_on_training_levels(self):
        rows = cubic_rows()
        m = fit_flow_model(rows)
        assert np.all(np.isfinite(m([r.water_level for r in rows])))


class TestEstimate:
    def test_constant_model(self):
        m = FlowModel("A-B", (12.0, 0.0, 0.0, 0.0), 0.0, (100.0, 500.0))
        for L in (50.0, 300.0, 900.0):
            assert estimate_flow_time(m, L).hours == 12.0

    def test_at_training_level(self):
        rows = cubic_rows()
        m = fit_flow_model(rows)
        for r in rows:
            est = estimate_flow_time(m, r.water_level)
            assert est.hours == pytest.approx(r.flow_time, abs=1e-9)
            assert est.valid and not est.extrapolated

    def test_negative_prediction_flagged(self):
        m = FlowModel("A-B", (-2.0, 0.0, 0.0, 0.0), 0.0, (100.0, 500.0))
        est = estimate_flow_time(m, 300.0)
        assert est.hours == -2.0 and not est.valid

    def test_extrapolation_flagged(self):
        m = FlowModel("A-B", (12.0, 0.0, 0.0, 0.0), 0.0, (100.0, 500.0))
        assert estimate_flow_time(m, 700.0).extrapolated


class TestMatchVolumes:
    def _exact_schedule(self, n=6, shift_site=None):
        tf = 5.0
        models = {f"{a}-{b}": FlowModel(f"{a}-{b}", (tf, 0, 0, 0), 0.0) for a, b in zip(PATH9, PATH9[1:])}
        sites = {s: SiteRecord(s, s, float(i), "left", 2.0) for i, s in enumerate(PATH9)}
        samples = {}
        for k, s in enumerate(PATH9):
            t0 = 1_400_000_000 + np.arange(n) * 24 * 3600 + int(k * tf * 3600)
            if s == shift_site:
                t0 = t0 + 3 * 3600
            samples[s] = [int(t) for t in t0]
        return samples, models, sites

    def test_exact_arrivals_give_one_chain_per_start(self):
        samples, models, sites = self._exact_schedule()
        rep = match_volumes(samples, models, sites, PATH9)
        assert len(rep.volumes) == 6
        for v, t0 in zip(rep.volumes, samples["HON"]):
            assert v.sites == tuple(PATH9) and v.timestamp("HON") == t0

    def test_site_shifted_beyond_tolerance(self):
        samples, models, sites = self._exact_schedule(shift_site="WSL")
        assert match_volumes(samples, models, sites, PATH9).volumes == []

    def test_missing_flow_model(self):
        samples, models, sites = self._exact_schedule()
        del models["REE-LOB"]
        with pytest.raises(MissingFlowModelError):
            match_volumes(samples, models, sites, PATH9)

    def test_nearest_candidate_wins(self):
        models = {"A-B": FlowModel("A-B", (10.0, 0, 0, 0), 0.0)}
        h = 3600
        samples = {"A": [0], "B": [int(9.0 * h), int(10.5 * h), int(11.5 * h)]}
        rep = match_volumes(samples, models, None, ["A", "B"], [Reach("A", "B", 2.0)])
        assert rep.volumes[0].timestamp("B") == int(10.5 * h)

    def test_backtracks_when_nearest_dead_ends(self):
        h = 3600
        models = {"A-B": FlowModel("A-B", (10.0, 0, 0, 0), 0.0),
                  "B-C": FlowModel("B-C", (10.0, 0, 0, 0), 0.0)}
        # nearest B (10.2 h) has no C within 1 h; the farther B (11 h) does
        samples = {"A": [0], "B": [int(10.2 * h), int(11.0 * h)], "C": [int(21.5 * h)]}
        reaches = [Reach("A", "B", 1.5), Reach("B", "C", 1.0)]
        rep = match_volumes(samples, models, None, ["A", "B", "C"], reaches)
        assert [v.members for v in rep.volumes] == [(("A", 0), ("B", int(11 * h)), ("C", int(21.5 * h)))]

    def test_tributary_matched_backwards(self):
        h = 3600
        models = {"A-J": FlowModel("A-J", (10.0, 0, 0, 0), 0.0),
                  "T-J": FlowModel("T-J", (4.0, 0, 0, 0), 0.0)}
        samples = {"A": [0, int(48 * h)], "J": [int(10 * h), int(58 * h)], "T": [int(6.3 * h)]}
        reaches = [Reach("A", "J", 1.0), Reach("T", "J", 1.0)]
        rep = match_volumes(samples, models, None, ["A", "T", "J"], reaches)
        assert len(rep.volumes) == 1
        assert rep.volumes[0].members == (("A", 0), ("T", int(6.3 * h)), ("J", int(10 * h)))

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        sites, samples, models, tols = random_schedule(rng)
        st_in, reaches = as_inputs(sites, samples, tols)
        rep = match_volumes(st_in, models, None, sites, reaches)
        assert [v.members for v in rep.volumes] == sync_oracle(sites, samples, models, tols)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_chains_satisfy_windows(self, seed):
        rng = np.random.default_rng(seed)
        sites, samples, models, tols = random_schedule(rng, max_samples=15)
        st_in, reaches = as_inputs(sites, samples, tols)
        levels = {(s, t): lv for s, v in samples.items() for t, lv in v}
        for v in match_volumes(st_in, models, None, sites, reaches).volumes:
            assert chain_satisfies_windows(v, levels, models, reaches)
            ts = [t for _, t in v.members]
            assert ts == sorted(ts)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 3.0))
    def test_property_count_monotone_in_tolerance(self, seed, extra):
        rng = np.random.default_rng(seed)
        sites, samples, models, tols = random_schedule(rng, max_samples=15)
        st_in, reaches = as_inputs(sites, samples, tols)
        wider = [Reach(r.upstream, r.downstream, r.tolerance_h + extra) for r in reaches]
        n1 = len(match_volumes(st_in, models, None, sites, reaches).volumes)
        n2 = len(match_volumes(st_in, models, None, sites, wider).volumes)
        assert n2 >= n1

    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_input_order_irrelevant(self, seed):
        rng = np.random.default_rng(seed)
        sites, samples, models, tols = random_schedule(rng, max_samples=15)
        st_in, reaches = as_inputs(sites, samples, tols)
        shuffled = {s: [v[i] for i in rng.permutation(len(v))] for s, v in st_in.items()}
        a = match_volumes(st_in, models, None, sites, reaches).volumes
        b = match_volumes(dict(reversed(list(shuffled.items()))), models, None, sites, reaches[::-1]).volumes
        assert a == b
