import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ols_coef
from riverpath.pathmodel import (BlockScaling, PathModelError, PathSpec, fit_path_model, format_summary,
                                 inner_regression, load_model, nrmse, predict_block, report_model,
                                 report_rows, save_model, select_lv_doublecv, simpls_fit)

RHINE_EDGES = [("HON", "ORL"), ("HON", "ORM"), ("HON", "ORR"), ("ORL", "WSR"), ("ORM", "WSR"),
               ("ORR", "WSR"), ("WSL", "WSR"), ("WSR", "REE"), ("REE", "LOB"), ("ORL", "BIM"),
               ("LOB", "BIM")]


def all_stats(model):
    blocks, edges = report_model(model)
    out = [r.r2 for r in blocks] + [r.p2 for r in blocks if r.p2 is not None]
    return np.array(out + [e.partial_p2 for e in edges])


def chain_blocks(rng, n=60, p=4, noise=0.3):
    S = rng.standard_normal((n, 2))
    mix = lambda: S @ rng.standard_normal((2, p)) + noise * rng.standard_normal((n, p))
    return {"A": mix(), "B": mix(), "C": mix()}


class TestSimpls:
    def test_rank_one_exact(self):
        rng = np.random.default_rng(0)
        X = np.outer(rng.standard_normal(30), rng.uniform(0.5, 2.0, 4))
        Y = 3 * X[:, :1]
        fit = simpls_fit(X, Y, 1)
        assert np.max(np.abs(fit.predict(X) - Y)) <= 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_full_rank_equals_ols(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((40, 6))
        Y = X @ rng.standard_normal((6, 3)) + 0.5 * rng.standard_normal((40, 3))
        np.testing.assert_allclose(simpls_fit(X, Y, 6).coef(), ols_coef(X, Y), atol=1e-8)

    def test_first_weight_along_informative_column(self):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((50, 3))
        Q, _ = np.linalg.qr(M - M.mean(axis=0))
        X = Q * [2.0, 1.0, 3.0]
        Y = 5 * X[:, 1:2]
        r = simpls_fit(X, Y, 1).weights[:, 0]
        np.testing.assert_allclose(np.abs(r) / np.linalg.norm(r), [0, 1, 0], atol=1e-10)

    def test_scores_orthonormal(self):
        rng = np.random.default_rng(2)
        X, Y = rng.standard_normal((25, 5)), rng.standard_normal((25, 2))
        T = simpls_fit(X, Y, 4).scores
        np.testing.assert_allclose(T.T @ T, np.eye(4), atol=1e-12)

    def test_errors(self):
        X = np.ones((10, 3))
        X[:, 0] = np.arange(10)
        with pytest.raises(PathModelError):
            simpls_fit(X, np.arange(10.0), 1)
        with pytest.raises(PathModelError):
            simpls_fit(np.random.default_rng(0).random((5, 3)), np.arange(5.0), 4)


class TestDoubleCv:
    def test_two_directions(self):
        rng = np.random.default_rng(3)
        S = rng.standard_normal((100, 2))
        X = S @ rng.standard_normal((2, 8)) + 0.05 * rng.standard_normal((100, 8))
        Y = S @ rng.standard_normal((2, 3)) + 0.05 * rng.standard_normal((100, 3))
        assert select_lv_doublecv(X, Y, 6, seed=0).n_lv in (2, 3)

    def test_pure_noise(self):
        # argmin over noisy RMSECV curves: one latent variable in the large majority of draws
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            ch = select_lv_doublecv(rng.standard_normal((80, 6)), rng.standard_normal((80, 2)), 5, seed=0)
            hits += ch.n_lv == 1
        assert hits >= 17

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        X, Y = rng.standard_normal((50, 5)), rng.standard_normal((50, 2))
        assert select_lv_doublecv(X, Y, seed=7) == select_lv_doublecv(X, Y, seed=7)

    def test_small_sample_fallback(self):
        rng = np.random.default_rng(6)
        ch = select_lv_doublecv(rng.standard_normal((8, 3)), rng.standard_normal((8, 1)))
        assert ch.fallback and 1 <= ch.n_lv <= 3


class TestOuter:
    def test_copy_block_r2_one(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((50, 4))
        m = fit_path_model({"A": A, "B": A.copy()}, [("A", "B")])
        assert m.outer.blocks["A"].r2 == pytest.approx(1.0, abs=1e-9)
        assert m.inner.blocks["B"].p2 == pytest.approx(1.0, abs=1e-9)

    def test_independent_blocks(self):
        # one latent variable always extracts at least ~1/p of a block's variance;
        # oracle: variance captured by projecting the scaled block on its score
        for seed in range(5):
            rng = np.random.default_rng(seed)
            A, B = rng.standard_normal((500, 5)), rng.standard_normal((500, 5))
            m = fit_path_model({"A": A, "B": B}, [("A", "B")], seed=seed)
            bo = m.outer.blocks["A"]
            Z = m.outer.scalings["A"].transform(A)
            proj, *_ = np.linalg.lstsq(bo.scores, Z, rcond=None)
            captured = np.sum((bo.scores @ proj) ** 2) / (500 - 1)
            assert bo.n_lv == 1
            assert bo.r2 == pytest.approx(captured, rel=1e-9)
            assert 0.15 <= bo.r2 <= 0.3
            assert m.inner.blocks["B"].p2 <= 0.1

    def test_block_scaling_round_trip(self):
        X = np.random.default_rng(8).standard_normal((20, 3)) * [1, 10, 100] + 5
        s = BlockScaling.fit(X)
        np.testing.assert_allclose(s.inverse(s.transform(X)), X, rtol=1e-12, atol=1e-12 * 100)
        assert np.sum(np.var(s.transform(X), axis=0, ddof=1)) == pytest.approx(1.0)

    def test_zero_variance_rejected(self):
        with pytest.raises(PathModelError):
            BlockScaling.fit(np.ones((5, 2)))


class TestInner:
    def test_identity_single_predecessor(self):
        xi = np.linalg.qr(np.random.default_rng(9).standard_normal((40, 2)) - 0.0)[0]
        xi -= xi.mean(axis=0)
        n_lv, coef, p2, partial, _ = inner_regression(xi, [xi], ["A"])
        assert p2 == pytest.approx(1.0, abs=1e-9) and partial == {"A": p2}

    def test_orthogonal_equal_split(self):
        rng = np.random.default_rng(10)
        a, b = rng.standard_normal(500), rng.standard_normal(500)
        b -= a * (a @ b) / (a @ a)
        a, b = a / a.std(), b / b.std()
        _, _, p2, partial, _ = inner_regression((a + b)[:, None], [a[:, None], b[:, None]], ["A", "B"])
        assert partial["A"] == pytest.approx(0.5, abs=0.05)
        assert partial["B"] == pytest.approx(0.5, abs=0.05)
        assert partial["A"] + partial["B"] == p2

    def test_dominant_predecessor_gets_more(self):
        rng = np.random.default_rng(11)
        a, b = rng.standard_normal((200, 1)), rng.standard_normal((200, 1))
        _, _, _, partial, _ = inner_regression(3 * a + b, [a, b], ["A", "B"])
        assert partial["A"] > partial["B"]


class TestPredict:
    def test_identity_chain(self):
        rng = np.random.default_rng(12)
        A = rng.standard_normal((40, 3)) * [1, 5, 20] + 3
        m = fit_path_model({"A": A, "B": A.copy()}, [("A", "B")])
        pred = predict_block(m, "B", {"A": A})
        np.testing.assert_allclose(pred, A, rtol=1e-6, atol=1e-6 * np.abs(A).max())

    def test_chain_predicts_shared_signal(self):
        blocks = chain_blocks(np.random.default_rng(13), n=200, noise=0.1)
        m = fit_path_model(blocks, [("A", "B"), ("B", "C")])
        pred = predict_block(m, "C", {"B": blocks["B"]})
        for j in range(blocks["C"].shape[1]):
            assert np.corrcoef(pred[:, j], blocks["C"][:, j])[0, 1] > 0.9

    def test_errors(self):
        blocks = chain_blocks(np.random.default_rng(14))
        m = fit_path_model(blocks, [("A", "B"), ("B", "C")])
        with pytest.raises(PathModelError):
            predict_block(m, "A", {})
        with pytest.raises(PathModelError):
            predict_block(m, "C", {})
        with pytest.raises(PathModelError):
            predict_block(m, "Z", {})


class TestNrmse:
    def test_examples(self):
        m = np.array([1.0, 2.0, 4.0, 7.0])
        assert nrmse(m, m) == 0.0
        assert nrmse(m, np.full(4, m.mean())) == pytest.approx(1.0, abs=1e-12)
        assert nrmse(m, m + m.std()) == pytest.approx(1.0, abs=1e-12)

    def test_errors(self):
        with pytest.raises(PathModelError):
            nrmse([1.0, 1.0], [1.0, 2.0])
        with pytest.raises(PathModelError):
            nrmse([1.0, 2.0], [1.0])


class TestSpecAndReport:
    def test_cycle_rejected(self):
        with pytest.raises(PathModelError):
            PathSpec((("A", 1), ("B", 1)), (("A", "B"), ("B", "A")))

    def test_unknown_block_rejected(self):
        with pytest.raises(PathModelError):
            PathSpec((("A", 1),), (("A", "B"),))

    def test_two_block_report(self):
        blocks = chain_blocks(np.random.default_rng(15))
        del blocks["C"]
        b, e = report_model(fit_path_model(blocks, [("A", "B")]))
        assert len(b) == 2 and len(e) == 1

    def test_rhine_topology_report(self):
        rng = np.random.default_rng(16)
        S = rng.standard_normal((60, 3))
        sites = sorted({s for edge in RHINE_EDGES for s in edge})
        blocks = {s: S @ rng.standard_normal((3, 3)) + 0.3 * rng.standard_normal((60, 3)) for s in sites}
        m = fit_path_model(blocks, RHINE_EDGES)
        b, e = report_model(m)
        assert len(b) == 9 and len(e) == 11
        for t, ib in m.inner.blocks.items():
            assert 0.0 <= ib.p2 <= 1.0
            assert sum(ib.partial_p2.values()) == pytest.approx(ib.p2, abs=1e-15)
        text = format_summary(m)
        assert "HON->ORL" in text
        assert all(r[0] in ("R2", "n_lv", "P2", "partial_P2") for r in report_rows(m))

    def test_save_load_round_trip(self, tmp_path):
        blocks = chain_blocks(np.random.default_rng(17))
        m = fit_path_model(blocks, [("A", "B"), ("B", "C")])
        save_model(m, tmp_path / "m.json")
        m2 = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(all_stats(m), all_stats(m2))
        np.testing.assert_allclose(predict_block(m2, "C", {"B": blocks["B"]}),
                                   predict_block(m, "C", {"B": blocks["B"]}), rtol=1e-14)


class TestProperties:
    @settings(max_examples=15)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_row_permutation(self, seed):
        rng = np.random.default_rng(seed)
        blocks = chain_blocks(rng)
        perm = rng.permutation(60)
        edges = [("A", "B"), ("B", "C")]
        a = fit_path_model(blocks, edges, seed=1)
        b = fit_path_model({k: v[perm] for k, v in blocks.items()}, edges, seed=1)
        np.testing.assert_allclose(all_stats(a), all_stats(b), atol=1e-12)

    @settings(max_examples=15)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_variable_scale(self, seed):
        rng = np.random.default_rng(seed)
        blocks = chain_blocks(rng)
        scaled = {k: v * rng.uniform(0.01, 100.0, v.shape[1]) for k, v in blocks.items()}
        edges = [("A", "B"), ("B", "C")]
        np.testing.assert_allclose(all_stats(fit_path_model(blocks, edges)),
                                   all_stats(fit_path_model(scaled, edges)), atol=1e-9)

    @settings(max_examples=15)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_partials_sum(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((50, 2))
        blocks = {k: S @ rng.standard_normal((2, 3)) + rng.uniform(0.1, 2) * rng.standard_normal((50, 3))
                  for k in "ABCD"}
        m = fit_path_model(blocks, [("A", "D"), ("B", "D"), ("C", "D")])
        ib = m.inner.blocks["D"]
        assert sum(ib.partial_p2.values()) == ib.p2
        assert 0.0 <= ib.p2 <= 1.0
