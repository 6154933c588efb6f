import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from mialab.defense import Obfuscation
from mialab.detectors import (
    SIF_SENTINEL, GlirDetector, IaDetector, LaeqDetector, LaeqSpec, LossDetector, MetaConfig, ScoreTable,
    ScoreTableError, ShadowData, SifDetector, SifSpec, SingularCovariance, glir_fit_features, glir_score,
    grad_feature, ia_component, ia_features, ia_fit, laeq_score, laeq_sentinel, leakboost_attack,
    lissa_cg_solve, loss_score, per_sample_param_grads, sif_score,
)
from mialab.detectors.glir import choose_index_set
from mialab.interrogation import InterrogationConfig, interrogate
from mialab.model_zoo import build_model
from mialab.tensor_core import Dense, Model, ModelSpec, finite_diff_oracle, relative_error, softmax_cross_entropy


def gaussian_llr_oracle(g, members, nonmembers, tau):
    """log N(g; mu1, Sigma) - log N(g; mu0, Sigma) with Sigma built from scratch."""
    mu1, mu0 = members.mean(0), nonmembers.mean(0)
    dev = np.vstack([members - mu1, nonmembers - mu0])
    sigma = dev.T @ dev / (len(dev) - 2) + tau * np.eye(len(mu0))
    return multivariate_normal(mu1, sigma).logpdf(g) - multivariate_normal(mu0, sigma).logpdf(g)


def threshold_model():
    """1-D classifier: class 1 iff x > 0."""
    spec = ModelSpec((("fc", Dense(1, 2)),), (1,), 2)
    return Model(spec, {"fc": {"weight": np.array([[-1.0], [1.0]]), "bias": np.zeros(2)}})


class TestGlir:
    def test_hand_example(self):
        glir = glir_fit_features(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]), tau=1.0)
        # single sample per class: pooled covariance is zero, Sigma = I
        assert glir_score(glir, np.array([2.0, 0.0])) == pytest.approx(2.0, abs=1e-12)
        assert glir_score(glir, np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 8))
    def test_density_oracle(self, seed, d):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((d + 6, d)) + rng.standard_normal(d)
        n = rng.standard_normal((d + 5, d))
        glir = glir_fit_features(m, n, tau=0.1)
        g = rng.standard_normal(d) * 2
        assert glir_score(glir, g) == pytest.approx(gaussian_llr_oracle(g, m, n, 0.1), abs=1e-9, rel=1e-9)

    def test_woodbury_matches_direct(self, rng):
        m, n = rng.standard_normal((4, 30)), rng.standard_normal((5, 30)) + 0.3
        glir = glir_fit_features(m, n, tau=0.05)
        g = rng.standard_normal(30)
        assert glir_score(glir, g) == pytest.approx(gaussian_llr_oracle(g, m, n, 0.05), rel=1e-9)

    def test_identical_sets_score_zero(self, rng):
        a = rng.standard_normal((10, 3))
        glir = glir_fit_features(a, a.copy(), tau=0.1)
        assert np.all(glir.w == 0)
        assert np.all(glir_score(glir, rng.standard_normal((5, 3))) == 0)

    def test_affine(self, rng):
        glir = glir_fit_features(rng.standard_normal((10, 4)) + 1, rng.standard_normal((9, 4)), tau=0.1)
        g, delta = rng.standard_normal(4), rng.standard_normal(4)
        assert glir_score(glir, g + delta) - glir_score(glir, g) == pytest.approx(delta @ glir.w, rel=1e-10)

    def test_singular_rejected(self):
        with pytest.raises(SingularCovariance, match="condition"):
            glir_fit_features(np.zeros((2, 5)), np.ones((2, 5)), tau=0.0)

    def test_one_dimensional_means(self):
        rng = np.random.default_rng(1)
        n = 4000
        glir = glir_fit_features(rng.normal(2, 1, (n, 1)), rng.normal(0, 1, (n, 1)), tau=0.0)
        assert abs(glir.mu1[0] - 2) < 3 / np.sqrt(n)
        assert abs(glir.mu0[0]) < 3 / np.sqrt(n)

    def test_length_mismatch(self, rng):
        glir = glir_fit_features(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), tau=0.1)
        with pytest.raises(ValueError):
            glir_score(glir, np.zeros(4))

    def test_index_set_seeded(self):
        assert np.array_equal(choose_index_set(100, 10, 3), choose_index_set(100, 10, 3))
        assert len(choose_index_set(5, 10, 3)) == 5


class TestGradFeature:
    def test_matches_finite_differences(self, rng):
        m = build_model("TinyMLP", (4,), 3, seed=2)
        x = rng.standard_normal(4)
        idx = np.arange(m.n_params)
        g = grad_feature(m, x, 1, idx)
        theta = m.flat_params()

        def loss(t):
            out = m.with_flat_params(t)
            from mialab.tensor_core import forward
            return softmax_cross_entropy(forward(out, x)[None], np.array([1]))[0][0]

        assert relative_error(g, finite_diff_oracle(loss, theta)) < 1e-6

    def test_linear_one_param(self):
        spec = ModelSpec((("fc", Dense(1, 2)),), (1,), 2)
        m = Model(spec, {"fc": {"weight": np.zeros((2, 1)), "bias": np.zeros(2)}})
        g = per_sample_param_grads(m, np.array([[3.0]]), np.array([1]))[0]
        # d loss / d w_k = (p_k - [k = y]) x with p = (1/2, 1/2)
        np.testing.assert_allclose(g, [1.5, -1.5, 0.5, -0.5])

    def test_index_out_of_range(self, rng):
        m = build_model("TinyMLP", (4,), 3, seed=2)
        with pytest.raises(IndexError):
            grad_feature(m, np.zeros(4), 0, [m.n_params])


class TestSimple:
    def test_loss_uniform(self):
        spec = ModelSpec((("fc", Dense(2, 4)),), (2,), 4)
        m = Model(spec, {"fc": {"weight": np.zeros((4, 2)), "bias": np.zeros(4)}})
        assert loss_score(m, np.ones(2), 3) == pytest.approx(-np.log(4))

    def test_laeq_threshold_geometry(self):
        spec = LaeqSpec(step=0.05, budget=100)
        s = laeq_score(threshold_model(), np.array([0.3]), 1, spec)
        assert 0.3 - 1e-12 <= s <= 0.35 + 1e-12

    def test_laeq_misclassified_is_zero(self):
        assert laeq_score(threshold_model(), np.array([-0.3]), 1, LaeqSpec()) == 0.0

    def test_laeq_sentinel(self):
        spec = LaeqSpec(step=0.01, budget=5)
        assert laeq_score(threshold_model(), np.array([3.0]), 1, spec) == laeq_sentinel(spec, 1)
        assert laeq_sentinel(spec, 4) == pytest.approx(5 * 0.01 * 2)

    def test_laeq_cap(self):
        spec = LaeqSpec(step=0.05, budget=50, eps_cap=0.1)
        assert laeq_score(threshold_model(), np.array([0.3]), 1, spec) == laeq_sentinel(spec, 1)

    def test_laeq_nonnegative(self, trained_cnn, blob_data):
        model, split = trained_cnn
        ids = split.attack_test_members[:10]
        s = LaeqDetector(LaeqSpec(budget=10)).scores(model, blob_data.x[ids], blob_data.y[ids])
        assert np.all(s >= 0)


class TestSif:
    def test_identity_curvature(self, rng):
        g = rng.standard_normal(5)
        x = lissa_cg_solve(lambda v: np.zeros_like(v), g, damping=1.0)
        np.testing.assert_allclose(-g @ x, -g @ g, rtol=1e-12)

    def test_hand_cg_step(self):
        a = np.array([[4.0, 1.0], [1.0, 3.0]])
        g = np.array([1.0, 2.0])
        # LiSSA depth 1, scale 10: h1 = 2g - A g / 10, x0 = h1 / 10
        x0 = (2 * g - a @ g / 10) / 10
        r = g - a @ x0
        x1 = x0 + (r @ r) / (r @ a @ r) * r
        got = lissa_cg_solve(lambda v: a @ v, g, damping=0.0, scale=10.0, depth=1, cg_iters=1)
        np.testing.assert_allclose(got, x1, rtol=1e-12)

    def test_two_cg_steps_solve_2x2(self):
        a = np.array([[4.0, 1.0], [1.0, 3.0]])
        g = np.array([1.0, 2.0])
        got = lissa_cg_solve(lambda v: a @ v, g, 0.0, cg_iters=2)
        np.testing.assert_allclose(got, np.linalg.solve(a, g), rtol=1e-10)

    def test_misclassified_sentinel(self):
        assert sif_score(threshold_model(), np.array([-1.0]), 1, SifSpec()) == SIF_SENTINEL

    def test_scores_above_sentinel(self, trained_cnn, blob_data):
        model, split = trained_cnn
        ids = split.attack_test_members[:5]
        s = SifDetector(SifSpec(d_sub=200)).scores(model, blob_data.x[ids], blob_data.y[ids])
        assert np.all(np.isfinite(s))
        assert np.all((s > SIF_SENTINEL) | (s == SIF_SENTINEL))


class TestIa:
    def test_feature_length(self, trained_cnn, blob_data):
        model, _ = trained_cnn
        f = ia_features(model, blob_data.x[:3], blob_data.y[:3])
        assert f.shape == (3, 3 * 32)

    def test_component_zero_activation(self):
        assert np.all(ia_component(np.zeros(4), np.ones((3, 4)), 1) == 0)

    def test_component_uses_true_row_only(self, trained_cnn, blob_data):
        model, _ = trained_cnn
        x, y = blob_data.x[:4], blob_data.y[:4]
        before = np.vstack([ia_features(model, x[i : i + 1], y[i : i + 1]) for i in range(4)])
        m2 = model.copy()
        w = m2.params["fc2"]["weight"]
        for i, c in enumerate(y):
            keep = w.copy()
            keep[np.arange(len(w)) != c] = 0
            m2.params["fc2"]["weight"] = keep
            after = ia_features(m2, x[i : i + 1], y[i : i + 1])[0]
            np.testing.assert_array_equal(after[64:], before[i, 64:])
            np.testing.assert_array_equal(after[:32], before[i, :32])
        m2.params["fc2"]["weight"] = w

    def _shadows(self, blob_data, k=3):
        out = []
        for j in range(k):
            m = build_model("TinyCNN", blob_data.shape, blob_data.classes, seed=20 + j)
            mem = np.arange(len(blob_data)) % 2 == j % 2
            out.append(ShadowData(m, blob_data.x[:60], blob_data.y[:60], mem[:60]))
        return out

    def test_meta_deterministic_and_ranged(self, blob_data):
        shadows = self._shadows(blob_data)
        cfg = MetaConfig(max_epochs=3, seed=4)
        a = ia_fit(shadows, cfg)
        b = ia_fit(shadows, cfg)
        assert a.net.flat_params().tobytes() == b.net.flat_params().tobytes()
        s = IaDetector(a).scores(shadows[0].model, blob_data.x[:10], blob_data.y[:10])
        assert np.all((s >= 0) & (s <= 1))

    def test_zero_final_layer_gives_half(self, blob_data):
        shadows = self._shadows(blob_data)
        meta = ia_fit(shadows, MetaConfig(max_epochs=1))
        meta.net.params["out"]["weight"][:] = 0
        meta.net.params["out"]["bias"][:] = 0
        s = IaDetector(meta).scores(shadows[0].model, blob_data.x[:5], blob_data.y[:5])
        np.testing.assert_array_equal(s, 0.5)

    def test_architecture_mismatch(self, blob_data):
        shadows = self._shadows(blob_data)
        other = build_model("TinyMLP", blob_data.shape, blob_data.classes, seed=0)
        shadows[1] = ShadowData(other, shadows[1].x, shadows[1].y, shadows[1].is_member)
        with pytest.raises(ValueError, match="architecture"):
            ia_fit(shadows)

    def test_defense_changes_features(self, trained_cnn, blob_data):
        model, _ = trained_cnn
        plain = ia_features(model, blob_data.x[:5], blob_data.y[:5])
        obf = ia_features(model, blob_data.x[:5], blob_data.y[:5], Obfuscation(0.1, 3))
        assert not np.any(np.all(plain == obf, axis=1))


class TestScoreTable:
    def test_csv_round_trip(self):
        t = ScoreTable.single("GLiR", True, [3, 1], [True, False], [0.1, -2.5e-300])
        back = ScoreTable.from_csv(t.to_csv())
        assert back.to_csv() == t.to_csv()
        assert t.to_csv().splitlines()[0] == "sample_id,is_member,detector,boosted,score"

    @pytest.mark.parametrize("body,row", [
        ("1,1,GLiR,1\n", 2),
        ("1,1,GLiR,1,0.5\n2,x,GLiR,1,0.5\n", 3),
        ("1,1,GLiR,1,nan\n", 2),
        ("1,1,GLiR,2,0.5\n", 2),
    ])
    def test_malformed_rows(self, body, row):
        with pytest.raises(ScoreTableError, match=f"row {row}"):
            ScoreTable.from_csv("sample_id,is_member,detector,boosted,score\n" + body)

    def test_duplicates_rejected(self):
        with pytest.raises(ScoreTableError, match="duplicate"):
            ScoreTable.single("loss", False, [1, 1], [True, True], [0.0, 1.0])

    def test_nonfinite_rejected(self):
        with pytest.raises(ScoreTableError):
            ScoreTable.single("loss", False, [1], [True], [np.inf])


class TestComposition:
    def test_leakboost_is_composition(self, trained_cnn, blob_data):
        model, split = trained_cnn
        cfg = InterrogationConfig(steps=5, seed=9)
        det = LossDetector()
        x, y = blob_data.x[0], int(blob_data.y[0])
        manual = det.score(model, interrogate(model, x, cfg, blob_data.bounds), y)
        assert leakboost_attack(model, x, y, cfg, det, blob_data.bounds) == manual

    def test_glir_detector_scores_are_fitted_llr(self, trained_cnn, blob_data):
        model, split = trained_cnn
        xm, ym = blob_data.x[split.attack_val_members], blob_data.y[split.attack_val_members]
        xn, yn = blob_data.x[split.attack_val_nonmembers], blob_data.y[split.attack_val_nonmembers]
        det = GlirDetector.fit(model, (xm, ym), (xn, yn), d_sub=40, seed=1)
        feats = per_sample_param_grads(model, xm[:3], ym[:3], det.glir.index_set)
        np.testing.assert_array_equal(det.scores(model, xm[:3], ym[:3]), glir_score(det.glir, feats))
