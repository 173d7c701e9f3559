import math

import numpy as np
import pytest
from conftest import tiny_model, tiny_panel
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lccmkit.dataset import IndicatorMatrix
from lccmkit.lccm import EstimationResult, ModelSpec, Params
from lccmkit.posterior import (
    PosteriorError,
    PosteriorMatrix,
    class_profile,
    kish_effective_n,
    pairwise_t,
    posterior_membership,
    profile_report,
    weighted_anova,
)
from lccmkit.synthgen import brute_force_posterior, classical_anova_f, classical_welch_t


def _result(spec, params):
    return EstimationResult(spec, params, 0.0, -1.0, 0, 1, 1, [], np.array([]), np.array([]), np.array([]), {})


def _crisp(labels, C):
    W = np.zeros((len(labels), C))
    W[np.arange(len(labels)), labels] = 1.0
    return W


# --------------------------------------------------------------------------
# Posterior membership
# --------------------------------------------------------------------------


@pytest.mark.parametrize("kernel", ["MNL", "NL"])
def test_posterior_matches_brute_force(rng, kernel):
    for _ in range(5):
        ds = tiny_panel(rng, n=12, t=4, covariates=("z",))
        spec, params = tiny_model(rng, C=4, kernel=kernel, covariates=("z",))
        post = posterior_membership(ds, _result(spec, params))
        oracle = brute_force_posterior(ds, params, spec)
        assert np.allclose(post.probs, oracle, rtol=1e-10, atol=1e-14)
        assert np.allclose(post.probs.sum(axis=1), 1.0, atol=1e-12)
        assert tuple(post.respondent_ids) == ds.respondent_ids


def test_posterior_equals_prior_when_classes_identical(rng):
    ds = tiny_panel(rng)
    spec, params = tiny_model(rng, C=3)
    params.beta[:] = params.beta[0]
    post = posterior_membership(ds, _result(spec, params))
    prior = np.exp(params.alpha[:, 0]) / np.exp(params.alpha[:, 0]).sum()
    assert np.allclose(post.probs, prior, atol=1e-12)


def test_class_that_cannot_explain_choices_gets_zero(rng):
    ds = tiny_panel(rng, n=4, t=5)
    spec, params = tiny_model(rng, C=2)
    # class 2 deterministically picks the alternative with the lowest 'a'
    params.beta[1] = 0.0
    params.beta[1, 0] = -1e4
    post = posterior_membership(ds, _result(spec, params))
    picks_lowest = [
        all(s.chosen == np.flatnonzero(s.available)[np.argmin(s.attributes[s.available, 0])] for s in r.situations)
        for r in ds.respondents
    ]
    for n, ok in enumerate(picks_lowest):
        if not ok:
            assert post.probs[n, 1] < 1e-300 or post.probs[n, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50))
def test_log_prior_shift_invariance(shift):
    rng = np.random.default_rng(7)
    scores = rng.normal(size=(6, 3)) * 5
    a = PosteriorMatrix.from_log_scores([str(i) for i in range(6)], scores)
    b = PosteriorMatrix.from_log_scores([str(i) for i in range(6)], scores + shift)
    assert np.allclose(a.probs, b.probs, atol=1e-12)
    assert np.allclose(a.probs.sum(axis=1), 1.0, atol=1e-12)


def test_posterior_csv_round_trip(tmp_path):
    p = PosteriorMatrix(("a", "b"), np.array([[0.25, 0.75], [1.0, 0.0]]))
    text = p.to_csv(tmp_path / "p.csv")
    assert text.splitlines()[0] == "resp_id,p_class_1,p_class_2"
    q = PosteriorMatrix.from_csv(tmp_path / "p.csv")
    assert q.respondent_ids == p.respondent_ids and np.array_equal(q.probs, p.probs)


def test_posterior_align_and_labels():
    p = PosteriorMatrix(("a", "b", "c"), np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]))
    assert list(p.align(["c", "a"]).respondent_ids) == ["c", "a"]
    assert list(p.hard_labels()) == [0, 1, 0]
    with pytest.raises(PosteriorError):
        p.align(["zz"])


# --------------------------------------------------------------------------
# Weighted statistics
# --------------------------------------------------------------------------


def test_kish_identities():
    assert kish_effective_n([1, 1, 0, 0]) == 2.0
    assert kish_effective_n([0.5] * 4) == 4.0
    assert kish_effective_n([0.1] * 37) == 37.0
    assert kish_effective_n([0.0, 0.0]) == 0.0


def test_crisp_profile_means():
    x = np.array([1.0, 2.0, 3.0, 7.0, 5.0])
    W = _crisp([0, 0, 0, 1, 1], 2)
    means, var, eff = class_profile(W, x)
    assert means == pytest.approx([2.0, 6.0], abs=1e-14)
    assert var == pytest.approx([2 / 3, 1.0], abs=1e-14)
    assert list(eff) == [3.0, 2.0]


def test_weighted_moments_match_naive_loop(rng):
    N, C = 40, 3
    W = rng.dirichlet(np.ones(C), size=N)
    x = rng.normal(size=N)
    means, var, eff = class_profile(W, x)
    for c in range(C):
        tot = sum(W[n, c] for n in range(N))
        m = sum(W[n, c] * x[n] for n in range(N)) / tot
        v = sum(W[n, c] * (x[n] - m) ** 2 for n in range(N)) / tot
        k = tot**2 / sum(W[n, c] ** 2 for n in range(N))
        assert means[c] == pytest.approx(m, abs=1e-12)
        assert var[c] == pytest.approx(v, abs=1e-12)
        assert eff[c] == pytest.approx(k, rel=1e-12)


def test_missing_values_excluded():
    x = np.array([1.0, np.nan, 3.0, 4.0])
    W = _crisp([0, 0, 1, 1], 2)
    means, _, eff = class_profile(W, x)
    assert means[0] == 1.0 and eff[0] == 1.0
    m2, _, _ = class_profile(W, [1.0, 100.0, 3.0, 4.0], missing=[False, True, False, False])
    assert np.array_equal(means, m2)


def test_empty_class_mean_absent():
    means, _, _ = class_profile(_crisp([0, 0, 0], 2), [1.0, 2.0, 3.0])
    assert math.isnan(means[1])


def test_crisp_anova_and_welch_match_textbook(rng):
    for _ in range(20):
        labels = np.concatenate([np.arange(4), rng.integers(0, 4, 60)])
        x = rng.normal(size=labels.size) + labels * 0.3
        W = _crisp(labels, 4)
        groups = [x[labels == c] for c in range(4)]
        a = weighted_anova(W, x)
        assert a.f == pytest.approx(classical_anova_f(groups), rel=1e-10)
        assert (a.df1, a.df2) == (3, labels.size - 4)
        r = pairwise_t(W, x, 0, 2)
        t, df = classical_welch_t(groups[0], groups[2])
        assert r.t == pytest.approx(t, rel=1e-10)
        assert r.df == pytest.approx(df, rel=1e-10)
        assert r.p == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-10)


def test_anova_identical_values():
    W = np.random.default_rng(1).dirichlet(np.ones(3), size=20)
    a = weighted_anova(W, np.full(20, 4.0))
    assert a.f == math.inf and a.p == 0.0
    a = weighted_anova(np.full((20, 3), 1 / 3), np.random.default_rng(2).normal(size=20))
    assert a.f == pytest.approx(0.0, abs=1e-12)


def test_anova_needs_two_live_classes():
    with pytest.raises(PosteriorError):
        weighted_anova(_crisp([0, 0, 0], 2), [1.0, 2.0, 3.0])


def test_welch_degenerate_cases():
    W = _crisp([0, 0, 1, 1], 2)
    assert pairwise_t(W, [2.0, 2.0, 2.0, 2.0], 0, 1).t == 0.0
    assert pairwise_t(W, [3.0, 3.0, 2.0, 2.0], 0, 1).t == math.inf
    with pytest.raises(PosteriorError):
        pairwise_t(_crisp([0, 1, 1], 2), [1.0, 2.0, 3.0], 0, 1)


def test_identical_distributions_t_zero():
    x = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    assert pairwise_t(_crisp([0, 0, 0, 1, 1, 1], 2), x, 0, 1).t == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(-100, 100))
def test_scale_equivariance_and_antisymmetry(seed, a, b):
    rng = np.random.default_rng(seed)
    W = rng.dirichlet(np.ones(3), size=30)
    x = rng.normal(size=30)
    m1, v1, _ = class_profile(W, x)
    m2, v2, _ = class_profile(W, a * x + b)
    assert np.allclose(m2, a * m1 + b, rtol=1e-10, atol=1e-9)
    assert np.allclose(v2, a * a * v1, rtol=1e-9, atol=1e-12)
    f1, f2 = weighted_anova(W, x), weighted_anova(W, a * x + b)
    assert f2.f == pytest.approx(f1.f, rel=1e-8)
    t1, t2 = pairwise_t(W, x, 0, 1), pairwise_t(W, a * x + b, 0, 1)
    assert t2.t == pytest.approx(t1.t, rel=1e-8, abs=1e-10)
    swapped = pairwise_t(W, x, 1, 0)
    assert swapped.t == -t1.t and swapped.p == t1.p


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_law_of_total_mean(seed):
    rng = np.random.default_rng(seed)
    W = rng.dirichlet(np.ones(4), size=25)
    x = rng.normal(size=25)
    means, _, _ = class_profile(W, x)
    mass = W.sum(axis=0)
    assert np.dot(mass / mass.sum(), means) == pytest.approx(x.mean(), abs=1e-10)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def test_report_single_indicator_two_classes():
    W = _crisp([0, 0, 0, 1, 1, 1], 2)
    rep = profile_report(W, [1.0, 2.0, 2.5, 4.0, 5.0, 5.5], names=["q"])
    assert len(rep.reports) == 1
    r = rep.reports[0]
    assert r.anova is not None and list(r.pairwise) == [(0, 1)]
    assert rep.n_tests == 2


def test_report_counts_and_largest_f(rng):
    N, C, K = 400, 3, 5
    labels = rng.integers(0, C, N)
    X = rng.normal(4, 1, size=(N, K))
    X[labels == 0, 0] += 1.0
    rep = profile_report(_crisp(labels, C), X)
    assert len(rep.reports) == K
    assert all(len(r.pairwise) == C * (C - 1) // 2 for r in rep.reports)
    fs = [r.anova.f for r in rep.reports]
    assert int(np.argmax(fs)) == 0
    assert rep.n_tests == K * (1 + 3)


def test_report_from_indicator_matrix_aligns_ids():
    post = PosteriorMatrix(("1", "2", "3", "4"), _crisp([0, 1, 0, 1], 2))
    vals = np.array([[5.0], [1.0], [2.0], [4.0]])
    ind = IndicatorMatrix(("4", "3", "2", "1"), ("q",), vals, 1.0, 7.0, np.zeros((4, 1), bool))
    rep = profile_report(post, ind)
    assert rep.reports[0].class_means == pytest.approx([(4.0 + 1.0) / 2, (2.0 + 5.0) / 2])


def test_report_outputs(tmp_path):
    W = _crisp([0, 0, 1, 1, 2, 2], 3)
    rep = profile_report(W, [[1, 2], [2, 3], [4, 4], [5, 6], [3, 7], [2, 1]], names=["q1", "q2"])
    csv_text = rep.to_csv(tmp_path / "p.csv")
    header = csv_text.splitlines()[0].split(",")
    assert "1 vs 2" in header and "2 vs 3" in header and "F" in header
    assert len(csv_text.splitlines()) == 3
    md = rep.to_markdown()
    assert md.count("\n|") >= 3 and "q2" in md
    assert rep.metadata()["n_tests"] == rep.n_tests


def test_report_requires_two_classes():
    with pytest.raises(PosteriorError, match="C ≥ 2"):
        profile_report(np.ones((5, 1)), np.arange(5.0))


def test_posterior_rows_from_constants_model(rng):
    ds = tiny_panel(rng, n=5)
    spec = ModelSpec(1, tiny_model(rng, C=1)[0].utility)
    post = posterior_membership(ds, _result(spec, Params([[0.0]], np.zeros((1, 3)))))
    assert np.all(post.probs == 1.0)
