"""Acceptance suite: one test group per criterion, one PASS/FAIL line per criterion.

Run directly (``python tests/test_acceptance.py``) or through pytest; the
summary lines are written to the terminal when the module finishes.
"""

import json
import math
import sys
import time
from collections import defaultdict

import numpy as np
import pytest
from conftest import tiny_model, tiny_panel
from scipy import stats

from lccmkit import report
from lccmkit.cli import main as cli_main
from lccmkit.comparison import compare_membership_models
from lccmkit.efa import apply_retention, fit_efa
from lccmkit.fmnl import estimate_fmnl, fmnl_gradient, fmnl_quasi_loglik, predict_shares, with_intercept
from lccmkit.kernels import NONNEGATIVE, UtilitySpec, mnl_log_probs, nl_log_probs
from lccmkit.lccm import (
    EstimateOptions,
    EstimationResult,
    ModelSpec,
    Params,
    compensating_differential,
    estimate,
    marginal_loglik,
    marginal_loglik_and_gradient,
    respondent_loglik,
)
from lccmkit.posterior import kish_effective_n, pairwise_t, posterior_membership, weighted_anova
from lccmkit.synthgen import (
    brute_force_marginal,
    brute_force_posterior,
    classical_anova_f,
    classical_welch_t,
    factor_scenario,
    finite_diff_gradient,
    generate,
    indicator_scenario,
    recovery_scenario,
)

CRITERIA = {
    1: "compensating differentials from fixed coefficients",
    2: "kernel identities",
    3: "Bayes and likelihood consistency on tiny instances",
    4: "gradient checks",
    5: "EM monotonicity",
    6: "parameter recovery (MNL and NL)",
    7: "crisp-weight degeneracy and F threshold",
    8: "FMNL hard-label equivalence",
    9: "EFA recovery and exclusion flags",
    10: "membership-model agreement",
    11: "determinism",
}

_checks: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def check(criterion: int, name: str, ok: bool, detail: str = "") -> bool:
    _checks[criterion].append((name, bool(ok), detail))
    return bool(ok)


def _summary_lines() -> list[str]:
    lines = []
    for n, title in CRITERIA.items():
        items = _checks.get(n)
        if not items:
            lines.append(f"criterion {n:2d} NOT RUN  {title}")
            continue
        failed = [f"{name} ({detail})" if detail else name for name, ok, detail in items if not ok]
        status = "PASS" if not failed else "FAIL"
        tail = "" if not failed else " | failed: " + "; ".join(failed)
        lines.append(f"criterion {n:2d} {status}  {title}{tail}")
    return lines


@pytest.fixture(scope="module", autouse=True)
def acceptance_summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = ["", "acceptance summary", *_summary_lines()]
    for line in lines:
        if tr is not None:
            tr.write_line(line)
        else:
            print(line)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


# --------------------------------------------------------------------------
# 1. Compensating differentials
# --------------------------------------------------------------------------


def _fixed_coefficient_result():
    util = UtilitySpec((("days", NONNEGATIVE), ("hours", NONNEGATIVE), ("wage", NONNEGATIVE)))
    spec = ModelSpec(4, util)
    beta = np.array([[0.317, 0.0, 1.142], [0.0, 0.028, 0.006], [2.059, 1.171, 0.493], [3.062, 1.475, 0.119]])
    fixed_mask = beta == 0.0
    pvals = {(0, 0): 0.19, (1, 1): 0.83, (2, 0): 0.0, (2, 1): 0.0, (3, 0): 0.0, (3, 1): 0.0,
             (0, 2): 0.0, (1, 2): 0.5, (2, 2): 0.0, (3, 2): 0.0}
    names, est, p = [], [], []
    for (c, d), pv in sorted(pvals.items()):
        names.append(f"class{c + 1}.{util.names[d]}")
        est.append(beta[c, d])
        p.append(pv)
    params = Params(np.zeros((4, 1)), beta, bound_fixed=fixed_mask)
    return EstimationResult(spec, params, -1.0, -2.0, len(names), 1, 1, names, np.array(est),
                            np.full(len(names), 0.1), np.array(p), {})


def test_criterion_1_compensating_differentials():
    res = _fixed_coefficient_result()
    days = compensating_differential(res, "days", "wage", 1000)
    hours = compensating_differential(res, "hours", "wage", 1000)
    targets = [("class 3 days", days[2], 4176), ("class 4 days", days[3], 25731),
               ("class 4 hours", hours[3], 12395), ("class 3 hours", hours[2], 2375)]
    ok = True
    for label, got, want in targets:
        ok &= check(1, label, got is not None and abs(got - want) <= 0.005 * want, f"{got} vs {want}")
    ok &= check(1, "published rounding, class 3 days", abs(days[2] - 4174) <= 0.005 * 4174, f"{days[2]}")
    ok &= check(1, "published rounding, class 3 hours", abs(hours[2] - 2374) <= 0.005 * 2374, f"{hours[2]}")
    assert ok


# --------------------------------------------------------------------------
# 2. Kernel identities
# --------------------------------------------------------------------------


def test_criterion_2_kernel_identities():
    rng = np.random.default_rng(2)
    worst_nl = worst_shift = 0.0
    for _ in range(1000):
        J = int(rng.integers(2, 7))
        u = rng.normal(scale=5, size=J)
        a = np.ones(J, dtype=bool)
        a[rng.random(J) < 0.2] = False
        if not a.any():
            a[0] = True
        nest_of = rng.integers(0, 3, J)
        nest_of = np.unique(nest_of, return_inverse=True)[1]
        lam = np.ones(nest_of.max() + 1)
        p_mnl = np.exp(mnl_log_probs(u, a))
        worst_nl = max(worst_nl, np.max(np.abs(np.exp(nl_log_probs(u, a, nest_of, lam)) - p_mnl)))
        shift = rng.normal(scale=100)
        worst_shift = max(worst_shift, np.max(np.abs(np.exp(mnl_log_probs(u + shift, a)) - p_mnl)))
    worst_flat = max(np.max(np.abs(np.exp(mnl_log_probs(np.zeros(J), np.ones(J, bool))) - 1 / J)) for J in range(2, 12))
    ok = check(2, "NL(lambda=1) == MNL", worst_nl <= 1e-12, f"{worst_nl:.2e}")
    ok &= check(2, "zero utility gives 1/J", worst_flat <= 1e-15, f"{worst_flat:.2e}")
    ok &= check(2, "translation invariance", worst_shift <= 1e-12, f"{worst_shift:.2e}")
    assert ok


# --------------------------------------------------------------------------
# 3. Bayes / likelihood consistency
# --------------------------------------------------------------------------


def test_criterion_3_bayes_consistency():
    rng = np.random.default_rng(3)
    worst_ll = worst_post = worst_sum = 0.0
    for i in range(40):
        kernel = "NL" if i % 2 else "MNL"
        covs = ("z1",) if i % 4 < 2 else ()
        C = int(rng.integers(1, 5))
        ds = tiny_panel(rng, n=int(rng.integers(2, 21)), t=int(rng.integers(1, 6)), covariates=covs)
        spec, params = tiny_model(rng, C=C, kernel=kernel, covariates=covs)
        fast = np.exp(respondent_loglik(ds, params, spec))
        slow = brute_force_marginal(ds, params, spec)
        worst_ll = max(worst_ll, float(np.max(np.abs(fast - slow) / slow)))
        post = posterior_membership(ds, EstimationResult(spec, params, 0.0, -1.0, 0, 1, 1, [], np.array([]),
                                                         np.array([]), np.array([]), {})).probs
        oracle = brute_force_posterior(ds, params, spec)
        worst_post = max(worst_post, float(np.max(np.abs(post - oracle) / np.maximum(oracle, 1e-300))))
        worst_sum = max(worst_sum, float(np.max(np.abs(post.sum(axis=1) - 1))))
    ok = check(3, "marginal likelihood", worst_ll <= 1e-10, f"{worst_ll:.2e}")
    ok &= check(3, "posterior", worst_post <= 1e-10, f"{worst_post:.2e}")
    ok &= check(3, "posterior rows sum to 1", worst_sum <= 1e-12, f"{worst_sum:.2e}")
    assert ok


# --------------------------------------------------------------------------
# 4. Gradients
# --------------------------------------------------------------------------


def _lccm_fd(ds, params, spec, names, covs):
    out = []
    for name in names:
        cls, rest = name.split(".", 1)
        c = int(cls[5:]) - 1
        if rest.startswith("membership."):
            which, k = "alpha", ["const", *covs].index(rest.split(".", 1)[1])
        elif rest.startswith("IV.nest"):
            which, k = "lambdas", int(rest[7:]) - 1
        else:
            which, k = "beta", spec.utility.names.index(rest)

        def f(x, which=which, c=c, k=k):
            p = params.copy()
            getattr(p, which)[c, k] = x[0]
            return marginal_loglik(ds, p, spec)

        out.append(finite_diff_gradient(f, np.array([getattr(params, which)[c, k]]))[0])
    return np.array(out)


def test_criterion_4_gradients():
    rng = np.random.default_rng(4)
    worst_lccm = 0.0
    for i in range(100):
        kernel = "NL" if i % 2 else "MNL"
        covs = ("z1", "z2")[: i % 3]
        ds = tiny_panel(rng, n=8, t=3, covariates=covs)
        spec, params = tiny_model(rng, C=int(rng.integers(1, 4)), kernel=kernel, covariates=covs)
        _, g, names = marginal_loglik_and_gradient(ds, params, spec)
        worst_lccm = max(worst_lccm, rel_err(g, _lccm_fd(ds, params, spec, names, covs)))
    worst_fmnl = 0.0
    for _ in range(100):
        C, P, N = int(rng.integers(2, 5)), int(rng.integers(0, 4)), 30
        Y = rng.dirichlet(np.ones(C), size=N)
        Z = rng.normal(size=(N, P))
        g0 = rng.normal(size=(C - 1, P + 1))
        fd = finite_diff_gradient(lambda v: fmnl_quasi_loglik(Y, Z, v.reshape(g0.shape)), g0.ravel())
        worst_fmnl = max(worst_fmnl, rel_err(fmnl_gradient(Y, Z, g0).ravel(), fd))
    ok = check(4, "marginal_loglik gradient", worst_lccm < 1e-6, f"{worst_lccm:.2e}")
    ok &= check(4, "fmnl gradient", worst_fmnl < 1e-6, f"{worst_fmnl:.2e}")
    assert ok


# --------------------------------------------------------------------------
# 5-6. EM monotonicity and recovery
# --------------------------------------------------------------------------


def _recovery(kernel, seed=0, threads=4):
    g = recovery_scenario(kernel, n_respondents=1000, n_situations=8, seed=seed)
    ds = generate(g).choices
    opts = EstimateOptions(n_starts=20, seed=0, threads=threads, order_by={"by": "match", "beta": g.true_params.beta.tolist()})
    t0 = time.perf_counter()
    res = estimate(ds, g.spec, opts)
    return g, ds, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def mnl_recovery():
    return _recovery("MNL")


@pytest.fixture(scope="module")
def nl_recovery():
    return _recovery("NL")


def test_criterion_5_em_monotone(mnl_recovery):
    g, ds, _, _ = mnl_recovery
    worst = math.inf
    for seed in range(5):
        res = estimate(ds, g.spec, EstimateOptions(n_starts=1, seed=seed, compute_se=False))
        worst = min(worst, float(np.min(np.diff(res.em_history))))
    assert check(5, "EM log-likelihood non-decreasing", worst >= -1e-10, f"smallest step {worst:.3e}")


def _true_entries(g):
    out = {}
    for c in range(g.spec.n_classes):
        out[f"class{c + 1}.membership.const"] = g.true_params.alpha[c, 0]
        for d, n in enumerate(g.spec.utility.names):
            out[f"class{c + 1}.{n}"] = g.true_params.beta[c, d]
        if g.true_params.lambdas is not None:
            out[f"class{c + 1}.IV.nest1"] = g.true_params.lambdas[c, 0]
    return out


def _within_three_se(g, res):
    tab = res.table()
    worst, bad = 0.0, []
    for name, truth in _true_entries(g).items():
        est, se, _ = tab[name]
        if se is None:
            if abs(est - truth) > 1e-12:
                bad.append(name)
            continue
        z = abs(est - truth) / se
        worst = max(worst, z)
        if z > 3:
            bad.append(name)
    return worst, bad


def test_criterion_6_recovery_mnl(mnl_recovery):
    g, _, res, secs = mnl_recovery
    worst, bad = _within_three_se(g, res)
    share = res.starts["n_within_tol_of_best"] / res.starts["count"]
    ok = check(6, "MNL truth within 3 SE", not bad, f"max |z|={worst:.2f} {bad}")
    ok &= check(6, "MNL best LL from >= 30% of starts", share >= 0.3, f"{share:.0%}")
    ok &= check(6, "MNL converged", res.converged)
    ok &= check(6, "MNL runtime < 5 min", secs < 300, f"{secs:.1f}s")
    assert ok


def test_criterion_6_recovery_nl(nl_recovery):
    g, _, res, secs = nl_recovery
    worst, bad = _within_three_se(g, res)
    lam_bad = [n for n in bad if "IV" in n]
    ok = check(6, "NL lambda within 3 SE", not lam_bad, f"{lam_bad}")
    ok &= check(6, "NL all parameters within 3 SE", not bad, f"max |z|={worst:.2f} {bad}")
    ok &= check(6, "NL converged", res.converged)
    assert ok


# --------------------------------------------------------------------------
# 7. Crisp-weight degeneracy
# --------------------------------------------------------------------------


def test_criterion_7_crisp_degeneracy():
    rng = np.random.default_rng(7)
    worst_f = worst_t = 0.0
    for _ in range(50):
        C = int(rng.integers(2, 6))
        labels = np.concatenate([np.repeat(np.arange(C), 2), rng.integers(0, C, 80)])
        x = rng.normal(size=labels.size) + 0.4 * labels
        W = np.eye(C)[labels]
        groups = [x[labels == c] for c in range(C)]
        worst_f = max(worst_f, abs(weighted_anova(W, x).f / classical_anova_f(groups) - 1))
        a, b = rng.choice(C, 2, replace=False)
        t, _ = classical_welch_t(groups[a], groups[b])
        worst_t = max(worst_t, abs(pairwise_t(W, x, a, b).t / t - 1))
    counts_exact = all(kish_effective_n(np.full(n, w)) == n for n in (1, 2, 7, 250, 996) for w in (1.0, 0.3, 1e-3))
    ok = check(7, "weighted F equals classical ANOVA", worst_f <= 1e-10, f"{worst_f:.2e}")
    ok &= check(7, "weighted t equals Welch t", worst_t <= 1e-10, f"{worst_t:.2e}")
    ok &= check(7, "equal-weight Kish size equals count", counts_exact)
    assert ok


@pytest.mark.xfail(strict=True, reason="exact F(3, 992) upper 5% point is 2.6139, so F = 2.61 gives p = 0.0503")
def test_criterion_7_f_threshold():
    p = float(stats.f.sf(2.61, 3, 992))
    assert check(7, "F=2.61 on (3, 992) df gives p < 0.05", p < 0.05, f"p={p:.5f}")


# --------------------------------------------------------------------------
# 8. FMNL hard-label equivalence
# --------------------------------------------------------------------------


def test_criterion_8_fmnl_hard_labels():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(8)
    worst_coef = worst_score = 0.0
    for _ in range(5):
        N, C, P = 600, 3, 2
        Z = rng.normal(size=(N, P))
        g = np.vstack([np.zeros(P + 1), rng.normal(size=(C - 1, P + 1))])
        labels = np.array([rng.choice(C, p=p) for p in predict_shares(g, Z)])
        Y = np.eye(C)[labels]
        res = estimate_fmnl(Y, Z)
        mn = sm.MNLogit(labels, with_intercept(Z)).fit(method="newton", tol=1e-14, maxiter=200, disp=0)
        worst_coef = max(worst_coef, float(np.max(np.abs(res.gamma[1:] - np.asarray(mn.params).T))))
        worst_score = max(worst_score, float(np.max(np.abs(fmnl_gradient(Y, Z, res.gamma)))))
    ok = check(8, "coefficients match hard-label MNL", worst_coef <= 1e-6, f"{worst_coef:.2e}")
    ok &= check(8, "score equations at optimum", worst_score <= 1e-8, f"{worst_score:.2e}")
    assert ok


# --------------------------------------------------------------------------
# 9. EFA
# --------------------------------------------------------------------------


def test_criterion_9_efa():
    truth = np.zeros((8, 2))
    truth[:4, 0] = 0.8
    truth[4:7, 1] = 0.8  # item 8 is the planted zero-loading item
    t0 = time.perf_counter()
    data = generate(factor_scenario(truth, n_respondents=5000, seed=9))
    res = fit_efa(data.indicators, 2)
    est = res.loadings
    aligned = np.zeros_like(truth)
    used = set()
    for f in range(2):
        g = max((g for g in range(2) if g not in used), key=lambda g: abs(est[:, g] @ truth[:, f]))
        used.add(g)
        aligned[:, f] = est[:, g] * np.sign(est[:, g] @ truth[:, f])
    err = float(np.max(np.abs(aligned - truth)))
    comm = float(np.max(np.abs((res.unrotated**2).sum(axis=1) - (est**2).sum(axis=1))))
    kept = apply_retention(res)
    secs = time.perf_counter() - t0
    ok = check(9, "loadings within 0.05", err < 0.05, f"{err:.3f}")
    ok &= check(9, "communalities preserved by rotation", comm <= 1e-8, f"{comm:.1e}")
    ok &= check(9, "planted zero item flagged", kept.exclusion[7] == "no-salient-loading", kept.exclusion[7])
    ok &= check(9, "other items retained", all(e == "none" for e in kept.exclusion[:7]))
    ok &= check(9, "runtime < 30 s", secs < 30, f"{secs:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 10. Membership-model agreement
# --------------------------------------------------------------------------


def test_criterion_10_agreement():
    g = indicator_scenario(n_respondents=1000, n_situations=8, seed=3)
    data = generate(g)
    t0 = time.perf_counter()
    cmp = compare_membership_models(data.choices, data.indicators, g.spec, EstimateOptions(n_starts=5, seed=0))
    secs = time.perf_counter() - t0
    s = cmp.summary
    ok = check(10, "some coefficients with |t| > 3", s["n_strong"] > 0, f"{s['n_strong']}")
    ok &= check(10, "sign agreement on |t| > 3", s["sign_agreement_rate"] == 1.0, f"{s['sign_agreement_rate']}")
    ok &= check(10, "relative difference < 15%", s["max_rel_difference"] is not None and s["max_rel_difference"] < 0.15,
                f"{s['max_rel_difference']}")
    ok &= check(10, "runtime < 10 min", secs < 600, f"{secs:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 11. Determinism
# --------------------------------------------------------------------------


def test_criterion_11_determinism(mnl_recovery, tmp_path):
    g, ds, first, _ = mnl_recovery
    again = _recovery("MNL")[2]
    a = report.write_json(first.to_dict(), tmp_path / "a.json")
    b = report.write_json(again.to_dict(), tmp_path / "b.json")
    ok = check(11, "repeat estimation JSON byte-identical", a == b)
    ok &= check(11, "parameter tables byte-identical",
                report.parameter_table_csv(first) == report.parameter_table_csv(again))

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 5, "threads": 2,
        "data": {"choices": "sim/choices.csv", "indicators": "sim/indicators.csv"},
        "simulate": {"scenario": "indicator", "n_respondents": 150, "n_situations": 5},
        "model": {"n_classes": 3, "utility": {"terms": [{"name": n, "constraint": "free"} for n in ("x1", "x2", "x3")]}},
        "options": {"n_starts": 3},
        "fmnl": {"covariates": ["att_a", "att_b"]},
    }))
    runs = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        codes = [cli_main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")])]
        for cmd in ("estimate", "posterior", "profile", "fmnl"):
            codes.append(cli_main([cmd, "--config", str(cfg), "--out", str(out)]))
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        ok &= check(11, f"CLI run {tag} succeeded", all(c == 0 for c in codes), f"{codes}")
    ok &= check(11, "CLI outputs byte-identical", runs[0] == runs[1] and len(runs[0]) >= 8, f"{sorted(runs[0])}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
