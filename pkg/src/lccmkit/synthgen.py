"""Synthetic latent-class choice data with known ground truth, plus test oracles.

The oracles here deliberately avoid the log-space machinery of the estimator:
they evaluate likelihoods with plain products and exponentials, gradients by
central differences, and class statistics by textbook hard-label formulas.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import ChoiceDataset, IndicatorMatrix, RespondentRecord, Situation
from .kernels import FREE, NONNEGATIVE, NestStructure, UtilitySpec
from .lccm import ModelSpec, Params, _situation_design


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeLaw:
    """Distribution of one attribute: a discrete level set, else uniform on [low, high].

    ``alternatives`` restricts the attribute to some alternatives (0 elsewhere).
    """

    levels: tuple[float, ...] | None = None
    low: float = 0.0
    high: float = 1.0
    alternatives: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.levels is not None and len(self.levels) == 0:
            raise GeneratorError("empty level set")


@dataclass
class IndicatorLaw:
    """Likert indicators as class mean + Gaussian noise, clamped and rounded.

    ``class_means`` is (C, K), or (1, K) for class-independent indicators.
    """

    names: tuple[str, ...]
    class_means: np.ndarray
    sd: float = 1.0
    scale: tuple[float, float] = (1.0, 7.0)

    def __post_init__(self):
        self.class_means = np.atleast_2d(np.asarray(self.class_means, dtype=float))
        if self.sd < 0:
            raise GeneratorError("indicator sd must be non-negative")
        lo, hi = self.scale
        if np.any(self.class_means < lo) or np.any(self.class_means > hi):
            raise GeneratorError("indicator class means outside the Likert range")


@dataclass
class FactorLaw:
    """Common-factor indicators: item = mean + sd * (loadings @ f + unique noise).

    Unique noise variance is 1 - communality so items have unit variance before
    scaling when factor_sd is 1.
    """

    loadings: np.ndarray  # (K, F)
    names: tuple[str, ...] | None = None
    factor_sd: float = 1.0
    item_mean: float = 4.0
    item_sd: float = 1.0
    class_factor_means: np.ndarray | None = None  # (C, F)
    discretize: bool = False
    scale: tuple[float, float] = (1.0, 7.0)

    def __post_init__(self):
        self.loadings = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        if self.names is None:
            self.names = tuple(f"item_{k + 1}" for k in range(self.loadings.shape[0]))
        if np.any((self.loadings**2).sum(axis=1) > 1.0):
            raise GeneratorError("item communality exceeds 1")

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]


@dataclass
class GeneratorSpec:
    spec: ModelSpec
    true_params: Params
    n_respondents: int
    n_situations: int
    alternatives: tuple[str, ...]
    attribute_law: dict[str, AttributeLaw]
    indicator_law: IndicatorLaw | None = None
    factor_law: FactorLaw | None = None
    membership_source: str = "none"  # none | covariates | indicators | factors
    covariate_law: dict[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.membership_source not in ("none", "covariates", "indicators", "factors"):
            raise GeneratorError(f"unknown membership source {self.membership_source!r}")
        if self.n_respondents < 1 or self.n_situations < 1:
            raise GeneratorError("need at least one respondent and one situation")
        if self.membership_source == "indicators" and self.indicator_law is None:
            raise GeneratorError("indicator-driven membership needs an indicator law")
        if self.membership_source == "factors" and self.factor_law is None:
            raise GeneratorError("factor-driven membership needs a factor law")


@dataclass
class SyntheticData:
    choices: ChoiceDataset
    indicators: IndicatorMatrix | None
    true_classes: np.ndarray
    true_factors: np.ndarray | None = None
    seed: int = 0

    def write(self, directory, gspec: GeneratorSpec | None = None) -> dict:
        """Write choices.csv, indicators.csv (if any) and truth.json."""
        os.makedirs(directory, exist_ok=True)
        paths = {"choices": os.path.join(directory, "choices.csv")}
        self.choices.to_csv(paths["choices"])
        if self.indicators is not None:
            paths["indicators"] = os.path.join(directory, "indicators.csv")
            self.indicators.to_csv(paths["indicators"])
        truth = {
            "seed": self.seed,
            "true_classes": [int(c) + 1 for c in self.true_classes],
        }
        if gspec is not None:
            truth["spec"] = gspec.spec.to_dict()
            truth["params"] = gspec.true_params.to_dict()
        paths["truth"] = os.path.join(directory, "truth.json")
        with open(paths["truth"], "w") as fh:
            json.dump(truth, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths


def _draw_attributes(rng, law: dict[str, AttributeLaw], names, alternatives, T):
    J = len(alternatives)
    X = np.zeros((T, J, len(names)))
    for d, name in enumerate(names):
        a = law[name]
        cols = range(J) if a.alternatives is None else [alternatives.index(x) for x in a.alternatives]
        for j in cols:
            if a.levels is not None:
                X[:, j, d] = rng.choice(np.asarray(a.levels, dtype=float), size=T)
            else:
                X[:, j, d] = rng.uniform(a.low, a.high, size=T)
    return X


def _likert(rng, means, sd, scale):
    lo, hi = scale
    raw = means + sd * rng.standard_normal(means.shape) if sd > 0 else means.copy()
    return np.round(np.clip(raw, lo, hi))


def _softmax(v):
    v = v - v.max()
    e = np.exp(v)
    return e / e.sum()


def generate(gspec: GeneratorSpec) -> SyntheticData:
    """Draw respondents independently; respondent n uses substream (seed, n)."""
    spec, params = gspec.spec, gspec.true_params
    alts = [str(a) for a in gspec.alternatives]
    names = list(gspec.attribute_law)
    nest_of = spec.nests.nest_index(alts) if spec.nests is not None else None
    from ._pykernels import all_log_probs

    ind_law, fac_law = gspec.indicator_law, gspec.factor_law
    ind_names = ind_law.names if ind_law is not None else (fac_law.names if fac_law is not None else ())
    respondents = []
    classes = np.empty(gspec.n_respondents, dtype=int)
    ind_values = np.full((gspec.n_respondents, len(ind_names)), np.nan)
    factors = None if fac_law is None else np.zeros((gspec.n_respondents, fac_law.n_factors))

    for n in range(gspec.n_respondents):
        rng = np.random.default_rng(np.random.SeedSequence([gspec.seed, n]))
        src = gspec.membership_source
        covs: dict[str, float] = {}
        items = None
        f = None
        if src == "indicators":
            items = _likert(rng, ind_law.class_means[0], ind_law.sd, ind_law.scale)
            covs = dict(zip(ind_law.names, items.tolist()))
        elif src == "factors":
            f = fac_law.factor_sd * rng.standard_normal(fac_law.n_factors)
            covs = {f"factor_{k + 1}": float(v) for k, v in enumerate(f)}
        elif src == "covariates":
            covs = {k: float(m + s * rng.standard_normal()) for k, (m, s) in gspec.covariate_law.items()}
        z = np.array([covs[k] for k in spec.membership_covariates], dtype=float)
        prior = _softmax(params.alpha @ np.concatenate([[1.0], z]))
        c = int(rng.choice(spec.n_classes, p=prior))
        classes[n] = c

        if fac_law is not None:
            if f is None:
                f = fac_law.factor_sd * rng.standard_normal(fac_law.n_factors)
                if fac_law.class_factor_means is not None:
                    f = f + np.asarray(fac_law.class_factor_means, dtype=float)[c]
            factors[n] = f
            uniq = np.sqrt(1.0 - (fac_law.loadings**2).sum(axis=1))
            raw = fac_law.loadings @ f + uniq * rng.standard_normal(len(uniq))
            vals = fac_law.item_mean + fac_law.item_sd * raw
            items = np.round(np.clip(vals, *fac_law.scale)) if fac_law.discretize else vals
        elif ind_law is not None and items is None:
            row = ind_law.class_means[c if ind_law.class_means.shape[0] > 1 else 0]
            items = _likert(rng, row, ind_law.sd, ind_law.scale)
        if items is not None:
            ind_values[n] = items

        T = gspec.n_situations
        X = _draw_attributes(rng, gspec.attribute_law, names, alts, T)
        design = np.stack([_situation_design(spec.utility, X[t], names, alts) for t in range(T)])
        lam = None if params.lambdas is None else params.lambdas[c]
        lp = all_log_probs(design, np.ones((T, len(alts)), dtype=np.uint8), params.beta[c], nest_of, lam)
        P = np.exp(lp)
        u = rng.random(T)
        chosen = np.minimum((np.cumsum(P, axis=1) < u[:, None]).sum(axis=1), len(alts) - 1)
        situations = tuple(
            Situation(str(t + 1), X[t].copy(), np.ones(len(alts), dtype=bool), int(chosen[t])) for t in range(T)
        )
        respondents.append(RespondentRecord(str(n + 1), situations, covs))

    choices = ChoiceDataset(tuple(respondents), tuple(names), tuple(alts))
    indicators = None
    if ind_names:
        lo, hi = (ind_law.scale if ind_law is not None else
                  (fac_law.scale if fac_law.discretize else (-math.inf, math.inf)))
        indicators = IndicatorMatrix(
            tuple(r.id for r in respondents), tuple(ind_names), ind_values, float(lo), float(hi),
            np.isnan(ind_values),
        )
    return SyntheticData(choices, indicators, classes, factors, gspec.seed)


def desk_scenario(
    n_classes: int = 3,
    n_respondents: int = 1000,
    n_situations: int = 8,
    seed: int = 0,
) -> GeneratorSpec:
    """Two-alternative job-choice design with remote-work days/hours and wages ($1,000)."""
    utility = UtilitySpec(
        (("days", NONNEGATIVE), ("hours", NONNEGATIVE), ("wage", NONNEGATIVE))
    )
    table = np.array(
        [
            [0.2, 0.1, 0.45],
            [2.5, 0.2, 0.40],
            [3.0, 2.0, 0.12],
            [0.5, 3.0, 0.30],
        ]
    )[:n_classes]
    alpha = np.zeros((n_classes, 1))
    alpha[1:, 0] = np.linspace(-0.2, -0.4, n_classes - 1) if n_classes > 1 else []
    return GeneratorSpec(
        spec=ModelSpec(n_classes, utility),
        true_params=Params(alpha, table),
        n_respondents=n_respondents,
        n_situations=n_situations,
        alternatives=("1", "2"),
        attribute_law={
            "days": AttributeLaw(levels=(0.0, 1.0)),
            "hours": AttributeLaw(levels=(0.0, 1.0)),
            "wage": AttributeLaw(low=60.0, high=100.0),
        },
        seed=seed,
    )


def recovery_scenario(kernel: str = "MNL", n_respondents: int = 1000, n_situations: int = 8,
                      seed: int = 0) -> GeneratorSpec:
    """Three well-separated classes over three alternatives with free coefficients.

    With ``kernel="NL"`` alternatives 1 and 2 share a nest with lambda 0.6 in
    every class; alternative 3 is a singleton.
    """
    utility = UtilitySpec((("x1", FREE), ("x2", FREE), ("x3", FREE)))
    beta = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, 1.0], [0.5, 0.5, -2.0]])
    alpha = np.array([[0.0], [-0.3], [-0.6]])
    nests, lambdas = None, None
    if kernel.upper() == "NL":
        nests = NestStructure((("1", "2"), ("3",)))
        lambdas = np.tile([0.6, 1.0], (3, 1))
    elif kernel.upper() != "MNL":
        raise GeneratorError(f"unknown kernel {kernel!r}")
    law = AttributeLaw(low=-1.5, high=1.5)
    return GeneratorSpec(
        spec=ModelSpec(3, utility, nests),
        true_params=Params(alpha, beta, lambdas),
        n_respondents=n_respondents,
        n_situations=n_situations,
        alternatives=("1", "2", "3"),
        attribute_law={"x1": law, "x2": law, "x3": law},
        seed=seed,
    )


def indicator_scenario(n_respondents: int = 1000, n_situations: int = 8, seed: int = 0) -> GeneratorSpec:
    """Membership driven by two Likert indicators; class kernels strongly separated.

    A third indicator is pure noise. Long, informative choice sequences make
    posteriors nearly crisp, the regime where sequential and simultaneous
    membership estimates coincide.
    """
    g = recovery_scenario("MNL", n_respondents, n_situations, seed)
    names = ("att_a", "att_b", "att_noise")
    alpha = np.array([[0.0, 0.0, 0.0, 0.0], [-2.0, 0.6, -0.1, 0.0], [1.0, -0.2, -0.5, 0.0]])
    spec = ModelSpec(3, g.spec.utility, membership_covariates=names)
    return replace(
        g,
        spec=spec,
        true_params=Params(alpha, 2.0 * g.true_params.beta),
        indicator_law=IndicatorLaw(names, np.full((1, 3), 4.0), sd=1.6),
        membership_source="indicators",
    )


def factor_scenario(loadings, n_respondents: int = 5000, seed: int = 0, discretize: bool = False,
                    n_situations: int = 1) -> GeneratorSpec:
    """Indicators from a known common-factor model over a one-class choice scaffold."""
    utility = UtilitySpec((("x1", FREE),))
    law = FactorLaw(np.asarray(loadings, dtype=float), discretize=discretize)
    return GeneratorSpec(
        spec=ModelSpec(1, utility),
        true_params=Params([[0.0]], [[1.0]]),
        n_respondents=n_respondents,
        n_situations=n_situations,
        alternatives=("1", "2"),
        attribute_law={"x1": AttributeLaw(low=-1.0, high=1.0)},
        factor_law=law,
        seed=seed,
    )


def generator_from_dict(d: dict) -> GeneratorSpec:
    """Build a generator from a config block.

    Either ``{"scenario": "desk"|"recovery"|"indicator", ...}`` with optional
    ``kernel``, ``n_classes``, ``n_respondents``, ``n_situations``, ``seed``;
    or an explicit ``model``/``true_params``/``alternatives``/``attributes``
    description.
    """
    seed = int(d.get("seed", 0))
    N = int(d.get("n_respondents", 1000))
    T = int(d.get("n_situations", 8))
    scenario = d.get("scenario")
    if scenario == "desk":
        return desk_scenario(int(d.get("n_classes", 3)), N, T, seed)
    if scenario == "recovery":
        return recovery_scenario(d.get("kernel", "MNL"), N, T, seed)
    if scenario == "indicator":
        return indicator_scenario(N, T, seed)
    if scenario is not None:
        raise GeneratorError(f"unknown scenario {scenario!r}")
    try:
        attrs = {
            k: AttributeLaw(tuple(v["levels"]) if "levels" in v else None, float(v.get("low", 0.0)),
                            float(v.get("high", 1.0)), tuple(v["alternatives"]) if "alternatives" in v else None)
            for k, v in d["attributes"].items()
        }
        ind = d.get("indicators")
        return GeneratorSpec(
            spec=ModelSpec.from_dict(d["model"]),
            true_params=Params.from_dict(d["true_params"]),
            n_respondents=N,
            n_situations=T,
            alternatives=tuple(str(a) for a in d["alternatives"]),
            attribute_law=attrs,
            indicator_law=None if ind is None else IndicatorLaw(
                tuple(ind["names"]), np.asarray(ind["class_means"], dtype=float), float(ind.get("sd", 1.0)),
                tuple(ind.get("scale", (1.0, 7.0)))),
            membership_source=d.get("membership_source", "none"),
            covariate_law={k: tuple(v) for k, v in d.get("covariates", {}).items()},
            seed=seed,
        )
    except KeyError as exc:
        raise GeneratorError(f"generator config is missing {exc.args[0]!r}") from exc


# --------------------------------------------------------------------------
# Oracles
# --------------------------------------------------------------------------


def naive_choice_probs(u, avail, nest_of=None, lambdas=None) -> np.ndarray:
    """Closed-form MNL / NL probabilities using plain exponentials (no log-sum-exp)."""
    u = np.asarray(u, dtype=float)
    avail = np.asarray(avail, dtype=bool)
    P = np.zeros(u.size)
    if nest_of is None:
        e = [math.exp(u[j]) if avail[j] else 0.0 for j in range(u.size)]
        tot = sum(e)
        return np.array([v / tot for v in e])
    nest_of = np.asarray(nest_of)
    sums = {}
    for j in range(u.size):
        if avail[j]:
            m = int(nest_of[j])
            sums[m] = sums.get(m, 0.0) + math.exp(u[j] / lambdas[m])
    denom = sum(s ** lambdas[m] for m, s in sums.items())
    for j in range(u.size):
        if avail[j]:
            m = int(nest_of[j])
            P[j] = math.exp(u[j] / lambdas[m]) * sums[m] ** (lambdas[m] - 1.0) / denom
    return P


def _naive_class_likelihoods(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> np.ndarray:
    names = dataset.attribute_names
    alts = dataset.alternative_ids
    nest_of = spec.nests.nest_index(alts) if spec.nests is not None else None
    out = np.ones((dataset.n_respondents, spec.n_classes))
    for n, r in enumerate(dataset.respondents):
        for c in range(spec.n_classes):
            lik = 1.0
            for s in r.situations:
                x = _situation_design(spec.utility, s.attributes, names, alts)
                u = [sum(x[j, d] * params.beta[c, d] for d in range(x.shape[1])) for j in range(x.shape[0])]
                lam = None if params.lambdas is None else params.lambdas[c]
                lik *= naive_choice_probs(u, s.available, nest_of, lam)[s.chosen]
            out[n, c] = lik
    return out


def _naive_priors(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> np.ndarray:
    Z = dataset.covariate_matrix(spec.membership_covariates)
    out = np.zeros((dataset.n_respondents, spec.n_classes))
    for n in range(dataset.n_respondents):
        z = [1.0, *Z[n]]
        e = [math.exp(sum(params.alpha[c, k] * z[k] for k in range(len(z)))) for c in range(spec.n_classes)]
        tot = sum(e)
        out[n] = [v / tot for v in e]
    return out


def _guard_size(dataset: ChoiceDataset, spec: ModelSpec):
    T = max(len(r.situations) for r in dataset.respondents)
    if dataset.n_respondents > 20 or T > 5 or spec.n_classes > 4:
        raise GeneratorError("brute-force oracle limited to N <= 20, T <= 5, C <= 4")


def brute_force_marginal(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> np.ndarray:
    """Per-respondent sum_c P(c) prod_t P(y_nt | c) by direct arithmetic."""
    _guard_size(dataset, spec)
    prior = _naive_priors(dataset, params, spec)
    lik = _naive_class_likelihoods(dataset, params, spec)
    return np.array([sum(prior[n, c] * lik[n, c] for c in range(spec.n_classes))
                     for n in range(dataset.n_respondents)])


def brute_force_posterior(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> np.ndarray:
    """Bayes' rule with plain arithmetic: P(c) P(y|c) / sum_c' P(c') P(y|c')."""
    _guard_size(dataset, spec)
    prior = _naive_priors(dataset, params, spec)
    lik = _naive_class_likelihoods(dataset, params, spec)
    joint = prior * lik
    return joint / joint.sum(axis=1, keepdims=True)


def finite_diff_gradient(objective, point, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``step * max(1, |x_i|)`` per coordinate."""
    x = np.asarray(point, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = objective(x + e), objective(x - e)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GeneratorError(f"objective not finite near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def classical_anova_f(groups) -> float:
    """One-way ANOVA F from hard group memberships (textbook sums of squares)."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    allv = np.concatenate(groups)
    grand = sum(allv) / len(allv)
    ssb = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = sum(sum((v - sum(g) / len(g)) ** 2 for v in g) for g in groups)
    k, n = len(groups), len(allv)
    return (ssb / (k - 1)) / (ssw / (n - k))


def classical_welch_t(a, b) -> tuple[float, float]:
    """Welch two-sample t statistic and Welch-Satterthwaite df (unbiased variances)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
    vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
    qa, qb = va / len(a), vb / len(b)
    t = (ma - mb) / math.sqrt(qa + qb)
    df = (qa + qb) ** 2 / (qa**2 / (len(a) - 1) + qb**2 / (len(b) - 1))
    return t, df


__all__ = [
    "AttributeLaw",
    "IndicatorLaw",
    "FactorLaw",
    "GeneratorSpec",
    "SyntheticData",
    "generate",
    "GeneratorError",
    "desk_scenario",
    "recovery_scenario",
    "indicator_scenario",
    "factor_scenario",
    "generator_from_dict",
    "naive_choice_probs",
    "brute_force_marginal",
    "brute_force_posterior",
    "finite_diff_gradient",
    "classical_anova_f",
    "classical_welch_t",
]
