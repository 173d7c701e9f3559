"""Side-by-side comparison of three ways to relate covariates to class membership.

(a) fractional logit of baseline posteriors on the covariates, (b) a latent
class model estimated with the covariates in its membership model, and
(c) a sequential fit that re-estimates only the membership model with the
baseline class kernels frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import ChoiceDataset, IndicatorMatrix
from .fmnl import FmnlResult, estimate_fmnl
from .lccm import (
    EstimateOptions,
    EstimationResult,
    ModelSpec,
    estimate,
    estimate_sequential_membership,
)
from .posterior import PosteriorMatrix, posterior_membership

T_THRESHOLD = 3.0
METHODS = ("fmnl", "simultaneous", "sequential")


@dataclass
class Comparison:
    row_names: list[str]  # "class{c}.{covariate}"
    estimates: dict[str, np.ndarray]  # method -> (R,)
    std_errors: dict[str, np.ndarray]
    fmnl_t: np.ndarray
    baseline: EstimationResult
    simultaneous: EstimationResult
    sequential: EstimationResult
    fmnl: FmnlResult
    posterior: PosteriorMatrix
    summary: dict = field(default_factory=dict)

    def rows(self) -> list[list[str]]:
        head = ["coefficient"]
        for m in METHODS:
            head += [f"{m} est", f"{m} se"]
        head.append("fmnl |t|")
        out = [head]
        for i, name in enumerate(self.row_names):
            row = [name]
            for m in METHODS:
                row += [_cell(self.estimates[m][i]), _cell(self.std_errors[m][i])]
            row.append(_cell(abs(self.fmnl_t[i])))
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "coefficients": [
                {"name": n, **{m: float(self.estimates[m][i]) for m in METHODS},
                 "fmnl_t": float(self.fmnl_t[i])}
                for i, n in enumerate(self.row_names)
            ],
            "summary": self.summary,
            "baseline_loglik": self.baseline.loglik,
            "simultaneous_loglik": self.simultaneous.loglik,
            "sequential_loglik": self.sequential.loglik,
        }


def _cell(v) -> str:
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _membership_block(result: EstimationResult, names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    table = result.table()
    C = result.spec.n_classes
    est, se = [], []
    for c in range(C):
        if c == result.spec.reference_class:
            continue
        for nm in ["const", *names]:
            e, s, _ = table[f"class{c + 1}.membership.{nm}"]
            est.append(e)
            se.append(np.nan if s is None else s)
    return np.array(est), np.array(se)


def agreement_summary(estimates: dict[str, np.ndarray], fmnl_t: np.ndarray, row_names: list[str],
                      threshold: float = T_THRESHOLD) -> dict:
    """Sign agreement and size of disagreement on coefficients with |t| > threshold in the FMNL fit."""
    strong = np.abs(fmnl_t) > threshold
    E = np.vstack([estimates[m] for m in METHODS])[:, strong]
    if E.shape[1] == 0:
        return {"t_threshold": threshold, "n_strong": 0, "strong": [],
                "sign_agreement_rate": None, "max_abs_difference": None, "max_rel_difference": None}
    signs = np.sign(E)
    agree = np.all(signs == signs[0], axis=0)
    spread = E.max(axis=0) - E.min(axis=0)
    rel = spread / np.abs(E[0])
    return {
        "t_threshold": threshold,
        "n_strong": int(strong.sum()),
        "strong": [n for n, s in zip(row_names, strong) if s],
        "sign_agreement_rate": float(agree.mean()),
        "max_abs_difference": float(spread.max()),
        "max_rel_difference": float(rel.max()),
    }


def compare_membership_models(
    choices: ChoiceDataset,
    covariates: IndicatorMatrix,
    spec: ModelSpec,
    options: EstimateOptions | None = None,
    baseline: EstimationResult | None = None,
) -> Comparison:
    """Run the three membership analyses on complete-case respondents.

    ``spec`` describes the class kernels; its membership covariates are
    ignored (the baseline is constants-only). ``covariates`` must be aligned
    to the choice respondents.
    """
    opts = options or EstimateOptions()
    names = list(covariates.indicator_names)
    cov = covariates.align(choices.respondent_ids)
    X = np.where(cov.missing_mask, np.nan, cov.values)
    complete = ~np.isnan(X).any(axis=1)
    ids = [r for r, ok in zip(cov.respondent_ids, complete) if ok]
    data = choices.subset(ids).with_covariates(names, X[complete], ids)

    base_spec = replace(spec, membership_covariates=())
    if baseline is None:
        baseline = estimate(data, base_spec, opts)
    post = posterior_membership(data, baseline)
    fm = estimate_fmnl(post, X[complete], names, reference=spec.reference_class)

    model_spec = replace(spec, membership_covariates=tuple(names))
    match = replace(opts, order_by={"by": "match", "beta": baseline.params.beta.tolist()})
    simul = estimate(data, model_spec, match)
    seq = estimate_sequential_membership(data, baseline, names)

    keep = [c for c in range(spec.n_classes) if c != spec.reference_class]
    row_names = [f"class{c + 1}.{n}" for c in keep for n in fm.row_names]
    estimates = {"fmnl": fm.gamma[keep].ravel()}
    ses = {"fmnl": fm.robust_se[keep].ravel()}
    for key, res in (("simultaneous", simul), ("sequential", seq)):
        estimates[key], ses[key] = _membership_block(res, names)
    t = fm.t_stats[keep].ravel()
    return Comparison(
        row_names, estimates, ses, t, baseline, simul, seq, fm, post,
        agreement_summary(estimates, t, row_names),
    )
