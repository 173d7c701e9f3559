"""Posterior class membership and posterior-weighted profiling statistics.

Each respondent contributes to every class in proportion to their posterior
membership probability. From these weights we compute class means and
variances of an indicator (or factor score), a weighted one-way ANOVA F and
pairwise Welch-type t statistics based on Kish effective sample sizes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .dataset import ChoiceDataset, IndicatorMatrix, _write_text
from .lccm import EstimationError, EstimationResult, _Problem

F_FORM = "between-class mean square / within-class mean square, df (C-1, N-C)"


class PosteriorError(ValueError):
    pass


@dataclass
class PosteriorMatrix:
    respondent_ids: list
    probs: np.ndarray  # (N, C)

    def __post_init__(self):
        self.respondent_ids = list(self.respondent_ids)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2 or self.probs.shape[0] != len(self.respondent_ids):
            raise PosteriorError("probs must be N x C and aligned with respondent_ids")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def from_log_scores(cls, respondent_ids, log_scores) -> PosteriorMatrix:
        """Normalise unnormalised log posteriors row-wise."""
        L = np.asarray(log_scores, dtype=float)
        return cls(respondent_ids, np.exp(L - logsumexp(L, axis=1, keepdims=True)))

    def align(self, ids: Sequence[str]) -> PosteriorMatrix:
        row_of = {rid: i for i, rid in enumerate(self.respondent_ids)}
        missing = [i for i in ids if i not in row_of]
        if missing:
            raise PosteriorError(f"no posterior for respondent {missing[0]!r}")
        return PosteriorMatrix(list(ids), self.probs[[row_of[i] for i in ids]])

    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resp_id", *[f"p_class_{c + 1}" for c in range(self.n_classes)]])
        for rid, row in zip(self.respondent_ids, self.probs):
            w.writerow([rid, *[repr(float(v)) for v in row]])
        text = buf.getvalue()
        if dest is not None:
            _write_text(dest, text)
        return text

    @classmethod
    def from_csv(cls, source) -> PosteriorMatrix:
        from .dataset import _parse_rows, _read_source, _to_float

        header, rows = _parse_rows(_read_source(source))
        if not header or header[0] != "resp_id" or len(header) < 2:
            raise PosteriorError("posterior CSV must start with resp_id, p_class_1, ...")
        probs = [[_to_float(v, f"posterior {h}") for v, h in zip(r[1:], header[1:])] for r in rows]
        return cls([r[0] for r in rows], np.array(probs, dtype=float).reshape(len(rows), len(header) - 1))


def posterior_membership(dataset: ChoiceDataset, result: EstimationResult) -> PosteriorMatrix:
    """Bayes posterior class probabilities for every respondent in ``dataset``.

    Uses the same log-space class likelihoods and priors as the marginal
    log-likelihood, so the two are consistent by construction.
    """
    try:
        prob = _Problem(dataset, result.spec)
        _, h, _ = prob.evaluate(result.params)
    except (EstimationError, ValueError, IndexError) as exc:
        raise PosteriorError(f"result does not match dataset: {exc}") from exc
    return PosteriorMatrix(list(dataset.respondent_ids), h)


# --------------------------------------------------------------------------
# Weighted statistics
# --------------------------------------------------------------------------


def _weights_and_values(posterior, values, missing=None):
    W = np.asarray(getattr(posterior, "probs", posterior), dtype=float)
    x = np.asarray(values, dtype=float).ravel()
    if W.ndim != 2 or W.shape[0] != x.size:
        raise PosteriorError("posterior and values are not row-aligned")
    miss = np.isnan(x) if missing is None else (np.asarray(missing, dtype=bool) | np.isnan(x))
    keep = ~miss
    if keep.sum() < 2:
        raise PosteriorError("fewer than two non-missing values")
    return W[keep], x[keep]


def kish_effective_n(w) -> float:
    """(sum w)^2 / sum w^2; exact for equal weights."""
    w = np.asarray(w, dtype=float)
    top = w.max(initial=0.0)
    if top <= 0:
        return 0.0
    w = w / top
    s = w.sum()
    return float(s * s / np.dot(w, w))


def _class_moments(W, x):
    mass = W.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (W * x[:, None]).sum(axis=0) / mass
        dev = x[:, None] - np.where(mass > 0, means, 0.0)[None, :]
        var = (W * dev**2).sum(axis=0) / mass
    means = np.where(mass > 0, means, np.nan)
    var = np.where(mass > 0, var, np.nan)
    return mass, means, var


def class_profile(posterior, values, missing=None):
    """Posterior-weighted class means, variances and effective sizes.

    Returns ``(means, vars, effective_n)``, each of length C. Classes with no
    posterior weight among non-missing respondents get NaN mean and variance.
    """
    W, x = _weights_and_values(posterior, values, missing)
    _, means, var = _class_moments(W, x)
    eff = np.array([kish_effective_n(W[:, c]) for c in range(W.shape[1])])
    return means, var, eff


@dataclass(frozen=True)
class AnovaResult:
    f: float
    df1: int
    df2: int
    p: float


def weighted_anova(posterior, values, missing=None) -> AnovaResult:
    """Posterior-weighted one-way ANOVA F across classes."""
    W, x = _weights_and_values(posterior, values, missing)
    N, C = W.shape
    mass, means, _ = _class_moments(W, x)
    live = mass > 0
    if live.sum() < 2:
        raise PosteriorError("ANOVA needs at least two classes with positive weight")
    df1, df2 = C - 1, N - C
    if df2 <= 0:
        raise PosteriorError("ANOVA needs more respondents than classes")
    grand = x.mean()
    between = float(np.sum(mass[live] * (means[live] - grand) ** 2)) / df1
    within = float(np.sum(W[:, live] * (x[:, None] - means[None, live]) ** 2)) / df2
    if within <= 0:
        return AnovaResult(math.inf, df1, df2, 0.0)
    F = between / within
    return AnovaResult(F, df1, df2, float(stats.f.sf(F, df1, df2)))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float


def _welch(m1, v1, n1, m2, v2, n2) -> TTestResult:
    # Var * n/(n-1) is the unbiased variance; divided by n it leaves Var/(n-1).
    # With crisp weights this is exactly the textbook Welch test.
    a = v1 / (n1 - 1)
    b = v2 / (n2 - 1)
    diff = m1 - m2
    se2 = a + b
    if se2 <= 0:
        if diff == 0:
            return TTestResult(0.0, math.nan, 1.0)
        return TTestResult(math.copysign(math.inf, diff), math.nan, 0.0)
    t = diff / math.sqrt(se2)
    df = se2**2 / (a * a / (n1 - 1) + b * b / (n2 - 1))
    return TTestResult(t, df, float(2.0 * stats.t.sf(abs(t), df)))


def pairwise_t(posterior, values, c: int, c2: int, missing=None) -> TTestResult:
    """Welch-type t of class ``c`` minus class ``c2`` (zero-based indices)."""
    W, x = _weights_and_values(posterior, values, missing)
    _, means, var = _class_moments(W, x)
    n1, n2 = kish_effective_n(W[:, c]), kish_effective_n(W[:, c2])
    if n1 < 2 or n2 < 2:
        raise PosteriorError("pairwise t needs effective size >= 2 in both classes")
    return _welch(means[c], var[c], n1, means[c2], var[c2], n2)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class ProfileReport:
    name: str
    class_means: np.ndarray
    class_vars: np.ndarray
    effective_n: np.ndarray
    anova: AnovaResult | None
    pairwise: dict = field(default_factory=dict)  # (c, c2) -> TTestResult, c < c2
    n_used: int = 0

    def t_matrix(self) -> np.ndarray:
        """C x C upper-triangular t statistics (NaN elsewhere)."""
        C = self.class_means.size
        T = np.full((C, C), np.nan)
        for (a, b), r in self.pairwise.items():
            T[a, b] = r.t
        return T


def _profile_one(name, W, x) -> ProfileReport:
    mass, means, var = _class_moments(W, x)
    eff = np.array([kish_effective_n(W[:, c]) for c in range(W.shape[1])])
    try:
        anova = weighted_anova(W, x)
    except PosteriorError:
        anova = None
    pairs = {}
    for a, b in combinations(range(W.shape[1]), 2):
        if eff[a] >= 2 and eff[b] >= 2:
            pairs[(a, b)] = _welch(means[a], var[a], eff[a], means[b], var[b], eff[b])
        else:
            pairs[(a, b)] = TTestResult(math.nan, math.nan, math.nan)
    return ProfileReport(name, means, var, eff, anova, pairs, int(x.size))


@dataclass
class ProfileCollection:
    reports: list[ProfileReport]
    n_classes: int

    @property
    def n_tests(self) -> int:
        """Number of hypothesis tests performed (no multiplicity correction applied)."""
        per = 1 + self.n_classes * (self.n_classes - 1) // 2
        return per * len(self.reports)

    def metadata(self) -> dict:
        return {"f_statistic": F_FORM, "t_statistic": "Welch with Kish effective sizes",
                "n_tests": self.n_tests, "multiple_comparison_correction": "none"}

    def _columns(self):
        C = self.n_classes
        pairs = list(combinations(range(C), 2))
        head = ["variable", *[f"class {c + 1} mean" for c in range(C)],
                *[f"class {c + 1} N_eff" for c in range(C)], "F", "F p"]
        head += [f"{a + 1} vs {b + 1}" for a, b in pairs] + [f"{a + 1} vs {b + 1} p" for a, b in pairs]
        return head, pairs

    def rows(self) -> list[list[str]]:
        head, pairs = self._columns()
        out = [head]
        for r in self.reports:
            f = r.anova
            row = [r.name, *[_num(v) for v in r.class_means], *[_num(v) for v in r.effective_n],
                   _num(f.f if f else math.nan), _num(f.p if f else math.nan)]
            row += [_num(r.pairwise[p].t) for p in pairs] + [_num(r.pairwise[p].p) for p in pairs]
            out.append(row)
        return out

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        text = buf.getvalue()
        if dest is not None:
            _write_text(dest, text)
        return text

    def to_markdown(self, dest=None, digits: int = 2) -> str:
        rows = self.rows()
        lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        for r in rows[1:]:
            cells = [r[0]] + [_short(v, digits) for v in r[1:]]
            lines.append("| " + " | ".join(cells) + " |")
        meta = self.metadata()
        lines += ["", f"F: {meta['f_statistic']}. t: {meta['t_statistic']}. "
                      f"{meta['n_tests']} tests, no multiple-comparison correction."]
        text = "\n".join(lines) + "\n"
        if dest is not None:
            _write_text(dest, text)
        return text


def _num(v) -> str:
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def _short(text: str, digits: int) -> str:
    if text == "":
        return ""
    v = float(text)
    return f"{v:.{digits}f}" if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def profile_report(posterior, data, names: Sequence[str] | None = None) -> ProfileCollection:
    """Profile every column of ``data`` against the posterior classes.

    ``data`` is an IndicatorMatrix (aligned to the posterior's respondent ids)
    or an (N, K) array row-aligned with the posterior.
    """
    if isinstance(data, IndicatorMatrix):
        if isinstance(posterior, PosteriorMatrix):
            common = [r for r in posterior.respondent_ids if r in set(data.respondent_ids)]
            posterior = posterior.align(common)
            data = data.align(common)
        names = list(data.indicator_names) if names is None else list(names)
        X = np.where(data.missing_mask, np.nan, data.values)
    else:
        X = np.asarray(data, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        names = [f"x{k + 1}" for k in range(X.shape[1])] if names is None else list(names)
    W = np.asarray(getattr(posterior, "probs", posterior), dtype=float)
    if W.shape[1] < 2:
        raise PosteriorError("profiling requires C ≥ 2 classes")
    if W.shape[0] != X.shape[0]:
        raise PosteriorError("posterior and data are not row-aligned")
    reports = []
    for k, name in enumerate(names):
        keep = ~np.isnan(X[:, k])
        if keep.sum() < 2:
            raise PosteriorError(f"column {name!r} has fewer than two non-missing values")
        reports.append(_profile_one(name, W[keep], X[keep, k]))
    return ProfileCollection(reports, W.shape[1])
